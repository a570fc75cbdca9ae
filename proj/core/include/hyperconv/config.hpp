#pragma once

#include <map>
#include <string>

#include "hyperconv/network.hpp"

namespace hyperconv {

/// Flat `key = value` text, one entry per line, `#` starts a comment.
std::map<std::string, std::string> parse_kv_text(const std::string& text);
std::map<std::string, std::string> parse_kv_file(const std::string& path);

std::string network_config_to_text(const NetworkConfig& cfg);
NetworkConfig network_config_from_text(const std::string& text);
NetworkConfig network_config_from_kv(const std::map<std::string, std::string>& kv);

struct TrainConfig {
  double peak_lr = 0.3;
  std::int64_t warmup_epochs = 5;
  std::int64_t total_epochs = 50;
  std::int64_t batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  double backoff_factor = 0.5;
  std::int64_t max_backoffs = 3;
  bool augment_hflip = false;

  void validate() const;
};

TrainConfig train_config_from_kv(const std::map<std::string, std::string>& kv);
std::string train_config_to_text(const TrainConfig& cfg);

}  // namespace hyperconv
