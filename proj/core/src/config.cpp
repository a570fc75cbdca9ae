#include "hyperconv/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace hyperconv {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::int64_t> parse_int_list(const std::string& s) {
  std::vector<std::int64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(std::stoll(item));
  }
  if (out.empty()) throw std::invalid_argument("expected a comma-separated integer list, got '" + s + "'");
  return out;
}

std::string int_list_to_string(const std::vector<std::int64_t>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ',';
    os << v[i];
  }
  return os.str();
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw std::invalid_argument("expected a boolean, got '" + s + "'");
}

class KvReader {
 public:
  explicit KvReader(const std::map<std::string, std::string>& kv) : kv_(kv) {}

  bool has(const std::string& k) const { return kv_.count(k) > 0; }
  std::string str(const std::string& k, const std::string& dflt) const {
    auto it = kv_.find(k);
    return it == kv_.end() ? dflt : it->second;
  }
  std::int64_t integer(const std::string& k, std::int64_t dflt) const {
    auto it = kv_.find(k);
    return it == kv_.end() ? dflt : std::stoll(it->second);
  }
  double real(const std::string& k, double dflt) const {
    auto it = kv_.find(k);
    return it == kv_.end() ? dflt : std::stod(it->second);
  }
  bool boolean(const std::string& k, bool dflt) const {
    auto it = kv_.find(k);
    return it == kv_.end() ? dflt : parse_bool(it->second);
  }

 private:
  const std::map<std::string, std::string>& kv_;
};

}  // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + " is not 'key = value': " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + " has an empty key");
    kv[key] = value;
  }
  return kv;
}

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return parse_kv_text(buf.str());
}

std::string network_config_to_text(const NetworkConfig& cfg) {
  std::ostringstream os;
  os << "variant = " << to_string(cfg.variant) << "\n";
  os << "stage_depths = " << int_list_to_string(cfg.stage_depths) << "\n";
  os << "stage_channels = " << int_list_to_string(cfg.stage_channels) << "\n";
  os << "stem_channels = " << cfg.stem_channels << "\n";
  os << "num_classes = " << cfg.num_classes << "\n";
  os << "expansion = " << cfg.expansion << "\n";
  os << "weight_shared = " << (cfg.weight_shared ? "true" : "false") << "\n";
  os << "batchnorm = " << (cfg.batchnorm ? "true" : "false") << "\n";
  os << "activation = " << to_string(cfg.activation) << "\n";
  os << "activation_placement = " << to_string(cfg.placement) << "\n";
  os << "activation_radius = " << cfg.activation_radius << "\n";
  os << "hardtanh_min = " << cfg.hardtanh_min << "\n";
  os << "hardtanh_max = " << cfg.hardtanh_max << "\n";
  os << "image_size = " << cfg.image_size << "\n";
  os << "input_channels = " << cfg.input_channels << "\n";
  os << "seed = " << cfg.seed << "\n";
  return os.str();
}

NetworkConfig network_config_from_kv(const std::map<std::string, std::string>& kv) {
  KvReader r(kv);
  NetworkConfig cfg;
  cfg.variant = block_variant_from_string(r.str("variant", "eq3"));
  if (r.has("stage_depths")) cfg.stage_depths = parse_int_list(kv.at("stage_depths"));
  if (r.has("stage_channels")) cfg.stage_channels = parse_int_list(kv.at("stage_channels"));
  cfg.stem_channels = r.integer("stem_channels", cfg.stem_channels);
  cfg.num_classes = r.integer("num_classes", cfg.num_classes);
  cfg.expansion = r.integer("expansion", cfg.expansion);
  cfg.weight_shared = r.boolean("weight_shared", cfg.weight_shared);
  cfg.batchnorm = r.boolean("batchnorm", cfg.batchnorm);
  cfg.activation = activation_kind_from_string(r.str("activation", "softball"));
  cfg.placement = placement_from_string(r.str("activation_placement", "at_downsample"));
  cfg.activation_radius = r.real("activation_radius", cfg.activation_radius);
  cfg.hardtanh_min = r.real("hardtanh_min", cfg.hardtanh_min);
  cfg.hardtanh_max = r.real("hardtanh_max", cfg.hardtanh_max);
  cfg.image_size = r.integer("image_size", cfg.image_size);
  cfg.input_channels = r.integer("input_channels", cfg.input_channels);
  cfg.seed = static_cast<std::uint64_t>(r.integer("seed", static_cast<std::int64_t>(cfg.seed)));
  cfg.validate();
  return cfg;
}

NetworkConfig network_config_from_text(const std::string& text) {
  return network_config_from_kv(parse_kv_text(text));
}

void TrainConfig::validate() const {
  if (!(peak_lr > 0)) throw std::invalid_argument("train: peak_lr must be positive");
  if (warmup_epochs < 0 || warmup_epochs >= total_epochs)
    throw std::invalid_argument("train: need 0 <= warmup_epochs < total_epochs");
  if (batch_size <= 0) throw std::invalid_argument("train: batch_size must be positive");
  if (!(backoff_factor > 0.0 && backoff_factor < 1.0))
    throw std::invalid_argument("train: backoff_factor must lie in (0,1)");
  if (max_backoffs <= 0) throw std::invalid_argument("train: max_backoffs must be positive");
}

TrainConfig train_config_from_kv(const std::map<std::string, std::string>& kv) {
  KvReader r(kv);
  TrainConfig cfg;
  cfg.peak_lr = r.real("peak_lr", cfg.peak_lr);
  cfg.warmup_epochs = r.integer("warmup_epochs", cfg.warmup_epochs);
  cfg.total_epochs = r.integer("total_epochs", cfg.total_epochs);
  cfg.batch_size = r.integer("batch_size", cfg.batch_size);
  cfg.momentum = r.real("momentum", cfg.momentum);
  cfg.weight_decay = r.real("weight_decay", cfg.weight_decay);
  cfg.seed = static_cast<std::uint64_t>(r.integer("train_seed", static_cast<std::int64_t>(cfg.seed)));
  cfg.backoff_factor = r.real("backoff_factor", cfg.backoff_factor);
  cfg.max_backoffs = r.integer("max_backoffs", cfg.max_backoffs);
  cfg.augment_hflip = r.boolean("augment_hflip", cfg.augment_hflip);
  cfg.validate();
  return cfg;
}

std::string train_config_to_text(const TrainConfig& cfg) {
  std::ostringstream os;
  os << "peak_lr = " << cfg.peak_lr << "\n";
  os << "warmup_epochs = " << cfg.warmup_epochs << "\n";
  os << "total_epochs = " << cfg.total_epochs << "\n";
  os << "batch_size = " << cfg.batch_size << "\n";
  os << "momentum = " << cfg.momentum << "\n";
  os << "weight_decay = " << cfg.weight_decay << "\n";
  os << "train_seed = " << cfg.seed << "\n";
  os << "backoff_factor = " << cfg.backoff_factor << "\n";
  os << "max_backoffs = " << cfg.max_backoffs << "\n";
  os << "augment_hflip = " << (cfg.augment_hflip ? "true" : "false") << "\n";
  return os.str();
}

}  // namespace hyperconv
