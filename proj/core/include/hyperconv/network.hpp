#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hyperconv/blocks.hpp"

namespace hyperconv {

enum class ActivationPlacement { AtDownsample, AllBlocks };

ActivationPlacement placement_from_string(const std::string& s);
std::string to_string(ActivationPlacement p);

struct NetworkConfig {
  BlockVariant variant = BlockVariant::Eq3;
  std::vector<std::int64_t> stage_depths{3, 4, 6, 3};
  std::vector<std::int64_t> stage_channels{64, 128, 256, 512};
  std::int64_t stem_channels = 64;
  std::int64_t num_classes = 100;
  std::int64_t expansion = 4;
  bool weight_shared = true;
  bool batchnorm = true;
  ActivationKind activation = ActivationKind::Softball;
  ActivationPlacement placement = ActivationPlacement::AtDownsample;
  /// 0 selects the default ball radius sqrt(stage width).
  double activation_radius = 0.0;
  double hardtanh_min = -1.0;
  double hardtanh_max = 1.0;
  std::int64_t image_size = 224;
  std::int64_t input_channels = 3;
  std::uint64_t seed = 1;

  void validate() const;
  Activation make_activation(std::int64_t channels) const;
};

/// 1x1 stride-2 conv (+ batchnorm) between stages. Used by Eq5, whose blocks
/// cannot change width, and by TensorForm stages.
struct Transition {
  Tensor w;  // [out, in]
  std::optional<BatchNormState> bn;
};

struct BlockUnit {
  BlockConfig cfg;
  BlockWeights weights;
};

struct StageWeights {
  std::optional<Transition> transition;
  std::vector<BlockUnit> blocks;
};

struct Model {
  NetworkConfig cfg;
  Tensor stem_conv1;  // [c0, in, 7, 7] stride 2
  Tensor stem_conv2;  // [c0, c0, 3, 3] stride 2
  std::optional<BatchNormState> stem_bn1, stem_bn2;
  std::vector<StageWeights> stages;
  Tensor head_w;  // [classes, c_last]
  Tensor head_b;  // [classes]
};

Model build_network(const NetworkConfig& cfg);

/// Records the whole network; parameters bind to the model's tensors so a
/// later backward() fills their grads. Train mode updates batchnorm running
/// statistics in place.
NodeId network_forward(Graph& g, Model& model, NodeId images, BatchNormMode mode);

/// Convenience eval-mode forward on a throwaway graph.
Tensor run_logits(Model& model, const Tensor& images, BatchNormMode mode = BatchNormMode::Eval);

std::int64_t count_parameters(const Model& model);

struct NamedTensor {
  std::string name;
  Tensor* tensor;
  bool trainable;
};

/// Every weight and batchnorm statistic, in a fixed architecture order.
std::vector<NamedTensor> state_tensors(Model& model);
std::vector<NamedTensor> trainable_parameters(Model& model);

/// Checkpoint container: magic "HCPT", version, a key=value manifest of the
/// NetworkConfig, then named TNSR records for every state tensor.
void save_checkpoint(Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace hyperconv
