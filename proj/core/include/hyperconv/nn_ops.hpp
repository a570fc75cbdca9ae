#pragma once

#include <cstdint>

#include "hyperconv/tensor.hpp"

namespace hyperconv {

/// Padding behaviour at the grid boundary. ZeroDirichlet reads 0 outside the
/// image; NeumannReflect mirrors the first interior cells (ghost cell equals
/// the adjacent interior cell), the discrete zero-normal-derivative condition.
enum class PaddingMode { ZeroDirichlet, NeumannReflect };

struct ConvSpec {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  std::int64_t kernel_h = 3;
  std::int64_t kernel_w = 3;
  std::int64_t stride = 1;
  std::int64_t groups = 1;
  PaddingMode padding = PaddingMode::ZeroDirichlet;
  /// With weight sharing the kernel bank has shape [b, in/groups, kh, kw]
  /// where b divides out_channels, and output channel o uses bank row o % b.
  /// Only valid for depthwise convs (groups == in_channels).
  bool weight_shared = false;

  void validate() const;
  std::int64_t pad_h() const { return (kernel_h - 1) / 2; }
  std::int64_t pad_w() const { return (kernel_w - 1) / 2; }
};

enum class ActivationKind { Relu, Hardtanh, Hardball, Softball, Identity };

/// Hardball/softball act on the channel vector at each (sample, pixel); the
/// scalar kinds act element-wise.
struct Activation {
  ActivationKind kind = ActivationKind::Identity;
  double min_val = -1.0;  // hardtanh
  double max_val = 1.0;   // hardtanh
  double radius = 1.0;    // hardball / softball

  void validate() const;
  static Activation relu() { return {ActivationKind::Relu}; }
  static Activation hardtanh(double lo = -1.0, double hi = 1.0);
  static Activation hardball(double r);
  static Activation softball(double r);
  static Activation identity() { return {ActivationKind::Identity}; }
};

ActivationKind activation_kind_from_string(const std::string& s);
std::string to_string(ActivationKind k);

enum class BatchNormMode { Train, Eval };

/// Trainable scale/shift live in `gamma`/`beta`; running statistics are
/// plain state updated by train-mode forward passes.
struct BatchNormState {
  Tensor gamma;         // [C]
  Tensor beta;          // [C]
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
  double momentum = 0.1;
  double epsilon = 1e-5;

  static BatchNormState make(std::int64_t channels);
  std::int64_t channels() const { return gamma.numel(); }
};

/// Grouped/strided 2-D cross-correlation. `x` is [N,C,H,W]; `w` is a graph
/// node holding [out, in/groups, kh, kw] weights (or the shared bank).
NodeId conv2d(Graph& g, NodeId x, NodeId w, const ConvSpec& spec);

NodeId apply_activation(Graph& g, NodeId x, const Activation& act);

/// Train mode normalizes with batch statistics over (N,H,W) per channel and
/// updates state->running_*; eval mode applies the per-channel affine map
/// defined by the running statistics. gamma/beta enter as graph nodes.
NodeId batchnorm(Graph& g, NodeId x, NodeId gamma, NodeId beta, BatchNormState* state, BatchNormMode mode);

/// [N,C,H,W] -> [N,C] spatial mean.
NodeId global_avg_pool(Graph& g, NodeId x);

/// x: [N,C], w: [K,C], b: [K] -> [N,K].
NodeId linear(Graph& g, NodeId x, NodeId w, NodeId b);

/// Mean cross-entropy with max-subtraction stabilization; labels in [0,K).
NodeId softmax_cross_entropy(Graph& g, NodeId logits, const std::vector<std::int64_t>& labels);

}  // namespace hyperconv
