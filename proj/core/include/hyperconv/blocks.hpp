#pragma once

#include <optional>

#include "hyperconv/nn_ops.hpp"
#include "hyperconv/tensor.hpp"

namespace hyperconv {

/// Which right-hand side a residual block realizes. The factored variants
/// differ in where the 1x1 mixing matrices sit relative to the depthwise
/// derivative convs and whether the derivative acts on channel products
/// (conservation form). TensorForm keeps the full third-order coefficient
/// tensors.
enum class BlockVariant { Eq3, Eq4, Eq5, Eq6, Eq7, TensorForm };

BlockVariant block_variant_from_string(const std::string& s);
std::string to_string(BlockVariant v);

struct BlockConfig {
  BlockVariant variant = BlockVariant::Eq3;
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  /// Channels each input channel splits into at the depthwise 3x3; half feed
  /// the x branch and half the y branch.
  std::int64_t expansion = 4;
  bool weight_shared = true;
  std::int64_t stride = 1;
  bool batchnorm = true;
  std::optional<Activation> activation;  // applied after the residual add

  std::int64_t kernels_per_direction() const { return expansion / 2; }
  void validate() const;
};

/// Parameters of one block. Layout conventions, fixed across the library:
///   dw_x/dw_y    shared [s,1,3,3] or per-channel [s*n,1,3,3] banks, where
///                s = expansion/2; bank row q filters replica q of a channel
///   mix          1x1 matrix [rows, in]; for Eq3/Eq5/Eq7 rows = m*n with the
///                C stack in the first half (x branch) and D in the second;
///                Eq4/Eq6 store the single shared C
///   proj         1x1 matrix [out, m*n], columns ordered like the
///                concatenated (x-stack, y-stack) stream; absent for Eq5
///   tensor_a/b   TensorForm coefficient tensors [n,n,n], entry (i,j,k)
///                multiplying u_k * D u_j
struct BlockWeights {
  Tensor dw_x, dw_y;
  Tensor mix;
  Tensor proj;
  Tensor tensor_a, tensor_b;
  std::optional<BatchNormState> bn_mid, bn_end;
  // stage-entry extras (factored variants other than Eq5)
  Tensor ds_w;
  std::optional<BatchNormState> bn_ds;
  bool has_downsample = false;
};

/// Initializes weights for `cfg`; `proj_scale` absorbs the PDE time step
/// (1/depth of the full network).
BlockWeights init_block(const BlockConfig& cfg, Rng& rng, double proj_scale);

/// Records one residual block on the graph. Parameters are registered with
/// Graph::param so backward() fills their Tensor::grad.
NodeId block_forward(Graph& g, NodeId u, const BlockConfig& cfg, BlockWeights& w, BatchNormMode mode);

/// One explicit residual update with full coefficient tensors:
/// u + sum_{j,k} A_ijk u_k Dx u_j + B_ijk u_k Dy u_j, with fixed
/// central-difference stencils scaled by tau. Guarded to n <= 16.
NodeId tensorform_forward(Graph& g, NodeId u, NodeId tensor_a, NodeId tensor_b, double tau = 1.0,
                          double grid_h = 1.0, PaddingMode padding = PaddingMode::ZeroDirichlet);

/// Conservation-form counterpart: derivatives act on the products u_j u_k.
NodeId tensorform_forward_conservation(Graph& g, NodeId u, NodeId tensor_a, NodeId tensor_b, double tau = 1.0,
                                       double grid_h = 1.0, PaddingMode padding = PaddingMode::ZeroDirichlet);

/// 3x3 central-difference kernels [-1/2, 0, 1/2]/h for one spatial direction.
Tensor central_difference_kernel_x(double h);
Tensor central_difference_kernel_y(double h);

constexpr std::int64_t kTensorFormMaxChannels = 16;

}  // namespace hyperconv
