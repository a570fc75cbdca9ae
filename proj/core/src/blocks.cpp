#include "hyperconv/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace hyperconv {

BlockVariant block_variant_from_string(const std::string& s) {
  if (s == "eq3") return BlockVariant::Eq3;
  if (s == "eq4") return BlockVariant::Eq4;
  if (s == "eq5") return BlockVariant::Eq5;
  if (s == "eq6") return BlockVariant::Eq6;
  if (s == "eq7") return BlockVariant::Eq7;
  if (s == "tensorform") return BlockVariant::TensorForm;
  throw std::invalid_argument("unknown block variant '" + s + "'");
}

std::string to_string(BlockVariant v) {
  switch (v) {
    case BlockVariant::Eq3: return "eq3";
    case BlockVariant::Eq4: return "eq4";
    case BlockVariant::Eq5: return "eq5";
    case BlockVariant::Eq6: return "eq6";
    case BlockVariant::Eq7: return "eq7";
    case BlockVariant::TensorForm: return "tensorform";
  }
  return "?";
}

void BlockConfig::validate() const {
  if (in_channels <= 0 || out_channels <= 0) throw std::invalid_argument("block: channel counts must be positive");
  if (expansion != 2 && expansion != 4 && expansion != 6)
    throw std::invalid_argument("block: expansion must be 2, 4 or 6, got " + std::to_string(expansion));
  if (stride != 1 && stride != 2) throw std::invalid_argument("block: stride must be 1 or 2");
  if (variant == BlockVariant::Eq5 && in_channels != out_channels)
    throw std::invalid_argument("block: Eq5 has no projection and cannot change channel count inside the block");
  if (variant == BlockVariant::TensorForm) {
    if (in_channels != out_channels) throw std::invalid_argument("block: TensorForm blocks are square");
    if (in_channels > kTensorFormMaxChannels)
      throw std::invalid_argument("block: TensorForm limited to " + std::to_string(kTensorFormMaxChannels) +
                                  " channels, got " + std::to_string(in_channels));
  }
}

namespace {

Tensor randn_grad(std::vector<std::int64_t> shape, Rng& rng, double stddev) {
  Tensor t = Tensor::randn(std::move(shape), rng, stddev);
  t.requires_grad = true;
  return t;
}

}  // namespace

BlockWeights init_block(const BlockConfig& cfg, Rng& rng, double proj_scale) {
  cfg.validate();
  const std::int64_t n = cfg.in_channels;
  const std::int64_t no = cfg.out_channels;
  const std::int64_t m = cfg.expansion;
  const std::int64_t s = cfg.kernels_per_direction();
  BlockWeights w;

  if (cfg.variant == BlockVariant::TensorForm) {
    w.tensor_a = randn_grad({n, n, n}, rng, proj_scale / static_cast<double>(n));
    w.tensor_b = randn_grad({n, n, n}, rng, proj_scale / static_cast<double>(n));
  } else {
    const std::int64_t bank = cfg.weight_shared ? s : s * n;
    w.dw_x = randn_grad({bank, 1, 3, 3}, rng, 1.0 / 3.0);
    w.dw_y = randn_grad({bank, 1, 3, 3}, rng, 1.0 / 3.0);
    std::int64_t mix_rows = 0;
    switch (cfg.variant) {
      case BlockVariant::Eq3:
      case BlockVariant::Eq5:
      case BlockVariant::Eq7: mix_rows = m * n; break;
      case BlockVariant::Eq4: mix_rows = no; break;
      case BlockVariant::Eq6: mix_rows = n; break;
      default: break;
    }
    const double mix_scale = cfg.variant == BlockVariant::Eq5 ? proj_scale : 1.0;
    w.mix = randn_grad({mix_rows, n}, rng, mix_scale / std::sqrt(static_cast<double>(n)));
    if (cfg.variant != BlockVariant::Eq5)
      w.proj = randn_grad({no, m * n}, rng, proj_scale / std::sqrt(static_cast<double>(m * n)));
    if (cfg.batchnorm) {
      w.bn_mid = BatchNormState::make(m * n);
      w.bn_end = BatchNormState::make(cfg.variant == BlockVariant::Eq5 ? n : no);
    }
    if (cfg.stride == 2 && cfg.variant != BlockVariant::Eq5) {
      w.has_downsample = true;
      w.ds_w = randn_grad({no, n}, rng, 1.0 / std::sqrt(static_cast<double>(n)));
      if (cfg.batchnorm) w.bn_ds = BatchNormState::make(no);
    }
  }
  return w;
}

namespace {

ConvSpec one_by_one(std::int64_t in, std::int64_t out, std::int64_t stride = 1) {
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_h = s.kernel_w = 1;
  s.stride = stride;
  return s;
}

ConvSpec depthwise3x3(std::int64_t in, std::int64_t mult, bool shared, std::int64_t stride, PaddingMode pad) {
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = in * mult;
  s.kernel_h = s.kernel_w = 3;
  s.stride = stride;
  s.groups = in;
  s.weight_shared = shared;
  s.padding = pad;
  return s;
}

NodeId maybe_bn(Graph& g, NodeId x, std::optional<BatchNormState>& bn, BatchNormMode mode) {
  if (!bn.has_value()) return x;
  NodeId gamma = g.param(&bn->gamma);
  NodeId beta = g.param(&bn->beta);
  return batchnorm(g, x, gamma, beta, &*bn, mode);
}

}  // namespace

NodeId block_forward(Graph& g, NodeId u, const BlockConfig& cfg, BlockWeights& w, BatchNormMode mode) {
  cfg.validate();
  const std::int64_t n = cfg.in_channels;
  const std::int64_t no = cfg.out_channels;
  const std::int64_t m = cfg.expansion;
  const std::int64_t s = cfg.kernels_per_direction();
  const PaddingMode pad = PaddingMode::ZeroDirichlet;

  if (cfg.variant == BlockVariant::TensorForm) {
    NodeId ta = g.param(&w.tensor_a);
    NodeId tb = g.param(&w.tensor_b);
    NodeId out = tensorform_forward(g, u, ta, tb);
    if (cfg.activation.has_value()) out = apply_activation(g, out, *cfg.activation);
    return out;
  }

  NodeId residual;
  if (cfg.variant == BlockVariant::Eq3 || cfg.variant == BlockVariant::Eq4 || cfg.variant == BlockVariant::Eq5) {
    // derivative branch acts on the raw stream
    const std::int64_t dstride = cfg.variant == BlockVariant::Eq5 ? 1 : cfg.stride;
    NodeId X = conv2d(g, u, g.param(&w.dw_x), depthwise3x3(n, s, cfg.weight_shared, dstride, pad));
    NodeId Y = conv2d(g, u, g.param(&w.dw_y), depthwise3x3(n, s, cfg.weight_shared, dstride, pad));
    NodeId D = channel_concat(g, X, Y);
    D = maybe_bn(g, D, w.bn_mid, mode);
    switch (cfg.variant) {
      case BlockVariant::Eq3: {
        NodeId mixed = conv2d(g, u, g.param(&w.mix), one_by_one(n, m * n, cfg.stride));
        NodeId prod = mul_elementwise(g, D, mixed);
        residual = conv2d(g, prod, g.param(&w.proj), one_by_one(m * n, no));
        break;
      }
      case BlockVariant::Eq4: {
        NodeId projected = conv2d(g, D, g.param(&w.proj), one_by_one(m * n, no));
        NodeId mixed = conv2d(g, u, g.param(&w.mix), one_by_one(n, no, cfg.stride));
        residual = mul_elementwise(g, mixed, projected);
        break;
      }
      case BlockVariant::Eq5: {
        NodeId mixed = conv2d(g, u, g.param(&w.mix), one_by_one(n, m * n, 1));
        NodeId prod = mul_elementwise(g, D, mixed);
        NodeId grouped = channel_group_sum(g, prod, s);  // [2n]: x sums then y sums
        residual = add(g, channel_slice(g, grouped, 0, n), channel_slice(g, grouped, n, 2 * n));
        break;
      }
      default: break;
    }
  } else {
    // conservation form: product first, derivative second
    NodeId px, py;
    if (cfg.variant == BlockVariant::Eq6) {
      NodeId mixed = conv2d(g, u, g.param(&w.mix), one_by_one(n, n));
      px = mul_elementwise(g, u, mixed);
      py = px;
    } else {  // Eq7
      NodeId mixed = conv2d(g, u, g.param(&w.mix), one_by_one(n, m * n));
      NodeId urep = channel_repeat(g, u, s);
      px = mul_elementwise(g, urep, channel_slice(g, mixed, 0, s * n));
      py = mul_elementwise(g, urep, channel_slice(g, mixed, s * n, m * n));
    }
    const std::int64_t mult = cfg.variant == BlockVariant::Eq6 ? s : 1;
    const std::int64_t pc = cfg.variant == BlockVariant::Eq6 ? n : s * n;
    NodeId X = conv2d(g, px, g.param(&w.dw_x), depthwise3x3(pc, mult, cfg.weight_shared, cfg.stride, pad));
    NodeId Y = conv2d(g, py, g.param(&w.dw_y), depthwise3x3(pc, mult, cfg.weight_shared, cfg.stride, pad));
    NodeId D = channel_concat(g, X, Y);
    D = maybe_bn(g, D, w.bn_mid, mode);
    residual = conv2d(g, D, g.param(&w.proj), one_by_one(m * n, no));
  }

  residual = maybe_bn(g, residual, w.bn_end, mode);

  NodeId skip;
  if (w.has_downsample) {
    skip = conv2d(g, u, g.param(&w.ds_w), one_by_one(n, no, 2));
    skip = maybe_bn(g, skip, w.bn_ds, mode);
  } else {
    skip = u;
  }
  NodeId out = add(g, skip, residual);
  if (cfg.activation.has_value()) out = apply_activation(g, out, *cfg.activation);
  return out;
}

Tensor central_difference_kernel_x(double h) {
  Tensor k({1, 1, 3, 3});
  k.at({0, 0, 1, 0}) = -1.0 / (2.0 * h);
  k.at({0, 0, 1, 2}) = 1.0 / (2.0 * h);
  return k;
}

Tensor central_difference_kernel_y(double h) {
  Tensor k({1, 1, 3, 3});
  k.at({0, 0, 0, 1}) = -1.0 / (2.0 * h);
  k.at({0, 0, 2, 1}) = 1.0 / (2.0 * h);
  return k;
}

namespace {

NodeId tensorform_impl(Graph& g, NodeId u, NodeId tensor_a, NodeId tensor_b, double tau, double grid_h,
                       PaddingMode padding, bool conservation) {
  const Tensor& ut = g.value(u);
  if (ut.shape().size() != 4)
    throw std::invalid_argument("tensorform: input must be [N,C,H,W], got " + shape_to_string(ut.shape()));
  const std::int64_t n = ut.extent(1);
  if (n > kTensorFormMaxChannels)
    throw std::invalid_argument("tensorform: " + std::to_string(n) + " channels exceeds the n<=" +
                                std::to_string(kTensorFormMaxChannels) + " guard");
  const auto check = [&](NodeId t, const char* name) {
    const auto& s = g.value(t).shape();
    if (s != std::vector<std::int64_t>{n, n, n})
      throw std::invalid_argument(std::string("tensorform: ") + name + " must be [n,n,n]=" +
                                  shape_to_string({n, n, n}) + ", got " + shape_to_string(s));
  };
  check(tensor_a, "tensor_a");
  check(tensor_b, "tensor_b");

  ConvSpec dspec;
  dspec.in_channels = dspec.out_channels = conservation ? n * n : n;
  dspec.groups = dspec.in_channels;
  dspec.padding = padding;
  dspec.weight_shared = true;
  NodeId kx = g.constant(central_difference_kernel_x(grid_h));
  NodeId ky = g.constant(central_difference_kernel_y(grid_h));

  // view the [n,n,n] coefficient tensors as [n, n*n, 1, 1] 1x1 convs over
  // the (j,k) product channels; same buffer, so gradients pass through
  const auto as_conv_weight = [&g, n](NodeId t) {
    Tensor flat({n, n * n, 1, 1}, g.value(t).data());
    const NodeId id = g.next_id();
    return g.record({t}, std::move(flat), [id, t](Graph& gr) { gr.accumulate_grad(t, gr.grad(id)); });
  };
  NodeId amat = as_conv_weight(tensor_a);
  NodeId bmat = as_conv_weight(tensor_b);

  NodeId termx, termy;
  if (conservation) {
    NodeId uu = channel_outer_product(g, u, u);  // channel (j,k) = u_j u_k
    termx = conv2d(g, uu, kx, dspec);
    termy = conv2d(g, uu, ky, dspec);
  } else {
    ConvSpec single = dspec;
    single.in_channels = single.out_channels = single.groups = n;
    NodeId dxu = conv2d(g, u, kx, single);
    NodeId dyu = conv2d(g, u, ky, single);
    termx = channel_outer_product(g, dxu, u);  // channel (j,k) = Dx u_j * u_k
    termy = channel_outer_product(g, dyu, u);
  }
  ConvSpec contract;
  contract.in_channels = n * n;
  contract.out_channels = n;
  contract.kernel_h = contract.kernel_w = 1;
  NodeId rx = conv2d(g, termx, amat, contract);
  NodeId ry = conv2d(g, termy, bmat, contract);
  NodeId rhs = add(g, rx, ry);
  return add(g, u, scale(g, rhs, tau));
}

}  // namespace

NodeId tensorform_forward(Graph& g, NodeId u, NodeId tensor_a, NodeId tensor_b, double tau, double grid_h,
                          PaddingMode padding) {
  return tensorform_impl(g, u, tensor_a, tensor_b, tau, grid_h, padding, false);
}

NodeId tensorform_forward_conservation(Graph& g, NodeId u, NodeId tensor_a, NodeId tensor_b, double tau,
                                       double grid_h, PaddingMode padding) {
  return tensorform_impl(g, u, tensor_a, tensor_b, tau, grid_h, padding, true);
}

}  // namespace hyperconv
