#include "hyperconv/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "hyperconv/parallel.hpp"

namespace hyperconv {

void ConvSpec::validate() const {
  if (in_channels <= 0 || out_channels <= 0 || kernel_h <= 0 || kernel_w <= 0 || stride <= 0 || groups <= 0)
    throw std::invalid_argument("conv2d: spec fields must be positive");
  if (in_channels % groups != 0 || out_channels % groups != 0)
    throw std::invalid_argument("conv2d: channels (" + std::to_string(in_channels) + "," +
                                std::to_string(out_channels) + ") not divisible by groups " + std::to_string(groups));
  if (weight_shared && groups != in_channels)
    throw std::invalid_argument("conv2d: weight sharing requires a depthwise conv (groups == in_channels)");
}

Activation Activation::hardtanh(double lo, double hi) {
  Activation a{ActivationKind::Hardtanh};
  a.min_val = lo;
  a.max_val = hi;
  a.validate();
  return a;
}

Activation Activation::hardball(double r) {
  Activation a{ActivationKind::Hardball};
  a.radius = r;
  a.validate();
  return a;
}

Activation Activation::softball(double r) {
  Activation a{ActivationKind::Softball};
  a.radius = r;
  a.validate();
  return a;
}

void Activation::validate() const {
  if (kind == ActivationKind::Hardtanh && !(min_val < max_val))
    throw std::invalid_argument("hardtanh: min_val must be below max_val");
  if ((kind == ActivationKind::Hardball || kind == ActivationKind::Softball) && !(radius > 0))
    throw std::invalid_argument("ball activation: radius must be positive");
}

ActivationKind activation_kind_from_string(const std::string& s) {
  if (s == "relu") return ActivationKind::Relu;
  if (s == "hardtanh") return ActivationKind::Hardtanh;
  if (s == "hardball") return ActivationKind::Hardball;
  if (s == "softball") return ActivationKind::Softball;
  if (s == "identity") return ActivationKind::Identity;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

std::string to_string(ActivationKind k) {
  switch (k) {
    case ActivationKind::Relu: return "relu";
    case ActivationKind::Hardtanh: return "hardtanh";
    case ActivationKind::Hardball: return "hardball";
    case ActivationKind::Softball: return "softball";
    case ActivationKind::Identity: return "identity";
  }
  return "?";
}

BatchNormState BatchNormState::make(std::int64_t channels) {
  BatchNormState s;
  s.gamma = Tensor::full({channels}, 1.0);
  s.beta = Tensor::zeros({channels});
  s.running_mean = Tensor::zeros({channels});
  s.running_var = Tensor::full({channels}, 1.0);
  s.gamma.requires_grad = true;
  s.beta.requires_grad = true;
  return s;
}

namespace {

// Boundary index resolution; -1 means "outside" (only for zero padding).
inline std::int64_t map_index(std::int64_t i, std::int64_t n, PaddingMode mode) {
  if (i >= 0 && i < n) return i;
  if (mode == PaddingMode::ZeroDirichlet) return -1;
  if (i < 0) return -i - 1;
  return 2 * n - 1 - i;
}

struct ConvDims {
  std::int64_t N, C, H, W, Co, Ho, Wo, cpg, opg, bank;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const ConvSpec& spec) {
  spec.validate();
  if (x.shape().size() != 4)
    throw std::invalid_argument("conv2d: input must be [N,C,H,W], got " + shape_to_string(x.shape()));
  ConvDims d;
  d.N = x.extent(0);
  d.C = x.extent(1);
  d.H = x.extent(2);
  d.W = x.extent(3);
  if (d.C != spec.in_channels)
    throw std::invalid_argument("conv2d: input has " + std::to_string(d.C) + " channels, spec expects " +
                                std::to_string(spec.in_channels));
  d.cpg = spec.in_channels / spec.groups;
  d.opg = spec.out_channels / spec.groups;
  if (w.shape().size() != 4 || w.extent(1) != d.cpg || w.extent(2) != spec.kernel_h || w.extent(3) != spec.kernel_w)
    throw std::invalid_argument("conv2d: weight shape " + shape_to_string(w.shape()) + " incompatible with spec");
  d.bank = w.extent(0);
  if (spec.weight_shared) {
    if (d.bank == 0 || spec.out_channels % d.bank != 0)
      throw std::invalid_argument("conv2d: shared bank rows " + std::to_string(d.bank) +
                                  " must divide out_channels " + std::to_string(spec.out_channels));
  } else if (d.bank != spec.out_channels) {
    throw std::invalid_argument("conv2d: weight rows " + std::to_string(d.bank) + " != out_channels " +
                                std::to_string(spec.out_channels));
  }
  if (spec.padding == PaddingMode::NeumannReflect && (d.H <= spec.pad_h() || d.W <= spec.pad_w()))
    throw std::invalid_argument("conv2d: input " + std::to_string(d.H) + "x" + std::to_string(d.W) +
                                " too small for reflected padding of this kernel");
  d.Co = spec.out_channels;
  d.Ho = (d.H + 2 * spec.pad_h() - spec.kernel_h) / spec.stride + 1;
  d.Wo = (d.W + 2 * spec.pad_w() - spec.kernel_w) / spec.stride + 1;
  if (d.Ho <= 0 || d.Wo <= 0)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  return d;
}

}  // namespace

NodeId conv2d(Graph& g, NodeId x, NodeId w, const ConvSpec& spec) {
  const Tensor& xt = g.value(x);
  const Tensor& wt = g.value(w);
  const ConvDims d = conv_dims(xt, wt, spec);
  const std::int64_t ph = spec.pad_h(), pw = spec.pad_w(), s = spec.stride;
  const std::int64_t kh = spec.kernel_h, kw = spec.kernel_w;
  const PaddingMode pm = spec.padding;

  Tensor out({d.N, d.Co, d.Ho, d.Wo});
  {
    const double* in = xt.data().data();
    const double* wd = wt.data().data();
    double* od = out.data().data();
    parallel_for(d.N * d.Co, [&](std::int64_t t) {
      const std::int64_t n = t / d.Co;
      const std::int64_t oc = t % d.Co;
      const std::int64_t grp = oc / d.opg;
      const std::int64_t wrow = spec.weight_shared ? (oc % d.bank) : oc;
      for (std::int64_t oy = 0; oy < d.Ho; ++oy)
        for (std::int64_t ox = 0; ox < d.Wo; ++ox) {
          double acc = 0.0;
          for (std::int64_t ic = 0; ic < d.cpg; ++ic) {
            const double* chan = in + ((n * d.C + grp * d.cpg + ic) * d.H) * d.W;
            const double* ker = wd + ((wrow * d.cpg + ic) * kh) * kw;
            for (std::int64_t ky = 0; ky < kh; ++ky) {
              const std::int64_t iy = map_index(oy * s - ph + ky, d.H, pm);
              if (iy < 0) continue;
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                const std::int64_t ix = map_index(ox * s - pw + kx, d.W, pm);
                if (ix < 0) continue;
                acc += ker[ky * kw + kx] * chan[iy * d.W + ix];
              }
            }
          }
          od[((n * d.Co + oc) * d.Ho + oy) * d.Wo + ox] = acc;
        }
    });
  }

  const NodeId id = g.next_id();
  return g.record({x, w}, std::move(out), [id, x, w, spec, d, ph, pw, s, kh, kw, pm](Graph& gr) {
    auto go = gr.grad(id);
    const double* god = go.data();
    const auto& xv = gr.value(x).data();
    const auto& wv = gr.value(w).data();

    if (gr.needs_grad(x)) {
      std::vector<double> dx(xv.size(), 0.0);
      // disjoint writes per sample
      parallel_for(d.N, [&](std::int64_t n) {
        for (std::int64_t oc = 0; oc < d.Co; ++oc) {
          const std::int64_t grp = oc / d.opg;
          const std::int64_t wrow = spec.weight_shared ? (oc % d.bank) : oc;
          for (std::int64_t oy = 0; oy < d.Ho; ++oy)
            for (std::int64_t ox = 0; ox < d.Wo; ++ox) {
              const double gv = god[((n * d.Co + oc) * d.Ho + oy) * d.Wo + ox];
              if (gv == 0.0) continue;
              for (std::int64_t ic = 0; ic < d.cpg; ++ic) {
                double* chan = dx.data() + ((n * d.C + grp * d.cpg + ic) * d.H) * d.W;
                const double* ker = wv.data() + ((wrow * d.cpg + ic) * kh) * kw;
                for (std::int64_t ky = 0; ky < kh; ++ky) {
                  const std::int64_t iy = map_index(oy * s - ph + ky, d.H, pm);
                  if (iy < 0) continue;
                  for (std::int64_t kx = 0; kx < kw; ++kx) {
                    const std::int64_t ix = map_index(ox * s - pw + kx, d.W, pm);
                    if (ix < 0) continue;
                    chan[iy * d.W + ix] += ker[ky * kw + kx] * gv;
                  }
                }
              }
            }
        }
      });
      gr.accumulate_grad(x, dx);
    }

    if (gr.needs_grad(w)) {
      std::vector<double> dw(wv.size(), 0.0);
      // disjoint writes per bank row; shared banks sum their repeats in
      // ascending output-channel order
      parallel_for(d.bank, [&](std::int64_t wrow) {
        // non-shared weights have bank == out_channels, so this visits just oc == wrow
        for (std::int64_t oc = wrow; oc < d.Co; oc += d.bank) {
          const std::int64_t grp = oc / d.opg;
          for (std::int64_t n = 0; n < d.N; ++n)
            for (std::int64_t oy = 0; oy < d.Ho; ++oy)
              for (std::int64_t ox = 0; ox < d.Wo; ++ox) {
                const double gv = god[((n * d.Co + oc) * d.Ho + oy) * d.Wo + ox];
                if (gv == 0.0) continue;
                for (std::int64_t ic = 0; ic < d.cpg; ++ic) {
                  const double* chan = xv.data() + ((n * d.C + grp * d.cpg + ic) * d.H) * d.W;
                  double* ker = dw.data() + ((wrow * d.cpg + ic) * kh) * kw;
                  for (std::int64_t ky = 0; ky < kh; ++ky) {
                    const std::int64_t iy = map_index(oy * s - ph + ky, d.H, pm);
                    if (iy < 0) continue;
                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                      const std::int64_t ix = map_index(ox * s - pw + kx, d.W, pm);
                      if (ix < 0) continue;
                      ker[ky * kw + kx] += chan[iy * d.W + ix] * gv;
                    }
                  }
                }
              }
        }
      });
      gr.accumulate_grad(w, dw);
    }
  });
}

namespace {

struct VectorView {
  std::int64_t outer, channels, inner;  // x[o, c, i] with stride inner over c
};

VectorView vector_view(const Tensor& t) {
  const auto& s = t.shape();
  if (s.empty()) throw std::invalid_argument("activation: empty tensor");
  if (s.size() == 1) return {1, s[0], 1};
  std::int64_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[0], s[1], inner};
}

}  // namespace

NodeId apply_activation(Graph& g, NodeId x, const Activation& act) {
  act.validate();
  const Tensor& xt = g.value(x);
  Tensor out(xt.shape());
  const auto& in = xt.data();
  auto& od = out.data();

  switch (act.kind) {
    case ActivationKind::Identity:
      od = in;
      break;
    case ActivationKind::Relu:
      for (std::size_t i = 0; i < in.size(); ++i) od[i] = in[i] > 0.0 ? in[i] : 0.0;
      break;
    case ActivationKind::Hardtanh:
      for (std::size_t i = 0; i < in.size(); ++i) od[i] = std::clamp(in[i], act.min_val, act.max_val);
      break;
    case ActivationKind::Hardball:
    case ActivationKind::Softball: {
      const VectorView v = vector_view(xt);
      const double R = act.radius;
      for (std::int64_t o = 0; o < v.outer; ++o)
        for (std::int64_t p = 0; p < v.inner; ++p) {
          double norm2 = 0.0;
          for (std::int64_t c = 0; c < v.channels; ++c) {
            const double val = in[static_cast<std::size_t>((o * v.channels + c) * v.inner + p)];
            norm2 += val * val;
          }
          double f;
          if (act.kind == ActivationKind::Hardball) {
            const double norm = std::sqrt(norm2);
            f = norm < R ? 1.0 : R / norm;
          } else {
            f = 1.0 / std::sqrt(1.0 + norm2 / (R * R));
          }
          for (std::int64_t c = 0; c < v.channels; ++c) {
            const std::size_t idx = static_cast<std::size_t>((o * v.channels + c) * v.inner + p);
            od[idx] = f * in[idx];
          }
        }
      break;
    }
  }

  const NodeId id = g.next_id();
  return g.record({x}, std::move(out), [id, x, act](Graph& gr) {
    auto go = gr.grad(id);
    const auto& in = gr.value(x).data();
    std::vector<double> dx(go.size(), 0.0);
    switch (act.kind) {
      case ActivationKind::Identity:
        dx.assign(go.begin(), go.end());
        break;
      case ActivationKind::Relu:
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = in[i] > 0.0 ? go[i] : 0.0;
        break;
      case ActivationKind::Hardtanh:
        for (std::size_t i = 0; i < dx.size(); ++i)
          dx[i] = (in[i] > act.min_val && in[i] < act.max_val) ? go[i] : 0.0;
        break;
      case ActivationKind::Hardball:
      case ActivationKind::Softball: {
        const VectorView v = vector_view(gr.value(x));
        const double R = act.radius;
        for (std::int64_t o = 0; o < v.outer; ++o)
          for (std::int64_t p = 0; p < v.inner; ++p) {
            double norm2 = 0.0, dot = 0.0;
            for (std::int64_t c = 0; c < v.channels; ++c) {
              const std::size_t idx = static_cast<std::size_t>((o * v.channels + c) * v.inner + p);
              norm2 += in[idx] * in[idx];
              dot += in[idx] * go[idx];
            }
            if (act.kind == ActivationKind::Hardball) {
              const double norm = std::sqrt(norm2);
              if (norm < R) {
                for (std::int64_t c = 0; c < v.channels; ++c) {
                  const std::size_t idx = static_cast<std::size_t>((o * v.channels + c) * v.inner + p);
                  dx[idx] = go[idx];
                }
              } else {
                const double a = R / norm;
                for (std::int64_t c = 0; c < v.channels; ++c) {
                  const std::size_t idx = static_cast<std::size_t>((o * v.channels + c) * v.inner + p);
                  dx[idx] = a * (go[idx] - in[idx] * dot / norm2);
                }
              }
            } else {
              const double s2 = 1.0 + norm2 / (R * R);
              const double sR = std::sqrt(s2);
              for (std::int64_t c = 0; c < v.channels; ++c) {
                const std::size_t idx = static_cast<std::size_t>((o * v.channels + c) * v.inner + p);
                dx[idx] = go[idx] / sR - in[idx] * dot / (R * R * s2 * sR);
              }
            }
          }
        break;
      }
    }
    gr.accumulate_grad(x, dx);
  });
}

namespace {

struct BnView {
  std::int64_t N, C, inner, M;  // M = N * inner samples per channel
};

BnView bn_view(const Tensor& t, std::int64_t channels) {
  const auto& s = t.shape();
  if (s.size() < 2) throw std::invalid_argument("batchnorm: input must have a channel dimension");
  if (s[1] != channels)
    throw std::invalid_argument("batchnorm: input has " + std::to_string(s[1]) + " channels, state has " +
                                std::to_string(channels));
  std::int64_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[0], s[1], inner, s[0] * inner};
}

}  // namespace

NodeId batchnorm(Graph& g, NodeId x, NodeId gamma, NodeId beta, BatchNormState* state, BatchNormMode mode) {
  const Tensor& xt = g.value(x);
  const BnView v = bn_view(xt, state->channels());
  const auto& in = xt.data();
  const auto& gm = g.value(gamma).data();
  const auto& bt = g.value(beta).data();
  const double eps = state->epsilon;

  std::vector<double> mean(static_cast<std::size_t>(v.C), 0.0);
  std::vector<double> var(static_cast<std::size_t>(v.C), 0.0);
  if (mode == BatchNormMode::Train) {
    for (std::int64_t c = 0; c < v.C; ++c) {
      double acc = 0.0;
      for (std::int64_t n = 0; n < v.N; ++n) {
        const double* p = in.data() + (n * v.C + c) * v.inner;
        for (std::int64_t i = 0; i < v.inner; ++i) acc += p[i];
      }
      const double mu = acc / static_cast<double>(v.M);
      double vacc = 0.0;
      for (std::int64_t n = 0; n < v.N; ++n) {
        const double* p = in.data() + (n * v.C + c) * v.inner;
        for (std::int64_t i = 0; i < v.inner; ++i) vacc += (p[i] - mu) * (p[i] - mu);
      }
      mean[static_cast<std::size_t>(c)] = mu;
      var[static_cast<std::size_t>(c)] = vacc / static_cast<double>(v.M);
      const double unbiased = v.M > 1 ? vacc / static_cast<double>(v.M - 1) : vacc / static_cast<double>(v.M);
      state->running_mean[c] = (1.0 - state->momentum) * state->running_mean[c] + state->momentum * mu;
      state->running_var[c] = (1.0 - state->momentum) * state->running_var[c] + state->momentum * unbiased;
    }
  } else {
    for (std::int64_t c = 0; c < v.C; ++c) {
      mean[static_cast<std::size_t>(c)] = state->running_mean[c];
      var[static_cast<std::size_t>(c)] = state->running_var[c];
    }
  }

  Tensor out(xt.shape());
  std::vector<double> inv_std(static_cast<std::size_t>(v.C));
  for (std::int64_t c = 0; c < v.C; ++c)
    inv_std[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
  for (std::int64_t n = 0; n < v.N; ++n)
    for (std::int64_t c = 0; c < v.C; ++c) {
      const double* p = in.data() + (n * v.C + c) * v.inner;
      double* q = out.data().data() + (n * v.C + c) * v.inner;
      const double mu = mean[static_cast<std::size_t>(c)];
      const double is = inv_std[static_cast<std::size_t>(c)];
      for (std::int64_t i = 0; i < v.inner; ++i) q[i] = gm[static_cast<std::size_t>(c)] * (p[i] - mu) * is + bt[static_cast<std::size_t>(c)];
    }

  const NodeId id = g.next_id();
  return g.record({x, gamma, beta}, std::move(out),
                  [id, x, gamma, beta, v, mode, mean, inv_std](Graph& gr) {
                    auto go = gr.grad(id);
                    const auto& in = gr.value(x).data();
                    const auto& gm = gr.value(gamma).data();
                    const double Md = static_cast<double>(v.M);
                    std::vector<double> dgamma(static_cast<std::size_t>(v.C), 0.0);
                    std::vector<double> dbeta(static_cast<std::size_t>(v.C), 0.0);
                    std::vector<double> dx(in.size(), 0.0);
                    for (std::int64_t c = 0; c < v.C; ++c) {
                      const double mu = mean[static_cast<std::size_t>(c)];
                      const double is = inv_std[static_cast<std::size_t>(c)];
                      double sum_go = 0.0, sum_goxh = 0.0;
                      for (std::int64_t n = 0; n < v.N; ++n) {
                        const double* p = in.data() + (n * v.C + c) * v.inner;
                        const double* gq = go.data() + (n * v.C + c) * v.inner;
                        for (std::int64_t i = 0; i < v.inner; ++i) {
                          sum_go += gq[i];
                          sum_goxh += gq[i] * (p[i] - mu) * is;
                        }
                      }
                      dgamma[static_cast<std::size_t>(c)] = sum_goxh;
                      dbeta[static_cast<std::size_t>(c)] = sum_go;
                      const double gmc = gm[static_cast<std::size_t>(c)];
                      for (std::int64_t n = 0; n < v.N; ++n) {
                        const double* p = in.data() + (n * v.C + c) * v.inner;
                        const double* gq = go.data() + (n * v.C + c) * v.inner;
                        double* dq = dx.data() + (n * v.C + c) * v.inner;
                        for (std::int64_t i = 0; i < v.inner; ++i) {
                          if (mode == BatchNormMode::Train) {
                            const double xhat = (p[i] - mu) * is;
                            dq[i] = gmc * is * (gq[i] - sum_go / Md - xhat * sum_goxh / Md);
                          } else {
                            dq[i] = gmc * is * gq[i];
                          }
                        }
                      }
                    }
                    gr.accumulate_grad(x, dx);
                    if (gr.needs_grad(gamma)) gr.accumulate_grad(gamma, dgamma);
                    if (gr.needs_grad(beta)) gr.accumulate_grad(beta, dbeta);
                  });
}

NodeId global_avg_pool(Graph& g, NodeId x) {
  const Tensor& xt = g.value(x);
  if (xt.shape().size() != 4)
    throw std::invalid_argument("global_avg_pool: input must be [N,C,H,W], got " + shape_to_string(xt.shape()));
  const std::int64_t N = xt.extent(0), C = xt.extent(1), HW = xt.extent(2) * xt.extent(3);
  Tensor out({N, C});
  const auto& in = xt.data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      const double* p = in.data() + (n * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) acc += p[i];
      out[n * C + c] = acc / static_cast<double>(HW);
    }
  const NodeId id = g.next_id();
  return g.record({x}, std::move(out), [id, x, N, C, HW](Graph& gr) {
    auto go = gr.grad(id);
    std::vector<double> dx(static_cast<std::size_t>(N * C * HW));
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const double v = go[static_cast<std::size_t>(n * C + c)] / static_cast<double>(HW);
        double* p = dx.data() + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) p[i] = v;
      }
    gr.accumulate_grad(x, dx);
  });
}

NodeId linear(Graph& g, NodeId x, NodeId w, NodeId b) {
  const Tensor& xt = g.value(x);
  const Tensor& wt = g.value(w);
  const Tensor& bt = g.value(b);
  if (xt.shape().size() != 2 || wt.shape().size() != 2 || xt.extent(1) != wt.extent(1) ||
      bt.numel() != wt.extent(0))
    throw std::invalid_argument("linear: incompatible shapes x=" + shape_to_string(xt.shape()) +
                                " w=" + shape_to_string(wt.shape()) + " b=" + shape_to_string(bt.shape()));
  const std::int64_t N = xt.extent(0), C = xt.extent(1), K = wt.extent(0);
  Tensor out({N, K});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t k = 0; k < K; ++k) {
      double acc = bt[k];
      for (std::int64_t c = 0; c < C; ++c) acc += xt[n * C + c] * wt[k * C + c];
      out[n * K + k] = acc;
    }
  const NodeId id = g.next_id();
  return g.record({x, w, b}, std::move(out), [id, x, w, b, N, C, K](Graph& gr) {
    auto go = gr.grad(id);
    const auto& xv = gr.value(x).data();
    const auto& wv = gr.value(w).data();
    if (gr.needs_grad(x)) {
      std::vector<double> dx(static_cast<std::size_t>(N * C), 0.0);
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t k = 0; k < K; ++k) {
          const double gv = go[static_cast<std::size_t>(n * K + k)];
          for (std::int64_t c = 0; c < C; ++c) dx[static_cast<std::size_t>(n * C + c)] += gv * wv[static_cast<std::size_t>(k * C + c)];
        }
      gr.accumulate_grad(x, dx);
    }
    if (gr.needs_grad(w)) {
      std::vector<double> dw(static_cast<std::size_t>(K * C), 0.0);
      for (std::int64_t k = 0; k < K; ++k)
        for (std::int64_t n = 0; n < N; ++n) {
          const double gv = go[static_cast<std::size_t>(n * K + k)];
          for (std::int64_t c = 0; c < C; ++c) dw[static_cast<std::size_t>(k * C + c)] += gv * xv[static_cast<std::size_t>(n * C + c)];
        }
      gr.accumulate_grad(w, dw);
    }
    if (gr.needs_grad(b)) {
      std::vector<double> db(static_cast<std::size_t>(K), 0.0);
      for (std::int64_t k = 0; k < K; ++k)
        for (std::int64_t n = 0; n < N; ++n) db[static_cast<std::size_t>(k)] += go[static_cast<std::size_t>(n * K + k)];
      gr.accumulate_grad(b, db);
    }
  });
}

NodeId softmax_cross_entropy(Graph& g, NodeId logits, const std::vector<std::int64_t>& labels) {
  const Tensor& lt = g.value(logits);
  if (lt.shape().size() != 2)
    throw std::invalid_argument("softmax_cross_entropy: logits must be [N,K], got " + shape_to_string(lt.shape()));
  const std::int64_t N = lt.extent(0), K = lt.extent(1);
  if (static_cast<std::int64_t>(labels.size()) != N)
    throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(N) + " rows");
  for (std::int64_t lab : labels)
    if (lab < 0 || lab >= K)
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(lab) + " out of range [0," +
                                  std::to_string(K) + ")");
  std::vector<double> probs(static_cast<std::size_t>(N * K));
  double loss = 0.0;
  for (std::int64_t n = 0; n < N; ++n) {
    double mx = lt[n * K];
    for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, lt[n * K + k]);
    double denom = 0.0;
    for (std::int64_t k = 0; k < K; ++k) denom += std::exp(lt[n * K + k] - mx);
    const double lse = std::log(denom) + mx;
    for (std::int64_t k = 0; k < K; ++k) probs[static_cast<std::size_t>(n * K + k)] = std::exp(lt[n * K + k] - lse);
    loss += lse - lt[n * K + labels[static_cast<std::size_t>(n)]];
  }
  loss /= static_cast<double>(N);
  const NodeId id = g.next_id();
  return g.record({logits}, Tensor::scalar(loss), [id, logits, labels, probs, N, K](Graph& gr) {
    const double go = gr.grad(id)[0];
    std::vector<double> dl(probs.size());
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t k = 0; k < K; ++k) {
        double v = probs[static_cast<std::size_t>(n * K + k)];
        if (k == labels[static_cast<std::size_t>(n)]) v -= 1.0;
        dl[static_cast<std::size_t>(n * K + k)] = go * v / static_cast<double>(N);
      }
    gr.accumulate_grad(logits, dl);
  });
}

}  // namespace hyperconv
