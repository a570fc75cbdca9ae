#include "hyperconv/symmetry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "hyperconv/config.hpp"

namespace hyperconv {

TransformKind transform_kind_from_string(const std::string& s) {
  if (s == "perm" || s == "permutation") return TransformKind::Permutation;
  if (s == "diag" || s == "diagonal") return TransformKind::Diagonal;
  if (s == "orth" || s == "orthogonal") return TransformKind::Orthogonal;
  if (s == "general") return TransformKind::General;
  throw std::invalid_argument("unknown transform kind '" + s + "'");
}

std::string to_string(TransformKind k) {
  switch (k) {
    case TransformKind::Permutation: return "permutation";
    case TransformKind::Diagonal: return "diagonal";
    case TransformKind::Orthogonal: return "orthogonal";
    case TransformKind::General: return "general";
  }
  return "?";
}

Tensor mat_mul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.extent(1) != b.extent(0))
    throw std::invalid_argument("mat_mul: " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  const std::int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out({m, n});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * n + j];
      out[i * n + j] = acc;
    }
  return out;
}

Tensor mat_transpose(const Tensor& a) {
  const std::int64_t m = a.extent(0), n = a.extent(1);
  Tensor out({n, m});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

Tensor mat_inverse(const Tensor& a) {
  if (a.shape().size() != 2 || a.extent(0) != a.extent(1))
    throw std::invalid_argument("mat_inverse: square matrix required, got " + shape_to_string(a.shape()));
  const std::int64_t n = a.extent(0);
  std::vector<double> aug(static_cast<std::size_t>(n * 2 * n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) aug[i * 2 * n + j] = a[i * n + j];
    aug[i * 2 * n + n + i] = 1.0;
  }
  for (std::int64_t col = 0; col < n; ++col) {
    std::int64_t pivot = col;
    for (std::int64_t r = col + 1; r < n; ++r)
      if (std::abs(aug[r * 2 * n + col]) > std::abs(aug[pivot * 2 * n + col])) pivot = r;
    if (std::abs(aug[pivot * 2 * n + col]) < 1e-14)
      throw std::invalid_argument("mat_inverse: matrix is singular");
    if (pivot != col)
      for (std::int64_t j = 0; j < 2 * n; ++j) std::swap(aug[col * 2 * n + j], aug[pivot * 2 * n + j]);
    const double diag = aug[col * 2 * n + col];
    for (std::int64_t j = 0; j < 2 * n; ++j) aug[col * 2 * n + j] /= diag;
    for (std::int64_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = aug[r * 2 * n + col];
      if (f == 0.0) continue;
      for (std::int64_t j = 0; j < 2 * n; ++j) aug[r * 2 * n + j] -= f * aug[col * 2 * n + j];
    }
  }
  Tensor inv({n, n});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) inv[i * n + j] = aug[i * 2 * n + n + j];
  return inv;
}

Tensor mat_exp(const Tensor& a) {
  if (a.shape().size() != 2 || a.extent(0) != a.extent(1))
    throw std::invalid_argument("mat_exp: square matrix required");
  const std::int64_t n = a.extent(0);
  double norm = 0.0;
  for (double v : a.data()) norm = std::max(norm, std::abs(v));
  int squarings = 0;
  Tensor scaled = a;
  while (norm > 0.5 && squarings < 60) {
    for (double& v : scaled.data()) v *= 0.5;
    norm *= 0.5;
    ++squarings;
  }
  Tensor result({n, n});
  for (std::int64_t i = 0; i < n; ++i) result[i * n + i] = 1.0;
  Tensor term = result;
  for (int k = 1; k <= 24; ++k) {
    term = mat_mul(term, scaled);
    for (double& v : term.data()) v /= static_cast<double>(k);
    for (std::int64_t i = 0; i < n * n; ++i) result[i] += term[i];
  }
  for (int s = 0; s < squarings; ++s) result = mat_mul(result, result);
  return result;
}

void ChannelTransform::validate() const {
  const std::int64_t dim = n();
  if (T.shape() != std::vector<std::int64_t>{dim, dim} || !T.same_shape(T_inv))
    throw std::invalid_argument("transform: T and T_inv must be equal square matrices");
  Tensor prod = mat_mul(T, T_inv);
  for (std::int64_t i = 0; i < dim; ++i)
    for (std::int64_t j = 0; j < dim; ++j) {
      const double want = i == j ? 1.0 : 0.0;
      if (std::abs(prod[i * dim + j] - want) > 1e-12)
        throw std::invalid_argument("transform: T*T_inv deviates from identity beyond 1e-12");
    }
  if (kind == TransformKind::Permutation) {
    for (std::int64_t i = 0; i < dim; ++i) {
      std::int64_t ones = 0;
      for (std::int64_t j = 0; j < dim; ++j) {
        const double v = T[i * dim + j];
        if (v == 1.0) ++ones;
        else if (v != 0.0)
          throw std::invalid_argument("transform: permutation entries must be 0 or 1");
      }
      if (ones != 1) throw std::invalid_argument("transform: permutation needs exactly one 1 per row");
    }
  }
  if (kind == TransformKind::Diagonal) {
    for (std::int64_t i = 0; i < dim; ++i)
      for (std::int64_t j = 0; j < dim; ++j) {
        if (i != j && T[i * dim + j] != 0.0)
          throw std::invalid_argument("transform: diagonal kind has off-diagonal entries");
        if (i == j && T[i * dim + j] == 0.0)
          throw std::invalid_argument("transform: diagonal entries must be nonzero");
      }
  }
  if (kind == TransformKind::Orthogonal) {
    Tensor qqt = mat_mul(T, mat_transpose(T));
    for (std::int64_t i = 0; i < dim; ++i)
      for (std::int64_t j = 0; j < dim; ++j) {
        const double want = i == j ? 1.0 : 0.0;
        if (std::abs(qqt[i * dim + j] - want) > 1e-12)
          throw std::invalid_argument("transform: T*T^T deviates from identity beyond 1e-12");
      }
  }
}

ChannelTransform ChannelTransform::identity(std::int64_t n) {
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  return permutation(perm);
}

ChannelTransform ChannelTransform::permutation(const std::vector<std::int64_t>& perm) {
  const std::int64_t n = static_cast<std::int64_t>(perm.size());
  ChannelTransform t;
  t.kind = TransformKind::Permutation;
  t.T = Tensor({n, n});
  t.T_inv = Tensor({n, n});
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t p = perm[static_cast<std::size_t>(i)];
    if (p < 0 || p >= n || seen[static_cast<std::size_t>(p)])
      throw std::invalid_argument("transform: invalid permutation vector");
    seen[static_cast<std::size_t>(p)] = true;
    t.T[i * n + p] = 1.0;      // new channel i reads old channel perm[i]
    t.T_inv[p * n + i] = 1.0;
  }
  return t;
}

ChannelTransform ChannelTransform::diagonal(const std::vector<double>& scales) {
  const std::int64_t n = static_cast<std::int64_t>(scales.size());
  ChannelTransform t;
  t.kind = TransformKind::Diagonal;
  t.T = Tensor({n, n});
  t.T_inv = Tensor({n, n});
  for (std::int64_t i = 0; i < n; ++i) {
    const double s = scales[static_cast<std::size_t>(i)];
    if (s == 0.0) throw std::invalid_argument("transform: diagonal scale must be nonzero");
    t.T[i * n + i] = s;
    t.T_inv[i * n + i] = 1.0 / s;
  }
  return t;
}

ChannelTransform ChannelTransform::orthogonal(Tensor q) {
  ChannelTransform t;
  t.kind = TransformKind::Orthogonal;
  t.T_inv = mat_transpose(q);
  t.T = std::move(q);
  t.validate();
  return t;
}

ChannelTransform ChannelTransform::general(Tensor m) {
  ChannelTransform t;
  t.kind = TransformKind::General;
  t.T_inv = mat_inverse(m);
  t.T = std::move(m);
  t.validate();
  return t;
}

namespace {

// Householder QR orientation-fixed orthogonal sample.
Tensor random_orthogonal(std::int64_t n, Rng& rng) {
  Tensor a = Tensor::randn({n, n}, rng);
  // Gram-Schmidt, numerically fine at these sizes
  for (std::int64_t c = 0; c < n; ++c) {
    for (std::int64_t prev = 0; prev < c; ++prev) {
      double dot = 0.0;
      for (std::int64_t r = 0; r < n; ++r) dot += a[r * n + c] * a[r * n + prev];
      for (std::int64_t r = 0; r < n; ++r) a[r * n + c] -= dot * a[r * n + prev];
    }
    // re-orthogonalize once to push the residual to roundoff
    for (std::int64_t prev = 0; prev < c; ++prev) {
      double dot = 0.0;
      for (std::int64_t r = 0; r < n; ++r) dot += a[r * n + c] * a[r * n + prev];
      for (std::int64_t r = 0; r < n; ++r) a[r * n + c] -= dot * a[r * n + prev];
    }
    double norm = 0.0;
    for (std::int64_t r = 0; r < n; ++r) norm += a[r * n + c] * a[r * n + c];
    norm = std::sqrt(norm);
    for (std::int64_t r = 0; r < n; ++r) a[r * n + c] /= norm;
  }
  return a;
}

}  // namespace

ChannelTransform ChannelTransform::random(TransformKind kind, std::int64_t n, Rng& rng) {
  switch (kind) {
    case TransformKind::Permutation: {
      std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
      for (std::int64_t i = n - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
      return permutation(perm);
    }
    case TransformKind::Diagonal: {
      std::vector<double> scales(static_cast<std::size_t>(n));
      for (auto& s : scales) s = rng.uniform(0.5, 2.0);
      return diagonal(scales);
    }
    case TransformKind::Orthogonal:
      return orthogonal(random_orthogonal(n, rng));
    case TransformKind::General: {
      // Q1 * diag(s) * Q2 with s in [0.5, 2]: invertible with condition <= 4
      // and an inverse accurate to roundoff
      Tensor q1 = random_orthogonal(n, rng);
      Tensor q2 = random_orthogonal(n, rng);
      std::vector<double> s(static_cast<std::size_t>(n));
      for (auto& v : s) v = rng.uniform(0.5, 2.0);
      Tensor mid({n, n}), mid_inv({n, n});
      for (std::int64_t i = 0; i < n; ++i) {
        mid[i * n + i] = s[static_cast<std::size_t>(i)];
        mid_inv[i * n + i] = 1.0 / s[static_cast<std::size_t>(i)];
      }
      ChannelTransform t;
      t.kind = TransformKind::General;
      t.T = mat_mul(mat_mul(q1, mid), q2);
      t.T_inv = mat_mul(mat_mul(mat_transpose(q2), mid_inv), mat_transpose(q1));
      t.validate();
      return t;
    }
  }
  throw std::invalid_argument("transform: bad kind");
}

ChannelTransform ChannelTransform::compose(const ChannelTransform& other) const {
  if (n() != other.n()) throw std::invalid_argument("transform: compose dimension mismatch");
  ChannelTransform out;
  out.kind = kind == other.kind ? kind : TransformKind::General;
  out.T = mat_mul(T, other.T);
  out.T_inv = mat_mul(other.T_inv, T_inv);
  return out;
}

Tensor transform_tensor_form(const Tensor& coeff, const ChannelTransform& t) {
  const std::int64_t n = t.n();
  if (coeff.shape() != std::vector<std::int64_t>{n, n, n})
    throw std::invalid_argument("transform_tensor_form: coefficient tensor must be [n,n,n] with n=" +
                                std::to_string(n));
  const Tensor& T = t.T;
  const Tensor& Ti = t.T_inv;
  Tensor out({n, n, n});
  // out_irm = sum_{j,k,l} T_ij coeff_jkl Tinv_lm Tinv_kr
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t r = 0; r < n; ++r)
      for (std::int64_t m = 0; m < n; ++m) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
          const double tij = T[i * n + j];
          if (tij == 0.0) continue;
          for (std::int64_t k = 0; k < n; ++k) {
            const double tkr = Ti[k * n + r];
            if (tkr == 0.0) continue;
            for (std::int64_t l = 0; l < n; ++l) acc += tij * coeff[(j * n + k) * n + l] * Ti[l * n + m] * tkr;
          }
        }
        out[(i * n + r) * n + m] = acc;
      }
  return out;
}

Tensor symmetrize_jk(const Tensor& coeff) {
  if (coeff.shape().size() != 3 || coeff.extent(0) != coeff.extent(1) || coeff.extent(1) != coeff.extent(2))
    throw std::invalid_argument("symmetrize_jk: expected [n,n,n], got " + shape_to_string(coeff.shape()));
  const std::int64_t n = coeff.extent(0);
  Tensor out({n, n, n});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t k = 0; k < n; ++k)
        out[(i * n + j) * n + k] = 0.5 * (coeff[(i * n + j) * n + k] + coeff[(i * n + k) * n + j]);
  return out;
}

namespace {

// Left-multiplies the stacked mix/derivative stream [2*s*n, cols] by
// blockdiag(L (x) I_s, L (x) I_s): row (stack, c, r) sums L[c][c'] *
// rows (stack, c', r).
Tensor expanded_left_multiply(const Tensor& L, const Tensor& W, std::int64_t s) {
  const std::int64_t rows = W.extent(0), cols = W.extent(1);
  const std::int64_t n = L.extent(0);
  if (rows != 2 * s * n) throw std::invalid_argument("transform: expanded row count mismatch");
  Tensor out({rows, cols});
  for (std::int64_t stack = 0; stack < 2; ++stack)
    for (std::int64_t c = 0; c < n; ++c)
      for (std::int64_t r = 0; r < s; ++r) {
        double* dst = out.data().data() + ((stack * n + c) * s + r) * cols;
        for (std::int64_t c2 = 0; c2 < n; ++c2) {
          const double f = L[c * n + c2];
          if (f == 0.0) continue;
          const double* src = W.data().data() + ((stack * n + c2) * s + r) * cols;
          for (std::int64_t k = 0; k < cols; ++k) dst[k] += f * src[k];
        }
      }
  return out;
}

// Right-multiplies [rows, 2*s*n] by blockdiag(R (x) I_s, R (x) I_s).
Tensor expanded_right_multiply(const Tensor& W, const Tensor& R, std::int64_t s) {
  const std::int64_t rows = W.extent(0), cols = W.extent(1);
  const std::int64_t n = R.extent(0);
  if (cols != 2 * s * n) throw std::invalid_argument("transform: expanded column count mismatch");
  Tensor out({rows, cols});
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t stack = 0; stack < 2; ++stack)
      for (std::int64_t c2 = 0; c2 < n; ++c2)
        for (std::int64_t r = 0; r < s; ++r) {
          const double src = W[i * cols + (stack * n + c2) * s + r];
          if (src == 0.0) continue;
          for (std::int64_t c = 0; c < n; ++c) {
            const double f = R[c2 * n + c];
            if (f != 0.0) out[i * cols + (stack * n + c) * s + r] += src * f;
          }
        }
  return out;
}

std::vector<std::int64_t> permutation_vector(const ChannelTransform& t) {
  const std::int64_t n = t.n();
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      if (t.T[i * n + j] == 1.0) perm[static_cast<std::size_t>(i)] = j;
  return perm;
}

void co_transform_bn(BatchNormState& bn, const ChannelTransform& t, std::int64_t s_expand) {
  const std::int64_t n = t.n();
  const std::int64_t channels = bn.channels();
  const bool expanded = s_expand > 0;
  if ((expanded && channels != 2 * s_expand * n) || (!expanded && channels != n))
    throw std::invalid_argument("transform: batchnorm channel mismatch");

  const auto map_channel = [&](std::int64_t ch) -> std::int64_t {  // stream channel of bn channel
    if (!expanded) return ch;
    const std::int64_t within = ch % (s_expand * n);
    return within / s_expand;
  };

  if (t.kind == TransformKind::Permutation) {
    const auto perm = permutation_vector(t);
    BatchNormState old = bn;
    for (std::int64_t ch = 0; ch < channels; ++ch) {
      const std::int64_t c = map_channel(ch);
      const std::int64_t src_c = perm[static_cast<std::size_t>(c)];
      const std::int64_t src = expanded ? ch + (src_c - c) * s_expand : src_c;
      bn.gamma[ch] = old.gamma[src];
      bn.beta[ch] = old.beta[src];
      bn.running_mean[ch] = old.running_mean[src];
      bn.running_var[ch] = old.running_var[src];
    }
    return;
  }
  if (t.kind == TransformKind::Diagonal) {
    for (std::int64_t ch = 0; ch < channels; ++ch) {
      const double d = t.T[map_channel(ch) * n + map_channel(ch)];
      const double var = bn.running_var[ch];
      // Exact co-transform including epsilon: the affine map of the scaled
      // stream equals d times the original affine map.
      bn.gamma[ch] = bn.gamma[ch] * std::sqrt((d * d * var + bn.epsilon) / (var + bn.epsilon));
      bn.beta[ch] = d * bn.beta[ch];
      bn.running_mean[ch] = d * bn.running_mean[ch];
      bn.running_var[ch] = d * d * var;
    }
    return;
  }
  throw std::invalid_argument("transform: no exact batchnorm co-transform for kind " + to_string(t.kind));
}

BlockWeights transform_eq3_block(const BlockConfig& cfg, const BlockWeights& w, const ChannelTransform& t_in,
                                 const ChannelTransform& t_out) {
  const std::int64_t s = cfg.kernels_per_direction();
  BlockWeights out = w;
  if (t_in.kind == TransformKind::Diagonal) {
    // derivative branch picks up d_c per expanded channel; making the mix
    // output inversely scaled cancels it in the product, and the projection
    // restores the outgoing stream transform
    Tensor mix = mat_mul(w.mix, t_in.T_inv);
    out.mix = expanded_left_multiply(t_in.T_inv, mix, s);
    out.proj = mat_mul(t_out.T, w.proj);
  } else {
    // permutation (and the unchecked general case): both branches permute
    // identically, so the product permutes too
    Tensor mix = mat_mul(w.mix, t_in.T_inv);
    out.mix = expanded_left_multiply(t_in.T, mix, s);
    out.proj = expanded_right_multiply(mat_mul(t_out.T, w.proj), t_in.T_inv, s);
  }
  if (w.bn_mid.has_value()) co_transform_bn(*out.bn_mid, t_in, s);
  if (w.bn_end.has_value()) co_transform_bn(*out.bn_end, t_out, 0);
  if (w.has_downsample) {
    out.ds_w = mat_mul(mat_mul(t_out.T, w.ds_w), t_in.T_inv);
    if (w.bn_ds.has_value()) co_transform_bn(*out.bn_ds, t_out, 0);
  }
  return out;
}

}  // namespace

BlockWeights transform_factored_block(const BlockConfig& cfg, const BlockWeights& w, const ChannelTransform& t_in,
                                      const ChannelTransform& t_out) {
  if (cfg.variant != BlockVariant::Eq3)
    throw std::invalid_argument("transform: factored transforms are implemented for Eq3 blocks, got " +
                                to_string(cfg.variant));
  if (!cfg.weight_shared)
    throw std::invalid_argument("transform: factored transforms require weight-shared depthwise banks");
  if (t_in.kind != t_out.kind) throw std::invalid_argument("transform: mixed kinds within one block");
  if (t_in.kind != TransformKind::Permutation && t_in.kind != TransformKind::Diagonal)
    throw std::invalid_argument("transform: kind " + to_string(t_in.kind) +
                                " does not preserve the factored form; only permutation and diagonal do");
  return transform_eq3_block(cfg, w, t_in, t_out);
}

BlockWeights transform_factored_block_unchecked(const BlockConfig& cfg, const BlockWeights& w,
                                                const ChannelTransform& t_in, const ChannelTransform& t_out) {
  if (cfg.variant != BlockVariant::Eq3) throw std::invalid_argument("transform: Eq3 blocks only");
  return transform_eq3_block(cfg, w, t_in, t_out);
}

Model transform_network(const Model& model, const std::vector<ChannelTransform>& per_stage) {
  const NetworkConfig& cfg = model.cfg;
  if (per_stage.size() != model.stages.size())
    throw std::invalid_argument("transform: need one transform per stage (" + std::to_string(model.stages.size()) +
                                "), got " + std::to_string(per_stage.size()));
  for (std::size_t s = 0; s < per_stage.size(); ++s) {
    if (per_stage[s].n() != cfg.stage_channels[s])
      throw std::invalid_argument("transform: stage " + std::to_string(s) + " width " +
                                  std::to_string(cfg.stage_channels[s]) + " vs transform size " +
                                  std::to_string(per_stage[s].n()));
    per_stage[s].validate();
  }
  if (cfg.variant != BlockVariant::Eq3 && cfg.variant != BlockVariant::TensorForm)
    throw std::invalid_argument("transform: network transforms support Eq3 and TensorForm models");

  Model out = model;
  if (cfg.variant == BlockVariant::TensorForm) {
    ChannelTransform prev = ChannelTransform::identity(cfg.stem_channels);
    for (std::size_t s = 0; s < out.stages.size(); ++s) {
      const ChannelTransform& t = per_stage[s];
      Transition& tr = *out.stages[s].transition;
      tr.w = mat_mul(mat_mul(t.T, model.stages[s].transition->w), prev.T_inv);
      if (tr.bn.has_value()) co_transform_bn(*tr.bn, t, 0);
      for (auto& unit : out.stages[s].blocks) {
        unit.weights.tensor_a = transform_tensor_form(unit.weights.tensor_a, t);
        unit.weights.tensor_b = transform_tensor_form(unit.weights.tensor_b, t);
      }
      prev = t;
    }
    out.head_w = mat_mul(model.head_w, per_stage.back().T_inv);
    return out;
  }

  ChannelTransform prev = ChannelTransform::identity(cfg.stem_channels);
  for (std::size_t s = 0; s < out.stages.size(); ++s) {
    const ChannelTransform& t = per_stage[s];
    for (std::size_t b = 0; b < out.stages[s].blocks.size(); ++b) {
      BlockUnit& unit = out.stages[s].blocks[b];
      const ChannelTransform& tin = b == 0 ? prev : t;
      unit.weights = transform_factored_block(unit.cfg, model.stages[s].blocks[b].weights, tin, t);
    }
    prev = t;
  }
  out.head_w = mat_mul(model.head_w, per_stage.back().T_inv);
  return out;
}

namespace {

bool is_mixing_weight(const std::string& name) {
  const auto ends_with = [&name](const char* suffix) {
    const std::string s(suffix);
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return ends_with(".mix") || ends_with(".proj") || ends_with("transition.w") || ends_with("downsample.w") ||
         ends_with("tensor_a") || ends_with("tensor_b") || ends_with("head.w");
}

LayerNormEntry layer_norm_entry(const std::string& name, const Tensor& t) {
  LayerNormEntry e;
  e.name = name;
  e.total = t.numel();
  double maxabs = 0.0;
  for (double v : t.data()) maxabs = std::max(maxabs, std::abs(v));
  const double cutoff = kNearZeroFraction * maxabs;
  for (double v : t.data()) {
    e.l1 += std::abs(v);
    if (std::abs(v) <= cutoff) ++e.near_zero;
  }
  return e;
}

}  // namespace

SymmetryReport verify_invariance(Model& model_a, Model& model_b, const Tensor& probes) {
  if (network_config_to_text(model_a.cfg) != network_config_to_text(model_b.cfg))
    throw std::invalid_argument("verify_invariance: model configurations differ");
  if (probes.shape().size() != 4 || probes.extent(0) == 0)
    throw std::invalid_argument("verify_invariance: probes must be a non-empty [P,C,H,W] batch");
  Tensor la = run_logits(model_a, probes);
  Tensor lb = run_logits(model_b, probes);
  const std::int64_t P = probes.extent(0);
  const std::int64_t K = la.extent(1);
  SymmetryReport rep;
  rep.per_probe_deviation.resize(static_cast<std::size_t>(P), 0.0);
  std::int64_t agree = 0;
  for (std::int64_t p = 0; p < P; ++p) {
    double dev = 0.0;
    std::int64_t arga = 0, argb = 0;
    for (std::int64_t k = 0; k < K; ++k) {
      dev = std::max(dev, std::abs(la[p * K + k] - lb[p * K + k]));
      if (la[p * K + k] > la[p * K + arga]) arga = k;
      if (lb[p * K + k] > lb[p * K + argb]) argb = k;
    }
    rep.per_probe_deviation[static_cast<std::size_t>(p)] = dev;
    rep.max_deviation = std::max(rep.max_deviation, dev);
    if (arga == argb) ++agree;
  }
  rep.argmax_agreement = static_cast<double>(agree) / static_cast<double>(P);
  for (const auto& nt : state_tensors(model_b))
    if (is_mixing_weight(nt.name)) rep.layer_norms.push_back(layer_norm_entry(nt.name, *nt.tensor));
  return rep;
}

void write_report_csv(const SymmetryReport& report, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("report: cannot open " + path + " for writing");
  os << "probe,deviation\n";
  for (std::size_t p = 0; p < report.per_probe_deviation.size(); ++p)
    os << p << "," << report.per_probe_deviation[p] << "\n";
}

namespace {

double sparsity_objective(const Model& model, const std::vector<ChannelTransform>& transforms, double lambda) {
  if (lambda == 0.0) return 0.0;
  Model transformed = transform_network(model, transforms);
  double l1 = 0.0;
  for (const auto& nt : state_tensors(transformed))
    if (is_mixing_weight(nt.name))
      for (double v : nt.tensor->data()) l1 += std::abs(v);
  return lambda * l1;
}

std::pair<double, std::int64_t> mixing_l1_and_zeros(Model& m) {
  double l1 = 0.0;
  std::int64_t zeros = 0;
  for (const auto& nt : state_tensors(m))
    if (is_mixing_weight(nt.name)) {
      auto e = layer_norm_entry(nt.name, *nt.tensor);
      l1 += e.l1;
      zeros += e.near_zero;
    }
  return {l1, zeros};
}

}  // namespace

SparsifyResult sparsify_search(const Model& model, TransformKind kind, std::int64_t steps, double lambda,
                               std::uint64_t seed) {
  const NetworkConfig& cfg = model.cfg;
  Rng rng(seed);
  const std::size_t S = model.stages.size();
  std::vector<ChannelTransform> best;
  for (std::size_t s = 0; s < S; ++s) best.push_back(ChannelTransform::identity(cfg.stage_channels[s]));
  double best_obj = sparsity_objective(model, best, lambda);

  if (kind == TransformKind::Permutation) {
    for (std::int64_t step = 0; step < steps; ++step) {
      const std::size_t s = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(S) - 1));
      const std::int64_t n = cfg.stage_channels[s];
      if (n < 2) continue;
      const std::int64_t i = rng.uniform_int(0, n - 1);
      std::int64_t j = rng.uniform_int(0, n - 2);
      if (j >= i) ++j;
      auto perm = permutation_vector(best[s]);
      std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
      auto candidate = best;
      candidate[s] = ChannelTransform::permutation(perm);
      const double obj = sparsity_objective(model, candidate, lambda);
      if (obj < best_obj) {
        best = std::move(candidate);
        best_obj = obj;
      }
    }
  } else if (kind == TransformKind::Diagonal || kind == TransformKind::Orthogonal) {
    // parameters: per-stage log-scales, or the strict upper triangle of an
    // antisymmetric generator
    std::vector<std::vector<double>> params(S);
    for (std::size_t s = 0; s < S; ++s) {
      const std::int64_t n = cfg.stage_channels[s];
      params[s].assign(static_cast<std::size_t>(kind == TransformKind::Diagonal ? n : n * (n - 1) / 2), 0.0);
    }
    const auto realize = [&](const std::vector<std::vector<double>>& p) {
      std::vector<ChannelTransform> ts;
      for (std::size_t s = 0; s < S; ++s) {
        const std::int64_t n = cfg.stage_channels[s];
        if (kind == TransformKind::Diagonal) {
          std::vector<double> scales(static_cast<std::size_t>(n));
          for (std::int64_t i = 0; i < n; ++i) scales[static_cast<std::size_t>(i)] = std::exp(p[s][static_cast<std::size_t>(i)]);
          ts.push_back(ChannelTransform::diagonal(scales));
        } else {
          Tensor gen({n, n});
          std::size_t idx = 0;
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = i + 1; j < n; ++j, ++idx) {
              gen[i * n + j] = p[s][idx];
              gen[j * n + i] = -p[s][idx];
            }
          ts.push_back(ChannelTransform::orthogonal(mat_exp(gen)));
        }
      }
      return ts;
    };
    double step_size = 0.1;
    for (std::int64_t step = 0; step < steps; ++step) {
      // finite-difference gradient on the group parameters
      std::vector<std::vector<double>> grad(S);
      double gnorm = 0.0;
      const double delta = 1e-4;
      for (std::size_t s = 0; s < S; ++s) {
        grad[s].assign(params[s].size(), 0.0);
        for (std::size_t i = 0; i < params[s].size(); ++i) {
          auto p = params;
          p[s][i] += delta;
          const double up = sparsity_objective(model, realize(p), lambda);
          p[s][i] -= 2 * delta;
          const double dn = sparsity_objective(model, realize(p), lambda);
          grad[s][i] = (up - dn) / (2 * delta);
          gnorm += grad[s][i] * grad[s][i];
        }
      }
      if (gnorm == 0.0) break;  // lambda == 0 keeps the identity a fixed point
      bool improved = false;
      for (int attempt = 0; attempt < 8 && !improved; ++attempt) {
        auto p = params;
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t i = 0; i < p[s].size(); ++i) p[s][i] -= step_size * grad[s][i];
        const double obj = sparsity_objective(model, realize(p), lambda);
        if (obj < best_obj) {
          params = std::move(p);
          best_obj = obj;
          improved = true;
          step_size *= 1.2;
        } else {
          step_size *= 0.5;
        }
      }
      if (!improved && step_size < 1e-10) break;
    }
    best = realize(params);
    best_obj = sparsity_objective(model, best, lambda);
  } else {
    throw std::invalid_argument("sparsify: unsupported kind " + to_string(kind));
  }

  SparsifyResult res;
  res.transforms = best;
  res.model = transform_network(model, best);
  Model base = model;
  std::tie(res.l1_before, res.near_zero_before) = mixing_l1_and_zeros(base);
  std::tie(res.l1_after, res.near_zero_after) = mixing_l1_and_zeros(res.model);
  return res;
}

std::vector<std::pair<std::int64_t, std::int64_t>> detect_degenerate_pairs(const Tensor& proj, const Tensor& mix,
                                                                           double tol) {
  if (proj.shape().size() != 2 || mix.shape().size() != 2 || proj.extent(1) != mix.extent(0))
    throw std::invalid_argument("detect_degenerate_pairs: proj [i,j] and mix [j,k] required");
  const std::int64_t I = proj.extent(0), J = proj.extent(1), K = mix.extent(1);
  double scale = 0.0;
  for (double v : proj.data()) scale = std::max(scale, std::abs(v));
  for (double v : mix.data()) scale = std::max(scale, std::abs(v));
  const double cutoff = tol * std::max(1.0, scale * scale);
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
  for (std::int64_t j = 0; j < J; ++j)
    for (std::int64_t j2 = j + 1; j2 < J; ++j2) {
      double dev = 0.0;
      for (std::int64_t i = 0; i < I && dev <= cutoff; ++i)
        for (std::int64_t k = 0; k < K; ++k)
          dev = std::max(dev, std::abs(proj[i * J + j] * mix[j * K + k] - proj[i * J + j2] * mix[j2 * K + k]));
      if (dev <= cutoff) pairs.emplace_back(j, j2);
    }
  return pairs;
}

}  // namespace hyperconv
