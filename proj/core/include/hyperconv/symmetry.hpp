#pragma once

#include <utility>

#include "hyperconv/network.hpp"

namespace hyperconv {

enum class TransformKind { Permutation, Diagonal, Orthogonal, General };

TransformKind transform_kind_from_string(const std::string& s);
std::string to_string(TransformKind k);

/// Invertible channel mixing with its cached inverse. Orthogonal transforms
/// store the transpose as the inverse; general ones a computed inverse with
/// bounded condition by construction of the random factory.
struct ChannelTransform {
  TransformKind kind = TransformKind::General;
  Tensor T;      // [n,n]
  Tensor T_inv;  // [n,n]

  std::int64_t n() const { return T.extent(0); }
  void validate() const;  // kind invariants and T*T_inv == I within 1e-12

  static ChannelTransform identity(std::int64_t n);
  static ChannelTransform permutation(const std::vector<std::int64_t>& perm);
  static ChannelTransform diagonal(const std::vector<double>& scales);
  static ChannelTransform orthogonal(Tensor q);
  static ChannelTransform general(Tensor t);
  static ChannelTransform random(TransformKind kind, std::int64_t n, Rng& rng);

  /// Composition acting as this after other: result.T = this.T * other.T.
  ChannelTransform compose(const ChannelTransform& other) const;
};

// small dense helpers shared with tests
Tensor mat_mul(const Tensor& a, const Tensor& b);
Tensor mat_transpose(const Tensor& a);
Tensor mat_inverse(const Tensor& a);  // Gauss-Jordan with partial pivoting
/// Matrix exponential (scaling and squaring); used to parameterize O(n).
Tensor mat_exp(const Tensor& a);

/// Change of coordinates on the full coefficient tensor:
/// out_irm = sum_{j,k,l} T_ij A_jkl Tinv_lm Tinv_kr.
Tensor transform_tensor_form(const Tensor& coeff, const ChannelTransform& t);

/// j<->k symmetrization (A_ijk + A_ikj)/2 over the last two indices.
Tensor symmetrize_jk(const Tensor& coeff);

/// Exact weight-space transform of one factored Eq3 block. Only permutation
/// and diagonal kinds preserve the factored form; other kinds are rejected.
/// t_in transforms the incoming stream, t_out the outgoing one (equal except
/// for stage-entry blocks).
BlockWeights transform_factored_block(const BlockConfig& cfg, const BlockWeights& w, const ChannelTransform& t_in,
                                      const ChannelTransform& t_out);

/// Same formulas without the kind restriction; exists so tests can show that
/// a generic rotation breaks a factored block.
BlockWeights transform_factored_block_unchecked(const BlockConfig& cfg, const BlockWeights& w,
                                                const ChannelTransform& t_in, const ChannelTransform& t_out);

/// Applies one transform per stage (stem stream stays fixed) and returns the
/// co-transformed model. Supports Eq3 models (permutation/diagonal) and
/// TensorForm models (any kind; batchnorm only for permutation/diagonal).
Model transform_network(const Model& model, const std::vector<ChannelTransform>& per_stage);

struct LayerNormEntry {
  std::string name;
  double l1 = 0.0;
  std::int64_t near_zero = 0;
  std::int64_t total = 0;
};

struct SymmetryReport {
  double max_deviation = 0.0;
  double argmax_agreement = 0.0;  // fraction of probes with equal argmax
  std::vector<double> per_probe_deviation;
  std::vector<LayerNormEntry> layer_norms;
};

/// Near-zero cutoff used in sparsity metrics, as a fraction of each
/// matrix's max-abs entry.
constexpr double kNearZeroFraction = 1e-6;

/// Max |logits_a - logits_b| over a probe batch plus argmax agreement and
/// weight-sparsity metrics of model_b. Models must share a config.
SymmetryReport verify_invariance(Model& model_a, Model& model_b, const Tensor& probes);

void write_report_csv(const SymmetryReport& report, const std::string& path);

struct SparsifyResult {
  std::vector<ChannelTransform> transforms;
  Model model;  // transformed model
  double l1_before = 0.0;
  double l1_after = 0.0;
  std::int64_t near_zero_before = 0;
  std::int64_t near_zero_after = 0;
};

/// Best-effort search over the exact symmetry group for transforms that
/// sparsify the mixing weights: greedy swaps for permutations, gradient
/// descent (on log-scales / antisymmetric generators) for diagonal and
/// orthogonal kinds. The returned model always passes verify_invariance at
/// the kind's tolerance.
SparsifyResult sparsify_search(const Model& model, TransformKind kind, std::int64_t steps, double lambda,
                               std::uint64_t seed);

/// Indices (j, j') with A_:j C_j: == A_:j' C_j': within tol — the degenerate
/// configuration that admits in-plane rotations of a factored tensor.
std::vector<std::pair<std::int64_t, std::int64_t>> detect_degenerate_pairs(const Tensor& proj, const Tensor& mix,
                                                                           double tol = 1e-9);

}  // namespace hyperconv
