#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hyperconv/rng.hpp"

namespace hyperconv {

/// Dense row-major f64 tensor, the universal value type of the library.
/// `grad` is filled by Graph::backward for parameter leaves.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> shape);
  Tensor(std::vector<std::int64_t> shape, std::vector<double> values);

  static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::int64_t> shape, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor randn(std::vector<std::int64_t> shape, Rng& rng, double stddev = 1.0);

  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  std::int64_t extent(std::size_t dim) const { return shape_.at(dim); }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }
  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  /// Row-major element access for rank <= 4 tensors.
  double& at(std::initializer_list<std::int64_t> idx);
  double at(std::initializer_list<std::int64_t> idx) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

 private:
  std::vector<std::int64_t> shape_;
  std::vector<double> data_;
};

std::string shape_to_string(const std::vector<std::int64_t>& shape);

using NodeId = std::int32_t;

/// Reverse-mode tape. Records one forward pass eagerly; backward() may run
/// once per recording. A Graph belongs to a single logical thread.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Registers a copy of `t` as a leaf; gradient retrievable via grad(id).
  NodeId leaf(Tensor t);
  /// Registers a non-differentiable leaf.
  NodeId constant(Tensor t);
  /// Registers `t` as a leaf and, after backward(), writes the gradient into
  /// t->grad. `t` must outlive the graph.
  NodeId param(Tensor* t);

  /// Used by op implementations to push a computed node onto the tape.
  NodeId record(std::vector<NodeId> inputs, Tensor value, BackwardFn backward_fn);
  /// Id the next record() call will return; lets a backward closure capture
  /// the id of the node it belongs to.
  NodeId next_id() const { return static_cast<NodeId>(nodes_.size()); }

  const Tensor& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Accumulates the output-gradient of node `id` during backward.
  void accumulate_grad(NodeId id, std::span<const double> g);
  std::span<double> grad_buffer(NodeId id);
  /// Gradient of the last backward() w.r.t. node `id` (empty if unused).
  std::span<const double> grad(NodeId id) const;

  /// Reverse sweep from a scalar loss. Errors on non-scalar loss or if the
  /// recording was already consumed.
  void backward(NodeId loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<NodeId> inputs;
    Tensor value;
    BackwardFn backward_fn;
    bool requires_grad = false;
    Tensor* bound = nullptr;  // external parameter to receive the gradient
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool consumed_ = false;
};

// ---- recorded ops ---------------------------------------------------------

NodeId add(Graph& g, NodeId a, NodeId b);
NodeId sub(Graph& g, NodeId a, NodeId b);
NodeId mul_elementwise(Graph& g, NodeId a, NodeId b);
NodeId scale(Graph& g, NodeId a, double c);
/// Sum of all elements, shape {1}.
NodeId sum(Graph& g, NodeId a);
/// a: [m,k], b: [k,n] -> [m,n].
NodeId matmul(Graph& g, NodeId a, NodeId b);
/// Splits x[N,C,H,W] channels into consecutive groups of `group` and sums
/// each group: output [N,C/group,H,W].
NodeId channel_group_sum(Graph& g, NodeId x, std::int64_t group);
/// Repeats every channel `times` times consecutively: [N,C,...] -> [N,C*times,...].
NodeId channel_repeat(Graph& g, NodeId x, std::int64_t times);
/// Channel range [from,to) of x[N,C,H,W].
NodeId channel_slice(Graph& g, NodeId x, std::int64_t from, std::int64_t to);
NodeId channel_concat(Graph& g, NodeId a, NodeId b);
/// out[n, j*Cb+k, y, x] = a[n,j,y,x] * b[n,k,y,x].
NodeId channel_outer_product(Graph& g, NodeId a, NodeId b);

/// Convenience free function mirroring Graph::backward.
inline void backward(Graph& g, NodeId loss) { g.backward(loss); }

}  // namespace hyperconv
