#include "hyperconv/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace hyperconv {

namespace {

std::int64_t checked_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (std::int64_t e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_to_string(shape));
    n *= e;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> shape)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(checked_numel(shape_)), 0.0) {}

Tensor::Tensor(std::vector<std::int64_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (checked_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_to_string(shape_));
  }
}

Tensor Tensor::full(std::vector<std::int64_t> shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::randn(std::vector<std::int64_t> shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = rng.normal(0.0, stddev);
  return t;
}

double& Tensor::at(std::initializer_list<std::int64_t> idx) {
  const Tensor& self = *this;
  return const_cast<double&>(self.at(idx));
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
  if (idx.size() != shape_.size())
    throw std::invalid_argument("index rank " + std::to_string(idx.size()) + " vs tensor rank " +
                                std::to_string(shape_.size()));
  std::int64_t flat = 0;
  std::size_t d = 0;
  for (std::int64_t i : idx) {
    flat = flat * shape_[d] + i;
    ++d;
  }
  return data_[static_cast<std::size_t>(flat)];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string shape_to_string(const std::vector<std::int64_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Graph ---------------------------------------------------------------

NodeId Graph::leaf(Tensor t) {
  Node n;
  n.requires_grad = t.requires_grad;
  n.value = std::move(t);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::constant(Tensor t) {
  t.requires_grad = false;
  return leaf(std::move(t));
}

NodeId Graph::param(Tensor* t) {
  Node n;
  n.requires_grad = t->requires_grad;
  n.value = *t;
  n.bound = t;
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::record(std::vector<NodeId> inputs, Tensor value, BackwardFn backward_fn) {
  Node n;
  for (NodeId i : inputs) n.requires_grad = n.requires_grad || needs_grad(i);
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  if (n.requires_grad) n.backward_fn = std::move(backward_fn);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

void Graph::accumulate_grad(NodeId id, std::span<const double> g) {
  auto& node = nodes_[static_cast<std::size_t>(id)];
  if (!node.requires_grad) return;
  auto& buf = grads_[static_cast<std::size_t>(id)];
  if (buf.empty()) buf.assign(node.value.data().size(), 0.0);
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

std::span<double> Graph::grad_buffer(NodeId id) {
  auto& node = nodes_[static_cast<std::size_t>(id)];
  auto& buf = grads_[static_cast<std::size_t>(id)];
  if (buf.empty()) buf.assign(node.value.data().size(), 0.0);
  return buf;
}

std::span<const double> Graph::grad(NodeId id) const {
  return grads_[static_cast<std::size_t>(id)];
}

void Graph::backward(NodeId loss) {
  if (consumed_) throw std::runtime_error("graph already consumed by a previous backward()");
  const Tensor& l = value(loss);
  if (l.numel() != 1)
    throw std::invalid_argument("backward() requires a scalar loss, got shape " + shape_to_string(l.shape()));
  consumed_ = true;
  grads_.assign(nodes_.size(), {});
  grads_[static_cast<std::size_t>(loss)] = {1.0};
  for (std::int64_t id = loss; id >= 0; --id) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.requires_grad) continue;
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) continue;  // not on the path to the loss
    if (node.backward_fn) node.backward_fn(*this);
    if (node.bound != nullptr) node.bound->grad = g;
  }
}

// ---- ops -------------------------------------------------------------------

namespace {

void require_same_shape(const Graph& g, NodeId a, NodeId b, const char* op) {
  if (!g.value(a).same_shape(g.value(b))) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_to_string(g.value(a).shape()) +
                                " vs " + shape_to_string(g.value(b).shape()));
  }
}

}  // namespace

NodeId add(Graph& g, NodeId a, NodeId b) {
  require_same_shape(g, a, b, "add");
  Tensor out(g.value(a).shape());
  const auto& da = g.value(a).data();
  const auto& db = g.value(b).data();
  for (std::size_t i = 0; i < da.size(); ++i) out.data()[i] = da[i] + db[i];
  const NodeId id = g.next_id();
  return g.record({a, b}, std::move(out), [id, a, b](Graph& gr) {
    auto go = gr.grad(id);
    gr.accumulate_grad(a, go);
    gr.accumulate_grad(b, go);
  });
}

NodeId sub(Graph& g, NodeId a, NodeId b) {
  require_same_shape(g, a, b, "sub");
  Tensor out(g.value(a).shape());
  const auto& da = g.value(a).data();
  const auto& db = g.value(b).data();
  for (std::size_t i = 0; i < da.size(); ++i) out.data()[i] = da[i] - db[i];
  const NodeId id = g.next_id();
  return g.record({a, b}, std::move(out), [id, a, b](Graph& gr) {
    auto go = gr.grad(id);
    gr.accumulate_grad(a, go);
    if (gr.needs_grad(b)) {
      std::vector<double> neg(go.begin(), go.end());
      for (double& v : neg) v = -v;
      gr.accumulate_grad(b, neg);
    }
  });
}

NodeId mul_elementwise(Graph& g, NodeId a, NodeId b) {
  require_same_shape(g, a, b, "mul_elementwise");
  Tensor out(g.value(a).shape());
  const auto& da = g.value(a).data();
  const auto& db = g.value(b).data();
  for (std::size_t i = 0; i < da.size(); ++i) out.data()[i] = da[i] * db[i];
  const NodeId id = g.next_id();
  return g.record({a, b}, std::move(out), [id, a, b](Graph& gr) {
    auto go = gr.grad(id);
    const auto& va = gr.value(a).data();
    const auto& vb = gr.value(b).data();
    std::vector<double> tmp(go.size());
    if (gr.needs_grad(a)) {
      for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = go[i] * vb[i];
      gr.accumulate_grad(a, tmp);
    }
    if (gr.needs_grad(b)) {
      for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = go[i] * va[i];
      gr.accumulate_grad(b, tmp);
    }
  });
}

NodeId scale(Graph& g, NodeId a, double c) {
  Tensor out(g.value(a).shape());
  const auto& da = g.value(a).data();
  for (std::size_t i = 0; i < da.size(); ++i) out.data()[i] = da[i] * c;
  const NodeId id = g.next_id();
  return g.record({a}, std::move(out), [id, a, c](Graph& gr) {
    auto go = gr.grad(id);
    std::vector<double> tmp(go.size());
    for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = go[i] * c;
    gr.accumulate_grad(a, tmp);
  });
}

NodeId sum(Graph& g, NodeId a) {
  double acc = 0.0;
  for (double v : g.value(a).data()) acc += v;
  const NodeId id = g.next_id();
  return g.record({a}, Tensor::scalar(acc), [id, a](Graph& gr) {
    const double go = gr.grad(id)[0];
    std::vector<double> tmp(gr.value(a).data().size(), go);
    gr.accumulate_grad(a, tmp);
  });
}

NodeId matmul(Graph& g, NodeId a, NodeId b) {
  const Tensor& ta = g.value(a);
  const Tensor& tb = g.value(b);
  if (ta.shape().size() != 2 || tb.shape().size() != 2 || ta.extent(1) != tb.extent(0)) {
    throw std::invalid_argument("matmul: dimension mismatch " + shape_to_string(ta.shape()) + " x " +
                                shape_to_string(tb.shape()));
  }
  const std::int64_t m = ta.extent(0), k = ta.extent(1), n = tb.extent(1);
  Tensor out({m, n});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t t = 0; t < k; ++t) acc += ta[i * k + t] * tb[t * n + j];
      out[i * n + j] = acc;
    }
  const NodeId id = g.next_id();
  return g.record({a, b}, std::move(out), [id, a, b, m, k, n](Graph& gr) {
    auto go = gr.grad(id);
    const auto& va = gr.value(a).data();
    const auto& vb = gr.value(b).data();
    if (gr.needs_grad(a)) {
      std::vector<double> da(static_cast<std::size_t>(m * k), 0.0);
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t t = 0; t < k; ++t) {
          double acc = 0.0;
          for (std::int64_t j = 0; j < n; ++j) acc += go[i * n + j] * vb[t * n + j];
          da[static_cast<std::size_t>(i * k + t)] = acc;
        }
      gr.accumulate_grad(a, da);
    }
    if (gr.needs_grad(b)) {
      std::vector<double> db(static_cast<std::size_t>(k * n), 0.0);
      for (std::int64_t t = 0; t < k; ++t)
        for (std::int64_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::int64_t i = 0; i < m; ++i) acc += va[i * k + t] * go[i * n + j];
          db[static_cast<std::size_t>(t * n + j)] = acc;
        }
      gr.accumulate_grad(b, db);
    }
  });
}

namespace {

struct NchwDims {
  std::int64_t n, c, h, w;
};

NchwDims nchw(const Tensor& t, const char* op) {
  if (t.shape().size() != 4)
    throw std::invalid_argument(std::string(op) + ": expected rank-4 [N,C,H,W], got " + shape_to_string(t.shape()));
  return {t.extent(0), t.extent(1), t.extent(2), t.extent(3)};
}

}  // namespace

NodeId channel_group_sum(Graph& g, NodeId x, std::int64_t group) {
  auto d = nchw(g.value(x), "channel_group_sum");
  if (group <= 0 || d.c % group != 0)
    throw std::invalid_argument("channel_group_sum: group " + std::to_string(group) + " does not divide channels " +
                                std::to_string(d.c));
  const std::int64_t co = d.c / group;
  const std::int64_t hw = d.h * d.w;
  Tensor out({d.n, co, d.h, d.w});
  const auto& in = g.value(x).data();
  for (std::int64_t nI = 0; nI < d.n; ++nI)
    for (std::int64_t oc = 0; oc < co; ++oc)
      for (std::int64_t q = 0; q < group; ++q) {
        const double* src = in.data() + ((nI * d.c + oc * group + q) * hw);
        double* dst = out.data().data() + ((nI * co + oc) * hw);
        for (std::int64_t p = 0; p < hw; ++p) dst[p] += src[p];
      }
  const NodeId id = g.next_id();
  return g.record({x}, std::move(out), [id, x, d, group, co, hw](Graph& gr) {
    auto go = gr.grad(id);
    std::vector<double> dx(static_cast<std::size_t>(d.n * d.c * hw), 0.0);
    for (std::int64_t nI = 0; nI < d.n; ++nI)
      for (std::int64_t oc = 0; oc < co; ++oc)
        for (std::int64_t q = 0; q < group; ++q) {
          const double* src = go.data() + ((nI * co + oc) * hw);
          double* dst = dx.data() + ((nI * d.c + oc * group + q) * hw);
          for (std::int64_t p = 0; p < hw; ++p) dst[p] += src[p];
        }
    gr.accumulate_grad(x, dx);
  });
}

NodeId channel_repeat(Graph& g, NodeId x, std::int64_t times) {
  auto d = nchw(g.value(x), "channel_repeat");
  if (times <= 0) throw std::invalid_argument("channel_repeat: times must be positive");
  const std::int64_t hw = d.h * d.w;
  Tensor out({d.n, d.c * times, d.h, d.w});
  const auto& in = g.value(x).data();
  for (std::int64_t nI = 0; nI < d.n; ++nI)
    for (std::int64_t c = 0; c < d.c; ++c)
      for (std::int64_t r = 0; r < times; ++r) {
        const double* src = in.data() + ((nI * d.c + c) * hw);
        double* dst = out.data().data() + ((nI * d.c * times + c * times + r) * hw);
        for (std::int64_t p = 0; p < hw; ++p) dst[p] = src[p];
      }
  const NodeId id = g.next_id();
  return g.record({x}, std::move(out), [id, x, d, times, hw](Graph& gr) {
    auto go = gr.grad(id);
    std::vector<double> dx(static_cast<std::size_t>(d.n * d.c * hw), 0.0);
    for (std::int64_t nI = 0; nI < d.n; ++nI)
      for (std::int64_t c = 0; c < d.c; ++c)
        for (std::int64_t r = 0; r < times; ++r) {
          const double* src = go.data() + ((nI * d.c * times + c * times + r) * hw);
          double* dst = dx.data() + ((nI * d.c + c) * hw);
          for (std::int64_t p = 0; p < hw; ++p) dst[p] += src[p];
        }
    gr.accumulate_grad(x, dx);
  });
}

NodeId channel_slice(Graph& g, NodeId x, std::int64_t from, std::int64_t to) {
  auto d = nchw(g.value(x), "channel_slice");
  if (from < 0 || to > d.c || from >= to)
    throw std::invalid_argument("channel_slice: bad range [" + std::to_string(from) + "," + std::to_string(to) +
                                ") for " + std::to_string(d.c) + " channels");
  const std::int64_t co = to - from;
  const std::int64_t hw = d.h * d.w;
  Tensor out({d.n, co, d.h, d.w});
  const auto& in = g.value(x).data();
  for (std::int64_t nI = 0; nI < d.n; ++nI)
    for (std::int64_t c = 0; c < co; ++c) {
      const double* src = in.data() + ((nI * d.c + from + c) * hw);
      double* dst = out.data().data() + ((nI * co + c) * hw);
      for (std::int64_t p = 0; p < hw; ++p) dst[p] = src[p];
    }
  const NodeId id = g.next_id();
  return g.record({x}, std::move(out), [id, x, d, from, co, hw](Graph& gr) {
    auto go = gr.grad(id);
    std::vector<double> dx(static_cast<std::size_t>(d.n * d.c * hw), 0.0);
    for (std::int64_t nI = 0; nI < d.n; ++nI)
      for (std::int64_t c = 0; c < co; ++c) {
        const double* src = go.data() + ((nI * co + c) * hw);
        double* dst = dx.data() + ((nI * d.c + from + c) * hw);
        for (std::int64_t p = 0; p < hw; ++p) dst[p] += src[p];
      }
    gr.accumulate_grad(x, dx);
  });
}

NodeId channel_concat(Graph& g, NodeId a, NodeId b) {
  auto da = nchw(g.value(a), "channel_concat");
  auto db = nchw(g.value(b), "channel_concat");
  if (da.n != db.n || da.h != db.h || da.w != db.w)
    throw std::invalid_argument("channel_concat: incompatible shapes " + shape_to_string(g.value(a).shape()) +
                                " vs " + shape_to_string(g.value(b).shape()));
  const std::int64_t hw = da.h * da.w;
  const std::int64_t co = da.c + db.c;
  Tensor out({da.n, co, da.h, da.w});
  const auto& va = g.value(a).data();
  const auto& vb = g.value(b).data();
  for (std::int64_t nI = 0; nI < da.n; ++nI) {
    std::copy_n(va.data() + nI * da.c * hw, da.c * hw, out.data().data() + nI * co * hw);
    std::copy_n(vb.data() + nI * db.c * hw, db.c * hw, out.data().data() + (nI * co + da.c) * hw);
  }
  const NodeId id = g.next_id();
  return g.record({a, b}, std::move(out), [id, a, b, da, db, co, hw](Graph& gr) {
    auto go = gr.grad(id);
    if (gr.needs_grad(a)) {
      std::vector<double> dx(static_cast<std::size_t>(da.n * da.c * hw));
      for (std::int64_t nI = 0; nI < da.n; ++nI)
        std::copy_n(go.data() + nI * co * hw, da.c * hw, dx.data() + nI * da.c * hw);
      gr.accumulate_grad(a, dx);
    }
    if (gr.needs_grad(b)) {
      std::vector<double> dx(static_cast<std::size_t>(da.n * db.c * hw));
      for (std::int64_t nI = 0; nI < da.n; ++nI)
        std::copy_n(go.data() + (nI * co + da.c) * hw, db.c * hw, dx.data() + nI * db.c * hw);
      gr.accumulate_grad(b, dx);
    }
  });
}

NodeId channel_outer_product(Graph& g, NodeId a, NodeId b) {
  auto da = nchw(g.value(a), "channel_outer_product");
  auto db = nchw(g.value(b), "channel_outer_product");
  if (da.n != db.n || da.h != db.h || da.w != db.w)
    throw std::invalid_argument("channel_outer_product: incompatible shapes " + shape_to_string(g.value(a).shape()) +
                                " vs " + shape_to_string(g.value(b).shape()));
  const std::int64_t hw = da.h * da.w;
  Tensor out({da.n, da.c * db.c, da.h, da.w});
  const auto& va = g.value(a).data();
  const auto& vb = g.value(b).data();
  for (std::int64_t nI = 0; nI < da.n; ++nI)
    for (std::int64_t j = 0; j < da.c; ++j)
      for (std::int64_t k = 0; k < db.c; ++k) {
        const double* pa = va.data() + (nI * da.c + j) * hw;
        const double* pb = vb.data() + (nI * db.c + k) * hw;
        double* dst = out.data().data() + ((nI * da.c + j) * db.c + k) * hw;
        for (std::int64_t p = 0; p < hw; ++p) dst[p] = pa[p] * pb[p];
      }
  const NodeId id = g.next_id();
  return g.record({a, b}, std::move(out), [id, a, b, da, db, hw](Graph& gr) {
    auto go = gr.grad(id);
    const auto& va = gr.value(a).data();
    const auto& vb = gr.value(b).data();
    if (gr.needs_grad(a)) {
      std::vector<double> dx(static_cast<std::size_t>(da.n * da.c * hw), 0.0);
      for (std::int64_t nI = 0; nI < da.n; ++nI)
        for (std::int64_t j = 0; j < da.c; ++j)
          for (std::int64_t k = 0; k < db.c; ++k) {
            const double* pg = go.data() + ((nI * da.c + j) * db.c + k) * hw;
            const double* pb = vb.data() + (nI * db.c + k) * hw;
            double* dst = dx.data() + (nI * da.c + j) * hw;
            for (std::int64_t p = 0; p < hw; ++p) dst[p] += pg[p] * pb[p];
          }
      gr.accumulate_grad(a, dx);
    }
    if (gr.needs_grad(b)) {
      std::vector<double> dx(static_cast<std::size_t>(da.n * db.c * hw), 0.0);
      for (std::int64_t nI = 0; nI < da.n; ++nI)
        for (std::int64_t j = 0; j < da.c; ++j)
          for (std::int64_t k = 0; k < db.c; ++k) {
            const double* pg = go.data() + ((nI * da.c + j) * db.c + k) * hw;
            const double* pa = va.data() + (nI * da.c + j) * hw;
            double* dst = dx.data() + (nI * db.c + k) * hw;
            for (std::int64_t p = 0; p < hw; ++p) dst[p] += pg[p] * pa[p];
          }
      gr.accumulate_grad(b, dx);
    }
  });
}

}  // namespace hyperconv
