#pragma once

#include <cstddef>
#include <deque>
#include <algorithm>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mvfuse/tensor.hpp"

namespace mvfuse {

class Graph;
using NodeId = std::size_t;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

  Graph& graph() const {
    if (!graph_) throw StateError("var: not bound to a graph");
    return *graph_;
  }
  NodeId id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }
  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

/// Append-only tape. Parents always precede children, so a reverse sweep over
/// node ids is a valid reverse topological order.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push("constant", std::move(value), {}, nullptr, false); }

  Var parameter(Tensor value) { return push("parameter", std::move(value), {}, nullptr, true); }

  /// Records an operation. The node requires a gradient iff any parent does.
  Var record(std::string_view op, Tensor value, std::vector<NodeId> parents, BackwardFn backward) {
    require_finite(value, op);
    bool needs = false;
    for (auto p : parents) {
      if (p >= nodes_.size()) throw ContractError("graph: parent id out of range");
      needs = needs || nodes_[p].requires_grad;
    }
    return push(op, std::move(value), std::move(parents), needs ? std::move(backward) : nullptr, needs);
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  const std::vector<NodeId>& parents(NodeId id) const { return nodes_.at(id).parents; }
  std::string_view op(NodeId id) const { return nodes_.at(id).op; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient accumulator for `id`, zero-initialised on first touch.
  Tensor& grad_slot(NodeId id) {
    if (!has_grad_[id]) {
      grads_[id] = Tensor(nodes_[id].value.shape(), 0.0);
      has_grad_[id] = true;
    }
    return grads_[id];
  }

  /// Gradient of the last backward() target with respect to `v`. Nodes the
  /// loss does not depend on get a zero tensor of matching shape.
  Tensor grad(Var v) const {
    if (!backward_done_) throw StateError("graph: grad() before backward()");
    const auto id = v.id();
    if (has_grad_.at(id)) return grads_[id];
    return Tensor(nodes_[id].value.shape(), 0.0);
  }

  /// Gradient map restricted to parameter leaves.
  std::map<NodeId, Tensor> gradients() const {
    if (!backward_done_) throw StateError("graph: gradients() before backward()");
    std::map<NodeId, Tensor> out;
    for (NodeId i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].op == "parameter") out.emplace(i, grad(Var(const_cast<Graph*>(this), i)));
    }
    return out;
  }

  void backward(Var loss) {
    if (&loss.graph() != this) throw ContractError("backward: loss belongs to another graph");
    if (backward_done_) throw StateError("backward: already run on this graph; call zero_grad() first");
    const auto root = loss.id();
    if (nodes_[root].value.size() != 1) {
      throw ContractError("backward: loss must be scalar, got " + shape_str(nodes_[root].value.shape()));
    }
    grad_slot(root)[0] = 1.0;
    for (NodeId i = root + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!has_grad_[i] || !node.backward) continue;
      node.backward(*this, i);
    }
    backward_done_ = true;
  }

  void zero_grad() {
    for (std::size_t i = 0; i < grads_.size(); ++i) {
      has_grad_[i] = false;
      grads_[i] = Tensor();
    }
    backward_done_ = false;
  }

  /// Incoming gradient of a node during backward().
  const Tensor& upstream(NodeId id) const { return grads_[id]; }

  /// True if the gradient of `parent` should be accumulated.
  bool wants(NodeId parent) const { return nodes_[parent].requires_grad; }

 private:
  struct Node {
    std::string op;
    std::vector<NodeId> parents;
    Tensor value;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(std::string_view op, Tensor value, std::vector<NodeId> parents, BackwardFn fn, bool needs) {
    nodes_.push_back(Node{std::string(op), std::move(parents), std::move(value), std::move(fn), needs});
    grads_.emplace_back();
    has_grad_.push_back(false);
    return Var(this, nodes_.size() - 1);
  }

  // Deques keep value() references valid while later ops append nodes.
  std::deque<Node> nodes_;
  std::deque<Tensor> grads_;
  std::vector<bool> has_grad_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return graph().value(id_); }

namespace detail {

inline Graph& same_graph(Var a, Var b, std::string_view op) {
  if (&a.graph() != &b.graph()) throw ContractError(std::string(op) + ": operands on different graphs");
  return a.graph();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_rank(const Tensor& t, std::size_t r, std::string_view op) {
  if (t.rank() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(t.shape()));
  }
}

inline void axpy(Tensor& dst, const Tensor& src, double alpha = 1.0) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += alpha * s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  auto& g = detail::same_graph(a, b, "matmul");
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require_rank(A, 2, "matmul");
  detail::require_rank(B, 2, "matmul");
  if (A.extent(1) != B.extent(0)) {
    throw DimensionError("matmul: inner extents differ " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  }
  Tensor C(Shape{A.extent(0), B.extent(1)});
  C.mat().noalias() = A.mat() * B.mat();
  const auto ia = a.id(), ib = b.id();
  return g.record("matmul", std::move(C), {ia, ib}, [ia, ib](Graph& gr, NodeId self) {
    const auto dC = gr.upstream(self).mat();
    if (gr.wants(ia)) gr.grad_slot(ia).mat().noalias() += dC * gr.value(ib).mat().transpose();
    if (gr.wants(ib)) gr.grad_slot(ib).mat().noalias() += gr.value(ia).mat().transpose() * dC;
  });
}

inline Var add(Var a, Var b) {
  auto& g = detail::same_graph(a, b, "add");
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  detail::axpy(out, b.value());
  const auto ia = a.id(), ib = b.id();
  return g.record("add", std::move(out), {ia, ib}, [ia, ib](Graph& gr, NodeId self) {
    const auto& up = gr.upstream(self);
    if (gr.wants(ia)) detail::axpy(gr.grad_slot(ia), up);
    if (gr.wants(ib)) detail::axpy(gr.grad_slot(ib), up);
  });
}

inline Var sub(Var a, Var b) {
  auto& g = detail::same_graph(a, b, "sub");
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  detail::axpy(out, b.value(), -1.0);
  const auto ia = a.id(), ib = b.id();
  return g.record("sub", std::move(out), {ia, ib}, [ia, ib](Graph& gr, NodeId self) {
    const auto& up = gr.upstream(self);
    if (gr.wants(ia)) detail::axpy(gr.grad_slot(ia), up);
    if (gr.wants(ib)) detail::axpy(gr.grad_slot(ib), up, -1.0);
  });
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  auto& g = detail::same_graph(a, b, "mul");
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  {
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  }
  const auto ia = a.id(), ib = b.id();
  return g.record("mul", std::move(out), {ia, ib}, [ia, ib](Graph& gr, NodeId self) {
    auto up = gr.upstream(self).data();
    if (gr.wants(ia)) {
      auto d = gr.grad_slot(ia).data();
      auto bv = gr.value(ib).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i] * bv[i];
    }
    if (gr.wants(ib)) {
      auto d = gr.grad_slot(ib).data();
      auto av = gr.value(ia).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  const auto ia = a.id();
  return a.graph().record("scale", std::move(out), {ia}, [ia, s](Graph& gr, NodeId self) {
    detail::axpy(gr.grad_slot(ia), gr.upstream(self), s);
  });
}

/// Adds a length-n bias to every row of an m x n matrix.
inline Var add_bias(Var x, Var bias) {
  auto& g = detail::same_graph(x, bias, "add_bias");
  const auto& X = x.value();
  const auto& b = bias.value();
  detail::require_rank(X, 2, "add_bias");
  if (b.size() != X.extent(1)) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(X.shape()));
  }
  Tensor out = X;
  const std::size_t m = X.extent(0), n = X.extent(1);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += b[j];
  const auto ix = x.id(), ib = bias.id();
  return g.record("add_bias", std::move(out), {ix, ib}, [ix, ib, m, n](Graph& gr, NodeId self) {
    const auto& up = gr.upstream(self);
    if (gr.wants(ix)) detail::axpy(gr.grad_slot(ix), up);
    if (gr.wants(ib)) {
      auto& db = gr.grad_slot(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) db[j] += up(i, j);
    }
  });
}

/// Dense layer x W + b with W stored [in x out].
inline Var linear(Var x, Var weight, Var bias) { return add_bias(matmul(x, weight), bias); }

// ---------------------------------------------------------------------------
// Shape plumbing

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const auto ix = x.id();
  return x.graph().record("reshape", std::move(out), {ix}, [ix](Graph& gr, NodeId self) {
    auto d = gr.grad_slot(ix).data();
    auto up = gr.upstream(self).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i];
  });
}

/// Column-wise concatenation of rank-2 tensors sharing the row count.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  auto& g = parts.front().graph();
  const std::size_t rows = parts.front().value().extent(0);
  std::size_t total = 0;
  std::vector<NodeId> ids;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::same_graph(parts.front(), p, "concat_cols");
    detail::require_rank(p.value(), 2, "concat_cols");
    if (p.value().extent(0) != rows) throw DimensionError("concat_cols: row counts differ");
    ids.push_back(p.id());
    widths.push_back(p.value().extent(1));
    total += widths.back();
  }
  Tensor out(Shape{rows, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out(i, offset + j) = v(i, j);
    offset += widths[k];
  }
  return g.record("concat_cols", std::move(out), ids, [ids, widths, rows](Graph& gr, NodeId self) {
    const auto& up = gr.upstream(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (gr.wants(ids[k])) {
        auto& d = gr.grad_slot(ids[k]);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) d(i, j) += up(i, off + j);
      }
      off += widths[k];
    }
  });
}

inline Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const auto& X = x.value();
  detail::require_rank(X, 2, "slice_cols");
  if (count == 0 || begin + count > X.extent(1)) throw DimensionError("slice_cols: range out of bounds");
  const std::size_t rows = X.extent(0);
  Tensor out(Shape{rows, count});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = X(i, begin + j);
  const auto ix = x.id();
  return x.graph().record("slice_cols", std::move(out), {ix}, [ix, begin, count, rows](Graph& gr, NodeId self) {
    const auto& up = gr.upstream(self);
    auto& d = gr.grad_slot(ix);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < count; ++j) d(i, begin + j) += up(i, j);
  });
}

/// Scales each row b of X [B x D] by w[b] where w is [B x 1].
inline Var scale_rows(Var x, Var w) {
  auto& g = detail::same_graph(x, w, "scale_rows");
  const auto& X = x.value();
  const auto& W = w.value();
  detail::require_rank(X, 2, "scale_rows");
  if (W.size() != X.extent(0)) throw DimensionError("scale_rows: weight count differs from row count");
  const std::size_t rows = X.extent(0), cols = X.extent(1);
  Tensor out = X;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out(i, j) *= W[i];
  const auto ix = x.id(), iw = w.id();
  return g.record("scale_rows", std::move(out), {ix, iw}, [ix, iw, rows, cols](Graph& gr, NodeId self) {
    const auto& up = gr.upstream(self);
    const auto& Xv = gr.value(ix);
    const auto& Wv = gr.value(iw);
    if (gr.wants(ix)) {
      auto& d = gr.grad_slot(ix);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) d(i, j) += up(i, j) * Wv[i];
    }
    if (gr.wants(iw)) {
      auto& d = gr.grad_slot(iw);
      for (std::size_t i = 0; i < rows; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < cols; ++j) acc += up(i, j) * Xv(i, j);
        d[i] += acc;
      }
    }
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const auto ix = x.id();
  return x.graph().record("sum", Tensor::scalar(s), {ix}, [ix](Graph& gr, NodeId self) {
    const double up = gr.upstream(self)[0];
    for (auto& d : gr.grad_slot(ix).data()) d += up;
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

// ---------------------------------------------------------------------------
// Nonlinearities

enum class Activation { relu, sigmoid, tanh };

inline Var activation(Var x, Activation kind) {
  Tensor out = x.value();
  switch (kind) {
    case Activation::relu:
      for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::sigmoid:
      for (auto& v : out.data()) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      break;
    case Activation::tanh:
      for (auto& v : out.data()) v = std::tanh(v);
      break;
  }
  const auto ix = x.id();
  const char* name = kind == Activation::relu ? "relu" : kind == Activation::sigmoid ? "sigmoid" : "tanh";
  return x.graph().record(name, std::move(out), {ix}, [ix, kind](Graph& gr, NodeId self) {
    auto up = gr.upstream(self).data();
    auto y = gr.value(self).data();
    auto d = gr.grad_slot(ix).data();
    switch (kind) {
      case Activation::relu:
        // Subgradient at exactly zero is taken as zero.
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += y[i] > 0.0 ? up[i] : 0.0;
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i] * y[i] * (1.0 - y[i]);
        break;
      case Activation::tanh:
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i] * (1.0 - y[i] * y[i]);
        break;
    }
  });
}

inline Var relu(Var x) { return activation(x, Activation::relu); }
inline Var sigmoid(Var x) { return activation(x, Activation::sigmoid); }
inline Var tanh(Var x) { return activation(x, Activation::tanh); }

namespace detail {

// Numerically stable softmax over the entries of `row` flagged in `mask`;
// masked-out entries get exactly zero.
inline void softmax_row(const double* in, double* out, std::size_t n, const std::vector<bool>* mask) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j)
    if (!mask || (*mask)[j]) mx = std::max(mx, in[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = (!mask || (*mask)[j]) ? std::exp(in[j] - mx) : 0.0;
    z += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= z;
}

inline Tensor softmax_values(const Tensor& x, const std::vector<bool>* mask) {
  if (x.rank() != 1 && x.rank() != 2) throw DimensionError("softmax: expected rank 1 or 2");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  if (mask) {
    if (mask->size() != n) throw DimensionError("softmax: mask width mismatch");
    if (std::none_of(mask->begin(), mask->end(), [](bool b) { return b; })) {
      throw AvailabilityError("softmax: every entry masked out");
    }
  }
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) softmax_row(x.data().data() + r * n, out.data().data() + r * n, n, mask);
  return out;
}

}  // namespace detail

/// Softmax over the last axis (a vector, or each row of a matrix). When a mask
/// is given, only flagged columns participate and the rest are exactly zero.
inline Var softmax(Var x, std::vector<bool> mask = {}) {
  const std::vector<bool>* m = mask.empty() ? nullptr : &mask;
  Tensor out = detail::softmax_values(x.value(), m);
  const std::size_t n = x.value().shape().back();
  const std::size_t rows = x.value().size() / n;
  const auto ix = x.id();
  return x.graph().record("softmax", std::move(out), {ix}, [ix, n, rows](Graph& gr, NodeId self) {
    auto up = gr.upstream(self).data();
    auto y = gr.value(self).data();
    auto d = gr.grad_slot(ix).data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += up[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) d[r * n + j] += y[r * n + j] * (up[r * n + j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over the batch of -log softmax(logits)[label].
inline Var cross_entropy(Var logits, const std::vector<std::size_t>& labels) {
  const auto& L = logits.value();
  detail::require_rank(L, 2, "cross_entropy");
  const std::size_t B = L.extent(0), C = L.extent(1);
  if (labels.size() != B) throw DimensionError("cross_entropy: label count differs from batch");
  for (auto y : labels) {
    if (y >= C) throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(C) + ")");
  }
  Tensor probs = detail::softmax_values(L, nullptr);
  double loss = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < C; ++j)
      if (L(i, j) > L(i, arg)) arg = j;
    const double mx = L(i, arg);
    // log-sum-exp = mx + log1p(sum of the non-max terms); log1p keeps losses
    // near zero accurate.
    double rest = 0.0;
    for (std::size_t j = 0; j < C; ++j)
      if (j != arg) rest += std::exp(L(i, j) - mx);
    loss += std::log1p(rest) - (L(i, labels[i]) - mx);
  }
  loss /= static_cast<double>(B);
  const auto il = logits.id();
  return logits.graph().record(
      "cross_entropy", Tensor::scalar(loss), {il},
      [il, labels, probs = std::move(probs), B, C](Graph& gr, NodeId self) {
        const double up = gr.upstream(self)[0] / static_cast<double>(B);
        auto& d = gr.grad_slot(il);
        for (std::size_t i = 0; i < B; ++i)
          for (std::size_t j = 0; j < C; ++j) d(i, j) += up * (probs(i, j) - (j == labels[i] ? 1.0 : 0.0));
      });
}

inline Var mse(Var pred, Var target) {
  auto& g = detail::same_graph(pred, target, "mse");
  detail::require_same_shape(pred.value(), target.value(), "mse");
  const auto p = pred.value().data();
  const auto t = target.value().data();
  const double n = static_cast<double>(p.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += (p[i] - t[i]) * (p[i] - t[i]);
  const auto ip = pred.id(), it = target.id();
  return g.record("mse", Tensor::scalar(acc / n), {ip, it}, [ip, it, n](Graph& gr, NodeId self) {
    const double up = gr.upstream(self)[0];
    auto pv = gr.value(ip).data();
    auto tv = gr.value(it).data();
    if (gr.wants(ip)) {
      auto d = gr.grad_slot(ip).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += up * 2.0 * (pv[i] - tv[i]) / n;
    }
    if (gr.wants(it)) {
      auto d = gr.grad_slot(it).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= up * 2.0 * (pv[i] - tv[i]) / n;
    }
  });
}

// ---------------------------------------------------------------------------
// Temporal ops

/// Same-padded, stride-1 1D convolution.
/// x: [B x C_in x T] (or [C_in x T]), kernels: [C_out x C_in x K], bias: [C_out].
inline Var conv1d(Var x, Var kernels, Var bias) {
  auto& g = detail::same_graph(x, kernels, "conv1d");
  detail::same_graph(x, bias, "conv1d");
  const auto& X = x.value();
  const auto& Kt = kernels.value();
  const auto& bv = bias.value();
  detail::require_rank(Kt, 3, "conv1d");
  const bool batched = X.rank() == 3;
  if (!batched && X.rank() != 2) throw DimensionError("conv1d: input must be [C x T] or [B x C x T]");
  const std::size_t B = batched ? X.extent(0) : 1;
  const std::size_t Cin = X.shape()[X.rank() - 2];
  const std::size_t T = X.shape().back();
  const std::size_t Cout = Kt.extent(0), K = Kt.extent(2);
  if (K % 2 == 0) throw ConfigError("conv1d: kernel size must be odd, got " + std::to_string(K));
  if (Kt.extent(1) != Cin) throw DimensionError("conv1d: kernel expects " + std::to_string(Kt.extent(1)) +
                                                " input channels, input has " + std::to_string(Cin));
  if (bv.size() != Cout) throw DimensionError("conv1d: bias length differs from output channels");
  const std::size_t half = K / 2;
  const std::size_t cols = Cin * K;

  // im2col: row (b, t) holds x[b, c, t + k - half] at column c*K + k.
  RowMatrix im(static_cast<Eigen::Index>(B * T), static_cast<Eigen::Index>(cols));
  im.setZero();
  const double* xp = X.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) {
      double* row = im.data() + (b * T + t) * cols;
      for (std::size_t c = 0; c < Cin; ++c)
        for (std::size_t k = 0; k < K; ++k) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(half);
          if (src >= 0 && src < static_cast<std::ptrdiff_t>(T)) row[c * K + k] = xp[(b * Cin + c) * T + static_cast<std::size_t>(src)];
        }
    }
  const ConstMatrixMap W(Kt.data().data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(cols));
  RowMatrix outcol(static_cast<Eigen::Index>(B * T), static_cast<Eigen::Index>(Cout));
  outcol.noalias() = im * W.transpose();

  Tensor out(batched ? Shape{B, Cout, T} : Shape{Cout, T});
  double* op = out.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) {
      const double* r = outcol.data() + (b * T + t) * Cout;
      for (std::size_t o = 0; o < Cout; ++o) op[(b * Cout + o) * T + t] = r[o] + bv[o];
    }

  const auto ix = x.id(), ik = kernels.id(), ib = bias.id();
  return g.record(
      "conv1d", std::move(out), {ix, ik, ib},
      [ix, ik, ib, B, Cin, Cout, T, K, half, cols, im = std::move(im)](Graph& gr, NodeId self) {
        const double* up = gr.upstream(self).data().data();
        RowMatrix dcol(static_cast<Eigen::Index>(B * T), static_cast<Eigen::Index>(Cout));
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t t = 0; t < T; ++t)
            for (std::size_t o = 0; o < Cout; ++o) dcol(static_cast<Eigen::Index>(b * T + t), static_cast<Eigen::Index>(o)) = up[(b * Cout + o) * T + t];
        if (gr.wants(ib)) {
          auto& db = gr.grad_slot(ib);
          for (std::size_t o = 0; o < Cout; ++o) db[o] += dcol.col(static_cast<Eigen::Index>(o)).sum();
        }
        if (gr.wants(ik)) {
          MatrixMap dW(gr.grad_slot(ik).data().data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(cols));
          dW.noalias() += dcol.transpose() * im;
        }
        if (gr.wants(ix)) {
          const ConstMatrixMap W(gr.value(ik).data().data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(cols));
          RowMatrix dim = dcol * W;
          double* dx = gr.grad_slot(ix).data().data();
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t) {
              const double* row = dim.data() + (b * T + t) * cols;
              for (std::size_t c = 0; c < Cin; ++c)
                for (std::size_t k = 0; k < K; ++k) {
                  const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(half);
                  if (src >= 0 && src < static_cast<std::ptrdiff_t>(T)) dx[(b * Cin + c) * T + static_cast<std::size_t>(src)] += row[c * K + k];
                }
            }
        }
      });
}

/// Mean over the time axis of x [B x C x T] -> [B x C]. With `lengths`, only
/// the first lengths[b] steps of sample b are averaged.
inline Var mean_time(Var x, const std::vector<std::size_t>& lengths = {}) {
  const auto& X = x.value();
  detail::require_rank(X, 3, "mean_time");
  const std::size_t B = X.extent(0), C = X.extent(1), T = X.extent(2);
  std::vector<std::size_t> len = lengths.empty() ? std::vector<std::size_t>(B, T) : lengths;
  if (len.size() != B) throw DimensionError("mean_time: lengths size differs from batch");
  for (auto l : len)
    if (l == 0 || l > T) throw DimensionError("mean_time: sequence length outside [1, T]");
  Tensor out(Shape{B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t t = 0; t < len[b]; ++t) acc += X(b, c, t);
      out(b, c) = acc / static_cast<double>(len[b]);
    }
  const auto ix = x.id();
  return x.graph().record("mean_time", std::move(out), {ix}, [ix, B, C, len](Graph& gr, NodeId self) {
    const auto& up = gr.upstream(self);
    auto& d = gr.grad_slot(ix);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const double g = up(b, c) / static_cast<double>(len[b]);
        for (std::size_t t = 0; t < len[b]; ++t) d(b, c, t) += g;
      }
  });
}

/// Extracts time step t of x [B x C x T] as a [B x C] matrix.
inline Var time_step(Var x, std::size_t t) {
  const auto& X = x.value();
  detail::require_rank(X, 3, "time_step");
  const std::size_t B = X.extent(0), C = X.extent(1), T = X.extent(2);
  if (t >= T) throw IndexError("time_step: step out of range");
  Tensor out(Shape{B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) out(b, c) = X(b, c, t);
  const auto ix = x.id();
  return x.graph().record("time_step", std::move(out), {ix}, [ix, B, C, t](Graph& gr, NodeId self) {
    const auto& up = gr.upstream(self);
    auto& d = gr.grad_slot(ix);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) d(b, c, t) += up(b, c);
  });
}

}  // namespace mvfuse
