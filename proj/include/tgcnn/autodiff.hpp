#pragma once

// Tape-based reverse-mode differentiation over the small, fixed set of
// operations the temporal-graph model and the sequence baselines need.
//
// Every value is an Array of doubles. Matrices are row-major `rows x cols`;
// a scalar is 1 x 1. Nodes are appended to a Tape in evaluation order, so a
// node's parents always carry smaller ids and a reverse sweep over ids is a
// valid reverse topological order.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tgcnn/error.hpp"
#include "tgcnn/random.hpp"

namespace tgcnn::ad {

struct Array {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Array() = default;
  explicit Array(std::vector<std::size_t> s, double fill = 0.0) : shape(std::move(s)), data(count(shape), fill) {}
  Array(std::vector<std::size_t> s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != count(shape)) throw InternalError("Array: value count does not match shape");
  }

  static Array matrix(std::size_t rows, std::size_t cols, double fill = 0.0) { return Array({rows, cols}, fill); }
  static Array scalar(double v) { return Array({1, 1}, std::vector<double>{v}); }
  static Array column(std::vector<double> v) {
    const auto n = v.size();
    return Array({n, 1}, std::move(v));
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : size() / rows(); }
  double operator[](std::size_t i) const { return data[i]; }
  double& operator[](std::size_t i) { return data[i]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }

  friend bool operator==(const Array&, const Array&) = default;
};

/// Ordered name -> array map; the unit the optimizer, gradient check and checkpoints work on.
using ParameterMap = std::map<std::string, Array>;

// --------------------------------------------------------------------------
// Op registry

struct OpInfo {
  std::string_view name;
  int arity;  ///< differentiable inputs; -1 = variadic
  std::string_view summary;
};

inline constexpr OpInfo kOps[] = {
    {"sparse_conv3d", 2, "COO temporal graph (values differentiable) convolved with a dense F x V x V x d filter bank"},
    {"exp", 1, "elementwise exp"},
    {"negate", 1, "elementwise negation"},
    {"scale", 2, "array times a scalar node (or a constant)"},
    {"matmul", 2, "matrix product"},
    {"add", 2, "elementwise sum of equal shapes"},
    {"add_bias", 2, "rows x cols plus a per-row bias column"},
    {"sigmoid", 1, "logistic function"},
    {"tanh", 1, "hyperbolic tangent"},
    {"leaky_relu", 1, "max(x, slope * x)"},
    {"mul", 2, "elementwise product"},
    {"concat", -1, "row-wise concatenation"},
    {"slice", 1, "contiguous row or column range"},
    {"batch_norm", 3, "per-row normalisation over columns, training or inference"},
    {"dropout", 1, "inverted dropout, active in training only"},
    {"softplus", 1, "log(1 + exp(x))"},
    {"sum", 1, "sum of all elements"},
    {"l1_norm", 1, "sum of absolute values"},
    {"l2_norm", 1, "sum of squares"},
    {"graph_regulariser", 1, "walk-continuity penalty on a filter bank"},
    {"binary_cross_entropy", 1, "mean BCE of sigmoid(logits) against constant labels"},
};

inline std::vector<std::string> supported_ops() {
  std::vector<std::string> names;
  for (const auto& op : kOps) names.emplace_back(op.name);
  return names;
}

/// Looks an op up by name; throws ConfigError for anything unregistered.
inline const OpInfo& op_info(std::string_view name) {
  for (const auto& op : kOps)
    if (op.name == name) return op;
  std::string valid;
  for (const auto& op : kOps) valid += (valid.empty() ? "" : ", ") + std::string(op.name);
  throw ConfigError("unregistered op '" + std::string(name) + "' (registered: " + valid + ")");
}

// --------------------------------------------------------------------------
// Tape

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    Array value;
    std::vector<double> grad;  ///< empty until something flows into it
    std::vector<std::size_t> parents;
    BackwardFn backward;
    std::string_view op;
    bool requires_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is wanted.
  Var variable(Array value) { return push(std::move(value), {}, nullptr, "variable", true); }
  Var constant(Array value) { return push(std::move(value), {}, nullptr, "constant", false); }

  const Array& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of the last backward() target w.r.t. `v`; zeros if nothing reached it.
  Array gradient(Var v) const {
    const auto& n = nodes_.at(v.id);
    if (n.grad.empty()) return Array(n.value.shape, 0.0);
    return Array(n.value.shape, n.grad);
  }

  /// Mutable gradient buffer of a node, allocated as zeros on first use.
  std::vector<double>& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }
  const Node& node(std::size_t id) const { return nodes_[id]; }

  /// Records an op result. Parents must already be on this tape.
  Var push(Array value, std::vector<std::size_t> parents, BackwardFn backward, std::string_view op, bool leaf_requires_grad = false) {
    const std::size_t id = nodes_.size();
    bool rg = leaf_requires_grad;
    for (const auto p : parents) {
      if (p >= id) throw InternalError("computation graph cycle: node " + std::to_string(id) + " depends on " + std::to_string(p));
      rg = rg || nodes_[p].requires_grad;
    }
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.backward = rg ? std::move(backward) : nullptr;
    n.op = op;
    n.requires_grad = rg;
    nodes_.push_back(std::move(n));
    return Var{this, id};
  }

  /// Reverse sweep from a scalar; clears previous gradients first.
  void backward(Var loss) {
    if (loss.tape != this) throw InternalError("backward: variable belongs to another tape");
    if (nodes_.at(loss.id).value.size() != 1) throw InternalError("backward: loss must be a scalar");
    for (auto& n : nodes_) n.grad.clear();
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
  }

 private:
  std::vector<Node> nodes_;
};

namespace detail {

inline Tape& tape_of(Var a) {
  if (!a.tape) throw InternalError("variable is not attached to a tape");
  return *a.tape;
}

inline void same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw InternalError("variables live on different tapes");
}

inline void check_same_shape(const Array& a, const Array& b, std::string_view op) {
  if (a.shape != b.shape) throw InternalError(std::string(op) + ": shape mismatch");
}

/// Pushes a unary elementwise op whose derivative is a function of (x, y).
template <class F, class D>
Var unary(Var x, std::string_view op, F f, D dfdx) {
  Tape& t = tape_of(x);
  const Array& xv = t.value(x);
  Array out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xid = x.id;
  return t.push(std::move(out), {xid}, [xid, dfdx](Tape& tp, std::size_t self) {
    const auto& xv = tp.node(xid).value;
    const auto& yv = tp.node(self).value;
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
  }, op);
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double sign(double x) { return static_cast<double>((x > 0.0) - (x < 0.0)); }

}  // namespace detail

// --------------------------------------------------------------------------
// Elementwise

inline Var exp(Var x) {
  return detail::unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var negate(Var x) {
  return detail::unary(x, "negate", [](double v) { return -v; }, [](double, double) { return -1.0; });
}

inline Var sigmoid(Var x) {
  return detail::unary(x, "sigmoid", detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var x) {
  return detail::unary(x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var leaky_relu(Var x, double slope = 0.01) {
  return detail::unary(
      x, "leaky_relu", [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

inline Var softplus(Var x) {
  return detail::unary(
      x, "softplus", [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); },
      [](double v, double) { return detail::stable_sigmoid(v); });
}

/// x * c for a constant c.
inline Var scale(Var x, double c) {
  return detail::unary(x, "scale", [c](double v) { return c * v; }, [c](double, double) { return c; });
}

/// x * s where s is a 1 x 1 node.
inline Var scale(Var x, Var s) {
  detail::same_tape(x, s);
  Tape& t = detail::tape_of(x);
  if (t.value(s).size() != 1) throw InternalError("scale: factor must be a scalar");
  const double sv = t.value(s)[0];
  const Array& xv = t.value(x);
  Array out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = sv * xv[i];
  const std::size_t xid = x.id, sid = s.id;
  return t.push(std::move(out), {xid, sid}, [xid, sid](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    const auto& xv = tp.node(xid).value;
    const double sv = tp.node(sid).value[0];
    if (tp.node(xid).requires_grad) {
      auto& gx = tp.grad_buffer(xid);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
    }
    if (tp.node(sid).requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      tp.grad_buffer(sid)[0] += acc;
    }
  }, "scale");
}

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = detail::tape_of(a);
  detail::check_same_shape(t.value(a), t.value(b), "add");
  Array out = t.value(a);
  const auto& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return t.push(std::move(out), {aid, bid}, [aid, bid](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    for (const auto p : {aid, bid}) {
      if (!tp.node(p).requires_grad) continue;
      auto& gp = tp.grad_buffer(p);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  }, "add");
}

inline Var mul(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = detail::tape_of(a);
  detail::check_same_shape(t.value(a), t.value(b), "mul");
  Array out = t.value(a);
  const auto& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return t.push(std::move(out), {aid, bid}, [aid, bid](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    const auto& av = tp.node(aid).value;
    const auto& bv = tp.node(bid).value;
    if (tp.node(aid).requires_grad) {
      auto& ga = tp.grad_buffer(aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.node(bid).requires_grad) {
      auto& gb = tp.grad_buffer(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  }, "mul");
}

// --------------------------------------------------------------------------
// Linear algebra and shape ops

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

// C (n x m) += A (n x k) * B (k x m)
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  const auto N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k), M = static_cast<Eigen::Index>(m);
  MutMap(c, N, M).noalias() += ConstMap(a, N, K) * ConstMap(b, K, M);
}

// C (n x k) += G (n x m) * B^T, B is k x m
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t n, std::size_t m, std::size_t k) {
  const auto N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k), M = static_cast<Eigen::Index>(m);
  MutMap(c, N, K).noalias() += ConstMap(g, N, M) * ConstMap(b, K, M).transpose();
}

// C (k x m) += A^T * G, A is n x k, G is n x m
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t n, std::size_t k, std::size_t m) {
  const auto N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k), M = static_cast<Eigen::Index>(m);
  MutMap(c, K, M).noalias() += ConstMap(a, N, K).transpose() * ConstMap(g, N, M);
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = detail::tape_of(a);
  const Array& av = t.value(a);
  const Array& bv = t.value(b);
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  if (bv.rows() != k) throw InternalError("matmul: inner dimensions differ");
  Array out = Array::matrix(n, m);
  detail::gemm_nn(av.data.data(), bv.data.data(), out.data.data(), n, k, m);
  const std::size_t aid = a.id, bid = b.id;
  return t.push(std::move(out), {aid, bid}, [aid, bid, n, k, m](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    if (tp.node(aid).requires_grad)
      detail::gemm_nt(g.data(), tp.node(bid).value.data.data(), tp.grad_buffer(aid).data(), n, m, k);
    if (tp.node(bid).requires_grad)
      detail::gemm_tn(tp.node(aid).value.data.data(), g.data(), tp.grad_buffer(bid).data(), n, k, m);
  }, "matmul");
}

/// X (rows x cols) + b (rows) broadcast along columns.
inline Var add_bias(Var x, Var bias) {
  detail::same_tape(x, bias);
  Tape& t = detail::tape_of(x);
  Array out = t.value(x);
  const auto& bv = t.value(bias);
  const std::size_t r = out.rows(), c = out.cols();
  if (bv.size() != r) throw InternalError("add_bias: bias length must equal row count");
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] += bv[i];
  const std::size_t xid = x.id, bid = bias.id;
  return t.push(std::move(out), {xid, bid}, [xid, bid, r, c](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    if (tp.node(xid).requires_grad) {
      auto& gx = tp.grad_buffer(xid);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tp.node(bid).requires_grad) {
      auto& gb = tp.grad_buffer(bid);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[i] += g[i * c + j];
    }
  }, "add_bias");
}

/// Stacks matrices with equal column counts on top of each other.
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw InternalError("concat: nothing to concatenate");
  Tape& t = detail::tape_of(parts[0]);
  const std::size_t c = t.value(parts[0]).cols();
  std::size_t r = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    detail::same_tape(parts[0], p);
    if (t.value(p).cols() != c) throw InternalError("concat: column counts differ");
    r += t.value(p).rows();
    ids.push_back(p.id);
  }
  Array out = Array::matrix(r, c);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const auto& v = t.value(p).data;
    std::copy(v.begin(), v.end(), out.data.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += v.size();
  }
  auto parents = ids;
  return t.push(std::move(out), std::move(parents), [ids](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    std::size_t offset = 0;
    for (const auto id : ids) {
      const std::size_t n = tp.node(id).value.size();
      if (tp.node(id).requires_grad) {
        auto& gp = tp.grad_buffer(id);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
      }
      offset += n;
    }
  }, "concat");
}

inline Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

enum class Axis { rows, cols };

/// Rows [begin, end) or columns [begin, end) of a matrix.
inline Var slice(Var x, Axis axis, std::size_t begin, std::size_t end) {
  Tape& t = detail::tape_of(x);
  const Array& xv = t.value(x);
  const std::size_t r = xv.rows(), c = xv.cols();
  const std::size_t limit = axis == Axis::rows ? r : c;
  if (begin > end || end > limit) throw InternalError("slice: range out of bounds");
  const std::size_t out_r = axis == Axis::rows ? end - begin : r;
  const std::size_t out_c = axis == Axis::rows ? c : end - begin;
  Array out = Array::matrix(out_r, out_c);
  for (std::size_t i = 0; i < out_r; ++i)
    for (std::size_t j = 0; j < out_c; ++j)
      out.data[i * out_c + j] = axis == Axis::rows ? xv.data[(begin + i) * c + j] : xv.data[i * c + begin + j];
  const std::size_t xid = x.id;
  return t.push(std::move(out), {xid}, [xid, axis, begin, out_r, out_c, c](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_buffer(xid);
    for (std::size_t i = 0; i < out_r; ++i)
      for (std::size_t j = 0; j < out_c; ++j) {
        const std::size_t src = axis == Axis::rows ? (begin + i) * c + j : i * c + begin + j;
        gx[src] += g[i * out_c + j];
      }
  }, "slice");
}

// --------------------------------------------------------------------------
// Reductions and penalties

inline Var sum(Var x) {
  Tape& t = detail::tape_of(x);
  const auto& v = t.value(x).data;
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  const std::size_t xid = x.id;
  return t.push(Array::scalar(s), {xid}, [xid](Tape& tp, std::size_t self) {
    const double g = tp.node(self).grad[0];
    for (auto& gi : tp.grad_buffer(xid)) gi += g;
  }, "sum");
}

inline Var l1_norm(Var x) {
  Tape& t = detail::tape_of(x);
  double s = 0.0;
  for (const double v : t.value(x).data) s += std::abs(v);
  const std::size_t xid = x.id;
  return t.push(Array::scalar(s), {xid}, [xid](Tape& tp, std::size_t self) {
    const double g = tp.node(self).grad[0];
    const auto& xv = tp.node(xid).value.data;
    auto& gx = tp.grad_buffer(xid);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g * detail::sign(xv[i]);
  }, "l1_norm");
}

/// Sum of squares (the squared Euclidean norm).
inline Var l2_norm(Var x) {
  Tape& t = detail::tape_of(x);
  double s = 0.0;
  for (const double v : t.value(x).data) s += v * v;
  const std::size_t xid = x.id;
  return t.push(Array::scalar(s), {xid}, [xid](Tape& tp, std::size_t self) {
    const double g = tp.node(self).grad[0];
    const auto& xv = tp.node(xid).value.data;
    auto& gx = tp.grad_buffer(xid);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += 2.0 * g * xv[i];
  }, "l2_norm");
}

/// Walk-continuity penalty of an F x V x V x d filter bank:
///   (1/F) sum_f sum_{delta < d-1} sum_v | in_v(delta) - out_v(delta+1) |
/// with in_v(delta) = sum_i |W[f,i,v,delta]| and out_v(delta) = sum_j |W[f,v,j,delta]|.
/// A node that receives mass at one step but emits none at the next (or the
/// reverse) is penalised.
inline double graph_regulariser_value(const Array& w) {
  if (w.shape.size() != 4) throw InternalError("graph_regulariser: filter bank must be F x V x V x d");
  const std::size_t F = w.shape[0], V = w.shape[1], d = w.shape[3];
  auto at = [&](std::size_t f, std::size_t i, std::size_t j, std::size_t s) { return w.data[((f * V + i) * V + j) * d + s]; };
  // Extended accumulation: the penalty is piecewise linear, so exact cancellation
  // is common and double rounding would show up as spurious finite differences.
  long double total = 0.0L;
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t s = 0; s + 1 < d; ++s)
      for (std::size_t v = 0; v < V; ++v) {
        long double in = 0.0L, out = 0.0L;
        for (std::size_t i = 0; i < V; ++i) in += std::abs(at(f, i, v, s));
        for (std::size_t j = 0; j < V; ++j) out += std::abs(at(f, v, j, s + 1));
        total += std::abs(in - out);
      }
  return F == 0 ? 0.0 : static_cast<double>(total / static_cast<long double>(F));
}

inline Var graph_regulariser(Var w) {
  Tape& t = detail::tape_of(w);
  const double value = graph_regulariser_value(t.value(w));
  const std::size_t wid = w.id;
  return t.push(Array::scalar(value), {wid}, [wid](Tape& tp, std::size_t self) {
    const double g = tp.node(self).grad[0];
    const auto& wv = tp.node(wid).value;
    const std::size_t F = wv.shape[0], V = wv.shape[1], d = wv.shape[3];
    auto& gw = tp.grad_buffer(wid);
    auto idx = [&](std::size_t f, std::size_t i, std::size_t j, std::size_t s) { return ((f * V + i) * V + j) * d + s; };
    const double scale = g / static_cast<double>(F);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t s = 0; s + 1 < d; ++s)
        for (std::size_t v = 0; v < V; ++v) {
          double in = 0.0, out = 0.0;
          for (std::size_t i = 0; i < V; ++i) in += std::abs(wv.data[idx(f, i, v, s)]);
          for (std::size_t j = 0; j < V; ++j) out += std::abs(wv.data[idx(f, v, j, s + 1)]);
          const double sg = scale * detail::sign(in - out);
          if (sg == 0.0) continue;
          for (std::size_t i = 0; i < V; ++i) gw[idx(f, i, v, s)] += sg * detail::sign(wv.data[idx(f, i, v, s)]);
          for (std::size_t j = 0; j < V; ++j) gw[idx(f, v, j, s + 1)] -= sg * detail::sign(wv.data[idx(f, v, j, s + 1)]);
        }
  }, "graph_regulariser");
}

/// Probability clamp applied inside the cross-entropy logs.
inline constexpr double kProbabilityClamp = 1e-12;

/// Mean binary cross-entropy of sigmoid(logits) against constant 0/1 labels.
inline Var binary_cross_entropy(Var logits, std::vector<double> labels) {
  Tape& t = detail::tape_of(logits);
  const auto& z = t.value(logits).data;
  if (z.size() != labels.size() || z.empty()) throw InternalError("binary_cross_entropy: label count mismatch");
  const double n = static_cast<double>(z.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double p = std::clamp(detail::stable_sigmoid(z[i]), kProbabilityClamp, 1.0 - kProbabilityClamp);
    loss -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
  }
  const std::size_t zid = logits.id;
  return t.push(Array::scalar(loss / n), {zid}, [zid, labels = std::move(labels), n](Tape& tp, std::size_t self) {
    const double g = tp.node(self).grad[0];
    const auto& z = tp.node(zid).value.data;
    auto& gz = tp.grad_buffer(zid);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double p = detail::stable_sigmoid(z[i]);
      if (p < kProbabilityClamp || p > 1.0 - kProbabilityClamp) continue;
      gz[i] += g * (p - labels[i]) / n;
    }
  }, "binary_cross_entropy");
}

// --------------------------------------------------------------------------
// Batch norm and dropout

enum class Mode { train, infer };

/// Running moments owned by the model; updated in training-mode forward passes.
struct BatchNormRunning {
  Array* mean = nullptr;
  Array* var = nullptr;
  double momentum = 0.1;
};

inline constexpr double kBatchNormEps = 1e-5;

/// Normalises every row of x (features x observations) over its columns, then
/// applies per-row scale and shift. Inference mode uses the running moments.
inline Var batch_norm(Var x, Var scale, Var shift, Mode mode, BatchNormRunning running = {}) {
  detail::same_tape(x, scale);
  detail::same_tape(x, shift);
  Tape& t = detail::tape_of(x);
  const Array& xv = t.value(x);
  const std::size_t r = xv.rows(), c = xv.cols();
  if (t.value(scale).size() != r || t.value(shift).size() != r) throw InternalError("batch_norm: scale/shift length must equal row count");
  std::vector<double> mean(r), inv_std(r);
  if (mode == Mode::train) {
    if (c < 1) throw InternalError("batch_norm: empty batch");
    for (std::size_t i = 0; i < r; ++i) {
      double m = 0.0;
      for (std::size_t j = 0; j < c; ++j) m += xv.data[i * c + j];
      m /= static_cast<double>(c);
      double v = 0.0;
      for (std::size_t j = 0; j < c; ++j) v += (xv.data[i * c + j] - m) * (xv.data[i * c + j] - m);
      v /= static_cast<double>(c);
      mean[i] = m;
      inv_std[i] = 1.0 / std::sqrt(v + kBatchNormEps);
      if (running.mean && running.var) {
        const double unbiased = c > 1 ? v * static_cast<double>(c) / static_cast<double>(c - 1) : v;
        running.mean->data[i] = (1.0 - running.momentum) * running.mean->data[i] + running.momentum * m;
        running.var->data[i] = (1.0 - running.momentum) * running.var->data[i] + running.momentum * unbiased;
      }
    }
  } else {
    if (!running.mean || !running.var) throw InternalError("batch_norm: inference mode needs running moments");
    for (std::size_t i = 0; i < r; ++i) {
      mean[i] = running.mean->data[i];
      inv_std[i] = 1.0 / std::sqrt(running.var->data[i] + kBatchNormEps);
    }
  }
  const auto& g = t.value(scale).data;
  const auto& b = t.value(shift).data;
  Array xhat = Array::matrix(r, c);
  Array out = Array::matrix(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xv.data[i * c + j] - mean[i]) * inv_std[i];
      xhat.data[i * c + j] = h;
      out.data[i * c + j] = g[i] * h + b[i];
    }
  const std::size_t xid = x.id, gid = scale.id, bid = shift.id;
  return t.push(std::move(out), {xid, gid, bid},
                [xid, gid, bid, r, c, mode, inv_std = std::move(inv_std), xhat = std::move(xhat)](Tape& tp, std::size_t self) {
                  const auto& dy = tp.node(self).grad;
                  const auto& gv = tp.node(gid).value.data;
                  const double n = static_cast<double>(c);
                  for (std::size_t i = 0; i < r; ++i) {
                    double sum_dy = 0.0, sum_dy_xhat = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                      sum_dy += dy[i * c + j];
                      sum_dy_xhat += dy[i * c + j] * xhat.data[i * c + j];
                    }
                    if (tp.node(gid).requires_grad) tp.grad_buffer(gid)[i] += sum_dy_xhat;
                    if (tp.node(bid).requires_grad) tp.grad_buffer(bid)[i] += sum_dy;
                    if (!tp.node(xid).requires_grad) continue;
                    auto& gx = tp.grad_buffer(xid);
                    const double k = gv[i] * inv_std[i];
                    for (std::size_t j = 0; j < c; ++j) {
                      if (mode == Mode::train)
                        gx[i * c + j] += k * (dy[i * c + j] - sum_dy / n - xhat.data[i * c + j] * sum_dy_xhat / n);
                      else
                        gx[i * c + j] += k * dy[i * c + j];
                    }
                  }
                },
                "batch_norm");
}

/// Inverted dropout: in training, zeroes each element with probability `rate`
/// and rescales survivors by 1/(1-rate). Identity in inference.
inline Var dropout(Var x, double rate, Mode mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0,1)");
  Tape& t = detail::tape_of(x);
  const Array& xv = t.value(x);
  std::vector<double> mask(xv.size(), 1.0);
  if (mode == Mode::train && rate > 0.0) {
    const double keep = 1.0 / (1.0 - rate);
    for (auto& m : mask) m = rng.uniform() < rate ? 0.0 : keep;
  }
  Array out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * mask[i];
  const std::size_t xid = x.id;
  return t.push(std::move(out), {xid}, [xid, mask = std::move(mask)](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  }, "dropout");
}

// --------------------------------------------------------------------------
// Sparse 3D convolution

/// Nonzero structure of a batch of temporal graph tensors. Entry values live
/// in a separate (differentiable) node so the time transform can be learned.
struct SparseBatch {
  struct Entry {
    int i, j, k, sample;
  };
  int V = 0;
  int K = 0;
  int batch = 0;
  std::vector<Entry> entries;
};

inline std::size_t conv_output_length(int K, int depth, int stride) {
  if (depth < 1 || depth > K) throw ConfigError("filter depth must lie in [1, K]");
  if (stride < 1) throw ConfigError("stride must be >= 1");
  return static_cast<std::size_t>((K - depth) / stride + 1);
}

/// out[f, l*B + b] = sum over entries e of sample b with l*stride <= k_e < l*stride + d
///                   of W[f, i_e, j_e, k_e - l*stride] * values[e].
/// Cost is O(nnz * F * d); the dense V x V x K tensor is never formed.
inline Var sparse_conv3d(Var filters, Var values, std::shared_ptr<const SparseBatch> structure, int stride) {
  detail::same_tape(filters, values);
  Tape& t = detail::tape_of(filters);
  const Array& w = t.value(filters);
  if (w.shape.size() != 4 || w.shape[1] != w.shape[2]) throw InternalError("sparse_conv3d: filter bank must be F x V x V x d");
  const auto& sb = *structure;
  const int F = static_cast<int>(w.shape[0]);
  const int V = static_cast<int>(w.shape[1]);
  const int d = static_cast<int>(w.shape[3]);
  if (V != sb.V) throw InternalError("sparse_conv3d: filter node count differs from tensor V");
  if (t.value(values).size() != sb.entries.size()) throw InternalError("sparse_conv3d: one value per entry required");
  const std::size_t L = conv_output_length(sb.K, d, stride);
  const std::size_t B = static_cast<std::size_t>(sb.batch);
  const std::size_t fstride = static_cast<std::size_t>(V) * V * d;
  Array out = Array::matrix(static_cast<std::size_t>(F), L * B);
  const auto& vals = t.value(values).data;

  auto for_each_position = [d, stride, L](int k, auto&& fn) {
    const int hi = std::min(static_cast<int>(L) - 1, k / stride);
    const int lo_num = k - d + 1;
    const int lo = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
    for (int l = lo; l <= hi; ++l) fn(l, k - l * stride);
  };

  for (std::size_t e = 0; e < sb.entries.size(); ++e) {
    const auto& en = sb.entries[e];
    const double v = vals[e];
    if (v == 0.0) continue;
    const std::size_t base = (static_cast<std::size_t>(en.i) * V + en.j) * d;
    for_each_position(en.k, [&](int l, int delta) {
      const std::size_t col = static_cast<std::size_t>(l) * B + en.sample;
      for (int f = 0; f < F; ++f) out.data[f * L * B + col] += w.data[f * fstride + base + delta] * v;
    });
  }

  const std::size_t wid = filters.id, vid = values.id;
  return t.push(std::move(out), {wid, vid}, [wid, vid, structure, F, V, d, L, B, fstride, for_each_position](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    const auto& w = tp.node(wid).value.data;
    const auto& vals = tp.node(vid).value.data;
    const bool want_w = tp.node(wid).requires_grad;
    const bool want_v = tp.node(vid).requires_grad;
    std::vector<double>* gw = want_w ? &tp.grad_buffer(wid) : nullptr;
    std::vector<double>* gv = want_v ? &tp.grad_buffer(vid) : nullptr;
    const auto& entries = structure->entries;
    for (std::size_t e = 0; e < entries.size(); ++e) {
      const auto& en = entries[e];
      const std::size_t base = (static_cast<std::size_t>(en.i) * V + en.j) * d;
      const double v = vals[e];
      double acc = 0.0;
      for_each_position(en.k, [&](int l, int delta) {
        const std::size_t col = static_cast<std::size_t>(l) * B + en.sample;
        for (int f = 0; f < F; ++f) {
          const double go = g[f * L * B + col];
          if (gw) (*gw)[f * fstride + base + delta] += go * v;
          acc += go * w[f * fstride + base + delta];
        }
      });
      if (gv) (*gv)[e] += acc;
    }
  }, "sparse_conv3d");
}

}  // namespace tgcnn::ad
