#pragma once

// Dense row-major tensors, a tape-based reverse-mode autodiff graph, and the
// primitive differentiable ops the models are built from.
//
// Everything is templated on the scalar type: training runs in float, the
// finite-difference gradient checker instantiates the same code in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cmlmcse/errors.hpp"
#include "cmlmcse/random.hpp"

namespace cmlmcse {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // 2-D view helpers: the last dimension is the row length.
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : numel() / cols(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* row(std::size_t r) noexcept { return data_.data() + r * cols(); }
  const T* row(std::size_t r) const noexcept { return data_.data() + r * cols(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
  }

 private:
  Shape shape_;
  std::vector<T, Eigen::aligned_allocator<T>> data_;
};

// Byte-level equality: distinguishes -0 from +0 and compares NaN payloads.
template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() &&
         (a.numel() == 0 || std::memcmp(a.data(), b.data(), a.numel() * sizeof(T)) == 0);
}

// A named learnable tensor. Frozen parameters enter graphs as constants, so
// their gradient buffer is never written.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool is_frozen = false)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), frozen(is_frozen) {}

  void zero_grad() { grad = Tensor<T>(value.shape()); }

  template <class U>
  Parameter<U> cast() const {
    Parameter<U> out(name, value.template cast<U>(), frozen);
    out.grad = grad.template cast<U>();
    return out;
  }
};

template <class T>
class Graph;

// Handle to a node of a Graph.
template <class T>
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return graph_ != nullptr; }
  Graph<T>& graph() const {
    if (!graph_) throw StateError("use of an unbound Var");
    return *graph_;
  }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const { return graph().value(*this); }
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph<T>;
  Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
struct BackwardContext {
  const Tensor<T>& out;
  const Tensor<T>& grad_out;
  std::vector<const Tensor<T>*> in;
  // Null where the input does not require a gradient.
  std::vector<Tensor<T>*> grad_in;
};

template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(BackwardContext<T>&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaf bound to a parameter; tracked unless the parameter is frozen.
  Var<T> param(Parameter<T>& p) {
    Node n;
    n.op = "param:" + p.name;
    n.value = p.value;
    n.requires_grad = !p.frozen;
    n.param = p.frozen ? nullptr : &p;
    return push(std::move(n));
  }

  Var<T> constant(Tensor<T> value) {
    Node n;
    n.op = "constant";
    n.value = std::move(value);
    return push(std::move(n));
  }

  // Leaf whose gradient is readable through grad() after backward.
  Var<T> variable(Tensor<T> value) {
    Node n;
    n.op = "variable";
    n.value = std::move(value);
    n.requires_grad = true;
    return push(std::move(n));
  }

  // Appends an op node; the output must be finite.
  Var<T> record(std::string op, Tensor<T> value, std::vector<Var<T>> inputs, BackwardFn backward) {
    if (!value.all_finite()) throw NumericError("non-finite value produced by op '" + op + "'");
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    for (const Var<T>& v : inputs) {
      check_owned(v);
      n.inputs.push_back(v.id_);
      n.requires_grad = n.requires_grad || nodes_[v.id_].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  const Tensor<T>& value(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id_].value;
  }

  bool requires_grad(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id_].requires_grad;
  }

  const std::string& op_name(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id_].op;
  }

  // Gradient of the last backward() loss w.r.t. v; zeros if v is off-path.
  Tensor<T> grad(Var<T> v) const {
    check_owned(v);
    const Node& n = nodes_[v.id_];
    if (n.grad.numel() == n.value.numel() && !n.grad.empty()) return n.grad;
    return Tensor<T>(n.value.shape());
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // Node ids visited by the last backward(), in visit order.
  const std::vector<std::size_t>& last_visit_order() const noexcept { return visited_; }

  // Reverse-mode sweep from a scalar loss. Node gradients are recomputed on
  // every call; parameter gradient buffers accumulate until zeroed.
  void backward(Var<T> loss, T seed = T(1)) {
    if (!loss.valid() || loss.graph_ != this || nodes_.empty()) {
      throw StateError("backward() called before a forward pass built the loss on this graph");
    }
    if (loss.id_ >= nodes_.size()) throw StateError("loss node does not belong to this graph");
    Node& root = nodes_[loss.id_];
    if (root.value.numel() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(root.value.shape()));
    }

    std::vector<char> on_path(loss.id_ + 1, 0);
    on_path[loss.id_] = root.requires_grad ? 1 : 0;
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
      if (!on_path[id]) continue;
      for (std::size_t in : nodes_[id].inputs) {
        if (nodes_[in].requires_grad) on_path[in] = 1;
      }
    }
    for (Node& n : nodes_) n.grad = Tensor<T>();
    for (std::size_t id = 0; id <= loss.id_; ++id) {
      if (on_path[id]) nodes_[id].grad = Tensor<T>(nodes_[id].value.shape());
    }

    visited_.clear();
    if (!root.requires_grad) return;
    root.grad[0] = seed;
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
      if (!on_path[id]) continue;
      Node& n = nodes_[id];
      visited_.push_back(id);
      if (n.backward) {
        BackwardContext<T> ctx{n.value, n.grad, {}, {}};
        for (std::size_t in : n.inputs) {
          ctx.in.push_back(&nodes_[in].value);
          ctx.grad_in.push_back(on_path[in] ? &nodes_[in].grad : nullptr);
        }
        n.backward(ctx);
      }
      if (n.param) {
        Tensor<T>& dst = n.param->grad;
        if (dst.shape() != n.value.shape()) dst = Tensor<T>(n.value.shape());
        for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += n.grad[i];
      }
    }
  }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  void check_owned(Var<T> v) const {
    if (v.graph_ != this || v.id_ >= nodes_.size()) throw StateError("Var does not belong to this graph");
  }

  std::deque<Node> nodes_;
  std::vector<std::size_t> visited_;
};

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using MutMap = Eigen::Map<RowMatrix<T>>;

template <class T>
ConstMap<T> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMap<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
MutMap<T> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MutMap<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class T>
Graph<T>& same_graph(const Var<T>& a, const Var<T>& b) {
  if (&a.graph() != &b.graph()) throw StateError("ops across different graphs");
  return a.graph();
}

template <class T>
void require_2d(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

template <class T>
void add_into(Tensor<T>* dst, const Tensor<T>& src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.numel(); ++i) (*dst)[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape ops

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>& g = detail::same_graph(a, b);
  const Tensor<T>& x = a.value();
  const Tensor<T>& y = b.value();
  if (x.shape() != y.shape()) throw ShapeError("add: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + y[i];
  return g.record("add", std::move(out), {a, b}, [](BackwardContext<T>& c) {
    detail::add_into(c.grad_in[0], c.grad_out);
    detail::add_into(c.grad_in[1], c.grad_out);
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  Graph<T>& g = detail::same_graph(a, b);
  const Tensor<T>& x = a.value();
  const Tensor<T>& y = b.value();
  if (x.shape() != y.shape()) throw ShapeError("mul: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * y[i];
  return g.record("mul", std::move(out), {a, b}, [](BackwardContext<T>& c) {
    const Tensor<T>& x = *c.in[0];
    const Tensor<T>& y = *c.in[1];
    if (c.grad_in[0])
      for (std::size_t i = 0; i < x.numel(); ++i) (*c.grad_in[0])[i] += c.grad_out[i] * y[i];
    if (c.grad_in[1])
      for (std::size_t i = 0; i < x.numel(); ++i) (*c.grad_in[1])[i] += c.grad_out[i] * x[i];
  });
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
  const Tensor<T>& x = a.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * factor;
  return a.graph().record("scale", std::move(out), {a}, [factor](BackwardContext<T>& c) {
    for (std::size_t i = 0; i < c.grad_out.numel(); ++i) (*c.grad_in[0])[i] += c.grad_out[i] * factor;
  });
}

// x [M, N] + bias [N] broadcast over rows.
template <class T>
Var<T> add_row(Var<T> a, Var<T> bias) {
  Graph<T>& g = detail::same_graph(a, bias);
  const Tensor<T>& x = a.value();
  const Tensor<T>& b = bias.value();
  detail::require_2d(x, "add_row");
  if (b.numel() != x.cols()) throw ShapeError("add_row: bias length " + std::to_string(b.numel()) + " vs " + std::to_string(x.cols()));
  Tensor<T> out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < n; ++j) out.at(r, j) = x.at(r, j) + b[j];
  return g.record("add_row", std::move(out), {a, bias}, [](BackwardContext<T>& c) {
    detail::add_into(c.grad_in[0], c.grad_out);
    if (Tensor<T>* gb = c.grad_in[1]) {
      const std::size_t n = c.grad_out.cols();
      for (std::size_t r = 0; r < c.grad_out.rows(); ++r)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += c.grad_out.at(r, j);
    }
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  const Tensor<T>& x = a.value();
  double acc = 0.0;
  for (T v : x.values()) acc += v;
  return a.graph().record("sum", Tensor<T>::scalar(static_cast<T>(acc)), {a}, [](BackwardContext<T>& c) {
    const T g = c.grad_out[0];
    for (T& v : c.grad_in[0]->values()) v += g;
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().numel();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), static_cast<T>(1.0 / static_cast<double>(n)));
}

// Exact GELU, x * Phi(x).
template <class T>
Var<T> gelu(Var<T> a) {
  const Tensor<T>& x = a.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = x[i];
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * 0.7071067811865476)));
  }
  return a.graph().record("gelu", std::move(out), {a}, [](BackwardContext<T>& c) {
    const Tensor<T>& x = *c.in[0];
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double v = x[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865476));
      const double pdf = std::exp(-0.5 * v * v) * 0.3989422804014327;
      (*c.grad_in[0])[i] += static_cast<T>(c.grad_out[i] * (cdf + v * pdf));
    }
  });
}

// Elementwise multiply by a precomputed mask (values 0 or 1/(1-p)).
template <class T>
Var<T> dropout(Var<T> a, const Tensor<T>& mask) {
  const Tensor<T>& x = a.value();
  if (mask.shape() != x.shape()) throw ShapeError("dropout: mask shape " + shape_str(mask.shape()) + " vs " + shape_str(x.shape()));
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * mask[i];
  return a.graph().record("dropout", std::move(out), {a}, [mask](BackwardContext<T>& c) {
    for (std::size_t i = 0; i < mask.numel(); ++i) (*c.grad_in[0])[i] += c.grad_out[i] * mask[i];
  });
}

// Inverted-dropout mask: each element kept with probability 1 - p and scaled by 1/(1 - p).
template <class T>
Tensor<T> sample_dropout_mask(const Shape& shape, double p, Rng& rng) {
  Tensor<T> mask(shape);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (T& m : mask.values()) m = uniform01(rng) < p ? T(0) : keep_scale;
  return mask;
}

// ---------------------------------------------------------------------------
// Linear algebra

// a [M, K] x b [K, N]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Graph<T>& g = detail::same_graph(a, b);
  const Tensor<T>& x = a.value();
  const Tensor<T>& y = b.value();
  detail::require_2d(x, "matmul");
  detail::require_2d(y, "matmul");
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  if (y.dim(0) != k) throw ShapeError("matmul: " + shape_str(x.shape()) + " x " + shape_str(y.shape()));
  Tensor<T> out({m, n});
  detail::as_matrix(out, m, n).noalias() = detail::as_matrix(x, m, k) * detail::as_matrix(y, k, n);
  return g.record("matmul", std::move(out), {a, b}, [m, k, n](BackwardContext<T>& c) {
    auto dc = detail::as_matrix(c.grad_out, m, n);
    if (c.grad_in[0]) detail::as_matrix(*c.grad_in[0], m, k).noalias() += dc * detail::as_matrix(*c.in[1], k, n).transpose();
    if (c.grad_in[1]) detail::as_matrix(*c.grad_in[1], k, n).noalias() += detail::as_matrix(*c.in[0], m, k).transpose() * dc;
  });
}

// x [M, in] * w [in, out] + b [out]
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add_row(matmul(x, w), b);
}

// Per-row layer normalization with learned gain and bias.
template <class T>
Var<T> layer_norm(Var<T> a, Var<T> gain, Var<T> bias, double eps = 1e-12) {
  Graph<T>& g = detail::same_graph(a, gain);
  const Tensor<T>& x = a.value();
  detail::require_2d(x, "layer_norm");
  const std::size_t rows = x.rows(), n = x.cols();
  if (gain.value().numel() != n || bias.value().numel() != n) throw ShapeError("layer_norm: gain/bias length mismatch");
  const Tensor<T>& gv = gain.value();
  const Tensor<T>& bv = bias.value();
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.row(r);
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<T>(is);
    for (std::size_t j = 0; j < n; ++j) {
      const T h = static_cast<T>((xr[j] - mu) * is);
      xhat.at(r, j) = h;
      out.at(r, j) = h * gv[j] + bv[j];
    }
  }
  return g.record("layer_norm", std::move(out), {a, gain, bias},
                  [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, n](BackwardContext<T>& c) {
                    const Tensor<T>& gv = *c.in[1];
                    for (std::size_t r = 0; r < rows; ++r) {
                      const T* dy = c.grad_out.row(r);
                      const T* h = xhat.row(r);
                      if (c.grad_in[1])
                        for (std::size_t j = 0; j < n; ++j) (*c.grad_in[1])[j] += dy[j] * h[j];
                      if (c.grad_in[2])
                        for (std::size_t j = 0; j < n; ++j) (*c.grad_in[2])[j] += dy[j];
                      if (!c.grad_in[0]) continue;
                      double mean_dh = 0.0, mean_dh_h = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        const double dh = static_cast<double>(dy[j]) * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                      }
                      mean_dh /= static_cast<double>(n);
                      mean_dh_h /= static_cast<double>(n);
                      T* dx = c.grad_in[0]->row(r);
                      for (std::size_t j = 0; j < n; ++j) {
                        const double dh = static_cast<double>(dy[j]) * gv[j];
                        dx[j] += static_cast<T>(inv_std[r] * (dh - mean_dh - h[j] * mean_dh_h));
                      }
                    }
                  });
}

// ---------------------------------------------------------------------------
// Row selection

// Rows of table [V, d] selected by ids, gradient scatter-added back.
template <class T>
Var<T> embedding(Var<T> table, std::vector<int> ids) {
  const Tensor<T>& t = table.value();
  detail::require_2d(t, "embedding");
  const std::size_t vocab = t.dim(0), d = t.dim(1);
  Tensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab) + " rows");
    std::copy_n(t.row(static_cast<std::size_t>(ids[i])), d, out.row(i));
  }
  return table.graph().record("embedding", std::move(out), {table}, [ids = std::move(ids), d](BackwardContext<T>& c) {
    Tensor<T>& gt = *c.grad_in[0];
    for (std::size_t i = 0; i < ids.size(); ++i) {
      T* dst = gt.row(static_cast<std::size_t>(ids[i]));
      const T* src = c.grad_out.row(i);
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

template <class T>
Var<T> gather_rows(Var<T> a, std::vector<std::size_t> idx) {
  const Tensor<T>& x = a.value();
  detail::require_2d(x, "gather_rows");
  const std::size_t n = x.cols();
  Tensor<T> out({idx.size(), n});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.rows()) throw IndexError("gather_rows: row " + std::to_string(idx[i]) + " out of range");
    std::copy_n(x.row(idx[i]), n, out.row(i));
  }
  return a.graph().record("gather_rows", std::move(out), {a}, [idx = std::move(idx), n](BackwardContext<T>& c) {
    for (std::size_t i = 0; i < idx.size(); ++i) {
      T* dst = c.grad_in[0]->row(idx[i]);
      const T* src = c.grad_out.row(i);
      for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
    }
  });
}

// Copy of base with rows idx[i] replaced by src row i. idx must be distinct.
template <class T>
Var<T> replace_rows(Var<T> base, Var<T> src, std::vector<std::size_t> idx) {
  Graph<T>& g = detail::same_graph(base, src);
  const Tensor<T>& b = base.value();
  const Tensor<T>& s = src.value();
  detail::require_2d(b, "replace_rows");
  detail::require_2d(s, "replace_rows");
  if (s.cols() != b.cols()) throw ShapeError("replace_rows: width " + std::to_string(s.cols()) + " vs " + std::to_string(b.cols()));
  if (s.rows() != idx.size()) throw ShapeError("replace_rows: source rows do not match index count");
  const std::size_t n = b.cols();
  Tensor<T> out = b;
  std::vector<char> replaced(b.rows(), 0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= b.rows()) throw IndexError("replace_rows: row " + std::to_string(idx[i]) + " out of range");
    if (replaced[idx[i]]) throw IndexError("replace_rows: duplicate row index");
    replaced[idx[i]] = 1;
    std::copy_n(s.row(i), n, out.row(idx[i]));
  }
  return g.record("replace_rows", std::move(out), {base, src},
                  [idx = std::move(idx), replaced = std::move(replaced), n](BackwardContext<T>& c) {
                    if (Tensor<T>* gb = c.grad_in[0]) {
                      for (std::size_t r = 0; r < replaced.size(); ++r) {
                        if (replaced[r]) continue;
                        for (std::size_t j = 0; j < n; ++j) gb->at(r, j) += c.grad_out.at(r, j);
                      }
                    }
                    if (Tensor<T>* gs = c.grad_in[1]) {
                      for (std::size_t i = 0; i < idx.size(); ++i)
                        for (std::size_t j = 0; j < n; ++j) gs->at(i, j) += c.grad_out.at(idx[i], j);
                    }
                  });
}

// ---------------------------------------------------------------------------
// Softmax family

template <class T>
Var<T> softmax_rows(Var<T> a) {
  const Tensor<T>& x = a.value();
  detail::require_2d(x, "softmax_rows");
  const std::size_t n = x.cols();
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* xr = x.row(r);
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
    for (std::size_t j = 0; j < n; ++j) out.at(r, j) = static_cast<T>(std::exp(xr[j] - mx) / z);
  }
  return a.graph().record("softmax_rows", std::move(out), {a}, [n](BackwardContext<T>& c) {
    for (std::size_t r = 0; r < c.out.rows(); ++r) {
      const T* y = c.out.row(r);
      const T* dy = c.grad_out.row(r);
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(dy[j]) * y[j];
      T* dx = c.grad_in[0]->row(r);
      for (std::size_t j = 0; j < n; ++j) dx[j] += static_cast<T>(y[j] * (dy[j] - dot));
    }
  });
}

namespace detail {

template <class T>
Var<T> cross_entropy_impl(Var<T> logits, std::vector<int> targets, std::size_t min_classes);

}  // namespace detail

// Mean over rows of -log softmax(logits[r])[targets[r]], max-subtracted.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::vector<int> targets) {
  return detail::cross_entropy_impl(logits, std::move(targets), 2);
}

template <class T>
Var<T> detail::cross_entropy_impl(Var<T> logits, std::vector<int> targets, std::size_t min_classes) {
  const Tensor<T>& x = logits.value();
  detail::require_2d(x, "cross_entropy");
  const std::size_t rows = x.rows(), vocab = x.cols();
  if (targets.size() != rows) throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  if (rows == 0) throw ShapeError("cross_entropy: no rows");
  if (vocab < min_classes) throw ShapeError("cross_entropy: need at least " + std::to_string(min_classes) + " classes");
  Tensor<T> probs(x.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab)
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " + std::to_string(vocab) + ")");
    const T* xr = x.row(r);
    const double mx = *std::max_element(xr, xr + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(xr[j] - mx);
    const double log_z = std::log(z) + mx;
    total += log_z - xr[targets[r]];
    for (std::size_t j = 0; j < vocab; ++j) probs.at(r, j) = static_cast<T>(std::exp(xr[j] - log_z));
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return logits.graph().record(
      "cross_entropy", Tensor<T>::scalar(static_cast<T>(total * inv_rows)), {logits},
      [probs = std::move(probs), targets = std::move(targets), inv_rows, vocab](BackwardContext<T>& c) {
        const T g = static_cast<T>(c.grad_out[0] * inv_rows);
        Tensor<T>& dx = *c.grad_in[0];
        for (std::size_t r = 0; r < targets.size(); ++r) {
          for (std::size_t j = 0; j < vocab; ++j) dx.at(r, j) += g * probs.at(r, j);
          dx.at(r, static_cast<std::size_t>(targets[r])) -= g;
        }
      });
}

// Single-vector form: -log softmax(logits)[target].
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, int target) {
  const std::size_t v = logits.value().numel();
  if (v < 2) throw ShapeError("softmax_cross_entropy: need at least 2 logits");
  if (target < 0 || static_cast<std::size_t>(target) >= v)
    throw IndexError("softmax_cross_entropy: target " + std::to_string(target) + " outside [0, " + std::to_string(v) + ")");
  Graph<T>& g = logits.graph();
  Var<T> row = g.record("reshape", logits.value().reshaped({1, v}), {logits}, [](BackwardContext<T>& c) {
    detail::add_into(c.grad_in[0], c.grad_out);
  });
  return cross_entropy(row, {target});
}

// ---------------------------------------------------------------------------
// Cosine similarity

// a^T b / (|a| |b|) for two vectors of equal length.
template <class T>
Var<T> cosine_similarity(Var<T> a, Var<T> b) {
  Graph<T>& g = detail::same_graph(a, b);
  const Tensor<T>& x = a.value();
  const Tensor<T>& y = b.value();
  if (x.numel() != y.numel() || x.numel() == 0) throw ShapeError("cosine_similarity: length mismatch or empty input");
  double dot = 0.0, xx = 0.0, yy = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    dot += static_cast<double>(x[i]) * y[i];
    xx += static_cast<double>(x[i]) * x[i];
    yy += static_cast<double>(y[i]) * y[i];
  }
  if (xx == 0.0 || yy == 0.0) throw DegenerateInputError("cosine_similarity: zero-norm input");
  const double cos = std::clamp(dot / std::sqrt(xx * yy), -1.0, 1.0);
  return g.record("cosine_similarity", Tensor<T>::scalar(static_cast<T>(cos)), {a, b}, [dot, xx, yy](BackwardContext<T>& c) {
    const Tensor<T>& x = *c.in[0];
    const Tensor<T>& y = *c.in[1];
    const double gout = c.grad_out[0];
    const double inv = 1.0 / std::sqrt(xx * yy);
    const double cos = dot * inv;
    if (c.grad_in[0])
      for (std::size_t i = 0; i < x.numel(); ++i) (*c.grad_in[0])[i] += static_cast<T>(gout * (y[i] * inv - cos * x[i] / xx));
    if (c.grad_in[1])
      for (std::size_t i = 0; i < y.numel(); ++i) (*c.grad_in[1])[i] += static_cast<T>(gout * (x[i] * inv - cos * y[i] / yy));
  });
}

// S[i, j] = cos(a_i, b_j) for a [N, D], b [M, D].
template <class T>
Var<T> cosine_matrix(Var<T> a, Var<T> b) {
  Graph<T>& g = detail::same_graph(a, b);
  const Tensor<T>& x = a.value();
  const Tensor<T>& y = b.value();
  detail::require_2d(x, "cosine_matrix");
  detail::require_2d(y, "cosine_matrix");
  if (x.cols() != y.cols()) throw ShapeError("cosine_matrix: width " + std::to_string(x.cols()) + " vs " + std::to_string(y.cols()));
  const std::size_t n = x.rows(), m = y.rows(), d = x.cols();
  auto normalize = [d](const Tensor<T>& t, std::vector<double>& unit, std::vector<double>& norm) {
    const std::size_t rows = t.rows();
    unit.assign(rows * d, 0.0);
    norm.assign(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      double ss = 0.0;
      for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(t.at(r, j)) * t.at(r, j);
      if (ss == 0.0) throw DegenerateInputError("cosine_matrix: zero-norm row " + std::to_string(r));
      norm[r] = std::sqrt(ss);
      for (std::size_t j = 0; j < d; ++j) unit[r * d + j] = t.at(r, j) / norm[r];
    }
  };
  std::vector<double> ua, na, ub, nb;
  normalize(x, ua, na);
  normalize(y, ub, nb);
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += ua[i * d + k] * ub[j * d + k];
      out.at(i, j) = static_cast<T>(std::clamp(s, -1.0, 1.0));
    }
  return g.record("cosine_matrix", std::move(out), {a, b},
                  [ua = std::move(ua), na = std::move(na), ub = std::move(ub), nb = std::move(nb), n, m, d](BackwardContext<T>& c) {
                    // d cos / d a_i = (d_unit_i - (d_unit_i . u_i) u_i) / |a_i|
                    auto project = [d](const std::vector<double>& unit, const std::vector<double>& norm, std::vector<double>& du, Tensor<T>& dst) {
                      for (std::size_t r = 0; r < norm.size(); ++r) {
                        double along = 0.0;
                        for (std::size_t k = 0; k < d; ++k) along += du[r * d + k] * unit[r * d + k];
                        for (std::size_t k = 0; k < d; ++k) dst.at(r, k) += static_cast<T>((du[r * d + k] - along * unit[r * d + k]) / norm[r]);
                      }
                    };
                    if (c.grad_in[0]) {
                      std::vector<double> du(n * d, 0.0);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < m; ++j) {
                          const double gij = c.grad_out.at(i, j);
                          for (std::size_t k = 0; k < d; ++k) du[i * d + k] += gij * ub[j * d + k];
                        }
                      project(ua, na, du, *c.grad_in[0]);
                    }
                    if (c.grad_in[1]) {
                      std::vector<double> du(m * d, 0.0);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < m; ++j) {
                          const double gij = c.grad_out.at(i, j);
                          for (std::size_t k = 0; k < d; ++k) du[j * d + k] += gij * ua[i * d + k];
                        }
                      project(ub, nb, du, *c.grad_in[1]);
                    }
                  });
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention over a batch of fixed-length
// sequences. q, k, v are [n_seq * seq_len, d_model]; key_valid marks non-PAD
// positions (PAD keys get exactly zero probability). prob_mask, when
// non-empty, is a dropout mask over the [n_seq, n_heads, seq_len, seq_len]
// probability tensor.
struct AttentionShape {
  std::size_t n_seq = 0;
  std::size_t seq_len = 0;
  std::size_t n_heads = 1;
};

template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, AttentionShape dims, std::vector<char> key_valid,
                 Tensor<T> prob_mask = {}, Tensor<T>* probs_out = nullptr) {
  Graph<T>& g = detail::same_graph(q, k);
  const Tensor<T>& qv = q.value();
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();
  detail::require_2d(qv, "attention");
  const std::size_t p = dims.seq_len, heads = dims.n_heads, d = qv.cols();
  const std::size_t tokens = dims.n_seq * p;
  if (qv.rows() != tokens || kv.shape() != qv.shape() || vv.shape() != qv.shape())
    throw ShapeError("attention: q/k/v must all be [" + std::to_string(tokens) + ", d]");
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: d_model not divisible by n_heads");
  if (key_valid.size() != tokens) throw ShapeError("attention: key mask length mismatch");
  const Shape prob_shape{dims.n_seq, heads, p, p};
  if (!prob_mask.empty() && prob_mask.shape() != prob_shape) throw ShapeError("attention: probability mask shape mismatch");
  const std::size_t dk = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  Tensor<T> probs(prob_shape);
  Tensor<T> out({tokens, d});
  std::vector<double> scores(p);
  for (std::size_t s = 0; s < dims.n_seq; ++s) {
    const std::size_t base = s * p;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dk;
      T* ph = probs.data() + ((s * heads + h) * p) * p;
      for (std::size_t i = 0; i < p; ++i) {
        const T* qi = qv.row(base + i) + off;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < p; ++j) {
          if (!key_valid[base + j]) continue;
          const T* kj = kv.row(base + j) + off;
          double dot = 0.0;
          for (std::size_t t = 0; t < dk; ++t) dot += static_cast<double>(qi[t]) * kj[t];
          scores[j] = dot * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        if (!std::isfinite(mx)) throw ContractError("attention: sequence with no valid key positions");
        double z = 0.0;
        for (std::size_t j = 0; j < p; ++j)
          if (key_valid[base + j]) z += std::exp(scores[j] - mx);
        T* row = ph + i * p;
        for (std::size_t j = 0; j < p; ++j) row[j] = key_valid[base + j] ? static_cast<T>(std::exp(scores[j] - mx) / z) : T(0);
        T* oi = out.row(base + i) + off;
        const T* mrow = prob_mask.empty() ? nullptr : prob_mask.data() + ((s * heads + h) * p + i) * p;
        for (std::size_t j = 0; j < p; ++j) {
          const T w = mrow ? row[j] * mrow[j] : row[j];
          if (w == T(0)) continue;
          const T* vj = vv.row(base + j) + off;
          for (std::size_t t = 0; t < dk; ++t) oi[t] += w * vj[t];
        }
      }
    }
  }
  if (probs_out) *probs_out = probs;
  return g.record(
      "attention", std::move(out), {q, k, v},
      [probs = std::move(probs), prob_mask = std::move(prob_mask), dims, dk, inv_sqrt](BackwardContext<T>& c) {
        const std::size_t p = dims.seq_len, heads = dims.n_heads;
        const Tensor<T>& qv = *c.in[0];
        const Tensor<T>& kv = *c.in[1];
        const Tensor<T>& vv = *c.in[2];
        std::vector<double> dprob(p);
        for (std::size_t s = 0; s < dims.n_seq; ++s) {
          const std::size_t base = s * p;
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dk;
            const T* ph = probs.data() + ((s * heads + h) * p) * p;
            for (std::size_t i = 0; i < p; ++i) {
              const T* row = ph + i * p;
              const T* mrow = prob_mask.empty() ? nullptr : prob_mask.data() + ((s * heads + h) * p + i) * p;
              const T* go = c.grad_out.row(base + i) + off;
              // dL/dP_ij through the (possibly masked) weights, and dL/dV.
              double along = 0.0;
              for (std::size_t j = 0; j < p; ++j) {
                const T m = mrow ? mrow[j] : T(1);
                const T* vj = vv.row(base + j) + off;
                double dw = 0.0;
                for (std::size_t t = 0; t < dk; ++t) dw += static_cast<double>(go[t]) * vj[t];
                dprob[j] = dw * m;
                along += dprob[j] * row[j];
                if (c.grad_in[2]) {
                  const T w = row[j] * m;
                  if (w != T(0)) {
                    T* dv = c.grad_in[2]->row(base + j) + off;
                    for (std::size_t t = 0; t < dk; ++t) dv[t] += w * go[t];
                  }
                }
              }
              if (!c.grad_in[0] && !c.grad_in[1]) continue;
              const T* qi = qv.row(base + i) + off;
              for (std::size_t j = 0; j < p; ++j) {
                if (row[j] == T(0)) continue;
                const T ds = static_cast<T>(row[j] * (dprob[j] - along) * inv_sqrt);
                const T* kj = kv.row(base + j) + off;
                if (c.grad_in[0]) {
                  T* dq = c.grad_in[0]->row(base + i) + off;
                  for (std::size_t t = 0; t < dk; ++t) dq[t] += ds * kj[t];
                }
                if (c.grad_in[1]) {
                  T* dkj = c.grad_in[1]->row(base + j) + off;
                  for (std::size_t t = 0; t < dk; ++t) dkj[t] += ds * qi[t];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

// Relative errors use max(|analytic|, |numeric|, floor) as denominator.
inline constexpr double kGradcheckFloor = 1e-6;

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// Checks d f / d params against central differences. f builds the loss on a
// fresh graph from the current parameter values and must be deterministic;
// nondeterminism is detected by evaluating the base point twice.
template <class T, class F>
GradcheckResult gradcheck(F&& f, std::vector<Parameter<T>*> params, double eps = 1e-3) {
  auto evaluate = [&]() -> double {
    Graph<T> g;
    Var<T> loss = f(g);
    return static_cast<double>(loss.value().item());
  };

  for (Parameter<T>* p : params) p->zero_grad();
  double base_value = 0.0;
  {
    Graph<T> g;
    Var<T> loss = f(g);
    base_value = loss.value().item();
    g.backward(loss);
  }
  if (evaluate() != base_value) throw StateError("gradcheck: function is not deterministic at the base point");

  GradcheckResult result;
  for (Parameter<T>* p : params) {
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const T saved = p->value[i];
      p->value[i] = static_cast<T>(saved + eps);
      const double up = evaluate();
      p->value[i] = static_cast<T>(saved - eps);
      const double down = evaluate();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradcheckFloor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.coordinates;
      if (result.worst_parameter.empty() || rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_parameter = p->name;
        result.worst_index = i;
        result.analytic_at_worst = analytic;
        result.numeric_at_worst = numeric;
      }
    }
  }
  return result;
}

// Point form: f receives one Var per tensor in `point`.
template <class T, class F>
GradcheckResult gradcheck_at(F&& f, const std::vector<Tensor<T>>& point, double eps = 1e-3) {
  std::vector<Parameter<T>> params;
  params.reserve(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) params.emplace_back("x" + std::to_string(i), point[i]);
  std::vector<Parameter<T>*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  return gradcheck<T>(
      [&](Graph<T>& g) {
        std::vector<Var<T>> vars;
        for (auto& p : params) vars.push_back(g.param(p));
        return f(g, vars);
      },
      ptrs, eps);
}

}  // namespace cmlmcse
