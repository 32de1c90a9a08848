// Dense n-dimensional tensors with a dynamic reverse-mode tape.
//
// A Tensor is a cheap shared handle. Every differentiable operation that
// consumes at least one tensor with requires_grad() records a Node on its
// output; backward() walks the recorded nodes in reverse creation order.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace rawser {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor;
struct TensorImpl;

namespace detail {

using BackwardFn = std::function<void(std::span<const double> grad_out)>;

struct Node {
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::uint64_t*& kink_trace_slot() {
  thread_local std::uint64_t* slot = nullptr;
  return slot;
}

/// Folds a branch decision (ReLU sign, max winner) into the active trace.
inline void trace_branch(std::uint64_t v) {
  if (std::uint64_t* h = kink_trace_slot()) {
    *h ^= v + 0x9E3779B97F4A7C15ull;
    *h *= 1099511628211ull;
  }
}

inline bool tracing_branches() { return kink_trace_slot() != nullptr; }

}  // namespace detail

/// Records a signature of every piecewise-linear branch taken on this thread
/// while alive. Two forward passes with equal signatures lie on the same
/// linear piece, so a finite difference between them crosses no kink.
class KinkTrace {
 public:
  KinkTrace() : previous_(detail::kink_trace_slot()) { detail::kink_trace_slot() = &hash_; }
  ~KinkTrace() { detail::kink_trace_slot() = previous_; }
  KinkTrace(const KinkTrace&) = delete;
  KinkTrace& operator=(const KinkTrace&) = delete;
  std::uint64_t signature() const { return hash_; }

 private:
  std::uint64_t hash_ = 14695981039346656037ull;
  std::uint64_t* previous_;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<detail::Node> node;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

/// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(shape_numel(shape), 0.0);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
  std::span<double> grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  std::span<const double> grad() const {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool is_leaf() const { return !impl_->node; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  /// Copy of the values with no graph attached.
  Tensor detach() const { return from(shape(), values(), false); }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

/// Wraps freshly computed values into a tensor, recording a node when any
/// input participates in differentiation.
inline Tensor record(const char* op, Shape shape, std::vector<double> values,
                     const std::vector<Tensor>& inputs, BackwardFn backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  check_finite(out, op);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->seq = next_seq();
  for (const auto& in : inputs) node->inputs.push_back(in.impl());
  node->backward = std::move(backward);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

inline Tensor record(const char* op, Shape shape, std::vector<double> values,
                     std::initializer_list<Tensor> inputs, BackwardFn backward) {
  return record(op, std::move(shape), std::move(values), std::vector<Tensor>(inputs), std::move(backward));
}

/// Gradient sink for an input: null when the input does not need a gradient.
inline double* grad_sink(const std::shared_ptr<TensorImpl>& impl) {
  if (!impl->requires_grad) return nullptr;
  impl->ensure_grad();
  return impl->grad.data();
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar loss.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw Error("backward: loss has no recorded graph (run a forward pass with differentiable inputs)");
  }
  if (loss.is_leaf()) {
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0;
    return;
  }
  std::vector<std::shared_ptr<TensorImpl>> order, leaves;
  std::unordered_set<const TensorImpl*> seen;
  std::vector<std::shared_ptr<TensorImpl>> stack{loss.impl()};
  while (!stack.empty()) {
    auto cur = std::move(stack.back());
    stack.pop_back();
    if (!seen.insert(cur.get()).second) continue;
    if (!cur->node) {
      leaves.push_back(cur);
      continue;
    }
    order.push_back(cur);
    for (const auto& in : cur->node->inputs) {
      if (in->requires_grad) stack.push_back(in);
    }
  }
  // Interior grads start fresh each pass; leaves accumulate.
  for (auto& impl : order) impl->grad.assign(impl->data.size(), 0.0);
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a->node->seq > b->node->seq; });
  loss.impl()->grad.assign(1, 1.0);
  for (auto& impl : order) impl->node->backward(impl->grad);
  for (const auto& leaf : leaves) {
    for (double g : leaf->grad) {
      if (!std::isfinite(g)) throw NumericError("backward produced a non-finite gradient");
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra primitives
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace detail {

/// For every flat index of `out`, the flat index into a tensor of shape `in`
/// broadcast against `out`.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  const std::size_t off = r - in.size();
  const auto in_strides = strides_of(in);
  std::vector<std::size_t> st(r, 0);
  for (std::size_t i = 0; i < in.size(); ++i) {
    st[i + off] = in[i] == 1 ? 0 : in_strides[i];
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t pos = 0;
  for (std::size_t k = 0; k < n; ++k) {
    idx[k] = pos;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      pos += st[d];
      if (counter[d] < out[d]) break;
      pos -= st[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_broadcast(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  if (a.shape() == b.shape()) {
    const std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a[i], b[i]);
    auto ia = a.impl(), ib = b.impl();
    return record(op, a.shape(), std::move(out), {a, b}, [ia, ib, da, db, n](std::span<const double> g) {
      if (double* ga = grad_sink(ia)) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * da(ia->data[i], ib->data[i]);
      }
      if (double* gb = grad_sink(ib)) {
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * db(ia->data[i], ib->data[i]);
      }
    });
  }
  Shape shape = broadcast_shape(a.shape(), b.shape());
  auto ixa = std::make_shared<std::vector<std::size_t>>(broadcast_index(a.shape(), shape));
  auto ixb = std::make_shared<std::vector<std::size_t>>(broadcast_index(b.shape(), shape));
  const std::size_t n = shape_numel(shape);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a[(*ixa)[i]], b[(*ixb)[i]]);
  auto ia = a.impl(), ib = b.impl();
  return record(op, shape, std::move(out), {a, b}, [ia, ib, ixa, ixb, da, db, n](std::span<const double> g) {
    double* ga = grad_sink(ia);
    double* gb = grad_sink(ib);
    for (std::size_t i = 0; i < n; ++i) {
      const double x = ia->data[(*ixa)[i]];
      const double y = ib->data[(*ixb)[i]];
      if (ga) ga[(*ixa)[i]] += g[i] * da(x, y);
      if (gb) gb[(*ixb)[i]] += g[i] * db(x, y);
    }
  });
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a[i]);
  auto ia = a.impl();
  Tensor result = record(op, a.shape(), std::move(out), {a}, nullptr);
  if (result.requires_grad()) {
    // deriv sees (input, output) so sigmoid/tanh reuse their forward value.
    std::weak_ptr<TensorImpl> wout = result.impl();
    result.impl()->node->backward = [ia, wout, deriv, n](std::span<const double> g) {
      auto out_impl = wout.lock();
      double* ga = grad_sink(ia);
      if (!ga) return;
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * deriv(ia->data[i], out_impl->data[i]);
    };
  }
  return result;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(
      "scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor relu(const Tensor& a) {
  if (detail::tracing_branches())
    for (double x : a.data()) detail::trace_branch(x > 0.0);
  return detail::unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (broadcast_shape(a.shape(), shape) != shape) {
    throw ShapeError("broadcast_to: " + shape_str(a.shape()) + " does not broadcast to " + shape_str(shape));
  }
  auto ix = std::make_shared<std::vector<std::size_t>>(detail::broadcast_index(a.shape(), shape));
  const std::size_t n = ix->size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[(*ix)[i]];
  auto ia = a.impl();
  return detail::record("broadcast_to", shape, std::move(out), {a}, [ia, ix, n](std::span<const double> g) {
    if (double* ga = detail::grad_sink(ia)) {
      for (std::size_t i = 0; i < n; ++i) ga[(*ix)[i]] += g[i];
    }
  });
}

/// [m x k] . [k x n] -> [m x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const RowMat>;
  using MMap = Eigen::Map<RowMat>;
  const Eigen::Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MMap(out.data(), m, n).noalias() = CMap(a.data().data(), m, k) * CMap(b.data().data(), k, n);
  auto ia = a.impl(), ib = b.impl();
  return detail::record("matmul", {a.dim(0), b.dim(1)}, std::move(out), {a, b},
                        [ia, ib, m, k, n](std::span<const double> g) {
                          CMap gm(g.data(), m, n);
                          if (double* ga = detail::grad_sink(ia)) {
                            MMap(ga, m, k).noalias() += gm * CMap(ib->data.data(), k, n).transpose();
                          }
                          if (double* gb = detail::grad_sink(ib)) {
                            MMap(gb, k, n).noalias() += CMap(ia->data.data(), m, k).transpose() * gm;
                          }
                        });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto ia = a.impl();
  const std::size_t n = a.size();
  return detail::record("reshape", std::move(shape), a.values(), {a}, [ia, n](std::span<const double> g) {
    if (double* ga = detail::grad_sink(ia)) {
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
  });
}

/// General axis permutation: out.shape[i] = in.shape[axes[i]].
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  if (axes.size() != r) throw ShapeError("permute: axes do not match rank of " + shape_str(a.shape()));
  std::vector<bool> used(r, false);
  for (auto ax : axes) {
    if (ax >= r || used[ax]) throw ShapeError("permute: invalid axes for " + shape_str(a.shape()));
    used[ax] = true;
  }
  Shape shape(r);
  for (std::size_t i = 0; i < r; ++i) shape[i] = a.dim(axes[i]);
  const auto in_strides = detail::strides_of(a.shape());
  std::vector<std::size_t> st(r);
  for (std::size_t i = 0; i < r; ++i) st[i] = in_strides[axes[i]];
  const std::size_t n = a.size();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t pos = 0;
  for (std::size_t k = 0; k < n; ++k) {
    (*src)[k] = pos;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      pos += st[d];
      if (counter[d] < shape[d]) break;
      pos -= st[d] * counter[d];
      counter[d] = 0;
    }
  }
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = a[(*src)[k]];
  auto ia = a.impl();
  return detail::record("permute", std::move(shape), std::move(out), {a}, [ia, src, n](std::span<const double> g) {
    if (double* ga = detail::grad_sink(ia)) {
      for (std::size_t k = 0; k < n; ++k) ga[(*src)[k]] += g[k];
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

namespace detail {

// Views a tensor as [outer x axis_len x inner] around `axis`.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  Shape shape = ref;
  shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == ref[i];
    if (!ok) throw ShapeError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(ref));
    shape[axis] += s[axis];
  }
  const auto outer_split = detail::split_at(shape, axis);
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t block = p.dim(axis) * outer_split.inner;
    for (std::size_t o = 0; o < outer_split.outer; ++o) {
      std::copy_n(p.data().data() + o * block, block,
                  out.data() + o * outer_split.len * outer_split.inner + off * outer_split.inner);
    }
    off += p.dim(axis);
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return detail::record("concat", shape, std::move(out), parts,
                        [impls, offsets, outer_split, axis](std::span<const double> g) {
                          for (std::size_t j = 0; j < impls.size(); ++j) {
                            double* gp = detail::grad_sink(impls[j]);
                            if (!gp) continue;
                            const std::size_t block = impls[j]->shape[axis] * outer_split.inner;
                            for (std::size_t o = 0; o < outer_split.outer; ++o) {
                              const double* src = g.data() + o * outer_split.len * outer_split.inner +
                                                  offsets[j] * outer_split.inner;
                              double* dst = gp + o * block;
                              for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank() || begin >= end || end > a.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for " + shape_str(a.shape()));
  }
  const auto sp = detail::split_at(a.shape(), axis);
  Shape shape = a.shape();
  shape[axis] = end - begin;
  const std::size_t block = (end - begin) * sp.inner;
  std::vector<double> out(sp.outer * block);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(a.data().data() + o * sp.len * sp.inner + begin * sp.inner, block, out.data() + o * block);
  }
  auto ia = a.impl();
  return detail::record("slice", std::move(shape), std::move(out), {a},
                        [ia, sp, begin, block](std::span<const double> g) {
                          double* ga = detail::grad_sink(ia);
                          if (!ga) return;
                          for (std::size_t o = 0; o < sp.outer; ++o) {
                            double* dst = ga + o * sp.len * sp.inner + begin * sp.inner;
                            const double* src = g.data() + o * block;
                            for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                          }
                        });
}

/// Sum of all elements, as a rank-0 tensor.
inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto ia = a.impl();
  return detail::record("sum", {}, {s}, {a}, [ia](std::span<const double> g) {
    if (double* ga = detail::grad_sink(ia)) {
      for (std::size_t i = 0; i < ia->data.size(); ++i) ga[i] += g[0];
    }
  });
}

/// Sum along one axis; the axis is removed from the shape.
inline Tensor sum(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw ShapeError("sum: axis out of range for " + shape_str(a.shape()));
  const auto sp = detail::split_at(a.shape(), axis);
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += a[(o * sp.len + l) * sp.inner + i];
  auto ia = a.impl();
  return detail::record("sum_axis", std::move(shape), std::move(out), {a}, [ia, sp](std::span<const double> g) {
    double* ga = detail::grad_sink(ia);
    if (!ga) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i) ga[(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i];
  });
}

/// Maximum along one axis (axis removed). Ties resolve to the lowest index,
/// which alone receives the gradient.
inline Tensor reduce_max(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw ShapeError("reduce_max: axis out of range for " + shape_str(a.shape()));
  const auto sp = detail::split_at(a.shape(), axis);
  if (sp.len == 0) throw ShapeError("reduce_max: empty axis");
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(sp.outer * sp.inner);
  auto arg = std::make_shared<std::vector<std::size_t>>(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = o * sp.len * sp.inner + i;
      for (std::size_t l = 1; l < sp.len; ++l) {
        const std::size_t idx = (o * sp.len + l) * sp.inner + i;
        if (a[idx] > a[best]) best = idx;
      }
      out[o * sp.inner + i] = a[best];
      (*arg)[o * sp.inner + i] = best;
      detail::trace_branch(best);
    }
  }
  auto ia = a.impl();
  return detail::record("reduce_max", std::move(shape), std::move(out), {a}, [ia, arg](std::span<const double> g) {
    if (double* ga = detail::grad_sink(ia)) {
      for (std::size_t k = 0; k < arg->size(); ++k) ga[(*arg)[k]] += g[k];
    }
  });
}

/// Maximum over all elements.
inline Tensor reduce_max(const Tensor& a) { return reduce_max(reshape(a, {a.size()}), 0); }

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  std::size_t kinks_skipped = 0;  // coordinates whose +-step crossed a ReLU/max kink
};

/// |a - n| / max(|a|, |n|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Compares the tape gradient of scalar `f` at `x` against central differences.
/// `coords` optionally restricts the check to a subset of flat indices.
/// Coordinates whose perturbed evaluations take a different ReLU/max branch
/// than the unperturbed one are counted in kinks_skipped instead of compared,
/// since the function is not differentiable across them.
inline GradCheckResult grad_check_detail(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                         double step, const std::vector<std::size_t>* coords = nullptr) {
  if (!(step > 0.0)) throw Error("grad_check: step must be positive");
  Tensor probe = x.detach();
  probe.set_requires_grad(true);
  std::uint64_t base_signature = 0;
  Tensor out;
  {
    KinkTrace trace;
    out = f(probe);
    base_signature = trace.signature();
  }
  if (out.size() != 1) throw ShapeError("grad_check: function output must be scalar, got " + shape_str(out.shape()));
  probe.zero_grad();
  // An output that does not depend on x has no graph and a zero gradient.
  if (out.requires_grad()) backward(out);
  std::vector<double> analytic(probe.grad().begin(), probe.grad().end());

  GradCheckResult res;
  bool first = true;
  NoGradGuard guard;
  auto eval_at = [&](std::size_t i, double v, bool& same_branch) {
    Tensor p = x.detach();
    p.values()[i] = v;
    KinkTrace trace;
    const double y = f(p).item();
    same_branch = same_branch && trace.signature() == base_signature;
    return y;
  };
  std::vector<std::size_t> all;
  if (!coords) {
    all.resize(x.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coords = &all;
  }
  for (std::size_t i : *coords) {
    const double x0 = x[i];
    bool same = true;
    const double up = eval_at(i, x0 + step, same);
    const double down = eval_at(i, x0 - step, same);
    if (!same) {
      ++res.kinks_skipped;
      continue;
    }
    ++res.checked;
    const double numeric = (up - down) / (2.0 * step);
    const double rel = relative_error(analytic[i], numeric);
    if (first || rel > res.max_rel_error) {
      first = false;
      res.max_rel_error = rel;
      res.worst_index = i;
      res.analytic = analytic[i];
      res.numeric = numeric;
    }
  }
  return res;
}

inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  return grad_check_detail(f, x, step).max_rel_error;
}

}  // namespace rawser
