#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif
#include <Eigen/Core>

namespace aiap {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Additive guard used inside log/div/sqrt so exact-equality losses stay finite.
constexpr double kEpsGuard = 1e-12;

// When enabled, ops reject non-finite inputs instead of propagating them.
inline bool& strict_finite_mode() {
  thread_local bool on = false;
  return on;
}

namespace detail {

template <typename Real>
struct Node {
  Shape shape;
  std::vector<Real> val;
  std::vector<Real> grad;  // sized on first backward touch
  bool requires_grad = false;
  bool leaf = false;

  std::int64_t numel() const { return static_cast<std::int64_t>(val.size()); }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), Real(0));
  }
};

}  // namespace detail

template <typename Real>
class TensorT;

// Ordered record of executed differentiable operations. Construction makes the
// tape active on the current thread; destruction restores the previous one.
// A tape feeds exactly one backward pass, then its record is cleared.
template <typename Real>
class TapeT {
 public:
  TapeT() : prev_(active()) { active() = this; }
  ~TapeT() {
    if (active() == this) active() = prev_;
  }
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  static TapeT*& active() {
    thread_local TapeT* cur = nullptr;
    return cur;
  }

  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  std::size_t size() const { return steps_.size(); }
  bool consumed() const { return consumed_; }

  // Reverse replay. Seeds d(loss)/d(loss) = 1 and visits recorded steps in
  // exact reverse execution order.
  void backward(const TensorT<Real>& loss);

 private:
  std::vector<std::function<void()>> steps_;
  bool consumed_ = false;
  TapeT* prev_ = nullptr;
};

// Dense n-d array participating in reverse-mode differentiation. Value
// semantics over a shared node; copies alias the same storage.
template <typename Real>
class TensorT {
 public:
  using Node = detail::Node<Real>;

  TensorT() = default;

  static TensorT zeros(Shape s) { return filled(std::move(s), Real(0)); }

  static TensorT filled(Shape s, Real v) {
    TensorT t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(s);
    t.node_->val.assign(shape_numel(t.node_->shape), v);
    return t;
  }

  static TensorT from(Shape s, std::vector<Real> data) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(s))
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(s));
    TensorT t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(s);
    t.node_->val = std::move(data);
    return t;
  }

  static TensorT scalar(Real v) { return filled(Shape{}, v); }

  // Leaf tensor: participates as a gradient endpoint.
  static TensorT leaf(Shape s, std::vector<Real> data) {
    TensorT t = from(std::move(s), std::move(data));
    t.node_->requires_grad = true;
    t.node_->leaf = true;
    return t;
  }

  static TensorT leaf_filled(Shape s, Real v) {
    TensorT t = filled(std::move(s), v);
    t.node_->requires_grad = true;
    t.node_->leaf = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_ && node_->leaf; }

  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    node_->leaf = on;
  }

  std::span<const Real> values() const { return node_->val; }
  std::span<Real> mutable_values() { return node_->val; }

  Real value(std::int64_t i = 0) const { return node_->val[static_cast<std::size_t>(i)]; }

  // Scalar read; throws unless the tensor holds exactly one element.
  Real item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->val[0];
  }

  // Gradient read-back after backward; zeros if this node was never reached.
  std::vector<Real> grad_values() const {
    if (node_->grad.size() == node_->val.size()) return node_->grad;
    return std::vector<Real>(node_->val.size(), Real(0));
  }
  Real grad_value(std::int64_t i = 0) const {
    if (node_->grad.size() != node_->val.size()) return Real(0);
    return node_->grad[static_cast<std::size_t>(i)];
  }

  void zero_grad() { node_->grad.assign(node_->val.size(), Real(0)); }

  // Detached copy of the values as a fresh constant tensor.
  TensorT detached() const { return from(shape(), node_->val); }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename Real>
inline void check_finite(const TensorT<Real>& t, const char* op) {
  if (!strict_finite_mode()) return;
  for (Real v : t.values())
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string(op) + ": non-finite input under strict mode");
}

template <typename Real>
inline bool should_record(std::initializer_list<const TensorT<Real>*> ins) {
  if (!TapeT<Real>::active()) return false;
  for (const TensorT<Real>* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

template <typename Real>
inline TensorT<Real> make_output(Shape s, bool requires_grad) {
  TensorT<Real> out = TensorT<Real>::zeros(std::move(s));
  if (requires_grad) out.node()->requires_grad = true;
  return out;
}

// Broadcast plan between two same-rank shapes (or scalars). A dimension may
// differ only when one side has extent 1; that side gets stride 0.
struct Broadcast {
  Shape out;
  std::vector<std::int64_t> sa, sb;  // strides into a and b per out dim
  std::int64_t n = 1;
  bool trivial_same = false;  // equal shapes, flat loop applies
  bool a_scalar = false, b_scalar = false;
};

inline Broadcast broadcast_plan(const Shape& a, const Shape& b) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.n = shape_numel(a);
    p.trivial_same = true;
    return p;
  }
  if (a.empty() || b.empty()) {
    p.a_scalar = a.empty();
    p.b_scalar = b.empty();
    p.out = p.a_scalar ? b : a;
    p.n = shape_numel(p.out);
    return p;
  }
  if (a.size() != b.size())
    throw ShapeError("broadcast rank mismatch between " + shape_str(a) + " and " + shape_str(b));
  const int r = static_cast<int>(a.size());
  p.out.resize(r);
  for (int i = 0; i < r; ++i) {
    if (a[i] == b[i])
      p.out[i] = a[i];
    else if (a[i] == 1 || b[i] == 1)
      p.out[i] = std::max(a[i], b[i]);
    else
      throw ShapeError("shapes not broadcast-compatible: " + shape_str(a) + " vs " + shape_str(b));
  }
  p.sa.resize(r);
  p.sb.resize(r);
  std::int64_t ca = 1, cb = 1;
  for (int i = r - 1; i >= 0; --i) {
    p.sa[i] = (a[i] == 1 && p.out[i] != 1) ? 0 : ca;
    p.sb[i] = (b[i] == 1 && p.out[i] != 1) ? 0 : cb;
    ca *= a[i];
    cb *= b[i];
  }
  p.n = shape_numel(p.out);
  return p;
}

// Calls fn(out_index, a_index, b_index) over the broadcast space.
template <typename Fn>
inline void broadcast_for_each(const Broadcast& p, Fn&& fn) {
  if (p.trivial_same) {
    for (std::int64_t i = 0; i < p.n; ++i) fn(i, i, i);
    return;
  }
  if (p.a_scalar || p.b_scalar) {
    for (std::int64_t i = 0; i < p.n; ++i) fn(i, p.a_scalar ? 0 : i, p.b_scalar ? 0 : i);
    return;
  }
  const int r = static_cast<int>(p.out.size());
  std::array<int, 8> idx{};
  for (std::int64_t i = 0; i < p.n; ++i) {
    std::int64_t ia = 0, ib = 0;
    for (int d = 0; d < r; ++d) {
      ia += idx[d] * p.sa[d];
      ib += idx[d] * p.sb[d];
    }
    fn(i, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      if (++idx[d] < p.out[d]) break;
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

enum class EwKind { Add, Sub, Mul, Div, Pow, Min, Max };
enum class UnKind { Log, Exp, Sqrt, Abs, Relu, Sigmoid, Tanh, Softplus, Neg };

template <typename Real>
TensorT<Real> elementwise(EwKind kind, const TensorT<Real>& a, const TensorT<Real>& b) {
  detail::check_finite(a, "elementwise");
  detail::check_finite(b, "elementwise");
  auto plan = detail::broadcast_plan(a.shape(), b.shape());
  const bool rec = detail::should_record<Real>({&a, &b});
  TensorT<Real> out = detail::make_output<Real>(plan.out, rec);

  const Real* pa = a.values().data();
  const Real* pb = b.values().data();
  Real* po = out.mutable_values().data();
  const Real eps = static_cast<Real>(kEpsGuard);

  switch (kind) {
    case EwKind::Add:
      detail::broadcast_for_each(plan, [&](auto i, auto ia, auto ib) { po[i] = pa[ia] + pb[ib]; });
      break;
    case EwKind::Sub:
      detail::broadcast_for_each(plan, [&](auto i, auto ia, auto ib) { po[i] = pa[ia] - pb[ib]; });
      break;
    case EwKind::Mul:
      detail::broadcast_for_each(plan, [&](auto i, auto ia, auto ib) { po[i] = pa[ia] * pb[ib]; });
      break;
    case EwKind::Div:
      detail::broadcast_for_each(plan,
                                 [&](auto i, auto ia, auto ib) { po[i] = pa[ia] / (pb[ib] + eps); });
      break;
    case EwKind::Pow:
      detail::broadcast_for_each(
          plan, [&](auto i, auto ia, auto ib) { po[i] = std::pow(pa[ia], pb[ib]); });
      break;
    case EwKind::Min:
      detail::broadcast_for_each(
          plan, [&](auto i, auto ia, auto ib) { po[i] = pa[ia] <= pb[ib] ? pa[ia] : pb[ib]; });
      break;
    case EwKind::Max:
      detail::broadcast_for_each(
          plan, [&](auto i, auto ia, auto ib) { po[i] = pa[ia] >= pb[ib] ? pa[ia] : pb[ib]; });
      break;
  }

  if (rec) {
    auto an = a.node(), bn = b.node(), on = out.node();
    TapeT<Real>::active()->record([kind, plan, an, bn, on]() {
      const bool need_a = an->requires_grad, need_b = bn->requires_grad;
      if (need_a) an->ensure_grad();
      if (need_b) bn->ensure_grad();
      const Real* pa = an->val.data();
      const Real* pb = bn->val.data();
      const Real* g = on->grad.data();
      Real* ga = need_a ? an->grad.data() : nullptr;
      Real* gb = need_b ? bn->grad.data() : nullptr;
      const Real eps = static_cast<Real>(kEpsGuard);
      detail::broadcast_for_each(plan, [&](auto i, auto ia, auto ib) {
        const Real go = g[i];
        switch (kind) {
          case EwKind::Add:
            if (ga) ga[ia] += go;
            if (gb) gb[ib] += go;
            break;
          case EwKind::Sub:
            if (ga) ga[ia] += go;
            if (gb) gb[ib] -= go;
            break;
          case EwKind::Mul:
            if (ga) ga[ia] += go * pb[ib];
            if (gb) gb[ib] += go * pa[ia];
            break;
          case EwKind::Div: {
            const Real d = pb[ib] + eps;
            if (ga) ga[ia] += go / d;
            if (gb) gb[ib] -= go * pa[ia] / (d * d);
            break;
          }
          case EwKind::Pow: {
            if (ga) ga[ia] += go * pb[ib] * std::pow(pa[ia], pb[ib] - Real(1));
            if (gb)
              gb[ib] += go * std::pow(pa[ia], pb[ib]) *
                        std::log(std::abs(pa[ia]) + eps);
            break;
          }
          case EwKind::Min:
            if (pa[ia] <= pb[ib]) {
              if (ga) ga[ia] += go;
            } else if (gb) {
              gb[ib] += go;
            }
            break;
          case EwKind::Max:
            if (pa[ia] >= pb[ib]) {
              if (ga) ga[ia] += go;
            } else if (gb) {
              gb[ib] += go;
            }
            break;
        }
      });
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> elementwise(UnKind kind, const TensorT<Real>& a) {
  detail::check_finite(a, "elementwise");
  const bool rec = detail::should_record<Real>({&a});
  TensorT<Real> out = detail::make_output<Real>(a.shape(), rec);
  const Real* pa = a.values().data();
  Real* po = out.mutable_values().data();
  const std::int64_t n = a.numel();
  const Real eps = static_cast<Real>(kEpsGuard);

  for (std::int64_t i = 0; i < n; ++i) {
    const Real x = pa[i];
    switch (kind) {
      case UnKind::Log: po[i] = std::log(x + eps); break;
      case UnKind::Exp: po[i] = std::exp(x); break;
      case UnKind::Sqrt: po[i] = std::sqrt(x + eps); break;
      case UnKind::Abs: po[i] = std::abs(x); break;
      case UnKind::Relu: po[i] = x > Real(0) ? x : Real(0); break;
      case UnKind::Sigmoid: po[i] = Real(1) / (Real(1) + std::exp(-x)); break;
      case UnKind::Tanh: po[i] = std::tanh(x); break;
      case UnKind::Softplus:
        po[i] = x > Real(30) ? x : std::log1p(std::exp(x));
        break;
      case UnKind::Neg: po[i] = -x; break;
    }
  }

  if (rec) {
    auto an = a.node(), on = out.node();
    TapeT<Real>::active()->record([kind, an, on]() {
      an->ensure_grad();
      const Real* pa = an->val.data();
      const Real* pv = on->val.data();
      const Real* g = on->grad.data();
      Real* ga = an->grad.data();
      const std::int64_t n = an->numel();
      const Real eps = static_cast<Real>(kEpsGuard);
      for (std::int64_t i = 0; i < n; ++i) {
        const Real x = pa[i];
        Real d = Real(0);
        switch (kind) {
          case UnKind::Log: d = Real(1) / (x + eps); break;
          case UnKind::Exp: d = pv[i]; break;
          case UnKind::Sqrt: d = Real(0.5) / pv[i]; break;
          case UnKind::Abs: d = x > Real(0) ? Real(1) : (x < Real(0) ? Real(-1) : Real(0)); break;
          case UnKind::Relu: d = x > Real(0) ? Real(1) : Real(0); break;
          case UnKind::Sigmoid: d = pv[i] * (Real(1) - pv[i]); break;
          case UnKind::Tanh: d = Real(1) - pv[i] * pv[i]; break;
          case UnKind::Softplus: d = Real(1) / (Real(1) + std::exp(-x)); break;
          case UnKind::Neg: d = Real(-1); break;
        }
        ga[i] += g[i] * d;
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b) {
  return elementwise(EwKind::Add, a, b);
}
template <typename Real>
TensorT<Real> sub(const TensorT<Real>& a, const TensorT<Real>& b) {
  return elementwise(EwKind::Sub, a, b);
}
template <typename Real>
TensorT<Real> mul(const TensorT<Real>& a, const TensorT<Real>& b) {
  return elementwise(EwKind::Mul, a, b);
}
template <typename Real>
TensorT<Real> div(const TensorT<Real>& a, const TensorT<Real>& b) {
  return elementwise(EwKind::Div, a, b);
}
template <typename Real>
TensorT<Real> pow(const TensorT<Real>& a, const TensorT<Real>& b) {
  return elementwise(EwKind::Pow, a, b);
}
template <typename Real>
TensorT<Real> minimum(const TensorT<Real>& a, const TensorT<Real>& b) {
  return elementwise(EwKind::Min, a, b);
}
template <typename Real>
TensorT<Real> maximum(const TensorT<Real>& a, const TensorT<Real>& b) {
  return elementwise(EwKind::Max, a, b);
}
template <typename Real>
TensorT<Real> log(const TensorT<Real>& a) {
  return elementwise(UnKind::Log, a);
}
template <typename Real>
TensorT<Real> exp(const TensorT<Real>& a) {
  return elementwise(UnKind::Exp, a);
}
template <typename Real>
TensorT<Real> sqrt(const TensorT<Real>& a) {
  return elementwise(UnKind::Sqrt, a);
}
template <typename Real>
TensorT<Real> abs(const TensorT<Real>& a) {
  return elementwise(UnKind::Abs, a);
}
template <typename Real>
TensorT<Real> relu(const TensorT<Real>& a) {
  return elementwise(UnKind::Relu, a);
}
template <typename Real>
TensorT<Real> sigmoid(const TensorT<Real>& a) {
  return elementwise(UnKind::Sigmoid, a);
}
template <typename Real>
TensorT<Real> tanh(const TensorT<Real>& a) {
  return elementwise(UnKind::Tanh, a);
}
template <typename Real>
TensorT<Real> softplus(const TensorT<Real>& a) {
  return elementwise(UnKind::Softplus, a);
}
template <typename Real>
TensorT<Real> neg(const TensorT<Real>& a) {
  return elementwise(UnKind::Neg, a);
}

template <typename Real>
TensorT<Real> operator+(const TensorT<Real>& a, const TensorT<Real>& b) {
  return add(a, b);
}
template <typename Real>
TensorT<Real> operator-(const TensorT<Real>& a, const TensorT<Real>& b) {
  return sub(a, b);
}
template <typename Real>
TensorT<Real> operator*(const TensorT<Real>& a, const TensorT<Real>& b) {
  return mul(a, b);
}
template <typename Real>
TensorT<Real> operator/(const TensorT<Real>& a, const TensorT<Real>& b) {
  return div(a, b);
}
template <typename Real>
TensorT<Real> operator+(const TensorT<Real>& a, Real b) {
  return add(a, TensorT<Real>::scalar(b));
}
template <typename Real>
TensorT<Real> operator-(const TensorT<Real>& a, Real b) {
  return sub(a, TensorT<Real>::scalar(b));
}
template <typename Real>
TensorT<Real> operator-(Real a, const TensorT<Real>& b) {
  return sub(TensorT<Real>::scalar(a), b);
}
template <typename Real>
TensorT<Real> operator*(const TensorT<Real>& a, Real b) {
  return mul(a, TensorT<Real>::scalar(b));
}
template <typename Real>
TensorT<Real> operator*(Real a, const TensorT<Real>& b) {
  return mul(TensorT<Real>::scalar(a), b);
}
template <typename Real>
TensorT<Real> operator/(const TensorT<Real>& a, Real b) {
  return div(a, TensorT<Real>::scalar(b));
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class ReduceKind { Sum, Mean, Max };

namespace detail {

inline Shape reduced_shape(const Shape& in, const std::vector<int>& axes) {
  Shape out;
  for (int d = 0; d < static_cast<int>(in.size()); ++d)
    if (std::find(axes.begin(), axes.end(), d) == axes.end()) out.push_back(in[d]);
  return out;
}

// Maps every input linear index to its output linear index.
inline std::vector<std::int64_t> reduce_index_map(const Shape& in, const std::vector<int>& axes) {
  const int r = static_cast<int>(in.size());
  Shape out = reduced_shape(in, axes);
  std::vector<std::int64_t> out_strides(r, 0);
  std::int64_t acc = 1;
  for (int d = r - 1; d >= 0; --d) {
    if (std::find(axes.begin(), axes.end(), d) == axes.end()) {
      out_strides[d] = acc;
      acc *= in[d];
    }
  }
  const std::int64_t n = shape_numel(in);
  std::vector<std::int64_t> map(static_cast<std::size_t>(n));
  std::array<int, 8> idx{};
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t oi = 0;
    for (int d = 0; d < r; ++d) oi += idx[d] * out_strides[d];
    map[static_cast<std::size_t>(i)] = oi;
    for (int d = r - 1; d >= 0; --d) {
      if (++idx[d] < in[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace detail

// axes empty = reduce over all dimensions.
template <typename Real>
TensorT<Real> reduce(ReduceKind kind, const TensorT<Real>& x, std::vector<int> axes = {}) {
  detail::check_finite(x, "reduce");
  const int r = x.rank();
  if (axes.empty()) {
    axes.resize(r);
    std::iota(axes.begin(), axes.end(), 0);
  }
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (int a : axes)
    if (a < 0 || a >= r) throw ShapeError("reduce axis " + std::to_string(a) + " out of range for " + shape_str(x.shape()));
  if (x.numel() == 0) throw ValueError("reduce over empty tensor");

  Shape out_shape = detail::reduced_shape(x.shape(), axes);
  const std::int64_t out_n = shape_numel(out_shape);
  const std::int64_t in_n = x.numel();
  if (out_n > 0 && in_n / out_n == 0) throw ValueError("empty reduction");
  const Real inv_count = static_cast<Real>(static_cast<double>(out_n) / static_cast<double>(in_n));

  const bool rec = detail::should_record<Real>({&x});
  TensorT<Real> out = detail::make_output<Real>(out_shape, rec);
  auto map = detail::reduce_index_map(x.shape(), axes);

  const Real* px = x.values().data();
  Real* po = out.mutable_values().data();
  std::vector<std::int64_t> argmax;

  switch (kind) {
    case ReduceKind::Sum:
    case ReduceKind::Mean: {
      std::fill(po, po + out_n, Real(0));
      for (std::int64_t i = 0; i < in_n; ++i) po[map[i]] += px[i];
      if (kind == ReduceKind::Mean)
        for (std::int64_t i = 0; i < out_n; ++i) po[i] *= inv_count;
      break;
    }
    case ReduceKind::Max: {
      argmax.assign(static_cast<std::size_t>(out_n), -1);
      for (std::int64_t i = 0; i < in_n; ++i) {
        const std::int64_t o = map[i];
        if (argmax[o] < 0 || px[i] > po[o]) {
          po[o] = px[i];
          argmax[o] = i;
        }
      }
      break;
    }
  }

  if (rec) {
    auto xn = x.node(), on = out.node();
    TapeT<Real>::active()->record([kind, xn, on, map = std::move(map), argmax = std::move(argmax),
                                   inv_count]() {
      xn->ensure_grad();
      Real* gx = xn->grad.data();
      const Real* g = on->grad.data();
      switch (kind) {
        case ReduceKind::Sum:
          for (std::int64_t i = 0; i < xn->numel(); ++i) gx[i] += g[map[i]];
          break;
        case ReduceKind::Mean:
          for (std::int64_t i = 0; i < xn->numel(); ++i) gx[i] += g[map[i]] * inv_count;
          break;
        case ReduceKind::Max:
          for (std::size_t o = 0; o < argmax.size(); ++o)
            if (argmax[o] >= 0) gx[argmax[o]] += g[o];
          break;
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> sum(const TensorT<Real>& x, std::vector<int> axes = {}) {
  return reduce(ReduceKind::Sum, x, std::move(axes));
}
template <typename Real>
TensorT<Real> mean(const TensorT<Real>& x, std::vector<int> axes = {}) {
  return reduce(ReduceKind::Mean, x, std::move(axes));
}
template <typename Real>
TensorT<Real> reduce_max(const TensorT<Real>& x, std::vector<int> axes = {}) {
  return reduce(ReduceKind::Max, x, std::move(axes));
}

// ---------------------------------------------------------------------------
// Structural ops: reshape / slice / concat / stack / at
// ---------------------------------------------------------------------------

template <typename Real>
TensorT<Real> reshape(const TensorT<Real>& x, Shape s) {
  if (shape_numel(s) != x.numel())
    throw ShapeError("reshape from " + shape_str(x.shape()) + " to " + shape_str(s));
  const bool rec = detail::should_record<Real>({&x});
  TensorT<Real> out = detail::make_output<Real>(std::move(s), rec);
  std::copy(x.values().begin(), x.values().end(), out.mutable_values().begin());
  if (rec) {
    auto xn = x.node(), on = out.node();
    TapeT<Real>::active()->record([xn, on]() {
      xn->ensure_grad();
      for (std::int64_t i = 0; i < xn->numel(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

namespace detail {

struct AxisSplit {
  std::int64_t outer, axis, inner;
};

inline AxisSplit axis_split(const Shape& s, int axis) {
  AxisSplit a{1, s[axis], 1};
  for (int d = 0; d < axis; ++d) a.outer *= s[d];
  for (int d = axis + 1; d < static_cast<int>(s.size()); ++d) a.inner *= s[d];
  return a;
}

}  // namespace detail

template <typename Real>
TensorT<Real> slice(const TensorT<Real>& x, int axis, int start, int len) {
  if (axis < 0 || axis >= x.rank() || start < 0 || len <= 0 || start + len > x.shape()[axis])
    throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  const bool rec = detail::should_record<Real>({&x});
  TensorT<Real> out = detail::make_output<Real>(out_shape, rec);
  const auto sp = detail::axis_split(x.shape(), axis);
  const Real* px = x.values().data();
  Real* po = out.mutable_values().data();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    std::memcpy(po + o * len * sp.inner, px + (o * sp.axis + start) * sp.inner,
                static_cast<std::size_t>(len * sp.inner) * sizeof(Real));
  if (rec) {
    auto xn = x.node(), on = out.node();
    TapeT<Real>::active()->record([xn, on, sp, start, len]() {
      xn->ensure_grad();
      Real* gx = xn->grad.data();
      const Real* g = on->grad.data();
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        Real* dst = gx + (o * sp.axis + start) * sp.inner;
        const Real* src = g + o * len * sp.inner;
        for (std::int64_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> concat(const std::vector<TensorT<Real>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int r = parts[0].rank();
  if (axis < 0 || axis >= r) throw ShapeError("concat axis out of range");
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const auto& t : parts) {
    if (t.rank() != r) throw ShapeError("concat rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && t.shape()[d] != out_shape[d])
        throw ShapeError("concat shape mismatch: " + shape_str(t.shape()) + " vs " +
                         shape_str(out_shape));
    total += t.shape()[axis];
  }
  out_shape[axis] = total;

  bool rec = false;
  if (TapeT<Real>::active())
    for (const auto& t : parts)
      if (t.requires_grad()) rec = true;

  TensorT<Real> out = detail::make_output<Real>(out_shape, rec);
  const auto sp = detail::axis_split(out_shape, axis);
  Real* po = out.mutable_values().data();
  std::int64_t off = 0;
  for (const auto& t : parts) {
    const std::int64_t alen = t.shape()[axis];
    const Real* pt = t.values().data();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      std::memcpy(po + (o * sp.axis + off) * sp.inner, pt + o * alen * sp.inner,
                  static_cast<std::size_t>(alen * sp.inner) * sizeof(Real));
    off += alen;
  }

  if (rec) {
    std::vector<std::shared_ptr<detail::Node<Real>>> ins;
    ins.reserve(parts.size());
    for (const auto& t : parts) ins.push_back(t.node());
    auto on = out.node();
    TapeT<Real>::active()->record([ins = std::move(ins), on, sp]() {
      const Real* g = on->grad.data();
      std::int64_t off = 0;
      for (auto& xn : ins) {
        const std::int64_t alen = xn->numel() / (sp.outer * sp.inner);
        if (xn->requires_grad) {
          xn->ensure_grad();
          Real* gx = xn->grad.data();
          for (std::int64_t o = 0; o < sp.outer; ++o) {
            const Real* src = g + (o * sp.axis + off) * sp.inner;
            Real* dst = gx + o * alen * sp.inner;
            for (std::int64_t i = 0; i < alen * sp.inner; ++i) dst[i] += src[i];
          }
        }
        off += alen;
      }
    });
  }
  return out;
}

// Stacks scalar tensors into a vector of shape {n}.
template <typename Real>
TensorT<Real> stack_scalars(const std::vector<TensorT<Real>>& xs) {
  if (xs.empty()) throw ShapeError("stack of zero scalars");
  bool rec = false;
  if (TapeT<Real>::active())
    for (const auto& t : xs)
      if (t.requires_grad()) rec = true;
  TensorT<Real> out = detail::make_output<Real>(Shape{static_cast<int>(xs.size())}, rec);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].numel() != 1) throw ShapeError("stack_scalars expects scalars");
    out.mutable_values()[i] = xs[i].value();
  }
  if (rec) {
    std::vector<std::shared_ptr<detail::Node<Real>>> ins;
    for (const auto& t : xs) ins.push_back(t.node());
    auto on = out.node();
    TapeT<Real>::active()->record([ins = std::move(ins), on]() {
      for (std::size_t i = 0; i < ins.size(); ++i) {
        if (!ins[i]->requires_grad) continue;
        ins[i]->ensure_grad();
        ins[i]->grad[0] += on->grad[i];
      }
    });
  }
  return out;
}

// Gradient-carrying read of a single entry (by flat index).
template <typename Real>
TensorT<Real> at(const TensorT<Real>& x, std::int64_t flat_index) {
  if (flat_index < 0 || flat_index >= x.numel())
    throw ShapeError("index " + std::to_string(flat_index) + " out of range for " +
                     shape_str(x.shape()));
  const bool rec = detail::should_record<Real>({&x});
  TensorT<Real> out = detail::make_output<Real>(Shape{}, rec);
  out.mutable_values()[0] = x.value(flat_index);
  if (rec) {
    auto xn = x.node(), on = out.node();
    TapeT<Real>::active()->record([xn, on, flat_index]() {
      xn->ensure_grad();
      xn->grad[flat_index] += on->grad[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax2d / stop_grad / straight_thru
// ---------------------------------------------------------------------------

template <typename Real>
TensorT<Real> softmax2d(const TensorT<Real>& field) {
  if (field.rank() != 2) throw ShapeError("softmax2d expects rank-2, got " + shape_str(field.shape()));
  for (Real v : field.values())
    if (!std::isfinite(static_cast<double>(v))) throw NumericError("softmax2d: non-finite input");
  const bool rec = detail::should_record<Real>({&field});
  TensorT<Real> out = detail::make_output<Real>(field.shape(), rec);
  const Real* px = field.values().data();
  Real* po = out.mutable_values().data();
  const std::int64_t n = field.numel();
  Real m = px[0];
  for (std::int64_t i = 1; i < n; ++i) m = std::max(m, px[i]);
  Real z = Real(0);
  for (std::int64_t i = 0; i < n; ++i) {
    po[i] = std::exp(px[i] - m);
    z += po[i];
  }
  const Real inv = Real(1) / z;
  for (std::int64_t i = 0; i < n; ++i) po[i] *= inv;

  if (rec) {
    auto xn = field.node(), on = out.node();
    TapeT<Real>::active()->record([xn, on]() {
      xn->ensure_grad();
      const Real* p = on->val.data();
      const Real* g = on->grad.data();
      Real* gx = xn->grad.data();
      const std::int64_t n = xn->numel();
      Real dot = Real(0);
      for (std::int64_t i = 0; i < n; ++i) dot += p[i] * g[i];
      for (std::int64_t i = 0; i < n; ++i) gx[i] += p[i] * (g[i] - dot);
    });
  }
  return out;
}

// Forward copy that contributes no gradient to its input.
template <typename Real>
TensorT<Real> stop_grad(const TensorT<Real>& x) {
  return x.detached();
}

// Forward pass takes y's values; the backward pass differentiates x.
template <typename Real>
TensorT<Real> straight_thru(const TensorT<Real>& x, const TensorT<Real>& y) {
  if (x.shape() != y.shape())
    throw ShapeError("straight_thru shape mismatch: " + shape_str(x.shape()) + " vs " +
                     shape_str(y.shape()));
  return add(sub(x, stop_grad(x)), stop_grad(y));
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

enum class Padding { Same, Valid };

namespace detail {

template <typename Real>
using MatRM = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Real>
void im2col(const Real* x, int ci, int h, int w, int kh, int kw, int stride, int pad, int ho,
            int wo, Real* cols) {
  // cols laid out (ci*kh*kw) x (ho*wo), row-major
  for (int c = 0; c < ci; ++c) {
    const Real* xc = x + static_cast<std::int64_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        Real* row = cols + (static_cast<std::int64_t>(c) * kh * kw + ki * kw + kj) *
                               (static_cast<std::int64_t>(ho) * wo);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          Real* dst = row + static_cast<std::int64_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, Real(0));
            continue;
          }
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            dst[ox] = (ix >= 0 && ix < w) ? xc[static_cast<std::int64_t>(iy) * w + ix] : Real(0);
          }
        }
      }
    }
  }
}

template <typename Real>
void col2im_acc(const Real* cols, int ci, int h, int w, int kh, int kw, int stride, int pad,
                int ho, int wo, Real* gx) {
  for (int c = 0; c < ci; ++c) {
    Real* xc = gx + static_cast<std::int64_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const Real* row = cols + (static_cast<std::int64_t>(c) * kh * kw + ki * kw + kj) *
                                     (static_cast<std::int64_t>(ho) * wo);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) continue;
          const Real* src = row + static_cast<std::int64_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < w) xc[static_cast<std::int64_t>(iy) * w + ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// input (Ci,H,W), kernel (Co,Ci,k,k), optional bias (Co). Odd k only.
template <typename Real>
TensorT<Real> conv2d(const TensorT<Real>& input, const TensorT<Real>& kernel,
                     const TensorT<Real>* bias = nullptr, int stride = 1,
                     Padding padding = Padding::Same) {
  if (input.rank() != 3) throw ShapeError("conv2d input must be (C,H,W), got " + shape_str(input.shape()));
  if (kernel.rank() != 4) throw ShapeError("conv2d kernel must be (Co,Ci,k,k), got " + shape_str(kernel.shape()));
  const int ci = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  const int co = kernel.shape()[0], kci = kernel.shape()[1], kh = kernel.shape()[2],
            kw = kernel.shape()[3];
  if (kci != ci)
    throw ShapeError("conv2d channel mismatch: input " + shape_str(input.shape()) + " kernel " +
                     shape_str(kernel.shape()));
  if (kh != kw || kh % 2 == 0) throw ShapeError("conv2d kernel must be square with odd size");
  if (stride < 1) throw ValueError("conv2d stride must be >= 1");
  if (bias && (bias->rank() != 1 || bias->shape()[0] != co))
    throw ShapeError("conv2d bias must be (Co)");
  const int pad = padding == Padding::Same ? (kh - 1) / 2 : 0;
  if (kh > h + 2 * pad || kw > w + 2 * pad)
    throw ShapeError("conv2d kernel larger than padded input");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (w + 2 * pad - kw) / stride + 1;

  detail::check_finite(input, "conv2d");
  detail::check_finite(kernel, "conv2d");

  const bool rec = bias ? detail::should_record<Real>({&input, &kernel, bias})
                        : detail::should_record<Real>({&input, &kernel});
  TensorT<Real> out = detail::make_output<Real>(Shape{co, ho, wo}, rec);

  const std::int64_t ckk = static_cast<std::int64_t>(ci) * kh * kw;
  const std::int64_t hw = static_cast<std::int64_t>(ho) * wo;
  std::vector<Real> cols(static_cast<std::size_t>(ckk * hw));
  detail::im2col(input.values().data(), ci, h, w, kh, kw, stride, pad, ho, wo, cols.data());

  using Map = Eigen::Map<detail::MatRM<Real>>;
  using CMap = Eigen::Map<const detail::MatRM<Real>>;
  CMap K(kernel.values().data(), co, ckk);
  CMap C(cols.data(), ckk, hw);
  Map O(out.mutable_values().data(), co, hw);
  O.noalias() = K * C;

  if (bias) {
    const Real* pb = bias->values().data();
    Real* po = out.mutable_values().data();
    for (int c = 0; c < co; ++c) {
      const Real b = pb[c];
      Real* row = po + static_cast<std::int64_t>(c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) row[i] += b;
    }
  }

  if (rec) {
    auto xn = input.node(), kn = kernel.node(), on = out.node();
    auto bn = bias ? bias->node() : nullptr;
    TapeT<Real>::active()->record([xn, kn, bn, on, ci, h, w, co, kh, kw, stride, pad, ho, wo]() {
      const std::int64_t ckk = static_cast<std::int64_t>(ci) * kh * kw;
      const std::int64_t hw = static_cast<std::int64_t>(ho) * wo;
      using Map = Eigen::Map<detail::MatRM<Real>>;
      using CMap = Eigen::Map<const detail::MatRM<Real>>;
      CMap G(on->grad.data(), co, hw);
      if (kn->requires_grad) {
        kn->ensure_grad();
        std::vector<Real> cols(static_cast<std::size_t>(ckk * hw));
        detail::im2col(xn->val.data(), ci, h, w, kh, kw, stride, pad, ho, wo, cols.data());
        CMap C(cols.data(), ckk, hw);
        Map GK(kn->grad.data(), co, ckk);
        GK.noalias() += G * C.transpose();
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        std::vector<Real> gcols(static_cast<std::size_t>(ckk * hw));
        CMap K(kn->val.data(), co, ckk);
        Map GC(gcols.data(), ckk, hw);
        GC.noalias() = K.transpose() * G;
        detail::col2im_acc(gcols.data(), ci, h, w, kh, kw, stride, pad, ho, wo, xn->grad.data());
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        const Real* g = on->grad.data();
        for (int c = 0; c < co; ++c) {
          Real s = Real(0);
          const Real* row = g + static_cast<std::int64_t>(c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) s += row[i];
          bn->grad[c] += s;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward driver
// ---------------------------------------------------------------------------

template <typename Real>
void TapeT<Real>::backward(const TensorT<Real>& loss) {
  if (consumed_) throw TapeError("tape already consumed by a backward pass");
  if (loss.numel() != 1)
    throw TapeError("backward expects a scalar loss, got shape " + shape_str(loss.shape()));
  consumed_ = true;
  loss.node()->ensure_grad();
  loss.node()->grad[0] = Real(1);
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  steps_.clear();
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using Tensor64 = TensorT<double>;
using Tape64 = TapeT<double>;

}  // namespace aiap
