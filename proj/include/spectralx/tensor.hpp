#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>
#include <vector>

#include "spectralx/common.hpp"
#include "spectralx/rng.hpp"

namespace spectralx {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Sentinel used by top_k_mask: most-negative finite value, not -inf, so a
// following softmax stays NaN-free.
inline constexpr real kMaskedSentinel = std::numeric_limits<real>::lowest();

namespace detail {

struct Node {
  Shape shape;
  std::vector<real> value;
  std::vector<real> grad;  // sized lazily on first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // reads this node's grad, accumulates into parents

  bool is_leaf() const { return !backprop; }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline void check_finite(const char* op, const std::vector<real>& v) {
  for (real x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
}

}  // namespace detail

// Disables graph construction (inference / oracle evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense row-major tensor with reverse-mode autodiff. Value semantics over a
// shared node; values are immutable after construction except for leaf
// tensors mutated by optimizer steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
      throw ShapeError("value count does not match shape " + shape_str(shape));
    }
    detail::check_finite("leaf", values);
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<real> v(static_cast<size_t>(shape_numel(shape)), 0.0);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, real value) {
    std::vector<real> v(static_cast<size_t>(shape_numel(shape)), value);
    return from(std::move(shape), std::move(v));
  }

  static Tensor scalar(real value) { return from({}, {value}); }

  static Tensor randn(Shape shape, Rng& rng, real stdev = 1.0, real mean = 0.0,
                      bool requires_grad = false) {
    std::vector<real> v(static_cast<size_t>(shape_numel(shape)));
    for (real& x : v) x = rng.normal(mean, stdev);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  int64_t ndim() const { return static_cast<int64_t>(node().shape.size()); }
  int64_t dim(int64_t i) const {
    const Shape& s = node().shape;
    if (i < 0) i += static_cast<int64_t>(s.size());
    if (i < 0 || i >= static_cast<int64_t>(s.size())) throw ShapeError("dim index out of range");
    return s[static_cast<size_t>(i)];
  }
  int64_t numel() const { return static_cast<int64_t>(node().value.size()); }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool rg) {
    if (!node().is_leaf()) throw ValueError("set_requires_grad: only leaf tensors");
    node().requires_grad = rg;
  }

  const std::vector<real>& vals() const { return node().value; }

  // In-place access, for optimizer updates and buffers. Leaf-only: interior
  // graph values carry saved state in closures and must not be touched.
  std::vector<real>& vals_mut() {
    if (!node().is_leaf()) throw ValueError("vals_mut: only leaf tensors are mutable");
    return node().value;
  }

  real item() const {
    if (numel() != 1) throw ShapeError("item: tensor is not a scalar");
    return node().value[0];
  }

  real at(std::initializer_list<int64_t> idx) const {
    const Shape& s = node().shape;
    if (idx.size() != s.size()) throw ShapeError("at: rank mismatch");
    int64_t off = 0;
    size_t k = 0;
    for (int64_t i : idx) {
      if (i < 0 || i >= s[k]) throw ShapeError("at: index out of range");
      off = off * s[k] + i;
      ++k;
    }
    return node().value[static_cast<size_t>(off)];
  }

  bool has_grad() const { return defined() && !node().grad.empty(); }
  const std::vector<real>& grad() const {
    if (!has_grad()) throw ValueError("grad: no gradient accumulated");
    return node().grad;
  }
  void zero_grad() { node().grad.clear(); }

  // Values copied out of the graph (constant from the graph's perspective).
  Tensor detach() const { return from(node().shape, node().value); }

  // Reverse-mode sweep from a scalar root.
  void backward() {
    if (numel() != 1) throw ValueError("backward: root must be a scalar");
    detail::Node* root = n_.get();
    if (!root->requires_grad) throw ValueError("backward: root does not require grad");

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    struct Frame {
      detail::Node* node;
      size_t next_parent;
    };
    std::vector<Frame> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        detail::Node* p = f.node->parents[f.next_parent++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }
    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backprop && !n->grad.empty()) n->backprop(*n);
    }
  }

  detail::Node& node() const {
    if (!n_) throw ValueError("use of undefined tensor");
    return *n_;
  }
  std::shared_ptr<detail::Node> node_ptr() const { return n_; }

  // Builds an op result node; drops graph metadata when no parent needs grad.
  static Tensor make(const char* op, Shape shape, std::vector<real> value,
                     std::vector<Tensor> parents, std::function<void(detail::Node&)> backprop) {
    if (shape_numel(shape) != static_cast<int64_t>(value.size())) {
      throw ShapeError(std::string(op) + ": internal shape/value mismatch");
    }
    detail::check_finite(op, value);
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    bool rg = false;
    if (detail::grad_mode()) {
      for (const Tensor& p : parents) rg = rg || p.node().requires_grad;
    }
    n->requires_grad = rg;
    if (rg) {
      n->parents.reserve(parents.size());
      for (const Tensor& p : parents) n->parents.push_back(p.node_ptr());
      n->backprop = std::move(backprop);
    }
    return Tensor(std::move(n));
  }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}
  std::shared_ptr<detail::Node> n_;
};

namespace detail {

inline void accum(Node& parent, size_t index, real contribution) {
  parent.ensure_grad();
  parent.grad[index] += contribution;
}

// ----- broadcasting ---------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t na = a.size(), nb = b.size(), n = std::max(na, nb);
  Shape out(n);
  for (size_t i = 0; i < n; ++i) {
    const int64_t da = i < n - na ? 1 : a[i - (n - na)];
    const int64_t db = i < n - nb ? 1 : b[i - (n - nb)];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("broadcast mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides in the broadcast coordinate space (0 where dim == 1).
inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  const size_t n = out.size(), ns = s.size();
  std::vector<int64_t> natural(ns);
  int64_t acc = 1;
  for (size_t i = ns; i-- > 0;) {
    natural[i] = acc;
    acc *= s[i];
  }
  std::vector<int64_t> st(n, 0);
  for (size_t i = 0; i < ns; ++i) {
    st[n - ns + i] = (s[i] == 1) ? 0 : natural[i];
  }
  return st;
}

// Sums `g` (laid out as gshape) down to `target` (broadcast-compatible).
inline std::vector<real> reduce_to(const std::vector<real>& g, const Shape& gshape,
                                   const Shape& target) {
  if (gshape == target) return g;
  std::vector<real> out(static_cast<size_t>(shape_numel(target)), 0.0);
  const auto st = broadcast_strides(target, gshape);
  const size_t n = gshape.size();
  std::vector<int64_t> coord(n, 0);
  int64_t tgt_off = 0;
  for (size_t lin = 0; lin < g.size(); ++lin) {
    out[static_cast<size_t>(tgt_off)] += g[lin];
    for (size_t i = n; i-- > 0;) {
      coord[i]++;
      tgt_off += st[i];
      if (coord[i] < gshape[i]) break;
      tgt_off -= st[i] * gshape[i];
      coord[i] = 0;
      if (i == 0) break;
    }
  }
  return out;
}

template <typename FwdFn, typename DaFn, typename DbFn>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdFn fwd, DaFn da,
                 DbFn db) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const std::vector<real>& va = a.vals();
  const std::vector<real>& vb = b.vals();

  Shape so;
  std::vector<real> out;
  if (sa == sb) {
    so = sa;
    out.resize(va.size());
    for (size_t i = 0; i < va.size(); ++i) out[i] = fwd(va[i], vb[i]);
  } else {
    so = broadcast_shape(sa, sb);
    const auto stA = broadcast_strides(sa, so);
    const auto stB = broadcast_strides(sb, so);
    const size_t n = so.size();
    out.resize(static_cast<size_t>(shape_numel(so)));
    std::vector<int64_t> coord(n, 0);
    int64_t offA = 0, offB = 0;
    for (size_t lin = 0; lin < out.size(); ++lin) {
      out[lin] = fwd(va[static_cast<size_t>(offA)], vb[static_cast<size_t>(offB)]);
      for (size_t i = n; i-- > 0;) {
        coord[i]++;
        offA += stA[i];
        offB += stB[i];
        if (coord[i] < so[i]) break;
        offA -= stA[i] * so[i];
        offB -= stB[i] * so[i];
        coord[i] = 0;
        if (i == 0) break;
      }
    }
  }

  return Tensor::make(
      name, so, std::move(out), {a, b},
      [a, b, da, db, so](detail::Node& o) {
        const auto& g = o.grad;
        const Shape& sa2 = a.shape();
        const Shape& sb2 = b.shape();
        const std::vector<real>& va2 = a.vals();
        const std::vector<real>& vb2 = b.vals();
        const auto stA = broadcast_strides(sa2, so);
        const auto stB = broadcast_strides(sb2, so);
        std::vector<real> ga, gb;
        const bool wantA = a.node().requires_grad;
        const bool wantB = b.node().requires_grad;
        if (wantA) ga.assign(g.size(), 0.0);
        if (wantB) gb.assign(g.size(), 0.0);
        const size_t n = so.size();
        std::vector<int64_t> coord(n, 0);
        int64_t offA = 0, offB = 0;
        for (size_t lin = 0; lin < g.size(); ++lin) {
          const real x = va2[static_cast<size_t>(offA)];
          const real y = vb2[static_cast<size_t>(offB)];
          if (wantA) ga[lin] = da(x, y, g[lin]);
          if (wantB) gb[lin] = db(x, y, g[lin]);
          for (size_t i = n; i-- > 0;) {
            coord[i]++;
            offA += stA[i];
            offB += stB[i];
            if (coord[i] < so[i]) break;
            offA -= stA[i] * so[i];
            offB -= stB[i] * so[i];
            coord[i] = 0;
            if (i == 0) break;
          }
        }
        if (wantA) {
          auto r = reduce_to(ga, so, sa2);
          auto& p = a.node();
          p.ensure_grad();
          for (size_t i = 0; i < r.size(); ++i) p.grad[i] += r[i];
        }
        if (wantB) {
          auto r = reduce_to(gb, so, sb2);
          auto& p = b.node();
          p.ensure_grad();
          for (size_t i = 0; i < r.size(); ++i) p.grad[i] += r[i];
        }
      });
}

template <typename FwdFn, typename GradFn>
Tensor unary_op(const char* name, const Tensor& a, FwdFn fwd, GradFn dfdx) {
  const auto& va = a.vals();
  std::vector<real> out(va.size());
  for (size_t i = 0; i < va.size(); ++i) out[i] = fwd(va[i]);
  return Tensor::make(name, a.shape(), std::move(out), {a}, [a, dfdx](detail::Node& o) {
    auto& p = a.node();
    if (!p.requires_grad) return;
    p.ensure_grad();
    const auto& va2 = a.vals();
    for (size_t i = 0; i < va2.size(); ++i) p.grad[i] += dfdx(va2[i], o.value[i]) * o.grad[i];
  });
}

}  // namespace detail

// ----- elementwise ----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](real x, real y) { return x + y; },
      [](real, real, real g) { return g; }, [](real, real, real g) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](real x, real y) { return x - y; },
      [](real, real, real g) { return g; }, [](real, real, real g) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](real x, real y) { return x * y; },
      [](real, real y, real g) { return g * y; }, [](real x, real, real g) { return g * x; });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "div", a, b, [](real x, real y) { return x / y; },
      [](real, real y, real g) { return g / y; },
      [](real x, real y, real g) { return -g * x / (y * y); });
}

inline Tensor add(const Tensor& a, real s) { return add(a, Tensor::scalar(s)); }
inline Tensor mul(const Tensor& a, real s) { return mul(a, Tensor::scalar(s)); }
inline Tensor neg(const Tensor& a) { return mul(a, -1.0); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }
inline Tensor operator*(const Tensor& a, real s) { return mul(a, s); }
inline Tensor operator*(real s, const Tensor& a) { return mul(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      "exp", a, [](real x) { return std::exp(x); }, [](real, real y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      "log", a, [](real x) { return std::log(x); }, [](real x, real) { return 1.0 / x; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      "relu", a, [](real x) { return x > 0 ? x : 0.0; },
      [](real x, real) { return x > 0 ? 1.0 : 0.0; });
}

// Exact GELU, x/2 * (1 + erf(x/sqrt(2))).
inline Tensor gelu(const Tensor& a) {
  constexpr real kInvSqrt2 = 0.70710678118654752440;
  constexpr real kInvSqrt2Pi = 0.39894228040143267794;
  return detail::unary_op(
      "gelu", a, [=](real x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [=](real x, real) {
        const real cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

inline Tensor softplus(const Tensor& a) {
  return detail::unary_op(
      "softplus", a,
      [](real x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](real x, real) { return 1.0 / (1.0 + std::exp(-x)); });
}

// ----- reductions -----------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  real s = 0.0;
  for (real x : a.vals()) s += x;
  return Tensor::make("sum", {}, {s}, {a}, [a](detail::Node& o) {
    auto& p = a.node();
    if (!p.requires_grad) return;
    p.ensure_grad();
    const real g = o.grad[0];
    for (auto& gi : p.grad) gi += g;
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  const real n = static_cast<real>(a.numel());
  real s = 0.0;
  for (real x : a.vals()) s += x;
  return Tensor::make("mean", {}, {s / n}, {a}, [a, n](detail::Node& o) {
    auto& p = a.node();
    if (!p.requires_grad) return;
    p.ensure_grad();
    const real g = o.grad[0] / n;
    for (auto& gi : p.grad) gi += g;
  });
}

inline Tensor sum_axis(const Tensor& a, int64_t axis, bool keepdim = false) {
  const Shape& s = a.shape();
  if (axis < 0) axis += a.ndim();
  if (axis < 0 || axis >= a.ndim()) throw ShapeError("sum_axis: axis out of range");
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < a.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
  const int64_t n = s[static_cast<size_t>(axis)];
  Shape so;
  for (int64_t i = 0; i < a.ndim(); ++i) {
    if (i == axis) {
      if (keepdim) so.push_back(1);
    } else {
      so.push_back(s[static_cast<size_t>(i)]);
    }
  }
  std::vector<real> out(static_cast<size_t>(outer * inner), 0.0);
  const auto& v = a.vals();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < n; ++k)
      for (int64_t i = 0; i < inner; ++i)
        out[static_cast<size_t>(o * inner + i)] += v[static_cast<size_t>((o * n + k) * inner + i)];
  return Tensor::make("sum_axis", so, std::move(out), {a},
                      [a, outer, inner, n](detail::Node& o2) {
                        auto& p = a.node();
                        if (!p.requires_grad) return;
                        p.ensure_grad();
                        for (int64_t o = 0; o < outer; ++o)
                          for (int64_t k = 0; k < n; ++k)
                            for (int64_t i = 0; i < inner; ++i)
                              p.grad[static_cast<size_t>((o * n + k) * inner + i)] +=
                                  o2.grad[static_cast<size_t>(o * inner + i)];
                      });
}

// ----- shape ops -------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: numel mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return Tensor::make("reshape", std::move(shape), a.vals(), {a}, [a](detail::Node& o) {
    auto& p = a.node();
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
  });
}

inline Tensor permute(const Tensor& a, const std::vector<int64_t>& axes) {
  const Shape& s = a.shape();
  const size_t n = s.size();
  if (axes.size() != n) throw ShapeError("permute: axes rank mismatch");
  std::vector<bool> used(n, false);
  Shape so(n);
  for (size_t i = 0; i < n; ++i) {
    const int64_t ax = axes[i];
    if (ax < 0 || ax >= static_cast<int64_t>(n) || used[static_cast<size_t>(ax)]) {
      throw ShapeError("permute: invalid axes");
    }
    used[static_cast<size_t>(ax)] = true;
    so[i] = s[static_cast<size_t>(ax)];
  }
  std::vector<int64_t> in_strides(n), out_src_stride(n);
  int64_t acc = 1;
  for (size_t i = n; i-- > 0;) {
    in_strides[i] = acc;
    acc *= s[i];
  }
  for (size_t i = 0; i < n; ++i) out_src_stride[i] = in_strides[static_cast<size_t>(axes[i])];

  const auto& v = a.vals();
  std::vector<real> out(v.size());
  std::vector<int64_t> coord(n, 0);
  int64_t src = 0;
  for (size_t lin = 0; lin < out.size(); ++lin) {
    out[lin] = v[static_cast<size_t>(src)];
    for (size_t i = n; i-- > 0;) {
      coord[i]++;
      src += out_src_stride[i];
      if (coord[i] < so[i]) break;
      src -= out_src_stride[i] * so[i];
      coord[i] = 0;
      if (i == 0) break;
    }
  }
  return Tensor::make("permute", so, std::move(out), {a},
                      [a, so, out_src_stride, n](detail::Node& o) {
                        auto& p = a.node();
                        if (!p.requires_grad) return;
                        p.ensure_grad();
                        std::vector<int64_t> coord(n, 0);
                        int64_t src = 0;
                        for (size_t lin = 0; lin < o.grad.size(); ++lin) {
                          p.grad[static_cast<size_t>(src)] += o.grad[lin];
                          for (size_t i = n; i-- > 0;) {
                            coord[i]++;
                            src += out_src_stride[i];
                            if (coord[i] < so[i]) break;
                            src -= out_src_stride[i] * so[i];
                            coord[i] = 0;
                            if (i == 0) break;
                          }
                        }
                      });
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("transpose: expects a matrix");
  return permute(a, {1, 0});
}

inline Tensor narrow(const Tensor& a, int64_t axis, int64_t start, int64_t len) {
  const Shape& s = a.shape();
  if (axis < 0) axis += a.ndim();
  if (axis < 0 || axis >= a.ndim()) throw ShapeError("narrow: axis out of range");
  const int64_t d = s[static_cast<size_t>(axis)];
  if (start < 0 || len < 0 || start + len > d) throw ShapeError("narrow: range out of bounds");
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < a.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
  Shape so = s;
  so[static_cast<size_t>(axis)] = len;
  std::vector<real> out(static_cast<size_t>(outer * len * inner));
  const auto& v = a.vals();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < len; ++k)
      std::copy_n(v.begin() + (o * d + start + k) * inner, inner,
                  out.begin() + (o * len + k) * inner);
  return Tensor::make("narrow", so, std::move(out), {a},
                      [a, outer, inner, d, start, len](detail::Node& o2) {
                        auto& p = a.node();
                        if (!p.requires_grad) return;
                        p.ensure_grad();
                        for (int64_t o = 0; o < outer; ++o)
                          for (int64_t k = 0; k < len; ++k)
                            for (int64_t i = 0; i < inner; ++i)
                              p.grad[static_cast<size_t>((o * d + start + k) * inner + i)] +=
                                  o2.grad[static_cast<size_t>((o * len + k) * inner + i)];
                      });
}

inline Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const int64_t ndim = parts[0].ndim();
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim) throw ShapeError("concat: axis out of range");
  int64_t axis_total = 0;
  for (const Tensor& t : parts) {
    if (t.ndim() != ndim) throw ShapeError("concat: rank mismatch");
    for (int64_t i = 0; i < ndim; ++i) {
      if (i != axis && t.shape()[static_cast<size_t>(i)] != s0[static_cast<size_t>(i)]) {
        throw ShapeError("concat: shape mismatch on non-concat axis");
      }
    }
    axis_total += t.dim(axis);
  }
  Shape so = s0;
  so[static_cast<size_t>(axis)] = axis_total;
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < ndim; ++i) inner *= s0[static_cast<size_t>(i)];

  std::vector<real> out(static_cast<size_t>(outer * axis_total * inner));
  int64_t offset = 0;
  for (const Tensor& t : parts) {
    const int64_t len = t.dim(axis);
    const auto& v = t.vals();
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(v.begin() + o * len * inner, len * inner,
                  out.begin() + (o * axis_total + offset) * inner);
    offset += len;
  }
  std::vector<int64_t> lens;
  for (const Tensor& t : parts) lens.push_back(t.dim(axis));
  return Tensor::make("concat", so, std::move(out), parts,
                      [parts, lens, outer, inner, axis_total](detail::Node& o2) {
                        int64_t offset = 0;
                        for (size_t pi = 0; pi < parts.size(); ++pi) {
                          const int64_t len = lens[pi];
                          auto& p = parts[pi].node();
                          if (p.requires_grad) {
                            p.ensure_grad();
                            for (int64_t o = 0; o < outer; ++o)
                              for (int64_t k = 0; k < len * inner; ++k)
                                p.grad[static_cast<size_t>(o * len * inner + k)] +=
                                    o2.grad[static_cast<size_t>((o * axis_total + offset) * inner +
                                                                k)];
                          }
                          offset += len;
                        }
                      });
}

// Row gather from a matrix; duplicate indices are allowed.
inline Tensor gather_rows(const Tensor& a, std::vector<int64_t> idx) {
  if (a.ndim() != 2) throw ShapeError("gather_rows: expects a matrix");
  const int64_t rows = a.dim(0), cols = a.dim(1);
  for (int64_t i : idx) {
    if (i < 0 || i >= rows) throw ValueError("gather_rows: index out of range");
  }
  std::vector<real> out(idx.size() * static_cast<size_t>(cols));
  const auto& v = a.vals();
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy_n(v.begin() + idx[r] * cols, cols, out.begin() + static_cast<int64_t>(r) * cols);
  return Tensor::make("gather_rows", {static_cast<int64_t>(idx.size()), cols}, std::move(out), {a},
                      [a, idx, cols](detail::Node& o) {
                        auto& p = a.node();
                        if (!p.requires_grad) return;
                        p.ensure_grad();
                        for (size_t r = 0; r < idx.size(); ++r)
                          for (int64_t c = 0; c < cols; ++c)
                            p.grad[static_cast<size_t>(idx[r] * cols + c)] +=
                                o.grad[r * static_cast<size_t>(cols) + static_cast<size_t>(c)];
                      });
}

// Rows of `a` placed at `idx` within a zero matrix of `rows` rows.
inline Tensor scatter_rows(const Tensor& a, const std::vector<int64_t>& idx, int64_t rows) {
  if (a.ndim() != 2) throw ShapeError("scatter_rows: expects a matrix");
  if (static_cast<int64_t>(idx.size()) != a.dim(0)) {
    throw ShapeError("scatter_rows: index count != row count");
  }
  const int64_t cols = a.dim(1);
  for (int64_t i : idx) {
    if (i < 0 || i >= rows) throw ValueError("scatter_rows: index out of range");
  }
  std::vector<real> out(static_cast<size_t>(rows * cols), 0.0);
  const auto& v = a.vals();
  for (size_t r = 0; r < idx.size(); ++r)
    for (int64_t c = 0; c < cols; ++c)
      out[static_cast<size_t>(idx[r] * cols + c)] += v[r * static_cast<size_t>(cols) + static_cast<size_t>(c)];
  return Tensor::make("scatter_rows", {rows, cols}, std::move(out), {a},
                      [a, idx, cols](detail::Node& o) {
                        auto& p = a.node();
                        if (!p.requires_grad) return;
                        p.ensure_grad();
                        for (size_t r = 0; r < idx.size(); ++r)
                          for (int64_t c = 0; c < cols; ++c)
                            p.grad[r * static_cast<size_t>(cols) + static_cast<size_t>(c)] +=
                                o.grad[static_cast<size_t>(idx[r] * cols + c)];
                      });
}

// ----- matmul (Eigen-backed) --------------------------------------------------

namespace detail {
using EMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul: expects matrices");
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<real> out(static_cast<size_t>(m * n));
  {
    detail::ECMap A(a.vals().data(), m, k);
    detail::ECMap B(b.vals().data(), k, n);
    detail::EMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  return Tensor::make("matmul", {m, n}, std::move(out), {a, b},
                      [a, b, m, k, n](detail::Node& o) {
                        detail::ECMap G(o.grad.data(), m, n);
                        if (a.node().requires_grad) {
                          auto& p = a.node();
                          p.ensure_grad();
                          detail::ECMap B(b.vals().data(), k, n);
                          detail::EMap GA(p.grad.data(), m, k);
                          GA.noalias() += G * B.transpose();
                        }
                        if (b.node().requires_grad) {
                          auto& p = b.node();
                          p.ensure_grad();
                          detail::ECMap A(a.vals().data(), m, k);
                          detail::EMap GB(p.grad.data(), k, n);
                          GB.noalias() += A.transpose() * G;
                        }
                      });
}

// ----- softmax / top-k / losses ----------------------------------------------

namespace detail {
// softmax over the last axis; max-shifted for stability.
inline Tensor softmax_last(const Tensor& a) {
  const int64_t cols = a.dim(-1);
  const int64_t rows = a.numel() / cols;
  const auto& v = a.vals();
  std::vector<real> out(v.size());
  for (int64_t r = 0; r < rows; ++r) {
    const real* x = v.data() + r * cols;
    real* y = out.data() + r * cols;
    real mx = x[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    real s = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      s += y[c];
    }
    for (int64_t c = 0; c < cols; ++c) y[c] /= s;
  }
  return Tensor::make("softmax", a.shape(), std::move(out), {a},
                      [a, rows, cols](detail::Node& o) {
                        auto& p = a.node();
                        if (!p.requires_grad) return;
                        p.ensure_grad();
                        for (int64_t r = 0; r < rows; ++r) {
                          const real* y = o.value.data() + r * cols;
                          const real* g = o.grad.data() + r * cols;
                          real dot = 0.0;
                          for (int64_t c = 0; c < cols; ++c) dot += y[c] * g[c];
                          real* pg = p.grad.data() + r * cols;
                          for (int64_t c = 0; c < cols; ++c) pg[c] += y[c] * (g[c] - dot);
                        }
                      });
}
}  // namespace detail

inline Tensor softmax(const Tensor& a, int64_t axis = -1) {
  if (a.ndim() == 0) throw ShapeError("softmax: scalar input");
  if (axis < 0) axis += a.ndim();
  if (axis < 0 || axis >= a.ndim()) throw ShapeError("softmax: axis out of range");
  if (axis == a.ndim() - 1) return detail::softmax_last(a);
  // move axis to the back, apply, move back
  std::vector<int64_t> fwd, inv(static_cast<size_t>(a.ndim()));
  for (int64_t i = 0; i < a.ndim(); ++i)
    if (i != axis) fwd.push_back(i);
  fwd.push_back(axis);
  for (size_t i = 0; i < fwd.size(); ++i) inv[static_cast<size_t>(fwd[i])] = static_cast<int64_t>(i);
  return permute(detail::softmax_last(permute(a, fwd)), inv);
}

// Keeps the K largest entries per row (last axis), ties broken by lowest
// index; everything else is replaced by the most-negative finite sentinel.
inline Tensor top_k_mask(const Tensor& a, int64_t k) {
  const int64_t cols = a.dim(-1);
  const int64_t rows = a.numel() / cols;
  if (k < 1 || k > cols) throw ValueError("top_k_mask: K out of range");
  const auto& v = a.vals();
  std::vector<real> out(v.size(), kMaskedSentinel);
  std::vector<char> keep(v.size(), 0);
  std::vector<int64_t> order(static_cast<size_t>(cols));
  for (int64_t r = 0; r < rows; ++r) {
    const real* x = v.data() + r * cols;
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [x](int64_t i, int64_t j) { return x[i] > x[j] || (x[i] == x[j] && i < j); });
    for (int64_t t = 0; t < k; ++t) {
      const int64_t c = order[static_cast<size_t>(t)];
      out[static_cast<size_t>(r * cols + c)] = x[c];
      keep[static_cast<size_t>(r * cols + c)] = 1;
    }
  }
  return Tensor::make("top_k_mask", a.shape(), std::move(out), {a},
                      [a, keep](detail::Node& o) {
                        auto& p = a.node();
                        if (!p.requires_grad) return;
                        p.ensure_grad();
                        for (size_t i = 0; i < keep.size(); ++i)
                          if (keep[i]) p.grad[i] += o.grad[i];
                      });
}

// Mean cross-entropy of row logits against integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels) {
  if (logits.ndim() != 2) throw ShapeError("cross_entropy: logits must be N x C");
  const int64_t n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != n) throw ShapeError("cross_entropy: label count");
  for (int64_t l : labels) {
    if (l < 0 || l >= c) throw ValueError("cross_entropy: label out of range");
  }
  if (n == 0) throw ShapeError("cross_entropy: empty batch");
  const auto& v = logits.vals();
  real loss = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    const real* x = v.data() + r * c;
    real mx = x[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    real s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += std::exp(x[j] - mx);
    loss += mx + std::log(s) - x[labels[static_cast<size_t>(r)]];
  }
  loss /= static_cast<real>(n);
  return Tensor::make("cross_entropy", {}, {loss}, {logits},
                      [logits, labels, n, c](detail::Node& o) {
                        auto& p = logits.node();
                        if (!p.requires_grad) return;
                        p.ensure_grad();
                        const real g = o.grad[0] / static_cast<real>(n);
                        const auto& v2 = logits.vals();
                        for (int64_t r = 0; r < n; ++r) {
                          const real* x = v2.data() + r * c;
                          real mx = x[0];
                          for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
                          real s = 0.0;
                          for (int64_t j = 0; j < c; ++j) s += std::exp(x[j] - mx);
                          real* pg = p.grad.data() + r * c;
                          for (int64_t j = 0; j < c; ++j) {
                            real soft = std::exp(x[j] - mx) / s;
                            pg[j] += g * (soft - (labels[static_cast<size_t>(r)] == j ? 1.0 : 0.0));
                          }
                        }
                      });
}

// ----- layer norm -------------------------------------------------------------

// Normalizes over the last axis, then applies the affine pair.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         real eps = 1e-5) {
  const int64_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("layer_norm: affine size");
  const int64_t rows = x.numel() / d;
  const auto& v = x.vals();
  const auto& gw = gamma.vals();
  const auto& bw = beta.vals();
  std::vector<real> out(v.size());
  auto xhat = std::make_shared<std::vector<real>>(v.size());
  auto inv = std::make_shared<std::vector<real>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const real* xr = v.data() + r * d;
    real mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<real>(d);
    real var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<real>(d);
    const real iv = 1.0 / std::sqrt(var + eps);
    (*inv)[static_cast<size_t>(r)] = iv;
    for (int64_t j = 0; j < d; ++j) {
      const real xh = (xr[j] - mu) * iv;
      (*xhat)[static_cast<size_t>(r * d + j)] = xh;
      out[static_cast<size_t>(r * d + j)] = xh * gw[static_cast<size_t>(j)] + bw[static_cast<size_t>(j)];
    }
  }
  return Tensor::make(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv, rows, d](detail::Node& o) {
        const auto& gw2 = gamma.vals();
        auto& px = x.node();
        auto& pg = gamma.node();
        auto& pb = beta.node();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        if (px.requires_grad) px.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const real* g = o.grad.data() + r * d;
          const real* xh = xhat->data() + r * d;
          if (pg.requires_grad || pb.requires_grad) {
            for (int64_t j = 0; j < d; ++j) {
              if (pg.requires_grad) pg.grad[static_cast<size_t>(j)] += g[j] * xh[j];
              if (pb.requires_grad) pb.grad[static_cast<size_t>(j)] += g[j];
            }
          }
          if (px.requires_grad) {
            real sum_gx = 0.0, sum_gxxh = 0.0;
            for (int64_t j = 0; j < d; ++j) {
              const real dxh = g[j] * gw2[static_cast<size_t>(j)];
              sum_gx += dxh;
              sum_gxxh += dxh * xh[j];
            }
            const real iv = (*inv)[static_cast<size_t>(r)];
            const real invd = 1.0 / static_cast<real>(d);
            for (int64_t j = 0; j < d; ++j) {
              const real dxh = g[j] * gw2[static_cast<size_t>(j)];
              px.grad[static_cast<size_t>(r * d + j)] +=
                  iv * (dxh - sum_gx * invd - xh[j] * sum_gxxh * invd);
            }
          }
        }
      });
}

// ----- interpolation / embeddings ---------------------------------------------

// Linear interpolation to new_len along `axis` on a uniform endpoint-aligned
// grid. new_len == old length returns the input unchanged (bit-equal).
inline Tensor interpolate_linear(const Tensor& a, int64_t new_len, int64_t axis) {
  const Shape& s = a.shape();
  if (axis < 0) axis += a.ndim();
  if (axis < 0 || axis >= a.ndim()) throw ShapeError("interpolate_linear: axis out of range");
  const int64_t n = s[static_cast<size_t>(axis)];
  if (n < 2) throw ValueError("interpolate_linear: source axis length must be >= 2");
  if (new_len < 1) throw ValueError("interpolate_linear: new_len must be >= 1");

  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < a.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
  Shape so = s;
  so[static_cast<size_t>(axis)] = new_len;

  // precompute source index/weight per output position
  std::vector<int64_t> i0(static_cast<size_t>(new_len));
  std::vector<real> w1(static_cast<size_t>(new_len));
  const bool identity = (new_len == n);
  for (int64_t j = 0; j < new_len; ++j) {
    if (identity) {
      i0[static_cast<size_t>(j)] = j == n - 1 ? j - 1 : j;
      w1[static_cast<size_t>(j)] = j == n - 1 ? 1.0 : 0.0;
      continue;
    }
    const real pos = new_len == 1
                         ? 0.0
                         : static_cast<real>(j) * static_cast<real>(n - 1) / static_cast<real>(new_len - 1);
    int64_t lo = static_cast<int64_t>(std::floor(pos));
    lo = std::min(lo, n - 2);
    i0[static_cast<size_t>(j)] = lo;
    w1[static_cast<size_t>(j)] = pos - static_cast<real>(lo);
  }

  const auto& v = a.vals();
  std::vector<real> out(static_cast<size_t>(outer * new_len * inner));
  if (identity) {
    out = v;
  } else {
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t j = 0; j < new_len; ++j) {
        const int64_t lo = i0[static_cast<size_t>(j)];
        const real w = w1[static_cast<size_t>(j)];
        const real* x0 = v.data() + (o * n + lo) * inner;
        const real* x1 = v.data() + (o * n + lo + 1) * inner;
        real* y = out.data() + (o * new_len + j) * inner;
        if (w == 0.0) {
          std::copy_n(x0, inner, y);
        } else if (w == 1.0) {
          std::copy_n(x1, inner, y);
        } else {
          for (int64_t i = 0; i < inner; ++i) y[i] = (1.0 - w) * x0[i] + w * x1[i];
        }
      }
    }
  }
  return Tensor::make("interpolate_linear", so, std::move(out), {a},
                      [a, i0, w1, outer, inner, n, new_len, identity](detail::Node& o2) {
                        auto& p = a.node();
                        if (!p.requires_grad) return;
                        p.ensure_grad();
                        if (identity) {
                          for (size_t i = 0; i < o2.grad.size(); ++i) p.grad[i] += o2.grad[i];
                          return;
                        }
                        for (int64_t o = 0; o < outer; ++o)
                          for (int64_t j = 0; j < new_len; ++j) {
                            const int64_t lo = i0[static_cast<size_t>(j)];
                            const real w = w1[static_cast<size_t>(j)];
                            const real* g = o2.grad.data() + (o * new_len + j) * inner;
                            real* g0 = p.grad.data() + (o * n + lo) * inner;
                            real* g1 = p.grad.data() + (o * n + lo + 1) * inner;
                            for (int64_t i = 0; i < inner; ++i) {
                              g0[i] += (1.0 - w) * g[i];
                              g1[i] += w * g[i];
                            }
                          }
                      });
}

// 1-D sine-cosine embedding: row p packs [sin, cos] pairs interleaved by
// frequency index i in [0, dim/2), frequency 1/10000^(2i/dim).
inline Tensor sincos_embed_1d(const std::vector<real>& positions, int64_t dim) {
  if (dim <= 0 || dim % 2 != 0) throw ValueError("sincos_embed_1d: dim must be positive and even");
  for (real p : positions) {
    if (!std::isfinite(p)) throw ValueError("sincos_embed_1d: non-finite position");
  }
  const int64_t n = static_cast<int64_t>(positions.size());
  std::vector<real> out(static_cast<size_t>(n * dim));
  for (int64_t p = 0; p < n; ++p) {
    for (int64_t i = 0; i < dim / 2; ++i) {
      const real freq = std::pow(10000.0, -2.0 * static_cast<real>(i) / static_cast<real>(dim));
      const real angle = positions[static_cast<size_t>(p)] * freq;
      out[static_cast<size_t>(p * dim + 2 * i)] = std::sin(angle);
      out[static_cast<size_t>(p * dim + 2 * i + 1)] = std::cos(angle);
    }
  }
  return Tensor::from({n, dim}, std::move(out));
}

// ----- misc -------------------------------------------------------------------

inline Tensor gaussian_sample(Shape shape, Rng& rng, real stdev = 1.0, real mean = 0.0) {
  return Tensor::randn(std::move(shape), rng, stdev, mean);
}

// Argmax along `axis`, ties to the lowest index. Result is laid out in the
// row-major order of the remaining axes.
inline std::vector<int64_t> argmax_axis(const Tensor& a, int64_t axis) {
  const Shape& s = a.shape();
  if (axis < 0) axis += a.ndim();
  if (axis < 0 || axis >= a.ndim()) throw ShapeError("argmax_axis: axis out of range");
  const int64_t n = s[static_cast<size_t>(axis)];
  if (n == 0) throw ShapeError("argmax_axis: empty axis");
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < a.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
  const auto& v = a.vals();
  std::vector<int64_t> out(static_cast<size_t>(outer * inner), 0);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      real best = v[static_cast<size_t>(o * n * inner + i)];
      int64_t arg = 0;
      for (int64_t k = 1; k < n; ++k) {
        const real x = v[static_cast<size_t>((o * n + k) * inner + i)];
        if (x > best) {
          best = x;
          arg = k;
        }
      }
      out[static_cast<size_t>(o * inner + i)] = arg;
    }
  return out;
}

}  // namespace spectralx
