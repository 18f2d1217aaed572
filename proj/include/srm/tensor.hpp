#pragma once

// Dense double-precision tensors with tape-free reverse-mode autodiff.
//
// Every op result keeps shared handles to its inputs plus a closure that
// pushes the output gradient back to them. backward() on a scalar walks the
// graph in reverse topological order. Graph recording is skipped when no
// input requires a gradient or a NoGradGuard is alive on the thread.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace srm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    node_->value.assign(numel_of(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (values.size() != numel_of(shape)) {
      throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                  " values do not fill shape " + shape_str(shape));
    }
    node_->value = std::move(values);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  /// Direct mutable access; used for parameter updates outside the graph.
  std::span<double> mutable_values() { return node_->value; }
  const std::vector<double>& vec() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const {
    if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  std::span<const double> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  /// A copy of the values with no history.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  void backward() const {
    if (numel() != 1) throw std::invalid_argument("backward() requires a scalar output");
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        detail::Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
  }

  /// Drops recorded history below this tensor (keeps values).
  void release_graph() {
    node_->parents.clear();
    node_->backward_fn = nullptr;
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds an op result; records history only when some input needs it.
inline Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                          std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (no_grad_depth == 0) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& t : inputs) n->parents.push_back(t.node());
      n->backward_fn = std::move(fn);
    }
  }
  return Tensor::from_node(std::move(n));
}

inline Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (no_grad_depth == 0) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& t : inputs) n->parents.push_back(t.node());
      n->backward_fn = std::move(fn);
    }
  }
  return Tensor::from_node(std::move(n));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

inline bool wants(const std::shared_ptr<Node>& n) { return n->requires_grad; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class F, class DF>
Tensor map_unary(const Tensor& x, F f, DF df) {
  std::vector<double> y(x.numel());
  const auto& xv = x.vec();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  auto xn = x.node();
  return detail::make_result(x.shape(), std::move(y), {x}, [xn, df](detail::Node& out) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * df(xn->value[i], out.value[i]);
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.vec()[i] + b.vec()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result(a.shape(), std::move(y), {a, b}, [an, bn](detail::Node& out) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.vec()[i] - b.vec()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result(a.shape(), std::move(y), {a, b}, [an, bn](detail::Node& out) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.vec()[i] * b.vec()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result(a.shape(), std::move(y), {a, b}, [an, bn](detail::Node& out) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * an->value[i];
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "div");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.vec()[i] / b.vec()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result(a.shape(), std::move(y), {a, b}, [an, bn](detail::Node& out) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] / bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[i] * out.value[i] / bn->value[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double c) {
  return map_unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}
inline Tensor add_scalar(const Tensor& x, double c) {
  return map_unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}
inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }
inline Tensor square(const Tensor& x) {
  return map_unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}
inline Tensor exp(const Tensor& x) {
  return map_unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& x) {
  return map_unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
inline Tensor sqrt(const Tensor& x) {
  return map_unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}
inline Tensor tanh(const Tensor& x) {
  return map_unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}
inline Tensor sigmoid(const Tensor& x) {
  return map_unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}
inline Tensor silu(const Tensor& x) {
  return map_unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}
inline Tensor gelu(const Tensor& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return map_unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v))); },
      [](double v, double) {
        const double u = k * (v + 0.044715 * v * v * v);
        const double th = std::tanh(u);
        const double du = k * (1.0 + 3.0 * 0.044715 * v * v);
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
      });
}
/// Gradient passes only strictly inside (lo, hi).
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return map_unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}
/// sqrt(x^2 + eps); a smooth |x|.
inline Tensor smooth_abs(const Tensor& x, double eps = 1e-12) {
  return map_unary(
      x, [eps](double v) { return std::sqrt(v * v + eps); }, [](double v, double y) { return v / y; });
}

// Broadcast `v` over the leading axes of `x`; v's shape must equal x's trailing dims.
inline Tensor add_trailing(const Tensor& x, const Tensor& v) {
  const std::size_t n = v.numel();
  if (n == 0 || x.numel() % n != 0 || v.rank() > x.rank() ||
      !std::equal(v.shape().rbegin(), v.shape().rend(), x.shape().rbegin())) {
    throw std::invalid_argument("add_trailing: " + shape_str(v.shape()) + " does not trail " + shape_str(x.shape()));
  }
  std::vector<double> y(x.vec());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += v.vec()[i % n];
  auto xn = x.node(), vn = v.node();
  return detail::make_result(x.shape(), std::move(y), {x, v}, [xn, vn, n](detail::Node& out) {
    if (xn->requires_grad) {
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    }
    if (vn->requires_grad) {
      auto& g = vn->ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i % n] += out.grad[i];
    }
  });
}

inline Tensor mul_trailing(const Tensor& x, const Tensor& v) {
  const std::size_t n = v.numel();
  if (n == 0 || x.numel() % n != 0 || v.rank() > x.rank() ||
      !std::equal(v.shape().rbegin(), v.shape().rend(), x.shape().rbegin())) {
    throw std::invalid_argument("mul_trailing: " + shape_str(v.shape()) + " does not trail " + shape_str(x.shape()));
  }
  std::vector<double> y(x.vec());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= v.vec()[i % n];
  auto xn = x.node(), vn = v.node();
  return detail::make_result(x.shape(), std::move(y), {x, v}, [xn, vn, n](detail::Node& out) {
    if (xn->requires_grad) {
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * vn->value[i % n];
    }
    if (vn->requires_grad) {
      auto& g = vn->ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i % n] += out.grad[i] * xn->value[i];
    }
  });
}

/// x * s where s is a one-element tensor.
inline Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw std::invalid_argument("mul_scalar: scale must have one element");
  const double c = s[0];
  std::vector<double> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.vec()[i] * c;
  auto xn = x.node(), sn = s.node();
  return detail::make_result(x.shape(), std::move(y), {x, s}, [xn, sn](detail::Node& out) {
    if (xn->requires_grad) {
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * sn->value[0];
    }
    if (sn->requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < out.grad.size(); ++i) acc += out.grad[i] * xn->value[i];
      sn->ensure_grad()[0] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.vec()) acc += v;
  auto xn = x.node();
  return detail::make_result(Shape{1}, {acc}, {x}, [xn](detail::Node& out) {
    auto& g = xn->ensure_grad();
    for (auto& gi : g) gi += out.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Sum over one axis; the axis is removed from the shape (rank-1 input gives [1]).
inline Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw std::invalid_argument("sum_axis: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape os;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) os.push_back(s[i]);
  if (os.empty()) os.push_back(1);
  std::vector<double> y(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += x.vec()[(o * len + k) * inner + i];
  auto xn = x.node();
  return detail::make_result(os, std::move(y), {x}, [xn, outer, inner, len](detail::Node& out) {
    auto& g = xn->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t i = 0; i < inner; ++i) g[(o * len + k) * inner + i] += out.grad[o * inner + i];
  });
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  auto xn = x.node();
  return detail::make_result(std::move(shape), x.vec(), {x}, [xn](detail::Node& out) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
  });
}

/// General axis permutation: output axis i is input axis perm[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  if (perm.size() != r) throw std::invalid_argument("permute: rank mismatch");
  Shape os(r);
  std::vector<std::size_t> in_stride(r, 1), src_stride(r);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  for (std::size_t i = 0; i < r; ++i) {
    os[i] = s.at(perm[i]);
    src_stride[i] = in_stride[perm[i]];
  }
  const std::size_t n = x.numel();
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * src_stride[i];
    map[o] = src;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < os[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> y(n);
  for (std::size_t o = 0; o < n; ++o) y[o] = x.vec()[map[o]];
  auto xn = x.node();
  return detail::make_result(os, std::move(y), {x}, [xn, map = std::move(map)](detail::Node& out) {
    auto& g = xn->ensure_grad();
    for (std::size_t o = 0; o < map.size(); ++o) g[map[o]] += out.grad[o];
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw std::invalid_argument("concat: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::size_t total = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) throw std::invalid_argument("concat: incompatible " + shape_str(s) + " with " + shape_str(s0));
    lens.push_back(s[axis]);
    total += s[axis];
  }
  Shape os = s0;
  os[axis] = total;
  std::vector<double> y(outer * total * inner);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = parts[p].vec();
    const std::size_t chunk = lens[p] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.begin() + o * chunk, chunk, y.begin() + (o * total + off) * inner);
    off += lens[p];
  }
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result(os, std::move(y), parts, [nodes, lens, outer, inner, total](detail::Node& out) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      const std::size_t chunk = lens[p] * inner;
      if (nodes[p]->requires_grad) {
        auto& g = nodes[p]->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += out.grad[(o * total + off) * inner + i];
      }
      off += lens[p];
    }
  });
}

inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& s = x.shape();
  if (axis >= s.size() || start + len > s[axis]) {
    throw std::invalid_argument("slice: [" + std::to_string(start) + ", +" + std::to_string(len) +
                                ") out of range for " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t full = s[axis];
  Shape os = s;
  os[axis] = len;
  std::vector<double> y(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.vec().begin() + (o * full + start) * inner, len * inner, y.begin() + o * len * inner);
  auto xn = x.node();
  return detail::make_result(os, std::move(y), {x}, [xn, outer, inner, full, start, len](detail::Node& out) {
    auto& g = xn->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < len * inner; ++i) g[(o * full + start) * inner + i] += out.grad[o * len * inner + i];
  });
}

/// Selects entries along axis 0; indices may repeat.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  const std::size_t n0 = x.dim(0);
  const std::size_t row = x.numel() / n0;
  Shape os = x.shape();
  os[0] = rows.size();
  std::vector<double> y(rows.size() * row);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n0) throw std::invalid_argument("gather_rows: index out of range");
    std::copy_n(x.vec().begin() + rows[r] * row, row, y.begin() + r * row);
  }
  auto xn = x.node();
  return detail::make_result(os, std::move(y), {x}, [xn, rows, row](detail::Node& out) {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t i = 0; i < row; ++i) g[rows[r] * row + i] += out.grad[r * row + i];
  });
}

/// y[..., j] = x[..., idx[j]] along the last axis.
inline Tensor take_lastdim(const Tensor& x, const std::vector<std::size_t>& idx) {
  const std::size_t n = x.shape().back(), rows = x.numel() / n, m = idx.size();
  for (std::size_t j : idx)
    if (j >= n) throw std::invalid_argument("take_lastdim: index out of range");
  Shape os = x.shape();
  os.back() = m;
  std::vector<double> y(rows * m);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < m; ++j) y[r * m + j] = x.vec()[r * n + idx[j]];
  auto xn = x.node();
  return detail::make_result(os, std::move(y), {x}, [xn, idx, n, m, rows](detail::Node& out) {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < m; ++j) g[r * n + idx[j]] += out.grad[r * m + j];
  });
}

/// Subtracts the mean of each last-axis row.
inline Tensor center_lastdim(const Tensor& x) {
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  std::vector<double> y(x.vec());
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += y[r * n + j];
    mu /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] -= mu;
  }
  auto xn = x.node();
  return detail::make_result(x.shape(), std::move(y), {x}, [xn, n, rows](detail::Node& out) {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double mu = 0.0;
      for (std::size_t j = 0; j < n; ++j) mu += out.grad[r * n + j];
      mu /= static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += out.grad[r * n + j] - mu;
    }
  });
}

/// Repeats x n times along a new leading axis.
inline Tensor expand_leading(const Tensor& x, std::size_t n) {
  Shape os{n};
  os.insert(os.end(), x.shape().begin(), x.shape().end());
  const std::size_t m = x.numel();
  std::vector<double> y(n * m);
  for (std::size_t k = 0; k < n; ++k) std::copy(x.vec().begin(), x.vec().end(), y.begin() + k * m);
  auto xn = x.node();
  return detail::make_result(os, std::move(y), {x}, [xn, n, m](detail::Node& out) {
    auto& g = xn->ensure_grad();
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < m; ++i) g[i] += out.grad[k * m + i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {
// c[M,N] += a[M,K] * b[K,N]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    double* ci = c + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double aik = a[i * K + k];
      if (aik == 0.0) continue;
      const double* bk = b + k * N;
      for (std::size_t j = 0; j < N; ++j) ci[j] += aik * bk[j];
    }
  }
}
// c[M,N] += a[M,K] * b[N,K]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* ai = a + i * K;
    for (std::size_t j = 0; j < N; ++j) {
      const double* bj = b + j * K;
      double acc = 0.0;
      for (std::size_t k = 0; k < K; ++k) acc += ai[k] * bj[k];
      c[i * N + j] += acc;
    }
  }
}
// c[K,N] += a[M,K]^T * b[M,N]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* bi = b + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double aik = a[i * K + k];
      if (aik == 0.0) continue;
      double* ck = c + k * N;
      for (std::size_t j = 0; j < N; ++j) ck[j] += aik * bi[j];
    }
  }
}
}  // namespace detail

/// x[..., K] * w[K, N] (+ b[N]) treating every leading index as a row.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {}) {
  if (w.rank() != 2 || x.shape().back() != w.dim(0)) {
    throw std::invalid_argument("linear: " + shape_str(x.shape()) + " times " + shape_str(w.shape()));
  }
  const std::size_t K = w.dim(0), N = w.dim(1), M = x.numel() / K;
  const bool has_bias = b.defined();
  if (has_bias && b.numel() != N) throw std::invalid_argument("linear: bias size mismatch");
  Shape os = x.shape();
  os.back() = N;
  std::vector<double> y(M * N, 0.0);
  if (has_bias)
    for (std::size_t i = 0; i < M; ++i) std::copy(b.vec().begin(), b.vec().end(), y.begin() + i * N);
  detail::gemm_nn(x.vec().data(), w.vec().data(), y.data(), M, K, N);
  auto xn = x.node(), wn = w.node();
  auto bn = has_bias ? b.node() : nullptr;
  auto fn = [xn, wn, bn, M, K, N](detail::Node& out) {
    if (xn->requires_grad) detail::gemm_nt(out.grad.data(), wn->value.data(), xn->ensure_grad().data(), M, N, K);
    if (wn->requires_grad) detail::gemm_tn(xn->value.data(), out.grad.data(), wn->ensure_grad().data(), M, K, N);
    if (bn && bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) g[j] += out.grad[i * N + j];
    }
  };
  if (has_bias) return detail::make_result(os, std::move(y), {x, w, b}, fn);
  return detail::make_result(os, std::move(y), {x, w}, fn);
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2) throw std::invalid_argument("matmul: lhs must be rank 2");
  return linear(a, b);
}

/// Batched a[B,M,K] * b[B,K,N].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw std::invalid_argument("bmm: " + shape_str(a.shape()) + " times " + shape_str(b.shape()));
  }
  const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  std::vector<double> y(B * M * N, 0.0);
  for (std::size_t i = 0; i < B; ++i)
    detail::gemm_nn(a.vec().data() + i * M * K, b.vec().data() + i * K * N, y.data() + i * M * N, M, K, N);
  auto an = a.node(), bn = b.node();
  return detail::make_result(Shape{B, M, N}, std::move(y), {a, b}, [an, bn, B, M, K, N](detail::Node& out) {
    for (std::size_t i = 0; i < B; ++i) {
      const double* go = out.grad.data() + i * M * N;
      if (an->requires_grad)
        detail::gemm_nt(go, bn->value.data() + i * K * N, an->ensure_grad().data() + i * M * K, M, N, K);
      if (bn->requires_grad)
        detail::gemm_tn(an->value.data() + i * M * K, go, bn->ensure_grad().data() + i * K * N, M, K, N);
    }
  });
}

/// Batched a[B,M,K] * b[B,N,K]^T.
inline Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
    throw std::invalid_argument("bmm_nt: " + shape_str(a.shape()) + " times " + shape_str(b.shape()) + "^T");
  }
  const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(1);
  std::vector<double> y(B * M * N, 0.0);
  for (std::size_t i = 0; i < B; ++i)
    detail::gemm_nt(a.vec().data() + i * M * K, b.vec().data() + i * N * K, y.data() + i * M * N, M, K, N);
  auto an = a.node(), bn = b.node();
  return detail::make_result(Shape{B, M, N}, std::move(y), {a, b}, [an, bn, B, M, K, N](detail::Node& out) {
    for (std::size_t i = 0; i < B; ++i) {
      const double* go = out.grad.data() + i * M * N;
      if (an->requires_grad)
        detail::gemm_nn(go, bn->value.data() + i * N * K, an->ensure_grad().data() + i * M * K, M, N, K);
      if (bn->requires_grad)
        detail::gemm_tn(go, an->value.data() + i * M * K, bn->ensure_grad().data() + i * N * K, M, N, K);
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

inline Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  std::vector<double> y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.vec().data() + r * n;
    double* yi = y.data() + r * n;
    const double mx = *std::max_element(xi, xi + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (yi[j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yi[j] /= z;
  }
  auto xn = x.node();
  return detail::make_result(x.shape(), std::move(y), {x}, [xn, n, rows](detail::Node& out) {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yi = out.value.data() + r * n;
      const double* gy = out.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * yi[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += yi[j] * (gy[j] - dot);
    }
  });
}

/// Layer norm over the last axis with elementwise gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  if (gain.numel() != n || bias.numel() != n) throw std::invalid_argument("layer_norm: parameter size mismatch");
  std::vector<double> y(x.numel()), xhat(x.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.vec().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xi[j] - mu) * rstd[r];
      y[r * n + j] = xhat[r * n + j] * gain.vec()[j] + bias.vec()[j];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return detail::make_result(
      x.shape(), std::move(y), {x, gain, bias},
      [xn, gn, bn, n, rows, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& out) {
        if (gn->requires_grad || bn->requires_grad) {
          auto& gg = gn->ensure_grad();
          auto& gb = bn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) {
              gg[j] += out.grad[r * n + j] * xhat[r * n + j];
              gb[j] += out.grad[r * n + j];
            }
        }
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = out.grad[r * n + j] * gn->value[j];
            m1 += d;
            m2 += d * xhat[r * n + j];
          }
          m1 *= inv_n;
          m2 *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = out.grad[r * n + j] * gn->value[j];
            g[r * n + j] += rstd[r] * (d - m1 - xhat[r * n + j] * m2);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Token-grid resampling. Tokens are laid out [B, H*W, C] in row-major (y, x).

inline Tensor avg_pool_tokens(const Tensor& x, std::size_t h, std::size_t w) {
  if (x.rank() != 3 || x.dim(1) != h * w || h % 2 || w % 2) {
    throw std::invalid_argument("avg_pool_tokens: bad grid for " + shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), C = x.dim(2), h2 = h / 2, w2 = w / 2;
  std::vector<double> y(B * h2 * w2 * C, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double* src = x.vec().data() + (b * h * w + i * w + j) * C;
        double* dst = y.data() + (b * h2 * w2 + (i / 2) * w2 + j / 2) * C;
        for (std::size_t c = 0; c < C; ++c) dst[c] += 0.25 * src[c];
      }
  auto xn = x.node();
  return detail::make_result(Shape{B, h2 * w2, C}, std::move(y), {x}, [xn, B, C, h, w, h2, w2](detail::Node& out) {
    auto& g = xn->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
          for (std::size_t c = 0; c < C; ++c)
            g[(b * h * w + i * w + j) * C + c] += 0.25 * out.grad[(b * h2 * w2 + (i / 2) * w2 + j / 2) * C + c];
  });
}

inline Tensor upsample_tokens(const Tensor& x, std::size_t h, std::size_t w) {
  if (x.rank() != 3 || x.dim(1) != h * w) throw std::invalid_argument("upsample_tokens: bad grid");
  const std::size_t B = x.dim(0), C = x.dim(2), H = 2 * h, W = 2 * w;
  std::vector<double> y(B * H * W * C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        std::copy_n(x.vec().data() + (b * h * w + (i / 2) * w + j / 2) * C, C, y.data() + (b * H * W + i * W + j) * C);
  auto xn = x.node();
  return detail::make_result(Shape{B, H * W, C}, std::move(y), {x}, [xn, B, C, h, w, H, W](detail::Node& out) {
    auto& g = xn->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t c = 0; c < C; ++c)
            g[(b * h * w + (i / 2) * w + j / 2) * C + c] += out.grad[(b * H * W + i * W + j) * C + c];
  });
}

// ---------------------------------------------------------------------------
// Convenience

inline Tensor mse(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }

inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.vec().begin(), t.vec().end(), [](double v) { return std::isfinite(v); });
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace srm
