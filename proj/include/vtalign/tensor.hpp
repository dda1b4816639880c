#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
// Graphs are built define-by-run: every operation returns a fresh node that
// remembers its parents and how to push gradients back to them. backward()
// replays the recorded tape once, in reverse topological order.
//
// All math runs in 64-bit floats. Storage-only 32-bit conversion lives in
// tensor_io.hpp, never here.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace vtalign {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until backward (or an accumulation) touches it
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // pulls this->grad into the parents' grads
  bool requires_grad = false;
  std::string name;
};

inline std::vector<double>& ensure_grad(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

// Smallest distance to a subgradient kink (relu/clamp switch point) observed
// since the last reset. grad_check reads this to reject sample points where
// central differences would straddle a hinge.
struct KinkStats {
  double min_margin = std::numeric_limits<double>::infinity();
};

inline KinkStats& kink_stats() {
  thread_local KinkStats stats;
  return stats;
}

inline void note_kink_margin(double margin) {
  KinkStats& s = kink_stats();
  if (margin < s.min_margin) s.min_margin = margin;
}

}  // namespace detail

inline void reset_kink_stats() {
  detail::kink_stats().min_margin = std::numeric_limits<double>::infinity();
}
inline double min_kink_margin() { return detail::kink_stats().min_margin; }

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::vector<double> data(numel(shape), v);
    return from_data(std::move(shape), std::move(data), requires_grad);
  }

  // Rank-0 tensor holding one element.
  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data(Shape{}, std::vector<double>{v}, requires_grad);
  }

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    const std::size_t count = numel(shape);
    if (data.empty()) data.assign(count, 0.0);
    if (data.size() != count) {
      throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  const std::vector<double>& values() const { return node_->value; }

  // Mutable access is a leaf-only affordance (optimizer updates, finite
  // differences); mutating an interior node would desynchronize the tape.
  std::vector<double>& mutable_values() {
    if (!node_->parents.empty()) {
      throw std::logic_error("Tensor: mutable access to a non-leaf node");
    }
    return node_->value;
  }

  double item() const {
    if (size() != 1) {
      throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(size()) +
                                  " elements, expected 1");
    }
    return node_->value[0];
  }

  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }

  // Empty vector means "never received a gradient" (exact zero).
  const std::vector<double>& grad() const { return node_->grad; }

  std::vector<double> grad_or_zeros() const {
    if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
    return node_->grad;
  }

  void zero_grad() { node_->grad.assign(size(), 0.0); }

  Tensor& set_name(std::string name) {
    node_->name = std::move(name);
    return *this;
  }
  const std::string& name() const { return node_->name; }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& handle() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> n) { return Tensor(std::move(n)); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
};

// Records a new interior node. When no parent carries gradients the edge list
// and closure are dropped so inference graphs stay flat.
inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                      std::function<void(detail::Node&)> backprop) {
  auto n = std::make_shared<detail::Node>();
  if (value.size() != numel(shape)) {
    throw std::logic_error("make_op: value length does not match shape");
  }
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.handle());
    n->backprop = std::move(backprop);
  }
  return Tensor::wrap(std::move(n));
}

// ---------------------------------------------------------------------------
// Tape replay
// ---------------------------------------------------------------------------

// Ordered record of the operations reachable from a root node. The order is a
// topological sort; run_backward replays it in reverse, visiting each node
// exactly once.
class GradTape {
 public:
  explicit GradTape(const Tensor& root) : root_(root.handle()) {
    std::unordered_set<detail::Node*> visited;
    // Iterative post-order DFS over parent edges.
    struct Frame {
      detail::Node* node;
      std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root_.get(), 0});
    visited.insert(root_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        detail::Node* p = f.node->parents[f.next_parent++].get();
        if (visited.insert(p).second) stack.push_back({p, 0});
      } else {
        order_.push_back(f.node);
        stack.pop_back();
      }
    }
  }

  const std::vector<detail::Node*>& order() const { return order_; }

  // Seeds the root with d(root)/d(root) = 1 and pushes gradients backward.
  // Gradients accumulate into leaf buffers until zero_grad is called on them.
  void run_backward() {
    detail::ensure_grad(*root_);
    std::fill(root_->grad.begin(), root_->grad.end(), 0.0);
    root_->grad[0] = 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      detail::Node* n = *it;
      if (!n->requires_grad || !n->backprop) continue;
      if (n->grad.empty()) continue;  // no gradient reached this node
      n->backprop(*n);
    }
  }

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node*> order_;
};

inline void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  }
  GradTape tape(loss);
  tape.run_backward();
}

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

namespace detail {

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

enum class Eltwise { add, sub, mul };

inline Tensor elementwise(const Tensor& a, const Tensor& b, Eltwise op) {
  detail::check_same_shape("elementwise", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  switch (op) {
    case Eltwise::add:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
      break;
    case Eltwise::sub:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
      break;
    case Eltwise::mul:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
      break;
  }
  detail::Node* an = a.node();
  detail::Node* bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn, op](detail::Node& o) {
    const auto& g = o.grad;
    switch (op) {
      case Eltwise::add:
        if (an->requires_grad) {
          auto& ga = detail::ensure_grad(*an);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (bn->requires_grad) {
          auto& gb = detail::ensure_grad(*bn);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
        break;
      case Eltwise::sub:
        if (an->requires_grad) {
          auto& ga = detail::ensure_grad(*an);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (bn->requires_grad) {
          auto& gb = detail::ensure_grad(*bn);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
        break;
      case Eltwise::mul:
        if (an->requires_grad) {
          auto& ga = detail::ensure_grad(*an);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->value[i];
        }
        if (bn->requires_grad) {
          auto& gb = detail::ensure_grad(*bn);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->value[i];
        }
        break;
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, Eltwise::add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, Eltwise::sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, Eltwise::mul); }

inline Tensor scale(const Tensor& x, double k) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * k;
  detail::Node* xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn, k](detail::Node& o) {
    auto& gx = detail::ensure_grad(*xn);
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * k;
  });
}

inline Tensor add_const(const Tensor& x, double k) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + k;
  detail::Node* xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn](detail::Node& o) {
    auto& gx = detail::ensure_grad(*xn);
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
  });
}

enum class Act { sigmoid, tanh, relu };

inline Tensor pointwise(const Tensor& x, Act fn) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  switch (fn) {
    case Act::sigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = xv[i];
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      }
      break;
    case Act::tanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
      break;
    case Act::relu:
      for (std::size_t i = 0; i < out.size(); ++i) {
        detail::note_kink_margin(std::abs(xv[i]));
        out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
      }
      break;
  }
  detail::Node* xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn, fn](detail::Node& o) {
    auto& gx = detail::ensure_grad(*xn);
    const auto& g = o.grad;
    switch (fn) {
      case Act::sigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double y = o.value[i];
          gx[i] += g[i] * y * (1.0 - y);
        }
        break;
      case Act::tanh:
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double y = o.value[i];
          gx[i] += g[i] * (1.0 - y * y);
        }
        break;
      case Act::relu:
        // subgradient at 0 is 0
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (xn->value[i] > 0.0) gx[i] += g[i];
        }
        break;
    }
  });
}

inline Tensor sigmoid(const Tensor& x) { return pointwise(x, Act::sigmoid); }
inline Tensor tanh(const Tensor& x) { return pointwise(x, Act::tanh); }
inline Tensor relu(const Tensor& x) { return pointwise(x, Act::relu); }

inline Tensor clamp_min(const Tensor& x, double lo) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    detail::note_kink_margin(std::abs(xv[i] - lo));
    out[i] = xv[i] > lo ? xv[i] : lo;
  }
  detail::Node* xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn, lo](detail::Node& o) {
    auto& gx = detail::ensure_grad(*xn);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (xn->value[i] > lo) gx[i] += o.grad[i];
    }
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  }
  detail::Node* xn = x.node();
  return make_op(std::move(shape), x.values(), {x}, [xn](detail::Node& o) {
    auto& gx = detail::ensure_grad(*xn);
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
  });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = &bv[p * m];
      double* orow = &out[i * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  detail::Node* an = a.node();
  detail::Node* bn = b.node();
  return make_op({n, m}, std::move(out), {a, b}, [an, bn, n, k, m](detail::Node& o) {
    const auto& g = o.grad;
    if (an->requires_grad) {
      auto& ga = detail::ensure_grad(*an);
      // dA = g . B^T
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = &g[i * m];
          const double* brow = &bn->value[p * m];
          for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (bn->requires_grad) {
      auto& gb = detail::ensure_grad(*bn);
      // dB = A^T . g
      for (std::size_t i = 0; i < n; ++i) {
        const double* arow = &an->value[i * k];
        const double* grow = &g[i * m];
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = arow[p];
          double* gbrow = &gb[p * m];
          for (std::size_t j = 0; j < m; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

inline Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) {
    throw std::invalid_argument("transpose2d: expected rank 2, got " + shape_str(a.shape()));
  }
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  const auto& av = a.values();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = av[i * m + j];
  detail::Node* an = a.node();
  return make_op({m, n}, std::move(out), {a}, [an, n, m](detail::Node& o) {
    auto& ga = detail::ensure_grad(*an);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += o.grad[j * n + i];
  });
}

// X[N,M] + v[M] broadcast over rows.
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1 || x.shape()[1] != v.shape()[0]) {
    throw std::invalid_argument("add_rowvec: incompatible shapes " + shape_str(x.shape()) +
                                " and " + shape_str(v.shape()));
  }
  const std::size_t n = x.shape()[0], m = x.shape()[1];
  const auto& xv = x.values();
  const auto& vv = v.values();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = xv[i * m + j] + vv[j];
  detail::Node* xn = x.node();
  detail::Node* vn = v.node();
  return make_op({n, m}, std::move(out), {x, v}, [xn, vn, n, m](detail::Node& o) {
    if (xn->requires_grad) {
      auto& gx = detail::ensure_grad(*xn);
      for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
    }
    if (vn->requires_grad) {
      auto& gv = detail::ensure_grad(*vn);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gv[j] += o.grad[i * m + j];
    }
  });
}

// x[..., Din] . W[Din, Dout] + b[Dout], applied at every leading-index
// position. Kernel-size-one convolutions are this op over the channel axis.
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) {
    throw std::invalid_argument("affine: weight must be rank 2, got " + shape_str(w.shape()));
  }
  const std::size_t din = w.shape()[0], dout = w.shape()[1];
  if (x.rank() < 1 || x.shape().back() != din) {
    throw std::invalid_argument("affine: trailing axis of x " + shape_str(x.shape()) +
                                " must equal Din=" + std::to_string(din));
  }
  if (b.rank() != 1 || b.shape()[0] != dout) {
    throw std::invalid_argument("affine: bias must be [Dout], got " + shape_str(b.shape()));
  }
  const std::size_t lead = x.size() / din;
  Tensor flat = reshape(x, {lead, din});
  Tensor y = add_rowvec(matmul(flat, w), b);
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(dout);
  return reshape(y, out_shape);
}

enum class Reduce { sum, mean };

// Reduce over the given axes (deduplicated). Result drops the reduced axes.
inline Tensor reduce(const Tensor& x, Reduce op, std::span<const std::size_t> axes) {
  const Shape& xs = x.shape();
  std::vector<bool> reduced(xs.size(), false);
  for (auto a : axes) {
    if (a >= xs.size()) {
      throw std::invalid_argument("reduce: axis " + std::to_string(a) + " out of range for " +
                                  shape_str(xs));
    }
    reduced[a] = true;
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (reduced[i]) {
      count *= xs[i];
    } else {
      out_shape.push_back(xs[i]);
    }
  }
  // Map each input linear index to its output linear index.
  std::vector<std::size_t> in_strides(xs.size(), 1);
  for (std::size_t i = xs.size(); i-- > 1;) in_strides[i - 1] = in_strides[i] * xs[i];
  std::vector<std::size_t> out_strides(out_shape.size(), 1);
  for (std::size_t i = out_shape.size(); i-- > 1;) out_strides[i - 1] = out_strides[i] * out_shape[i];

  const auto& xv = x.values();
  std::vector<double> out(numel(out_shape), 0.0);
  std::vector<std::size_t> out_index_of(xv.size());
  for (std::size_t lin = 0; lin < xv.size(); ++lin) {
    std::size_t rem = lin, oidx = 0, oax = 0;
    for (std::size_t ax = 0; ax < xs.size(); ++ax) {
      const std::size_t coord = rem / in_strides[ax];
      rem %= in_strides[ax];
      if (!reduced[ax]) oidx += coord * out_strides[oax++];
    }
    out_index_of[lin] = oidx;
    out[oidx] += xv[lin];
  }
  const double denom = (op == Reduce::mean) ? static_cast<double>(count) : 1.0;
  if (op == Reduce::mean) {
    for (auto& v : out) v /= denom;
  }
  detail::Node* xn = x.node();
  return make_op(out_shape, std::move(out), {x},
                 [xn, denom, idx = std::move(out_index_of)](detail::Node& o) {
                   auto& gx = detail::ensure_grad(*xn);
                   for (std::size_t lin = 0; lin < gx.size(); ++lin) {
                     gx[lin] += o.grad[idx[lin]] / denom;
                   }
                 });
}

inline Tensor reduce(const Tensor& x, Reduce op, std::initializer_list<std::size_t> axes) {
  std::vector<std::size_t> v(axes);
  return reduce(x, op, std::span<const std::size_t>(v));
}

// Reduce over everything to a rank-0 scalar.
inline Tensor reduce_all(const Tensor& x, Reduce op) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  Tensor r = reduce(x, op, std::span<const std::size_t>(axes));
  return r;
}

inline Tensor reduce_sum(const Tensor& x) { return reduce_all(x, Reduce::sum); }
inline Tensor reduce_mean(const Tensor& x) { return reduce_all(x, Reduce::mean); }

// out = x / max(||x||_2, eps) along one axis, fiber by fiber.
inline Tensor l2_normalize(const Tensor& x, std::size_t axis, double eps = 1e-12) {
  const Shape& xs = x.shape();
  if (axis >= xs.size()) {
    throw std::invalid_argument("l2_normalize: axis " + std::to_string(axis) +
                                " out of range for " + shape_str(xs));
  }
  if (eps <= 0.0) throw std::invalid_argument("l2_normalize: eps must be positive");
  const std::size_t len = xs[axis];
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];
  for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];

  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  std::vector<double> norms(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double ss = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double v = xv[base + k * inner];
        ss += v * v;
      }
      const double n = std::sqrt(ss);
      const double d = n > eps ? n : eps;
      norms[o * inner + i] = n;
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] = xv[base + k * inner] / d;
    }
  }
  detail::Node* xn = x.node();
  return make_op(xs, std::move(out), {x},
                 [xn, len, inner, outer, eps, norms = std::move(norms)](detail::Node& o) {
                   auto& gx = detail::ensure_grad(*xn);
                   for (std::size_t ou = 0; ou < outer; ++ou) {
                     for (std::size_t i = 0; i < inner; ++i) {
                       const std::size_t base = ou * len * inner + i;
                       const double n = norms[ou * inner + i];
                       if (n > eps) {
                         double xg = 0.0;
                         for (std::size_t k = 0; k < len; ++k) {
                           xg += xn->value[base + k * inner] * o.grad[base + k * inner];
                         }
                         const double n3 = n * n * n;
                         for (std::size_t k = 0; k < len; ++k) {
                           const std::size_t p = base + k * inner;
                           gx[p] += o.grad[p] / n - xn->value[p] * xg / n3;
                         }
                       } else {
                         // clamped: denominator is the constant eps
                         for (std::size_t k = 0; k < len; ++k) {
                           const std::size_t p = base + k * inner;
                           gx[p] += o.grad[p] / eps;
                         }
                       }
                     }
                   }
                 });
}

// s = <a,b> / (max(||a||,eps) * max(||b||,eps)), rank-0 result.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = 1e-12) {
  if (a.rank() != 1 || b.rank() != 1 || a.size() != b.size()) {
    throw std::invalid_argument("cosine_similarity: expected equal-length vectors, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  if (eps <= 0.0) throw std::invalid_argument("cosine_similarity: eps must be positive");
  const auto& av = a.values();
  const auto& bv = b.values();
  const std::size_t c = av.size();
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    dot += av[i] * bv[i];
    na2 += av[i] * av[i];
    nb2 += bv[i] * bv[i];
  }
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  const double da = na > eps ? na : eps;
  const double db = nb > eps ? nb : eps;
  const double s = dot / (da * db);
  detail::Node* an = a.node();
  detail::Node* bn = b.node();
  return make_op(Shape{}, {s}, {a, b}, [an, bn, c, na, nb, da, db, s, eps](detail::Node& o) {
    const double g = o.grad[0];
    if (an->requires_grad) {
      auto& ga = detail::ensure_grad(*an);
      for (std::size_t i = 0; i < c; ++i) {
        double d = bn->value[i] / (da * db);
        if (na > eps) d -= s * an->value[i] / (na * na);
        ga[i] += g * d;
      }
    }
    if (bn->requires_grad) {
      auto& gb = detail::ensure_grad(*bn);
      for (std::size_t i = 0; i < c; ++i) {
        double d = an->value[i] / (da * db);
        if (nb > eps) d -= s * bn->value[i] / (nb * nb);
        gb[i] += g * d;
      }
    }
  });
}

// Cosine similarity between every row of V[P,C] and the vector c[C] in one
// node; the per-voxel scoring path would otherwise dominate the tape.
inline Tensor cosine_rows(const Tensor& v, const Tensor& c, double eps = 1e-12) {
  if (v.rank() != 2 || c.rank() != 1 || v.shape()[1] != c.shape()[0]) {
    throw std::invalid_argument("cosine_rows: incompatible shapes " + shape_str(v.shape()) +
                                " and " + shape_str(c.shape()));
  }
  if (eps <= 0.0) throw std::invalid_argument("cosine_rows: eps must be positive");
  const std::size_t p = v.shape()[0], cdim = v.shape()[1];
  const auto& vv = v.values();
  const auto& cv = c.values();
  double nc2 = 0.0;
  for (std::size_t i = 0; i < cdim; ++i) nc2 += cv[i] * cv[i];
  const double nc = std::sqrt(nc2);
  const double dc = nc > eps ? nc : eps;
  std::vector<double> out(p), rnorm(p);
  for (std::size_t r = 0; r < p; ++r) {
    const double* row = &vv[r * cdim];
    double dot = 0.0, nr2 = 0.0;
    for (std::size_t i = 0; i < cdim; ++i) {
      dot += row[i] * cv[i];
      nr2 += row[i] * row[i];
    }
    const double nr = std::sqrt(nr2);
    rnorm[r] = nr;
    out[r] = dot / ((nr > eps ? nr : eps) * dc);
  }
  detail::Node* vn = v.node();
  detail::Node* cn = c.node();
  return make_op({p}, std::move(out), {v, c},
                 [vn, cn, p, cdim, nc, dc, eps, rnorm = std::move(rnorm)](detail::Node& o) {
                   for (std::size_t r = 0; r < p; ++r) {
                     const double g = o.grad[r];
                     if (g == 0.0) continue;
                     const double s = o.value[r];
                     const double nr = rnorm[r];
                     const double dr = nr > eps ? nr : eps;
                     const double* row = &vn->value[r * cdim];
                     if (vn->requires_grad) {
                       auto& gv = detail::ensure_grad(*vn);
                       double* grow = &gv[r * cdim];
                       for (std::size_t i = 0; i < cdim; ++i) {
                         double d = cn->value[i] / (dr * dc);
                         if (nr > eps) d -= s * row[i] / (nr * nr);
                         grow[i] += g * d;
                       }
                     }
                     if (cn->requires_grad) {
                       auto& gc = detail::ensure_grad(*cn);
                       for (std::size_t i = 0; i < cdim; ++i) {
                         double d = row[i] / (dr * dc);
                         if (nc > eps) d -= s * cn->value[i] / (nc * nc);
                         gc[i] += g * d;
                       }
                     }
                   }
                 });
}

// Softmax over every element of the tensor with temperature beta, stabilized
// by max subtraction. The exp sum is accumulated in sorted order so that
// permuting the input positions permutes the output bitwise-identically.
inline Tensor softmax_positions(const Tensor& scores, double beta) {
  if (beta <= 0.0) {
    throw std::invalid_argument("softmax_positions: beta must be positive, got " +
                                std::to_string(beta));
  }
  const auto& xv = scores.values();
  if (xv.empty()) throw std::invalid_argument("softmax_positions: empty input");
  const double mx = *std::max_element(xv.begin(), xv.end());
  std::vector<double> ex(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) ex[i] = std::exp((xv[i] - mx) / beta);
  std::vector<double> sorted(ex);
  std::sort(sorted.begin(), sorted.end());
  double sum = 0.0;
  for (double e : sorted) sum += e;
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = ex[i] / sum;
  detail::Node* sn = scores.node();
  return make_op(scores.shape(), std::move(out), {scores}, [sn, beta](detail::Node& o) {
    auto& gs = detail::ensure_grad(*sn);
    double dot = 0.0;
    for (std::size_t i = 0; i < o.grad.size(); ++i) dot += o.grad[i] * o.value[i];
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      gs[i] += o.value[i] * (o.grad[i] - dot) / beta;
    }
  });
}

// Concatenate along one axis; all other extents must agree.
inline Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != bs.size() || axis >= as.size()) {
    throw std::invalid_argument("concat: rank mismatch or bad axis for " + shape_str(as) +
                                " and " + shape_str(bs));
  }
  for (std::size_t i = 0; i < as.size(); ++i) {
    if (i != axis && as[i] != bs[i]) {
      throw std::invalid_argument("concat: non-concat extents differ: " + shape_str(as) + " vs " +
                                  shape_str(bs));
    }
  }
  Shape out_shape = as;
  out_shape[axis] += bs[axis];
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < as.size(); ++i) inner *= as[i];
  for (std::size_t i = 0; i < axis; ++i) outer *= as[i];
  const std::size_t awidth = as[axis] * inner, bwidth = bs[axis] * inner;
  const auto& avals = a.values();
  const auto& bvals = b.values();
  std::vector<double> out(numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(&avals[o * awidth], awidth, &out[o * (awidth + bwidth)]);
    std::copy_n(&bvals[o * bwidth], bwidth, &out[o * (awidth + bwidth) + awidth]);
  }
  detail::Node* an = a.node();
  detail::Node* bn = b.node();
  return make_op(std::move(out_shape), std::move(out), {a, b},
                 [an, bn, outer, awidth, bwidth](detail::Node& o) {
                   const std::size_t w = awidth + bwidth;
                   if (an->requires_grad) {
                     auto& ga = detail::ensure_grad(*an);
                     for (std::size_t ou = 0; ou < outer; ++ou)
                       for (std::size_t i = 0; i < awidth; ++i)
                         ga[ou * awidth + i] += o.grad[ou * w + i];
                   }
                   if (bn->requires_grad) {
                     auto& gb = detail::ensure_grad(*bn);
                     for (std::size_t ou = 0; ou < outer; ++ou)
                       for (std::size_t i = 0; i < bwidth; ++i)
                         gb[ou * bwidth + i] += o.grad[ou * w + awidth + i];
                   }
                 });
}

// Channel concatenation: [Ca,...] + [Cb,...] -> [Ca+Cb,...].
inline Tensor concat_channels(const Tensor& a, const Tensor& b) { return concat(a, b, 0); }

// Row id of an embedding table; the gradient routes to that row only.
inline Tensor embed_lookup(const Tensor& table, std::size_t id) {
  if (table.rank() != 2) {
    throw std::invalid_argument("embed_lookup: table must be rank 2, got " +
                                shape_str(table.shape()));
  }
  const std::size_t v = table.shape()[0], e = table.shape()[1];
  if (id >= v) {
    throw std::invalid_argument("embed_lookup: id " + std::to_string(id) +
                                " out of range for vocabulary of " + std::to_string(v));
  }
  const auto& tv = table.values();
  std::vector<double> out(tv.begin() + id * e, tv.begin() + (id + 1) * e);
  detail::Node* tn = table.node();
  return make_op({e}, std::move(out), {table}, [tn, id, e](detail::Node& o) {
    auto& gt = detail::ensure_grad(*tn);
    for (std::size_t i = 0; i < e; ++i) gt[id * e + i] += o.grad[i];
  });
}

// Gather rows of X[N,M] by index; backward scatter-adds into the source rows.
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> rows) {
  if (x.rank() != 2) {
    throw std::invalid_argument("gather_rows: expected rank 2, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape()[0], m = x.shape()[1];
  for (auto r : rows) {
    if (r >= n) {
      throw std::invalid_argument("gather_rows: row " + std::to_string(r) + " out of range for " +
                                  shape_str(x.shape()));
    }
  }
  const auto& xv = x.values();
  std::vector<double> out(rows.size() * m);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::copy_n(&xv[rows[k] * m], m, &out[k * m]);
  }
  detail::Node* xn = x.node();
  const std::size_t kcount = rows.size();
  return make_op({kcount, m}, std::move(out), {x}, [xn, m, rows = std::move(rows)](detail::Node& o) {
    auto& gx = detail::ensure_grad(*xn);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      for (std::size_t j = 0; j < m; ++j) gx[rows[k] * m + j] += o.grad[k * m + j];
    }
  });
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// Copy of the values with no tape history; inference paths detach their
// results so finished graphs can be freed.
inline Tensor detach(const Tensor& t) {
  return Tensor::from_data(t.shape(), t.values());
}

}  // namespace vtalign
