#pragma once

// Minimal reverse-mode autodiff over Tensor. Graphs are built eagerly: each
// op computes its forward value at construction and caches it on the node,
// so forward(root) is a lookup and backward(root) walks the cached DAG.
// The op set is deliberately small; there is no broadcasting beyond
// scalar * tensor, callers reshape explicitly.
//
// A graph is confined to one thread between construction and backward().
// Tensors are immutable once built and safe to share read-only.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fedcd/tensor.hpp"

namespace fedcd::ad {

enum class Op {
  Leaf,
  Add,
  Sub,
  Mul,      // elementwise
  MatMul,   // 2-d only
  Relu,
  Exp,
  Log,
  Sum,      // full reduction -> [1]
  Mean,     // full reduction -> [1]
  Softmax,  // along last dimension, max-subtracted
  Reshape,
  Concat,
  ScalarMul,
  Abs,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::MatMul: return "matmul";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Softmax: return "softmax";
    case Op::Reshape: return "reshape";
    case Op::Concat: return "concat";
    case Op::ScalarMul: return "scalar_mul";
    case Op::Abs: return "abs";
  }
  return "?";
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Op op = Op::Leaf;
  Tensor value;
  Tensor grad;  // filled by backward(); same shape as value
  std::vector<NodePtr> inputs;
  double scalar = 0.0;         // ScalarMul coefficient
  std::size_t concat_axis = 0; // Concat only
  bool trainable = false;      // leaves only
};

[[noreturn]] inline void shape_error(Op op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string("autodiff: ") + op_name(op) + " shape mismatch " +
                              shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline NodePtr leaf(Tensor value, bool trainable = false) {
  // Route through the validating constructor: leaves must be finite.
  Tensor checked(value.shape(), value.vec());
  auto n = std::make_shared<Node>();
  n->op = Op::Leaf;
  n->value = std::move(checked);
  n->trainable = trainable;
  return n;
}

inline NodePtr constant(Tensor value) { return leaf(std::move(value), false); }

// Cuts the gradient path: a fresh non-trainable leaf holding the same value.
// The only escape hatch from the finiteness check, since a detached value is
// a computed intermediate, not user input.
inline NodePtr detach(const NodePtr& x) {
  auto n = std::make_shared<Node>();
  n->op = Op::Leaf;
  n->value = x->value;
  n->trainable = false;
  return n;
}

namespace detail {

inline NodePtr make(Op op, std::vector<NodePtr> inputs, Tensor value) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->inputs = std::move(inputs);
  n->value = std::move(value);
  return n;
}

template <class F>
inline NodePtr elementwise_binary(Op op, const NodePtr& a, const NodePtr& b, F f) {
  if (!a->value.same_shape(b->value)) shape_error(op, a->value, b->value);
  std::vector<double> out(a->value.numel());
  const double* pa = a->value.data();
  const double* pb = b->value.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i], pb[i]);
  return make(op, {a, b}, Tensor::raw(a->value.shape(), std::move(out)));
}

template <class F>
inline NodePtr elementwise_unary(Op op, const NodePtr& a, F f) {
  std::vector<double> out(a->value.numel());
  const double* pa = a->value.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i]);
  return make(op, {a}, Tensor::raw(a->value.shape(), std::move(out)));
}

}  // namespace detail

inline NodePtr add(const NodePtr& a, const NodePtr& b) {
  return detail::elementwise_binary(Op::Add, a, b, [](double x, double y) { return x + y; });
}

inline NodePtr sub(const NodePtr& a, const NodePtr& b) {
  return detail::elementwise_binary(Op::Sub, a, b, [](double x, double y) { return x - y; });
}

inline NodePtr mul(const NodePtr& a, const NodePtr& b) {
  return detail::elementwise_binary(Op::Mul, a, b, [](double x, double y) { return x * y; });
}

inline NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  const Tensor& A = a->value;
  const Tensor& B = b->value;
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) shape_error(Op::MatMul, A, B);
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  std::vector<double> out(m * n, 0.0);
  const double* pa = A.data();
  const double* pb = B.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = pa + i * k;
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return detail::make(Op::MatMul, {a, b}, Tensor::raw({m, n}, std::move(out)));
}

inline NodePtr relu(const NodePtr& a) {
  return detail::elementwise_unary(Op::Relu, a, [](double x) { return x > 0.0 ? x : 0.0; });
}

inline NodePtr exp(const NodePtr& a) {
  return detail::elementwise_unary(Op::Exp, a, [](double x) { return std::exp(x); });
}

inline NodePtr log(const NodePtr& a) {
  return detail::elementwise_unary(Op::Log, a, [](double x) { return std::log(x); });
}

inline NodePtr abs(const NodePtr& a) {
  return detail::elementwise_unary(Op::Abs, a, [](double x) { return std::fabs(x); });
}

inline NodePtr sum(const NodePtr& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a->value.numel(); ++i) acc += a->value[i];
  return detail::make(Op::Sum, {a}, Tensor::raw({1}, {acc}));
}

inline NodePtr mean(const NodePtr& a) {
  if (a->value.numel() == 0) throw std::invalid_argument("autodiff: mean of empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < a->value.numel(); ++i) acc += a->value[i];
  return detail::make(Op::Mean, {a}, Tensor::raw({1}, {acc / static_cast<double>(a->value.numel())}));
}

inline NodePtr softmax_lastdim(const NodePtr& a) {
  const Tensor& x = a->value;
  if (x.rank() == 0) throw std::invalid_argument("autodiff: softmax needs rank >= 1");
  const std::size_t d = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* px = x.data() + r * d;
    double* po = out.data() + r * d;
    double mx = px[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, px[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      po[j] = std::exp(px[j] - mx);
      z += po[j];
    }
    for (std::size_t j = 0; j < d; ++j) po[j] /= z;
  }
  return detail::make(Op::Softmax, {a}, Tensor::raw(x.shape(), std::move(out)));
}

inline NodePtr reshape(const NodePtr& a, Shape new_shape) {
  if (shape_numel(new_shape) != a->value.numel())
    throw std::invalid_argument("autodiff: reshape " + shape_str(a->value.shape()) + " -> " +
                                shape_str(new_shape) + " changes element count");
  return detail::make(Op::Reshape, {a}, Tensor::raw(std::move(new_shape), a->value.vec()));
}

inline NodePtr scalar_mul(const NodePtr& a, double s) {
  auto n = detail::elementwise_unary(Op::ScalarMul, a, [s](double x) { return s * x; });
  n->scalar = s;
  return n;
}

inline NodePtr concat(const std::vector<NodePtr>& parts, std::size_t axis = 0) {
  if (parts.empty()) throw std::invalid_argument("autodiff: concat of nothing");
  const Shape& s0 = parts[0]->value.shape();
  if (axis >= s0.size()) throw std::invalid_argument("autodiff: concat axis out of range");
  Shape out_shape = s0;
  std::size_t axis_total = 0;
  for (const auto& p : parts) {
    const Shape& s = p->value.shape();
    if (s.size() != s0.size()) shape_error(Op::Concat, parts[0]->value, p->value);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) shape_error(Op::Concat, parts[0]->value, p->value);
    axis_total += s[axis];
  }
  out_shape[axis] = axis_total;

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

  std::vector<double> out(shape_numel(out_shape));
  const std::size_t out_stride = axis_total * inner;
  std::size_t axis_off = 0;
  for (const auto& p : parts) {
    const std::size_t a = p->value.dim(axis);
    const double* src = p->value.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(src + o * a * inner, src + (o + 1) * a * inner,
                out.data() + o * out_stride + axis_off * inner);
    axis_off += a;
  }
  auto n = detail::make(Op::Concat, parts, Tensor::raw(std::move(out_shape), std::move(out)));
  n->concat_axis = axis;
  return n;
}

// Eager construction already computed every value; forward is a lookup.
inline const Tensor& forward(const NodePtr& root) { return root->value; }

namespace detail {

inline std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // children before parents
}

inline void accumulate_backward(Node* n) {
  const Tensor& g = n->grad;
  switch (n->op) {
    case Op::Leaf:
      break;
    case Op::Add: {
      for (std::size_t i = 0; i < g.numel(); ++i) n->inputs[0]->grad[i] += g[i];
      for (std::size_t i = 0; i < g.numel(); ++i) n->inputs[1]->grad[i] += g[i];
      break;
    }
    case Op::Sub: {
      for (std::size_t i = 0; i < g.numel(); ++i) n->inputs[0]->grad[i] += g[i];
      for (std::size_t i = 0; i < g.numel(); ++i) n->inputs[1]->grad[i] -= g[i];
      break;
    }
    case Op::Mul: {
      const Tensor& a = n->inputs[0]->value;
      const Tensor& b = n->inputs[1]->value;
      for (std::size_t i = 0; i < g.numel(); ++i) n->inputs[0]->grad[i] += g[i] * b[i];
      for (std::size_t i = 0; i < g.numel(); ++i) n->inputs[1]->grad[i] += g[i] * a[i];
      break;
    }
    case Op::MatMul: {
      const Tensor& A = n->inputs[0]->value;
      const Tensor& B = n->inputs[1]->value;
      Tensor& dA = n->inputs[0]->grad;
      Tensor& dB = n->inputs[1]->grad;
      const std::size_t m = A.dim(0), k = A.dim(1), c = B.dim(1);
      // dA = g . B^T ; dB = A^T . g
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g.data() + i * c;
        double* darow = dA.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = B.data() + p * c;
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j) acc += grow[j] * brow[j];
          darow[p] += acc;
        }
        const double* arow = A.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = arow[p];
          double* dbrow = dB.data() + p * c;
          for (std::size_t j = 0; j < c; ++j) dbrow[j] += av * grow[j];
        }
      }
      break;
    }
    case Op::Relu: {
      const Tensor& x = n->inputs[0]->value;
      for (std::size_t i = 0; i < g.numel(); ++i)
        if (x[i] > 0.0) n->inputs[0]->grad[i] += g[i];
      break;
    }
    case Op::Exp: {
      for (std::size_t i = 0; i < g.numel(); ++i) n->inputs[0]->grad[i] += g[i] * n->value[i];
      break;
    }
    case Op::Log: {
      const Tensor& x = n->inputs[0]->value;
      for (std::size_t i = 0; i < g.numel(); ++i) n->inputs[0]->grad[i] += g[i] / x[i];
      break;
    }
    case Op::Sum: {
      const double gv = g[0];
      Tensor& dx = n->inputs[0]->grad;
      for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += gv;
      break;
    }
    case Op::Mean: {
      Tensor& dx = n->inputs[0]->grad;
      const double gv = g[0] / static_cast<double>(dx.numel());
      for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += gv;
      break;
    }
    case Op::Softmax: {
      const Tensor& y = n->value;
      Tensor& dx = n->inputs[0]->grad;
      const std::size_t d = y.dim(y.rank() - 1);
      const std::size_t rows = y.numel() / d;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* py = y.data() + r * d;
        const double* pg = g.data() + r * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += pg[j] * py[j];
        double* pdx = dx.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) pdx[j] += py[j] * (pg[j] - dot);
      }
      break;
    }
    case Op::Reshape: {
      Tensor& dx = n->inputs[0]->grad;
      for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
      break;
    }
    case Op::Concat: {
      const std::size_t axis = n->concat_axis;
      const Shape& os = n->value.shape();
      std::size_t outer = 1, inner = 1;
      for (std::size_t i = 0; i < axis; ++i) outer *= os[i];
      for (std::size_t i = axis + 1; i < os.size(); ++i) inner *= os[i];
      const std::size_t out_stride = os[axis] * inner;
      std::size_t axis_off = 0;
      for (auto& inp : n->inputs) {
        const std::size_t a = inp->value.dim(axis);
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = g.data() + o * out_stride + axis_off * inner;
          double* dst = inp->grad.data() + o * a * inner;
          for (std::size_t i = 0; i < a * inner; ++i) dst[i] += src[i];
        }
        axis_off += a;
      }
      break;
    }
    case Op::ScalarMul: {
      const double s = n->scalar;
      for (std::size_t i = 0; i < g.numel(); ++i) n->inputs[0]->grad[i] += s * g[i];
      break;
    }
    case Op::Abs: {
      const Tensor& x = n->inputs[0]->value;
      for (std::size_t i = 0; i < g.numel(); ++i) {
        // subgradient 0 at exactly 0
        if (x[i] > 0.0)
          n->inputs[0]->grad[i] += g[i];
        else if (x[i] < 0.0)
          n->inputs[0]->grad[i] -= g[i];
      }
      break;
    }
  }
}

}  // namespace detail

using GradientMap = std::unordered_map<const Node*, Tensor>;

// Reverse pass from a scalar root. Adjoints are cached on every node and the
// gradients of trainable leaves are returned keyed by node pointer.
inline GradientMap backward(const NodePtr& root) {
  if (!root->value.is_scalar())
    throw std::invalid_argument("autodiff: backward needs a scalar root, got " +
                                shape_str(root->value.shape()));
  auto order = detail::topo_order(root.get());
  for (Node* n : order) n->grad = Tensor::zeros(n->value.shape());
  root->grad = Tensor::ones(root->value.shape());
  for (auto it = order.rbegin(); it != order.rend(); ++it) detail::accumulate_backward(*it);

  GradientMap grads;
  for (Node* n : order)
    if (n->op == Op::Leaf && n->trainable) grads.emplace(n, n->grad);
  return grads;
}

}  // namespace fedcd::ad
