#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "texbridge/tensor.hpp"

namespace texbridge::ad {

// Reverse-mode autodiff over Tensor<S>. Backward rules are themselves written
// in terms of graph ops, so gradients are Values that can be differentiated
// again (needed for the gradient-penalty term, which differentiates through a
// gradient norm).

template <typename S>
struct Node;
template <typename S>
using Value = std::shared_ptr<Node<S>>;

template <typename S>
struct Node {
  Tensor<S> data;
  bool requires_grad = false;
  std::vector<Value<S>> parents;
  // maps the cotangent of this node to cotangent contributions per parent
  std::function<std::vector<Value<S>>(const Value<S>&)> vjp;
};

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev(grad_enabled_flag()) { grad_enabled_flag() = false; }
  ~NoGradGuard() { grad_enabled_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  bool prev;
};

// forward declarations (backward rules reference ops defined further down)
template <typename S>
Value<S> add(const Value<S>& a, const Value<S>& b);
template <typename S>
Value<S> sub(const Value<S>& a, const Value<S>& b);
template <typename S>
Value<S> mul(const Value<S>& a, const Value<S>& b);
template <typename S>
Value<S> div(const Value<S>& a, const Value<S>& b);
template <typename S>
Value<S> neg(const Value<S>& a);
template <typename S>
Value<S> scale(const Value<S>& a, S s);
template <typename S>
Value<S> reshape(const Value<S>& a, Shape s);
template <typename S>
Value<S> broadcast_to(const Value<S>& a, Shape s);
template <typename S>
Value<S> sum_to(const Value<S>& a, const Shape& target);
template <typename S>
Value<S> sum_axes(const Value<S>& a, std::vector<int> axes);
template <typename S>
Value<S> sum_all(const Value<S>& a);
template <typename S>
Value<S> narrow(const Value<S>& a, int axis, int64_t start, int64_t len);
template <typename S>
Value<S> embed(const Value<S>& a, int axis, int64_t start, int64_t total);
template <typename S>
Value<S> exp(const Value<S>& a);
template <typename S>
Value<S> sigmoid(const Value<S>& a);
template <typename S>
Value<S> rsqrt_eps(const Value<S>& a, S eps);
template <typename S>
Value<S> sqrt_eps(const Value<S>& a, S eps);
template <typename S>
Value<S> matmul(const Value<S>& a, const Value<S>& b);
template <typename S>
Value<S> transpose2d(const Value<S>& a);
template <typename S>
Value<S> conv2d(const Value<S>& x, const Value<S>& w, int pad);
template <typename S>
Value<S> conv2d_wgrad(const Value<S>& x, const Value<S>& g, int pad, int kh, int kw);
template <typename S>
Value<S> flip_swap(const Value<S>& w);
template <typename S>
Value<S> avgpool2(const Value<S>& x);
template <typename S>
Value<S> upsample2_nearest(const Value<S>& x);
template <typename S>
Value<S> resize_bilinear(const Value<S>& x, int64_t Ho, int64_t Wo);
template <typename S>
Value<S> resize_bilinear_adjoint(const Value<S>& g, int64_t H, int64_t W);

template <typename S>
Value<S> leaf(Tensor<S> t, bool requires_grad = true) {
  auto n = std::make_shared<Node<S>>();
  n->data = std::move(t);
  n->requires_grad = requires_grad && grad_enabled_flag();
  return n;
}

template <typename S>
Value<S> constant(Tensor<S> t) {
  auto n = std::make_shared<Node<S>>();
  n->data = std::move(t);
  return n;
}

template <typename S>
Value<S> constant_scalar(S v) {
  return constant(Tensor<S>::scalar(v));
}

template <typename S>
Value<S> detach(const Value<S>& v) {
  return constant(v->data);
}

namespace adetail {

template <typename S>
Value<S> make_op(Tensor<S> data, std::vector<Value<S>> parents,
                 std::function<std::vector<Value<S>>(const Value<S>&)> vjp) {
  auto n = std::make_shared<Node<S>>();
  n->data = std::move(data);
  if (grad_enabled_flag()) {
    bool req = false;
    for (const auto& p : parents)
      if (p->requires_grad) req = true;
    if (req) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->vjp = std::move(vjp);
    }
  }
  return n;
}

}  // namespace adetail

// -- shape ops ----------------------------------------------------------------

template <typename S>
Value<S> reshape(const Value<S>& a, Shape s) {
  Shape orig = a->data.shape();
  return adetail::make_op<S>(a->data.reshaped(s), {a}, [orig](const Value<S>& g) {
    return std::vector<Value<S>>{reshape(g, orig)};
  });
}

template <typename S>
Value<S> broadcast_to(const Value<S>& a, Shape s) {
  Shape orig = a->data.shape();
  return adetail::make_op<S>(texbridge::broadcast_to(a->data, s), {a}, [orig](const Value<S>& g) {
    return std::vector<Value<S>>{sum_to(g, orig)};
  });
}

template <typename S>
Value<S> sum_axes(const Value<S>& a, std::vector<int> axes) {
  Shape orig = a->data.shape();
  return adetail::make_op<S>(texbridge::sum_axes(a->data, axes), {a}, [orig](const Value<S>& g) {
    return std::vector<Value<S>>{broadcast_to(g, orig)};
  });
}

/// Reduce a broadcast result back down to `target` (composed, not a primitive).
template <typename S>
Value<S> sum_to(const Value<S>& a, const Shape& target) {
  if (a->data.shape() == target) return a;
  size_t r = a->data.shape().size();
  Shape aligned(r, 1);
  for (size_t i = 0; i < target.size(); ++i) aligned[r - target.size() + i] = target[i];
  std::vector<int> axes;
  for (size_t i = 0; i < r; ++i)
    if (aligned[i] == 1 && a->data.shape()[i] != 1) axes.push_back(static_cast<int>(i));
  Value<S> out = axes.empty() ? a : sum_axes(a, axes);
  if (out->data.shape() != target) out = reshape(out, target);
  return out;
}

template <typename S>
Value<S> sum_all(const Value<S>& a) {
  Shape orig = a->data.shape();
  return adetail::make_op<S>(Tensor<S>::scalar(texbridge::sum_all(a->data)), {a},
                             [orig](const Value<S>& g) {
                               return std::vector<Value<S>>{broadcast_to(g, orig)};
                             });
}

template <typename S>
Value<S> narrow(const Value<S>& a, int axis, int64_t start, int64_t len) {
  int64_t total = a->data.shape()[static_cast<size_t>(axis)];
  return adetail::make_op<S>(texbridge::narrow(a->data, axis, start, len), {a},
                             [axis, start, total](const Value<S>& g) {
                               return std::vector<Value<S>>{embed(g, axis, start, total)};
                             });
}

template <typename S>
Value<S> embed(const Value<S>& a, int axis, int64_t start, int64_t total) {
  int64_t len = a->data.shape()[static_cast<size_t>(axis)];
  return adetail::make_op<S>(texbridge::embed(a->data, axis, start, total), {a},
                             [axis, start, len](const Value<S>& g) {
                               return std::vector<Value<S>>{narrow(g, axis, start, len)};
                             });
}

/// Concatenate along `axis` (composed from embed + add).
template <typename S>
Value<S> concat(const std::vector<Value<S>>& xs, int axis) {
  int64_t total = 0;
  for (const auto& x : xs) total += x->data.shape()[static_cast<size_t>(axis)];
  Value<S> out;
  int64_t off = 0;
  for (const auto& x : xs) {
    Value<S> piece = embed(x, axis, off, total);
    out = out ? add(out, piece) : piece;
    off += x->data.shape()[static_cast<size_t>(axis)];
  }
  return out;
}

// -- arithmetic ----------------------------------------------------------------

template <typename S>
Value<S> add(const Value<S>& a, const Value<S>& b) {
  Shape sa = a->data.shape(), sb = b->data.shape();
  return adetail::make_op<S>(texbridge::add(a->data, b->data), {a, b},
                             [sa, sb](const Value<S>& g) {
                               return std::vector<Value<S>>{sum_to(g, sa), sum_to(g, sb)};
                             });
}

template <typename S>
Value<S> sub(const Value<S>& a, const Value<S>& b) {
  Shape sa = a->data.shape(), sb = b->data.shape();
  return adetail::make_op<S>(texbridge::sub(a->data, b->data), {a, b},
                             [sa, sb](const Value<S>& g) {
                               return std::vector<Value<S>>{sum_to(g, sa), sum_to(neg(g), sb)};
                             });
}

template <typename S>
Value<S> mul(const Value<S>& a, const Value<S>& b) {
  Shape sa = a->data.shape(), sb = b->data.shape();
  return adetail::make_op<S>(texbridge::mul(a->data, b->data), {a, b},
                             [a, b, sa, sb](const Value<S>& g) {
                               return std::vector<Value<S>>{sum_to(mul(g, b), sa),
                                                            sum_to(mul(g, a), sb)};
                             });
}

template <typename S>
Value<S> div(const Value<S>& a, const Value<S>& b) {
  Shape sa = a->data.shape(), sb = b->data.shape();
  return adetail::make_op<S>(texbridge::div(a->data, b->data), {a, b},
                             [a, b, sa, sb](const Value<S>& g) {
                               Value<S> da = sum_to(div(g, b), sa);
                               Value<S> db = sum_to(neg(div(mul(g, a), mul(b, b))), sb);
                               return std::vector<Value<S>>{da, db};
                             });
}

template <typename S>
Value<S> neg(const Value<S>& a) {
  return adetail::make_op<S>(texbridge::scale(a->data, S(-1)), {a}, [](const Value<S>& g) {
    return std::vector<Value<S>>{neg(g)};
  });
}

/// m*x + c with scalar constants.
template <typename S>
Value<S> affine(const Value<S>& a, S m, S c) {
  return adetail::make_op<S>(texbridge::map(a->data, [m, c](S x) { return m * x + c; }), {a},
                             [m](const Value<S>& g) {
                               return std::vector<Value<S>>{scale(g, m)};
                             });
}

template <typename S>
Value<S> scale(const Value<S>& a, S s) {
  return affine(a, s, S(0));
}

template <typename S>
Value<S> square(const Value<S>& a) {
  return mul(a, a);
}

template <typename S>
Value<S> exp(const Value<S>& a) {
  return adetail::make_op<S>(texbridge::map(a->data, [](S x) { return std::exp(x); }), {a},
                             [a](const Value<S>& g) {
                               return std::vector<Value<S>>{mul(g, exp(a))};
                             });
}

template <typename S>
Value<S> log(const Value<S>& a) {
  return adetail::make_op<S>(texbridge::map(a->data, [](S x) { return std::log(x); }), {a},
                             [a](const Value<S>& g) {
                               return std::vector<Value<S>>{div(g, a)};
                             });
}

template <typename S>
Value<S> sigmoid(const Value<S>& a) {
  return adetail::make_op<S>(
      texbridge::map(a->data, [](S x) { return S(1) / (S(1) + std::exp(-x)); }), {a},
      [a](const Value<S>& g) {
        Value<S> y = sigmoid(a);
        Value<S> one_minus = affine(y, S(-1), S(1));
        return std::vector<Value<S>>{mul(g, mul(y, one_minus))};
      });
}

/// (x + eps)^(-1/2)
template <typename S>
Value<S> rsqrt_eps(const Value<S>& a, S eps) {
  return adetail::make_op<S>(
      texbridge::map(a->data, [eps](S x) { return S(1) / std::sqrt(x + eps); }), {a},
      [a, eps](const Value<S>& g) {
        Value<S> y = rsqrt_eps(a, eps);
        Value<S> cube = mul(mul(y, y), y);
        return std::vector<Value<S>>{scale(mul(g, cube), S(-0.5))};
      });
}

/// sqrt(x + eps)
template <typename S>
Value<S> sqrt_eps(const Value<S>& a, S eps) {
  return adetail::make_op<S>(texbridge::map(a->data, [eps](S x) { return std::sqrt(x + eps); }),
                             {a}, [a, eps](const Value<S>& g) {
                               return std::vector<Value<S>>{scale(div(g, sqrt_eps(a, eps)), S(0.5))};
                             });
}

/// max(x, slope*x); second derivative treated as zero (exact a.e.)
template <typename S>
Value<S> leaky_relu(const Value<S>& a, S slope) {
  Tensor<S> mask = texbridge::map(a->data, [slope](S x) { return x >= 0 ? S(1) : slope; });
  return adetail::make_op<S>(texbridge::mul(a->data, mask), {a}, [mask](const Value<S>& g) {
    return std::vector<Value<S>>{mul(g, constant(mask))};
  });
}

template <typename S>
Value<S> relu(const Value<S>& a) {
  return leaky_relu(a, S(0));
}

// -- linear algebra -------------------------------------------------------------

template <typename S>
Value<S> matmul(const Value<S>& a, const Value<S>& b) {
  return adetail::make_op<S>(texbridge::matmul(a->data, b->data), {a, b},
                             [a, b](const Value<S>& g) {
                               return std::vector<Value<S>>{matmul(g, transpose2d(b)),
                                                            matmul(transpose2d(a), g)};
                             });
}

template <typename S>
Value<S> transpose2d(const Value<S>& a) {
  return adetail::make_op<S>(texbridge::transpose2d(a->data), {a}, [](const Value<S>& g) {
    return std::vector<Value<S>>{transpose2d(g)};
  });
}

// -- convolution & resampling -----------------------------------------------------
//
// The set {conv2d, conv2d_wgrad, flip_swap} is closed under differentiation,
// as is {resize_bilinear, resize_bilinear_adjoint}; that is what makes exact
// higher-order derivatives possible without special cases.

template <typename S>
Value<S> conv2d(const Value<S>& x, const Value<S>& w, int pad) {
  const int kh = static_cast<int>(w->data.dim(2)), kw = static_cast<int>(w->data.dim(3));
  if (kh != kw) throw std::invalid_argument("conv2d: only square kernels are supported");
  return adetail::make_op<S>(texbridge::conv2d(x->data, w->data, pad), {x, w},
                             [x, w, pad, kh, kw](const Value<S>& g) {
                               Value<S> dx = conv2d(g, flip_swap(w), kh - 1 - pad);
                               Value<S> dw = conv2d_wgrad(x, g, pad, kh, kw);
                               return std::vector<Value<S>>{dx, dw};
                             });
}

template <typename S>
Value<S> conv2d_wgrad(const Value<S>& x, const Value<S>& g, int pad, int kh, int kw) {
  if (kh != kw) throw std::invalid_argument("conv2d_wgrad: only square kernels are supported");
  return adetail::make_op<S>(texbridge::conv2d_wgrad(x->data, g->data, pad, kh, kw), {x, g},
                             [x, g, pad, kh](const Value<S>& u) {
                               Value<S> dx = conv2d(g, flip_swap(u), kh - 1 - pad);
                               Value<S> dg = conv2d(x, u, pad);
                               return std::vector<Value<S>>{dx, dg};
                             });
}

template <typename S>
Value<S> flip_swap(const Value<S>& w) {
  return adetail::make_op<S>(texbridge::flip_swap(w->data), {w}, [](const Value<S>& g) {
    return std::vector<Value<S>>{flip_swap(g)};
  });
}

template <typename S>
Value<S> avgpool2(const Value<S>& x) {
  return adetail::make_op<S>(texbridge::avgpool2(x->data), {x}, [](const Value<S>& g) {
    return std::vector<Value<S>>{scale(upsample2_nearest(g), S(0.25))};
  });
}

template <typename S>
Value<S> upsample2_nearest(const Value<S>& x) {
  return adetail::make_op<S>(texbridge::upsample2_nearest(x->data), {x}, [](const Value<S>& g) {
    return std::vector<Value<S>>{scale(avgpool2(g), S(4))};
  });
}

template <typename S>
Value<S> resize_bilinear(const Value<S>& x, int64_t Ho, int64_t Wo) {
  int64_t H = x->data.dim(2), W = x->data.dim(3);
  return adetail::make_op<S>(texbridge::resize_bilinear(x->data, Ho, Wo), {x},
                             [H, W](const Value<S>& g) {
                               return std::vector<Value<S>>{resize_bilinear_adjoint(g, H, W)};
                             });
}

template <typename S>
Value<S> resize_bilinear_adjoint(const Value<S>& g, int64_t H, int64_t W) {
  int64_t Ho = g->data.dim(2), Wo = g->data.dim(3);
  return adetail::make_op<S>(texbridge::resize_bilinear_adjoint(g->data, H, W), {g},
                             [Ho, Wo](const Value<S>& u) {
                               return std::vector<Value<S>>{resize_bilinear(u, Ho, Wo)};
                             });
}

// -- composite helpers ------------------------------------------------------------

template <typename S>
Value<S> mean_all(const Value<S>& a) {
  return scale(sum_all(a), S(1) / S(a->data.size()));
}

template <typename S>
Value<S> mse(const Value<S>& a, const Value<S>& b) {
  return mean_all(square(sub(a, b)));
}

// -- gradient computation -----------------------------------------------------------

/// Cotangents of `loss` w.r.t. each entry of `wrt`. The returned Values carry a
/// graph when build_graph is true, so they can be fed back into gradients().
/// Entries of `wrt` that `loss` does not depend on get zero tensors.
template <typename S>
std::vector<Value<S>> gradients(const Value<S>& loss, const std::vector<Value<S>>& wrt,
                                Value<S> seed, bool build_graph = true) {
  if (!seed) seed = constant(Tensor<S>::full(loss->data.shape(), S(1)));

  std::vector<Value<S>> out(wrt.size());
  auto zero_fill = [&] {
    for (size_t i = 0; i < wrt.size(); ++i)
      if (!out[i]) out[i] = constant(Tensor<S>::zeros(wrt[i]->data.shape()));
  };
  if (!loss->requires_grad) {
    zero_fill();
    return out;
  }

  // iterative post-order over requires_grad subgraph
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<S>* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<Node<S>*, Value<S>> grad;
  grad.reserve(order.size());
  grad[loss.get()] = seed;

  bool prev_enabled = grad_enabled_flag();
  grad_enabled_flag() = build_graph && prev_enabled;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* node = *it;
    auto git = grad.find(node);
    if (git == grad.end() || !node->vjp) continue;
    std::vector<Value<S>> contribs = node->vjp(git->second);
    for (size_t i = 0; i < node->parents.size(); ++i) {
      Node<S>* p = node->parents[i].get();
      if (!p->requires_grad) continue;
      auto pit = grad.find(p);
      if (pit == grad.end())
        grad[p] = contribs[i];
      else
        pit->second = add(pit->second, contribs[i]);
    }
  }

  grad_enabled_flag() = prev_enabled;

  for (size_t i = 0; i < wrt.size(); ++i) {
    auto it = grad.find(wrt[i].get());
    if (it != grad.end()) out[i] = it->second;
  }
  zero_fill();
  return out;
}

template <typename S>
std::vector<Value<S>> gradients(const Value<S>& loss, const std::vector<Value<S>>& wrt,
                                bool build_graph = true) {
  return gradients(loss, wrt, Value<S>{}, build_graph);
}

}  // namespace texbridge::ad
