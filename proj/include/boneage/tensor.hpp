#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "boneage/errors.hpp"

namespace boneage {

/// Extents, outermost first. NCHW for 4-D feature maps. Zero extents are
/// tolerated so degenerate slices (e.g. width-0 feature blocks) stay legal.
using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

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

namespace detail {

inline std::uint64_t next_node_seq() {
  // Creation order is a valid topological order of the graph. The counter is
  // thread-local: each graph is confined to the thread that builds it.
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

/// One record of the computation: the op that produced this value, the
/// inputs it read, and a closure that routes gradients back to them.
template <class S>
struct Node {
  Shape shape;
  std::vector<S> values;
  bool requires_grad = false;
  std::vector<S> grad;  // allocated on first accumulation

  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;
  std::uint64_t seq = next_node_seq();

  void accumulate(std::span<const S> g) {
    if (grad.empty()) grad.assign(values.size(), S(0));
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
};

}  // namespace detail

/// Dense n-dimensional array participating in reverse-mode differentiation.
/// Copies are shallow (shared node); values are immutable once the tensor has
/// been consumed by an op, except for leaf updates by the optimizer.
template <class S>
class TensorT {
 public:
  using Scalar = S;

  TensorT() = default;

  static TensorT zeros(Shape shape) {
    return from_values(std::move(shape), {}, /*fill=*/S(0));
  }

  static TensorT full(Shape shape, S value) {
    return from_values(std::move(shape), {}, value);
  }

  static TensorT scalar(S value) { return from_values({}, {value}); }

  static TensorT constant(Shape shape, std::vector<S> values) {
    return from_values(std::move(shape), std::move(values));
  }

  /// Leaf with requires_grad set; the unit the optimizer updates.
  static TensorT parameter(Shape shape, std::vector<S> values) {
    TensorT t = from_values(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  static TensorT make_op(const char* op, Shape shape, std::vector<S> values,
                         std::vector<TensorT> inputs,
                         std::function<void(detail::Node<S>&)> backprop) {
    TensorT t = from_values(std::move(shape), std::move(values));
    t.node_->op = op;
    bool needs_grad = false;
    for (const TensorT& in : inputs) needs_grad = needs_grad || in.requires_grad();
    if (needs_grad) {
      t.node_->requires_grad = true;
      t.node_->inputs.reserve(inputs.size());
      for (TensorT& in : inputs) t.node_->inputs.push_back(in.node_);
      t.node_->backprop = std::move(backprop);
    }
    // Without grad-needing inputs the node is a plain value: no edges kept.
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->values.size(); }

  std::span<const S> values() const { return node_->values; }

  /// Mutable access to leaf data (optimizer updates, input staging).
  std::vector<S>& raw_values() { return node_->values; }

  S value() const {
    if (size() != 1)
      throw ShapeError("value() needs a one-element tensor, got " + shape_str(shape()));
    return node_->values[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const S> grad() const {
    if (!has_grad()) throw ValueError("tensor has no accumulated gradient");
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Value copy detached from the graph.
  TensorT detach() const {
    return constant(node_->shape, node_->values);
  }

  /// Deep copy preserving requires_grad (fresh leaf).
  TensorT clone() const {
    TensorT t = from_values(node_->shape, node_->values);
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  std::shared_ptr<detail::Node<S>> node() const { return node_; }

 private:
  static TensorT from_values(Shape shape, std::vector<S> values, S fill = S(0)) {
    TensorT t;
    t.node_ = std::make_shared<detail::Node<S>>();
    const std::size_t n = shape_size(shape);
    t.node_->shape = std::move(shape);
    if (values.empty() && n > 0) {
      t.node_->values.assign(n, fill);
    } else {
      if (values.size() != n)
        throw ShapeError("data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(t.node_->shape));
      t.node_->values = std::move(values);
    }
    return t;
  }

  std::shared_ptr<detail::Node<S>> node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

enum class ZipKind { add, hadamard };
enum class MapKind { relu, sigmoid, affine };

namespace detail {

// b broadcasts over a when its shape, right-aligned against a's, has every
// axis equal or 1. Anything else is an error naming both shapes.
inline bool broadcast_strides(const Shape& a, const Shape& b,
                              std::vector<std::size_t>& b_strides) {
  if (b.size() > a.size()) return false;
  const std::size_t off = a.size() - b.size();
  std::vector<std::size_t> natural(b.size(), 0);
  std::size_t st = 1;
  for (std::size_t i = b.size(); i-- > 0;) {
    natural[i] = st;
    st *= b[i];
  }
  b_strides.assign(a.size(), 0);
  for (std::size_t i = 0; i < b.size(); ++i) {
    const std::size_t ai = off + i;
    if (b[i] == a[ai]) {
      b_strides[ai] = natural[i];
    } else if (b[i] == 1) {
      b_strides[ai] = 0;
    } else {
      return false;
    }
  }
  return true;
}

template <class S, class Fn>
void for_each_broadcast(const Shape& a_shape,
                        const std::vector<std::size_t>& b_strides, Fn&& fn) {
  const std::size_t n = shape_size(a_shape);
  if (n == 0) return;
  std::vector<std::size_t> idx(a_shape.size(), 0);
  std::size_t bi = 0;
  for (std::size_t ai = 0; ai < n; ++ai) {
    fn(ai, bi);
    for (std::size_t d = a_shape.size(); d-- > 0;) {
      ++idx[d];
      bi += b_strides[d];
      if (idx[d] < a_shape[d]) break;
      bi -= b_strides[d] * a_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

/// Elementwise add / Hadamard product; b may broadcast over a.
template <class S>
TensorT<S> zip_elementwise(const TensorT<S>& a, const TensorT<S>& b, ZipKind kind) {
  std::vector<std::size_t> b_strides;
  if (!detail::broadcast_strides(a.shape(), b.shape(), b_strides))
    throw ShapeError("cannot combine shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));

  std::vector<S> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  if (kind == ZipKind::add) {
    detail::for_each_broadcast<S>(a.shape(), b_strides,
                                  [&](std::size_t ai, std::size_t bi) { out[ai] = av[ai] + bv[bi]; });
  } else {
    detail::for_each_broadcast<S>(a.shape(), b_strides,
                                  [&](std::size_t ai, std::size_t bi) { out[ai] = av[ai] * bv[bi]; });
  }

  auto an = a.node();
  auto bn = b.node();
  auto a_shape = a.shape();
  return TensorT<S>::make_op(
      kind == ZipKind::add ? "add" : "hadamard", a.shape(), std::move(out), {a, b},
      [an, bn, b_strides, a_shape, kind](detail::Node<S>& o) {
        if (an->requires_grad) {
          if (kind == ZipKind::add) {
            an->accumulate(o.grad);
          } else {
            std::vector<S> ga(an->values.size());
            detail::for_each_broadcast<S>(a_shape, b_strides, [&](std::size_t ai, std::size_t bi) {
              ga[ai] = o.grad[ai] * bn->values[bi];
            });
            an->accumulate(ga);
          }
        }
        if (bn->requires_grad) {
          // Sum-reduce over broadcast axes: grad shape equals b's own shape.
          std::vector<S> gb(bn->values.size(), S(0));
          if (kind == ZipKind::add) {
            detail::for_each_broadcast<S>(a_shape, b_strides,
                                          [&](std::size_t ai, std::size_t bi) { gb[bi] += o.grad[ai]; });
          } else {
            detail::for_each_broadcast<S>(a_shape, b_strides, [&](std::size_t ai, std::size_t bi) {
              gb[bi] += o.grad[ai] * an->values[ai];
            });
          }
          bn->accumulate(gb);
        }
      });
}

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  return zip_elementwise(a, b, ZipKind::add);
}

template <class S>
TensorT<S> hadamard(const TensorT<S>& a, const TensorT<S>& b) {
  return zip_elementwise(a, b, ZipKind::hadamard);
}

/// Pointwise map. affine computes alpha*x + beta; relu/sigmoid ignore both.
template <class S>
TensorT<S> map_elementwise(const TensorT<S>& a, MapKind kind, S alpha = S(1), S beta = S(0)) {
  std::vector<S> out(a.size());
  const auto av = a.values();
  switch (kind) {
    case MapKind::relu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > S(0) ? av[i] : S(0);
      break;
    case MapKind::sigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = S(1) / (S(1) + std::exp(-av[i]));
      break;
    case MapKind::affine:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * av[i] + beta;
      break;
  }

  auto an = a.node();
  const char* name = kind == MapKind::relu ? "relu" : kind == MapKind::sigmoid ? "sigmoid" : "affine";
  return TensorT<S>::make_op(
      name, a.shape(), std::move(out), {a}, [an, kind, alpha](detail::Node<S>& o) {
        std::vector<S> g(o.values.size());
        switch (kind) {
          case MapKind::relu:
            for (std::size_t i = 0; i < g.size(); ++i)
              g[i] = an->values[i] > S(0) ? o.grad[i] : S(0);
            break;
          case MapKind::sigmoid:
            for (std::size_t i = 0; i < g.size(); ++i) {
              const S s = o.values[i];
              g[i] = o.grad[i] * s * (S(1) - s);
            }
            break;
          case MapKind::affine:
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * alpha;
            break;
        }
        an->accumulate(g);
      });
}

template <class S>
TensorT<S> relu(const TensorT<S>& a) {
  return map_elementwise(a, MapKind::relu);
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& a) {
  return map_elementwise(a, MapKind::sigmoid);
}

template <class S>
TensorT<S> affine(const TensorT<S>& a, S alpha, S beta) {
  return map_elementwise(a, MapKind::affine, alpha, beta);
}

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul needs rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));

  std::vector<S> out(m * n, S(0));
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const S aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }

  auto an = a.node();
  auto bn = b.node();
  return TensorT<S>::make_op(
      "matmul", {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::Node<S>& o) {
        if (an->requires_grad) {  // dA = G * B^T
          std::vector<S> ga(m * k, S(0));
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const S g = o.grad[i * n + j];
              for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += g * bn->values[p * n + j];
            }
          an->accumulate(ga);
        }
        if (bn->requires_grad) {  // dB = A^T * G
          std::vector<S> gb(k * n, S(0));
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const S apv = an->values[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += apv * o.grad[i * n + j];
            }
          bn->accumulate(gb);
        }
      });
}

/// Concatenate along the feature (last) axis of rank-2 tensors.
template <class S>
TensorT<S> concat_features(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0])
    throw ShapeError("concat_features needs matching batches, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  const std::size_t n = a.shape()[0], fa = a.shape()[1], fb = b.shape()[1];
  std::vector<S> out(n * (fa + fb));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.values().data() + i * fa, fa, out.data() + i * (fa + fb));
    std::copy_n(b.values().data() + i * fb, fb, out.data() + i * (fa + fb) + fa);
  }
  auto an = a.node();
  auto bn = b.node();
  return TensorT<S>::make_op(
      "concat_features", {n, fa + fb}, std::move(out), {a, b},
      [an, bn, n, fa, fb](detail::Node<S>& o) {
        if (an->requires_grad) {
          std::vector<S> ga(n * fa);
          for (std::size_t i = 0; i < n; ++i)
            std::copy_n(o.grad.data() + i * (fa + fb), fa, ga.data() + i * fa);
          an->accumulate(ga);
        }
        if (bn->requires_grad) {
          std::vector<S> gb(n * fb);
          for (std::size_t i = 0; i < n; ++i)
            std::copy_n(o.grad.data() + i * (fa + fb) + fa, fb, gb.data() + i * fb);
          bn->accumulate(gb);
        }
      });
}

/// Arithmetic mean over the given axes (removed from the output shape).
template <class S>
TensorT<S> reduce_mean(const TensorT<S>& x, std::vector<std::size_t> axes) {
  if (axes.empty()) throw ValueError("reduce_mean: empty reduction set");
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (std::size_t ax : axes)
    if (ax >= x.rank())
      throw ValueError("reduce_mean: axis " + std::to_string(ax) + " out of range for " +
                       shape_str(x.shape()));

  const Shape& in_shape = x.shape();
  Shape out_shape;
  std::vector<bool> reduced(x.rank(), false);
  for (std::size_t ax : axes) reduced[ax] = true;
  std::size_t count = 1;
  for (std::size_t d = 0; d < in_shape.size(); ++d) {
    if (reduced[d])
      count *= in_shape[d];
    else
      out_shape.push_back(in_shape[d]);
  }
  if (count == 0) throw ValueError("reduce_mean over zero elements");

  // Map each input index to its output index once; reused by the backward.
  const std::size_t n = x.size();
  std::vector<std::size_t> out_strides(in_shape.size(), 0);
  {
    std::size_t st = 1;
    for (std::size_t d = in_shape.size(); d-- > 0;) {
      if (!reduced[d]) {
        out_strides[d] = st;
        st *= in_shape[d];
      }
    }
  }
  std::vector<S> out(shape_size(out_shape), S(0));
  const auto xv = x.values();
  {
    std::vector<std::size_t> idx(in_shape.size(), 0);
    std::size_t oi = 0;
    for (std::size_t i = 0; i < n; ++i) {
      out[oi] += xv[i];
      for (std::size_t d = in_shape.size(); d-- > 0;) {
        ++idx[d];
        oi += out_strides[d];
        if (idx[d] < in_shape[d]) break;
        oi -= out_strides[d] * in_shape[d];
        idx[d] = 0;
      }
    }
  }
  const S inv = S(1) / static_cast<S>(count);
  for (S& v : out) v *= inv;

  auto xn = x.node();
  return TensorT<S>::make_op(
      "reduce_mean", out_shape, std::move(out), {x},
      [xn, in_shape, out_strides, inv, n](detail::Node<S>& o) {
        std::vector<S> gx(n);
        std::vector<std::size_t> idx(in_shape.size(), 0);
        std::size_t oi = 0;
        for (std::size_t i = 0; i < n; ++i) {
          gx[i] = o.grad[oi] * inv;
          for (std::size_t d = in_shape.size(); d-- > 0;) {
            ++idx[d];
            oi += out_strides[d];
            if (idx[d] < in_shape[d]) break;
            oi -= out_strides[d] * in_shape[d];
            idx[d] = 0;
          }
        }
        xn->accumulate(gx);
      });
}

/// Reverse-mode sweep from a scalar loss. Repeated calls accumulate.
template <class S>
void backward(const TensorT<S>& loss) {
  if (loss.size() != 1)
    throw ShapeError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;  // nothing reachable wants gradients

  // Reachable grad-active subgraph, then reverse creation order (valid
  // topological order: inputs always predate their consumers).
  std::vector<std::shared_ptr<detail::Node<S>>> order;
  {
    std::vector<std::shared_ptr<detail::Node<S>>> stack{loss.node()};
    std::vector<const detail::Node<S>*> seen;
    while (!stack.empty()) {
      auto n = stack.back();
      stack.pop_back();
      if (std::find(seen.begin(), seen.end(), n.get()) != seen.end()) continue;
      seen.push_back(n.get());
      order.push_back(n);
      for (const auto& in : n->inputs)
        if (in->requires_grad) stack.push_back(in);
    }
  }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a->seq > b->seq; });

  loss.node()->accumulate(std::vector<S>{S(1)});
  for (const auto& n : order) {
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

}  // namespace boneage
