// Reverse-mode automatic differentiation over Tensor<S>.
//
// Every differentiable operation returns a Var<S> whose node records its
// inputs and a backward closure. backward(loss) replays the recorded graph
// once in reverse topological order and accumulates gradients; repeated
// calls keep accumulating until grads are cleared.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "bevplan/tensor.hpp"

namespace bevplan {

class AutodiffError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void()> backward_fn;
};

template <typename S>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<S> v, bool requires_grad = false) : n_(std::make_shared<Node<S>>()) {
    n_->value = std::move(v);
    n_->requires_grad = requires_grad;
    if (requires_grad) n_->grad = Tensor<S>(n_->value.shape());
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Tensor<S>& value() const { return n_->value; }
  // Direct mutation is reserved for parameter loading and EMA-style updates
  // that live outside the recorded graph.
  Tensor<S>& value_mut() { return n_->value; }

  Tensor<S>& grad() {
    check_grad();
    return n_->grad;
  }
  const Tensor<S>& grad() const {
    check_grad();
    return n_->grad;
  }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  void zero_grad() {
    if (requires_grad()) n_->grad.zero();
  }

  const Shape& shape() const { return n_->value.shape(); }
  S item() const {
    if (n_->value.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return n_->value[0];
  }

  Node<S>* node() const { return n_.get(); }
  std::shared_ptr<Node<S>> handle() const { return n_; }

 private:
  void check_grad() const {
    if (!n_ || !n_->requires_grad) throw AutodiffError("grad requested on non-grad Var");
  }
  std::shared_ptr<Node<S>> n_;
};

namespace detail {

template <typename S>
Var<S> make_op(Tensor<S> value, std::initializer_list<Var<S>> inputs) {
  bool rg = false;
  for (const auto& v : inputs) rg = rg || v.requires_grad();
  Var<S> out(std::move(value), rg);
  if (rg) {
    auto& parents = out.node()->parents;
    parents.reserve(inputs.size());
    for (const auto& v : inputs) parents.push_back(v.handle());
  }
  return out;
}

template <typename S>
void accumulate(Node<S>* n, const Tensor<S>& g) {
  if (!n->requires_grad) return;
  n->grad.vec() += g.vec();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename S>
void backward(const Var<S>& loss) {
  if (!loss.defined()) throw AutodiffError("backward on undefined Var");
  if (loss.value().size() != 1)
    throw AutodiffError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw AutodiffError("backward on a loss that depends on no differentiable input");

  // Post-order DFS over parents; reversed, consumers run before producers.
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> visited;
  struct Item {
    Node<S>* n;
    size_t next_parent;
  };
  std::vector<Item> stack;
  stack.push_back({loss.node(), 0});
  visited.insert(loss.node());
  while (!stack.empty()) {
    Item& top = stack.back();
    if (top.next_parent < top.n->parents.size()) {
      Node<S>* p = top.n->parents[top.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(top.n);
      stack.pop_back();
    }
  }

  loss.node()->grad[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn();
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> constant(Tensor<S> value) {
  return Var<S>(std::move(value), false);
}

template <typename S>
Var<S> detach(const Var<S>& x) {
  return Var<S>(x.value(), false);
}

// Value of q, gradient of the identity: downstream grads flow to e unchanged.
template <typename S>
Var<S> straight_through(const Var<S>& e, const Tensor<S>& q) {
  require_same_shape(e.value(), q, "straight_through");
  Var<S> out = detail::make_op(Tensor<S>(q), {e});
  if (out.requires_grad()) {
    Node<S>* on = out.node();
    Node<S>* en = e.node();
    on->backward_fn = [on, en] { detail::accumulate(en, on->grad); };
  }
  return out;
}

template <typename S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  if (shape_numel(shape) != x.value().size())
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                     ": element count differs");
  Tensor<S> v(shape, x.value().raw());
  Var<S> out = detail::make_op(std::move(v), {x});
  if (out.requires_grad()) {
    Node<S>* on = out.node();
    Node<S>* xn = x.node();
    on->backward_fn = [on, xn] { xn->grad.vec() += on->grad.vec(); };
  }
  return out;
}

template <typename S>
Var<S> concat(const std::vector<Var<S>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = xs[0].shape();
  int rank = static_cast<int>(s0.size());
  if (axis < 0) axis += rank;
  Shape out_shape = s0;
  int total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (static_cast<int>(s.size()) != rank) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && s[d] != s0[d])
        throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
    total += s[axis];
  }
  out_shape[axis] = total;
  Tensor<S> out(out_shape);

  int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[d];
  int64_t inner = 1;
  for (int d = axis + 1; d < rank; ++d) inner *= s0[d];

  int64_t off = 0;
  for (const auto& x : xs) {
    int64_t block = x.shape()[axis] * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(x.value().data() + o * block, block, out.data() + o * total * inner + off);
    off += block;
  }

  bool rg = false;
  for (const auto& x : xs) rg = rg || x.requires_grad();
  Var<S> r(std::move(out), rg);
  if (rg) {
    auto& parents = r.node()->parents;
    for (const auto& x : xs) parents.push_back(x.handle());
    Node<S>* rn = r.node();
    std::vector<Node<S>*> inputs;
    std::vector<int64_t> blocks;
    for (const auto& x : xs) {
      inputs.push_back(x.node());
      blocks.push_back(x.shape()[axis] * inner);
    }
    int64_t total_inner = static_cast<int64_t>(total) * inner;
    rn->backward_fn = [rn, inputs, blocks, outer, total_inner] {
      int64_t off2 = 0;
      for (size_t i = 0; i < inputs.size(); ++i) {
        if (inputs[i]->requires_grad) {
          for (int64_t o = 0; o < outer; ++o) {
            const S* src = rn->grad.data() + o * total_inner + off2;
            S* dst = inputs[i]->grad.data() + o * blocks[i];
            for (int64_t k = 0; k < blocks[i]; ++k) dst[k] += src[k];
          }
        }
        off2 += blocks[i];
      }
    };
  }
  return r;
}

template <typename S>
Var<S> narrow(const Var<S>& x, int axis, int start, int len) {
  const Shape& s = x.shape();
  int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank || start < 0 || len < 0 || start + len > s[axis])
    throw ShapeError("narrow: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of bounds for axis " +
                     std::to_string(axis) + " of " + shape_str(s));
  Shape out_shape = s;
  out_shape[axis] = len;
  int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  int64_t inner = 1;
  for (int d = axis + 1; d < rank; ++d) inner *= s[d];

  Tensor<S> out(out_shape);
  int64_t in_block = static_cast<int64_t>(s[axis]) * inner;
  int64_t out_block = static_cast<int64_t>(len) * inner;
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(x.value().data() + o * in_block + start * inner, out_block,
                out.data() + o * out_block);

  Var<S> r = detail::make_op(std::move(out), {x});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    int64_t start_inner = static_cast<int64_t>(start) * inner;
    rn->backward_fn = [rn, xn, outer, in_block, out_block, start_inner] {
      for (int64_t o = 0; o < outer; ++o) {
        const S* src = rn->grad.data() + o * out_block;
        S* dst = xn->grad.data() + o * in_block + start_inner;
        for (int64_t k = 0; k < out_block; ++k) dst[k] += src[k];
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<S> out(a.value().shape());
  out.vec() = a.value().vec() + b.value().vec();
  Var<S> r = detail::make_op(std::move(out), {a, b});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* an = a.node();
    Node<S>* bn = b.node();
    rn->backward_fn = [rn, an, bn] {
      detail::accumulate(an, rn->grad);
      detail::accumulate(bn, rn->grad);
    };
  }
  return r;
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<S> out(a.value().shape());
  out.vec() = a.value().vec() - b.value().vec();
  Var<S> r = detail::make_op(std::move(out), {a, b});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* an = a.node();
    Node<S>* bn = b.node();
    rn->backward_fn = [rn, an, bn] {
      detail::accumulate(an, rn->grad);
      if (bn->requires_grad) bn->grad.vec() -= rn->grad.vec();
    };
  }
  return r;
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<S> out(a.value().shape());
  out.vec() = a.value().vec().cwiseProduct(b.value().vec());
  Var<S> r = detail::make_op(std::move(out), {a, b});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* an = a.node();
    Node<S>* bn = b.node();
    rn->backward_fn = [rn, an, bn] {
      if (an->requires_grad) an->grad.vec() += rn->grad.vec().cwiseProduct(bn->value.vec());
      if (bn->requires_grad) bn->grad.vec() += rn->grad.vec().cwiseProduct(an->value.vec());
    };
  }
  return r;
}

template <typename S>
Var<S> scale(const Var<S>& x, S c) {
  Tensor<S> out(x.value().shape());
  out.vec() = x.value().vec() * c;
  Var<S> r = detail::make_op(std::move(out), {x});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    rn->backward_fn = [rn, xn, c] { xn->grad.vec() += rn->grad.vec() * c; };
  }
  return r;
}

template <typename S>
Var<S> add_scalar(const Var<S>& x, S c) {
  Tensor<S> out(x.value().shape());
  out.vec() = x.value().vec().array() + c;
  Var<S> r = detail::make_op(std::move(out), {x});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    rn->backward_fn = [rn, xn] { xn->grad.vec() += rn->grad.vec(); };
  }
  return r;
}

// x: (N, F), b: (F) broadcast over rows.
template <typename S>
Var<S> add_rowvec(const Var<S>& x, const Var<S>& b) {
  const Shape& xs = x.shape();
  if (xs.size() != 2 || b.shape().size() != 1 || b.shape()[0] != xs[1])
    throw ShapeError("add_rowvec: " + shape_str(xs) + " + " + shape_str(b.shape()));
  int n = xs[0], f = xs[1];
  Tensor<S> out(xs);
  out.mat(n, f) = x.value().mat(n, f).rowwise() + b.value().mat(1, f).row(0);
  Var<S> r = detail::make_op(std::move(out), {x, b});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    Node<S>* bn = b.node();
    rn->backward_fn = [rn, xn, bn, n, f] {
      if (xn->requires_grad) xn->grad.vec() += rn->grad.vec();
      if (bn->requires_grad)
        bn->grad.mat(1, f).row(0) += rn->grad.mat(n, f).colwise().sum();
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities
// ---------------------------------------------------------------------------

template <typename S>
Var<S> relu(const Var<S>& x) {
  Tensor<S> out(x.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] > S(0) ? x.value()[i] : S(0);
  Var<S> r = detail::make_op(std::move(out), {x});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    rn->backward_fn = [rn, xn] {
      for (int64_t i = 0; i < rn->grad.size(); ++i)
        if (xn->value[i] > S(0)) xn->grad[i] += rn->grad[i];
    };
  }
  return r;
}

template <typename S>
Var<S> silu(const Var<S>& x) {
  Tensor<S> out(x.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) {
    S s = S(1) / (S(1) + std::exp(-x.value()[i]));
    out[i] = x.value()[i] * s;
  }
  Var<S> r = detail::make_op(std::move(out), {x});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    rn->backward_fn = [rn, xn] {
      for (int64_t i = 0; i < rn->grad.size(); ++i) {
        S s = S(1) / (S(1) + std::exp(-xn->value[i]));
        xn->grad[i] += rn->grad[i] * (s + xn->value[i] * s * (S(1) - s));
      }
    };
  }
  return r;
}

template <typename S>
Var<S> sigmoid(const Var<S>& x) {
  Tensor<S> out(x.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = S(1) / (S(1) + std::exp(-x.value()[i]));
  Var<S> r = detail::make_op(std::move(out), {x});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    rn->backward_fn = [rn, xn] {
      for (int64_t i = 0; i < rn->grad.size(); ++i) {
        S y = rn->value[i];
        xn->grad[i] += rn->grad[i] * y * (S(1) - y);
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(as) + " x " + shape_str(bs));
  int n = as[0], k = as[1], m = bs[1];
  Tensor<S> out({n, m});
  out.mat(n, m).noalias() = a.value().mat(n, k) * b.value().mat(k, m);
  Var<S> r = detail::make_op(std::move(out), {a, b});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* an = a.node();
    Node<S>* bn = b.node();
    rn->backward_fn = [rn, an, bn, n, k, m] {
      if (an->requires_grad)
        an->grad.mat(n, k).noalias() += rn->grad.mat(n, m) * bn->value.mat(k, m).transpose();
      if (bn->requires_grad)
        bn->grad.mat(k, m).noalias() += an->value.mat(n, k).transpose() * rn->grad.mat(n, m);
    };
  }
  return r;
}

template <typename S>
Var<S> transpose2d(const Var<S>& x) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw ShapeError("transpose2d: rank-2 input required, got " + shape_str(s));
  int n = s[0], m = s[1];
  Tensor<S> out({m, n});
  out.mat(m, n) = x.value().mat(n, m).transpose();
  Var<S> r = detail::make_op(std::move(out), {x});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    rn->backward_fn = [rn, xn, n, m] {
      xn->grad.mat(n, m) += rn->grad.mat(m, n).transpose();
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

// Normalizes the last dimension; gamma/beta have that dimension's extent.
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta,
                  S eps = S(1e-5)) {
  const Shape& s = x.shape();
  int f = s.back();
  if (gamma.shape() != Shape{f} || beta.shape() != Shape{f})
    throw ShapeError("layer_norm: affine params must have shape (" + std::to_string(f) + ")");
  int64_t rows = x.value().size() / f;
  Tensor<S> out(s);
  Tensor<S> xhat(s);          // saved for backward
  Tensor<S> inv_std({static_cast<int>(rows)});
  for (int64_t r0 = 0; r0 < rows; ++r0) {
    const S* xp = x.value().data() + r0 * f;
    S mean = 0;
    for (int i = 0; i < f; ++i) mean += xp[i];
    mean /= S(f);
    S var = 0;
    for (int i = 0; i < f; ++i) var += (xp[i] - mean) * (xp[i] - mean);
    var /= S(f);
    S is = S(1) / std::sqrt(var + eps);
    inv_std[r0] = is;
    S* hp = xhat.data() + r0 * f;
    S* op = out.data() + r0 * f;
    for (int i = 0; i < f; ++i) {
      hp[i] = (xp[i] - mean) * is;
      op[i] = hp[i] * gamma.value()[i] + beta.value()[i];
    }
  }
  Var<S> r = detail::make_op(std::move(out), {x, gamma, beta});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    Node<S>* gn = gamma.node();
    Node<S>* bn = beta.node();
    auto xh = std::make_shared<Tensor<S>>(std::move(xhat));
    auto istd = std::make_shared<Tensor<S>>(std::move(inv_std));
    rn->backward_fn = [rn, xn, gn, bn, xh, istd, rows, f] {
      for (int64_t r0 = 0; r0 < rows; ++r0) {
        const S* go = rn->grad.data() + r0 * f;
        const S* hp = xh->data() + r0 * f;
        if (gn->requires_grad)
          for (int i = 0; i < f; ++i) gn->grad[i] += go[i] * hp[i];
        if (bn->requires_grad)
          for (int i = 0; i < f; ++i) bn->grad[i] += go[i];
        if (xn->requires_grad) {
          S sum_g = 0, sum_gh = 0;
          for (int i = 0; i < f; ++i) {
            S gi = go[i] * gn->value[i];
            sum_g += gi;
            sum_gh += gi * hp[i];
          }
          S* gx = xn->grad.data() + r0 * f;
          S is = (*istd)[r0];
          for (int i = 0; i < f; ++i) {
            S gi = go[i] * gn->value[i];
            gx[i] += is * (gi - sum_g / S(f) - hp[i] * sum_gh / S(f));
          }
        }
      }
    };
  }
  return r;
}

// Softmax over the last dimension.
template <typename S>
Var<S> softmax(const Var<S>& x) {
  const Shape& s = x.shape();
  int f = s.back();
  int64_t rows = x.value().size() / f;
  Tensor<S> out(s);
  for (int64_t r0 = 0; r0 < rows; ++r0) {
    const S* xp = x.value().data() + r0 * f;
    S* op = out.data() + r0 * f;
    S m = xp[0];
    for (int i = 1; i < f; ++i) m = std::max(m, xp[i]);
    S z = 0;
    for (int i = 0; i < f; ++i) {
      op[i] = std::exp(xp[i] - m);
      z += op[i];
    }
    for (int i = 0; i < f; ++i) op[i] /= z;
  }
  Var<S> r = detail::make_op(std::move(out), {x});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    rn->backward_fn = [rn, xn, rows, f] {
      for (int64_t r0 = 0; r0 < rows; ++r0) {
        const S* y = rn->value.data() + r0 * f;
        const S* go = rn->grad.data() + r0 * f;
        S dot = 0;
        for (int i = 0; i < f; ++i) dot += y[i] * go[i];
        S* gx = xn->grad.data() + r0 * f;
        for (int i = 0; i < f; ++i) gx[i] += y[i] * (go[i] - dot);
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Lookup / gather
// ---------------------------------------------------------------------------

// table: (V, E); ids index rows. Out: (ids.size(), E).
template <typename S>
Var<S> embedding(const Var<S>& table, const std::vector<int>& ids) {
  const Shape& ts = table.shape();
  if (ts.size() != 2) throw ShapeError("embedding: table must be rank 2, got " + shape_str(ts));
  int v = ts[0], e = ts[1];
  for (int id : ids)
    if (id < 0 || id >= v)
      throw ShapeError("embedding: index " + std::to_string(id) + " out of vocabulary [0," +
                       std::to_string(v) + ")");
  Tensor<S> out({static_cast<int>(ids.size()), e});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.value().data() + static_cast<int64_t>(ids[i]) * e, e,
                out.data() + static_cast<int64_t>(i) * e);
  Var<S> r = detail::make_op(std::move(out), {table});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* tn = table.node();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    rn->backward_fn = [rn, tn, ids_copy, e] {
      for (size_t i = 0; i < ids_copy->size(); ++i) {
        const S* src = rn->grad.data() + static_cast<int64_t>(i) * e;
        S* dst = tn->grad.data() + static_cast<int64_t>((*ids_copy)[i]) * e;
        for (int k = 0; k < e; ++k) dst[k] += src[k];
      }
    };
  }
  return r;
}

struct CellIndex {
  int n;  // batch sample
  int i;  // row
  int j;  // col
};

// x: (N, C, H, W); out: (cells.size(), C), one channel vector per cell.
template <typename S>
Var<S> gather_cells(const Var<S>& x, const std::vector<CellIndex>& cells) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("gather_cells: rank-4 input required, got " + shape_str(s));
  int c = s[1], h = s[2], w = s[3];
  for (const auto& cell : cells)
    if (cell.n < 0 || cell.n >= s[0] || cell.i < 0 || cell.i >= h || cell.j < 0 || cell.j >= w)
      throw ShapeError("gather_cells: cell out of bounds");
  Tensor<S> out({static_cast<int>(cells.size()), c});
  int64_t plane = static_cast<int64_t>(h) * w;
  for (size_t k = 0; k < cells.size(); ++k) {
    const auto& cell = cells[k];
    int64_t base = (static_cast<int64_t>(cell.n) * c) * plane + cell.i * static_cast<int64_t>(w) +
                   cell.j;
    for (int ch = 0; ch < c; ++ch) out(static_cast<int>(k), ch) = x.value()[base + ch * plane];
  }
  Var<S> r = detail::make_op(std::move(out), {x});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    auto cs = std::make_shared<std::vector<CellIndex>>(cells);
    rn->backward_fn = [rn, xn, cs, c, w, plane] {
      for (size_t k = 0; k < cs->size(); ++k) {
        const auto& cell = (*cs)[k];
        int64_t base = (static_cast<int64_t>(cell.n) * c) * plane +
                       cell.i * static_cast<int64_t>(w) + cell.j;
        for (int ch = 0; ch < c; ++ch)
          xn->grad[base + ch * plane] += rn->grad(static_cast<int>(k), ch);
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Var<S> sum(const Var<S>& x) {
  Tensor<S> out = Tensor<S>::scalar(x.value().vec().sum());
  Var<S> r = detail::make_op(std::move(out), {x});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    rn->backward_fn = [rn, xn] { xn->grad.vec().array() += rn->grad[0]; };
  }
  return r;
}

template <typename S>
Var<S> mean(const Var<S>& x) {
  S inv = S(1) / S(x.value().size());
  Tensor<S> out = Tensor<S>::scalar(x.value().vec().sum() * inv);
  Var<S> r = detail::make_op(std::move(out), {x});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    rn->backward_fn = [rn, xn, inv] { xn->grad.vec().array() += rn->grad[0] * inv; };
  }
  return r;
}

// (N, F) -> (F), mean over rows.
template <typename S>
Var<S> mean_rows(const Var<S>& x) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw ShapeError("mean_rows: rank-2 input required, got " + shape_str(s));
  int n = s[0], f = s[1];
  Tensor<S> out({f});
  out.mat(1, f).row(0) = x.value().mat(n, f).colwise().mean();
  Var<S> r = detail::make_op(std::move(out), {x});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    S inv = S(1) / S(n);
    rn->backward_fn = [rn, xn, n, f, inv] {
      xn->grad.mat(n, f).rowwise() += rn->grad.mat(1, f).row(0) * inv;
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

template <typename S>
Var<S> mse(const Var<S>& pred, const Var<S>& target) {
  require_same_shape(pred.value(), target.value(), "mse");
  int64_t n = pred.value().size();
  S acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    S d = pred.value()[i] - target.value()[i];
    acc += d * d;
  }
  Var<S> r = detail::make_op(Tensor<S>::scalar(acc / S(n)), {pred, target});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* pn = pred.node();
    Node<S>* tn = target.node();
    rn->backward_fn = [rn, pn, tn, n] {
      S c = rn->grad[0] * S(2) / S(n);
      for (int64_t i = 0; i < n; ++i) {
        S d = (pn->value[i] - tn->value[i]) * c;
        if (pn->requires_grad) pn->grad[i] += d;
        if (tn->requires_grad) tn->grad[i] -= d;
      }
    };
  }
  return r;
}

// Mean absolute error; subgradient 0 at exact zero.
template <typename S>
Var<S> l1(const Var<S>& pred, const Var<S>& target) {
  require_same_shape(pred.value(), target.value(), "l1");
  int64_t n = pred.value().size();
  S acc = 0;
  for (int64_t i = 0; i < n; ++i) acc += std::abs(pred.value()[i] - target.value()[i]);
  Var<S> r = detail::make_op(Tensor<S>::scalar(acc / S(n)), {pred, target});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* pn = pred.node();
    Node<S>* tn = target.node();
    rn->backward_fn = [rn, pn, tn, n] {
      S c = rn->grad[0] / S(n);
      for (int64_t i = 0; i < n; ++i) {
        S d = pn->value[i] - tn->value[i];
        S g = d > S(0) ? c : (d < S(0) ? -c : S(0));
        if (pn->requires_grad) pn->grad[i] += g;
        if (tn->requires_grad) tn->grad[i] -= g;
      }
    };
  }
  return r;
}

enum class Reduction { Mean, Sum };

// logits: (N, C); targets: N class indices. Stable log-sum-exp with a log1p
// tail so confident-correct rows keep precision near zero loss.
template <typename S>
Var<S> cross_entropy(const Var<S>& logits, const std::vector<int>& targets,
                     Reduction reduction = Reduction::Mean) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw ShapeError("cross_entropy: logits must be rank 2, got " + shape_str(s));
  int n = s[0], c = s[1];
  if (static_cast<int>(targets.size()) != n)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  for (int t : targets)
    if (t < 0 || t >= c)
      throw ShapeError("cross_entropy: target " + std::to_string(t) + " out of [0," +
                       std::to_string(c) + ")");
  S total = 0;
  for (int r0 = 0; r0 < n; ++r0) {
    const S* xp = logits.value().data() + static_cast<int64_t>(r0) * c;
    int imax = 0;
    for (int i = 1; i < c; ++i)
      if (xp[i] > xp[imax]) imax = i;
    S rest = 0;
    for (int i = 0; i < c; ++i)
      if (i != imax) rest += std::exp(xp[i] - xp[imax]);
    S lse = xp[imax] + std::log1p(rest);
    total += lse - xp[targets[static_cast<size_t>(r0)]];
  }
  S value = reduction == Reduction::Mean ? total / S(n) : total;
  Var<S> r = detail::make_op(Tensor<S>::scalar(value), {logits});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* ln = logits.node();
    auto tg = std::make_shared<std::vector<int>>(targets);
    bool mean_red = reduction == Reduction::Mean;
    rn->backward_fn = [rn, ln, tg, n, c, mean_red] {
      S cfac = rn->grad[0] * (mean_red ? S(1) / S(n) : S(1));
      for (int r0 = 0; r0 < n; ++r0) {
        const S* xp = ln->value.data() + static_cast<int64_t>(r0) * c;
        S* gp = ln->grad.data() + static_cast<int64_t>(r0) * c;
        S m = xp[0];
        for (int i = 1; i < c; ++i) m = std::max(m, xp[i]);
        S z = 0;
        for (int i = 0; i < c; ++i) z += std::exp(xp[i] - m);
        for (int i = 0; i < c; ++i) {
          S p = std::exp(xp[i] - m) / z;
          gp[i] += cfac * (p - (i == (*tg)[static_cast<size_t>(r0)] ? S(1) : S(0)));
        }
      }
    };
  }
  return r;
}

// Operator sugar.
template <typename S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) {
  return add(a, b);
}
template <typename S>
Var<S> operator-(const Var<S>& a, const Var<S>& b) {
  return sub(a, b);
}
template <typename S>
Var<S> operator*(const Var<S>& a, const Var<S>& b) {
  return mul(a, b);
}
template <typename S>
Var<S> operator*(S c, const Var<S>& a) {
  return scale(a, c);
}

}  // namespace bevplan
