#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "repdib/tensor.hpp"

namespace repdib {

template <typename S>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Tensor<S>& value() const { return tape->node(id).val; }
  const Tensor<S>& grad() const { return tape->node(id).grad; }
  int rows() const { return value().rows; }
  int cols() const { return value().cols; }
};

// Dynamic reverse-mode tape. One tape records one forward computation; calling
// backward() once propagates gradients to every tracked leaf and scatters them
// into the bound Param::grad accumulators.
template <typename S>
class Tape {
 public:
  struct Node {
    Tensor<S> val;
    Tensor<S> grad;
    bool tracked = false;
    std::function<void(Tape&, int)> back;  // adds into parent grads
    Param<S>* bound = nullptr;
  };

  Var<S> leaf(Param<S>& p) {
    auto it = leaf_cache_.find(&p);
    if (it != leaf_cache_.end()) return {this, it->second};
    Var<S> v = make(p.value, true, nullptr, "leaf");
    nodes_[v.id].bound = &p;
    leaf_cache_.emplace(&p, v.id);
    return v;
  }

  Var<S> constant(Tensor<S> t, const char* op = "constant") {
    return make(std::move(t), false, nullptr, op);
  }

  Var<S> make(Tensor<S> val, bool tracked,
              std::function<void(Tape&, int)> back, const char* op) {
    ensure_finite(val, op);
    Node n;
    n.val = std::move(val);
    if (tracked) n.grad = Tensor<S>(n.val.rows, n.val.cols, S(0));
    n.tracked = tracked;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }

  void add_grad(int id, const Tensor<S>& g) {
    Node& n = nodes_[id];
    if (!n.tracked) return;
    for (std::size_t i = 0; i < g.v.size(); ++i) n.grad.v[i] += g.v[i];
  }

  // Backpropagates from a scalar loss. Single use per tape.
  void backward(Var<S> loss) {
    if (used_) throw ContractError("tape: backward() called twice");
    used_ = true;
    const Node& ln = nodes_[loss.id];
    if (ln.val.rows != 1 || ln.val.cols != 1)
      throw ContractError("tape: backward() requires a scalar loss");
    if (!ln.tracked) return;  // loss independent of any leaf
    nodes_[loss.id].grad.v[0] = S(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.tracked && n.back) n.back(*this, i);
    }
    for (auto& [param, id] : leaf_cache_) {
      if (id > loss.id) continue;
      const Tensor<S>& g = nodes_[id].grad;
      for (std::size_t i = 0; i < g.v.size(); ++i) param->grad.v[i] += g.v[i];
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<Param<S>*, int> leaf_cache_;
  bool used_ = false;
};

namespace detail {

// Broadcast classes for binary elementwise ops: equal shapes, row vector
// (1 x c) against (r x c), or column vector (r x 1) against (r x c).
enum class Bcast { none, row, col };

template <typename S>
inline Bcast bcast_of(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.same_shape(b)) return Bcast::none;
  if (b.rows == 1 && b.cols == a.cols) return Bcast::row;
  if (b.cols == 1 && b.rows == a.rows) return Bcast::col;
  throw ContractError(std::string(op) + ": incompatible shapes (" +
                      std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                      " vs " + std::to_string(b.rows) + "x" +
                      std::to_string(b.cols) + ")");
}

template <typename S>
inline S bvalue(const Tensor<S>& b, Bcast bc, int r, int c) {
  switch (bc) {
    case Bcast::none: return b.at(r, c);
    case Bcast::row: return b.at(0, c);
    default: return b.at(r, 0);
  }
}

// Reduce a full-shape gradient onto a possibly broadcast operand.
template <typename S>
inline void reduce_into(Tensor<S>& acc, const Tensor<S>& g, Bcast bc) {
  if (bc == Bcast::none) {
    for (std::size_t i = 0; i < g.v.size(); ++i) acc.v[i] += g.v[i];
  } else if (bc == Bcast::row) {
    for (int r = 0; r < g.rows; ++r)
      for (int c = 0; c < g.cols; ++c) acc.at(0, c) += g.at(r, c);
  } else {
    for (int r = 0; r < g.rows; ++r)
      for (int c = 0; c < g.cols; ++c) acc.at(r, 0) += g.at(r, c);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (b may broadcast as a row or column vector).

namespace detail {

// Applies `op(a_elem, b_elem)` elementwise with b broadcast; the equal-shape
// case stays a straight vectorizable loop.
template <typename S, typename Op>
inline Tensor<S> broadcast_apply(const Tensor<S>& a, const Tensor<S>& b,
                                 Bcast bc, Op op) {
  Tensor<S> out(a.rows, a.cols);
  if (bc == Bcast::none) {
    for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = op(a.v[i], b.v[i]);
  } else if (bc == Bcast::row) {
    for (int r = 0; r < a.rows; ++r) {
      const S* ar = a.row(r);
      const S* br = b.row(0);
      S* orow = out.row(r);
      for (int c = 0; c < a.cols; ++c) orow[c] = op(ar[c], br[c]);
    }
  } else {
    for (int r = 0; r < a.rows; ++r) {
      const S* ar = a.row(r);
      const S bb = b.at(r, 0);
      S* orow = out.row(r);
      for (int c = 0; c < a.cols; ++c) orow[c] = op(ar[c], bb);
    }
  }
  return out;
}

}  // namespace detail

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  const Tensor<S>&av = a.value(), &bv = b.value();
  auto bc = detail::bcast_of(av, bv, "add");
  Tensor<S> out =
      detail::broadcast_apply(av, bv, bc, [](S x, S y) { return x + y; });
  bool tracked = a.tape->node(a.id).tracked || b.tape->node(b.id).tracked;
  int ai = a.id, bi = b.id;
  return a.tape->make(std::move(out), tracked,
                      [ai, bi, bc](Tape<S>& t, int self) {
                        const Tensor<S>& g = t.node(self).grad;
                        t.add_grad(ai, g);
                        if (t.node(bi).tracked)
                          detail::reduce_into(t.node(bi).grad, g, bc);
                      },
                      "add");
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  const Tensor<S>&av = a.value(), &bv = b.value();
  auto bc = detail::bcast_of(av, bv, "sub");
  Tensor<S> out =
      detail::broadcast_apply(av, bv, bc, [](S x, S y) { return x - y; });
  bool tracked = a.tape->node(a.id).tracked || b.tape->node(b.id).tracked;
  int ai = a.id, bi = b.id;
  return a.tape->make(std::move(out), tracked,
                      [ai, bi, bc](Tape<S>& t, int self) {
                        const Tensor<S>& g = t.node(self).grad;
                        t.add_grad(ai, g);
                        if (t.node(bi).tracked) {
                          Tensor<S> neg(g.rows, g.cols);
                          for (std::size_t i = 0; i < g.v.size(); ++i)
                            neg.v[i] = -g.v[i];
                          detail::reduce_into(t.node(bi).grad, neg, bc);
                        }
                      },
                      "sub");
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  const Tensor<S>&av = a.value(), &bv = b.value();
  auto bc = detail::bcast_of(av, bv, "mul");
  Tensor<S> out =
      detail::broadcast_apply(av, bv, bc, [](S x, S y) { return x * y; });
  bool tracked = a.tape->node(a.id).tracked || b.tape->node(b.id).tracked;
  int ai = a.id, bi = b.id;
  return a.tape->make(
      std::move(out), tracked,
      [ai, bi, bc](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node(self).grad;
        const Tensor<S>&av2 = t.node(ai).val, &bv2 = t.node(bi).val;
        if (t.node(ai).tracked) {
          Tensor<S> ga =
              detail::broadcast_apply(g, bv2, bc, [](S x, S y) { return x * y; });
          t.add_grad(ai, ga);
        }
        if (t.node(bi).tracked) {
          Tensor<S> gb(g.rows, g.cols);
          for (std::size_t i = 0; i < g.v.size(); ++i)
            gb.v[i] = g.v[i] * av2.v[i];
          detail::reduce_into(t.node(bi).grad, gb, bc);
        }
      },
      "mul");
}

template <typename S>
Var<S> div(Var<S> a, Var<S> b) {
  const Tensor<S>&av = a.value(), &bv = b.value();
  auto bc = detail::bcast_of(av, bv, "div");
  Tensor<S> out =
      detail::broadcast_apply(av, bv, bc, [](S x, S y) { return x / y; });
  bool tracked = a.tape->node(a.id).tracked || b.tape->node(b.id).tracked;
  int ai = a.id, bi = b.id;
  return a.tape->make(
      std::move(out), tracked,
      [ai, bi, bc](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node(self).grad;
        const Tensor<S>&av2 = t.node(ai).val, &bv2 = t.node(bi).val;
        if (t.node(ai).tracked) {
          Tensor<S> ga =
              detail::broadcast_apply(g, bv2, bc, [](S x, S y) { return x / y; });
          t.add_grad(ai, ga);
        }
        if (t.node(bi).tracked) {
          Tensor<S> gb(g.rows, g.cols);
          for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c) {
              const S bb = detail::bvalue(bv2, bc, r, c);
              gb.at(r, c) = -g.at(r, c) * av2.at(r, c) / (bb * bb);
            }
          detail::reduce_into(t.node(bi).grad, gb, bc);
        }
      },
      "div");
}

template <typename S>
Var<S> scale(Var<S> a, double k) {
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.rows, av.cols);
  for (std::size_t i = 0; i < av.v.size(); ++i)
    out.v[i] = static_cast<S>(av.v[i] * k);
  int ai = a.id;
  return a.tape->make(std::move(out), a.tape->node(a.id).tracked,
                      [ai, k](Tape<S>& t, int self) {
                        const Tensor<S>& g = t.node(self).grad;
                        Tensor<S> ga(g.rows, g.cols);
                        for (std::size_t i = 0; i < g.v.size(); ++i)
                          ga.v[i] = static_cast<S>(g.v[i] * k);
                        t.add_grad(ai, ga);
                      },
                      "scale");
}

template <typename S>
Var<S> add_const(Var<S> a, double k) {
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.rows, av.cols);
  for (std::size_t i = 0; i < av.v.size(); ++i)
    out.v[i] = static_cast<S>(av.v[i] + k);
  int ai = a.id;
  return a.tape->make(std::move(out), a.tape->node(a.id).tracked,
                      [ai](Tape<S>& t, int self) {
                        t.add_grad(ai, t.node(self).grad);
                      },
                      "add_const");
}

// ---------------------------------------------------------------------------
// Matrix product: (n x k) * (k x m) -> (n x m).

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  const Tensor<S>&av = a.value(), &bv = b.value();
  if (av.cols != bv.rows)
    throw ContractError("matmul: inner dimensions disagree (" +
                        std::to_string(av.cols) + " vs " +
                        std::to_string(bv.rows) + ")");
  const int N = av.rows, K = av.cols, M = bv.cols;
  Tensor<S> out(N, M, S(0));
  for (int i = 0; i < N; ++i) {
    const S* arow = av.row(i);
    S* crow = out.row(i);
    for (int k = 0; k < K; ++k) {
      const S aik = arow[k];
      const S* brow = bv.row(k);
      for (int j = 0; j < M; ++j) crow[j] += aik * brow[j];
    }
  }
  bool tracked = a.tape->node(a.id).tracked || b.tape->node(b.id).tracked;
  int ai = a.id, bi = b.id;
  return a.tape->make(
      std::move(out), tracked,
      [ai, bi, N, K, M](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node(self).grad;
        const Tensor<S>&av2 = t.node(ai).val, &bv2 = t.node(bi).val;
        if (t.node(ai).tracked) {
          // ga = g * b^T  (row-by-row dot products of contiguous rows)
          Tensor<S>& ga = t.node(ai).grad;
          for (int i = 0; i < N; ++i) {
            const S* grow = g.row(i);
            S* garow = ga.row(i);
            for (int k = 0; k < K; ++k) {
              const S* brow = bv2.row(k);
              S acc = S(0);
              for (int j = 0; j < M; ++j) acc += grow[j] * brow[j];
              garow[k] += acc;
            }
          }
        }
        if (t.node(bi).tracked) {
          // gb = a^T * g  (axpy over rows of g)
          Tensor<S>& gb = t.node(bi).grad;
          for (int i = 0; i < N; ++i) {
            const S* arow = av2.row(i);
            const S* grow = g.row(i);
            for (int k = 0; k < K; ++k) {
              const S aik = arow[k];
              S* gbrow = gb.row(k);
              for (int j = 0; j < M; ++j) gbrow[j] += aik * grow[j];
            }
          }
        }
      },
      "matmul");
}

template <typename S>
Var<S> transpose(Var<S> a) {
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.cols, av.rows);
  for (int r = 0; r < av.rows; ++r)
    for (int c = 0; c < av.cols; ++c) out.at(c, r) = av.at(r, c);
  int ai = a.id;
  return a.tape->make(std::move(out), a.tape->node(a.id).tracked,
                      [ai](Tape<S>& t, int self) {
                        const Tensor<S>& g = t.node(self).grad;
                        Tensor<S> ga(g.cols, g.rows);
                        for (int r = 0; r < g.rows; ++r)
                          for (int c = 0; c < g.cols; ++c)
                            ga.at(c, r) = g.at(r, c);
                        t.add_grad(ai, ga);
                      },
                      "transpose");
}

// ---------------------------------------------------------------------------
// Unary elementwise.

template <typename S>
Var<S> relu(Var<S> a) {
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.rows, av.cols);
  for (std::size_t i = 0; i < av.v.size(); ++i)
    out.v[i] = av.v[i] > S(0) ? av.v[i] : S(0);
  int ai = a.id;
  return a.tape->make(std::move(out), a.tape->node(a.id).tracked,
                      [ai](Tape<S>& t, int self) {
                        const Tensor<S>& g = t.node(self).grad;
                        const Tensor<S>& x = t.node(ai).val;
                        Tensor<S> ga(g.rows, g.cols);
                        for (std::size_t i = 0; i < g.v.size(); ++i)
                          ga.v[i] = x.v[i] > S(0) ? g.v[i] : S(0);
                        t.add_grad(ai, ga);
                      },
                      "relu");
}

template <typename S>
Var<S> tanh(Var<S> a) {
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.rows, av.cols);
  for (std::size_t i = 0; i < av.v.size(); ++i)
    out.v[i] = std::tanh(av.v[i]);
  int ai = a.id;
  return a.tape->make(std::move(out), a.tape->node(a.id).tracked,
                      [ai](Tape<S>& t, int self) {
                        const Tensor<S>& g = t.node(self).grad;
                        const Tensor<S>& y = t.node(self).val;
                        Tensor<S> ga(g.rows, g.cols);
                        for (std::size_t i = 0; i < g.v.size(); ++i)
                          ga.v[i] = g.v[i] * (S(1) - y.v[i] * y.v[i]);
                        t.add_grad(ai, ga);
                      },
                      "tanh");
}

template <typename S>
Var<S> exp(Var<S> a) {
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.rows, av.cols);
  for (std::size_t i = 0; i < av.v.size(); ++i) out.v[i] = std::exp(av.v[i]);
  int ai = a.id;
  return a.tape->make(std::move(out), a.tape->node(a.id).tracked,
                      [ai](Tape<S>& t, int self) {
                        const Tensor<S>& g = t.node(self).grad;
                        const Tensor<S>& y = t.node(self).val;
                        Tensor<S> ga(g.rows, g.cols);
                        for (std::size_t i = 0; i < g.v.size(); ++i)
                          ga.v[i] = g.v[i] * y.v[i];
                        t.add_grad(ai, ga);
                      },
                      "exp");
}

template <typename S>
Var<S> log(Var<S> a) {
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.rows, av.cols);
  for (std::size_t i = 0; i < av.v.size(); ++i) out.v[i] = std::log(av.v[i]);
  int ai = a.id;
  return a.tape->make(std::move(out), a.tape->node(a.id).tracked,
                      [ai](Tape<S>& t, int self) {
                        const Tensor<S>& g = t.node(self).grad;
                        const Tensor<S>& x = t.node(ai).val;
                        Tensor<S> ga(g.rows, g.cols);
                        for (std::size_t i = 0; i < g.v.size(); ++i)
                          ga.v[i] = g.v[i] / x.v[i];
                        t.add_grad(ai, ga);
                      },
                      "log");
}

template <typename S>
Var<S> sqrt(Var<S> a) {
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.rows, av.cols);
  for (std::size_t i = 0; i < av.v.size(); ++i) out.v[i] = std::sqrt(av.v[i]);
  int ai = a.id;
  return a.tape->make(std::move(out), a.tape->node(a.id).tracked,
                      [ai](Tape<S>& t, int self) {
                        const Tensor<S>& g = t.node(self).grad;
                        const Tensor<S>& y = t.node(self).val;
                        Tensor<S> ga(g.rows, g.cols);
                        for (std::size_t i = 0; i < g.v.size(); ++i)
                          ga.v[i] = g.v[i] * S(0.5) / y.v[i];
                        t.add_grad(ai, ga);
                      },
                      "sqrt");
}

template <typename S>
Var<S> square(Var<S> a) {
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.rows, av.cols);
  for (std::size_t i = 0; i < av.v.size(); ++i) out.v[i] = av.v[i] * av.v[i];
  int ai = a.id;
  return a.tape->make(std::move(out), a.tape->node(a.id).tracked,
                      [ai](Tape<S>& t, int self) {
                        const Tensor<S>& g = t.node(self).grad;
                        const Tensor<S>& x = t.node(ai).val;
                        Tensor<S> ga(g.rows, g.cols);
                        for (std::size_t i = 0; i < g.v.size(); ++i)
                          ga.v[i] = g.v[i] * S(2) * x.v[i];
                        t.add_grad(ai, ga);
                      },
                      "square");
}

// Subgradient convention at the boundaries: pass-through on [lo, hi].
template <typename S>
Var<S> clamp(Var<S> a, double lo, double hi) {
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.rows, av.cols);
  for (std::size_t i = 0; i < av.v.size(); ++i)
    out.v[i] = std::min(static_cast<S>(hi), std::max(static_cast<S>(lo), av.v[i]));
  int ai = a.id;
  return a.tape->make(
      std::move(out), a.tape->node(a.id).tracked,
      [ai, lo, hi](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node(self).grad;
        const Tensor<S>& x = t.node(ai).val;
        Tensor<S> ga(g.rows, g.cols);
        for (std::size_t i = 0; i < g.v.size(); ++i)
          ga.v[i] = (x.v[i] >= static_cast<S>(lo) && x.v[i] <= static_cast<S>(hi))
                        ? g.v[i]
                        : S(0);
        t.add_grad(ai, ga);
      },
      "clamp");
}

// ---------------------------------------------------------------------------
// Reductions.

template <typename S>
Var<S> row_sum(Var<S> a) {
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.rows, 1, S(0));
  for (int r = 0; r < av.rows; ++r) {
    S acc = S(0);
    for (int c = 0; c < av.cols; ++c) acc += av.at(r, c);
    out.at(r, 0) = acc;
  }
  int ai = a.id;
  return a.tape->make(std::move(out), a.tape->node(a.id).tracked,
                      [ai](Tape<S>& t, int self) {
                        const Tensor<S>& g = t.node(self).grad;
                        const Tensor<S>& x = t.node(ai).val;
                        Tensor<S> ga(x.rows, x.cols);
                        for (int r = 0; r < x.rows; ++r)
                          for (int c = 0; c < x.cols; ++c)
                            ga.at(r, c) = g.at(r, 0);
                        t.add_grad(ai, ga);
                      },
                      "row_sum");
}

template <typename S>
Var<S> total_sum(Var<S> a) {
  const Tensor<S>& av = a.value();
  S acc = S(0);
  for (const S& x : av.v) acc += x;
  int ai = a.id;
  return a.tape->make(Tensor<S>::scalar(acc), a.tape->node(a.id).tracked,
                      [ai](Tape<S>& t, int self) {
                        const S g = t.node(self).grad.v[0];
                        const Tensor<S>& x = t.node(ai).val;
                        Tensor<S> ga(x.rows, x.cols, g);
                        t.add_grad(ai, ga);
                      },
                      "total_sum");
}

template <typename S>
Var<S> mean_all(Var<S> a) {
  const double inv = 1.0 / static_cast<double>(a.value().numel());
  return scale(total_sum(a), inv);
}

// ---------------------------------------------------------------------------
// Row-wise softmax family (fused, numerically shifted by the row max).

template <typename S>
Var<S> softmax_rows(Var<S> a) {
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.rows, av.cols);
  for (int r = 0; r < av.rows; ++r) {
    const S* x = av.row(r);
    S mx = x[0];
    for (int c = 1; c < av.cols; ++c) mx = std::max(mx, x[c]);
    S z = S(0);
    for (int c = 0; c < av.cols; ++c) {
      out.at(r, c) = std::exp(x[c] - mx);
      z += out.at(r, c);
    }
    for (int c = 0; c < av.cols; ++c) out.at(r, c) /= z;
  }
  int ai = a.id;
  return a.tape->make(
      std::move(out), a.tape->node(a.id).tracked,
      [ai](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node(self).grad;
        const Tensor<S>& y = t.node(self).val;
        Tensor<S> ga(g.rows, g.cols);
        for (int r = 0; r < g.rows; ++r) {
          S dot = S(0);
          for (int c = 0; c < g.cols; ++c) dot += g.at(r, c) * y.at(r, c);
          for (int c = 0; c < g.cols; ++c)
            ga.at(r, c) = y.at(r, c) * (g.at(r, c) - dot);
        }
        t.add_grad(ai, ga);
      },
      "softmax_rows");
}

template <typename S>
Var<S> log_softmax_rows(Var<S> a) {
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.rows, av.cols);
  for (int r = 0; r < av.rows; ++r) {
    const S* x = av.row(r);
    S mx = x[0];
    for (int c = 1; c < av.cols; ++c) mx = std::max(mx, x[c]);
    S z = S(0);
    for (int c = 0; c < av.cols; ++c) z += std::exp(x[c] - mx);
    const S lz = std::log(z) + mx;
    for (int c = 0; c < av.cols; ++c) out.at(r, c) = x[c] - lz;
  }
  int ai = a.id;
  return a.tape->make(
      std::move(out), a.tape->node(a.id).tracked,
      [ai](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node(self).grad;
        const Tensor<S>& y = t.node(self).val;  // log-probabilities
        Tensor<S> ga(g.rows, g.cols);
        for (int r = 0; r < g.rows; ++r) {
          S gsum = S(0);
          for (int c = 0; c < g.cols; ++c) gsum += g.at(r, c);
          for (int c = 0; c < g.cols; ++c)
            ga.at(r, c) = g.at(r, c) - std::exp(y.at(r, c)) * gsum;
        }
        t.add_grad(ai, ga);
      },
      "log_softmax_rows");
}

// y = x / max(||x||, eps) per row.
template <typename S>
Var<S> l2_normalize_rows(Var<S> a, double eps = 1e-12) {
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.rows, av.cols);
  std::vector<S> norms(av.rows);
  for (int r = 0; r < av.rows; ++r) {
    S s = S(0);
    for (int c = 0; c < av.cols; ++c) s += av.at(r, c) * av.at(r, c);
    norms[r] = std::max(std::sqrt(s), static_cast<S>(eps));
    for (int c = 0; c < av.cols; ++c) out.at(r, c) = av.at(r, c) / norms[r];
  }
  int ai = a.id;
  return a.tape->make(
      std::move(out), a.tape->node(a.id).tracked,
      [ai, norms](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node(self).grad;
        const Tensor<S>& y = t.node(self).val;
        Tensor<S> ga(g.rows, g.cols);
        for (int r = 0; r < g.rows; ++r) {
          S dot = S(0);
          for (int c = 0; c < g.cols; ++c) dot += g.at(r, c) * y.at(r, c);
          for (int c = 0; c < g.cols; ++c)
            ga.at(r, c) = (g.at(r, c) - y.at(r, c) * dot) / norms[r];
        }
        t.add_grad(ai, ga);
      },
      "l2_normalize_rows");
}

// ---------------------------------------------------------------------------
// Structure ops.

template <typename S>
Var<S> concat_cols(Var<S> a, Var<S> b) {
  const Tensor<S>&av = a.value(), &bv = b.value();
  if (av.rows != bv.rows)
    throw ContractError("concat_cols: row counts disagree");
  Tensor<S> out(av.rows, av.cols + bv.cols);
  for (int r = 0; r < av.rows; ++r) {
    for (int c = 0; c < av.cols; ++c) out.at(r, c) = av.at(r, c);
    for (int c = 0; c < bv.cols; ++c) out.at(r, av.cols + c) = bv.at(r, c);
  }
  bool tracked = a.tape->node(a.id).tracked || b.tape->node(b.id).tracked;
  int ai = a.id, bi = b.id;
  const int ac = av.cols, bc2 = bv.cols;
  return a.tape->make(
      std::move(out), tracked,
      [ai, bi, ac, bc2](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node(self).grad;
        if (t.node(ai).tracked) {
          Tensor<S> ga(g.rows, ac);
          for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < ac; ++c) ga.at(r, c) = g.at(r, c);
          t.add_grad(ai, ga);
        }
        if (t.node(bi).tracked) {
          Tensor<S> gb(g.rows, bc2);
          for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < bc2; ++c) gb.at(r, c) = g.at(r, ac + c);
          t.add_grad(bi, gb);
        }
      },
      "concat_cols");
}

template <typename S>
Var<S> slice_cols(Var<S> a, int lo, int hi) {
  const Tensor<S>& av = a.value();
  if (lo < 0 || hi > av.cols || lo >= hi)
    throw ContractError("slice_cols: bad range [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + ") for width " +
                        std::to_string(av.cols));
  Tensor<S> out(av.rows, hi - lo);
  for (int r = 0; r < av.rows; ++r)
    for (int c = lo; c < hi; ++c) out.at(r, c - lo) = av.at(r, c);
  int ai = a.id;
  return a.tape->make(std::move(out), a.tape->node(a.id).tracked,
                      [ai, lo](Tape<S>& t, int self) {
                        const Tensor<S>& g = t.node(self).grad;
                        Tensor<S>& ga = t.node(ai).grad;
                        for (int r = 0; r < g.rows; ++r)
                          for (int c = 0; c < g.cols; ++c)
                            ga.at(r, lo + c) += g.at(r, c);
                      },
                      "slice_cols");
}

// Gathers rows of a (table of shape L x d) by index: out[i] = a[idx[i]].
template <typename S>
Var<S> gather_rows(Var<S> a, std::vector<int> idx) {
  const Tensor<S>& av = a.value();
  for (int i : idx)
    if (i < 0 || i >= av.rows)
      throw ContractError("gather_rows: index out of range");
  Tensor<S> out(static_cast<int>(idx.size()), av.cols);
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (int c = 0; c < av.cols; ++c)
      out.at(static_cast<int>(r), c) = av.at(idx[r], c);
  int ai = a.id;
  return a.tape->make(std::move(out), a.tape->node(a.id).tracked,
                      [ai, idx](Tape<S>& t, int self) {
                        const Tensor<S>& g = t.node(self).grad;
                        Tensor<S>& ga = t.node(ai).grad;
                        for (std::size_t r = 0; r < idx.size(); ++r)
                          for (int c = 0; c < g.cols; ++c)
                            ga.at(idx[r], c) += g.at(static_cast<int>(r), c);
                      },
                      "gather_rows");
}

// Picks one column per row: out[i, 0] = a[i, idx[i]].
template <typename S>
Var<S> select_cols(Var<S> a, std::vector<int> idx) {
  const Tensor<S>& av = a.value();
  if (static_cast<int>(idx.size()) != av.rows)
    throw ContractError("select_cols: one index per row required");
  for (int i : idx)
    if (i < 0 || i >= av.cols)
      throw ContractError("select_cols: index out of range");
  Tensor<S> out(av.rows, 1);
  for (int r = 0; r < av.rows; ++r) out.at(r, 0) = av.at(r, idx[r]);
  int ai = a.id;
  return a.tape->make(std::move(out), a.tape->node(a.id).tracked,
                      [ai, idx](Tape<S>& t, int self) {
                        const Tensor<S>& g = t.node(self).grad;
                        Tensor<S>& ga = t.node(ai).grad;
                        for (int r = 0; r < g.rows; ++r)
                          ga.at(r, idx[r]) += g.at(r, 0);
                      },
                      "select_cols");
}

// Forward value passes through; gradient is cut.
template <typename S>
Var<S> stop_gradient(Var<S> a) {
  return a.tape->make(a.value(), false, nullptr, "stop_gradient");
}

// Forward takes the given replacement value, backward treats the op as the
// identity on a. This is the vector-quantization estimator.
template <typename S>
Var<S> straight_through(Var<S> a, Tensor<S> replacement) {
  if (!a.value().same_shape(replacement))
    throw ContractError("straight_through: shape mismatch");
  int ai = a.id;
  return a.tape->make(std::move(replacement), a.tape->node(a.id).tracked,
                      [ai](Tape<S>& t, int self) {
                        t.add_grad(ai, t.node(self).grad);
                      },
                      "straight_through");
}

}  // namespace repdib
