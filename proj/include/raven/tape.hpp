#pragma once

// Reverse-mode autodiff on a linear tape. Operations execute eagerly and
// append one node each; because nodes append in execution order the tape is
// already topologically sorted and backward() is a single reverse sweep over
// the stored closures. The whole stack is templated on the scalar type:
// float for training, double for finite-difference gradient checking.

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "raven/array.hpp"
#include "raven/kernels.hpp"

namespace raven {

template <class T>
class Tape;

template <class T>
struct VarT {
  Tape<T>* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const ArrayT<T>& val() const;
  const ArrayT<T>& grad() const;
};

template <class T>
class Tape {
 public:
  struct Node {
    ArrayT<T> val;
    ArrayT<T> grad;  // allocated (zeroed) only when needs_grad
    std::function<void(Tape&)> back;
    bool needs_grad = false;
  };

  std::vector<Node> nodes;

  VarT<T> leaf(ArrayT<T> v, bool needs_grad) {
    Node n;
    n.val = std::move(v);
    n.needs_grad = needs_grad;
    if (needs_grad) n.grad = ArrayT<T>(n.val.shape);
    nodes.push_back(std::move(n));
    return {this, (int)nodes.size() - 1};
  }

  VarT<T> constant(ArrayT<T> v) { return leaf(std::move(v), false); }

  const ArrayT<T>& val(int id) const { return nodes[id].val; }
  ArrayT<T>& grad(int id) { return nodes[id].grad; }
  bool needs(int id) const { return nodes[id].needs_grad; }

  void backward(VarT<T> root) {
    if (!root.valid() || root.tape != this) throw std::runtime_error("backward: bad root");
    Node& r = nodes[root.id];
    if (!r.needs_grad) throw std::runtime_error("backward: root has no grad");
    if (r.val.numel() != 1) throw std::runtime_error("backward: root must be scalar");
    r.grad.data[0] = T(1);
    for (int i = root.id; i >= 0; --i)
      if (nodes[i].needs_grad && nodes[i].back) nodes[i].back(*this);
  }

  void clear() {
    nodes.clear();
    nodes.shrink_to_fit();
  }
  size_t size() const { return nodes.size(); }
};

template <class T>
const ArrayT<T>& VarT<T>::val() const {
  return tape->nodes[id].val;
}
template <class T>
const ArrayT<T>& VarT<T>::grad() const {
  return tape->nodes[id].grad;
}

using Var = VarT<float>;
using VarD = VarT<double>;

namespace detail {

template <class T>
bool ng(VarT<T> v) {
  return v.tape->needs(v.id);
}

template <class T>
void same_tape(VarT<T> a, VarT<T> b) {
  if (a.tape != b.tape) throw std::runtime_error("vars on different tapes");
}

// Nodes can't know their own id before they are pushed, so ops push the value
// first and then attach a closure that captures the fresh id.
template <class T, class F>
VarT<T> make_op(Tape<T>& t, ArrayT<T> out, bool needs, F back) {
  VarT<T> o = t.leaf(std::move(out), needs);
  if (needs) {
    const int self = o.id;
    t.nodes[self].back = [back = std::move(back), self](Tape<T>& tp) { back(tp, self); };
  }
  return o;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary (same shape)
// ---------------------------------------------------------------------------

template <class T>
VarT<T> add(VarT<T> a, VarT<T> b) {
  detail::same_tape(a, b);
  Tape<T>& t = *a.tape;
  const ArrayT<T>&av = t.val(a.id), &bv = t.val(b.id);
  if (!av.same_shape(bv)) throw std::runtime_error("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  ArrayT<T> out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] + bv.data[i];
  const bool na = detail::ng(a), nb = detail::ng(b);
  return detail::make_op(t, std::move(out), na || nb,
                         [ai = a.id, bi = b.id, na, nb](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           if (na) {
                             ArrayT<T>& ga = tp.grad(ai);
                             for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
                           }
                           if (nb) {
                             ArrayT<T>& gb = tp.grad(bi);
                             for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
                           }
                         });
}

template <class T>
VarT<T> sub(VarT<T> a, VarT<T> b) {
  detail::same_tape(a, b);
  Tape<T>& t = *a.tape;
  const ArrayT<T>&av = t.val(a.id), &bv = t.val(b.id);
  if (!av.same_shape(bv)) throw std::runtime_error("sub: shape mismatch");
  ArrayT<T> out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] - bv.data[i];
  const bool na = detail::ng(a), nb = detail::ng(b);
  return detail::make_op(t, std::move(out), na || nb,
                         [ai = a.id, bi = b.id, na, nb](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           if (na) {
                             ArrayT<T>& ga = tp.grad(ai);
                             for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
                           }
                           if (nb) {
                             ArrayT<T>& gb = tp.grad(bi);
                             for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] -= g.data[i];
                           }
                         });
}

template <class T>
VarT<T> mul(VarT<T> a, VarT<T> b) {
  detail::same_tape(a, b);
  Tape<T>& t = *a.tape;
  const ArrayT<T>&av = t.val(a.id), &bv = t.val(b.id);
  if (!av.same_shape(bv)) throw std::runtime_error("mul: shape mismatch");
  ArrayT<T> out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] * bv.data[i];
  const bool na = detail::ng(a), nb = detail::ng(b);
  return detail::make_op(t, std::move(out), na || nb,
                         [ai = a.id, bi = b.id, na, nb](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           const ArrayT<T>&av2 = tp.val(ai), &bv2 = tp.val(bi);
                           if (na) {
                             ArrayT<T>& ga = tp.grad(ai);
                             for (int64_t i = 0; i < g.numel(); ++i)
                               ga.data[i] += g.data[i] * bv2.data[i];
                           }
                           if (nb) {
                             ArrayT<T>& gb = tp.grad(bi);
                             for (int64_t i = 0; i < g.numel(); ++i)
                               gb.data[i] += g.data[i] * av2.data[i];
                           }
                         });
}

template <class T>
VarT<T> div(VarT<T> a, VarT<T> b) {
  detail::same_tape(a, b);
  Tape<T>& t = *a.tape;
  const ArrayT<T>&av = t.val(a.id), &bv = t.val(b.id);
  if (!av.same_shape(bv)) throw std::runtime_error("div: shape mismatch");
  ArrayT<T> out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] / bv.data[i];
  const bool na = detail::ng(a), nb = detail::ng(b);
  return detail::make_op(t, std::move(out), na || nb,
                         [ai = a.id, bi = b.id, na, nb](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           const ArrayT<T>&av2 = tp.val(ai), &bv2 = tp.val(bi);
                           if (na) {
                             ArrayT<T>& ga = tp.grad(ai);
                             for (int64_t i = 0; i < g.numel(); ++i)
                               ga.data[i] += g.data[i] / bv2.data[i];
                           }
                           if (nb) {
                             ArrayT<T>& gb = tp.grad(bi);
                             for (int64_t i = 0; i < g.numel(); ++i)
                               gb.data[i] -= g.data[i] * av2.data[i] / (bv2.data[i] * bv2.data[i]);
                           }
                         });
}

// ---------------------------------------------------------------------------
// Elementwise unary
// ---------------------------------------------------------------------------

// out = s * a + c
template <class T>
VarT<T> affine(VarT<T> a, T s, T c) {
  Tape<T>& t = *a.tape;
  const ArrayT<T>& av = t.val(a.id);
  ArrayT<T> out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = s * av.data[i] + c;
  return detail::make_op(t, std::move(out), detail::ng(a),
                         [ai = a.id, s](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           ArrayT<T>& ga = tp.grad(ai);
                           for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += s * g.data[i];
                         });
}

template <class T>
VarT<T> neg(VarT<T> a) {
  return affine(a, T(-1), T(0));
}
template <class T>
VarT<T> scale(VarT<T> a, T s) {
  return affine(a, s, T(0));
}

template <class T>
VarT<T> exp_(VarT<T> a) {
  Tape<T>& t = *a.tape;
  const ArrayT<T>& av = t.val(a.id);
  ArrayT<T> out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = kernels::fast_exp(av.data[i]);
  return detail::make_op(t, std::move(out), detail::ng(a),
                         [ai = a.id](Tape<T>& tp, int self) {
                           const ArrayT<T>&g = tp.grad(self), &y = tp.val(self);
                           ArrayT<T>& ga = tp.grad(ai);
                           for (int64_t i = 0; i < g.numel(); ++i)
                             ga.data[i] += g.data[i] * y.data[i];
                         });
}

template <class T>
VarT<T> log_(VarT<T> a) {
  Tape<T>& t = *a.tape;
  const ArrayT<T>& av = t.val(a.id);
  ArrayT<T> out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = std::log(av.data[i]);
  return detail::make_op(t, std::move(out), detail::ng(a),
                         [ai = a.id](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           const ArrayT<T>& av2 = tp.val(ai);
                           ArrayT<T>& ga = tp.grad(ai);
                           for (int64_t i = 0; i < g.numel(); ++i)
                             ga.data[i] += g.data[i] / av2.data[i];
                         });
}

template <class T>
VarT<T> sigmoid(VarT<T> a) {
  Tape<T>& t = *a.tape;
  const ArrayT<T>& av = t.val(a.id);
  ArrayT<T> out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = kernels::sigmoid_of(av.data[i]);
  return detail::make_op(t, std::move(out), detail::ng(a),
                         [ai = a.id](Tape<T>& tp, int self) {
                           const ArrayT<T>&g = tp.grad(self), &y = tp.val(self);
                           ArrayT<T>& ga = tp.grad(ai);
                           for (int64_t i = 0; i < g.numel(); ++i)
                             ga.data[i] += g.data[i] * y.data[i] * (T(1) - y.data[i]);
                         });
}

template <class T>
VarT<T> silu(VarT<T> a) {
  Tape<T>& t = *a.tape;
  const ArrayT<T>& av = t.val(a.id);
  ArrayT<T> out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = kernels::silu_of(av.data[i]);
  return detail::make_op(t, std::move(out), detail::ng(a),
                         [ai = a.id](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           const ArrayT<T>& av2 = tp.val(ai);
                           ArrayT<T>& ga = tp.grad(ai);
                           for (int64_t i = 0; i < g.numel(); ++i) {
                             const T s = kernels::sigmoid_of(av2.data[i]);
                             ga.data[i] += g.data[i] * s * (T(1) + av2.data[i] * (T(1) - s));
                           }
                         });
}

template <class T>
VarT<T> softplus(VarT<T> a) {
  Tape<T>& t = *a.tape;
  const ArrayT<T>& av = t.val(a.id);
  ArrayT<T> out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = kernels::softplus_of(av.data[i]);
  return detail::make_op(t, std::move(out), detail::ng(a),
                         [ai = a.id](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           const ArrayT<T>& av2 = tp.val(ai);
                           ArrayT<T>& ga = tp.grad(ai);
                           for (int64_t i = 0; i < g.numel(); ++i)
                             ga.data[i] += g.data[i] * kernels::sigmoid_of(av2.data[i]);
                         });
}

// out = a^p, a > 0
template <class T>
VarT<T> powc(VarT<T> a, T p) {
  Tape<T>& t = *a.tape;
  const ArrayT<T>& av = t.val(a.id);
  ArrayT<T> out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = std::pow(av.data[i], p);
  return detail::make_op(t, std::move(out), detail::ng(a),
                         [ai = a.id, p](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           const ArrayT<T>& av2 = tp.val(ai);
                           ArrayT<T>& ga = tp.grad(ai);
                           for (int64_t i = 0; i < g.numel(); ++i)
                             ga.data[i] += g.data[i] * p * std::pow(av2.data[i], p - T(1));
                         });
}

// clamps to [lo, hi]; gradient passes through strictly inside the interval
template <class T>
VarT<T> clip(VarT<T> a, T lo, T hi) {
  Tape<T>& t = *a.tape;
  const ArrayT<T>& av = t.val(a.id);
  ArrayT<T> out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i)
    out.data[i] = std::min(hi, std::max(lo, av.data[i]));
  return detail::make_op(t, std::move(out), detail::ng(a),
                         [ai = a.id, lo, hi](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           const ArrayT<T>& av2 = tp.val(ai);
                           ArrayT<T>& ga = tp.grad(ai);
                           for (int64_t i = 0; i < g.numel(); ++i)
                             if (av2.data[i] > lo && av2.data[i] < hi)
                               ga.data[i] += g.data[i];
                         });
}

template <class T>
VarT<T> mul_const(VarT<T> a, ArrayT<T> c) {
  Tape<T>& t = *a.tape;
  const ArrayT<T>& av = t.val(a.id);
  if (!av.same_shape(c)) throw std::runtime_error("mul_const: shape mismatch");
  ArrayT<T> out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] * c.data[i];
  auto cp = std::make_shared<ArrayT<T>>(std::move(c));
  return detail::make_op(t, std::move(out), detail::ng(a),
                         [ai = a.id, cp](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           ArrayT<T>& ga = tp.grad(ai);
                           for (int64_t i = 0; i < g.numel(); ++i)
                             ga.data[i] += g.data[i] * cp->data[i];
                         });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

// out = op(a) * op(b); op is transpose when the flag is set. a and b are 2-D.
template <class T>
VarT<T> matmul(VarT<T> a, VarT<T> b, bool ta = false, bool tb = false) {
  detail::same_tape(a, b);
  Tape<T>& t = *a.tape;
  const ArrayT<T>&av = t.val(a.id), &bv = t.val(b.id);
  const int m = ta ? av.cols() : av.rows();
  const int k = ta ? av.rows() : av.cols();
  const int kb = tb ? bv.cols() : bv.rows();
  const int n = tb ? bv.rows() : bv.cols();
  if (k != kb) throw std::runtime_error("matmul: inner dim mismatch " + av.shape_str() + " x " + bv.shape_str());
  ArrayT<T> out({m, n});
  if (!ta && !tb)
    kernels::matmul_nn(av.ptr(), bv.ptr(), out.ptr(), m, k, n, false);
  else if (!ta && tb)
    kernels::matmul_nt(av.ptr(), bv.ptr(), out.ptr(), m, k, n, false);
  else if (ta && !tb)
    kernels::matmul_tn(av.ptr(), bv.ptr(), out.ptr(), m, k, n, false);
  else
    throw std::runtime_error("matmul: ta && tb unsupported");
  const bool na = detail::ng(a), nb = detail::ng(b);
  return detail::make_op(
      t, std::move(out), na || nb,
      [ai = a.id, bi = b.id, ta, tb, m, k, n, na, nb](Tape<T>& tp, int self) {
        const ArrayT<T>& g = tp.grad(self);
        const ArrayT<T>&av2 = tp.val(ai), &bv2 = tp.val(bi);
        if (!ta && !tb) {
          if (na) kernels::matmul_nt(g.ptr(), bv2.ptr(), tp.grad(ai).ptr(), m, n, k, true);
          if (nb) kernels::matmul_tn(av2.ptr(), g.ptr(), tp.grad(bi).ptr(), k, m, n, true);
        } else if (!ta && tb) {
          if (na) kernels::matmul_nn(g.ptr(), bv2.ptr(), tp.grad(ai).ptr(), m, n, k, true);
          if (nb) kernels::matmul_tn(g.ptr(), av2.ptr(), tp.grad(bi).ptr(), n, m, k, true);
        } else {  // ta && !tb
          if (na) kernels::matmul_nt(bv2.ptr(), g.ptr(), tp.grad(ai).ptr(), k, n, m, true);
          if (nb) kernels::matmul_nn(av2.ptr(), g.ptr(), tp.grad(bi).ptr(), k, m, n, true);
        }
      });
}

// Block-diagonal batched products for per-chirp attention. a is
// [(blocks*ma) x k]; b is [(blocks*nb) x k] (nt) or [(blocks*k) x n] (nn).
template <class T>
VarT<T> bmm_nt(VarT<T> a, VarT<T> b, int blocks) {
  detail::same_tape(a, b);
  Tape<T>& t = *a.tape;
  const ArrayT<T>&av = t.val(a.id), &bv = t.val(b.id);
  if (av.rows() % blocks || bv.rows() % blocks || av.cols() != bv.cols())
    throw std::runtime_error("bmm_nt: bad shapes");
  const int ma = av.rows() / blocks, nb = bv.rows() / blocks, k = av.cols();
  ArrayT<T> out({blocks * ma, nb});
  for (int q = 0; q < blocks; ++q)
    kernels::matmul_nt(av.ptr() + (size_t)q * ma * k, bv.ptr() + (size_t)q * nb * k,
                       out.ptr() + (size_t)q * ma * nb, ma, k, nb, false);
  const bool na = detail::ng(a), nb2 = detail::ng(b);
  return detail::make_op(
      t, std::move(out), na || nb2,
      [ai = a.id, bi = b.id, blocks, ma, nb, k, na, nb2](Tape<T>& tp, int self) {
        const ArrayT<T>& g = tp.grad(self);
        const ArrayT<T>&av2 = tp.val(ai), &bv2 = tp.val(bi);
        for (int q = 0; q < blocks; ++q) {
          const T* gq = g.ptr() + (size_t)q * ma * nb;
          if (na)
            kernels::matmul_nn(gq, bv2.ptr() + (size_t)q * nb * k,
                               tp.grad(ai).ptr() + (size_t)q * ma * k, ma, nb, k, true);
          if (nb2)
            kernels::matmul_tn(gq, av2.ptr() + (size_t)q * ma * k,
                               tp.grad(bi).ptr() + (size_t)q * nb * k, nb, ma, k, true);
        }
      });
}

template <class T>
VarT<T> bmm_nn(VarT<T> a, VarT<T> b, int blocks) {
  detail::same_tape(a, b);
  Tape<T>& t = *a.tape;
  const ArrayT<T>&av = t.val(a.id), &bv = t.val(b.id);
  if (av.rows() % blocks || bv.rows() % blocks)
    throw std::runtime_error("bmm_nn: bad shapes");
  const int ma = av.rows() / blocks, kb = bv.rows() / blocks, n = bv.cols();
  if (av.cols() != kb) throw std::runtime_error("bmm_nn: inner dim mismatch");
  ArrayT<T> out({blocks * ma, n});
  for (int q = 0; q < blocks; ++q)
    kernels::matmul_nn(av.ptr() + (size_t)q * ma * kb, bv.ptr() + (size_t)q * kb * n,
                       out.ptr() + (size_t)q * ma * n, ma, kb, n, false);
  const bool na = detail::ng(a), nb = detail::ng(b);
  return detail::make_op(
      t, std::move(out), na || nb,
      [ai = a.id, bi = b.id, blocks, ma, kb, n, na, nb](Tape<T>& tp, int self) {
        const ArrayT<T>& g = tp.grad(self);
        const ArrayT<T>&av2 = tp.val(ai), &bv2 = tp.val(bi);
        for (int q = 0; q < blocks; ++q) {
          const T* gq = g.ptr() + (size_t)q * ma * n;
          if (na)
            kernels::matmul_nt(gq, bv2.ptr() + (size_t)q * kb * n,
                               tp.grad(ai).ptr() + (size_t)q * ma * kb, ma, n, kb, true);
          if (nb)
            kernels::matmul_tn(av2.ptr() + (size_t)q * ma * kb, gq,
                               tp.grad(bi).ptr() + (size_t)q * kb * n, kb, ma, n, true);
        }
      });
}

template <class T>
VarT<T> add_bias(VarT<T> x, VarT<T> bias) {
  detail::same_tape(x, bias);
  Tape<T>& t = *x.tape;
  const ArrayT<T>&xv = t.val(x.id), &bv = t.val(bias.id);
  const int n = xv.cols();
  if (bv.numel() != n) throw std::runtime_error("add_bias: width mismatch");
  const int rows = xv.rows();
  ArrayT<T> out(xv.shape);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < n; ++j)
      out.data[(size_t)i * n + j] = xv.data[(size_t)i * n + j] + bv.data[j];
  const bool nx = detail::ng(x), nb = detail::ng(bias);
  return detail::make_op(t, std::move(out), nx || nb,
                         [xi = x.id, bi = bias.id, rows, n, nx, nb](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           if (nx) {
                             ArrayT<T>& gx = tp.grad(xi);
                             for (int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
                           }
                           if (nb) {
                             ArrayT<T>& gb = tp.grad(bi);
                             for (int i = 0; i < rows; ++i)
                               for (int j = 0; j < n; ++j)
                                 gb.data[j] += g.data[(size_t)i * n + j];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Row structure ops
// ---------------------------------------------------------------------------

// [R, n] -> [times*R, n], whole-block repetition [X; X; ...]
template <class T>
VarT<T> tile_rows(VarT<T> x, int times) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  const int R = xv.rows(), n = xv.cols();
  ArrayT<T> out({times * R, n});
  for (int r = 0; r < times; ++r)
    std::copy(xv.data.begin(), xv.data.end(), out.data.begin() + (size_t)r * R * n);
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, times, R, n](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           ArrayT<T>& gx = tp.grad(xi);
                           for (int r = 0; r < times; ++r)
                             for (int64_t i = 0; i < (int64_t)R * n; ++i)
                               gx.data[i] += g.data[(size_t)r * R * n + i];
                         });
}

// [R, n] -> [R*times, n], each row repeated `times` consecutive times
template <class T>
VarT<T> repeat_each_row(VarT<T> x, int times) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  const int R = xv.rows(), n = xv.cols();
  ArrayT<T> out({R * times, n});
  for (int r = 0; r < R; ++r)
    for (int q = 0; q < times; ++q)
      std::copy(xv.data.begin() + (size_t)r * n, xv.data.begin() + (size_t)(r + 1) * n,
                out.data.begin() + ((size_t)r * times + q) * n);
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, times, R, n](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           ArrayT<T>& gx = tp.grad(xi);
                           for (int r = 0; r < R; ++r)
                             for (int q = 0; q < times; ++q)
                               for (int j = 0; j < n; ++j)
                                 gx.data[(size_t)r * n + j] +=
                                     g.data[((size_t)r * times + q) * n + j];
                         });
}

// [B*block, n] -> [B, n], mean over each consecutive block of rows
template <class T>
VarT<T> block_mean_rows(VarT<T> x, int block) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  const int rows = xv.rows(), n = xv.cols();
  if (rows % block) throw std::runtime_error("block_mean_rows: rows % block != 0");
  const int B = rows / block;
  ArrayT<T> out({B, n});
  for (int b = 0; b < B; ++b)
    for (int j = 0; j < n; ++j) {
      T s = 0;
      for (int q = 0; q < block; ++q) s += xv.data[((size_t)b * block + q) * n + j];
      out.data[(size_t)b * n + j] = s / T(block);
    }
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, B, block, n](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           ArrayT<T>& gx = tp.grad(xi);
                           const T inv = T(1) / T(block);
                           for (int b = 0; b < B; ++b)
                             for (int q = 0; q < block; ++q)
                               for (int j = 0; j < n; ++j)
                                 gx.data[((size_t)b * block + q) * n + j] +=
                                     g.data[(size_t)b * n + j] * inv;
                         });
}

// Vertical concatenation of equal-width pieces.
template <class T>
VarT<T> concat_rows(const std::vector<VarT<T>>& parts) {
  if (parts.empty()) throw std::runtime_error("concat_rows: no parts");
  Tape<T>& t = *parts[0].tape;
  const int n = t.val(parts[0].id).cols();
  int rows = 0;
  bool needs = false;
  for (const auto& p : parts) {
    const ArrayT<T>& v = t.val(p.id);
    if (v.cols() != n) throw std::runtime_error("concat_rows: width mismatch");
    rows += v.rows();
    needs = needs || detail::ng(p);
  }
  ArrayT<T> out({rows, n});
  std::vector<int> ids(parts.size());
  std::vector<int64_t> offs(parts.size()), counts(parts.size());
  int64_t off = 0;
  for (size_t i = 0; i < parts.size(); ++i) {
    const ArrayT<T>& v = t.val(parts[i].id);
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + off);
    ids[i] = parts[i].id;
    offs[i] = off;
    counts[i] = v.numel();
    off += v.numel();
  }
  return detail::make_op(t, std::move(out), needs,
                         [ids, offs, counts](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           for (size_t i = 0; i < ids.size(); ++i) {
                             if (!tp.needs(ids[i])) continue;
                             ArrayT<T>& gx = tp.grad(ids[i]);
                             for (int64_t j = 0; j < counts[i]; ++j)
                               gx.data[j] += g.data[offs[i] + j];
                           }
                         });
}

// Horizontal concatenation of equal-height pieces.
template <class T>
VarT<T> concat_cols(const std::vector<VarT<T>>& parts) {
  if (parts.empty()) throw std::runtime_error("concat_cols: no parts");
  Tape<T>& t = *parts[0].tape;
  const int rows = t.val(parts[0].id).rows();
  int n = 0;
  bool needs = false;
  for (const auto& p : parts) {
    const ArrayT<T>& v = t.val(p.id);
    if (v.rows() != rows) throw std::runtime_error("concat_cols: height mismatch");
    n += v.cols();
    needs = needs || detail::ng(p);
  }
  ArrayT<T> out({rows, n});
  std::vector<int> ids(parts.size()), widths(parts.size()), starts(parts.size());
  int c0 = 0;
  for (size_t i = 0; i < parts.size(); ++i) {
    const ArrayT<T>& v = t.val(parts[i].id);
    const int w = v.cols();
    for (int r = 0; r < rows; ++r)
      std::copy(v.data.begin() + (size_t)r * w, v.data.begin() + (size_t)(r + 1) * w,
                out.data.begin() + (size_t)r * n + c0);
    ids[i] = parts[i].id;
    widths[i] = w;
    starts[i] = c0;
    c0 += w;
  }
  return detail::make_op(t, std::move(out), needs,
                         [ids, widths, starts, rows, n](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           for (size_t i = 0; i < ids.size(); ++i) {
                             if (!tp.needs(ids[i])) continue;
                             ArrayT<T>& gx = tp.grad(ids[i]);
                             const int w = widths[i], s = starts[i];
                             for (int r = 0; r < rows; ++r)
                               for (int j = 0; j < w; ++j)
                                 gx.data[(size_t)r * w + j] += g.data[(size_t)r * n + s + j];
                           }
                         });
}

// Rows viewed as [A, B, inner] are emitted as [B, A, inner]; columns intact.
// Used to regroup per-receiver blocks into per-chirp blocks and back.
template <class T>
VarT<T> transpose_blocks(VarT<T> x, int A, int B, int inner) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  const int n = xv.cols();
  if (xv.rows() != A * B * inner) throw std::runtime_error("transpose_blocks: bad rows");
  ArrayT<T> out({A * B * inner, n});
  for (int a = 0; a < A; ++a)
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < inner; ++i) {
        const size_t src = ((size_t)(a * B + b) * inner + i) * n;
        const size_t dst = ((size_t)(b * A + a) * inner + i) * n;
        std::copy(xv.data.begin() + src, xv.data.begin() + src + n, out.data.begin() + dst);
      }
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, A, B, inner, n](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           ArrayT<T>& gx = tp.grad(xi);
                           for (int a = 0; a < A; ++a)
                             for (int b = 0; b < B; ++b)
                               for (int i = 0; i < inner; ++i) {
                                 const size_t src = ((size_t)(a * B + b) * inner + i) * n;
                                 const size_t dst = ((size_t)(b * A + a) * inner + i) * n;
                                 for (int j = 0; j < n; ++j) gx.data[src + j] += g.data[dst + j];
                               }
                         });
}

// out[r, j] = x[r, j % C]; cycles the columns `times` times.
template <class T>
VarT<T> tile_cols(VarT<T> x, int times) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  const int rows = xv.rows(), C = xv.cols();
  ArrayT<T> out({rows, C * times});
  for (int r = 0; r < rows; ++r)
    for (int q = 0; q < times; ++q)
      std::copy(xv.data.begin() + (size_t)r * C, xv.data.begin() + (size_t)(r + 1) * C,
                out.data.begin() + ((size_t)r * times + q) * C);
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, rows, C, times](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           ArrayT<T>& gx = tp.grad(xi);
                           for (int r = 0; r < rows; ++r)
                             for (int q = 0; q < times; ++q)
                               for (int j = 0; j < C; ++j)
                                 gx.data[(size_t)r * C + j] +=
                                     g.data[((size_t)r * times + q) * C + j];
                         });
}

template <class T>
VarT<T> slice_rows(VarT<T> x, int r0, int r1) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  const int n = xv.cols();
  if (r0 < 0 || r1 > xv.rows() || r0 >= r1) throw std::runtime_error("slice_rows: bad range");
  ArrayT<T> out({r1 - r0, n});
  std::copy(xv.data.begin() + (size_t)r0 * n, xv.data.begin() + (size_t)r1 * n,
            out.data.begin());
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, r0, n](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           ArrayT<T>& gx = tp.grad(xi);
                           for (int64_t i = 0; i < g.numel(); ++i)
                             gx.data[(size_t)r0 * n + i] += g.data[i];
                         });
}

template <class T>
VarT<T> slice_cols(VarT<T> x, int c0, int c1) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  const int rows = xv.rows(), n = xv.cols();
  if (c0 < 0 || c1 > n || c0 >= c1) throw std::runtime_error("slice_cols: bad range");
  const int w = c1 - c0;
  ArrayT<T> out({rows, w});
  for (int i = 0; i < rows; ++i)
    std::copy(xv.data.begin() + (size_t)i * n + c0, xv.data.begin() + (size_t)i * n + c1,
              out.data.begin() + (size_t)i * w);
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, rows, n, c0, w](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           ArrayT<T>& gx = tp.grad(xi);
                           for (int i = 0; i < rows; ++i)
                             for (int j = 0; j < w; ++j)
                               gx.data[(size_t)i * n + c0 + j] += g.data[(size_t)i * w + j];
                         });
}

// All-pairs sum per block: a [(nc*R) x d], b [(nc*Tn) x d] ->
// out [(nc*R*Tn) x d], out[k,r,t] = a[k,r] + b[k,t].
template <class T>
VarT<T> pair_sum(VarT<T> a, VarT<T> b, int nc) {
  detail::same_tape(a, b);
  Tape<T>& t = *a.tape;
  const ArrayT<T>&av = t.val(a.id), &bv = t.val(b.id);
  if (av.rows() % nc || bv.rows() % nc || av.cols() != bv.cols())
    throw std::runtime_error("pair_sum: bad shapes");
  const int R = av.rows() / nc, Tn = bv.rows() / nc, d = av.cols();
  ArrayT<T> out({nc * R * Tn, d});
  for (int k = 0; k < nc; ++k)
    for (int r = 0; r < R; ++r) {
      const T* ar = av.ptr() + ((size_t)k * R + r) * d;
      for (int tt = 0; tt < Tn; ++tt) {
        const T* bt = bv.ptr() + ((size_t)k * Tn + tt) * d;
        T* o = out.ptr() + (((size_t)k * R + r) * Tn + tt) * d;
        for (int j = 0; j < d; ++j) o[j] = ar[j] + bt[j];
      }
    }
  const bool na = detail::ng(a), nb = detail::ng(b);
  return detail::make_op(
      t, std::move(out), na || nb,
      [ai = a.id, bi = b.id, nc, R, Tn, d, na, nb](Tape<T>& tp, int self) {
        const ArrayT<T>& g = tp.grad(self);
        for (int k = 0; k < nc; ++k)
          for (int r = 0; r < R; ++r)
            for (int tt = 0; tt < Tn; ++tt) {
              const T* gq = g.ptr() + (((size_t)k * R + r) * Tn + tt) * d;
              if (na) {
                T* ga = tp.grad(ai).ptr() + ((size_t)k * R + r) * d;
                for (int j = 0; j < d; ++j) ga[j] += gq[j];
              }
              if (nb) {
                T* gb = tp.grad(bi).ptr() + ((size_t)k * Tn + tt) * d;
                for (int j = 0; j < d; ++j) gb[j] += gq[j];
              }
            }
      });
}

// ---------------------------------------------------------------------------
// Normalization / softmax
// ---------------------------------------------------------------------------

template <class T>
VarT<T> softmax_rows(VarT<T> x) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  const int rows = xv.rows(), n = xv.cols();
  ArrayT<T> out(xv.shape);
  kernels::softmax_rows_fwd(xv.ptr(), out.ptr(), rows, n);
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, rows, n](Tape<T>& tp, int self) {
                           kernels::softmax_rows_bwd(tp.val(self).ptr(), tp.grad(self).ptr(),
                                                     tp.grad(xi).ptr(), rows, n);
                         });
}

template <class T>
VarT<T> layer_norm(VarT<T> x, VarT<T> gain, VarT<T> bias, T eps = T(1e-5)) {
  detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  const int n = xv.dim((int)xv.rank() - 1);
  const int rows = (int)(xv.numel() / n);
  if (t.val(gain.id).numel() != n || t.val(bias.id).numel() != n)
    throw std::runtime_error("layer_norm: gain/bias width mismatch");
  ArrayT<T> out(xv.shape);
  auto xhat = std::make_shared<ArrayT<T>>(std::vector<int>{rows, n});
  auto istd = std::make_shared<ArrayT<T>>(std::vector<int>{rows});
  kernels::layernorm_fwd(xv.ptr(), t.val(gain.id).ptr(), t.val(bias.id).ptr(), out.ptr(),
                         xhat->ptr(), istd->ptr(), rows, n, eps);
  const bool nx = detail::ng(x), ng2 = detail::ng(gain), nb = detail::ng(bias);
  return detail::make_op(
      t, std::move(out), nx || ng2 || nb,
      [xi = x.id, gi = gain.id, bi = bias.id, xhat, istd, rows, n, nx, ng2,
       nb](Tape<T>& tp, int self) {
        // kernel accumulates into all three; route unademanded grads to scratch
        ArrayT<T> scrap_x, scrap_g, scrap_b;
        T* dx = nullptr;
        T* dg = nullptr;
        T* db = nullptr;
        if (nx) dx = tp.grad(xi).ptr();
        else { scrap_x = ArrayT<T>(std::vector<int>{rows, n}); dx = scrap_x.ptr(); }
        if (ng2) dg = tp.grad(gi).ptr();
        else { scrap_g = ArrayT<T>(std::vector<int>{n}); dg = scrap_g.ptr(); }
        if (nb) db = tp.grad(bi).ptr();
        else { scrap_b = ArrayT<T>(std::vector<int>{n}); db = scrap_b.ptr(); }
        kernels::layernorm_bwd(tp.grad(self).ptr(), xhat->ptr(), istd->ptr(),
                               tp.val(gi).ptr(), dx, dg, db, rows, n);
      });
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

template <class T>
VarT<T> conv1d(VarT<T> x, VarT<T> w, VarT<T> bias, int stride, int pad_l, int pad_r,
               int groups) {
  detail::same_tape(x, w);
  Tape<T>& t = *x.tape;
  const ArrayT<T>&xv = t.val(x.id), &wv = t.val(w.id);
  if (xv.rank() != 3 || wv.rank() != 3) throw std::runtime_error("conv1d: need 3-d x and w");
  const int B = xv.dim(0), Ci = xv.dim(1), L = xv.dim(2);
  const int Co = wv.dim(0), K = wv.dim(2);
  if (wv.dim(1) != Ci / groups) throw std::runtime_error("conv1d: weight channel mismatch");
  const int Lout = kernels::conv_out_len_lr(L, K, stride, pad_l, pad_r);
  ArrayT<T> out({B, Co, Lout});
  const bool has_bias = bias.valid();
  const T* bp = has_bias ? t.val(bias.id).ptr() : nullptr;
  kernels::conv1d_fwd(xv.ptr(), wv.ptr(), bp, out.ptr(), B, Ci, L, Co, K, stride, pad_l,
                      pad_r, groups);
  const bool nx = detail::ng(x), nw = detail::ng(w);
  const bool nb = has_bias && detail::ng(bias);
  const int bid = has_bias ? bias.id : -1;
  return detail::make_op(
      t, std::move(out), nx || nw || nb,
      [xi = x.id, wi = w.id, bid, B, Ci, L, Co, K, stride, pad_l, pad_r, groups, nx, nw,
       nb](Tape<T>& tp, int self) {
        const ArrayT<T>& g = tp.grad(self);
        if (nx)
          kernels::conv1d_bwd_x(g.ptr(), tp.val(wi).ptr(), tp.grad(xi).ptr(), B, Ci, L, Co,
                                K, stride, pad_l, pad_r, groups);
        if (nw || nb) {
          ArrayT<T> scrap_w, scrap_b;
          T* dw;
          T* db = nullptr;
          if (nw) dw = tp.grad(wi).ptr();
          else { scrap_w = ArrayT<T>(tp.val(wi).shape); dw = scrap_w.ptr(); }
          if (nb) db = tp.grad(bid).ptr();
          kernels::conv1d_bwd_w(g.ptr(), tp.val(xi).ptr(), dw, db, B, Ci, L, Co, K, stride,
                                pad_l, pad_r, groups);
        }
      });
}

template <class T>
VarT<T> conv2d(VarT<T> x, VarT<T> w, VarT<T> bias, int stride, int pad) {
  detail::same_tape(x, w);
  Tape<T>& t = *x.tape;
  const ArrayT<T>&xv = t.val(x.id), &wv = t.val(w.id);
  if (xv.rank() != 4 || wv.rank() != 4) throw std::runtime_error("conv2d: need 4-d x and w");
  const int B = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Co = wv.dim(0), Kh = wv.dim(2), Kw = wv.dim(3);
  if (wv.dim(1) != Ci) throw std::runtime_error("conv2d: weight channel mismatch");
  const int Ho = kernels::conv_out_len(H, Kh, stride, pad);
  const int Wo = kernels::conv_out_len(W, Kw, stride, pad);
  ArrayT<T> out({B, Co, Ho, Wo});
  const bool has_bias = bias.valid();
  const T* bp = has_bias ? t.val(bias.id).ptr() : nullptr;
  kernels::conv2d_fwd(xv.ptr(), wv.ptr(), bp, out.ptr(), B, Ci, H, W, Co, Kh, Kw, stride,
                      pad);
  const bool nx = detail::ng(x), nw = detail::ng(w);
  const bool nb = has_bias && detail::ng(bias);
  const int bid = has_bias ? bias.id : -1;
  return detail::make_op(
      t, std::move(out), nx || nw || nb,
      [xi = x.id, wi = w.id, bid, B, Ci, H, W, Co, Kh, Kw, stride, pad, nx, nw,
       nb](Tape<T>& tp, int self) {
        const ArrayT<T>& g = tp.grad(self);
        if (nx)
          kernels::conv2d_bwd_x(g.ptr(), tp.val(wi).ptr(), tp.grad(xi).ptr(), B, Ci, H, W,
                                Co, Kh, Kw, stride, pad);
        if (nw || nb) {
          ArrayT<T> scrap_w;
          T* dw;
          T* db = nullptr;
          if (nw) dw = tp.grad(wi).ptr();
          else { scrap_w = ArrayT<T>(tp.val(wi).shape); dw = scrap_w.ptr(); }
          if (nb) db = tp.grad(bid).ptr();
          kernels::conv2d_bwd_w(g.ptr(), tp.val(xi).ptr(), dw, db, B, Ci, H, W, Co, Kh, Kw,
                                stride, pad);
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling / upsampling / layout permutations
// ---------------------------------------------------------------------------

// adaptive mean pooling over the last dim: [..., L] -> [..., K]
template <class T>
VarT<T> pool_cols(VarT<T> x, int K) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  const int L = xv.dim((int)xv.rank() - 1);
  const int rows = (int)(xv.numel() / L);
  if (K < 1 || K > L) throw std::runtime_error("pool_cols: bad K");
  std::vector<int> oshape = xv.shape;
  oshape.back() = K;
  ArrayT<T> out(oshape);
  kernels::pool_cols_fwd(xv.ptr(), out.ptr(), rows, L, K);
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, rows, L, K](Tape<T>& tp, int self) {
                           kernels::pool_cols_bwd(tp.grad(self).ptr(), tp.grad(xi).ptr(),
                                                  rows, L, K);
                         });
}

// adaptive mean pooling over rows of a 2-D array: [R, n] -> [K, n]
template <class T>
VarT<T> pool_rows(VarT<T> x, int K) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  const int R = xv.rows(), n = xv.cols();
  if (K < 1 || K > R) throw std::runtime_error("pool_rows: bad K");
  ArrayT<T> out({K, n});
  for (int b = 0; b < K; ++b) {
    const int s0 = kernels::pool_edge(b, R, K);
    const int s1 = kernels::pool_edge(b + 1, R, K);
    for (int j = 0; j < n; ++j) {
      T s = 0;
      for (int r = s0; r < s1; ++r) s += xv.data[(size_t)r * n + j];
      out.data[(size_t)b * n + j] = s / T(s1 - s0);
    }
  }
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, R, n, K](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           ArrayT<T>& gx = tp.grad(xi);
                           for (int b = 0; b < K; ++b) {
                             const int s0 = kernels::pool_edge(b, R, K);
                             const int s1 = kernels::pool_edge(b + 1, R, K);
                             const T inv = T(1) / T(s1 - s0);
                             for (int r = s0; r < s1; ++r)
                               for (int j = 0; j < n; ++j)
                                 gx.data[(size_t)r * n + j] +=
                                     g.data[(size_t)b * n + j] * inv;
                           }
                         });
}

// [C, H, W] -> [C, 2H, 2W], bilinear, align_corners = false
template <class T>
VarT<T> upsample2x(VarT<T> x) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  if (xv.rank() != 3) throw std::runtime_error("upsample2x: need [C,H,W]");
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  ArrayT<T> out({C, 2 * H, 2 * W});
  kernels::upsample2x_fwd(xv.ptr(), out.ptr(), C, H, W);
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, C, H, W](Tape<T>& tp, int self) {
                           kernels::upsample2x_bwd(tp.grad(self).ptr(), tp.grad(xi).ptr(),
                                                   C, H, W);
                         });
}

// [B*L, C] -> [B, C, L]
template <class T>
VarT<T> rows_to_bcl(VarT<T> x, int B) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  const int rows = xv.rows(), C = xv.cols();
  if (rows % B) throw std::runtime_error("rows_to_bcl: rows % B != 0");
  const int L = rows / B;
  ArrayT<T> out({B, C, L});
  for (int b = 0; b < B; ++b)
    for (int l = 0; l < L; ++l)
      for (int c = 0; c < C; ++c)
        out.data[((size_t)b * C + c) * L + l] = xv.data[((size_t)b * L + l) * C + c];
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, B, C, L](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           ArrayT<T>& gx = tp.grad(xi);
                           for (int b = 0; b < B; ++b)
                             for (int l = 0; l < L; ++l)
                               for (int c = 0; c < C; ++c)
                                 gx.data[((size_t)b * L + l) * C + c] +=
                                     g.data[((size_t)b * C + c) * L + l];
                         });
}

// [B, C, L] -> [B*L, C]
template <class T>
VarT<T> bcl_to_rows(VarT<T> x) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  if (xv.rank() != 3) throw std::runtime_error("bcl_to_rows: need [B,C,L]");
  const int B = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
  ArrayT<T> out({B * L, C});
  for (int b = 0; b < B; ++b)
    for (int l = 0; l < L; ++l)
      for (int c = 0; c < C; ++c)
        out.data[((size_t)b * L + l) * C + c] = xv.data[((size_t)b * C + c) * L + l];
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, B, C, L](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           ArrayT<T>& gx = tp.grad(xi);
                           for (int b = 0; b < B; ++b)
                             for (int l = 0; l < L; ++l)
                               for (int c = 0; c < C; ++c)
                                 gx.data[((size_t)b * C + c) * L + l] +=
                                     g.data[((size_t)b * L + l) * C + c];
                         });
}

// [C, H, W] -> [H*W, C]  (per-position channel rows, e.g. for channel LN)
template <class T>
VarT<T> chw_to_hwc(VarT<T> x) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  if (xv.rank() != 3) throw std::runtime_error("chw_to_hwc: need [C,H,W]");
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  ArrayT<T> out({H * W, C});
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < H * W; ++p)
      out.data[(size_t)p * C + c] = xv.data[(size_t)c * H * W + p];
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, C, H, W](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           ArrayT<T>& gx = tp.grad(xi);
                           for (int c = 0; c < C; ++c)
                             for (int p = 0; p < H * W; ++p)
                               gx.data[(size_t)c * H * W + p] += g.data[(size_t)p * C + c];
                         });
}

// [H*W, C] -> [C, H, W]
template <class T>
VarT<T> hwc_to_chw(VarT<T> x, int H, int W) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  const int C = xv.cols();
  if (xv.rows() != H * W) throw std::runtime_error("hwc_to_chw: row count != H*W");
  ArrayT<T> out({C, H, W});
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < H * W; ++p)
      out.data[(size_t)c * H * W + p] = xv.data[(size_t)p * C + c];
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, C, H, W](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           ArrayT<T>& gx = tp.grad(xi);
                           for (int c = 0; c < C; ++c)
                             for (int p = 0; p < H * W; ++p)
                               gx.data[(size_t)p * C + c] += g.data[(size_t)c * H * W + p];
                         });
}

template <class T>
VarT<T> reshape(VarT<T> x, std::vector<int> shape) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  ArrayT<T> out = xv.reshaped(shape);
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id](Tape<T>& tp, int self) {
                           const ArrayT<T>& g = tp.grad(self);
                           ArrayT<T>& gx = tp.grad(xi);
                           for (int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
                         });
}

// ---------------------------------------------------------------------------
// Selective scan
// ---------------------------------------------------------------------------

// u, delta: [Nb, L, d]; Bm, Cm: [Nb, L, n]; A: [d, n]; D: [d] -> y [Nb, L, d]
template <class T>
VarT<T> selective_scan(VarT<T> u, VarT<T> delta, VarT<T> Bm, VarT<T> Cm, VarT<T> A,
                       VarT<T> D) {
  Tape<T>& t = *u.tape;
  const ArrayT<T>&uv = t.val(u.id), &dv = t.val(delta.id);
  const ArrayT<T>&bv = t.val(Bm.id), &cv = t.val(Cm.id);
  const ArrayT<T>&av = t.val(A.id), &Dv = t.val(D.id);
  if (uv.rank() != 3) throw std::runtime_error("scan: u must be [Nb,L,d]");
  const int Nb = uv.dim(0), L = uv.dim(1), d = uv.dim(2);
  const int n = av.dim(1);
  if (n > 64) throw std::runtime_error("scan: state dim > 64");
  if (!dv.same_shape(uv) || bv.dim(2) != n || cv.dim(2) != n || av.dim(0) != d ||
      Dv.numel() != d)
    throw std::runtime_error("scan: shape mismatch");
  const bool needs = detail::ng(u) || detail::ng(delta) || detail::ng(Bm) ||
                     detail::ng(Cm) || detail::ng(A) || detail::ng(D);
  ArrayT<T> out({Nb, L, d});
  std::shared_ptr<ArrayT<T>> hist;
  if (needs) hist = std::make_shared<ArrayT<T>>(std::vector<int>{Nb, L, d, n});
  kernels::scan_fwd(uv.ptr(), dv.ptr(), bv.ptr(), cv.ptr(), av.ptr(), Dv.ptr(), out.ptr(),
                    hist ? hist->ptr() : nullptr, Nb, L, d, n);
  return detail::make_op(
      t, std::move(out), needs,
      [ui = u.id, di = delta.id, bi = Bm.id, ci = Cm.id, Ai = A.id, Di = D.id, hist, Nb, L,
       d, n](Tape<T>& tp, int self) {
        // all six inputs sit downstream of params in practice; accumulate all
        kernels::scan_bwd(tp.val(ui).ptr(), tp.val(di).ptr(), tp.val(bi).ptr(),
                          tp.val(ci).ptr(), tp.val(Ai).ptr(), tp.val(Di).ptr(),
                          hist->ptr(), tp.grad(self).ptr(), tp.grad(ui).ptr(),
                          tp.grad(di).ptr(), tp.grad(bi).ptr(), tp.grad(ci).ptr(),
                          tp.grad(Ai).ptr(), tp.grad(Di).ptr(), Nb, L, d, n);
      });
}

// ---------------------------------------------------------------------------
// Reductions / losses
// ---------------------------------------------------------------------------

template <class T>
VarT<T> sum_all(VarT<T> x) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  T s = 0;
  for (int64_t i = 0; i < xv.numel(); ++i) s += xv.data[i];
  ArrayT<T> out({1});
  out.data[0] = s;
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id](Tape<T>& tp, int self) {
                           const T g = tp.grad(self).data[0];
                           ArrayT<T>& gx = tp.grad(xi);
                           for (int64_t i = 0; i < gx.numel(); ++i) gx.data[i] += g;
                         });
}

template <class T>
VarT<T> mean_all(VarT<T> x) {
  const int64_t n = x.val().numel();
  return scale(sum_all(x), T(1) / T(n));
}

// sum(x * c) for a constant mask/weight array
template <class T>
VarT<T> dot_const(VarT<T> x, ArrayT<T> c) {
  Tape<T>& t = *x.tape;
  const ArrayT<T>& xv = t.val(x.id);
  if (!xv.same_shape(c)) throw std::runtime_error("dot_const: shape mismatch");
  T s = 0;
  for (int64_t i = 0; i < xv.numel(); ++i) s += xv.data[i] * c.data[i];
  ArrayT<T> out({1});
  out.data[0] = s;
  auto cp = std::make_shared<ArrayT<T>>(std::move(c));
  return detail::make_op(t, std::move(out), detail::ng(x),
                         [xi = x.id, cp](Tape<T>& tp, int self) {
                           const T g = tp.grad(self).data[0];
                           ArrayT<T>& gx = tp.grad(xi);
                           for (int64_t i = 0; i < gx.numel(); ++i)
                             gx.data[i] += g * cp->data[i];
                         });
}

// sum_i w_i * huber(pred_i - tgt_i); quadratic inside |d| < beta
template <class T>
VarT<T> huber_masked(VarT<T> pred, ArrayT<T> tgt, ArrayT<T> w, T beta) {
  Tape<T>& t = *pred.tape;
  const ArrayT<T>& pv = t.val(pred.id);
  if (!pv.same_shape(tgt) || !pv.same_shape(w))
    throw std::runtime_error("huber_masked: shape mismatch");
  T s = 0;
  for (int64_t i = 0; i < pv.numel(); ++i) {
    const T d = pv.data[i] - tgt.data[i];
    const T a = std::abs(d);
    s += w.data[i] * (a < beta ? T(0.5) * d * d / beta : a - T(0.5) * beta);
  }
  ArrayT<T> out({1});
  out.data[0] = s;
  auto tp_ = std::make_shared<ArrayT<T>>(std::move(tgt));
  auto wp = std::make_shared<ArrayT<T>>(std::move(w));
  return detail::make_op(t, std::move(out), detail::ng(pred),
                         [pi = pred.id, tp_, wp, beta](Tape<T>& tp, int self) {
                           const T g = tp.grad(self).data[0];
                           const ArrayT<T>& pv2 = tp.val(pi);
                           ArrayT<T>& gp = tp.grad(pi);
                           for (int64_t i = 0; i < pv2.numel(); ++i) {
                             const T d = pv2.data[i] - tp_->data[i];
                             const T slope =
                                 std::abs(d) < beta ? d / beta : (d > 0 ? T(1) : T(-1));
                             gp.data[i] += g * wp->data[i] * slope;
                           }
                         });
}

}  // namespace raven
