#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "iqa/rng.hpp"
#include "iqa/tensor.hpp"

// Differentiable primitives. Each op computes its forward value eagerly and,
// when the tape is on, records a closure that scatters the output gradient
// into its parents. Output gradients always accumulate (+=) so shared
// subgraphs and dual forward passes combine correctly.

namespace iqa {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (int64_t i = 0; i < out.size(); ++i) ov[i] = av[i] + bv[i];
  auto *an = a.node().get(), *bn = b.node().get(), *on = out.node().get();
  attach(out, {a.node(), b.node()}, [an, bn, on] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (int64_t i = 0; i < out.size(); ++i) ov[i] = av[i] - bv[i];
  auto *an = a.node().get(), *bn = b.node().get(), *on = out.node().get();
  attach(out, {a.node(), b.node()}, [an, bn, on] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (int64_t i = 0; i < out.size(); ++i) ov[i] = av[i] * bv[i];
  auto *an = a.node().get(), *bn = b.node().get(), *on = out.node().get();
  attach(out, {a.node(), b.node()}, [an, bn, on] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += on->grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i)
        bn->grad[i] += on->grad[i] * an->value[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (int64_t i = 0; i < out.size(); ++i) ov[i] = av[i] * s;
  auto *an = a.node().get(), *on = out.node().get();
  attach(out, {a.node()}, [an, on, s] {
    an->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * s;
  });
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (int64_t i = 0; i < out.size(); ++i) ov[i] = av[i] + c;
  auto *an = a.node().get(), *on = out.node().get();
  attach(out, {a.node()}, [an, on] {
    an->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (int64_t i = 0; i < out.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);
  auto *an = a.node().get(), *on = out.node().get();
  attach(out, {a.node()}, [an, on] {
    an->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i)
      if (an->value[i] > T(0)) an->grad[i] += on->grad[i];
  });
  return out;
}

// |x| with subgradient 0 at the kink.
template <typename T>
Tensor<T> abs_t(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (int64_t i = 0; i < out.size(); ++i) ov[i] = std::abs(av[i]);
  auto *an = a.node().get(), *on = out.node().get();
  attach(out, {a.node()}, [an, on] {
    an->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) {
      T x = an->value[i];
      if (x > T(0))
        an->grad[i] += on->grad[i];
      else if (x < T(0))
        an->grad[i] -= on->grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return mul(a, a);
}

// sqrt(max(x, floor)); gradient is clamped to zero inside the guarded
// region so it stays bounded.
template <typename T>
Tensor<T> sqrt_guarded(const Tensor<T>& a, T floor_v) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (int64_t i = 0; i < out.size(); ++i)
    ov[i] = std::sqrt(av[i] > floor_v ? av[i] : floor_v);
  auto *an = a.node().get(), *on = out.node().get();
  attach(out, {a.node()}, [an, on, floor_v] {
    an->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i)
      if (an->value[i] > floor_v)
        an->grad[i] += on->grad[i] * T(0.5) / on->value[i];
  });
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  auto *an = a.node().get(), *on = out.node().get();
  attach(out, {a.node()}, [an, on] {
    an->ensure_grad();
    T g = on->grad[0];
    for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("mean_all: empty tensor");
  return scale(sum_all(a), T(1) / static_cast<T>(a.size()));
}

// Copy-reshape; same element order, new extents.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  Tensor<T> out = Tensor<T>::from(std::move(shape),
                                  std::vector<T>(a.data().begin(), a.data().end()));
  auto *an = a.node().get(), *on = out.node().get();
  attach(out, {a.node()}, [an, on] {
    an->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
  });
  return out;
}

// x (b, R...) + p (R...), p broadcast over the leading axis.
template <typename T>
Tensor<T> add_bcast_batch(const Tensor<T>& x, const Tensor<T>& p) {
  if (x.ndim() < 1 || numel(Shape(x.shape().begin() + 1, x.shape().end())) !=
                          numel(p.shape()))
    throw ShapeError("add_bcast_batch: " + shape_str(x.shape()) + " vs " +
                     shape_str(p.shape()));
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  int64_t b = x.dim(0), inner = p.size() == 0 ? 0 : numel(p.shape());
  auto xv = x.data(), pv = p.data();
  auto ov = out.data();
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < inner; ++j)
      ov[i * inner + j] = xv[i * inner + j] + pv[j];
  auto *xn = x.node().get(), *pn = p.node().get(), *on = out.node().get();
  attach(out, {x.node(), p.node()}, [xn, pn, on, b, inner] {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    }
    if (pn->requires_grad) {
      pn->ensure_grad();
      for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < inner; ++j)
          pn->grad[j] += on->grad[i * inner + j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

// x (..., in) @ W(out, in)^T + b(out) -> (..., out)
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.ndim() < 1 || w.ndim() != 2)
    throw ShapeError("linear: need x (...,in), w (out,in)");
  int64_t in = x.dim(x.ndim() - 1);
  int64_t out_f = w.dim(0);
  if (w.dim(1) != in)
    throw ShapeError("linear: last axis " + std::to_string(in) +
                     " does not match weight " + shape_str(w.shape()));
  bool has_bias = b.defined();
  if (has_bias && b.size() != out_f)
    throw ShapeError("linear: bias length " + std::to_string(b.size()) +
                     " != out features " + std::to_string(out_f));
  int64_t rows = x.size() / in;
  Shape oshape(x.shape().begin(), x.shape().end() - 1);
  oshape.push_back(out_f);
  Tensor<T> out = Tensor<T>::zeros(oshape);
  auto xv = x.data(), wv = w.data();
  auto ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = &xv[r * in];
    T* orow = &ov[r * out_f];
    for (int64_t o = 0; o < out_f; ++o) {
      const T* wr = &wv[o * in];
      T acc = has_bias ? b.data()[o] : T(0);
      for (int64_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      orow[o] = acc;
    }
  }
  std::vector<std::shared_ptr<TensorNode<T>>> parents = {x.node(), w.node()};
  if (has_bias) parents.push_back(b.node());
  auto *xn = x.node().get(), *wn = w.node().get(), *on = out.node().get();
  TensorNode<T>* bn = has_bias ? b.node().get() : nullptr;
  attach(out, std::move(parents), [xn, wn, bn, on, rows, in, out_f] {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t o = 0; o < out_f; ++o) {
          T g = on->grad[r * out_f + o];
          if (g == T(0)) continue;
          const T* wr = &wn->value[o * in];
          T* xg = &xn->grad[r * in];
          for (int64_t i = 0; i < in; ++i) xg[i] += g * wr[i];
        }
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t o = 0; o < out_f; ++o) {
          T g = on->grad[r * out_f + o];
          if (g == T(0)) continue;
          const T* xr = &xn->value[r * in];
          T* wg = &wn->grad[o * in];
          for (int64_t i = 0; i < in; ++i) wg[i] += g * xr[i];
        }
    }
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t o = 0; o < out_f; ++o)
          bn->grad[o] += on->grad[r * out_f + o];
    }
  });
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  return linear(x, w, Tensor<T>());
}

// Batched matmul: a (B..., M, K) @ b (B..., K, N), leading dims equal.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 2 || b.ndim() != a.ndim())
    throw ShapeError("matmul: rank mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  int nd = a.ndim();
  for (int i = 0; i < nd - 2; ++i)
    if (a.dim(i) != b.dim(i))
      throw ShapeError("matmul: batch dims differ " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
  int64_t m = a.dim(nd - 2), k = a.dim(nd - 1);
  int64_t k2 = b.dim(nd - 2), n = b.dim(nd - 1);
  if (k != k2)
    throw ShapeError("matmul: inner dims differ " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  int64_t batch = a.size() / (m * k);
  Shape oshape(a.shape().begin(), a.shape().end() - 2);
  oshape.push_back(m);
  oshape.push_back(n);
  Tensor<T> out = Tensor<T>::zeros(oshape);
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (int64_t bi = 0; bi < batch; ++bi) {
    const T* A = &av[bi * m * k];
    const T* B = &bv[bi * k * n];
    T* O = &ov[bi * m * n];
    for (int64_t i = 0; i < m; ++i)
      for (int64_t kk = 0; kk < k; ++kk) {
        T s = A[i * k + kk];
        if (s == T(0)) continue;
        const T* brow = &B[kk * n];
        T* orow = &O[i * n];
        for (int64_t j = 0; j < n; ++j) orow[j] += s * brow[j];
      }
  }
  auto *an = a.node().get(), *bn = b.node().get(), *on = out.node().get();
  attach(out, {a.node(), b.node()}, [an, bn, on, batch, m, k, n] {
    for (int64_t bi = 0; bi < batch; ++bi) {
      const T* G = &on->grad[bi * m * n];
      if (an->requires_grad) {
        an->ensure_grad();
        const T* B = &bn->value[bi * k * n];
        T* AG = &an->grad[bi * m * k];
        // dA = G @ B^T
        for (int64_t i = 0; i < m; ++i)
          for (int64_t kk = 0; kk < k; ++kk) {
            T acc = 0;
            const T* grow = &G[i * n];
            const T* brow = &B[kk * n];
            for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            AG[i * k + kk] += acc;
          }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        const T* A = &an->value[bi * m * k];
        T* BG = &bn->grad[bi * k * n];
        // dB = A^T @ G
        for (int64_t i = 0; i < m; ++i)
          for (int64_t kk = 0; kk < k; ++kk) {
            T s = A[i * k + kk];
            if (s == T(0)) continue;
            const T* grow = &G[i * n];
            T* bgrow = &BG[kk * n];
            for (int64_t j = 0; j < n; ++j) bgrow[j] += s * grow[j];
          }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.ndim() < 2) throw ShapeError("transpose_last2: rank < 2");
  int nd = a.ndim();
  int64_t m = a.dim(nd - 2), n = a.dim(nd - 1);
  int64_t batch = a.size() / (m * n);
  Shape oshape = a.shape();
  std::swap(oshape[nd - 2], oshape[nd - 1]);
  Tensor<T> out = Tensor<T>::zeros(oshape);
  auto av = a.data();
  auto ov = out.data();
  for (int64_t bi = 0; bi < batch; ++bi)
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        ov[bi * m * n + j * m + i] = av[bi * m * n + i * n + j];
  auto *an = a.node().get(), *on = out.node().get();
  attach(out, {a.node()}, [an, on, batch, m, n] {
    an->ensure_grad();
    for (int64_t bi = 0; bi < batch; ++bi)
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
          an->grad[bi * m * n + i * n + j] += on->grad[bi * m * n + j * m + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape shuffles for attention and token grids

// (b, L, d) -> (b, h, L, d/h)
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int64_t heads) {
  if (x.ndim() != 3) throw ShapeError("split_heads: need (b,L,d)");
  int64_t b = x.dim(0), L = x.dim(1), d = x.dim(2);
  if (d % heads != 0)
    throw ShapeError("split_heads: " + std::to_string(heads) +
                     " heads do not divide width " + std::to_string(d));
  int64_t hd = d / heads;
  Tensor<T> out = Tensor<T>::zeros({b, heads, L, hd});
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t l = 0; l < L; ++l)
      for (int64_t h = 0; h < heads; ++h)
        std::memcpy(&ov[((bi * heads + h) * L + l) * hd],
                    &xv[(bi * L + l) * d + h * hd], sizeof(T) * hd);
  auto *xn = x.node().get(), *on = out.node().get();
  attach(out, {x.node()}, [xn, on, b, L, d, heads, hd] {
    xn->ensure_grad();
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t l = 0; l < L; ++l)
        for (int64_t h = 0; h < heads; ++h) {
          const T* g = &on->grad[((bi * heads + h) * L + l) * hd];
          T* xg = &xn->grad[(bi * L + l) * d + h * hd];
          for (int64_t i = 0; i < hd; ++i) xg[i] += g[i];
        }
  });
  return out;
}

// (b, h, L, d/h) -> (b, L, d)
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  if (x.ndim() != 4) throw ShapeError("merge_heads: need (b,h,L,hd)");
  int64_t b = x.dim(0), heads = x.dim(1), L = x.dim(2), hd = x.dim(3);
  int64_t d = heads * hd;
  Tensor<T> out = Tensor<T>::zeros({b, L, d});
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t l = 0; l < L; ++l)
      for (int64_t h = 0; h < heads; ++h)
        std::memcpy(&ov[(bi * L + l) * d + h * hd],
                    &xv[((bi * heads + h) * L + l) * hd], sizeof(T) * hd);
  auto *xn = x.node().get(), *on = out.node().get();
  attach(out, {x.node()}, [xn, on, b, L, d, heads, hd] {
    xn->ensure_grad();
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t l = 0; l < L; ++l)
        for (int64_t h = 0; h < heads; ++h) {
          const T* g = &on->grad[(bi * L + l) * d + h * hd];
          T* xg = &xn->grad[((bi * heads + h) * L + l) * hd];
          for (int64_t i = 0; i < hd; ++i) xg[i] += g[i];
        }
  });
  return out;
}

// (b, C, h, w) -> (b, h*w, C): channels-last token layout, row-major grid.
template <typename T>
Tensor<T> chw_to_tokens(const Tensor<T>& x) {
  if (x.ndim() != 4) throw ShapeError("chw_to_tokens: need (b,C,h,w)");
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t L = h * w;
  Tensor<T> out = Tensor<T>::zeros({b, L, c});
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t l = 0; l < L; ++l)
        ov[(bi * L + l) * c + ci] = xv[(bi * c + ci) * L + l];
  auto *xn = x.node().get(), *on = out.node().get();
  attach(out, {x.node()}, [xn, on, b, c, L] {
    xn->ensure_grad();
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t l = 0; l < L; ++l)
          xn->grad[(bi * c + ci) * L + l] += on->grad[(bi * L + l) * c + ci];
  });
  return out;
}

// (b, L, d) -> (b, d, gh, gw) with L == gh*gw.
template <typename T>
Tensor<T> tokens_to_chw(const Tensor<T>& x, int64_t gh, int64_t gw) {
  if (x.ndim() != 3 || x.dim(1) != gh * gw)
    throw ShapeError("tokens_to_chw: need (b," + std::to_string(gh * gw) +
                     ",d), got " + shape_str(x.shape()));
  int64_t b = x.dim(0), L = x.dim(1), d = x.dim(2);
  Tensor<T> out = Tensor<T>::zeros({b, d, gh, gw});
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t l = 0; l < L; ++l)
      for (int64_t di = 0; di < d; ++di)
        ov[(bi * d + di) * L + l] = xv[(bi * L + l) * d + di];
  auto *xn = x.node().get(), *on = out.node().get();
  attach(out, {x.node()}, [xn, on, b, L, d] {
    xn->ensure_grad();
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t l = 0; l < L; ++l)
        for (int64_t di = 0; di < d; ++di)
          xn->grad[(bi * L + l) * d + di] += on->grad[(bi * d + di) * L + l];
  });
  return out;
}

// Concatenate (b, c_i, h, w) tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  int64_t b = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  int64_t ctot = 0;
  for (const auto& x : xs) {
    if (x.ndim() != 4 || x.dim(0) != b || x.dim(2) != h || x.dim(3) != w)
      throw ShapeError("concat_channels: incompatible " + shape_str(x.shape()));
    ctot += x.dim(1);
  }
  Tensor<T> out = Tensor<T>::zeros({b, ctot, h, w});
  int64_t plane = h * w;
  auto ov = out.data();
  int64_t coff = 0;
  for (const auto& x : xs) {
    int64_t c = x.dim(1);
    auto xv = x.data();
    for (int64_t bi = 0; bi < b; ++bi)
      std::memcpy(&ov[(bi * ctot + coff) * plane], &xv[bi * c * plane],
                  sizeof(T) * static_cast<size_t>(c * plane));
    coff += c;
  }
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::vector<std::pair<TensorNode<T>*, int64_t>> slots;
  coff = 0;
  for (const auto& x : xs) {
    parents.push_back(x.node());
    slots.emplace_back(x.node().get(), coff);
    coff += x.dim(1);
  }
  auto* on = out.node().get();
  attach(out, std::move(parents), [slots, on, b, ctot, plane] {
    for (auto [xn, off] : slots) {
      if (!xn->requires_grad) continue;
      xn->ensure_grad();
      int64_t c = static_cast<int64_t>(xn->value.size()) / (b * plane);
      for (int64_t bi = 0; bi < b; ++bi) {
        const T* g = &on->grad[(bi * ctot + off) * plane];
        T* xg = &xn->grad[bi * c * plane];
        for (int64_t i = 0; i < c * plane; ++i) xg[i] += g[i];
      }
    }
  });
  return out;
}

// Concatenate (b, n_i) tensors along the last axis.
template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError("concat_cols: need (b,n) pairs, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  int64_t rows = a.dim(0), na = a.dim(1), nb = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({rows, na + nb});
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(&ov[r * (na + nb)], &av[r * na], sizeof(T) * na);
    std::memcpy(&ov[r * (na + nb) + na], &bv[r * nb], sizeof(T) * nb);
  }
  auto *an = a.node().get(), *bn = b.node().get(), *on = out.node().get();
  attach(out, {a.node(), b.node()}, [an, bn, on, rows, na, nb] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < na; ++i)
          an->grad[r * na + i] += on->grad[r * (na + nb) + i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < nb; ++i)
          bn->grad[r * nb + i] += on->grad[r * (na + nb) + na + i];
    }
  });
  return out;
}

// 1-D gather of a single element -> scalar.
template <typename T>
Tensor<T> gather_index(const Tensor<T>& x, int64_t idx) {
  if (x.ndim() != 1) throw ShapeError("gather_index: need 1-D tensor");
  if (idx < 0 || idx >= x.size())
    throw ShapeError("gather_index: index " + std::to_string(idx) +
                     " out of range [0," + std::to_string(x.size()) + ")");
  Tensor<T> out = Tensor<T>::scalar(x.data()[idx]);
  auto *xn = x.node().get(), *on = out.node().get();
  attach(out, {x.node()}, [xn, on, idx] {
    xn->ensure_grad();
    xn->grad[idx] += on->grad[0];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

// Softmax over the last axis; rows sum to 1.
template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  if (x.ndim() < 1) throw ShapeError("softmax_last: scalar input");
  int64_t n = x.dim(x.ndim() - 1);
  int64_t rows = x.size() / n;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = &xv[r * n];
    T* orow = &ov[r * n];
    T mx = xr[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
    T denom = 0;
    for (int64_t i = 0; i < n; ++i) {
      orow[i] = std::exp(xr[i] - mx);
      denom += orow[i];
    }
    for (int64_t i = 0; i < n; ++i) orow[i] /= denom;
  }
  auto *xn = x.node().get(), *on = out.node().get();
  attach(out, {x.node()}, [xn, on, rows, n] {
    xn->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = &on->value[r * n];
      const T* g = &on->grad[r * n];
      T dot = 0;
      for (int64_t i = 0; i < n; ++i) dot += g[i] * y[i];
      T* xg = &xn->grad[r * n];
      for (int64_t i = 0; i < n; ++i) xg[i] += y[i] * (g[i] - dot);
    }
  });
  return out;
}

// Layer normalization over the last axis with affine parameters.
template <typename T>
Tensor<T> layernorm_last(const Tensor<T>& x, const Tensor<T>& gamma,
                         const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.ndim() < 1) throw ShapeError("layernorm_last: scalar input");
  int64_t n = x.dim(x.ndim() - 1);
  if (gamma.size() != n || beta.size() != n)
    throw ShapeError("layernorm_last: affine size " +
                     std::to_string(gamma.size()) + " != axis " +
                     std::to_string(n));
  int64_t rows = x.size() / n;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> inv_std(rows), xhat(x.size());
  auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  auto ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = &xv[r * n];
    T mean = 0;
    for (int64_t i = 0; i < n; ++i) mean += xr[i];
    mean /= static_cast<T>(n);
    T var = 0;
    for (int64_t i = 0; i < n; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(n);
    T istd = T(1) / std::sqrt(var + eps);
    inv_std[r] = istd;
    for (int64_t i = 0; i < n; ++i) {
      T xh = (xr[i] - mean) * istd;
      xhat[r * n + i] = xh;
      ov[r * n + i] = xh * gv[i] + bv[i];
    }
  }
  auto *xn = x.node().get(), *gn = gamma.node().get(), *bn = beta.node().get();
  auto* on = out.node().get();
  auto xhat_s = std::make_shared<std::vector<T>>(std::move(xhat));
  auto istd_s = std::make_shared<std::vector<T>>(std::move(inv_std));
  attach(out, {x.node(), gamma.node(), beta.node()},
         [xn, gn, bn, on, xhat_s, istd_s, rows, n] {
           const auto& xh = *xhat_s;
           const auto& istd = *istd_s;
           if (bn->requires_grad) {
             bn->ensure_grad();
             for (int64_t r = 0; r < rows; ++r)
               for (int64_t i = 0; i < n; ++i)
                 bn->grad[i] += on->grad[r * n + i];
           }
           if (gn->requires_grad) {
             gn->ensure_grad();
             for (int64_t r = 0; r < rows; ++r)
               for (int64_t i = 0; i < n; ++i)
                 gn->grad[i] += on->grad[r * n + i] * xh[r * n + i];
           }
           if (xn->requires_grad) {
             xn->ensure_grad();
             for (int64_t r = 0; r < rows; ++r) {
               T sum_d = 0, sum_dx = 0;
               for (int64_t i = 0; i < n; ++i) {
                 T d = on->grad[r * n + i] * gn->value[i];
                 sum_d += d;
                 sum_dx += d * xh[r * n + i];
               }
               for (int64_t i = 0; i < n; ++i) {
                 T d = on->grad[r * n + i] * gn->value[i];
                 xn->grad[r * n + i] +=
                     istd[r] * (d - (sum_d + xh[r * n + i] * sum_dx) /
                                        static_cast<T>(n));
               }
             }
           }
         });
  return out;
}

// ---------------------------------------------------------------------------
// Spatial ops

// Zero-padded 2-D correlation. x (b,ci,h,w), w (co,ci,kh,kw), optional bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int64_t stride, int64_t pad) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw ShapeError("conv2d: need x (b,ci,h,w) and w (co,ci,kh,kw), got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  int64_t b = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != ci)
    throw ShapeError("conv2d: input channels " + std::to_string(ci) +
                     " != kernel channels " + std::to_string(w.dim(1)));
  int64_t oh = (h + 2 * pad - kh) / stride + 1;
  int64_t ow = (wd + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1)
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" +
                     std::to_string(kw) + " too large for input " +
                     shape_str(x.shape()) + " with pad " + std::to_string(pad));
  bool has_bias = bias.defined();
  if (has_bias && bias.size() != co)
    throw ShapeError("conv2d: bias length != out channels");
  Tensor<T> out = Tensor<T>::zeros({b, co, oh, ow});
  auto xv = x.data(), wv = w.data();
  auto ov = out.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t oc = 0; oc < co; ++oc) {
      T* oplane = &ov[(bi * co + oc) * oh * ow];
      if (has_bias) {
        T bb = bias.data()[oc];
        for (int64_t i = 0; i < oh * ow; ++i) oplane[i] = bb;
      }
      for (int64_t ic = 0; ic < ci; ++ic) {
        const T* xplane = &xv[(bi * ci + ic) * h * wd];
        const T* kplane = &wv[(oc * ci + ic) * kh * kw];
        for (int64_t ky = 0; ky < kh; ++ky)
          for (int64_t kx = 0; kx < kw; ++kx) {
            T kv = kplane[ky * kw + kx];
            if (kv == T(0)) continue;
            for (int64_t oy = 0; oy < oh; ++oy) {
              int64_t iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              const T* xrow = &xplane[iy * wd];
              T* orow = &oplane[oy * ow];
              for (int64_t ox = 0; ox < ow; ++ox) {
                int64_t ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= wd) continue;
                orow[ox] += kv * xrow[ix];
              }
            }
          }
      }
    }
  std::vector<std::shared_ptr<TensorNode<T>>> parents = {x.node(), w.node()};
  if (has_bias) parents.push_back(bias.node());
  auto *xn = x.node().get(), *wn = w.node().get(), *on = out.node().get();
  TensorNode<T>* bn = has_bias ? bias.node().get() : nullptr;
  attach(out, std::move(parents),
         [xn, wn, bn, on, b, ci, co, h, wd, kh, kw, oh, ow, stride, pad] {
           if (xn->requires_grad) {
             xn->ensure_grad();
             for (int64_t bi = 0; bi < b; ++bi)
               for (int64_t oc = 0; oc < co; ++oc) {
                 const T* gplane = &on->grad[(bi * co + oc) * oh * ow];
                 for (int64_t ic = 0; ic < ci; ++ic) {
                   T* xg = &xn->grad[(bi * ci + ic) * h * wd];
                   const T* kplane = &wn->value[(oc * ci + ic) * kh * kw];
                   for (int64_t ky = 0; ky < kh; ++ky)
                     for (int64_t kx = 0; kx < kw; ++kx) {
                       T kv = kplane[ky * kw + kx];
                       if (kv == T(0)) continue;
                       for (int64_t oy = 0; oy < oh; ++oy) {
                         int64_t iy = oy * stride - pad + ky;
                         if (iy < 0 || iy >= h) continue;
                         const T* grow = &gplane[oy * ow];
                         T* xrow = &xg[iy * wd];
                         for (int64_t ox = 0; ox < ow; ++ox) {
                           int64_t ix = ox * stride - pad + kx;
                           if (ix < 0 || ix >= wd) continue;
                           xrow[ix] += kv * grow[ox];
                         }
                       }
                     }
                 }
               }
           }
           if (wn->requires_grad) {
             wn->ensure_grad();
             for (int64_t bi = 0; bi < b; ++bi)
               for (int64_t oc = 0; oc < co; ++oc) {
                 const T* gplane = &on->grad[(bi * co + oc) * oh * ow];
                 for (int64_t ic = 0; ic < ci; ++ic) {
                   const T* xplane = &xn->value[(bi * ci + ic) * h * wd];
                   T* kg = &wn->grad[(oc * ci + ic) * kh * kw];
                   for (int64_t ky = 0; ky < kh; ++ky)
                     for (int64_t kx = 0; kx < kw; ++kx) {
                       T acc = 0;
                       for (int64_t oy = 0; oy < oh; ++oy) {
                         int64_t iy = oy * stride - pad + ky;
                         if (iy < 0 || iy >= h) continue;
                         const T* grow = &gplane[oy * ow];
                         const T* xrow = &xplane[iy * wd];
                         for (int64_t ox = 0; ox < ow; ++ox) {
                           int64_t ix = ox * stride - pad + kx;
                           if (ix < 0 || ix >= wd) continue;
                           acc += grow[ox] * xrow[ix];
                         }
                       }
                       kg[ky * kw + kx] += acc;
                     }
                 }
               }
           }
           if (bn && bn->requires_grad) {
             bn->ensure_grad();
             for (int64_t bi = 0; bi < b; ++bi)
               for (int64_t oc = 0; oc < co; ++oc) {
                 const T* gplane = &on->grad[(bi * co + oc) * oh * ow];
                 T acc = 0;
                 for (int64_t i = 0; i < oh * ow; ++i) acc += gplane[i];
                 bn->grad[oc] += acc;
               }
           }
         });
  return out;
}

// Reflective padding (edge not repeated): x[-1] maps to x[1].
template <typename T>
Tensor<T> reflect_pad2d(const Tensor<T>& x, int64_t pad) {
  if (x.ndim() != 4) throw ShapeError("reflect_pad2d: need (b,c,h,w)");
  if (pad < 0) throw ShapeError("reflect_pad2d: negative pad");
  if (pad == 0) return x;
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h <= pad || w <= pad)
    throw ShapeError("reflect_pad2d: pad " + std::to_string(pad) +
                     " too large for " + shape_str(x.shape()));
  int64_t oh = h + 2 * pad, ow = w + 2 * pad;
  auto mirror = [](int64_t i, int64_t n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  Tensor<T> out = Tensor<T>::zeros({b, c, oh, ow});
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t p = 0; p < b * c; ++p) {
    const T* xplane = &xv[p * h * w];
    T* oplane = &ov[p * oh * ow];
    for (int64_t oy = 0; oy < oh; ++oy) {
      int64_t iy = mirror(oy - pad, h);
      for (int64_t ox = 0; ox < ow; ++ox)
        oplane[oy * ow + ox] = xplane[iy * w + mirror(ox - pad, w)];
    }
  }
  auto *xn = x.node().get(), *on = out.node().get();
  attach(out, {x.node()}, [xn, on, b, c, h, w, oh, ow, pad, mirror] {
    xn->ensure_grad();
    for (int64_t p = 0; p < b * c; ++p) {
      T* xg = &xn->grad[p * h * w];
      const T* gplane = &on->grad[p * oh * ow];
      for (int64_t oy = 0; oy < oh; ++oy) {
        int64_t iy = mirror(oy - pad, h);
        for (int64_t ox = 0; ox < ow; ++ox)
          xg[iy * w + mirror(ox - pad, w)] += gplane[oy * ow + ox];
      }
    }
  });
  return out;
}

// Per-channel correlation with one fixed (non-learnable) 2-D kernel.
template <typename T>
Tensor<T> blur2d(const Tensor<T>& x, const std::vector<T>& kernel, int64_t ksize,
                 int64_t stride) {
  if (x.ndim() != 4) throw ShapeError("blur2d: need (b,c,h,w)");
  if (stride < 1) throw ShapeError("blur2d: stride must be >= 1");
  if (static_cast<int64_t>(kernel.size()) != ksize * ksize)
    throw ShapeError("blur2d: kernel size mismatch");
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t oh = (h - ksize) / stride + 1, ow = (w - ksize) / stride + 1;
  if (oh < 1 || ow < 1)
    throw ShapeError("blur2d: kernel larger than input " + shape_str(x.shape()));
  Tensor<T> out = Tensor<T>::zeros({b, c, oh, ow});
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t p = 0; p < b * c; ++p) {
    const T* xplane = &xv[p * h * w];
    T* oplane = &ov[p * oh * ow];
    for (int64_t oy = 0; oy < oh; ++oy)
      for (int64_t ox = 0; ox < ow; ++ox) {
        T acc = 0;
        for (int64_t ky = 0; ky < ksize; ++ky) {
          const T* xrow = &xplane[(oy * stride + ky) * w + ox * stride];
          const T* krow = &kernel[ky * ksize];
          for (int64_t kx = 0; kx < ksize; ++kx) acc += krow[kx] * xrow[kx];
        }
        oplane[oy * ow + ox] = acc;
      }
  }
  auto *xn = x.node().get(), *on = out.node().get();
  attach(out, {x.node()}, [xn, on, kernel, ksize, b, c, h, w, oh, ow, stride] {
    xn->ensure_grad();
    for (int64_t p = 0; p < b * c; ++p) {
      T* xg = &xn->grad[p * h * w];
      const T* gplane = &on->grad[p * oh * ow];
      for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox) {
          T g = gplane[oy * ow + ox];
          if (g == T(0)) continue;
          for (int64_t ky = 0; ky < ksize; ++ky) {
            T* xrow = &xg[(oy * stride + ky) * w + ox * stride];
            const T* krow = &kernel[ky * ksize];
            for (int64_t kx = 0; kx < ksize; ++kx) xrow[kx] += g * krow[kx];
          }
        }
    }
  });
  return out;
}

// Global average pool (b,c,h,w) -> (b,c).
template <typename T>
Tensor<T> gap2d(const Tensor<T>& x) {
  if (x.ndim() != 4) throw ShapeError("gap2d: need (b,c,h,w)");
  int64_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({b, c});
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t p = 0; p < b * c; ++p) {
    T acc = 0;
    const T* xplane = &xv[p * plane];
    for (int64_t i = 0; i < plane; ++i) acc += xplane[i];
    ov[p] = acc / static_cast<T>(plane);
  }
  auto *xn = x.node().get(), *on = out.node().get();
  attach(out, {x.node()}, [xn, on, b, c, plane] {
    xn->ensure_grad();
    for (int64_t p = 0; p < b * c; ++p) {
      T g = on->grad[p] / static_cast<T>(plane);
      T* xg = &xn->grad[p * plane];
      for (int64_t i = 0; i < plane; ++i) xg[i] += g;
    }
  });
  return out;
}

// Inverted dropout; identity when not training.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training) {
  if (p < 0 || p >= 1) throw ShapeError("dropout: rate must be in [0,1)");
  if (!training || p == 0) return x;
  T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<T>>(x.size());
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t i = 0; i < x.size(); ++i) {
    T m = rng.bernoulli(p) ? T(0) : keep_scale;
    (*mask)[i] = m;
    ov[i] = xv[i] * m;
  }
  auto *xn = x.node().get(), *on = out.node().get();
  attach(out, {x.node()}, [xn, on, mask] {
    xn->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i)
      xn->grad[i] += on->grad[i] * (*mask)[i];
  });
  return out;
}

// Horizontal flip of the last (width) axis.
template <typename T>
Tensor<T> flip_w(const Tensor<T>& x) {
  if (x.ndim() < 1) throw ShapeError("flip_w: scalar input");
  int64_t w = x.dim(x.ndim() - 1);
  int64_t rows = x.size() / w;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t i = 0; i < w; ++i) ov[r * w + i] = xv[r * w + (w - 1 - i)];
  auto *xn = x.node().get(), *on = out.node().get();
  attach(out, {x.node()}, [xn, on, rows, w] {
    xn->ensure_grad();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t i = 0; i < w; ++i)
        xn->grad[r * w + (w - 1 - i)] += on->grad[r * w + i];
  });
  return out;
}

}  // namespace iqa
