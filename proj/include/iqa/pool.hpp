#pragma once

#include <cmath>
#include <vector>

#include "iqa/ops.hpp"

// Anti-aliased downsampling (l2pool with a Hamming window) and per-sample
// feature normalization.

namespace iqa {

// Hamming window of length m: w(n) = 0.54 - 0.46 cos(2*pi*n/(m-1)).
template <typename T = float>
std::vector<T> hamming_window(int64_t m) {
  if (m < 1) throw ShapeError("hamming_window: length must be >= 1");
  std::vector<T> w(m);
  if (m == 1) {
    w[0] = T(1);
    return w;
  }
  for (int64_t n = 0; n < m; ++n)
    w[n] = static_cast<T>(0.54 - 0.46 * std::cos(2.0 * M_PI * n / (m - 1)));
  return w;
}

// Outer product of the window with itself, normalized to unit sum.
template <typename T = float>
std::vector<T> hamming_kernel2d(int64_t m) {
  std::vector<T> w = hamming_window<T>(m);
  std::vector<T> k(m * m);
  T total = 0;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < m; ++j) {
      k[i * m + j] = w[i] * w[j];
      total += k[i * m + j];
    }
  for (T& v : k) v /= total;
  return k;
}

// l2pool: sqrt of the windowed average of squares. Output is ceil(h/stride) x
// ceil(w/stride) via reflective padding of (m-1)/2 on each side (odd m).
template <typename T>
Tensor<T> l2pool(const Tensor<T>& x, int64_t ksize, int64_t stride,
                 T sqrt_floor = T(1e-12)) {
  if (ksize % 2 != 1) throw ShapeError("l2pool: kernel size must be odd");
  std::vector<T> k = hamming_kernel2d<T>(ksize);
  Tensor<T> padded = reflect_pad2d(square(x), (ksize - 1) / 2);
  return sqrt_guarded(blur2d(padded, k, ksize, stride), sqrt_floor);
}

// Per-sample Euclidean normalization: y_b = x_b / max(||x_b||_2, eps) where
// the norm runs over all non-batch elements.
template <typename T>
Tensor<T> euclid_normalize(const Tensor<T>& x, T eps = T(1e-10)) {
  if (x.ndim() < 2) throw ShapeError("euclid_normalize: need batched input");
  int64_t b = x.dim(0);
  int64_t inner = x.size() / b;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto denom = std::make_shared<std::vector<T>>(b);
  auto clamped = std::make_shared<std::vector<char>>(b);
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t bi = 0; bi < b; ++bi) {
    const T* xs = &xv[bi * inner];
    T ss = 0;
    for (int64_t i = 0; i < inner; ++i) ss += xs[i] * xs[i];
    T norm = std::sqrt(ss);
    (*clamped)[bi] = norm < eps;
    T d = norm < eps ? eps : norm;
    (*denom)[bi] = d;
    for (int64_t i = 0; i < inner; ++i) ov[bi * inner + i] = xs[i] / d;
  }
  auto *xn = x.node().get(), *on = out.node().get();
  attach(out, {x.node()}, [xn, on, denom, clamped, b, inner] {
    xn->ensure_grad();
    for (int64_t bi = 0; bi < b; ++bi) {
      const T* g = &on->grad[bi * inner];
      const T* y = &on->value[bi * inner];
      T* xg = &xn->grad[bi * inner];
      T d = (*denom)[bi];
      if ((*clamped)[bi]) {
        // Below the clamp the denominator is a constant.
        for (int64_t i = 0; i < inner; ++i) xg[i] += g[i] / d;
      } else {
        T dot = 0;
        for (int64_t i = 0; i < inner; ++i) dot += g[i] * y[i];
        for (int64_t i = 0; i < inner; ++i)
          xg[i] += (g[i] - y[i] * dot) / d;
      }
    }
  });
  return out;
}

}  // namespace iqa
