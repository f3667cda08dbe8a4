#pragma once

#include <array>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "iqa/ops.hpp"
#include "iqa/rng.hpp"

// Layers: learnable parameters plus forward wiring. Every layer exposes
// collect(prefix, params, buffers) so optimizers and checkpoints can walk the
// whole model by name.

namespace iqa {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Param<T>*>>;
template <typename T>
using NamedBuffers = std::vector<std::pair<std::string, Tensor<T>*>>;

// Kaiming-style fan-in init: N(0, sqrt(2/fan_in)).
template <typename T>
Tensor<T> kaiming_init(Shape shape, int64_t fan_in, Rng& rng) {
  std::vector<T> v(static_cast<size_t>(numel(shape)));
  double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& x : v) x = static_cast<T>(rng.normal() * std);
  return Tensor<T>::from(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------
// Channel normalization ops (batch stats per channel over b,h,w)

template <typename T>
Tensor<T> channel_norm_train(const Tensor<T>& x, const Tensor<T>& gamma,
                             const Tensor<T>& beta, T eps,
                             std::vector<T>* batch_mean,
                             std::vector<T>* batch_var) {
  if (x.ndim() != 4) throw ShapeError("channel_norm: need (b,c,h,w)");
  int64_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (gamma.size() != c || beta.size() != c)
    throw ShapeError("channel_norm: affine size != channels");
  int64_t n = b * plane;
  std::vector<T> mean(c, T(0)), var(c, T(0)), istd(c);
  auto xv = x.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const T* p = &xv[(bi * c + ci) * plane];
      T acc = 0;
      for (int64_t i = 0; i < plane; ++i) acc += p[i];
      mean[ci] += acc;
    }
  for (int64_t ci = 0; ci < c; ++ci) mean[ci] /= static_cast<T>(n);
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const T* p = &xv[(bi * c + ci) * plane];
      T acc = 0;
      for (int64_t i = 0; i < plane; ++i) {
        T d = p[i] - mean[ci];
        acc += d * d;
      }
      var[ci] += acc;
    }
  for (int64_t ci = 0; ci < c; ++ci) {
    var[ci] /= static_cast<T>(n);
    istd[ci] = T(1) / std::sqrt(var[ci] + eps);
  }
  if (batch_mean) *batch_mean = mean;
  if (batch_var) *batch_var = var;

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto ov = out.data();
  auto gv = gamma.data(), bv = beta.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const T* p = &xv[(bi * c + ci) * plane];
      T* o = &ov[(bi * c + ci) * plane];
      T* xh = &(*xhat)[(bi * c + ci) * plane];
      for (int64_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - mean[ci]) * istd[ci];
        o[i] = xh[i] * gv[ci] + bv[ci];
      }
    }
  auto istd_s = std::make_shared<std::vector<T>>(std::move(istd));
  auto *xn = x.node().get(), *gn = gamma.node().get(), *bn = beta.node().get();
  auto* on = out.node().get();
  attach(out, {x.node(), gamma.node(), beta.node()},
         [xn, gn, bn, on, xhat, istd_s, b, c, plane, n] {
           const auto& xh = *xhat;
           if (bn->requires_grad) {
             bn->ensure_grad();
             for (int64_t bi = 0; bi < b; ++bi)
               for (int64_t ci = 0; ci < c; ++ci) {
                 const T* g = &on->grad[(bi * c + ci) * plane];
                 T acc = 0;
                 for (int64_t i = 0; i < plane; ++i) acc += g[i];
                 bn->grad[ci] += acc;
               }
           }
           if (gn->requires_grad) {
             gn->ensure_grad();
             for (int64_t bi = 0; bi < b; ++bi)
               for (int64_t ci = 0; ci < c; ++ci) {
                 const T* g = &on->grad[(bi * c + ci) * plane];
                 const T* h = &xh[(bi * c + ci) * plane];
                 T acc = 0;
                 for (int64_t i = 0; i < plane; ++i) acc += g[i] * h[i];
                 gn->grad[ci] += acc;
               }
           }
           if (xn->requires_grad) {
             xn->ensure_grad();
             // dx = istd/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
             for (int64_t ci = 0; ci < c; ++ci) {
               T sum_d = 0, sum_dx = 0;
               for (int64_t bi = 0; bi < b; ++bi) {
                 const T* g = &on->grad[(bi * c + ci) * plane];
                 const T* h = &xh[(bi * c + ci) * plane];
                 for (int64_t i = 0; i < plane; ++i) {
                   T d = g[i] * gn->value[ci];
                   sum_d += d;
                   sum_dx += d * h[i];
                 }
               }
               for (int64_t bi = 0; bi < b; ++bi) {
                 const T* g = &on->grad[(bi * c + ci) * plane];
                 const T* h = &xh[(bi * c + ci) * plane];
                 T* xg = &xn->grad[(bi * c + ci) * plane];
                 for (int64_t i = 0; i < plane; ++i) {
                   T d = g[i] * gn->value[ci];
                   xg[i] += (*istd_s)[ci] *
                            (d - (sum_d + h[i] * sum_dx) / static_cast<T>(n));
                 }
               }
             }
           }
         });
  return out;
}

template <typename T>
Tensor<T> channel_norm_eval(const Tensor<T>& x, const std::vector<T>& mean,
                            const std::vector<T>& var, const Tensor<T>& gamma,
                            const Tensor<T>& beta, T eps) {
  if (x.ndim() != 4) throw ShapeError("channel_norm: need (b,c,h,w)");
  int64_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (static_cast<int64_t>(mean.size()) != c ||
      static_cast<int64_t>(var.size()) != c || gamma.size() != c ||
      beta.size() != c)
    throw ShapeError("channel_norm: stat/affine size != channels");
  auto istd_s = std::make_shared<std::vector<T>>(c);
  auto mean_s = std::make_shared<std::vector<T>>(mean);
  for (int64_t ci = 0; ci < c; ++ci)
    (*istd_s)[ci] = T(1) / std::sqrt(var[ci] + eps);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto gv = gamma.data(), bv = beta.data();
  auto ov = out.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const T* p = &xv[(bi * c + ci) * plane];
      T* o = &ov[(bi * c + ci) * plane];
      T a = gv[ci] * (*istd_s)[ci];
      T shift = bv[ci] - mean[ci] * a;
      for (int64_t i = 0; i < plane; ++i) o[i] = p[i] * a + shift;
    }
  auto *xn = x.node().get(), *gn = gamma.node().get(), *bn = beta.node().get();
  auto* on = out.node().get();
  attach(out, {x.node(), gamma.node(), beta.node()},
         [xn, gn, bn, on, istd_s, mean_s, b, c, plane] {
           for (int64_t bi = 0; bi < b; ++bi)
             for (int64_t ci = 0; ci < c; ++ci) {
               const T* g = &on->grad[(bi * c + ci) * plane];
               const T* xvv = &xn->value[(bi * c + ci) * plane];
               T istd = (*istd_s)[ci];
               if (xn->requires_grad) {
                 xn->ensure_grad();
                 T* xg = &xn->grad[(bi * c + ci) * plane];
                 T a = gn->value[ci] * istd;
                 for (int64_t i = 0; i < plane; ++i) xg[i] += g[i] * a;
               }
               if (gn->requires_grad) {
                 gn->ensure_grad();
                 T acc = 0;
                 for (int64_t i = 0; i < plane; ++i)
                   acc += g[i] * (xvv[i] - (*mean_s)[ci]) * istd;
                 gn->grad[ci] += acc;
               }
               if (bn->requires_grad) {
                 bn->ensure_grad();
                 T acc = 0;
                 for (int64_t i = 0; i < plane; ++i) acc += g[i];
                 bn->grad[ci] += acc;
               }
             }
         });
  return out;
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
struct Conv2dLayer {
  Param<T> w, b;
  int64_t stride = 1, pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(int64_t cin, int64_t cout, int64_t k, int64_t stride_, int64_t pad_,
              Rng& rng)
      : w(kaiming_init<T>({cout, cin, k, k}, cin * k * k, rng)),
        b(Tensor<T>::zeros({cout})),
        stride(stride_),
        pad(pad_) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv2d(x, w.value, b.value, stride, pad);
  }

  void collect(const std::string& prefix, NamedParams<T>& params,
               NamedBuffers<T>&) {
    params.emplace_back(prefix + ".w", &w);
    params.emplace_back(prefix + ".b", &b);
  }
};

template <typename T>
struct LinearLayer {
  Param<T> w, b;

  LinearLayer() = default;
  LinearLayer(int64_t in, int64_t out, Rng& rng)
      : w(kaiming_init<T>({out, in}, in, rng)), b(Tensor<T>::zeros({out})) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    return linear(x, w.value, b.value);
  }

  void collect(const std::string& prefix, NamedParams<T>& params,
               NamedBuffers<T>&) {
    params.emplace_back(prefix + ".w", &w);
    params.emplace_back(prefix + ".b", &b);
  }
};

template <typename T>
struct LayerNormLayer {
  Param<T> gamma, beta;
  T eps = T(1e-5);

  LayerNormLayer() = default;
  explicit LayerNormLayer(int64_t n)
      : gamma(Tensor<T>::full({n}, T(1))), beta(Tensor<T>::zeros({n})) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    return layernorm_last(x, gamma.value, beta.value, eps);
  }

  void collect(const std::string& prefix, NamedParams<T>& params,
               NamedBuffers<T>&) {
    params.emplace_back(prefix + ".gamma", &gamma);
    params.emplace_back(prefix + ".beta", &beta);
  }
};

// BatchNorm2d-style channel norm: batch statistics while training, running
// statistics in eval. Running stats live in 1-channel-per-entry buffers so
// they ride along in checkpoints.
template <typename T>
struct ChannelNorm {
  Param<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  ChannelNorm() = default;
  explicit ChannelNorm(int64_t c)
      : gamma(Tensor<T>::full({c}, T(1))),
        beta(Tensor<T>::zeros({c})),
        running_mean(Tensor<T>::zeros({c})),
        running_var(Tensor<T>::full({c}, T(1))) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    if (training) {
      std::vector<T> m, v;
      Tensor<T> out =
          channel_norm_train(x, gamma.value, beta.value, eps, &m, &v);
      auto rm = running_mean.data();
      auto rv = running_var.data();
      for (size_t i = 0; i < m.size(); ++i) {
        rm[i] = (T(1) - momentum) * rm[i] + momentum * m[i];
        rv[i] = (T(1) - momentum) * rv[i] + momentum * v[i];
      }
      return out;
    }
    std::vector<T> m(running_mean.data().begin(), running_mean.data().end());
    std::vector<T> v(running_var.data().begin(), running_var.data().end());
    return channel_norm_eval(x, m, v, gamma.value, beta.value, eps);
  }

  void collect(const std::string& prefix, NamedParams<T>& params,
               NamedBuffers<T>& buffers) {
    params.emplace_back(prefix + ".gamma", &gamma);
    params.emplace_back(prefix + ".beta", &beta);
    buffers.emplace_back(prefix + ".running_mean", &running_mean);
    buffers.emplace_back(prefix + ".running_var", &running_var);
  }
};

}  // namespace iqa
