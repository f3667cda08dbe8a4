#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "iqa/nn.hpp"

// Transformer encoder over the fused feature grid: 1x1 projection to width d,
// 2D sinusoidal positional encoding added to queries and keys at every layer,
// N post-norm layers of multi-head self-attention + FFN.

namespace iqa {

struct EncoderConfig {
  int64_t n_layers = 2;
  int64_t d = 64;
  int64_t heads = 16;
  int64_t ffn_dim = 0;  // 0 -> 4*d
  double pe_temperature = 10000.0;
  bool use_pe = true;

  int64_t ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * d; }
};

// (L, d) table: first d/2 lanes encode the row index, last d/2 the column,
// each half alternating sin/cos at geometric frequencies.
template <typename T>
Tensor<T> positional_encoding(int64_t m, int64_t n, int64_t d,
                              double temperature) {
  if (d % 4 != 0)
    throw ShapeError("positional_encoding: width " + std::to_string(d) +
                     " must be divisible by 4");
  int64_t L = m * n, dh = d / 2;
  std::vector<T> pe(static_cast<size_t>(L * d));
  for (int64_t y = 0; y < m; ++y)
    for (int64_t x = 0; x < n; ++x) {
      T* row = &pe[(y * n + x) * d];
      for (int64_t i = 0; i < dh / 2; ++i) {
        double div = std::pow(temperature, (2.0 * i) / dh);
        row[2 * i] = static_cast<T>(std::sin(y / div));
        row[2 * i + 1] = static_cast<T>(std::cos(y / div));
        row[dh + 2 * i] = static_cast<T>(std::sin(x / div));
        row[dh + 2 * i + 1] = static_cast<T>(std::cos(x / div));
      }
    }
  return Tensor<T>::from({L, d}, std::move(pe));
}

template <typename T>
struct EncoderLayer {
  LinearLayer<T> wq, wk, wv, wo, ffn1, ffn2;
  LayerNormLayer<T> ln1, ln2;
  int64_t heads = 1;
  Tensor<T> last_attn;  // (b, h, L, L) probe from the most recent forward

  EncoderLayer() = default;
  EncoderLayer(int64_t d, int64_t h, int64_t ffn_dim, Rng& rng)
      : wq(d, d, rng), wk(d, d, rng), wv(d, d, rng), wo(d, d, rng),
        ffn1(d, ffn_dim, rng), ffn2(ffn_dim, d, rng), ln1(d), ln2(d),
        heads(h) {}

  // pe may be undefined (positional encoding disabled).
  Tensor<T> forward(const Tensor<T>& src, const Tensor<T>& pe) {
    int64_t d = src.dim(2);
    if (d % heads != 0)
      throw ShapeError("encoder: heads must divide width");
    T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d / heads)));
    Tensor<T> qk_in = pe.defined() ? add_bcast_batch(src, pe) : src;
    auto Q = split_heads(wq.forward(qk_in), heads);
    auto K = split_heads(wk.forward(qk_in), heads);
    auto V = split_heads(wv.forward(src), heads);
    auto attn = softmax_last(scale(matmul(Q, transpose_last2(K)), inv_sqrt));
    last_attn = attn;
    auto ctx = wo.forward(merge_heads(matmul(attn, V)));
    auto x = ln1.forward(add(src, ctx));
    auto ff = ffn2.forward(relu(ffn1.forward(x)));
    return ln2.forward(add(x, ff));
  }

  void collect(const std::string& prefix, NamedParams<T>& p, NamedBuffers<T>& b) {
    wq.collect(prefix + ".wq", p, b);
    wk.collect(prefix + ".wk", p, b);
    wv.collect(prefix + ".wv", p, b);
    wo.collect(prefix + ".wo", p, b);
    ln1.collect(prefix + ".ln1", p, b);
    ffn1.collect(prefix + ".ffn1", p, b);
    ffn2.collect(prefix + ".ffn2", p, b);
    ln2.collect(prefix + ".ln2", p, b);
  }
};

template <typename T>
struct Encoder {
  EncoderConfig cfg;
  Conv2dLayer<T> proj;  // 1x1 conv: fused channels -> d
  std::vector<EncoderLayer<T>> layers;

  Encoder() = default;
  Encoder(int64_t in_channels, const EncoderConfig& cfg_, Rng& rng)
      : cfg(cfg_), proj(in_channels, cfg_.d, 1, 1, 0, rng) {
    if (cfg_.d % cfg_.heads != 0)
      throw ShapeError("encoder: heads " + std::to_string(cfg_.heads) +
                       " must divide width " + std::to_string(cfg_.d));
    for (int64_t i = 0; i < cfg_.n_layers; ++i)
      layers.emplace_back(cfg_.d, cfg_.heads, cfg_.ffn(), rng);
  }

  // F~ (b, C, m4, n4) -> F^ (b, d, m4, n4)
  Tensor<T> forward(const Tensor<T>& fused) {
    int64_t m = fused.dim(2), n = fused.dim(3);
    Tensor<T> tokens = chw_to_tokens(proj.forward(fused));
    Tensor<T> pe;
    if (cfg.use_pe && !layers.empty())
      pe = positional_encoding<T>(m, n, cfg.d, cfg.pe_temperature);
    for (auto& layer : layers) tokens = layer.forward(tokens, pe);
    return tokens_to_chw(tokens, m, n);
  }

  void collect(const std::string& prefix, NamedParams<T>& p, NamedBuffers<T>& b) {
    proj.collect(prefix + ".proj", p, b);
    for (size_t i = 0; i < layers.size(); ++i)
      layers[i].collect(prefix + ".layer" + std::to_string(i), p, b);
  }
};

}  // namespace iqa
