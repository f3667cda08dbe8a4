#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "iqa/nn.hpp"
#include "iqa/pool.hpp"

// Small residual CNN tapping four multi-scale feature maps, plus the
// normalize / pool-to-common-grid / dropout / concat fusion step.

namespace iqa {

struct BackboneConfig {
  std::array<int64_t, 4> channels{8, 16, 32, 64};
  int64_t units_per_block = 1;
  double feature_dropout = 0.1;
};

template <typename T>
struct MultiScaleFeatures {
  Tensor<T> f1, f2, f3, f4;
};

template <typename T>
struct ResidualUnit {
  Conv2dLayer<T> conv1, conv2;
  ChannelNorm<T> norm1, norm2;

  ResidualUnit() = default;
  ResidualUnit(int64_t c, Rng& rng)
      : conv1(c, c, 3, 1, 1, rng),
        conv2(c, c, 3, 1, 1, rng),
        norm1(c),
        norm2(c) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    auto y = relu(norm1.forward(conv1.forward(x), training));
    y = norm2.forward(conv2.forward(y), training);
    return relu(add(y, x));
  }

  void collect(const std::string& prefix, NamedParams<T>& p, NamedBuffers<T>& b) {
    conv1.collect(prefix + ".conv1", p, b);
    norm1.collect(prefix + ".norm1", p, b);
    conv2.collect(prefix + ".conv2", p, b);
    norm2.collect(prefix + ".norm2", p, b);
  }
};

template <typename T>
struct BackboneBlock {
  Conv2dLayer<T> entry;
  ChannelNorm<T> entry_norm;
  std::vector<ResidualUnit<T>> units;

  BackboneBlock() = default;
  BackboneBlock(int64_t cin, int64_t cout, int64_t n_units, Rng& rng)
      : entry(cin, cout, 3, 2, 1, rng), entry_norm(cout) {
    for (int64_t i = 0; i < n_units; ++i) units.emplace_back(cout, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    auto y = relu(entry_norm.forward(entry.forward(x), training));
    for (auto& u : units) y = u.forward(y, training);
    return y;
  }

  void collect(const std::string& prefix, NamedParams<T>& p, NamedBuffers<T>& b) {
    entry.collect(prefix + ".entry", p, b);
    entry_norm.collect(prefix + ".entry_norm", p, b);
    for (size_t i = 0; i < units.size(); ++i)
      units[i].collect(prefix + ".unit" + std::to_string(i), p, b);
  }
};

template <typename T>
struct Backbone {
  BackboneConfig cfg;
  Conv2dLayer<T> stem;
  ChannelNorm<T> stem_norm;
  std::vector<BackboneBlock<T>> blocks;

  Backbone() = default;
  Backbone(const BackboneConfig& cfg_, Rng& rng)
      : cfg(cfg_), stem(3, cfg_.channels[0], 3, 1, 1, rng),
        stem_norm(cfg_.channels[0]) {
    int64_t cin = cfg_.channels[0];
    for (int i = 0; i < 4; ++i) {
      blocks.emplace_back(cin, cfg_.channels[i], cfg_.units_per_block, rng);
      cin = cfg_.channels[i];
    }
  }

  MultiScaleFeatures<T> forward(const Tensor<T>& image, bool training) {
    if (image.ndim() != 4 || image.dim(1) != 3)
      throw ShapeError("backbone: need (b,3,H,W), got " +
                       shape_str(image.shape()));
    if (image.dim(2) % 16 != 0 || image.dim(3) % 16 != 0)
      throw ShapeError("backbone: H and W must be divisible by 16, got " +
                       shape_str(image.shape()));
    auto x = relu(stem_norm.forward(stem.forward(image), training));
    MultiScaleFeatures<T> out;
    out.f1 = blocks[0].forward(x, training);
    out.f2 = blocks[1].forward(out.f1, training);
    out.f3 = blocks[2].forward(out.f2, training);
    out.f4 = blocks[3].forward(out.f3, training);
    return out;
  }

  void collect(const std::string& prefix, NamedParams<T>& p, NamedBuffers<T>& b) {
    stem.collect(prefix + ".stem", p, b);
    stem_norm.collect(prefix + ".stem_norm", p, b);
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".block" + std::to_string(i + 1), p, b);
  }
};

// Normalize each scale per sample, l2pool it down to the last scale's grid,
// apply dropout while training, then concatenate along channels.
template <typename T>
Tensor<T> rescale_and_concat(const MultiScaleFeatures<T>& feats,
                             double dropout_rate, Rng* rng, bool training) {
  const Tensor<T>* fs[4] = {&feats.f1, &feats.f2, &feats.f3, &feats.f4};
  int64_t m4 = feats.f4.dim(2), n4 = feats.f4.dim(3);
  std::vector<Tensor<T>> scales;
  for (int i = 0; i < 4; ++i) {
    const Tensor<T>& f = *fs[i];
    int64_t m = f.dim(2);
    if (m % m4 != 0 || (m / m4) != (f.dim(3) / n4))
      throw ShapeError("rescale_and_concat: scale " + std::to_string(i + 1) +
                       " size " + shape_str(f.shape()) +
                       " is not a power-of-two multiple of the last scale");
    int64_t ratio = m / m4;
    if ((ratio & (ratio - 1)) != 0)
      throw ShapeError("rescale_and_concat: ratio " + std::to_string(ratio) +
                       " is not a power of two");
    Tensor<T> y = euclid_normalize(f);
    for (int64_t r = ratio; r > 1; r /= 2) y = l2pool(y, 3, 2);
    if (training && dropout_rate > 0) {
      if (!rng)
        throw ShapeError("rescale_and_concat: dropout in training needs an rng");
      y = dropout(y, dropout_rate, *rng, true);
    }
    scales.push_back(std::move(y));
  }
  return concat_channels(scales);
}

}  // namespace iqa
