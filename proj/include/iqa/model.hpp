#pragma once

#include <map>
#include <string>

#include "iqa/backbone.hpp"
#include "iqa/encoder.hpp"
#include "iqa/head.hpp"

// Full quality model: backbone -> fuse -> encoder -> head.

namespace iqa {

struct ModelConfig {
  BackboneConfig backbone;
  EncoderConfig encoder;
  int64_t head_hidden = 64;
  uint64_t seed = 0;
  bool use_encoder = true;  // false = conv branch only (ablation baseline)

  int64_t fused_channels() const {
    int64_t c = 0;
    for (int64_t ci : backbone.channels) c += ci;
    return c;
  }

  // Flat key-value echo; the same keys reconstruct the config from
  // checkpoint metadata or a config file.
  std::map<std::string, std::string> echo() const {
    std::map<std::string, std::string> kv;
    std::string ch;
    for (size_t i = 0; i < backbone.channels.size(); ++i) {
      if (i) ch += ",";
      ch += std::to_string(backbone.channels[i]);
    }
    kv["channels"] = ch;
    kv["units_per_block"] = std::to_string(backbone.units_per_block);
    kv["feature_dropout"] = fmt_real(backbone.feature_dropout);
    kv["encoder_layers"] = std::to_string(encoder.n_layers);
    kv["encoder_dim"] = std::to_string(encoder.d);
    kv["encoder_heads"] = std::to_string(encoder.heads);
    kv["encoder_ffn_dim"] = std::to_string(encoder.ffn_dim);
    kv["pe_temperature"] = fmt_real(encoder.pe_temperature);
    kv["use_pe"] = encoder.use_pe ? "true" : "false";
    kv["use_encoder"] = use_encoder ? "true" : "false";
    kv["head_hidden"] = std::to_string(head_hidden);
    kv["model_seed"] = std::to_string(seed);
    return kv;
  }
};

template <typename T>
struct Model {
  ModelConfig cfg;
  Backbone<T> backbone;
  Encoder<T> encoder;
  Head<T> head;

  Model() = default;
  explicit Model(const ModelConfig& cfg_) : cfg(cfg_) {
    Rng rng(cfg_.seed);
    Rng brng = rng.fork(1), erng = rng.fork(2), hrng = rng.fork(3);
    backbone = Backbone<T>(cfg_.backbone, brng);
    encoder = Encoder<T>(cfg_.fused_channels(), cfg_.encoder, erng);
    head = Head<T>(cfg_.backbone.channels[3], cfg_.encoder.d, cfg_.head_hidden,
                   hrng);
  }

  // rng drives feature dropout and is only consulted while training.
  ModelOutput<T> forward(const Tensor<T>& image, bool training,
                         Rng* rng = nullptr) {
    auto feats = backbone.forward(image, training);
    if (!cfg.use_encoder) return head.forward(feats.f4, feats.f4, false);
    auto fused = rescale_and_concat(feats, cfg.backbone.feature_dropout, rng,
                                    training);
    auto fhat = encoder.forward(fused);
    return head.forward(feats.f4, fhat);
  }

  // Encoder output only; the quality-map path wants F^ for a full image.
  Tensor<T> forward_fhat(const Tensor<T>& image) {
    auto feats = backbone.forward(image, false);
    return encoder.forward(rescale_and_concat(feats, 0.0, nullptr, false));
  }

  // Conv-branch feature map F4 (the quality-map alternative source).
  Tensor<T> forward_f4(const Tensor<T>& image) {
    return backbone.forward(image, false).f4;
  }

  NamedParams<T> params() {
    NamedParams<T> p;
    NamedBuffers<T> b;
    collect(p, b);
    return p;
  }

  NamedBuffers<T> buffers() {
    NamedParams<T> p;
    NamedBuffers<T> b;
    collect(p, b);
    return b;
  }

  void collect(NamedParams<T>& p, NamedBuffers<T>& b) {
    backbone.collect("backbone", p, b);
    encoder.collect("encoder", p, b);
    head.collect("head", p, b);
  }
};

}  // namespace iqa
