#pragma once

#include <string>

#include "iqa/nn.hpp"

// Fusion head: pool the conv branch (F4) and the attention branch (F^),
// run each pooled vector through its own two-layer FC ending in a scalar,
// and sum the scalars into the quality score.

namespace iqa {

template <typename T>
struct ModelOutput {
  Tensor<T> q;             // (b)
  Tensor<T> conv_logit;    // (b)
  Tensor<T> atten_logit;   // (b)
  Tensor<T> pooled_conv;   // (b, c4)
  Tensor<T> pooled_atten;  // (b, d)
  Tensor<T> latent;        // (b, c4 + d)
};

template <typename T>
struct Head {
  LinearLayer<T> conv_fc1, conv_fc2, atten_fc1, atten_fc2;

  Head() = default;
  Head(int64_t c4, int64_t d, int64_t hidden, Rng& rng)
      : conv_fc1(c4, hidden, rng), conv_fc2(hidden, 1, rng),
        atten_fc1(d, hidden, rng), atten_fc2(hidden, 1, rng) {}

  // with_atten=false silences the attention branch entirely (conv-only
  // ablation): its logit and pooled vector become zeros outside the graph.
  ModelOutput<T> forward(const Tensor<T>& f4, const Tensor<T>& fhat,
                         bool with_atten = true) const {
    if (f4.ndim() != 4 || fhat.ndim() != 4 || f4.dim(0) != fhat.dim(0) ||
        f4.dim(2) != fhat.dim(2) || f4.dim(3) != fhat.dim(3))
      throw ShapeError("head: branch shapes disagree: " + shape_str(f4.shape()) +
                       " vs " + shape_str(fhat.shape()));
    int64_t b = f4.dim(0);
    ModelOutput<T> out;
    out.pooled_conv = gap2d(f4);
    out.pooled_atten = with_atten
                           ? gap2d(fhat)
                           : Tensor<T>::zeros({b, atten_fc1.w.value.dim(1)});
    auto cl = conv_fc2.forward(relu(conv_fc1.forward(out.pooled_conv)));
    out.conv_logit = reshape(cl, {b});
    if (with_atten) {
      auto al = atten_fc2.forward(relu(atten_fc1.forward(out.pooled_atten)));
      out.atten_logit = reshape(al, {b});
      out.q = add(out.conv_logit, out.atten_logit);
    } else {
      out.atten_logit = Tensor<T>::zeros({b});
      out.q = out.conv_logit;
    }
    out.latent = concat_cols(out.pooled_conv, out.pooled_atten);
    return out;
  }

  void collect(const std::string& prefix, NamedParams<T>& p, NamedBuffers<T>& b) {
    conv_fc1.collect(prefix + ".conv_fc1", p, b);
    conv_fc2.collect(prefix + ".conv_fc2", p, b);
    atten_fc1.collect(prefix + ".atten_fc1", p, b);
    atten_fc2.collect(prefix + ".atten_fc2", p, b);
  }
};

}  // namespace iqa
