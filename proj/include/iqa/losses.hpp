#pragma once

#include <span>
#include <vector>

#include "iqa/head.hpp"
#include "iqa/ops.hpp"

// Training objectives: quality regression, relative-ranking with adaptive
// margins from the targets, self-consistency across an equivariant transform,
// and their weighted total.

namespace iqa {

struct LossWeights {
  double lambda1 = 0.5;   // ranking-consistency term inside the consistency loss
  double lambda2 = 0.05;  // ranking loss weight in the total
  double lambda3 = 1.0;   // consistency loss weight in the total
};

enum class LossNorm { kL1, kL2 };
enum class ConsistencyOn { kScalar, kVector };

struct RankingInfo {
  bool skipped = false;
  int64_t i_max = -1, i_max2 = -1, i_min = -1, i_min2 = -1;
  double margin1 = 0, margin2 = 0;
};

// Mean |q - s| (or mean squared for kL2). Targets carry no gradient.
template <typename T>
Tensor<T> quality_loss(const Tensor<T>& q, const Tensor<T>& s,
                       LossNorm norm = LossNorm::kL1) {
  if (q.size() == 0) throw ShapeError("quality_loss: empty batch");
  check_same_shape(q, s, "quality_loss");
  auto d = sub(q, s);
  return norm == LossNorm::kL1 ? mean_all(abs_t(d)) : mean_all(square(d));
}

// Indices of the highest, second-highest, lowest and second-lowest targets;
// ties broken by lowest index.
template <typename T>
RankingInfo find_extremes(std::span<const T> s) {
  RankingInfo info;
  if (s.size() < 4) {
    info.skipped = true;
    return info;
  }
  bool all_equal = true;
  for (size_t i = 1; i < s.size(); ++i)
    if (s[i] != s[0]) {
      all_equal = false;
      break;
    }
  if (all_equal) {
    info.skipped = true;
    return info;
  }
  auto arg_best = [&](bool want_max, int64_t skip) {
    int64_t best = -1;
    for (int64_t i = 0; i < static_cast<int64_t>(s.size()); ++i) {
      if (i == skip) continue;
      if (best < 0 || (want_max ? s[i] > s[best] : s[i] < s[best])) best = i;
    }
    return best;
  };
  info.i_max = arg_best(true, -1);
  info.i_max2 = arg_best(true, info.i_max);
  info.i_min = arg_best(false, -1);
  info.i_min2 = arg_best(false, info.i_min);
  info.margin1 = static_cast<double>(s[info.i_max2]) - s[info.i_min];
  info.margin2 = static_cast<double>(s[info.i_max]) - s[info.i_min2];
  return info;
}

// Two hinge terms pushing the extreme predictions apart by target-derived
// margins. Margins are constants; gradients flow only through q. Batches of
// fewer than 4 or with all-equal targets contribute 0.
template <typename T>
Tensor<T> relative_ranking_loss(const Tensor<T>& q, std::span<const T> s,
                                RankingInfo* info_out = nullptr) {
  if (q.ndim() != 1 || static_cast<size_t>(q.size()) != s.size())
    throw ShapeError("relative_ranking_loss: q " + shape_str(q.shape()) +
                     " vs targets length " + std::to_string(s.size()));
  RankingInfo info = find_extremes<T>(s);
  if (info_out) *info_out = info;
  if (info.skipped) return Tensor<T>::scalar(T(0));
  auto q_max = gather_index(q, info.i_max);
  auto q_max2 = gather_index(q, info.i_max2);
  auto q_min = gather_index(q, info.i_min);
  auto q_min2 = gather_index(q, info.i_min2);
  auto d_top = abs_t(sub(q_max, q_max2));
  auto d_span = abs_t(sub(q_max, q_min));
  auto d_bot = abs_t(sub(q_min2, q_min));
  auto term1 =
      relu(add_scalar(sub(d_top, d_span), static_cast<T>(info.margin1)));
  auto term2 =
      relu(add_scalar(sub(d_bot, d_span), static_cast<T>(info.margin2)));
  return add(term1, term2);
}

// Mean abs difference between branch logits of the two passes, plus the
// weighted abs difference of the two ranking losses. Gradients flow through
// both passes and both ranking terms.
template <typename T>
Tensor<T> self_consistency_loss(const ModelOutput<T>& out_a,
                                const ModelOutput<T>& out_b,
                                const Tensor<T>& rr_a, const Tensor<T>& rr_b,
                                T lambda1,
                                ConsistencyOn on = ConsistencyOn::kScalar) {
  const Tensor<T>&conv_a = on == ConsistencyOn::kScalar ? out_a.conv_logit
                                                        : out_a.pooled_conv,
        &conv_b = on == ConsistencyOn::kScalar ? out_b.conv_logit
                                               : out_b.pooled_conv,
        &att_a = on == ConsistencyOn::kScalar ? out_a.atten_logit
                                              : out_a.pooled_atten,
        &att_b = on == ConsistencyOn::kScalar ? out_b.atten_logit
                                              : out_b.pooled_atten;
  check_same_shape(conv_a, conv_b, "self_consistency_loss");
  check_same_shape(att_a, att_b, "self_consistency_loss");
  auto conv_term = mean_all(abs_t(sub(conv_a, conv_b)));
  auto atten_term = mean_all(abs_t(sub(att_a, att_b)));
  auto rank_term = scale(abs_t(sub(rr_a, rr_b)), lambda1);
  return add(add(conv_term, atten_term), rank_term);
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& quality, const Tensor<T>& ranking,
                     const Tensor<T>& consistency, const LossWeights& w) {
  return add(quality, add(scale(ranking, static_cast<T>(w.lambda2)),
                          scale(consistency, static_cast<T>(w.lambda3))));
}

// One training-log row.
struct LossReport {
  double quality = 0, ranking = 0, consistency = 0, total = 0;
  double margin1 = 0, margin2 = 0;
};

}  // namespace iqa
