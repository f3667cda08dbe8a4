#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "iqa/gradcheck.hpp"
#include "iqa/losses.hpp"

using namespace iqa;

namespace {

template <class T>
Tensor<T> vec(std::initializer_list<T> v) {
  return Tensor<T>::from(Shape{static_cast<int64_t>(v.size())},
                         std::vector<T>(v));
}

// Reference extreme finder: stable sort by (value, index).
template <class T>
RankingInfo sort_extremes(const std::vector<T>& s) {
  RankingInfo info;
  std::vector<int64_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto by_max = idx, by_min = idx;
  std::stable_sort(by_max.begin(), by_max.end(),
                   [&](int64_t a, int64_t b) { return s[a] > s[b]; });
  std::stable_sort(by_min.begin(), by_min.end(),
                   [&](int64_t a, int64_t b) { return s[a] < s[b]; });
  info.i_max = by_max[0];
  info.i_max2 = by_max[1];
  info.i_min = by_min[0];
  info.i_min2 = by_min[1];
  info.margin1 = static_cast<double>(s[info.i_max2]) - s[info.i_min];
  info.margin2 = static_cast<double>(s[info.i_max]) - s[info.i_min2];
  return info;
}

// Minimal ModelOutput carrying just the fields the consistency loss reads.
template <class T>
ModelOutput<T> fake_output(std::vector<T> conv, std::vector<T> atten) {
  ModelOutput<T> out;
  int64_t n = static_cast<int64_t>(conv.size());
  out.conv_logit = Tensor<T>::from({n}, std::move(conv));
  out.atten_logit = Tensor<T>::from({n}, std::move(atten));
  out.pooled_conv = Tensor<T>::zeros({n, 2});
  out.pooled_atten = Tensor<T>::zeros({n, 2});
  return out;
}

}  // namespace

TEST_CASE("quality loss worked values") {
  auto s = vec<double>({2, 5});
  CHECK(quality_loss(vec<double>({2, 5}), s).item() == 0.0);
  CHECK(quality_loss(vec<double>({3, 6}), s).item() == doctest::Approx(1.0));
  CHECK(quality_loss(vec<double>({1, 3}), s).item() == doctest::Approx(1.5));
  CHECK(quality_loss(vec<double>({1, 3}), s, LossNorm::kL2).item() ==
        doctest::Approx(2.5));
  CHECK_THROWS_AS(
      quality_loss(Tensor<double>::zeros({0}), Tensor<double>::zeros({0})),
      ShapeError);
  CHECK_THROWS_AS(quality_loss(vec<double>({1, 2}), vec<double>({1, 2, 3})),
                  ShapeError);
}

TEST_CASE("find_extremes worked examples and tie rule") {
  {
    std::vector<float> s{90, 70, 40, 10};
    auto info = find_extremes<float>(s);
    CHECK(info.i_max == 0);
    CHECK(info.i_max2 == 1);
    CHECK(info.i_min == 3);
    CHECK(info.i_min2 == 2);
    CHECK(info.margin1 == 60.0);
    CHECK(info.margin2 == 50.0);
    CHECK_FALSE(info.skipped);
  }
  {
    std::vector<float> s{10, 90, 70, 40};
    auto info = find_extremes<float>(s);
    CHECK(info.i_max == 1);
    CHECK(info.i_max2 == 2);
    CHECK(info.i_min == 0);
    CHECK(info.i_min2 == 3);
  }
  {
    // ties break to the lowest index on both ends
    std::vector<float> s{5, 5, 1, 1};
    auto info = find_extremes<float>(s);
    CHECK(info.i_max == 0);
    CHECK(info.i_max2 == 1);
    CHECK(info.i_min == 2);
    CHECK(info.i_min2 == 3);
  }
  CHECK(find_extremes<float>(std::vector<float>{1, 2, 3}).skipped);
  CHECK(find_extremes<float>(std::vector<float>{7, 7, 7, 7, 7}).skipped);
}

TEST_CASE("find_extremes agrees with a sort-based oracle") {
  Rng rng(101);
  for (int trial = 0; trial < 300; ++trial) {
    int64_t n = 4 + static_cast<int64_t>(rng.next_index(13));
    std::vector<float> s(n);
    // small integer values force frequent ties
    for (auto& v : s) v = static_cast<float>(rng.next_index(8));
    bool all_equal =
        std::all_of(s.begin(), s.end(), [&](float v) { return v == s[0]; });
    auto got = find_extremes<float>(s);
    if (all_equal) {
      CHECK(got.skipped);
      continue;
    }
    auto want = sort_extremes(s);
    CHECK(got.i_max == want.i_max);
    CHECK(got.i_max2 == want.i_max2);
    CHECK(got.i_min == want.i_min);
    CHECK(got.i_min2 == want.i_min2);
    CHECK(got.margin1 == want.margin1);
    CHECK(got.margin2 == want.margin2);
  }
}

TEST_CASE("ranking loss worked example evaluates to 70") {
  std::vector<float> s{90, 70, 40, 10};
  RankingInfo info;
  auto loss = relative_ranking_loss(vec<float>({10, 20, 30, 40}), std::span<const float>(s), &info);
  CHECK(info.margin1 == 60.0);
  CHECK(info.margin2 == 50.0);
  // term1 = max(0, 10-30+60) = 40, term2 = max(0, 10-30+50) = 30
  CHECK(loss.item() == 70.0f);
}

TEST_CASE("ranking loss on perfect prediction is exactly zero") {
  Rng rng(102);
  for (int trial = 0; trial < 200; ++trial) {
    int64_t n = 4 + static_cast<int64_t>(rng.next_index(29));
    // distinct integer targets: every difference in the hinge argument is
    // exact in float, so the algebraic zero comes out as a bitwise zero
    std::vector<float> s(n);
    std::vector<int> pool(100);
    std::iota(pool.begin(), pool.end(), 1);
    rng.shuffle(pool);
    for (int64_t i = 0; i < n; ++i) s[i] = static_cast<float>(pool[i]);
    auto q = Tensor<float>::from({n}, std::vector<float>(s));
    CHECK(relative_ranking_loss(q, std::span<const float>(s)).item() == 0.0f);
  }
}

TEST_CASE("ranking loss on constant predictions is the margin sum") {
  std::vector<float> s{90, 70, 40, 10};
  auto q = Tensor<float>::full({4}, 5.0f);
  CHECK(relative_ranking_loss(q, std::span<const float>(s)).item() == 110.0f);
}

TEST_CASE("ranking loss shift invariance and non-negativity") {
  Rng rng(103);
  for (int trial = 0; trial < 100; ++trial) {
    int64_t n = 4 + static_cast<int64_t>(rng.next_index(9));
    std::vector<float> s(n), qv(n);
    for (auto& v : s) v = static_cast<float>(rng.uniform(0, 100));
    for (auto& v : qv) v = static_cast<float>(rng.uniform(0, 100));
    auto base = relative_ranking_loss(Tensor<float>::from({n}, qv),
                                      std::span<const float>(s))
                    .item();
    CHECK(base >= 0.0f);
    float c = 17.5f;
    std::vector<float> s2(s), q2(qv);
    for (auto& v : s2) v += c;
    for (auto& v : q2) v += c;
    auto shifted = relative_ranking_loss(Tensor<float>::from({n}, q2),
                                         std::span<const float>(s2))
                       .item();
    CHECK(shifted == doctest::Approx(base).epsilon(1e-5));
  }
}

TEST_CASE("ranking loss skips short and all-equal batches") {
  std::vector<float> s3{3, 2, 1};
  RankingInfo info;
  auto l3 = relative_ranking_loss(vec<float>({1, 2, 3}), std::span<const float>(s3), &info);
  CHECK(l3.item() == 0.0f);
  CHECK(info.skipped);
  std::vector<float> seq{4, 4, 4, 4};
  auto leq = relative_ranking_loss(vec<float>({1, 2, 3, 4}), std::span<const float>(seq), &info);
  CHECK(leq.item() == 0.0f);
  CHECK(info.skipped);
  CHECK_THROWS_AS(
      relative_ranking_loss(vec<float>({1, 2}), std::span<const float>(s3)),
      ShapeError);
}

TEST_CASE("self-consistency worked values") {
  // identical outputs and equal ranking losses -> exactly 0
  auto a = fake_output<double>({1.0, 2.0}, {0.5, 0.25});
  auto b = fake_output<double>({1.0, 2.0}, {0.5, 0.25});
  auto rr = Tensor<double>::scalar(3.0);
  CHECK(self_consistency_loss(a, b, rr, rr, 0.5).item() == 0.0);

  // conv deltas (0.5, 1.5), atten deltas 0, |rr delta| = 1, lambda1 = 0.5
  auto c = fake_output<double>({1.5, 3.5}, {0.5, 0.25});
  auto l = self_consistency_loss(a, c, Tensor<double>::scalar(2.0),
                                 Tensor<double>::scalar(1.0), 0.5);
  CHECK(l.item() == doctest::Approx(1.5).epsilon(1e-12));

  // vector mode reads the pooled features instead of the logits
  auto d = fake_output<double>({9.0, 9.0}, {9.0, 9.0});
  for (auto& v : d.pooled_conv.data()) v = 2.0;
  auto lv = self_consistency_loss(a, d, rr, rr, 0.5, ConsistencyOn::kVector);
  CHECK(lv.item() == doctest::Approx(2.0).epsilon(1e-12));

  auto e = fake_output<double>({1.0, 2.0, 3.0}, {0.5, 0.25, 0.1});
  CHECK_THROWS_AS(self_consistency_loss(a, e, rr, rr, 0.5), ShapeError);
}

TEST_CASE("total loss worked values") {
  LossWeights w;  // 0.5, 0.05, 1.0
  auto total = total_loss(Tensor<double>::scalar(1.0),
                          Tensor<double>::scalar(2.0),
                          Tensor<double>::scalar(0.5), w);
  CHECK(total.item() == doctest::Approx(1.6).epsilon(1e-9));

  LossWeights off;
  off.lambda2 = 0;
  off.lambda3 = 0;
  auto q_only = total_loss(Tensor<double>::scalar(0.7),
                           Tensor<double>::scalar(9.0),
                           Tensor<double>::scalar(9.0), off);
  CHECK(q_only.item() == 0.7);

  auto zero =
      total_loss(Tensor<double>::scalar(0.0), Tensor<double>::scalar(0.0),
                 Tensor<double>::scalar(0.0), w);
  CHECK(zero.item() == 0.0);
}

TEST_CASE("total recomposes from parts in double") {
  Rng rng(104);
  LossWeights w;
  for (int trial = 0; trial < 50; ++trial) {
    double q = rng.uniform(0, 10), r = rng.uniform(0, 10),
           c = rng.uniform(0, 10);
    auto total = total_loss(Tensor<double>::scalar(q),
                            Tensor<double>::scalar(r),
                            Tensor<double>::scalar(c), w);
    CHECK(total.item() == q + (w.lambda2 * r + w.lambda3 * c));
  }
}

TEST_CASE("gradcheck: quality loss away from kinks") {
  std::vector<double> sv{2, 5, 9, 1};
  auto s = Tensor<double>::from({4}, sv);
  auto q = Tensor<double>::from({4}, {3.0, 3.5, 10.2, -0.7});  // |q-s| >= 0.3
  q.set_requires_grad(true);
  std::vector<Tensor<double>*> params{&q};
  {
    auto res = grad_check(
        params, [&] { return quality_loss(q, s, LossNorm::kL1); }, 1e-5, 16);
    CHECK(res.max_rel_err < 1e-6);
  }
  {
    auto res = grad_check(
        params, [&] { return quality_loss(q, s, LossNorm::kL2); }, 1e-5, 16);
    CHECK(res.max_rel_err < 1e-6);
  }
}

TEST_CASE("gradcheck: ranking loss with active hinges") {
  std::vector<double> sv{90, 70, 40, 10};
  // extremes: max 0, max2 1, min 3, min2 2; both hinge arguments land at
  // +75 and +80, far from the kink, and every abs argument is far from 0
  auto q = Tensor<double>::from({4}, {50.0, 20.0, 80.0, 35.0});
  q.set_requires_grad(true);
  std::vector<Tensor<double>*> params{&q};
  auto res = grad_check(
      params,
      [&] { return relative_ranking_loss(q, std::span<const double>(sv)); },
      1e-5, 16);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: consistency and total through both passes") {
  std::vector<double> sv{90, 70, 40, 10};
  auto s = Tensor<double>::from({4}, sv);
  auto qa = Tensor<double>::from({4}, {50.0, 20.0, 80.0, 35.0});
  auto qb = Tensor<double>::from({4}, {10.0, 60.0, 25.0, 75.0});
  qa.set_requires_grad(true);
  qb.set_requires_grad(true);
  LossWeights w;
  auto loss_fn = [&] {
    ModelOutput<double> oa, ob;
    oa.conv_logit = scale(qa, 0.5);
    oa.atten_logit = scale(qa, 0.5);
    ob.conv_logit = scale(qb, 0.5);
    ob.atten_logit = scale(qb, 0.5);
    auto rr_a = relative_ranking_loss(qa, std::span<const double>(sv));
    auto rr_b = relative_ranking_loss(qb, std::span<const double>(sv));
    auto cons = self_consistency_loss(oa, ob, rr_a, rr_b, 0.5);
    auto qual = quality_loss(qa, s);
    return total_loss(qual, rr_a, cons, w);
  };
  std::vector<Tensor<double>*> params{&qa, &qb};
  auto res = grad_check(params, loss_fn, 1e-5, 16);
  CHECK(res.max_rel_err < 1e-6);
}
