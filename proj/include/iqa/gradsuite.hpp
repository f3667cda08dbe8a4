#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "iqa/gradcheck.hpp"
#include "iqa/losses.hpp"
#include "iqa/model.hpp"
#include "iqa/ops.hpp"
#include "iqa/pool.hpp"
#include "iqa/rng.hpp"

// A fixed battery of double-precision gradient checks covering every
// differentiable building block plus the assembled model. Each case compares
// analytic gradients against central differences and passes at a pinned
// tolerance.

namespace iqa {

struct GradSuiteCase {
  std::string name;
  GradCheckResult result;
  double rel_tol;
  double abs_tol;  // 0 = relative bound only
  bool pass = false;
};

namespace detail {

inline Tensor<double> suite_rand(Shape shape, Rng& rng, double lo = -1.0,
                                 double hi = 1.0) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from(std::move(shape), std::move(v));
}

// Bounded away from zero so |.|/relu kinks stay clear of the step size.
inline Tensor<double> suite_rand_safe(Shape shape, Rng& rng,
                                      double margin = 0.2) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (auto& x : v) {
    double m = rng.uniform(margin, 1.0);
    x = rng.bernoulli(0.5) ? m : -m;
  }
  return Tensor<double>::from(std::move(shape), std::move(v));
}

inline GradSuiteCase finish(std::string name, GradCheckResult res,
                            double rel_tol, double abs_tol = 0.0) {
  GradSuiteCase c{std::move(name), res, rel_tol, abs_tol, false};
  c.pass = res.max_rel_err <= rel_tol &&
           (abs_tol == 0.0 || res.max_abs_err <= abs_tol);
  return c;
}

}  // namespace detail

inline std::vector<GradSuiteCase> run_grad_suite() {
  using detail::finish;
  using detail::suite_rand;
  using detail::suite_rand_safe;
  std::vector<GradSuiteCase> out;

  {
    Rng rng(21);
    auto x = suite_rand({2, 2, 5, 5}, rng);
    auto w = suite_rand({3, 2, 3, 3}, rng, -0.5, 0.5);
    auto b = suite_rand({3}, rng, -0.2, 0.2);
    for (auto* t : {&x, &w, &b}) t->set_requires_grad(true);
    auto loss = [&] { return mean_all(square(conv2d(x, w, b, 2, 1))); };
    out.push_back(finish("conv2d", grad_check({&x, &w, &b}, loss), 1e-6));
  }
  {
    Rng rng(25);
    auto x = suite_rand({3, 4}, rng);
    auto w1 = suite_rand({5, 4}, rng, -0.5, 0.5);
    auto b1 = suite_rand({5}, rng, -0.2, 0.2);
    auto w2 = suite_rand({2, 5}, rng, -0.5, 0.5);
    for (auto* t : {&x, &w1, &b1, &w2}) t->set_requires_grad(true);
    auto loss = [&] {
      auto h = relu(linear(x, w1, b1));
      return mean_all(square(softmax_last(linear(h, w2))));
    };
    out.push_back(finish("linear_softmax",
                         grad_check({&x, &w1, &b1, &w2}, loss, 1e-5, 64),
                         1e-5));
  }
  {
    Rng rng(23);
    auto x = suite_rand({3, 6}, rng);
    auto gamma = suite_rand({6}, rng, 0.5, 1.5);
    auto beta = suite_rand({6}, rng, -0.3, 0.3);
    for (auto* t : {&x, &gamma, &beta}) t->set_requires_grad(true);
    auto loss = [&] { return mean_all(square(layernorm_last(x, gamma, beta))); };
    out.push_back(
        finish("layernorm", grad_check({&x, &gamma, &beta}, loss), 1e-6));
  }
  {
    Rng rng(22);
    auto q = suite_rand({1, 2, 4, 3}, rng);
    auto k = suite_rand({1, 2, 4, 3}, rng);
    auto v = suite_rand({1, 2, 4, 3}, rng);
    for (auto* t : {&q, &k, &v}) t->set_requires_grad(true);
    auto loss = [&] {
      auto scores =
          scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(3.0));
      return mean_all(square(matmul(softmax_last(scores), v)));
    };
    out.push_back(
        finish("attention", grad_check({&q, &k, &v}, loss), 1e-6));
  }
  {
    Rng rng(24);
    auto x = suite_rand_safe({2, 3, 5, 5}, rng);
    x.set_requires_grad(true);
    // fixed weights: the normalized tensor's own sum of squares is constant
    auto wt = suite_rand({2, 3, 3, 3}, rng);
    auto loss = [&] {
      return mean_all(mul(euclid_normalize(l2pool(x, 3, 2)), wt));
    };
    out.push_back(
        finish("l2pool_normalize", grad_check({&x}, loss), 1e-6));
  }
  {
    std::vector<double> sv{2, 5, 9, 1};
    auto s = Tensor<double>::from({4}, sv);
    auto q = Tensor<double>::from({4}, {3.0, 3.5, 10.2, -0.7});
    q.set_requires_grad(true);
    auto l1 = grad_check(
        {&q}, [&] { return quality_loss(q, s, LossNorm::kL1); }, 1e-5, 16);
    out.push_back(finish("quality_loss_l1", l1, 1e-6));
    auto l2 = grad_check(
        {&q}, [&] { return quality_loss(q, s, LossNorm::kL2); }, 1e-5, 16);
    out.push_back(finish("quality_loss_l2", l2, 1e-6));
  }
  {
    std::vector<double> sv{90, 70, 40, 10};
    auto q = Tensor<double>::from({4}, {50.0, 20.0, 80.0, 35.0});
    q.set_requires_grad(true);
    auto res = grad_check(
        {&q},
        [&] { return relative_ranking_loss(q, std::span<const double>(sv)); },
        1e-5, 16);
    out.push_back(finish("ranking_loss", res, 1e-6));
  }
  {
    std::vector<double> sv{90, 70, 40, 10};
    auto s = Tensor<double>::from({4}, sv);
    auto qa = Tensor<double>::from({4}, {50.0, 20.0, 80.0, 35.0});
    auto qb = Tensor<double>::from({4}, {10.0, 60.0, 25.0, 75.0});
    qa.set_requires_grad(true);
    qb.set_requires_grad(true);
    LossWeights w;
    auto loss = [&] {
      ModelOutput<double> oa, ob;
      oa.conv_logit = scale(qa, 0.5);
      oa.atten_logit = scale(qa, 0.5);
      ob.conv_logit = scale(qb, 0.5);
      ob.atten_logit = scale(qb, 0.5);
      auto rr_a = relative_ranking_loss(qa, std::span<const double>(sv));
      auto rr_b = relative_ranking_loss(qb, std::span<const double>(sv));
      auto cons = self_consistency_loss(oa, ob, rr_a, rr_b, w.lambda1);
      return total_loss(quality_loss(qa, s), rr_a, cons, w);
    };
    out.push_back(
        finish("consistency_total", grad_check({&qa, &qb}, loss, 1e-5, 16),
               1e-6));
  }
  {
    ModelConfig cfg;
    cfg.backbone.channels = {2, 4, 4, 8};
    cfg.backbone.units_per_block = 1;
    cfg.backbone.feature_dropout = 0.0;
    cfg.encoder.n_layers = 1;
    cfg.encoder.d = 8;
    cfg.encoder.heads = 2;
    cfg.head_hidden = 8;
    cfg.seed = 5;
    Model<double> m(cfg);
    Rng rng(18);
    auto img = suite_rand({2, 3, 16, 16}, rng, 0.0, 1.0);
    auto wt = suite_rand({2}, rng);
    NamedParams<double> np;
    NamedBuffers<double> nb;
    m.collect(np, nb);
    std::vector<Tensor<double>*> targets;
    for (auto& [n, p] : np) targets.push_back(&p->value);
    auto loss = [&] { return mean_all(mul(m.forward(img, true).q, wt)); };
    // atol 1e-8: batch-stat normalization leaves a few tiny-gradient
    // coordinates at the central-difference noise floor
    auto res = grad_check(targets, loss, 1e-5, 6, 1e-8, 1e-8);
    out.push_back(finish("full_model", res, 1e-4, 1e-6));
  }
  return out;
}

inline std::string grad_suite_text(const std::vector<GradSuiteCase>& cases) {
  std::string out;
  for (const auto& c : cases) {
    out += c.name + ": max_rel_err = " + fmt_real(c.result.max_rel_err) +
           ", max_abs_err = " + fmt_real(c.result.max_abs_err) +
           ", checked = " + std::to_string(c.result.checked) +
           (c.pass ? " [pass]" : " [FAIL]") + "\n";
  }
  return out;
}

inline bool grad_suite_pass(const std::vector<GradSuiteCase>& cases) {
  for (const auto& c : cases)
    if (!c.pass) return false;
  return !cases.empty();
}

}  // namespace iqa
