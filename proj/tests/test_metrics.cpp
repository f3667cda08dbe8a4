#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "iqa/metrics.hpp"
#include "iqa/rng.hpp"

using namespace iqa;

namespace {

// Independent oracle: average ranks via sorted runs of equal values.
std::vector<double> oracle_ranks(const std::vector<double>& v) {
  int64_t n = static_cast<int64_t>(v.size());
  std::vector<int64_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](int64_t a, int64_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  int64_t i = 0;
  while (i < n) {
    int64_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    double avg = (static_cast<double>(i) + j) / 2.0 + 1.0;  // 1-based
    for (int64_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

// Independent oracle: textbook two-pass Pearson.
double oracle_pearson(const std::vector<double>& a,
                      const std::vector<double>& b) {
  int64_t n = static_cast<int64_t>(a.size());
  double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double num = 0, da = 0, db = 0;
  for (int64_t i = 0; i < n; ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    da += (a[i] - ma) * (a[i] - ma);
    db += (b[i] - mb) * (b[i] - mb);
  }
  return num / std::sqrt(da * db);
}

double logistic_ref(const LogisticParams& p, double x) {
  return (p.beta1 - p.beta2) / (1.0 + std::exp(-(x - p.beta3) /
                                               std::abs(p.beta4))) +
         p.beta2;
}

}  // namespace

TEST_CASE("srocc closed-form and order extremes") {
  std::vector<double> g{1, 2, 3, 4, 5};
  CHECK(srocc({1, 2, 3, 5, 4}, g) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(srocc({10, 20, 30, 40, 50}, g) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(srocc({50, 40, 30, 20, 10}, g) ==
        doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("srocc equals rank-then-pearson oracle") {
  Rng rng(201);
  for (int trial = 0; trial < 200; ++trial) {
    int64_t n = 3 + static_cast<int64_t>(rng.next_index(48));
    std::vector<double> p(n), g(n);
    // mix continuous and tied (integer) draws
    bool tied = trial % 3 == 0;
    for (auto& v : p)
      v = tied ? static_cast<double>(rng.next_index(6)) : rng.uniform(0, 100);
    for (auto& v : g)
      v = tied ? static_cast<double>(rng.next_index(6)) : rng.uniform(0, 100);
    bool p_const = std::all_of(p.begin(), p.end(),
                               [&](double v) { return v == p[0]; });
    bool g_const = std::all_of(g.begin(), g.end(),
                               [&](double v) { return v == g[0]; });
    if (p_const || g_const) {
      CHECK_THROWS_AS(srocc(p, g), DataError);
      continue;
    }
    double want = oracle_pearson(oracle_ranks(p), oracle_ranks(g));
    CHECK(srocc(p, g) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("srocc invariant under strictly increasing transforms") {
  Rng rng(202);
  for (int trial = 0; trial < 50; ++trial) {
    int64_t n = 5 + static_cast<int64_t>(rng.next_index(30));
    std::vector<double> p(n), g(n);
    for (auto& v : p) v = rng.uniform(-3, 3);
    for (auto& v : g) v = rng.uniform(-3, 3);
    double base = srocc(p, g);
    std::vector<double> p2(n), g2(n);
    for (int64_t i = 0; i < n; ++i) p2[i] = p[i] * p[i] * p[i];  // monotone
    for (int64_t i = 0; i < n; ++i) g2[i] = std::exp(0.7 * g[i]);
    CHECK(srocc(p2, g2) == doctest::Approx(base).epsilon(1e-12));
    std::vector<double> pneg(n);
    for (int64_t i = 0; i < n; ++i) pneg[i] = -p[i];
    CHECK(srocc(pneg, g) == doctest::Approx(-base).epsilon(1e-12));
  }
}

TEST_CASE("srocc preconditions") {
  CHECK_THROWS_AS(srocc({1, 2}, {1, 2}), DataError);
  CHECK_THROWS_AS(srocc({3, 3, 3, 3}, {1, 2, 3, 4}), DataError);
  CHECK_THROWS_AS(srocc({1, 2, 3}, {5, 5, 5}), DataError);
  CHECK_THROWS_AS(srocc({1, 2, 3}, {1, 2}), DataError);
}

TEST_CASE("pearson on exact linear data") {
  std::vector<double> p{0.5, 1.5, 2.0, 4.0, 9.0};
  std::vector<double> up(p.size()), down(p.size());
  for (size_t i = 0; i < p.size(); ++i) up[i] = 2 * p[i] + 3;
  for (size_t i = 0; i < p.size(); ++i) down[i] = -0.5 * p[i] + 1;
  CHECK(pearson(p, up) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pearson(p, down) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK_THROWS_AS(pearson({1, 1, 1}, {1, 2, 3}), DataError);
}

TEST_CASE("logistic fit recovers forward-synthesized data") {
  LogisticParams truth{95.0, 5.0, 0.3, 0.8};
  std::vector<double> x(40), y(40);
  for (int i = 0; i < 40; ++i) {
    x[i] = -2.0 + 5.0 * i / 39.0;
    y[i] = logistic_ref(truth, x[i]);
  }
  auto fit = fit_logistic(x, y);
  double worst = 0;
  for (int i = 0; i < 40; ++i)
    worst = std::max(worst, std::abs(logistic_eval(fit, x[i]) - y[i]));
  CHECK(worst <= 1e-6);

  // determinism: identical inputs give bitwise identical parameters
  auto fit2 = fit_logistic(x, y);
  CHECK(std::memcmp(&fit, &fit2, sizeof(fit)) == 0);
}

TEST_CASE("logistic fit does not degrade linear data") {
  std::vector<double> x(30), y(30);
  Rng rng(203);
  for (int i = 0; i < 30; ++i) {
    x[i] = rng.uniform(0, 10);
    y[i] = 3.0 * x[i] + 7.0;
  }
  double raw = pearson(x, y);
  auto fit = fit_logistic(x, y);
  std::vector<double> mapped(30);
  for (int i = 0; i < 30; ++i) mapped[i] = logistic_eval(fit, x[i]);
  CHECK(pearson(mapped, y) >= raw - 1e-9);
}

TEST_CASE("logistic fit preconditions") {
  std::vector<double> constant(10, 4.0), rising(10), gts(10);
  for (int i = 0; i < 10; ++i) rising[i] = i;
  for (int i = 0; i < 10; ++i) gts[i] = 2 * i + 1;
  CHECK_THROWS_AS(fit_logistic(constant, gts), DataError);
  CHECK_THROWS_AS(fit_logistic(rising, constant), DataError);
  CHECK_THROWS_AS(fit_logistic({1, 2, 3, 4}, {1, 2, 3, 4}), DataError);
}

TEST_CASE("plcc behavior across data shapes") {
  Rng rng(204);
  std::vector<double> x(40);
  for (auto& v : x) v = rng.uniform(-1, 2);

  std::vector<double> linear(40);
  for (int i = 0; i < 40; ++i) linear[i] = 2 * x[i] + 3;
  CHECK(plcc(x, linear) == doctest::Approx(1.0).epsilon(1e-6));

  // noiseless monotone cubic: the fitted nonlinearity can only help
  std::vector<double> cubic(40);
  for (int i = 0; i < 40; ++i) cubic[i] = x[i] * x[i] * x[i];
  CHECK(plcc(x, cubic) >= oracle_pearson(x, cubic) - 1e-9);

  std::vector<double> anti(40);
  for (int i = 0; i < 40; ++i) anti[i] = -3 * x[i] + 1;
  CHECK(plcc(x, anti) <= 0.0);
}

TEST_CASE("plcc invariant under positive affine rescaling of predictions") {
  Rng rng(205);
  std::vector<double> x(35), y(35);
  for (auto& v : x) v = rng.uniform(0, 1);
  for (int i = 0; i < 35; ++i)
    y[i] = 80.0 / (1.0 + std::exp(-4 * (x[i] - 0.5))) + 10.0 +
           0.5 * rng.uniform(-1, 1);
  double base = plcc(x, y);
  std::vector<double> x2(35);
  for (int i = 0; i < 35; ++i) x2[i] = 12.5 * x[i] - 3.0;
  CHECK(plcc(x2, y) == doctest::Approx(base).epsilon(1e-6));
}

TEST_CASE("weighted average worked rows") {
  CHECK(weighted_average({0.42}, {100}) == 0.42);
  std::vector<double> sizes{799, 866, 3000, 10125, 1162, 10073, 39810};
  double ws = weighted_average({0.969, 0.922, 0.863, 0.859, 0.846, 0.915,
                                0.554},
                               sizes);
  CHECK(ws == doctest::Approx(0.685).epsilon(0.0015));
  double wp = weighted_average({0.968, 0.942, 0.883, 0.858, 0.877, 0.928,
                                0.625},
                               sizes);
  CHECK(wp == doctest::Approx(0.732).epsilon(0.0015));
  CHECK(ws >= 0.554);
  CHECK(ws <= 0.969);
  CHECK_THROWS_AS(weighted_average({}, {}), DataError);
  CHECK_THROWS_AS(weighted_average({1.0}, {1.0, 2.0}), DataError);
  CHECK_THROWS_AS(weighted_average({1.0, 2.0}, {1.0, 0.0}), DataError);
}

TEST_CASE("metric report evaluation and rendering") {
  Rng rng(206);
  std::vector<double> preds(60), gts(60);
  for (int i = 0; i < 60; ++i) {
    preds[i] = rng.uniform(0, 1);
    gts[i] = 70.0 / (1.0 + std::exp(-5 * (preds[i] - 0.5))) + 15.0 +
             2.0 * rng.uniform(-1, 1);
  }
  auto report = evaluate_metrics("toy", preds, gts);
  CHECK(report.n == 60);
  CHECK(report.srocc == doctest::Approx(srocc(preds, gts)).epsilon(1e-12));
  CHECK(report.plcc == doctest::Approx(plcc(preds, gts)).epsilon(1e-12));
  CHECK(std::abs(report.srocc) <= 1.0);
  CHECK(std::abs(report.plcc) <= 1.0);

  auto row = report.csv_row();
  std::stringstream ss(row);
  std::string field;
  std::vector<std::string> fields;
  while (std::getline(ss, field, ',')) fields.push_back(field);
  REQUIRE(fields.size() == 8);
  CHECK(fields[0] == "toy");
  CHECK(fields[1] == "60");
  CHECK(std::stod(fields[2]) == doctest::Approx(report.srocc).epsilon(1e-9));
  CHECK(std::stod(fields[3]) == doctest::Approx(report.plcc).epsilon(1e-9));
  CHECK(std::stod(fields[4]) ==
        doctest::Approx(report.logistic.beta1).epsilon(1e-9));
  CHECK(std::stod(fields[7]) ==
        doctest::Approx(report.logistic.beta4).epsilon(1e-9));

  auto text = report.kv_text();
  CHECK(text.find("srocc = ") != std::string::npos);
  CHECK(text.find("plcc = ") != std::string::npos);
  CHECK(text.find("n = 60") != std::string::npos);
}
