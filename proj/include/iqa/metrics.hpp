#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "iqa/common.hpp"

// Rank and linear correlation metrics with the standard monotone logistic
// remapping applied before the linear correlation, plus size-weighted
// aggregation across datasets. All double precision.

namespace iqa {

struct LogisticParams {
  double beta1 = 0, beta2 = 0, beta3 = 0, beta4 = 1;
};

inline double logistic_eval(const LogisticParams& p, double x) {
  double b4 = std::max(std::abs(p.beta4), 1e-12);
  return (p.beta1 - p.beta2) / (1.0 + std::exp(-(x - p.beta3) / b4)) +
         p.beta2;
}

namespace detail {

inline void check_pair(const std::vector<double>& a,
                       const std::vector<double>& b, size_t min_n,
                       const char* who) {
  if (a.size() != b.size())
    throw DataError(std::string(who) + ": length mismatch " +
                    std::to_string(a.size()) + " vs " +
                    std::to_string(b.size()));
  if (a.size() < min_n)
    throw DataError(std::string(who) + ": need at least " +
                    std::to_string(min_n) + " pairs, got " +
                    std::to_string(a.size()));
}

inline bool is_constant(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(),
                     [&](double x) { return x == v[0]; });
}

// Ties receive the mean of the rank positions they occupy (1-based).
inline std::vector<double> average_ranks(const std::vector<double>& v) {
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
    double shared = 1.0 + (static_cast<double>(i) + j) / 2.0;
    for (int64_t k = i; k <= j; ++k) ranks[idx[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double stddev(const std::vector<double>& v) {
  double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double acc = 0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / v.size());
}

// Solves a 4x4 system in place; returns false on a vanishing pivot.
inline bool solve4(double a[4][4], double b[4], double x[4]) {
  int piv[4] = {0, 1, 2, 3};
  for (int col = 0; col < 4; ++col) {
    int best = col;
    for (int r = col + 1; r < 4; ++r)
      if (std::abs(a[piv[r]][col]) > std::abs(a[piv[best]][col])) best = r;
    std::swap(piv[col], piv[best]);
    double p = a[piv[col]][col];
    if (std::abs(p) < 1e-300) return false;
    for (int r = col + 1; r < 4; ++r) {
      double f = a[piv[r]][col] / p;
      for (int c = col; c < 4; ++c) a[piv[r]][c] -= f * a[piv[col]][c];
      b[piv[r]] -= f * b[piv[col]];
    }
  }
  for (int col = 3; col >= 0; --col) {
    double acc = b[piv[col]];
    for (int c = col + 1; c < 4; ++c) acc -= a[piv[col]][c] * x[c];
    x[col] = acc / a[piv[col]][col];
  }
  return true;
}

}  // namespace detail

inline double pearson(const std::vector<double>& a,
                      const std::vector<double>& b) {
  detail::check_pair(a, b, 3, "pearson");
  if (detail::is_constant(a) || detail::is_constant(b))
    throw DataError("pearson: undefined correlation for a constant vector");
  int64_t n = static_cast<int64_t>(a.size());
  double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double num = 0, va = 0, vb = 0;
  for (int64_t i = 0; i < n; ++i) {
    double da = a[i] - ma, db = b[i] - mb;
    num += da * db;
    va += da * da;
    vb += db * db;
  }
  return num / std::sqrt(va * vb);
}

// Pearson correlation of average ranks.
inline double srocc(const std::vector<double>& preds,
                    const std::vector<double>& gts) {
  detail::check_pair(preds, gts, 3, "srocc");
  if (detail::is_constant(preds) || detail::is_constant(gts))
    throw DataError("srocc: undefined correlation for a constant vector");
  return pearson(detail::average_ranks(preds), detail::average_ranks(gts));
}

// Least-squares fit of the 4-parameter monotone logistic y = f(x) by damped
// Gauss-Newton with multiplicative trust damping. Fixed initialization and a
// fixed damping schedule make the result a pure function of the inputs.
inline LogisticParams fit_logistic(const std::vector<double>& preds,
                                   const std::vector<double>& gts) {
  detail::check_pair(preds, gts, 5, "fit_logistic");
  if (detail::is_constant(gts))
    throw DataError("fit_logistic: constant targets");
  double spread = detail::stddev(preds);
  if (spread == 0.0)
    throw DataError("fit_logistic: constant predictions give a degenerate "
                    "initialization");
  int64_t n = static_cast<int64_t>(preds.size());
  LogisticParams beta;
  beta.beta1 = *std::max_element(gts.begin(), gts.end());
  beta.beta2 = *std::min_element(gts.begin(), gts.end());
  beta.beta3 = detail::median(preds);
  beta.beta4 = spread / 4.0;

  auto sse_of = [&](const LogisticParams& p) {
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
      double r = logistic_eval(p, preds[i]) - gts[i];
      acc += r * r;
    }
    return acc;
  };

  double sse = sse_of(beta);
  double mu = -1;  // seeded from the first JtJ trace
  for (int iter = 0; iter < 200; ++iter) {
    double jtj[4][4] = {};
    double jtr[4] = {};
    double b4 = std::max(std::abs(beta.beta4), 1e-12);
    double sign4 = beta.beta4 < 0 ? -1.0 : 1.0;
    for (int64_t i = 0; i < n; ++i) {
      double u = (preds[i] - beta.beta3) / b4;
      double g = 1.0 / (1.0 + std::exp(-u));
      double gp = g * (1.0 - g);
      double span = beta.beta1 - beta.beta2;
      double J[4] = {g, 1.0 - g, -span * gp / b4,
                     -span * gp * u * sign4 / b4};
      double r = span * g + beta.beta2 - gts[i];
      for (int c = 0; c < 4; ++c) {
        jtr[c] += J[c] * r;
        for (int c2 = 0; c2 < 4; ++c2) jtj[c][c2] += J[c] * J[c2];
      }
    }
    if (mu < 0)
      mu = 1e-3 * ((jtj[0][0] + jtj[1][1] + jtj[2][2] + jtj[3][3]) / 4.0 +
                   1e-30);

    bool accepted = false;
    for (int damp = 0; damp < 40; ++damp) {
      double a[4][4];
      double rhs[4], delta[4];
      for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) a[r][c] = jtj[r][c];
        a[r][r] += mu;
        rhs[r] = -jtr[r];
      }
      if (detail::solve4(a, rhs, delta)) {
        LogisticParams cand = beta;
        cand.beta1 += delta[0];
        cand.beta2 += delta[1];
        cand.beta3 += delta[2];
        cand.beta4 += delta[3];
        double cand_sse = sse_of(cand);
        // orientation is part of the contract: the fitted map must stay
        // non-decreasing so it cannot flip the sign of the correlation
        bool oriented = cand.beta1 >= cand.beta2;
        if (oriented && std::isfinite(cand_sse) && cand_sse < sse) {
          double rel = std::abs(std::sqrt(sse) - std::sqrt(cand_sse)) /
                       std::max(std::sqrt(sse), 1e-30);
          beta = cand;
          sse = cand_sse;
          mu = std::max(mu / 10.0, 1e-12);
          accepted = true;
          if (rel < 1e-10) return beta;
          break;
        }
      }
      mu *= 10.0;
      if (mu > 1e12) return beta;  // best so far
    }
    if (!accepted) return beta;
  }
  return beta;
}

// Pearson correlation after the fitted monotone remapping of the predictions.
inline double plcc(const std::vector<double>& preds,
                   const std::vector<double>& gts) {
  auto params = fit_logistic(preds, gts);
  std::vector<double> mapped(preds.size());
  for (size_t i = 0; i < preds.size(); ++i)
    mapped[i] = logistic_eval(params, preds[i]);
  return pearson(mapped, gts);
}

inline double weighted_average(const std::vector<double>& values,
                               const std::vector<double>& sizes) {
  if (values.empty()) throw DataError("weighted_average: empty input");
  if (values.size() != sizes.size())
    throw DataError("weighted_average: length mismatch");
  double num = 0, den = 0;
  for (size_t i = 0; i < values.size(); ++i) {
    if (sizes[i] <= 0)
      throw DataError("weighted_average: sizes must be positive");
    num += values[i] * sizes[i];
    den += sizes[i];
  }
  return num / den;
}

struct MetricReport {
  std::string dataset;
  int64_t n = 0;
  double srocc = 0, plcc = 0;
  LogisticParams logistic;

  std::string csv_row() const {
    return dataset + "," + std::to_string(n) + "," + fmt_real(srocc) + "," +
           fmt_real(plcc) + "," + fmt_real(logistic.beta1) + "," +
           fmt_real(logistic.beta2) + "," + fmt_real(logistic.beta3) + "," +
           fmt_real(logistic.beta4);
  }

  std::string kv_text() const {
    return "dataset = " + dataset + "\nn = " + std::to_string(n) +
           "\nsrocc = " + fmt_real(srocc) + "\nplcc = " + fmt_real(plcc) +
           "\nbeta1 = " + fmt_real(logistic.beta1) +
           "\nbeta2 = " + fmt_real(logistic.beta2) +
           "\nbeta3 = " + fmt_real(logistic.beta3) +
           "\nbeta4 = " + fmt_real(logistic.beta4) + "\n";
  }
};

inline MetricReport evaluate_metrics(const std::string& dataset,
                                     const std::vector<double>& preds,
                                     const std::vector<double>& gts) {
  MetricReport report;
  report.dataset = dataset;
  report.n = static_cast<int64_t>(preds.size());
  report.srocc = srocc(preds, gts);
  report.logistic = fit_logistic(preds, gts);
  std::vector<double> mapped(preds.size());
  for (size_t i = 0; i < preds.size(); ++i)
    mapped[i] = logistic_eval(report.logistic, preds[i]);
  report.plcc = pearson(mapped, gts);
  return report;
}

}  // namespace iqa
