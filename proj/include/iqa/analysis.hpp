#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "iqa/data.hpp"
#include "iqa/image.hpp"
#include "iqa/metrics.hpp"
#include "iqa/model.hpp"

// Inference-side diagnostics: patch-averaged prediction, flip-sensitivity
// reports, latent-space retrieval, spatial quality maps, and scatter plots.

namespace iqa {

// Mean per-patch quality over n_patches seeded random crops. Eval mode.
inline double predict_image(Model<float>& model, const Tensor<float>& image,
                            int64_t n_patches, int64_t patch_size,
                            uint64_t seed) {
  if (n_patches <= 0) throw DataError("predict_image: n_patches must be > 0");
  NoGradGuard ng;
  Rng rng(seed);
  auto batch = sample_patches(image, 0.0f, n_patches, patch_size, rng);
  auto out = model.forward(batch.patches, false);
  double sum = 0;
  for (int64_t i = 0; i < out.q.size(); ++i) sum += out.q.data()[i];
  return sum / static_cast<double>(out.q.size());
}

struct FlipRow {
  std::string path;
  double q = 0, q_flipped = 0, abs_delta = 0;
};

struct FlipReport {
  std::string model_tag;
  std::vector<FlipRow> rows;
  double mean_delta = 0, median_delta = 0, max_delta = 0;

  std::string csv() const {
    std::string out = "path,q,q_flipped,abs_delta\n";
    for (const auto& r : rows)
      out += r.path + "," + fmt_real(r.q) + "," + fmt_real(r.q_flipped) +
             "," + fmt_real(r.abs_delta) + "\n";
    return out;
  }

  std::string kv_text() const {
    std::string out;
    out += "model = " + model_tag + "\n";
    out += "n = " + std::to_string(rows.size()) + "\n";
    out += "mean_abs_delta = " + fmt_real(mean_delta) + "\n";
    out += "median_abs_delta = " + fmt_real(median_delta) + "\n";
    out += "max_abs_delta = " + fmt_real(max_delta) + "\n";
    return out;
  }
};

// Prediction deltas under horizontal flipping. Corners are drawn in
// mirrored pairs ((x,y) with (w-p-x,y)) and the flipped pass mirrors each
// patch, so both passes cover the same image regions and — for a
// horizontally symmetric image — see the same patch multiset; what remains
// in the delta is the model's own flip response, not sampling noise.
inline FlipReport flip_report(Model<float>& model,
                              const DatasetManifest& manifest,
                              int64_t n_patches, int64_t patch_size,
                              uint64_t seed,
                              const std::string& model_tag = "model") {
  if (manifest.records.empty()) throw DataError("flip_report: empty manifest");
  if (n_patches <= 0) throw DataError("flip_report: n_patches must be > 0");
  NoGradGuard ng;
  FlipReport report;
  report.model_tag = model_tag;
  Rng master(seed);
  for (size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& rec = manifest.records[i];
    auto image = image_to_tensor(read_ppm(manifest.resolve(rec)));
    int64_t h = image.dim(1), w = image.dim(2), p = patch_size;
    if (h < p || w < p)
      throw DataError("flip_report: image smaller than patch size");
    Rng rng = master.fork(static_cast<uint64_t>(i));
    int64_t pairs = (n_patches + 1) / 2;  // rounded up to full pairs
    PatchBatch batch;
    batch.patches = Tensor<float>::zeros({2 * pairs, 3, p, p});
    auto src = image.data();
    auto dst = batch.patches.data();
    auto put = [&](int64_t k, int64_t top, int64_t left) {
      for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < p; ++y)
          for (int64_t x = 0; x < p; ++x)
            dst[((k * 3 + c) * p + y) * p + x] =
                src[(c * h + top + y) * w + left + x];
    };
    for (int64_t j = 0; j < pairs; ++j) {
      int64_t top = static_cast<int64_t>(rng.next_index(h - p + 1));
      int64_t left = static_cast<int64_t>(rng.next_index(w - p + 1));
      put(2 * j, top, left);
      put(2 * j + 1, top, w - p - left);
    }
    auto mirrored = equivariant_transform(batch.patches, TransformKind::kHFlip);
    auto mean_q = [&](const Tensor<float>& patches) {
      auto out = model.forward(patches, false);
      double s = 0;
      for (int64_t j = 0; j < out.q.size(); ++j) s += out.q.data()[j];
      return s / static_cast<double>(out.q.size());
    };
    FlipRow row;
    row.path = rec.path;
    row.q = mean_q(batch.patches);
    row.q_flipped = mean_q(mirrored);
    row.abs_delta = std::abs(row.q - row.q_flipped);
    report.rows.push_back(row);
  }
  std::vector<double> deltas;
  for (const auto& r : report.rows) deltas.push_back(r.abs_delta);
  double sum = 0;
  for (double d : deltas) {
    sum += d;
    report.max_delta = std::max(report.max_delta, d);
  }
  report.mean_delta = sum / static_cast<double>(deltas.size());
  report.median_delta = detail::median(deltas);
  return report;
}

// Patch-averaged latent vector for one image.
inline std::vector<double> image_latent(Model<float>& model,
                                        const Tensor<float>& image,
                                        int64_t n_patches, int64_t patch_size,
                                        Rng& rng) {
  NoGradGuard ng;
  auto batch = sample_patches(image, 0.0f, n_patches, patch_size, rng);
  auto out = model.forward(batch.patches, false);
  int64_t k = out.latent.dim(0), d = out.latent.dim(1);
  std::vector<double> latent(static_cast<size_t>(d), 0.0);
  for (int64_t i = 0; i < k; ++i)
    for (int64_t j = 0; j < d; ++j)
      latent[static_cast<size_t>(j)] += out.latent.data()[i * d + j];
  for (auto& v : latent) v /= static_cast<double>(k);
  return latent;
}

struct RetrievalEntry {
  std::string path;
  double distance = 0;
  double score = 0;
};

struct RetrievalResult {
  std::string query;
  int64_t k = 0;
  std::vector<RetrievalEntry> entries;  // distance-ranked, length <= k

  std::string csv() const {
    std::string out = "rank,path,distance,score\n";
    for (size_t i = 0; i < entries.size(); ++i)
      out += std::to_string(i + 1) + "," + entries[i].path + "," +
             fmt_real(entries[i].distance) + "," +
             fmt_real(entries[i].score) + "\n";
    return out;
  }
};

// Exact k-NN by full scan: Euclidean distance between patch-averaged
// latents. Ties broken by gallery order for determinism.
inline RetrievalResult nearest_neighbors(Model<float>& model,
                                         const Tensor<float>& query_image,
                                         const DatasetManifest& gallery,
                                         int64_t k, int64_t n_patches,
                                         int64_t patch_size, uint64_t seed,
                                         const std::string& query_tag = "query") {
  if (gallery.records.empty())
    throw DataError("nearest_neighbors: empty gallery");
  if (k <= 0) throw DataError("nearest_neighbors: k must be > 0");
  Rng master(seed);
  Rng qrng = master.fork(0);
  auto qlat = image_latent(model, query_image, n_patches, patch_size, qrng);
  std::vector<RetrievalEntry> all;
  for (size_t i = 0; i < gallery.records.size(); ++i) {
    const auto& rec = gallery.records[i];
    auto image = image_to_tensor(read_ppm(gallery.resolve(rec)));
    Rng grng = master.fork(1 + static_cast<uint64_t>(i));
    auto lat = image_latent(model, image, n_patches, patch_size, grng);
    if (lat.size() != qlat.size())
      throw ShapeError("nearest_neighbors: latent size mismatch");
    double d2 = 0;
    for (size_t j = 0; j < lat.size(); ++j) {
      double d = lat[j] - qlat[j];
      d2 += d * d;
    }
    all.push_back({rec.path, std::sqrt(d2), rec.score});
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const RetrievalEntry& a, const RetrievalEntry& b) {
                     return a.distance < b.distance;
                   });
  RetrievalResult result;
  result.query = query_tag;
  result.k = k;
  int64_t keep = std::min<int64_t>(k, static_cast<int64_t>(all.size()));
  result.entries.assign(all.begin(), all.begin() + keep);
  return result;
}

enum class QmapSource { kEncoder, kConvFeatures };

inline QmapSource parse_qmap_source(const std::string& name) {
  if (name == "encoder") return QmapSource::kEncoder;
  if (name == "conv") return QmapSource::kConvFeatures;
  throw DataError("unknown quality-map source `" + name +
                  "` (want encoder|conv)");
}

struct QualityMap {
  int64_t h = 0, w = 0;
  std::vector<float> values;  // row-major, in [0,1]
};

// Channel-wise L2 magnitude of the chosen feature map, bilinearly upsampled
// to the input size and min-max normalized (constant maps become all 0.5).
inline QualityMap quality_map(Model<float>& model, const Tensor<float>& image,
                              QmapSource source = QmapSource::kEncoder) {
  if (image.ndim() != 3 || image.dim(0) != 3)
    throw ShapeError("quality_map: want a (3,H,W) image");
  int64_t h = image.dim(1), w = image.dim(2);
  if (h % 16 != 0 || w % 16 != 0)
    throw DataError("quality_map: image dims must be divisible by 16, got " +
                    std::to_string(h) + "x" + std::to_string(w));
  NoGradGuard ng;
  auto batched = reshape(image, {1, 3, h, w});
  Tensor<float> feats = source == QmapSource::kEncoder
                            ? model.forward_fhat(batched)
                            : model.forward_f4(batched);
  int64_t c = feats.dim(1), mh = feats.dim(2), mw = feats.dim(3);
  auto grid = Tensor<float>::zeros({1, 1, mh, mw});
  for (int64_t y = 0; y < mh; ++y)
    for (int64_t x = 0; x < mw; ++x) {
      double s2 = 0;
      for (int64_t ch = 0; ch < c; ++ch) {
        double v = feats.data()[(ch * mh + y) * mw + x];
        s2 += v * v;
      }
      grid.data()[y * mw + x] = static_cast<float>(std::sqrt(s2));
    }
  QualityMap qm;
  qm.h = h;
  qm.w = w;
  qm.values.resize(static_cast<size_t>(h * w));
  float glo = grid.data()[0], ghi = grid.data()[0];
  for (int64_t i = 0; i < grid.size(); ++i) {
    glo = std::min(glo, grid.data()[i]);
    ghi = std::max(ghi, grid.data()[i]);
  }
  if (!(ghi > glo)) {  // constant activation: flat mid-gray map
    std::fill(qm.values.begin(), qm.values.end(), 0.5f);
    return qm;
  }
  auto up = bilinear_resize(grid, h, w);
  float lo = up.data()[0], hi = up.data()[0];
  for (int64_t i = 0; i < up.size(); ++i) {
    lo = std::min(lo, up.data()[i]);
    hi = std::max(hi, up.data()[i]);
  }
  for (int64_t i = 0; i < up.size(); ++i)
    qm.values[static_cast<size_t>(i)] = (up.data()[i] - lo) / (hi - lo);
  return qm;
}

inline void save_quality_map(const QualityMap& qm, const ImageU8& base,
                             const std::string& heat_path,
                             const std::string& overlay_path) {
  ImageU8 heat{qm.h, qm.w, {}};
  heat.rgb.resize(static_cast<size_t>(3 * qm.h * qm.w));
  for (int64_t i = 0; i < qm.h * qm.w; ++i) {
    auto [r, g, b] = heat_color(qm.values[static_cast<size_t>(i)]);
    heat.rgb[static_cast<size_t>(3 * i) + 0] = r;
    heat.rgb[static_cast<size_t>(3 * i) + 1] = g;
    heat.rgb[static_cast<size_t>(3 * i) + 2] = b;
  }
  write_ppm(heat_path, heat);
  write_ppm(overlay_path, heat_overlay(base, qm.values));
}

struct ScorePair {
  double pred = 0, gt = 0;
};

// SVG scatter of predictions vs subjective scores with a fitted logistic
// overlay (omitted when the fit preconditions fail, e.g. too few points).
inline std::string scatter_plot_svg(const std::vector<ScorePair>& pairs,
                                    const std::string& title = "predictions") {
  if (pairs.empty()) throw DataError("scatter_plot: no pairs");
  constexpr double kW = 640, kH = 480, kMargin = 56;
  double xlo = pairs[0].pred, xhi = pairs[0].pred;
  double ylo = pairs[0].gt, yhi = pairs[0].gt;
  for (const auto& p : pairs) {
    xlo = std::min(xlo, p.pred);
    xhi = std::max(xhi, p.pred);
    ylo = std::min(ylo, p.gt);
    yhi = std::max(yhi, p.gt);
  }
  if (!(xhi > xlo)) {
    xlo -= 0.5;
    xhi += 0.5;
  }
  if (!(yhi > ylo)) {
    ylo -= 0.5;
    yhi += 0.5;
  }
  auto sx = [&](double x) {
    return kMargin + (x - xlo) / (xhi - xlo) * (kW - 2 * kMargin);
  };
  auto sy = [&](double y) {
    return kH - kMargin - (y - ylo) / (yhi - ylo) * (kH - 2 * kMargin);
  };
  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" "
         "height=\"480\" viewBox=\"0 0 640 480\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"640\" height=\"480\" "
         "fill=\"white\"/>\n";
  svg += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"16\">" + title + "</text>\n";
  // axes
  svg += "<line x1=\"" + fmt_real(kMargin) + "\" y1=\"" +
         fmt_real(kH - kMargin) + "\" x2=\"" + fmt_real(kW - kMargin) +
         "\" y2=\"" + fmt_real(kH - kMargin) +
         "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  svg += "<line x1=\"" + fmt_real(kMargin) + "\" y1=\"" + fmt_real(kMargin) +
         "\" x2=\"" + fmt_real(kMargin) + "\" y2=\"" +
         fmt_real(kH - kMargin) +
         "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  svg += "<text x=\"320\" y=\"470\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"13\">prediction</text>\n";
  svg += "<text x=\"16\" y=\"240\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"13\" "
         "transform=\"rotate(-90 16 240)\">subjective score</text>\n";
  // axis extent labels
  svg += "<text x=\"" + fmt_real(kMargin) + "\" y=\"" +
         fmt_real(kH - kMargin + 18) + "\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"11\">" + fmt_real(xlo) +
         "</text>\n";
  svg += "<text x=\"" + fmt_real(kW - kMargin) + "\" y=\"" +
         fmt_real(kH - kMargin + 18) + "\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"11\">" + fmt_real(xhi) +
         "</text>\n";
  svg += "<text x=\"" + fmt_real(kMargin - 8) + "\" y=\"" +
         fmt_real(kH - kMargin + 4) + "\" text-anchor=\"end\" "
         "font-family=\"sans-serif\" font-size=\"11\">" + fmt_real(ylo) +
         "</text>\n";
  svg += "<text x=\"" + fmt_real(kMargin - 8) + "\" y=\"" +
         fmt_real(kMargin + 4) + "\" text-anchor=\"end\" "
         "font-family=\"sans-serif\" font-size=\"11\">" + fmt_real(yhi) +
         "</text>\n";
  // logistic overlay sampled at 100 abscissae across the prediction range
  bool have_fit = false;
  LogisticParams fit;
  try {
    std::vector<double> preds, gts;
    for (const auto& p : pairs) {
      preds.push_back(p.pred);
      gts.push_back(p.gt);
    }
    fit = fit_logistic(preds, gts);
    have_fit = true;
  } catch (const IqaError&) {
    have_fit = false;
  }
  if (have_fit) {
    std::string pts;
    for (int i = 0; i < 100; ++i) {
      double x = xlo + (xhi - xlo) * i / 99.0;
      double y = logistic_eval(fit, x);
      double cy = std::clamp(sy(y), 0.0, kH);
      if (i) pts += " ";
      pts += fmt_real(sx(x)) + "," + fmt_real(cy);
    }
    svg += "<polyline class=\"fit\" points=\"" + pts +
           "\" fill=\"none\" stroke=\"#c03020\" stroke-width=\"1.5\"/>\n";
  }
  for (const auto& p : pairs)
    svg += "<circle class=\"pt\" cx=\"" + fmt_real(sx(p.pred)) + "\" cy=\"" +
           fmt_real(sy(p.gt)) +
           "\" r=\"3\" fill=\"#2060c0\" fill-opacity=\"0.7\"/>\n";
  svg += "</svg>\n";
  return svg;
}

inline void scatter_plot(const std::vector<ScorePair>& pairs,
                         const std::string& out_path,
                         const std::string& title = "predictions") {
  auto svg = scatter_plot_svg(pairs, title);
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + out_path);
  out << svg;
  if (!out) throw DataError("write failed: " + out_path);
}

}  // namespace iqa
