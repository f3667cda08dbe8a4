#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "iqa/image.hpp"
#include "iqa/rng.hpp"
#include "iqa/tensor.hpp"

// Dataset plumbing: manifest CSV ingestion, reference-disjoint splits, a
// deterministic synthetic distortion generator, patch sampling with score
// inheritance, training augmentation, and the equivariant batch transforms
// used by the self-consistency objective.

namespace iqa {

struct ManifestRecord {
  std::string path;  // relative paths resolve against the manifest directory
  double score = 0;
  std::string ref_id;
};

struct DatasetManifest {
  std::string name;
  std::string base_dir;  // directory of the manifest file, for resolution
  double score_lo = 0, score_hi = 100;
  std::vector<ManifestRecord> records;

  std::string resolve(const ManifestRecord& rec) const {
    std::filesystem::path p(rec.path);
    if (p.is_absolute() || base_dir.empty()) return rec.path;
    return (std::filesystem::path(base_dir) / p).string();
  }
};

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path);
  DatasetManifest m;
  m.name = std::filesystem::path(path).stem().string();
  m.base_dir = std::filesystem::path(path).parent_path().string();
  std::string line;
  int64_t line_no = 0;
  if (!std::getline(in, line)) throw DataError("empty manifest: " + path);
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "path,score,ref_id")
    throw DataError("manifest " + path +
                    ": bad header (want `path,score,ref_id`), got `" + line +
                    "`");
  std::map<std::string, int64_t> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    size_t c1 = line.find(',');
    size_t c2 = c1 == std::string::npos ? std::string::npos
                                        : line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw DataError("manifest " + path + " line " +
                      std::to_string(line_no) + ": want 3 fields");
    ManifestRecord rec;
    rec.path = line.substr(0, c1);
    std::string score_text = line.substr(c1 + 1, c2 - c1 - 1);
    rec.ref_id = line.substr(c2 + 1);
    if (rec.path.empty())
      throw DataError("manifest " + path + " line " +
                      std::to_string(line_no) + ": empty path");
    try {
      rec.score = parse_real(score_text, "score");
    } catch (const DataError&) {
      throw DataError("manifest " + path + " line " +
                      std::to_string(line_no) + ": non-numeric score `" +
                      score_text + "`");
    }
    if (rec.ref_id.empty()) rec.ref_id = rec.path;
    if (auto [it, fresh] = seen.emplace(rec.path, line_no); !fresh)
      throw DataError("manifest " + path + " line " +
                      std::to_string(line_no) + ": duplicate path `" +
                      rec.path + "` (first at line " +
                      std::to_string(it->second) + ")");
    m.records.push_back(std::move(rec));
  }
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write manifest: " + path);
  out << "path,score,ref_id\n";
  for (const auto& rec : m.records)
    out << rec.path << "," << fmt_real(rec.score) << "," << rec.ref_id
        << "\n";
  if (!out) throw DataError("manifest write failed: " + path);
}

// Shuffles the distinct ref_ids with the seeded generator and sends the first
// ceil(ratio * R) of them to the train side; records keep their file order.
inline std::pair<DatasetManifest, DatasetManifest> split_by_ref(
    const DatasetManifest& m, uint64_t seed, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw DataError("split ratio must lie in (0,1), got " + fmt_real(ratio));
  std::vector<std::string> refs;
  for (const auto& rec : m.records)
    if (std::find(refs.begin(), refs.end(), rec.ref_id) == refs.end())
      refs.push_back(rec.ref_id);
  if (refs.size() < 2)
    throw DataError("split needs at least 2 distinct ref_ids, got " +
                    std::to_string(refs.size()));
  Rng rng(seed);
  rng.shuffle(refs);
  size_t n_train = static_cast<size_t>(
      std::ceil(ratio * static_cast<double>(refs.size())));
  n_train = std::min(n_train, refs.size() - 1);  // keep both sides non-empty
  std::vector<std::string> train_refs(refs.begin(), refs.begin() + n_train);
  DatasetManifest train = m, test = m;
  train.name = m.name + "_train";
  test.name = m.name + "_test";
  train.records.clear();
  test.records.clear();
  for (const auto& rec : m.records) {
    bool in_train = std::find(train_refs.begin(), train_refs.end(),
                              rec.ref_id) != train_refs.end();
    (in_train ? train : test).records.push_back(rec);
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation

struct SyntheticSpec {
  int64_t n_refs = 5;
  int64_t height = 64, width = 64;
  std::vector<std::string> families = {"gaussian_blur", "white_noise",
                                       "quantize_blocks", "contrast_shift"};
  int64_t levels = 4;
  uint64_t seed = 1;
};

namespace detail {

inline int64_t family_id(const std::string& name) {
  if (name == "gaussian_blur") return 0;
  if (name == "white_noise") return 1;
  if (name == "quantize_blocks") return 2;
  if (name == "contrast_shift") return 3;
  throw DataError("unknown distortion family: " + name);
}

// Pristine reference: layered smooth color field + filled shapes + a few
// high-frequency texture regions. Values in [0,1], channel-planar.
inline std::vector<float> make_reference(int64_t h, int64_t w, Rng& rng) {
  std::vector<float> img(3 * h * w, 0.0f);
  constexpr double kTau = 6.283185307179586;
  for (int64_t c = 0; c < 3; ++c) {
    double base = rng.uniform(0.3, 0.7);
    struct Wave {
      double fx, fy, phase, amp;
    };
    std::vector<Wave> waves(6);
    for (auto& wv : waves)
      wv = {rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0),
            rng.uniform(0.0, kTau), rng.uniform(0.03, 0.12)};
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double v = base;
        for (const auto& wv : waves)
          v += wv.amp * std::sin(kTau * (wv.fx * x / w + wv.fy * y / h) +
                                 wv.phase);
        img[(c * h + y) * w + x] = static_cast<float>(v);
      }
  }
  // filled rectangles and discs
  int64_t n_shapes = 3 + static_cast<int64_t>(rng.next_index(4));
  for (int64_t s = 0; s < n_shapes; ++s) {
    bool disc = rng.bernoulli(0.5);
    double cy = rng.uniform(0, h), cx = rng.uniform(0, w);
    double ry = rng.uniform(h * 0.06, h * 0.25);
    double rx = rng.uniform(w * 0.06, w * 0.25);
    float col[3] = {static_cast<float>(rng.uniform(0.05, 0.95)),
                    static_cast<float>(rng.uniform(0.05, 0.95)),
                    static_cast<float>(rng.uniform(0.05, 0.95))};
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double dy = (y - cy) / ry, dx = (x - cx) / rx;
        bool inside = disc ? dy * dy + dx * dx <= 1.0
                           : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
        if (!inside) continue;
        for (int64_t c = 0; c < 3; ++c) {
          float& px = img[(c * h + y) * w + x];
          px = 0.35f * px + 0.65f * col[c];
        }
      }
  }
  // high-frequency texture patches
  int64_t n_tex = 2 + static_cast<int64_t>(rng.next_index(3));
  for (int64_t t = 0; t < n_tex; ++t) {
    int64_t th = h / 4 + static_cast<int64_t>(rng.next_index(h / 4));
    int64_t tw = w / 4 + static_cast<int64_t>(rng.next_index(w / 4));
    int64_t ty = static_cast<int64_t>(rng.next_index(h - th + 1));
    int64_t tx = static_cast<int64_t>(rng.next_index(w - tw + 1));
    for (int64_t y = ty; y < ty + th; ++y)
      for (int64_t x = tx; x < tx + tw; ++x) {
        float n = static_cast<float>(rng.uniform(-0.22, 0.22));
        for (int64_t c = 0; c < 3; ++c) img[(c * h + y) * w + x] += n;
      }
  }
  for (auto& v : img) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

inline void separable_gaussian(std::vector<float>& img, int64_t h, int64_t w,
                               double sigma) {
  int64_t radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int64_t i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;
  auto mirror = [&](int64_t i, int64_t n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
  };
  std::vector<float> tmp(static_cast<size_t>(h) * w);
  for (int64_t c = 0; c < 3; ++c) {
    float* plane = img.data() + c * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double acc = 0;
        for (int64_t i = -radius; i <= radius; ++i)
          acc += k[i + radius] * plane[y * w + mirror(x + i, w)];
        tmp[y * w + x] = static_cast<float>(acc);
      }
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double acc = 0;
        for (int64_t i = -radius; i <= radius; ++i)
          acc += k[i + radius] * tmp[mirror(y + i, h) * w + x];
        plane[y * w + x] = static_cast<float>(acc);
      }
  }
}

inline void apply_distortion(std::vector<float>& img, int64_t h, int64_t w,
                             int64_t family, int64_t level, Rng& rng) {
  switch (family) {
    case 0: {  // gaussian_blur
      static constexpr double kSigma[4] = {0.5, 1.0, 2.0, 4.0};
      separable_gaussian(img, h, w, kSigma[level - 1]);
      break;
    }
    case 1: {  // white_noise, sigma expressed on the 0-255 range
      static constexpr double kSigma255[4] = {4, 8, 16, 32};
      double s = kSigma255[level - 1] / 255.0;
      for (auto& v : img)
        v = std::clamp(v + static_cast<float>(rng.normal() * s), 0.0f, 1.0f);
      break;
    }
    case 2: {  // quantize_blocks: 8x8 block means on a shrinking gray scale
      static constexpr int64_t kLevels[4] = {32, 16, 8, 4};
      int64_t q = kLevels[level - 1];
      for (int64_t c = 0; c < 3; ++c) {
        float* plane = img.data() + c * h * w;
        for (int64_t by = 0; by < h; by += 8)
          for (int64_t bx = 0; bx < w; bx += 8) {
            double acc = 0;
            for (int64_t y = by; y < by + 8; ++y)
              for (int64_t x = bx; x < bx + 8; ++x) acc += plane[y * w + x];
            double mean = acc / 64.0;
            double snapped =
                std::round(mean * (q - 1)) / static_cast<double>(q - 1);
            for (int64_t y = by; y < by + 8; ++y)
              for (int64_t x = bx; x < bx + 8; ++x)
                plane[y * w + x] = static_cast<float>(snapped);
          }
      }
      break;
    }
    case 3: {  // contrast_shift via gamma
      static constexpr double kGamma[4] = {1.2, 1.5, 2.0, 2.8};
      double g = kGamma[level - 1];
      for (auto& v : img)
        v = static_cast<float>(std::pow(std::clamp(v, 0.0f, 1.0f), g));
      break;
    }
    default:
      throw DataError("unknown distortion family id " +
                      std::to_string(family));
  }
}

inline ImageU8 planar_to_image(const std::vector<float>& img, int64_t h,
                               int64_t w) {
  ImageU8 out;
  out.h = h;
  out.w = w;
  out.rgb.resize(static_cast<size_t>(h) * w * 3);
  for (int64_t p = 0; p < h * w; ++p)
    for (int64_t c = 0; c < 3; ++c)
      out.rgb[p * 3 + c] = static_cast<uint8_t>(
          std::lround(std::clamp(img[c * h * w + p], 0.0f, 1.0f) * 255.0f));
  return out;
}

}  // namespace detail

// Writes n_refs pristine images plus one distorted copy per (reference,
// family, level) into out_dir and returns the manifest (also written there
// as manifest.csv). Every byte is a pure function of the spec.
inline DatasetManifest synth_generate(const SyntheticSpec& spec,
                                      const std::string& out_dir) {
  if (spec.levels < 2) throw DataError("synth: levels must be >= 2");
  if (spec.levels > 4)
    throw DataError("synth: at most 4 severity levels are parameterized");
  if (spec.height % 16 != 0 || spec.width % 16 != 0)
    throw DataError("synth: image size must be divisible by 16");
  if (spec.n_refs < 1) throw DataError("synth: n_refs must be >= 1");
  std::vector<int64_t> fams;
  for (const auto& f : spec.families) fams.push_back(detail::family_id(f));

  std::filesystem::create_directories(out_dir);
  DatasetManifest m;
  m.name = "synth";
  m.base_dir = out_dir;
  Rng master(spec.seed);

  auto emit = [&](const std::vector<float>& img, const std::string& fname,
                  double score, const std::string& ref_id) {
    auto full = (std::filesystem::path(out_dir) / fname).string();
    write_ppm(full, detail::planar_to_image(img, spec.height, spec.width));
    m.records.push_back({fname, score, ref_id});
  };

  for (int64_t r = 0; r < spec.n_refs; ++r) {
    auto ref_rng = master.fork(1000 + static_cast<uint64_t>(r));
    auto ref = detail::make_reference(spec.height, spec.width, ref_rng);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "ref%03lld", static_cast<long long>(r));
    std::string ref_id(buf);
    emit(ref, ref_id + ".ppm", 100.0, ref_id);
    for (size_t fi = 0; fi < fams.size(); ++fi) {
      for (int64_t level = 1; level <= spec.levels; ++level) {
        auto img = ref;
        auto d_rng = master.fork(2000 + static_cast<uint64_t>(r) * 256 +
                                 static_cast<uint64_t>(fams[fi]) * 32 +
                                 static_cast<uint64_t>(level));
        detail::apply_distortion(img, spec.height, spec.width, fams[fi],
                                 level, d_rng);
        double score =
            100.0 - 90.0 * static_cast<double>(level - 1) / (spec.levels - 1);
        emit(img,
             ref_id + "_" + spec.families[fi] + "_l" + std::to_string(level) +
                 ".ppm",
             score, ref_id);
      }
    }
  }
  save_manifest(m, (std::filesystem::path(out_dir) / "manifest.csv").string());
  return m;
}

// ---------------------------------------------------------------------------
// Patch sampling, augmentation, equivariant transforms

struct PatchBatch {
  Tensor<float> patches;       // (k, 3, P, P)
  std::vector<float> scores;   // inherited from the source image
  std::vector<int64_t> source; // index of the source record per patch
};

// Uniformly random top-left corners; every patch inherits `score`.
inline PatchBatch sample_patches(const Tensor<float>& image, float score,
                                 int64_t count, int64_t patch, Rng& rng,
                                 int64_t source_index = 0) {
  if (image.ndim() != 3 || image.dim(0) != 3)
    throw ShapeError("sample_patches: want a (3,H,W) image");
  int64_t h = image.dim(1), w = image.dim(2);
  if (h < patch || w < patch)
    throw DataError("sample_patches: image " + std::to_string(h) + "x" +
                    std::to_string(w) + " smaller than patch " +
                    std::to_string(patch));
  if (count < 1) throw DataError("sample_patches: count must be >= 1");
  PatchBatch out;
  out.patches = Tensor<float>::zeros({count, 3, patch, patch});
  out.scores.assign(static_cast<size_t>(count), score);
  out.source.assign(static_cast<size_t>(count), source_index);
  auto src = image.data();
  auto dst = out.patches.data();
  for (int64_t k = 0; k < count; ++k) {
    int64_t top = static_cast<int64_t>(rng.next_index(h - patch + 1));
    int64_t left = static_cast<int64_t>(rng.next_index(w - patch + 1));
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < patch; ++y)
        for (int64_t x = 0; x < patch; ++x)
          dst[((k * 3 + c) * patch + y) * patch + x] =
              src[(c * h + top + y) * w + left + x];
  }
  return out;
}

struct AugmentPolicy {
  bool hflip = true, vflip = true;
  double p = 0.5;
};

namespace detail {

inline void flip_patch(std::span<float> d, int64_t c, int64_t h, int64_t w,
                       bool horizontal) {
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < (horizontal ? h : h / 2); ++y)
      for (int64_t x = 0; x < (horizontal ? w / 2 : w); ++x) {
        int64_t y2 = horizontal ? y : h - 1 - y;
        int64_t x2 = horizontal ? w - 1 - x : x;
        std::swap(d[(ch * h + y) * w + x], d[(ch * h + y2) * w + x2]);
      }
}

}  // namespace detail

// Independent per-patch coin flips; scores are untouched.
inline void augment_inplace(PatchBatch& batch, Rng& rng,
                            const AugmentPolicy& policy = {}) {
  if (!batch.patches.defined() || batch.patches.size() == 0) return;
  int64_t k = batch.patches.dim(0), c = batch.patches.dim(1);
  int64_t h = batch.patches.dim(2), w = batch.patches.dim(3);
  auto d = batch.patches.data();
  for (int64_t i = 0; i < k; ++i) {
    auto patch = d.subspan(static_cast<size_t>(i) * c * h * w,
                           static_cast<size_t>(c) * h * w);
    if (policy.hflip && rng.bernoulli(policy.p))
      detail::flip_patch(patch, c, h, w, true);
    if (policy.vflip && rng.bernoulli(policy.p))
      detail::flip_patch(patch, c, h, w, false);
  }
}

enum class TransformKind { kHFlip, kVFlip, kRot90, kTranslate, kCrop };

inline TransformKind parse_transform(const std::string& name) {
  if (name == "hflip") return TransformKind::kHFlip;
  if (name == "vflip") return TransformKind::kVFlip;
  if (name == "rot90") return TransformKind::kRot90;
  if (name == "translate") return TransformKind::kTranslate;
  if (name == "crop") return TransformKind::kCrop;
  throw DataError("unknown equivariant transform: " + name +
                  " (want hflip|vflip|rot90|translate|crop)");
}

inline const char* transform_name(TransformKind kind) {
  switch (kind) {
    case TransformKind::kHFlip: return "hflip";
    case TransformKind::kVFlip: return "vflip";
    case TransformKind::kRot90: return "rot90";
    case TransformKind::kTranslate: return "translate";
    case TransformKind::kCrop: return "crop";
  }
  return "?";
}

// Applies one equivariant transform to a (b,c,h,w) batch. Flips and the 90
// degree rotation are deterministic; translation (16-20 px, reflective
// padding) and crop draw from `rng`. Pure data path, no gradient.
inline Tensor<float> equivariant_transform(const Tensor<float>& batch,
                                           TransformKind kind,
                                           Rng* rng = nullptr) {
  if (batch.ndim() != 4)
    throw ShapeError("equivariant_transform: want (b,c,h,w)");
  int64_t b = batch.dim(0), c = batch.dim(1), h = batch.dim(2),
          w = batch.dim(3);
  auto src = batch.data();
  auto out = Tensor<float>::zeros(batch.shape());
  auto dst = out.data();
  auto mirror = [](int64_t i, int64_t n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
  };
  switch (kind) {
    case TransformKind::kHFlip:
    case TransformKind::kVFlip: {
      bool horizontal = kind == TransformKind::kHFlip;
      for (int64_t n = 0; n < b * c; ++n)
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x) {
            int64_t sy = horizontal ? y : h - 1 - y;
            int64_t sx = horizontal ? w - 1 - x : x;
            dst[(n * h + y) * w + x] = src[(n * h + sy) * w + sx];
          }
      break;
    }
    case TransformKind::kRot90: {
      if (h != w)
        throw ShapeError("rot90 needs square patches, got " +
                         shape_str(batch.shape()));
      for (int64_t n = 0; n < b * c; ++n)
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x)
            dst[(n * h + y) * w + x] = src[(n * h + x) * w + (w - 1 - y)];
      break;
    }
    case TransformKind::kTranslate: {
      if (!rng)
        throw DataError("translate transform needs a random generator");
      if (h <= 20 || w <= 20)
        throw DataError("translate needs patches larger than 20 px");
      int64_t mag_y = 16 + static_cast<int64_t>(rng->next_index(5));
      int64_t mag_x = 16 + static_cast<int64_t>(rng->next_index(5));
      int64_t dy = rng->bernoulli(0.5) ? mag_y : -mag_y;
      int64_t dx = rng->bernoulli(0.5) ? mag_x : -mag_x;
      for (int64_t n = 0; n < b * c; ++n)
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x)
            dst[(n * h + y) * w + x] =
                src[(n * h + mirror(y + dy, h)) * w + mirror(x + dx, w)];
      break;
    }
    case TransformKind::kCrop: {
      if (!rng) throw DataError("crop transform needs a random generator");
      int64_t margin = std::min<int64_t>(16, std::min(h, w) / 4);
      if (margin < 1)
        throw DataError("crop needs patches of at least 4 px");
      int64_t ch = h - margin, cw = w - margin;
      int64_t top = static_cast<int64_t>(rng->next_index(margin + 1));
      int64_t left = static_cast<int64_t>(rng->next_index(margin + 1));
      auto cropped = Tensor<float>::zeros({b, c, ch, cw});
      auto cd = cropped.data();
      for (int64_t n = 0; n < b * c; ++n)
        for (int64_t y = 0; y < ch; ++y)
          for (int64_t x = 0; x < cw; ++x)
            cd[(n * ch + y) * cw + x] =
                src[(n * h + top + y) * w + left + x];
      return bilinear_resize(cropped, h, w);
    }
  }
  return out;
}

}  // namespace iqa
