#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "iqa/analysis.hpp"
#include "iqa/checkpoint.hpp"
#include "iqa/data.hpp"
#include "iqa/losses.hpp"
#include "iqa/model.hpp"
#include "iqa/optim.hpp"

// End-to-end training: per step, a patch batch and its transformed twin are
// both forwarded through the one model, the quality/ranking/consistency
// losses combine into the total, and Adam updates the shared parameters.

namespace iqa {

struct TrainConfig {
  int64_t epochs = 5;
  int64_t batch_size = 53;
  double lr = 2e-5;
  double lr_decay_factor = 10.0;  // applied per epoch: lr0 / decay^e
  double weight_decay = 5e-4;
  LossWeights weights;
  LossNorm loss_norm = LossNorm::kL1;
  ConsistencyOn consistency_on = ConsistencyOn::kScalar;
  TransformKind consistency_transform = TransformKind::kHFlip;
  uint64_t seed = 1;
  int64_t patches_per_image = 1;
  int64_t patch_size = 64;
  int64_t eval_patches = 8;  // patches per image when scoring validation
  int64_t eval_every = 0;    // steps between validation passes; 0 = per epoch
  AugmentPolicy augment;
  std::string log_path;        // per-step loss CSV; empty = keep in memory only
  std::string checkpoint_dir;  // best/final/last_good live here; empty = none

  void validate() const {
    if (epochs <= 0) throw DataError("train: epochs must be > 0");
    if (batch_size <= 0) throw DataError("train: batch_size must be > 0");
    if (!(lr > 0)) throw DataError("train: lr must be > 0");
    if (!(lr_decay_factor > 0))
      throw DataError("train: lr_decay_factor must be > 0");
    if (patches_per_image <= 0)
      throw DataError("train: patches_per_image must be > 0");
    if (patch_size <= 0) throw DataError("train: patch_size must be > 0");
    if (eval_patches <= 0) throw DataError("train: eval_patches must be > 0");
  }

  std::map<std::string, std::string> echo() const {
    std::map<std::string, std::string> kv;
    kv["epochs"] = std::to_string(epochs);
    kv["batch_size"] = std::to_string(batch_size);
    kv["lr"] = fmt_real(lr);
    kv["lr_decay_factor"] = fmt_real(lr_decay_factor);
    kv["weight_decay"] = fmt_real(weight_decay);
    kv["lambda1"] = fmt_real(weights.lambda1);
    kv["lambda2"] = fmt_real(weights.lambda2);
    kv["lambda3"] = fmt_real(weights.lambda3);
    kv["loss_norm"] = loss_norm == LossNorm::kL1 ? "l1" : "l2";
    kv["consistency_on"] =
        consistency_on == ConsistencyOn::kScalar ? "scalar" : "vector";
    kv["consistency_transform"] = transform_name(consistency_transform);
    kv["seed"] = std::to_string(seed);
    kv["patches_per_image"] = std::to_string(patches_per_image);
    kv["patch_size"] = std::to_string(patch_size);
    kv["eval_patches"] = std::to_string(eval_patches);
    kv["eval_every"] = std::to_string(eval_every);
    kv["augment_hflip"] = augment.hflip ? "true" : "false";
    kv["augment_vflip"] = augment.vflip ? "true" : "false";
    kv["augment_p"] = fmt_real(augment.p);
    return kv;
  }
};

struct EvalPoint {
  int64_t step = 0;
  double srocc = 0, plcc = 0;
};

struct TrainResult {
  std::vector<LossReport> history;  // one row per step
  std::vector<EvalPoint> evals;
  double best_srocc = std::numeric_limits<double>::quiet_NaN();
  int64_t best_step = -1;
  int64_t steps = 0;
  double final_lr = 0;
};

namespace detail {

inline std::string loss_csv_header() {
  return "step,quality,ranking,consistency,total,margin1,margin2";
}

inline std::string loss_csv_row(int64_t step, const LossReport& r) {
  return std::to_string(step) + "," + fmt_real(r.quality) + "," +
         fmt_real(r.ranking) + "," + fmt_real(r.consistency) + "," +
         fmt_real(r.total) + "," + fmt_real(r.margin1) + "," +
         fmt_real(r.margin2);
}

// Gathers pool rows into a contiguous (b,3,P,P) batch.
inline Tensor<float> gather_rows(const Tensor<float>& pool,
                                 const std::vector<int64_t>& order,
                                 int64_t begin, int64_t count) {
  int64_t row = pool.size() / pool.dim(0);
  auto out = Tensor<float>::zeros({count, pool.dim(1), pool.dim(2), pool.dim(3)});
  for (int64_t i = 0; i < count; ++i)
    std::memcpy(out.data().data() + i * row,
                pool.data().data() + order[static_cast<size_t>(begin + i)] * row,
                static_cast<size_t>(row) * sizeof(float));
  return out;
}

struct LoadedSet {
  std::vector<Tensor<float>> images;
  std::vector<float> scores;  // normalized to [0,1] by the manifest range
};

inline LoadedSet load_images(const DatasetManifest& m, const char* what) {
  if (m.records.empty())
    throw DataError(std::string("train: empty ") + what + " manifest");
  if (!(m.score_hi > m.score_lo))
    throw DataError("train: manifest score range is empty");
  LoadedSet set;
  for (const auto& rec : m.records) {
    set.images.push_back(image_to_tensor(read_ppm(m.resolve(rec))));
    set.scores.push_back(static_cast<float>((rec.score - m.score_lo) /
                                            (m.score_hi - m.score_lo)));
  }
  return set;
}

}  // namespace detail

// Deterministic per-image evaluation seed, fixed across repeated passes.
inline uint64_t eval_seed(uint64_t base, size_t image_index) {
  return base + 1000003ULL * (static_cast<uint64_t>(image_index) + 1);
}

// Patch-averaged predictions for every image in a loaded set.
inline std::vector<double> predict_set(Model<float>& model,
                                       const std::vector<Tensor<float>>& images,
                                       int64_t n_patches, int64_t patch_size,
                                       uint64_t seed_base) {
  std::vector<double> preds;
  for (size_t i = 0; i < images.size(); ++i)
    preds.push_back(predict_image(model, images[i], n_patches, patch_size,
                                  eval_seed(seed_base, i)));
  return preds;
}

inline TrainResult train(Model<float>& model, const TrainConfig& cfg,
                         const DatasetManifest& train_manifest,
                         const DatasetManifest& val_manifest) {
  cfg.validate();
  auto train_set = detail::load_images(train_manifest, "train");
  auto val_set = detail::load_images(val_manifest, "validation");
  for (const auto& img : train_set.images)
    if (img.dim(1) < cfg.patch_size || img.dim(2) < cfg.patch_size)
      throw DataError("train: image smaller than patch size");

  Rng master(cfg.seed);
  Rng pool_rng = master.fork(1);
  Rng aug_rng = master.fork(2);
  Rng tau_rng = master.fork(3);
  Rng drop_rng = master.fork(4);

  Adam<float> opt(model.params(), cfg.lr, cfg.weight_decay);
  NamedParams<float> params = model.params();
  NamedBuffers<float> buffers = model.buffers();

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path, std::ios::binary | std::ios::trunc);
    if (!log) throw DataError("train: cannot write log " + cfg.log_path);
    log << detail::loss_csv_header() << "\n";
  }

  TrainResult result;
  int64_t step = 0;
  auto meta_for = [&](int64_t epoch) {
    auto kv = cfg.echo();
    for (const auto& [k, v] : model.cfg.echo()) kv[k] = v;
    kv["score_lo"] = fmt_real(train_manifest.score_lo);
    kv["score_hi"] = fmt_real(train_manifest.score_hi);
    kv["step"] = std::to_string(step);
    kv["epoch"] = std::to_string(epoch);
    if (result.best_step >= 0) {
      kv["best_step"] = std::to_string(result.best_step);
      kv["best_srocc"] = fmt_real(result.best_srocc);
    }
    return kv;
  };
  auto save_to = [&](const char* leaf, int64_t epoch) {
    if (cfg.checkpoint_dir.empty()) return;
    auto dir = (std::filesystem::path(cfg.checkpoint_dir) / leaf).string();
    save_checkpoint(dir, params, buffers, meta_for(epoch));
  };
  auto evaluate = [&](int64_t epoch) {
    auto preds = predict_set(model, val_set.images, cfg.eval_patches,
                             cfg.patch_size, cfg.seed);
    std::vector<double> gts(val_set.scores.begin(), val_set.scores.end());
    EvalPoint pt;
    pt.step = step;
    try {
      pt.srocc = srocc(preds, gts);
    } catch (const IqaError&) {
      pt.srocc = std::numeric_limits<double>::quiet_NaN();
    }
    try {
      pt.plcc = plcc(preds, gts);
    } catch (const IqaError&) {
      pt.plcc = std::numeric_limits<double>::quiet_NaN();
    }
    result.evals.push_back(pt);
    if (std::isfinite(pt.srocc) &&
        (!std::isfinite(result.best_srocc) || pt.srocc > result.best_srocc)) {
      result.best_srocc = pt.srocc;
      result.best_step = step;
      save_to("best", epoch);
    }
  };
  auto abort_non_finite = [&](int64_t epoch, const std::string& why) {
    save_to("last_good", epoch);
    throw NumericError("train: " + why + " at step " + std::to_string(step) +
                       (cfg.checkpoint_dir.empty()
                            ? ""
                            : "; last-good checkpoint saved"));
  };

  int64_t n_images = static_cast<int64_t>(train_set.images.size());
  int64_t pool_size = n_images * cfg.patches_per_image;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(cfg.lr / std::pow(cfg.lr_decay_factor,
                                 static_cast<double>(epoch)));
    // Fresh patch pool each epoch: every image contributes patches_per_image
    // crops, flip-augmented, then visited in shuffled order.
    PatchBatch pool;
    pool.patches =
        Tensor<float>::zeros({pool_size, 3, cfg.patch_size, cfg.patch_size});
    int64_t row = 3 * cfg.patch_size * cfg.patch_size;
    for (int64_t i = 0; i < n_images; ++i) {
      auto pb = sample_patches(train_set.images[static_cast<size_t>(i)],
                               train_set.scores[static_cast<size_t>(i)],
                               cfg.patches_per_image, cfg.patch_size, pool_rng,
                               i);
      std::memcpy(pool.patches.data().data() + i * cfg.patches_per_image * row,
                  pb.patches.data().data(),
                  static_cast<size_t>(cfg.patches_per_image * row) *
                      sizeof(float));
      for (float s : pb.scores) pool.scores.push_back(s);
      for (int64_t src : pb.source) pool.source.push_back(src);
    }
    augment_inplace(pool, aug_rng, cfg.augment);
    std::vector<int64_t> order(static_cast<size_t>(pool_size));
    for (int64_t i = 0; i < pool_size; ++i) order[static_cast<size_t>(i)] = i;
    pool_rng.shuffle(order);

    for (int64_t begin = 0; begin < pool_size; begin += cfg.batch_size) {
      int64_t b = std::min(cfg.batch_size, pool_size - begin);
      auto batch = detail::gather_rows(pool.patches, order, begin, b);
      std::vector<float> s_vec(static_cast<size_t>(b));
      for (int64_t i = 0; i < b; ++i)
        s_vec[static_cast<size_t>(i)] =
            pool.scores[static_cast<size_t>(order[static_cast<size_t>(begin + i)])];
      auto s_t = Tensor<float>::from({b}, std::vector<float>(s_vec));

      auto tau = equivariant_transform(batch, cfg.consistency_transform,
                                       &tau_rng);
      auto out_a = model.forward(batch, true, &drop_rng);
      auto out_b = model.forward(tau, true, &drop_rng);
      auto quality = quality_loss(out_a.q, s_t, cfg.loss_norm);
      RankingInfo info;
      auto rr_a = relative_ranking_loss(out_a.q, std::span<const float>(s_vec),
                                        &info);
      auto rr_b = relative_ranking_loss(out_b.q, std::span<const float>(s_vec));
      auto cons = self_consistency_loss(
          out_a, out_b, rr_a, rr_b, static_cast<float>(cfg.weights.lambda1),
          cfg.consistency_on);
      auto total = total_loss(quality, rr_a, cons, cfg.weights);

      LossReport report;
      report.quality = quality.item();
      report.ranking = rr_a.item();
      report.consistency = cons.item();
      report.total = total.item();
      report.margin1 = info.margin1;
      report.margin2 = info.margin2;
      if (!std::isfinite(report.total))
        abort_non_finite(epoch, "non-finite total loss");

      opt.zero_grad();
      total.backward();
      try {
        opt.step();
      } catch (const NumericError& e) {
        abort_non_finite(epoch, e.what());
      }
      ++step;
      result.history.push_back(report);
      if (log) log << detail::loss_csv_row(step, report) << "\n";
      if (cfg.eval_every > 0 && step % cfg.eval_every == 0) evaluate(epoch);
    }
    if (cfg.eval_every <= 0) evaluate(epoch);
  }
  if (cfg.eval_every > 0 &&
      (result.evals.empty() || result.evals.back().step != step))
    evaluate(cfg.epochs - 1);
  save_to("final", cfg.epochs - 1);
  if (log && !log.good()) throw DataError("train: log write failed");
  result.steps = step;
  result.final_lr = opt.lr();
  return result;
}

}  // namespace iqa
