#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "iqa/ablate.hpp"
#include "iqa/analysis.hpp"
#include "iqa/checkpoint.hpp"
#include "iqa/config.hpp"
#include "iqa/trainer.hpp"

// Config-driven entry points shared by the command line and the language
// bindings: each takes a resolved ConfigValues for its subcommand schema and
// returns the library result struct.

namespace iqa {

inline std::string require_key(const ConfigValues& v, const std::string& key) {
  auto s = v.get_string(key);
  if (s.empty()) throw ConfigError("missing required key `" + key + "`");
  return s;
}

// Rebuilds the model a checkpoint was trained with and loads its tensors.
inline Model<float> model_from_checkpoint(
    const std::string& ckpt_dir, std::map<std::string, std::string>& meta) {
  meta = read_checkpoint_meta(ckpt_dir);
  Model<float> model(model_from_kv(meta));
  auto params = model.params();
  auto buffers = model.buffers();
  load_checkpoint(ckpt_dir, params, buffers);
  return model;
}

inline double meta_real(const std::map<std::string, std::string>& meta,
                        const std::string& key, double fallback) {
  auto it = meta.find(key);
  return it == meta.end() ? fallback : parse_real(it->second, key);
}

// `axis` or `axis:v1|v2`, comma-separated; a bare axis takes all its values.
inline std::vector<AblationAxis> parse_axes_text(const std::string& text) {
  std::vector<AblationAxis> axes;
  for (const auto& item : detail::split_list(text, ',')) {
    auto parts = detail::split_list(item, ':');
    AblationAxis ax;
    if (parts.size() == 1) {
      ax.name = parts[0];
      try {
        ax.values = ablation_axis_values(ax.name);
      } catch (const DataError& e) {
        throw ConfigError(e.what());  // the axes came from user config
      }
    } else if (parts.size() == 2) {
      ax.name = parts[0];
      ax.values = detail::split_list(parts[1], '|');
    } else {
      throw ConfigError("axes: want `axis` or `axis:v1|v2`, got `" + item +
                        "`");
    }
    axes.push_back(std::move(ax));
  }
  if (axes.empty()) throw ConfigError("axes: empty axis list");
  return axes;
}

inline std::vector<ScorePair> read_score_pairs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open pairs file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("pairs file is empty: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "pred,gt")
    throw DataError("pairs file: want header `pred,gt`, got `" + line + "`");
  std::vector<ScorePair> pairs;
  int64_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto comma = line.find(',');
    if (comma == std::string::npos)
      throw DataError("pairs file line " + std::to_string(line_no) +
                      ": want `pred,gt`");
    auto where = "pairs file line " + std::to_string(line_no);
    pairs.push_back({parse_real(line.substr(0, comma), where),
                     parse_real(line.substr(comma + 1), where)});
  }
  return pairs;
}

// ---- runners (one per subcommand) ------------------------------------------

struct SynthRun {
  DatasetManifest manifest;
  std::string manifest_path;
};

inline SynthRun run_synth(const ConfigValues& v) {
  workers_from(v);
  auto out_dir = require_key(v, "out");
  SynthRun run;
  run.manifest = synth_generate(synth_from(v), out_dir);
  run.manifest_path = out_dir + "/manifest.csv";
  return run;
}

inline TrainResult run_train(const ConfigValues& v) {
  workers_from(v);
  auto tc = train_from(v);
  tc.log_path = v.get_string("log_path");
  tc.checkpoint_dir = v.get_string("checkpoint_dir");
  auto train_m = load_manifest(require_key(v, "train_manifest"));
  auto val_m = load_manifest(require_key(v, "val_manifest"));
  Model<float> model(model_from(v));
  return train(model, tc, train_m, val_m);
}

inline MetricReport run_eval(const ConfigValues& v) {
  workers_from(v);
  std::map<std::string, std::string> meta;
  auto model = model_from_checkpoint(require_key(v, "ckpt"), meta);
  auto manifest = load_manifest(require_key(v, "manifest"));
  if (manifest.records.empty()) throw DataError("eval: empty manifest");
  std::vector<Tensor<float>> images;
  std::vector<double> gts;
  for (const auto& rec : manifest.records) {
    images.push_back(image_to_tensor(read_ppm(manifest.resolve(rec))));
    gts.push_back(rec.score);
  }
  auto preds =
      predict_set(model, images, v.get_int("n_patches"),
                  v.get_int("patch_size"),
                  static_cast<uint64_t>(v.get_int("sample_seed")));
  return evaluate_metrics(manifest.name, preds, gts);
}

struct PredictRun {
  double q = 0, score = 0, score_lo = 0, score_hi = 1;
};

inline PredictRun run_predict(const ConfigValues& v) {
  workers_from(v);
  std::map<std::string, std::string> meta;
  auto model = model_from_checkpoint(require_key(v, "ckpt"), meta);
  auto image = image_to_tensor(read_ppm(require_key(v, "image")));
  PredictRun run;
  run.q = predict_image(model, image, v.get_int("n_patches"),
                        v.get_int("patch_size"),
                        static_cast<uint64_t>(v.get_int("sample_seed")));
  run.score_lo = meta_real(meta, "score_lo", 0.0);
  run.score_hi = meta_real(meta, "score_hi", 1.0);
  run.score = run.score_lo + run.q * (run.score_hi - run.score_lo);
  return run;
}

inline FlipReport run_flip_report(const ConfigValues& v) {
  workers_from(v);
  std::map<std::string, std::string> meta;
  auto ckpt = require_key(v, "ckpt");
  auto model = model_from_checkpoint(ckpt, meta);
  auto manifest = load_manifest(require_key(v, "manifest"));
  return flip_report(model, manifest, v.get_int("n_patches"),
                     v.get_int("patch_size"),
                     static_cast<uint64_t>(v.get_int("sample_seed")), ckpt);
}

inline RetrievalResult run_retrieve(const ConfigValues& v) {
  workers_from(v);
  std::map<std::string, std::string> meta;
  auto model = model_from_checkpoint(require_key(v, "ckpt"), meta);
  auto query = image_to_tensor(read_ppm(require_key(v, "query")));
  auto gallery = load_manifest(require_key(v, "gallery"));
  return nearest_neighbors(
      model, query, gallery, v.get_int("k"), v.get_int("n_patches"),
      v.get_int("patch_size"),
      static_cast<uint64_t>(v.get_int("sample_seed")));
}

struct QmapRun {
  QualityMap map;
  std::string heat_path, overlay_path;
};

inline QmapRun run_qmap(const ConfigValues& v) {
  workers_from(v);
  std::map<std::string, std::string> meta;
  auto model = model_from_checkpoint(require_key(v, "ckpt"), meta);
  auto base = read_ppm(require_key(v, "image"));
  auto image = image_to_tensor(base);
  QmapRun run;
  run.heat_path = require_key(v, "heat_out");
  run.overlay_path = require_key(v, "overlay_out");
  run.map = quality_map(model, image, parse_qmap_source(v.get_string("source")));
  save_quality_map(run.map, base, run.heat_path, run.overlay_path);
  return run;
}

inline AblationTable run_ablate(const ConfigValues& v) {
  workers_from(v);
  auto tc = train_from(v);
  auto mc = model_from(v);
  auto train_m = load_manifest(require_key(v, "train_manifest"));
  auto val_m = load_manifest(require_key(v, "val_manifest"));
  auto axes = parse_axes_text(require_key(v, "axes"));
  return ablate(mc, tc, train_m, val_m, axes);
}

struct PlotRun {
  int64_t n = 0;
  std::string out_path;
};

inline PlotRun run_plot(const ConfigValues& v) {
  workers_from(v);
  auto pairs = read_score_pairs(require_key(v, "pairs"));
  PlotRun run;
  run.out_path = require_key(v, "out");
  run.n = static_cast<int64_t>(pairs.size());
  scatter_plot(pairs, run.out_path, v.get_string("title"));
  return run;
}

}  // namespace iqa
