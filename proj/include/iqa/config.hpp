#pragma once

#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "iqa/data.hpp"
#include "iqa/model.hpp"
#include "iqa/trainer.hpp"

// Flat `key = value` configuration: a typed per-subcommand schema, a file
// parser, command-line overrides, and builders for the library config
// structs. Unknown keys are rejected; the resolved config can be echoed.

namespace iqa {

struct ConfigKey {
  std::string name;
  std::string type;  // int | real | bool | string
  std::string fallback;
  std::string help;
};

struct ConfigSchema {
  std::vector<ConfigKey> keys;

  void add(const std::string& name, const std::string& type,
           const std::string& fallback, const std::string& help) {
    for (const auto& k : keys)
      if (k.name == name)
        throw ConfigError("schema already has key `" + name + "`");
    keys.push_back({name, type, fallback, help});
  }

  const ConfigKey* find(const std::string& name) const {
    for (const auto& k : keys)
      if (k.name == name) return &k;
    return nullptr;
  }
};

class ConfigValues {
public:
  explicit ConfigValues(const ConfigSchema& schema) : schema_(&schema) {}

  void set(const std::string& key, const std::string& value,
           const std::string& where) {
    if (!schema_->find(key))
      throw ConfigError("unknown key `" + key + "` (" + where + ")");
    kv_[key] = value;
  }

  std::string get_string(const std::string& key) const {
    auto* k = require(key);
    auto it = kv_.find(key);
    return it != kv_.end() ? it->second : k->fallback;
  }

  int64_t get_int(const std::string& key) const {
    try {
      return parse_int(get_string(key), "key `" + key + "`");
    } catch (const DataError& e) {
      throw ConfigError(e.what());  // a bad value is a usage problem
    }
  }

  double get_real(const std::string& key) const {
    try {
      return parse_real(get_string(key), "key `" + key + "`");
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
  }

  bool get_bool(const std::string& key) const {
    auto v = get_string(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key `" + key + "`: want true|false, got `" + v + "`");
  }

  bool is_set(const std::string& key) const {
    require(key);
    return kv_.count(key) > 0;
  }

  // Full resolved listing (defaults included), sorted by key.
  std::string resolved_text() const {
    std::map<std::string, std::string> all;
    for (const auto& k : schema_->keys) all[k.name] = k.fallback;
    for (const auto& [k, v] : kv_) all[k] = v;
    std::string out;
    for (const auto& [k, v] : all) out += k + " = " + v + "\n";
    return out;
  }

  const ConfigSchema& schema() const { return *schema_; }

private:
  const ConfigKey* require(const std::string& key) const {
    auto* k = schema_->find(key);
    if (!k) throw ConfigError("unknown key `" + key + "`");
    return k;
  }

  const ConfigSchema* schema_;
  std::map<std::string, std::string> kv_;
};

// `key = value` lines; '#' starts a comment; blank lines ignored.
inline void load_config_file(ConfigValues& values, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file: " + path);
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      size_t b = s.find_first_not_of(" \t");
      if (b == std::string::npos) return std::string();
      size_t e = s.find_last_not_of(" \t");
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + " line " + std::to_string(line_no) +
                        ": want `key = value`");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(path + " line " + std::to_string(line_no) +
                        ": empty key");
    values.set(key, value, path + " line " + std::to_string(line_no));
  }
}

inline int64_t default_workers() {
  int64_t cores = static_cast<int64_t>(std::thread::hardware_concurrency());
  if (cores < 1) cores = 1;
  return std::min<int64_t>(cores, 8);
}

// ---- schema fragments ------------------------------------------------------

inline void add_common_keys(ConfigSchema& s) {
  s.add("workers", "int", std::to_string(default_workers()),
        "worker cap for parallel stages (1..8)");
}

inline void add_model_keys(ConfigSchema& s) {
  ModelConfig d;
  auto de = d.echo();
  s.add("channels", "string", de.at("channels"),
        "backbone stage widths, four comma-separated ints");
  s.add("units_per_block", "int", de.at("units_per_block"),
        "residual units per backbone stage");
  s.add("feature_dropout", "real", de.at("feature_dropout"),
        "train-time channel dropout on the fused features");
  s.add("encoder_layers", "int", de.at("encoder_layers"),
        "transformer encoder depth");
  s.add("encoder_dim", "int", de.at("encoder_dim"),
        "transformer width (divisible by 4 and by heads)");
  s.add("encoder_heads", "int", de.at("encoder_heads"),
        "attention heads");
  s.add("encoder_ffn_dim", "int", de.at("encoder_ffn_dim"),
        "encoder FFN width (0 = 4x encoder_dim)");
  s.add("pe_temperature", "real", de.at("pe_temperature"),
        "positional encoding temperature");
  s.add("use_pe", "bool", de.at("use_pe"),
        "add positional encoding to attention queries/keys");
  s.add("use_encoder", "bool", de.at("use_encoder"),
        "false = conv branch only");
  s.add("head_hidden", "int", de.at("head_hidden"),
        "hidden width of the two scoring MLPs");
  s.add("model_seed", "int", de.at("model_seed"),
        "parameter init seed");
}

inline void add_train_keys(ConfigSchema& s) {
  TrainConfig d;
  auto de = d.echo();
  s.add("epochs", "int", de.at("epochs"), "training epochs");
  s.add("batch_size", "int", de.at("batch_size"), "patches per step");
  s.add("lr", "real", de.at("lr"), "initial learning rate");
  s.add("lr_decay_factor", "real", de.at("lr_decay_factor"),
        "per-epoch lr divisor");
  s.add("weight_decay", "real", de.at("weight_decay"),
        "coupled L2 weight decay");
  s.add("lambda1", "real", de.at("lambda1"),
        "ranking-difference weight inside the consistency loss");
  s.add("lambda2", "real", de.at("lambda2"), "ranking loss weight");
  s.add("lambda3", "real", de.at("lambda3"), "consistency loss weight");
  s.add("loss_norm", "string", de.at("loss_norm"),
        "quality loss norm: l1|l2");
  s.add("consistency_on", "string", de.at("consistency_on"),
        "consistency compares scalar|vector branch outputs");
  s.add("consistency_transform", "string", de.at("consistency_transform"),
        "equivariant transform: hflip|vflip|rot90|translate|crop");
  s.add("seed", "int", de.at("seed"), "training seed");
  s.add("patches_per_image", "int", de.at("patches_per_image"),
        "patches drawn per image per epoch");
  s.add("patch_size", "int", de.at("patch_size"), "square patch side");
  s.add("eval_patches", "int", de.at("eval_patches"),
        "patches per image for validation scoring");
  s.add("eval_every", "int", de.at("eval_every"),
        "steps between validation passes (0 = each epoch)");
  s.add("augment_hflip", "bool", de.at("augment_hflip"),
        "random horizontal flips in training");
  s.add("augment_vflip", "bool", de.at("augment_vflip"),
        "random vertical flips in training");
  s.add("augment_p", "real", de.at("augment_p"),
        "per-patch flip probability");
}

inline void add_synth_keys(ConfigSchema& s) {
  SyntheticSpec d;
  s.add("n_refs", "int", std::to_string(d.n_refs),
        "number of reference images");
  s.add("height", "int", std::to_string(d.height), "image height (16k)");
  s.add("width", "int", std::to_string(d.width), "image width (16k)");
  std::string fams;
  for (size_t i = 0; i < d.families.size(); ++i) {
    if (i) fams += ",";
    fams += d.families[i];
  }
  s.add("families", "string", fams, "comma-separated distortion families");
  s.add("levels", "int", std::to_string(d.levels),
        "severity levels per family (2..4)");
  s.add("synth_seed", "int", std::to_string(d.seed), "generator seed");
}

inline void add_patch_keys(ConfigSchema& s, int64_t n_patches,
                           int64_t patch_size) {
  s.add("n_patches", "int", std::to_string(n_patches),
        "patches averaged per image");
  s.add("patch_size", "int", std::to_string(patch_size),
        "square patch side");
  s.add("sample_seed", "int", "1", "patch sampling seed");
}

// ---- builders --------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_list(const std::string& text,
                                           char sep) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (pos <= text.size()) {
    size_t next = text.find(sep, pos);
    if (next == std::string::npos) next = text.size();
    auto item = text.substr(pos, next - pos);
    size_t b = item.find_first_not_of(" \t");
    if (b == std::string::npos)
      item.clear();
    else
      item = item.substr(b, item.find_last_not_of(" \t") - b + 1);
    if (!item.empty()) out.push_back(item);
    pos = next + 1;
  }
  return out;
}

}  // namespace detail

// Reads the model keys from any flat map (config values or checkpoint meta).
inline ModelConfig model_from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig mc;
  auto get = [&](const char* key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  if (auto* v = get("channels")) {
    auto parts = detail::split_list(*v, ',');
    if (parts.size() != 4)
      throw ConfigError("channels: want 4 comma-separated ints, got `" + *v +
                        "`");
    for (size_t i = 0; i < 4; ++i)
      mc.backbone.channels[i] = parse_int(parts[i], "channels");
  }
  if (auto* v = get("units_per_block"))
    mc.backbone.units_per_block = parse_int(*v, "units_per_block");
  if (auto* v = get("feature_dropout"))
    mc.backbone.feature_dropout = parse_real(*v, "feature_dropout");
  if (auto* v = get("encoder_layers"))
    mc.encoder.n_layers = parse_int(*v, "encoder_layers");
  if (auto* v = get("encoder_dim"))
    mc.encoder.d = parse_int(*v, "encoder_dim");
  if (auto* v = get("encoder_heads"))
    mc.encoder.heads = parse_int(*v, "encoder_heads");
  if (auto* v = get("encoder_ffn_dim"))
    mc.encoder.ffn_dim = parse_int(*v, "encoder_ffn_dim");
  if (auto* v = get("pe_temperature"))
    mc.encoder.pe_temperature = parse_real(*v, "pe_temperature");
  auto get_bool = [&](const char* key, bool fallback) {
    auto* v = get(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1") return true;
    if (*v == "false" || *v == "0") return false;
    throw ConfigError(std::string("key `") + key + "`: want true|false");
  };
  mc.encoder.use_pe = get_bool("use_pe", mc.encoder.use_pe);
  mc.use_encoder = get_bool("use_encoder", mc.use_encoder);
  if (auto* v = get("head_hidden"))
    mc.head_hidden = parse_int(*v, "head_hidden");
  if (auto* v = get("model_seed"))
    mc.seed = static_cast<uint64_t>(parse_int(*v, "model_seed"));
  return mc;
}

inline ModelConfig model_from(const ConfigValues& c) {
  std::map<std::string, std::string> kv;
  ModelConfig probe;
  for (const auto& [k, v] : probe.echo()) kv[k] = c.get_string(k);
  try {
    return model_from_kv(kv);
  } catch (const DataError& e) {
    throw ConfigError(e.what());  // the values came from user config
  }
}

inline LossNorm parse_loss_norm(const std::string& v) {
  if (v == "l1") return LossNorm::kL1;
  if (v == "l2") return LossNorm::kL2;
  throw ConfigError("loss_norm: want l1|l2, got `" + v + "`");
}

inline ConsistencyOn parse_consistency_on(const std::string& v) {
  if (v == "scalar") return ConsistencyOn::kScalar;
  if (v == "vector") return ConsistencyOn::kVector;
  throw ConfigError("consistency_on: want scalar|vector, got `" + v + "`");
}

inline TrainConfig train_from(const ConfigValues& c) {
  TrainConfig tc;
  tc.epochs = c.get_int("epochs");
  tc.batch_size = c.get_int("batch_size");
  tc.lr = c.get_real("lr");
  tc.lr_decay_factor = c.get_real("lr_decay_factor");
  tc.weight_decay = c.get_real("weight_decay");
  tc.weights.lambda1 = c.get_real("lambda1");
  tc.weights.lambda2 = c.get_real("lambda2");
  tc.weights.lambda3 = c.get_real("lambda3");
  tc.loss_norm = parse_loss_norm(c.get_string("loss_norm"));
  tc.consistency_on = parse_consistency_on(c.get_string("consistency_on"));
  try {
    tc.consistency_transform =
        parse_transform(c.get_string("consistency_transform"));
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  tc.seed = static_cast<uint64_t>(c.get_int("seed"));
  tc.patches_per_image = c.get_int("patches_per_image");
  tc.patch_size = c.get_int("patch_size");
  tc.eval_patches = c.get_int("eval_patches");
  tc.eval_every = c.get_int("eval_every");
  tc.augment.hflip = c.get_bool("augment_hflip");
  tc.augment.vflip = c.get_bool("augment_vflip");
  tc.augment.p = c.get_real("augment_p");
  return tc;
}

inline SyntheticSpec synth_from(const ConfigValues& c) {
  SyntheticSpec spec;
  spec.n_refs = c.get_int("n_refs");
  spec.height = c.get_int("height");
  spec.width = c.get_int("width");
  spec.families = detail::split_list(c.get_string("families"), ',');
  spec.levels = c.get_int("levels");
  spec.seed = static_cast<uint64_t>(c.get_int("synth_seed"));
  try {
    for (const auto& f : spec.families) detail::family_id(f);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return spec;
}

inline int64_t workers_from(const ConfigValues& c) {
  int64_t w = c.get_int("workers");
  if (w < 1 || w > 8)
    throw ConfigError("workers: want 1..8, got " + std::to_string(w));
  return w;
}

// ---- per-subcommand schemas ------------------------------------------------

inline const std::vector<std::string>& cli_subcommands() {
  static const std::vector<std::string> names = {
      "synth",    "train", "eval",   "predict", "flip-report",
      "retrieve", "qmap",  "ablate", "plot",    "gradcheck"};
  return names;
}

inline ConfigSchema cli_schema(const std::string& subcommand) {
  ConfigSchema s;
  auto add_ckpt = [&] {
    s.add("ckpt", "string", "", "checkpoint directory");
  };
  auto add_out_csv = [&] {
    s.add("out", "string", "", "write the CSV here instead of stdout");
  };
  auto add_manifest_pair = [&] {
    s.add("train_manifest", "string", "", "training manifest CSV");
    s.add("val_manifest", "string", "", "validation manifest CSV");
  };
  if (subcommand == "synth") {
    add_synth_keys(s);
    s.add("out", "string", "",
          "output directory for images and manifest.csv");
  } else if (subcommand == "train") {
    add_model_keys(s);
    add_train_keys(s);
    add_manifest_pair();
    s.add("checkpoint_dir", "string", "",
          "directory for best/final checkpoints (empty = none)");
    s.add("log_path", "string", "", "per-step loss CSV (empty = none)");
  } else if (subcommand == "eval") {
    add_ckpt();
    s.add("manifest", "string", "", "evaluation manifest CSV");
    add_patch_keys(s, 8, 64);
    add_out_csv();
  } else if (subcommand == "predict") {
    add_ckpt();
    s.add("image", "string", "", "PPM image to score");
    add_patch_keys(s, 8, 64);
  } else if (subcommand == "flip-report") {
    add_ckpt();
    s.add("manifest", "string", "", "manifest of images to test");
    add_patch_keys(s, 8, 64);
    add_out_csv();
  } else if (subcommand == "retrieve") {
    add_ckpt();
    s.add("query", "string", "", "query PPM image");
    s.add("gallery", "string", "", "gallery manifest CSV");
    s.add("k", "int", "5", "neighbors to return");
    add_patch_keys(s, 8, 64);
    add_out_csv();
  } else if (subcommand == "qmap") {
    add_ckpt();
    s.add("image", "string", "", "PPM image to map (dims divisible by 16)");
    s.add("source", "string", "encoder", "feature source: encoder|conv");
    s.add("heat_out", "string", "", "output PPM for the heat map");
    s.add("overlay_out", "string", "", "output PPM for the overlay");
  } else if (subcommand == "ablate") {
    add_model_keys(s);
    add_train_keys(s);
    add_manifest_pair();
    s.add("axes", "string", "",
          "comma-separated axes, each `axis` or `axis:v1|v2`; axes: "
          "transformer, positional_encoding, ranking_loss, "
          "consistency_loss, consistency_transform_kind");
    add_out_csv();
  } else if (subcommand == "plot") {
    s.add("pairs", "string", "", "CSV of `pred,gt` pairs");
    s.add("out", "string", "", "output SVG path");
    s.add("title", "string", "predictions", "plot title");
  } else if (subcommand == "gradcheck") {
    // no keys beyond the common ones
  } else {
    throw ConfigError("unknown subcommand `" + subcommand + "`");
  }
  add_common_keys(s);
  return s;
}

}  // namespace iqa
