#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "iqa/trainer.hpp"

// Component-ablation runner: trains one model per configuration in the
// cartesian product of the requested axes (shared seeds throughout) and
// tabulates held-out SROCC/PLCC.

namespace iqa {

struct AblationAxis {
  std::string name;                 // see kAblationAxes
  std::vector<std::string> values;  // subset of the axis's legal values
};

inline const std::vector<std::string>& ablation_axis_names() {
  static const std::vector<std::string> names = {
      "transformer", "positional_encoding", "ranking_loss",
      "consistency_loss", "consistency_transform_kind"};
  return names;
}

inline std::vector<std::string> ablation_axis_values(const std::string& axis) {
  if (axis == "consistency_transform_kind")
    return {"hflip", "vflip", "rot90", "translate", "crop"};
  for (const auto& name : ablation_axis_names())
    if (axis == name) return {"on", "off"};
  throw DataError("unknown ablation axis `" + axis + "`");
}

struct AblationRow {
  std::map<std::string, std::string> settings;  // axis -> chosen value
  std::string label;
  double srocc = 0, plcc = 0;
};

struct AblationTable {
  std::vector<std::string> axis_names;  // column order
  std::vector<AblationRow> rows;

  std::string csv() const {
    std::string out;
    for (const auto& name : axis_names) out += name + ",";
    out += "label,srocc,plcc\n";
    for (const auto& row : rows) {
      for (const auto& name : axis_names) out += row.settings.at(name) + ",";
      out += row.label + "," + fmt_real(row.srocc) + "," +
             fmt_real(row.plcc) + "\n";
    }
    return out;
  }
};

namespace detail {

// "on" restores the base weight, falling back to the standard default when
// the base config itself disabled the term.
inline double restore_weight(double base, double standard) {
  return base > 0 ? base : standard;
}

inline void apply_axis(const std::string& axis, const std::string& value,
                       ModelConfig& mc, TrainConfig& tc,
                       const TrainConfig& base) {
  auto want_on = [&]() {
    if (value == "on") return true;
    if (value == "off") return false;
    throw DataError("ablation axis `" + axis + "`: value `" + value +
                    "` (want on|off)");
  };
  if (axis == "transformer") {
    mc.use_encoder = want_on();
  } else if (axis == "positional_encoding") {
    mc.encoder.use_pe = want_on();
  } else if (axis == "ranking_loss") {
    tc.weights.lambda2 =
        want_on() ? restore_weight(base.weights.lambda2, 0.05) : 0.0;
  } else if (axis == "consistency_loss") {
    tc.weights.lambda3 =
        want_on() ? restore_weight(base.weights.lambda3, 1.0) : 0.0;
  } else if (axis == "consistency_transform_kind") {
    tc.consistency_transform = parse_transform(value);
  } else {
    throw DataError("unknown ablation axis `" + axis + "`");
  }
}

}  // namespace detail

inline AblationTable ablate(const ModelConfig& base_model,
                            const TrainConfig& base_train,
                            const DatasetManifest& train_manifest,
                            const DatasetManifest& val_manifest,
                            const std::vector<AblationAxis>& axes) {
  if (axes.empty()) throw DataError("ablate: no axes given");
  for (const auto& axis : axes) {
    auto legal = ablation_axis_values(axis.name);  // validates the name
    if (axis.values.empty())
      throw DataError("ablate: axis `" + axis.name + "` has no values");
    for (const auto& v : axis.values)
      if (std::find(legal.begin(), legal.end(), v) == legal.end())
        throw DataError("ablate: axis `" + axis.name + "`: bad value `" + v +
                        "`");
    for (const auto& other : axes)
      if (&other != &axis && other.name == axis.name)
        throw DataError("ablate: duplicate axis `" + axis.name + "`");
  }

  AblationTable table;
  for (const auto& axis : axes) table.axis_names.push_back(axis.name);

  std::vector<size_t> odo(axes.size(), 0);
  bool done = false;
  while (!done) {
    ModelConfig mc = base_model;
    TrainConfig tc = base_train;
    tc.log_path.clear();
    tc.checkpoint_dir.clear();
    AblationRow row;
    for (size_t i = 0; i < axes.size(); ++i) {
      const std::string& value = axes[i].values[odo[i]];
      detail::apply_axis(axes[i].name, value, mc, tc, base_train);
      row.settings[axes[i].name] = value;
    }
    bool backbone_only = !mc.use_encoder && tc.weights.lambda2 == 0 &&
                         tc.weights.lambda3 == 0;
    if (backbone_only) {
      row.label = "backbone-only";
    } else {
      for (size_t i = 0; i < axes.size(); ++i) {
        if (i) row.label += " ";
        row.label += axes[i].name + "=" + row.settings[axes[i].name];
      }
    }

    Model<float> model(mc);
    auto result = train(model, tc, train_manifest, val_manifest);
    if (!result.evals.empty()) {
      row.srocc = result.evals.back().srocc;
      row.plcc = result.evals.back().plcc;
    }
    table.rows.push_back(row);

    for (size_t i = axes.size(); i-- > 0;) {
      if (++odo[i] < axes[i].values.size()) break;
      odo[i] = 0;
      if (i == 0) done = true;
    }
  }
  return table;
}

}  // namespace iqa
