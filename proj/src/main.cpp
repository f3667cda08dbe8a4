#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "iqa/gradsuite.hpp"
#include "iqa/runners.hpp"

// `iqa` command line: every config key doubles as a `--key` flag, flags
// override the `--config` file, the fully resolved config is logged to
// stderr, and machine-readable results go to stdout (or the `--out` file).
// Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.

namespace {

using namespace iqa;

struct SubCtx {
  std::string name;
  CLI::App* sub = nullptr;
  ConfigSchema schema;
  std::map<std::string, std::string> flag_values;
  std::map<std::string, CLI::Option*> flag_opts;
  std::string config_path;
  std::function<int(const ConfigValues&)> run;

  ConfigValues resolve() const {
    ConfigValues values(schema);
    if (!config_path.empty()) load_config_file(values, config_path);
    for (const auto& [key, opt] : flag_opts)
      if (opt->count() > 0)
        values.set(key, flag_values.at(key), "command line");
    return values;
  }
};

SubCtx* make_sub(CLI::App& app, std::vector<std::unique_ptr<SubCtx>>& all,
                 const std::string& name, const std::string& desc,
                 std::function<int(const ConfigValues&)> run) {
  auto ctx = std::make_unique<SubCtx>();
  ctx->name = name;
  ctx->schema = cli_schema(name);
  ctx->run = std::move(run);
  ctx->sub = app.add_subcommand(name, desc);
  ctx->sub->add_option("--config", ctx->config_path,
                       "flat `key = value` config file (# comments)");
  for (const auto& k : ctx->schema.keys) {
    auto& slot = ctx->flag_values[k.name];
    std::string help = k.help;
    if (!k.fallback.empty()) help += " (default: " + k.fallback + ")";
    ctx->flag_opts[k.name] = ctx->sub->add_option("--" + k.name, slot, help);
  }
  all.push_back(std::move(ctx));
  return all.back().get();
}

void emit(const std::string& payload, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << payload;
    return;
  }
  std::ofstream f(out_path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + out_path);
  f << payload;
  if (!f) throw DataError("write failed: " + out_path);
}

int cmd_synth(const ConfigValues& v) {
  auto run = run_synth(v);
  std::cout << "manifest = " << run.manifest_path << "\n";
  std::cout << "n_records = " << run.manifest.records.size() << "\n";
  return 0;
}

int cmd_train(const ConfigValues& v) {
  auto result = run_train(v);
  std::cout << "steps = " << result.steps << "\n";
  std::cout << "final_lr = " << fmt_real(result.final_lr) << "\n";
  std::cout << "best_step = " << result.best_step << "\n";
  std::cout << "best_srocc = " << fmt_real(result.best_srocc) << "\n";
  if (!result.evals.empty()) {
    std::cout << "final_srocc = " << fmt_real(result.evals.back().srocc)
              << "\n";
    std::cout << "final_plcc = " << fmt_real(result.evals.back().plcc)
              << "\n";
  }
  return 0;
}

int cmd_eval(const ConfigValues& v) {
  auto report = run_eval(v);
  emit("dataset,n,srocc,plcc,beta1,beta2,beta3,beta4\n" + report.csv_row() +
           "\n",
       v.get_string("out"));
  return 0;
}

int cmd_predict(const ConfigValues& v) {
  auto run = run_predict(v);
  std::cout << "q = " << fmt_real(run.q) << "\n";
  std::cout << "score = " << fmt_real(run.score) << "\n";
  std::cout << "score_lo = " << fmt_real(run.score_lo) << "\n";
  std::cout << "score_hi = " << fmt_real(run.score_hi) << "\n";
  return 0;
}

int cmd_flip_report(const ConfigValues& v) {
  auto report = run_flip_report(v);
  emit(report.csv(), v.get_string("out"));
  std::cerr << report.kv_text();
  return 0;
}

int cmd_retrieve(const ConfigValues& v) {
  auto result = run_retrieve(v);
  emit(result.csv(), v.get_string("out"));
  return 0;
}

int cmd_qmap(const ConfigValues& v) {
  auto run = run_qmap(v);
  std::cout << "heat = " << run.heat_path << "\n";
  std::cout << "overlay = " << run.overlay_path << "\n";
  std::cout << "h = " << run.map.h << "\n";
  std::cout << "w = " << run.map.w << "\n";
  return 0;
}

int cmd_ablate(const ConfigValues& v) {
  auto table = run_ablate(v);
  emit(table.csv(), v.get_string("out"));
  return 0;
}

int cmd_plot(const ConfigValues& v) {
  auto run = run_plot(v);
  std::cout << "svg = " << run.out_path << "\n";
  std::cout << "n = " << run.n << "\n";
  return 0;
}

int cmd_gradcheck(const ConfigValues& v) {
  workers_from(v);
  auto cases = run_grad_suite();
  std::cout << grad_suite_text(cases);
  if (!grad_suite_pass(cases)) {
    std::cerr << "numeric error: gradient suite failed\n";
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"no-reference image quality toolkit"};
  app.require_subcommand(1);
  std::vector<std::unique_ptr<SubCtx>> subs;

  make_sub(app, subs, "synth",
           "generate a synthetic distorted dataset; stdout: `key = value` "
           "summary",
           cmd_synth);
  make_sub(app, subs, "train",
           "train a model; stdout: `key = value` run summary", cmd_train);
  make_sub(app, subs, "eval",
           "score a manifest against a checkpoint; stdout: one metric CSV "
           "row (dataset,n,srocc,plcc,beta1..4)",
           cmd_eval);
  make_sub(app, subs, "predict",
           "score one image; stdout: `key = value` with q and score",
           cmd_predict);
  make_sub(app, subs, "flip-report",
           "prediction deltas under horizontal flip; stdout: CSV "
           "(path,q,q_flipped,abs_delta), aggregates on stderr",
           cmd_flip_report);
  make_sub(app, subs, "retrieve",
           "nearest neighbors in latent space; stdout: CSV "
           "(rank,path,distance,score)",
           cmd_retrieve);
  make_sub(app, subs, "qmap",
           "spatial quality map PPMs; stdout: `key = value` with file paths",
           cmd_qmap);
  make_sub(app, subs, "ablate",
           "train once per axis setting; stdout: CSV "
           "(axes...,label,srocc,plcc)",
           cmd_ablate);
  make_sub(app, subs, "plot",
           "scatter SVG from a `pred,gt` CSV; stdout: `key = value` summary",
           cmd_plot);
  make_sub(app, subs, "gradcheck",
           "run the gradient suite; stdout: one line per case; exit 3 on "
           "failure",
           cmd_gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  SubCtx* active = nullptr;
  for (auto& ctx : subs)
    if (ctx->sub->parsed()) active = ctx.get();
  if (!active) return 1;

  try {
    auto values = active->resolve();
    std::cerr << "# resolved config: " << active->name << "\n"
              << values.resolved_text();
    return active->run(values);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const IqaError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
