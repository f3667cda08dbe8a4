#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "iqa/config.hpp"
#include "iqa/image.hpp"

// Drives the installed binary as a subprocess; IQA_BIN is injected by the
// build so the tests always run the freshly built executable.

using namespace iqa;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("iqa_cli_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string str(const char* leaf = nullptr) const {
    return leaf ? (path / leaf).string() : path.string();
  }
};

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  REQUIRE(out.good());
  out << content;
}

struct CmdResult {
  int code = -1;
  std::string out, err;
};

CmdResult run_cli(const std::string& args) {
  static TempDir io;
  static int counter = 0;
  auto out_path = io.str() + "/out" + std::to_string(counter);
  auto err_path = io.str() + "/err" + std::to_string(counter);
  ++counter;
  std::string cmd = std::string(IQA_BIN) + " " + args + " >" + out_path +
                    " 2>" + err_path;
  int raw = std::system(cmd.c_str());
  CmdResult res;
  res.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  res.out = slurp(out_path);
  res.err = slurp(err_path);
  return res;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

std::map<std::string, std::string> kv_of(const std::string& text) {
  std::map<std::string, std::string> kv;
  for (const auto& line : lines_of(text)) {
    auto sep = line.find(" = ");
    if (sep != std::string::npos)
      kv[line.substr(0, sep)] = line.substr(sep + 3);
  }
  return kv;
}

std::set<std::string> long_options(const std::string& help) {
  std::set<std::string> found;
  for (size_t i = 0; i + 1 < help.size(); ++i) {
    if (help[i] != '-' || help[i + 1] != '-') continue;
    size_t j = i + 2;
    std::string name;
    while (j < help.size() &&
           (std::isalnum(static_cast<unsigned char>(help[j])) ||
            help[j] == '_' || help[j] == '-'))
      name += help[j++];
    if (!name.empty()) found.insert(name);
    i = j;
  }
  return found;
}

// One dataset and one trained checkpoint shared by the read-only cases.
struct Workspace {
  TempDir dir;
  std::string data_dir, manifest, cfg, ckpt_dir, ckpt_final, log_path;
};

const Workspace& ws() {
  static Workspace w = [] {
    Workspace s;
    s.data_dir = s.dir.str("data");
    s.manifest = s.data_dir + "/manifest.csv";
    auto r = run_cli("synth --out " + s.data_dir +
                     " --n_refs 2 --height 32 --width 32"
                     " --families gaussian_blur --levels 4 --synth_seed 9");
    REQUIRE(r.code == 0);
    s.cfg = s.dir.str("train.cfg");
    spit(s.cfg,
         "# tiny model\n"
         "channels = 4,8,8,16\n"
         "units_per_block = 1\n"
         "feature_dropout = 0\n"
         "encoder_layers = 1\n"
         "encoder_dim = 16\n"
         "encoder_heads = 4\n"
         "head_hidden = 16\n"
         "model_seed = 7\n"
         "epochs = 2\n"
         "batch_size = 10\n"
         "lr = 0.001\n"
         "lr_decay_factor = 1\n"
         "seed = 3\n"
         "patches_per_image = 1\n"
         "patch_size = 32\n"
         "eval_patches = 2\n");
    s.ckpt_dir = s.dir.str("ckpt");
    s.ckpt_final = s.ckpt_dir + "/final";
    s.log_path = s.dir.str("loss.csv");
    auto t = run_cli("train --config " + s.cfg + " --train_manifest " +
                     s.manifest + " --val_manifest " + s.manifest +
                     " --checkpoint_dir " + s.ckpt_dir + " --log_path " +
                     s.log_path);
    REQUIRE(t.code == 0);
    return s;
  }();
  return w;
}

}  // namespace

TEST_CASE("usage errors and help exit codes") {
  CHECK(run_cli("--help").code == 0);
  CHECK(run_cli("").code == 1);                  // a subcommand is required
  CHECK(run_cli("bogus").code == 1);
  CHECK(run_cli("eval --bogus 1").code == 1);
  auto top = run_cli("--help");
  for (const auto& name : cli_subcommands())
    CHECK(top.out.find(name) != std::string::npos);
}

TEST_CASE("help lists exactly the schema keys for every subcommand") {
  for (const auto& name : cli_subcommands()) {
    auto r = run_cli(name + " --help");
    REQUIRE(r.code == 0);
    std::set<std::string> expected{"help", "config"};
    for (const auto& k : cli_schema(name).keys) expected.insert(k.name);
    auto found = long_options(r.out);
    CAPTURE(name);
    CHECK(found == expected);
  }
}

TEST_CASE("config file parsing: comments, spacing, rejects") {
  TempDir dir;
  auto cfg = dir.str("synth.cfg");
  spit(cfg,
       "# a comment line\n"
       "n_refs = 1\n"
       "\n"
       "height = 32\n"
       "width=32\n"
       "families = gaussian_blur   # trailing comment\n"
       "levels = 2\n"
       "synth_seed = 5\n");
  auto ok = run_cli("synth --config " + cfg + " --out " + dir.str("d1"));
  CHECK(ok.code == 0);
  CHECK(ok.out.find("n_records = 3") != std::string::npos);

  auto bad_key = dir.str("bad_key.cfg");
  spit(bad_key, "n_refs = 1\nbogus_key = 7\n");
  auto r1 = run_cli("synth --config " + bad_key + " --out " + dir.str("d2"));
  CHECK(r1.code == 1);
  CHECK(r1.err.find("unknown key `bogus_key`") != std::string::npos);
  CHECK(r1.err.find("line 2") != std::string::npos);

  auto bad_line = dir.str("bad_line.cfg");
  spit(bad_line, "n_refs 1\n");
  CHECK(run_cli("synth --config " + bad_line + " --out " + dir.str("d3"))
            .code == 1);

  // bad value types and ranges are usage errors too
  CHECK(run_cli("synth --out " + dir.str("d4") + " --levels abc").code == 1);
  CHECK(run_cli("synth --out " + dir.str("d5") + " --families mystery")
            .code == 1);
  CHECK(run_cli("synth --n_refs 1").code == 1);  // missing required key `out`
}

TEST_CASE("flags override the config file and the resolved config is echoed") {
  TempDir dir;
  auto cfg = dir.str("synth.cfg");
  spit(cfg,
       "n_refs = 1\nheight = 32\nwidth = 32\n"
       "families = gaussian_blur\nlevels = 2\nsynth_seed = 5\n");
  auto r = run_cli("synth --config " + cfg + " --n_refs 2 --out " +
                   dir.str("d"));
  REQUIRE(r.code == 0);
  CHECK(r.out.find("n_records = 6") != std::string::npos);
  auto kv = kv_of(r.err);
  CHECK(kv.at("n_refs") == "2");    // flag beats file
  CHECK(kv.at("height") == "32");   // file beats default
  CHECK(kv.at("levels") == "2");
  for (const auto& k : cli_schema("synth").keys)
    CHECK(kv.count(k.name) == 1);   // every key is logged
}

TEST_CASE("workers key: accepted and range-checked") {
  TempDir dir;
  CHECK(run_cli("gradcheck --workers 0").code == 1);
  CHECK(run_cli("gradcheck --workers 9").code == 1);
  auto r = run_cli("synth --out " + dir.str("d") +
                   " --n_refs 1 --height 32 --width 32 --levels 2"
                   " --families gaussian_blur --workers 3");
  CHECK(r.code == 0);
  CHECK(kv_of(r.err).at("workers") == "3");
}

TEST_CASE("synth and train workspace comes up") {
  const auto& w = ws();
  auto manifest = load_manifest(w.manifest);
  CHECK(manifest.records.size() == 10);  // 2 refs x (1 + 1 family x 4 levels)
  CHECK(std::filesystem::exists(w.ckpt_final + "/meta.txt"));
  CHECK(std::filesystem::exists(w.ckpt_final + "/tensors.bin"));
  auto log_lines = lines_of(slurp(w.log_path));
  REQUIRE(log_lines.size() == 3);  // header + 2 steps
  CHECK(log_lines[0] == "step,quality,ranking,consistency,total,margin1,margin2");
  auto meta = read_checkpoint_meta(w.ckpt_final);
  CHECK(meta.at("encoder_dim") == "16");
  CHECK(meta.at("score_lo") == "0");
  CHECK(meta.at("score_hi") == "100");
}

TEST_CASE("eval emits one metric CSV row, to stdout or --out") {
  const auto& w = ws();
  std::string args = "eval --ckpt " + w.ckpt_final + " --manifest " +
                     w.manifest + " --n_patches 2 --patch_size 32";
  auto r = run_cli(args);
  REQUIRE(r.code == 0);
  auto rows = lines_of(r.out);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0] == "dataset,n,srocc,plcc,beta1,beta2,beta3,beta4");
  CHECK(rows[1].rfind("manifest,10,", 0) == 0);

  TempDir dir;
  auto out_file = dir.str("report.csv");
  auto r2 = run_cli(args + " --out " + out_file);
  REQUIRE(r2.code == 0);
  CHECK(r2.out.empty());
  CHECK(slurp(out_file) == r.out);
}

TEST_CASE("predict reports q and the de-normalized score") {
  const auto& w = ws();
  auto r = run_cli("predict --ckpt " + w.ckpt_final + " --image " +
                   w.data_dir + "/ref000.ppm --n_patches 2 --patch_size 32");
  REQUIRE(r.code == 0);
  auto kv = kv_of(r.out);
  CHECK(kv.at("score_lo") == "0");
  CHECK(kv.at("score_hi") == "100");
  double q = parse_real(kv.at("q"), "q");
  double score = parse_real(kv.at("score"), "score");
  CHECK(score == doctest::Approx(q * 100.0).epsilon(1e-12));
}

TEST_CASE("flip-report: CSV on stdout, aggregates on stderr") {
  const auto& w = ws();
  auto r = run_cli("flip-report --ckpt " + w.ckpt_final + " --manifest " +
                   w.manifest + " --n_patches 2 --patch_size 32");
  REQUIRE(r.code == 0);
  auto rows = lines_of(r.out);
  REQUIRE(rows.size() == 11);  // header + one row per image
  CHECK(rows[0] == "path,q,q_flipped,abs_delta");
  CHECK(rows[1].rfind("ref000.ppm,", 0) == 0);
  auto kv = kv_of(r.err);
  CHECK(kv.count("mean_abs_delta") == 1);
  CHECK(kv.count("median_abs_delta") == 1);
  CHECK(kv.count("max_abs_delta") == 1);
  CHECK(kv.at("n") == "10");
}

TEST_CASE("retrieve ranks the query's own image first at distance zero") {
  const auto& w = ws();
  auto r = run_cli("retrieve --ckpt " + w.ckpt_final + " --query " +
                   w.data_dir + "/ref000.ppm --gallery " + w.manifest +
                   " --k 3 --n_patches 2 --patch_size 32");
  REQUIRE(r.code == 0);
  auto rows = lines_of(r.out);
  REQUIRE(rows.size() == 4);  // header + k
  CHECK(rows[0] == "rank,path,distance,score");
  CHECK(rows[1].rfind("1,ref000.ppm,0,", 0) == 0);
}

TEST_CASE("qmap writes heat and overlay PPMs") {
  const auto& w = ws();
  TempDir dir;
  auto heat = dir.str("heat.ppm");
  auto overlay = dir.str("overlay.ppm");
  auto r = run_cli("qmap --ckpt " + w.ckpt_final + " --image " + w.data_dir +
                   "/ref000.ppm --source conv --heat_out " + heat +
                   " --overlay_out " + overlay);
  REQUIRE(r.code == 0);
  auto kv = kv_of(r.out);
  CHECK(kv.at("h") == "32");
  CHECK(kv.at("w") == "32");
  auto h_img = read_ppm(heat);
  CHECK(h_img.h == 32);
  CHECK(h_img.w == 32);
  auto o_img = read_ppm(overlay);
  CHECK(o_img.h == 32);
  CHECK(o_img.w == 32);
}

TEST_CASE("plot renders an SVG from a pairs CSV") {
  TempDir dir;
  auto pairs = dir.str("pairs.csv");
  spit(pairs,
       "pred,gt\n0.1,10\n0.3,35\n0.5,50\n0.6,66\n0.8,80\n0.9,95\n");
  auto svg_path = dir.str("scatter.svg");
  auto r = run_cli("plot --pairs " + pairs + " --out " + svg_path +
                   " --title quality");
  REQUIRE(r.code == 0);
  CHECK(kv_of(r.out).at("n") == "6");
  auto svg = slurp(svg_path);
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("<circle class=\"pt\"") != std::string::npos);

  spit(pairs, "wrong,header\n1,2\n");
  CHECK(run_cli("plot --pairs " + pairs + " --out " + svg_path).code == 2);
}

TEST_CASE("ablate emits one CSV row per setting") {
  const auto& w = ws();
  auto r = run_cli("ablate --config " + w.cfg + " --train_manifest " +
                   w.manifest + " --val_manifest " + w.manifest +
                   " --epochs 1 --axes transformer:off");
  REQUIRE(r.code == 0);
  auto rows = lines_of(r.out);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0] == "transformer,label,srocc,plcc");
  CHECK(rows[1].rfind("off,", 0) == 0);
  CHECK(run_cli("ablate --config " + w.cfg + " --train_manifest " +
                w.manifest + " --val_manifest " + w.manifest +
                " --axes nonsense")
            .code == 1);
}

TEST_CASE("gradcheck prints one line per case and passes") {
  auto r = run_cli("gradcheck");
  REQUIRE(r.code == 0);
  auto rows = lines_of(r.out);
  CHECK(rows.size() == 10);
  for (const auto& row : rows)
    CHECK(row.find("[pass]") != std::string::npos);
  CHECK(r.out.find("conv2d:") != std::string::npos);
  CHECK(r.out.find("full_model:") != std::string::npos);
}

TEST_CASE("exit codes separate data errors from numeric failures") {
  const auto& w = ws();
  TempDir dir;
  CHECK(run_cli("eval --ckpt " + dir.str("nope") + " --manifest " +
                w.manifest)
            .code == 2);
  CHECK(run_cli("predict --ckpt " + w.ckpt_final + " --image " +
                dir.str("missing.ppm"))
            .code == 2);
  // image dims not divisible by 16
  ImageU8 odd{20, 20, std::vector<uint8_t>(3 * 20 * 20, 128)};
  auto odd_path = dir.str("odd.ppm");
  write_ppm(odd_path, odd);
  CHECK(run_cli("qmap --ckpt " + w.ckpt_final + " --image " + odd_path +
                " --heat_out " + dir.str("h.ppm") + " --overlay_out " +
                dir.str("o.ppm"))
            .code == 2);
  // a divergent lr makes the second step's loss non-finite
  auto r = run_cli("train --config " + w.cfg + " --train_manifest " +
                   w.manifest + " --val_manifest " + w.manifest +
                   " --lr 1e25");
  CHECK(r.code == 3);
}

TEST_CASE("identical configs and seeds give byte-identical outputs") {
  const auto& w = ws();
  TempDir dir;
  auto train_once = [&](const char* tag) {
    auto ckpt = dir.str() + "/" + tag;
    auto log = ckpt + "_loss.csv";
    auto r = run_cli("train --config " + w.cfg + " --train_manifest " +
                     w.manifest + " --val_manifest " + w.manifest +
                     " --epochs 1 --checkpoint_dir " + ckpt + " --log_path " +
                     log);
    REQUIRE(r.code == 0);
    return std::pair<std::string, std::string>(ckpt, r.out);
  };
  auto [ckpt1, out1] = train_once("run1");
  auto [ckpt2, out2] = train_once("run2");
  CHECK(out1 == out2);
  CHECK(slurp(ckpt1 + "_loss.csv") == slurp(ckpt2 + "_loss.csv"));
  for (const char* leaf : {"/final/tensors.bin", "/final/index.csv",
                           "/final/meta.txt"})
    CHECK(slurp(ckpt1 + leaf) == slurp(ckpt2 + leaf));

  auto eval_args = [&](const std::string& ckpt) {
    return "eval --ckpt " + ckpt + "/final --manifest " + w.manifest +
           " --n_patches 2 --patch_size 32";
  };
  auto e1 = run_cli(eval_args(ckpt1));
  auto e2 = run_cli(eval_args(ckpt2));
  REQUIRE(e1.code == 0);
  REQUIRE(e2.code == 0);
  CHECK(e1.out == e2.out);
}
