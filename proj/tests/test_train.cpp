#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "iqa/checkpoint.hpp"
#include "iqa/trainer.hpp"

using namespace iqa;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("iqa_train_" + std::to_string(::getpid()) + "_" +
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

ModelConfig tiny_model(uint64_t seed) {
  ModelConfig mc;
  mc.backbone.channels = {4, 8, 8, 16};
  mc.backbone.units_per_block = 1;
  mc.backbone.feature_dropout = 0.0;
  mc.encoder.n_layers = 1;
  mc.encoder.d = 16;
  mc.encoder.heads = 4;
  mc.head_hidden = 16;
  mc.seed = seed;
  return mc;
}

// Small synthetic set: 2 refs x 1 family x 4 levels = 10 records at 32x32.
DatasetManifest tiny_data(const TempDir& dir, uint64_t seed = 9) {
  SyntheticSpec spec;
  spec.n_refs = 2;
  spec.height = 32;
  spec.width = 32;
  spec.families = {"gaussian_blur"};
  spec.levels = 4;
  spec.seed = seed;
  return synth_generate(spec, dir.str("data"));
}

TrainConfig tiny_train(const TempDir& dir) {
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 10;
  tc.lr = 1e-3;
  tc.lr_decay_factor = 1.0;
  tc.weight_decay = 5e-4;
  tc.seed = 3;
  tc.patches_per_image = 1;
  tc.patch_size = 32;
  tc.eval_patches = 2;
  tc.checkpoint_dir = dir.str("ckpt");
  tc.log_path = dir.str("train_log.csv");
  return tc;
}

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig tc;
  CHECK_NOTHROW(tc.validate());
  TrainConfig bad = tc;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), DataError);
  bad = tc;
  bad.batch_size = -1;
  CHECK_THROWS_AS(bad.validate(), DataError);
  bad = tc;
  bad.lr = 0;
  CHECK_THROWS_AS(bad.validate(), DataError);
  bad = tc;
  bad.lr_decay_factor = 0;
  CHECK_THROWS_AS(bad.validate(), DataError);
  bad = tc;
  bad.patches_per_image = 0;
  CHECK_THROWS_AS(bad.validate(), DataError);
  bad = tc;
  bad.patch_size = 0;
  CHECK_THROWS_AS(bad.validate(), DataError);
  bad = tc;
  bad.eval_patches = 0;
  CHECK_THROWS_AS(bad.validate(), DataError);
}

TEST_CASE("train config echo covers every field") {
  TrainConfig tc;
  tc.epochs = 7;
  tc.batch_size = 21;
  tc.lr = 3.5e-4;
  tc.lr_decay_factor = 2.0;
  tc.weight_decay = 1e-3;
  tc.weights.lambda1 = 0.25;
  tc.weights.lambda2 = 0.01;
  tc.weights.lambda3 = 0.5;
  tc.loss_norm = LossNorm::kL2;
  tc.consistency_on = ConsistencyOn::kVector;
  tc.consistency_transform = TransformKind::kRot90;
  tc.seed = 42;
  tc.patches_per_image = 3;
  tc.patch_size = 48;
  tc.eval_patches = 5;
  tc.eval_every = 11;
  auto kv = tc.echo();
  CHECK(kv.at("epochs") == "7");
  CHECK(kv.at("batch_size") == "21");
  CHECK(parse_real(kv.at("lr"), "lr") == 3.5e-4);
  CHECK(parse_real(kv.at("lr_decay_factor"), "d") == 2.0);
  CHECK(parse_real(kv.at("weight_decay"), "wd") == 1e-3);
  CHECK(parse_real(kv.at("lambda1"), "l1") == 0.25);
  CHECK(parse_real(kv.at("lambda2"), "l2") == 0.01);
  CHECK(parse_real(kv.at("lambda3"), "l3") == 0.5);
  CHECK(kv.at("loss_norm") == "l2");
  CHECK(kv.at("consistency_on") == "vector");
  CHECK(kv.at("consistency_transform") == "rot90");
  CHECK(kv.at("seed") == "42");
  CHECK(kv.at("patches_per_image") == "3");
  CHECK(kv.at("patch_size") == "48");
  CHECK(kv.at("eval_patches") == "5");
  CHECK(kv.at("eval_every") == "11");
  CHECK(kv.at("augment_hflip") == "true");
  CHECK(kv.at("augment_vflip") == "true");
  CHECK(parse_real(kv.at("augment_p"), "p") == 0.5);
}

TEST_CASE("checkpoint round trip restores forward outputs bitwise") {
  TempDir dir;
  auto mc = tiny_model(11);
  Model<float> a(mc);
  Rng rng(77);
  auto img = Tensor<float>::zeros({2, 3, 32, 32});
  for (int64_t i = 0; i < img.size(); ++i)
    img.data()[i] = static_cast<float>(rng.uniform());

  // Move the running stats off their init so buffers matter.
  { auto warm = a.forward(img, true); }
  auto out_a = a.forward(img, false);

  save_checkpoint(dir.str("ck"), a.params(), a.buffers(),
                  {{"step", "0"}, {"epoch", "0"}});

  auto mc_b = mc;
  mc_b.seed = 999;  // different init; must be fully overwritten
  Model<float> b(mc_b);
  load_checkpoint(dir.str("ck"), b.params(), b.buffers());
  auto out_b = b.forward(img, false);

  REQUIRE(out_b.q.size() == out_a.q.size());
  CHECK(std::memcmp(out_a.q.data().data(), out_b.q.data().data(),
                    sizeof(float) * out_a.q.size()) == 0);
  CHECK(std::memcmp(out_a.latent.data().data(), out_b.latent.data().data(),
                    sizeof(float) * out_a.latent.size()) == 0);

  auto meta = read_checkpoint_meta(dir.str("ck"));
  CHECK(meta.at("format_version") == "1");
  CHECK(meta.at("step") == "0");
}

TEST_CASE("checkpoint archive covers every parameter exactly once") {
  TempDir dir;
  Model<float> m(tiny_model(5));
  auto params = m.params();
  auto buffers = m.buffers();
  save_checkpoint(dir.str("ck"), params, buffers, {});
  auto index = slurp(dir.str("ck") + "/index.csv");
  size_t rows = 0;
  for (char c : index)
    if (c == '\n') ++rows;
  CHECK(rows == 1 + params.size() + buffers.size());  // header + tensors
  for (const auto& [name, p] : params) {
    CHECK(index.find("\n" + name + ",") != std::string::npos);
  }
}

TEST_CASE("checkpoint rejects version mismatch and corruption") {
  TempDir dir;
  Model<float> m(tiny_model(5));
  save_checkpoint(dir.str("ck"), m.params(), m.buffers(), {});
  Model<float> fresh(tiny_model(6));

  SUBCASE("version mismatch") {
    auto meta_path = dir.str("ck") + "/meta.txt";
    auto meta = slurp(meta_path);
    auto pos = meta.find("format_version = 1");
    REQUIRE(pos != std::string::npos);
    meta.replace(pos, 18, "format_version = 2");
    std::ofstream(meta_path, std::ios::binary | std::ios::trunc) << meta;
    CHECK_THROWS_AS(
        load_checkpoint(dir.str("ck"), fresh.params(), fresh.buffers()),
        DataError);
  }
  SUBCASE("truncated blob") {
    auto bin_path = dir.str("ck") + "/tensors.bin";
    auto blob = slurp(bin_path);
    std::ofstream(bin_path, std::ios::binary | std::ios::trunc)
        << blob.substr(0, blob.size() / 2);
    CHECK_THROWS_AS(
        load_checkpoint(dir.str("ck"), fresh.params(), fresh.buffers()),
        DataError);
  }
  SUBCASE("corrupt offset table") {
    auto idx_path = dir.str("ck") + "/index.csv";
    auto idx = slurp(idx_path);
    // Push the first tensor's offset far past the end of the blob.
    auto nl = idx.find('\n');
    auto row_end = idx.find('\n', nl + 1);
    auto row = idx.substr(nl + 1, row_end - nl - 1);
    auto last_comma = row.rfind(',');
    auto prev_comma = row.rfind(',', last_comma - 1);
    row = row.substr(0, prev_comma + 1) + "999999999" +
          row.substr(last_comma);
    idx = idx.substr(0, nl + 1) + row + idx.substr(row_end);
    std::ofstream(idx_path, std::ios::binary | std::ios::trunc) << idx;
    CHECK_THROWS_AS(
        load_checkpoint(dir.str("ck"), fresh.params(), fresh.buffers()),
        DataError);
  }
  SUBCASE("missing tensor row") {
    auto idx_path = dir.str("ck") + "/index.csv";
    auto idx = slurp(idx_path);
    auto nl = idx.find('\n');
    auto row_end = idx.find('\n', nl + 1);
    idx = idx.substr(0, nl + 1) + idx.substr(row_end + 1);
    std::ofstream(idx_path, std::ios::binary | std::ios::trunc) << idx;
    CHECK_THROWS_AS(
        load_checkpoint(dir.str("ck"), fresh.params(), fresh.buffers()),
        DataError);
  }
  SUBCASE("unknown tensor name") {
    auto idx_path = dir.str("ck") + "/index.csv";
    auto idx = slurp(idx_path);
    idx += "not.a.real.tensor,4,0,16\n";
    std::ofstream(idx_path, std::ios::binary | std::ios::trunc) << idx;
    CHECK_THROWS_AS(
        load_checkpoint(dir.str("ck"), fresh.params(), fresh.buffers()),
        DataError);
  }
}

TEST_CASE("overfit sanity: quality loss shrinks over 200 steps") {
  TempDir dir;
  auto manifest = tiny_data(dir);
  auto tc = tiny_train(dir);
  tc.epochs = 200;  // batch == pool size, so one step per epoch
  tc.eval_every = 1000000;
  tc.checkpoint_dir.clear();
  tc.log_path.clear();
  Model<float> model(tiny_model(1));
  auto result = train(model, tc, manifest, manifest);
  REQUIRE(result.steps == 200);
  double first = result.history.front().quality;
  double last = result.history.back().quality;
  CAPTURE(first);
  CAPTURE(last);
  CHECK(last < first);
  CHECK(last < first * 0.5);  // substantially fit, not just jitter
}

TEST_CASE("zero ranking and consistency weights: total equals quality") {
  TempDir dir;
  auto manifest = tiny_data(dir);
  auto tc = tiny_train(dir);
  tc.weights.lambda2 = 0.0;
  tc.weights.lambda3 = 0.0;
  tc.checkpoint_dir.clear();
  tc.log_path.clear();
  Model<float> model(tiny_model(2));
  auto result = train(model, tc, manifest, manifest);
  REQUIRE(!result.history.empty());
  for (const auto& row : result.history)
    CHECK(std::abs(row.total - row.quality) <= 1e-9);
}

TEST_CASE("training is bitwise reproducible") {
  TempDir dir1, dir2;
  auto m1 = tiny_data(dir1);
  auto m2 = tiny_data(dir2);

  auto run = [&](const TempDir& dir, const DatasetManifest& manifest) {
    auto tc = tiny_train(dir);
    tc.epochs = 3;
    Model<float> model(tiny_model(4));
    auto result = train(model, tc, manifest, manifest);
    return std::make_pair(std::move(model), result);
  };
  auto [model1, r1] = run(dir1, m1);
  auto [model2, r2] = run(dir2, m2);

  auto p1 = model1.params(), p2 = model2.params();
  REQUIRE(p1.size() == p2.size());
  for (size_t i = 0; i < p1.size(); ++i) {
    CAPTURE(p1[i].first);
    CHECK(std::memcmp(p1[i].second->value.data().data(),
                      p2[i].second->value.data().data(),
                      sizeof(float) * p1[i].second->value.size()) == 0);
  }
  CHECK(slurp(dir1.str("train_log.csv")) == slurp(dir2.str("train_log.csv")));
  // Checkpoints: tensors identical; meta identical (same config, same steps).
  for (const char* leaf : {"final", "best"}) {
    auto d1 = dir1.str("ckpt") + "/" + leaf;
    auto d2 = dir2.str("ckpt") + "/" + leaf;
    REQUIRE(std::filesystem::exists(d1));
    REQUIRE(std::filesystem::exists(d2));
    CHECK(slurp(d1 + "/tensors.bin") == slurp(d2 + "/tensors.bin"));
    CHECK(slurp(d1 + "/index.csv") == slurp(d2 + "/index.csv"));
    CHECK(slurp(d1 + "/meta.txt") == slurp(d2 + "/meta.txt"));
  }
  // Same evals too.
  REQUIRE(r1.evals.size() == r2.evals.size());
  for (size_t i = 0; i < r1.evals.size(); ++i)
    CHECK(r1.evals[i].srocc == r2.evals[i].srocc);
}

TEST_CASE("learning rate follows lr0 / decay^epoch exactly") {
  TempDir dir;
  auto manifest = tiny_data(dir);
  auto tc = tiny_train(dir);
  tc.epochs = 4;
  tc.lr = 1e-3;
  tc.lr_decay_factor = 10.0;
  tc.checkpoint_dir.clear();
  tc.log_path.clear();
  Model<float> model(tiny_model(3));
  auto result = train(model, tc, manifest, manifest);
  CHECK(result.final_lr == tc.lr / std::pow(10.0, 3.0));

  tc.lr_decay_factor = 1.0;
  Model<float> model2(tiny_model(3));
  auto r2 = train(model2, tc, manifest, manifest);
  CHECK(r2.final_lr == tc.lr);
}

TEST_CASE("config echo lands in checkpoint metadata field-for-field") {
  TempDir dir;
  auto manifest = tiny_data(dir);
  auto tc = tiny_train(dir);
  Model<float> model(tiny_model(6));
  train(model, tc, manifest, manifest);
  auto meta = read_checkpoint_meta(dir.str("ckpt") + "/final");
  for (const auto& [k, v] : tc.echo()) {
    CAPTURE(k);
    REQUIRE(meta.count(k) == 1);
    CHECK(meta.at(k) == v);
  }
  CHECK(meta.count("step") == 1);
  CHECK(meta.count("epoch") == 1);
}

TEST_CASE("non-finite loss aborts with a last-good checkpoint") {
  TempDir dir;
  auto manifest = tiny_data(dir);
  auto tc = tiny_train(dir);
  tc.epochs = 50;
  tc.lr = 1e25;  // blows the parameters up within a step or two
  tc.eval_every = 1000000;
  Model<float> model(tiny_model(7));
  CHECK_THROWS_AS(train(model, tc, manifest, manifest), NumericError);
  CHECK(std::filesystem::exists(dir.str("ckpt") + "/last_good/meta.txt"));
  CHECK(std::filesystem::exists(dir.str("ckpt") + "/last_good/tensors.bin"));
  // The saved snapshot must itself be finite (pre-divergence parameters).
  Model<float> fresh(tiny_model(8));
  load_checkpoint(dir.str("ckpt") + "/last_good", fresh.params(),
                  fresh.buffers());
  for (auto& [name, p] : fresh.params())
    for (int64_t i = 0; i < p->value.size(); ++i)
      REQUIRE(std::isfinite(p->value.data()[i]));
}

TEST_CASE("best checkpoint tracks the top validation srocc") {
  TempDir dir;
  auto manifest = tiny_data(dir);
  auto tc = tiny_train(dir);
  tc.epochs = 3;
  Model<float> model(tiny_model(9));
  auto result = train(model, tc, manifest, manifest);
  REQUIRE(!result.evals.empty());
  double top = -2;
  for (const auto& e : result.evals)
    if (std::isfinite(e.srocc)) top = std::max(top, e.srocc);
  CHECK(result.best_srocc == top);
  CHECK(std::filesystem::exists(dir.str("ckpt") + "/best/meta.txt"));
  auto meta = read_checkpoint_meta(dir.str("ckpt") + "/best");
  CHECK(parse_int(meta.at("step"), "step") == result.best_step);
}

TEST_CASE("train log csv has the documented columns") {
  TempDir dir;
  auto manifest = tiny_data(dir);
  auto tc = tiny_train(dir);
  tc.epochs = 1;
  Model<float> model(tiny_model(10));
  auto result = train(model, tc, manifest, manifest);
  auto log = slurp(dir.str("train_log.csv"));
  CHECK(log.rfind("step,quality,ranking,consistency,total,margin1,margin2\n",
                  0) == 0);
  size_t lines = 0;
  for (char c : log)
    if (c == '\n') ++lines;
  CHECK(lines == 1 + static_cast<size_t>(result.steps));
}

TEST_CASE("predict_set is deterministic for a fixed seed") {
  TempDir dir;
  auto manifest = tiny_data(dir);
  auto set = iqa::detail::load_images(manifest, "check");
  Model<float> model(tiny_model(12));
  auto a = predict_set(model, set.images, 3, 16, 5);
  auto b = predict_set(model, set.images, 3, 16, 5);
  CHECK(a == b);
  auto c = predict_set(model, set.images, 3, 16, 6);
  CHECK(a != c);
}
