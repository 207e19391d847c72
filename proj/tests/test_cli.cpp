#include <doctest.h>

#include <fstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "mgn/archive.hpp"
#include "mgn/image.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

/// Tiny run config at 96x32 on a 4-identity synthetic set, shared by every case.
struct Workspace {
  fs::path root = testing::scratch_dir("cli");
  fs::path data = root / "data";
  fs::path config = root / "tiny.json";

  Workspace() {
    REQUIRE(mgn::cli::run({"synth", "--out", data.string(), "--ids", "4", "--per-id", "4", "--height", "96", "--width",
                           "32"}) == mgn::cli::kExitOk);
    json j = {{"schema_version", 1},
              {"dataset", {{"root", "data"}}},
              {"sampler", {{"p", 2}, {"k", 4}}},
              {"model", {{"backbone", "tiny"}, {"num_classes", 0}, {"input_height", 96}, {"input_width", 32}}},
              {"train", {{"epochs", 2}, {"lr_schedule", json::array({{{"epoch", 0}, {"lr", 0.01}}})}}}};
    std::ofstream(config) << j.dump();
  }

  int train(const fs::path& run_dir, const std::vector<std::string>& extra = {}) const {
    std::vector<std::string> args{"train", "--config", config.string(), "--run-dir", run_dir.string(), "--log-every",
                                  "0"};
    args.insert(args.end(), extra.begin(), extra.end());
    return mgn::cli::run(args);
  }
};

const Workspace& workspace() {
  static const Workspace w;
  return w;
}

}  // namespace

TEST_CASE("train, extract and eval from the command line") {
  const Workspace& w = workspace();
  const fs::path run = w.root / "run";
  REQUIRE(w.train(run) == mgn::cli::kExitOk);
  CHECK(fs::exists(run / "config.json"));
  CHECK(fs::exists(run / "checkpoints" / "epoch_0001" / "model.bin"));

  for (const char* split : {"query", "gallery"}) {
    CHECK(mgn::cli::run({"extract", "--checkpoint", run.string(), "--data", w.data.string(), "--split", split, "--out",
                         (w.root / "feat" / split).string()}) == mgn::cli::kExitOk);
  }
  const fs::path report = w.root / "report.json";
  CHECK(mgn::cli::run({"eval", "--query", (w.root / "feat" / "query").string(), "--gallery",
                       (w.root / "feat" / "gallery").string(), "--report", report.string(), "--rerank", "--k1", "4",
                       "--k2", "2"}) == mgn::cli::kExitOk);
  const json r = read_json(report);
  REQUIRE(r.at("reports").size() == 2);
  CHECK(r["reports"][0]["protocol"] == "SQ");
  CHECK(r["reports"][1]["protocol"] == "SQ+RK");
  const double map = r["reports"][0]["mAP"].get<double>();
  CHECK(map >= 0.0);
  CHECK(map <= 1.0);

  CHECK(mgn::cli::run({"eval", "--query", (w.root / "feat" / "query").string(), "--gallery",
                       (w.root / "feat" / "gallery").string(), "--report", report.string(), "--multi-query", "--pool",
                       "max"}) == mgn::cli::kExitOk);
  CHECK(read_json(report)["reports"][0]["protocol"] == "MQ(max)");

  // eval defaults from a run config; explicit flags still win
  json with_eval = read_json(w.config);
  with_eval["eval"] = {{"multi_query", true}, {"rerank", {{"enabled", true}, {"k1", 4}, {"k2", 2}, {"lambda", 0.5}}}};
  const fs::path eval_config = w.root / "eval.json";
  std::ofstream(eval_config) << with_eval.dump();
  CHECK(mgn::cli::run({"eval", "--query", (w.root / "feat" / "query").string(), "--gallery",
                       (w.root / "feat" / "gallery").string(), "--report", report.string(), "--config",
                       eval_config.string(), "--pool", "max"}) == mgn::cli::kExitOk);
  const json from_config = read_json(report);
  REQUIRE(from_config["reports"].size() == 2);
  CHECK(from_config["reports"][1]["protocol"] == "MQ(max)+RK");
  CHECK(from_config["rerank"]["lambda"] == 0.5);

  CHECK(mgn::cli::run({"train", "--config", w.config.string(), "--run-dir", run.string(), "--resume", "latest",
                       "--log-every", "0"}) == mgn::cli::kExitOk);
}

TEST_CASE("variants are selected by name and recorded in the run config") {
  const Workspace& w = workspace();
  const fs::path run = w.root / "run_wo_p3";
  REQUIRE(w.train(run, {"--variant", "w/o Part-3"}) == mgn::cli::kExitOk);
  const json saved = read_json(run / "config.json");
  CHECK(saved.at("variant") == "w/o Part-3");
  CHECK(saved.at("model").at("branches").size() == 2);
  std::ifstream metrics(run / "metrics.jsonl");
  std::string line;
  REQUIRE(std::getline(metrics, line));
  CHECK(json::parse(line).at("terms").size() == 6);

  // Features of two different models cannot be compared.
  CHECK(mgn::cli::run({"extract", "--checkpoint", run.string(), "--data", w.data.string(), "--split", "gallery",
                       "--out", (w.root / "feat_wo_p3" / "gallery").string()}) == mgn::cli::kExitOk);
  const fs::path canonical_query = w.root / "feat_other" / "query";
  REQUIRE(w.train(w.root / "run_other") == mgn::cli::kExitOk);
  CHECK(mgn::cli::run({"extract", "--checkpoint", (w.root / "run_other").string(), "--data", w.data.string(),
                       "--split", "query", "--out", canonical_query.string()}) == mgn::cli::kExitOk);
  CHECK(mgn::cli::run({"eval", "--query", canonical_query.string(), "--gallery",
                       (w.root / "feat_wo_p3" / "gallery").string()}) == mgn::cli::kExitData);
}

TEST_CASE("configuration problems exit with 2") {
  const Workspace& w = workspace();
  const fs::path run = w.root / "run_bad";
  CHECK(w.train(run, {"--variant", "w/ Part-9"}) == mgn::cli::kExitConfig);
  // a 96-pixel input leaves 6 rows at the part-branch resolution, which 4 stripes cannot tile
  CHECK(w.train(run, {"--variant", "w/ Part-4"}) == mgn::cli::kExitConfig);
  CHECK(mgn::cli::run({"train", "--config", (w.root / "absent.json").string(), "--run-dir", run.string()}) ==
        mgn::cli::kExitConfig);
  CHECK(mgn::cli::run({"train", "--run-dir", run.string()}) == mgn::cli::kExitConfig);
  CHECK(mgn::cli::run({"frobnicate"}) == mgn::cli::kExitConfig);

  json j = read_json(w.config);
  j["train"]["epochz"] = 3;
  const fs::path typo = w.root / "typo.json";
  std::ofstream(typo) << j.dump();
  CHECK(mgn::cli::run({"train", "--config", typo.string(), "--run-dir", run.string()}) == mgn::cli::kExitConfig);
  CHECK(mgn::cli::run({"eval", "--query", "q", "--gallery", "g", "--lambda", "2"}) == mgn::cli::kExitConfig);
}

TEST_CASE("data problems exit with 3") {
  const Workspace& w = workspace();
  const fs::path bad = w.root / "bad_data";
  fs::create_directories(bad / "bounding_box_train");
  fs::create_directories(bad / "query");
  fs::create_directories(bad / "bounding_box_test");
  std::ofstream(bad / "bounding_box_train" / "garbage.jpg") << "x";
  CHECK(w.train(w.root / "run_bad_data", {"--data", bad.string()}) == mgn::cli::kExitData);
  CHECK(mgn::cli::run({"extract", "--checkpoint", (w.root / "nowhere").string(), "--data", w.data.string(), "--out",
                       (w.root / "x").string()}) == mgn::cli::kExitData);
  CHECK(mgn::cli::run({"eval", "--query", (w.root / "missing_q").string(), "--gallery",
                       (w.root / "missing_g").string()}) == mgn::cli::kExitData);
}

TEST_CASE("heatmaps per branch") {
  const Workspace& w = workspace();
  const fs::path run = w.root / "run_heat";
  REQUIRE(w.train(run) == mgn::cli::kExitOk);
  fs::path image;
  for (const auto& e : fs::directory_iterator(w.data / "query")) image = e.path();
  const fs::path out = w.root / "heat";
  CHECK(mgn::cli::run({"heatmap", "--checkpoint", run.string(), "--image", image.string(), "--branch", "all", "--out",
                       out.string()}) == mgn::cli::kExitOk);
  const std::string stem = image.stem().string();
  for (const char* b : {"global", "part2", "part3"}) {
    const fs::path png = out / (stem + "_" + b + ".png");
    REQUIRE(fs::exists(png));
    const mgn::Image img = mgn::read_image(png);
    CHECK(img.height == 96);
    CHECK(img.width == 32);
  }
  CHECK(mgn::cli::run({"heatmap", "--checkpoint", run.string(), "--image", image.string(), "--branch", "part5",
                       "--out", out.string()}) == mgn::cli::kExitConfig);

  // All-zero weights give a constant response map, rendered as a uniform overlay
  // on a uniform image.
  const fs::path zero_ckpt = w.root / "zero_ckpt";
  fs::remove_all(zero_ckpt);
  fs::copy(run / "checkpoints" / "epoch_0001", zero_ckpt);
  mgn::TensorArchive weights = mgn::TensorArchive::load(zero_ckpt / "model.bin");
  for (auto& [_, t] : weights.tensors()) std::fill(t.data.begin(), t.data.end(), 0.0F);
  weights.save(zero_ckpt / "model.bin");
  mgn::Image flat(96, 32);
  std::fill(flat.rgb.begin(), flat.rgb.end(), 128);
  mgn::write_image(out / "flat.png", flat);
  CHECK(mgn::cli::run({"heatmap", "--checkpoint", zero_ckpt.string(), "--image", (out / "flat.png").string(),
                       "--branch", "part2", "--out", out.string()}) == mgn::cli::kExitOk);
  const mgn::Image rendered = mgn::read_image(out / "flat_part2.png");
  bool uniform = true;
  for (std::size_t i = 3; i < rendered.rgb.size(); ++i) uniform = uniform && rendered.rgb[i] == rendered.rgb[i % 3];
  CHECK(uniform);
}

TEST_CASE("synthetic generation from the command line") {
  const fs::path out = testing::scratch_dir("cli_synth");
  CHECK(mgn::cli::run({"synth", "--out", out.string(), "--ids", "2", "--per-id", "2", "--height", "64", "--width",
                       "32"}) == mgn::cli::kExitOk);
  std::size_t train = 0;
  for (const auto& e : fs::directory_iterator(out / "bounding_box_train")) train += e.is_regular_file() ? 1 : 0;
  CHECK(train == 4);
  CHECK(mgn::cli::run({"synth", "--out", out.string(), "--ids", "1"}) == mgn::cli::kExitConfig);
}
