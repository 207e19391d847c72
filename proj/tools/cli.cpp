#include "cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>

#include "mgn/archive.hpp"
#include "mgn/config.hpp"
#include "mgn/data.hpp"
#include "mgn/error.hpp"
#include "mgn/eval.hpp"
#include "mgn/infer.hpp"
#include "mgn/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mgn::cli {

namespace {

struct SynthArgs {
  std::string out;
  SyntheticSpec spec;
};

struct TrainArgs {
  std::string config;
  std::string run_dir;
  std::string data;
  std::string variant;
  std::string resume;
  int log_every = 10;
};

struct ExtractArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "query";
  std::string out;
  std::string config;
  int batch_size = 0;
};

struct EvalArgs {
  std::string query;
  std::string gallery;
  std::string report;
  std::string dataset = "synthetic";
  bool rerank = false;
  bool multi_query = false;
  std::string pool = "avg";
  RerankParams params;
  std::string config;
  std::function<bool(const std::string&)> given;  // option set on the command line
};

struct HeatmapArgs {
  std::string checkpoint;
  std::string image;
  std::string branch = "all";
  std::string out = ".";
  std::string config;
  float alpha = 0.5F;
};

void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

Split parse_split(const std::string& s) {
  if (s == "train" || s == "bounding_box_train") return Split::kTrain;
  if (s == "query") return Split::kQuery;
  if (s == "gallery" || s == "test" || s == "bounding_box_test") return Split::kGallery;
  throw ConfigError("unknown split '" + s + "' (expected train, query or gallery)");
}

int cmd_synth(const SynthArgs& a) {
  SyntheticSummary s;
  try {
    s = generate_synthetic(a.spec, a.out);
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  std::cout << "wrote " << a.out << ": " << s.train << " train, " << s.query << " query, " << s.gallery
            << " gallery images\n";
  return kExitOk;
}

int cmd_train(const TrainArgs& a) {
  RunConfig config = load_run_config(a.config);
  if (!a.data.empty()) config.dataset_root = a.data;
  if (!a.variant.empty()) {
    config.variant = parse_ablation_variant(a.variant);
    config.train = make_ablation_config(*config.variant, config.train);
  }
  if (config.dataset_root.empty()) throw ConfigError("config key 'config.dataset.root' is required (or pass --data)");

  Dataset dataset = load_market_layout(config.dataset_root);
  if (config.train.model.num_classes <= 0) config.train.model.num_classes = dataset.meta.num_identities;
  Trainer trainer(config.train, std::move(dataset));
  config.train = trainer.config();
  const std::string hash = config_hash(config.train.model);

  const fs::path run_dir = a.run_dir;
  fs::create_directories(run_dir);
  json saved = to_json(config);
  saved["dataset"]["root"] = fs::absolute(config.dataset_root).string();
  write_json_file(run_dir / "config.json", saved);

  TrainOptions options;
  options.run_dir = run_dir;
  if (!a.resume.empty()) {
    options.resume_from = a.resume == "latest" ? latest_checkpoint(run_dir) : fs::path(a.resume);
  } else if (config.pretrained) {
    const WeightMapping mapping = config.pretrained->mapping.empty() ? WeightMapping{}
                                                                     : WeightMapping::load(config.pretrained->mapping);
    const std::size_t n = load_pretrained(trainer.model(), TensorArchive::load(config.pretrained->archive), mapping);
    std::cout << "initialized " << n << " backbone tensors from " << config.pretrained->archive.string() << '\n';
  }

  std::cout << "model " << hash << ": " << trainer.model().num_parameters() << " parameters, "
            << trainer.steps_per_epoch() << " steps/epoch\n";
  const auto start = std::chrono::steady_clock::now();
  options.on_step = [&](const StepRecord& r) {
    if (a.log_every > 0 && (r.step % a.log_every == 0 || r.step == 1)) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::printf("epoch %3d  step %5d  lr %.2e  loss %9.4f  acc %.3f  %.0fs\n", r.epoch, r.step, r.lr, r.loss.total,
                  r.accuracy, secs);
      std::fflush(stdout);
    }
  };
  const TrainResult result = train(trainer, options);
  std::cout << "trained " << result.epochs_completed << " epochs; last checkpoint "
            << result.last_checkpoint.string() << '\n';
  return kExitOk;
}

int cmd_extract(const ExtractArgs& a) {
  ExtractOptions options;
  if (!a.config.empty()) {
    const RunConfig config = load_run_config(a.config);
    options.normalization = config.train.loader.normalization;
    options.batch_size = config.eval.batch_size;
  }
  if (a.batch_size > 0) options.batch_size = a.batch_size;
  const Split split = parse_split(a.split);
  const Model model = load_model_checkpoint(a.checkpoint);
  options.height = model.config().input_height;
  options.width = model.config().input_width;
  const Dataset dataset = load_market_layout(a.data);
  const std::vector<ImageRecord> records = dataset.split(split);
  if (records.empty()) std::cerr << "warning: split '" << a.split << "' is empty; writing an empty feature file\n";
  const FeatureMatrix features = extract(model, records, options);
  save_features(features, a.out);
  std::cout << "wrote " << a.out << ".feat.bin [" << features.rows() << " x " << features.dim() << "] config "
            << features.config_hash << '\n';
  return kExitOk;
}

int cmd_eval(EvalArgs a) {
  if (!a.config.empty()) {
    const EvalConfig c = load_run_config(a.config).eval;
    if (!a.given("--dataset")) a.dataset = c.dataset_name;
    if (!a.given("--rerank")) a.rerank = c.rerank;
    if (!a.given("--k1")) a.params.k1 = c.rerank_params.k1;
    if (!a.given("--k2")) a.params.k2 = c.rerank_params.k2;
    if (!a.given("--lambda")) a.params.lambda = c.rerank_params.lambda;
    if (!a.given("--multi-query")) a.multi_query = c.multi_query;
    if (!a.given("--pool")) a.pool = to_string(c.pool);
  }
  const FeatureMatrix query = load_features(a.query);
  const FeatureMatrix gallery = load_features(a.gallery);
  if (query.config_hash != gallery.config_hash) {
    throw DataError("feature files come from different model configs (" + query.config_hash + " vs " +
                    gallery.config_hash + ")");
  }
  if (query.dim() != gallery.dim() || query.feature_order != gallery.feature_order) {
    throw DataError("query and gallery feature layouts differ");
  }

  Protocol protocol;
  protocol.dataset = a.dataset;
  protocol.multi_query = a.multi_query;
  protocol.pool = parse_pool_mode(a.pool);

  Eigen::MatrixXf q = query.features;
  std::vector<RetrievalMeta> q_meta = retrieval_meta(query.records);
  if (a.multi_query) {
    const QueryGroups groups = group_queries(q_meta);
    q = pool_query_groups(q, groups, protocol.pool);
    q_meta = groups.meta;
  }
  const Eigen::MatrixXf g = gallery.features;
  const std::vector<RetrievalMeta> g_meta = retrieval_meta(gallery.records);
  const Eigen::MatrixXd qd = q.cast<double>();
  const Eigen::MatrixXd gd = g.cast<double>();
  const Eigen::MatrixXd dist = pairwise_distances(qd, gd);

  std::vector<RankingReport> reports{evaluate(dist, q_meta, g_meta, protocol)};
  if (a.rerank) {
    Protocol rk = protocol;
    rk.reranked = true;
    const Eigen::MatrixXd reranked = rerank(dist, pairwise_distances(qd, qd), pairwise_distances(gd, gd), a.params);
    reports.push_back(evaluate(reranked, q_meta, g_meta, rk));
  }
  std::cout << format_report_table(reports);

  if (!a.report.empty()) {
    json j;
    j["config_hash"] = query.config_hash;
    j["query"] = a.query;
    j["gallery"] = a.gallery;
    j["num_query"] = q.rows();
    j["num_gallery"] = g.rows();
    if (a.rerank) j["rerank"] = {{"k1", a.params.k1}, {"k2", a.params.k2}, {"lambda", a.params.lambda}};
    j["reports"] = json::array();
    for (const auto& r : reports) {
      json cmc = json::object();
      for (const auto& [rank, rate] : r.cmc) cmc[std::to_string(rank)] = rate;
      j["reports"].push_back({{"protocol", r.protocol.label()},
                              {"dataset", r.protocol.dataset},
                              {"cmc", cmc},
                              {"mAP", r.mean_ap},
                              {"evaluated_queries", r.evaluated_queries.size()},
                              {"skipped_queries", r.skipped_queries}});
    }
    write_json_file(a.report, j);
  }
  return kExitOk;
}

int cmd_heatmap(const HeatmapArgs& a) {
  Normalization norm;
  if (!a.config.empty()) norm = load_run_config(a.config).train.loader.normalization;
  const Model model = load_model_checkpoint(a.checkpoint);
  const std::vector<std::string> valid = model.branch_names();
  std::vector<std::string> branches;
  if (a.branch == "all") {
    branches = valid;
  } else if (std::find(valid.begin(), valid.end(), a.branch) != valid.end()) {
    branches = {a.branch};
  } else {
    std::string names;
    for (const auto& n : valid) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("unknown branch '" + a.branch + "' (valid: " + names + ", all)");
  }
  if (!(a.alpha >= 0 && a.alpha <= 1)) throw ConfigError("--alpha must be in [0, 1]");

  const Image source = read_image(a.image);
  const Tensor4f input = load_image_batch({fs::path(a.image)}, model.config().input_height,
                                          model.config().input_width, norm);
  const Image shown = resize_bilinear(source, model.config().input_height, model.config().input_width);
  const fs::path out_dir = a.out;
  fs::create_directories(out_dir);
  const std::string stem = fs::path(a.image).stem().string();
  for (const auto& b : branches) {
    const ResponseMap map = response_map(model, input, b);
    const fs::path out = out_dir / (stem + "_" + b + ".png");
    write_image(out, render_heatmap(shown, map.intensity, a.alpha));
    std::cout << "wrote " << out.string() << " (" << map.intensity.rows() << "x" << map.intensity.cols()
              << " response map)\n";
  }
  return kExitOk;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Multiple Granularity Network: training, feature extraction and retrieval evaluation", "mgn"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic Market-style dataset");
  s->add_option("--out", synth.out, "Output dataset root")->required();
  s->add_option("--ids", synth.spec.num_ids, "Number of identities")->check(CLI::PositiveNumber);
  s->add_option("--per-id", synth.spec.images_per_id, "Training images per identity")->check(CLI::PositiveNumber);
  s->add_option("--height", synth.spec.height, "Image height")->check(CLI::PositiveNumber);
  s->add_option("--width", synth.spec.width, "Image width")->check(CLI::PositiveNumber);
  s->add_option("--seed", synth.spec.seed, "Random seed");
  s->add_option("--query-per-id", synth.spec.query_per_id, "Query images per identity");
  s->add_option("--gallery-per-id", synth.spec.gallery_per_id, "Gallery images per identity");
  s->add_option("--junk", synth.spec.junk_images, "Junk gallery images");
  s->add_option("--cameras", synth.spec.cameras, "Number of cameras")->check(CLI::PositiveNumber);

  TrainArgs train_args;
  auto* t = app.add_subcommand("train", "Train a model from a run config");
  t->add_option("--config", train_args.config, "Run config (JSON)")->required();
  t->add_option("--run-dir", train_args.run_dir, "Output run directory")->required();
  t->add_option("--data", train_args.data, "Dataset root (overrides the config)");
  t->add_option("--variant", train_args.variant, "Ablation variant, e.g. \"w/o Part-3\", \"Part2+4\", \"w/o TP\"");
  t->add_option("--resume", train_args.resume, "Checkpoint directory, or 'latest'");
  t->add_option("--log-every", train_args.log_every, "Print every N steps (0 = silent)");

  ExtractArgs ex;
  auto* e = app.add_subcommand("extract", "Extract flip-averaged features of one split");
  e->add_option("--checkpoint", ex.checkpoint, "Checkpoint or run directory")->required();
  e->add_option("--data", ex.data, "Dataset root")->required();
  e->add_option("--split", ex.split, "train, query or gallery");
  e->add_option("--out", ex.out, "Output prefix (writes <prefix>.feat.bin/.feat.json)")->required();
  e->add_option("--config", ex.config, "Run config supplying normalization and batch size");
  e->add_option("--batch-size", ex.batch_size, "Images per forward pass");

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "Rank a gallery for each query and report CMC / mAP");
  v->add_option("--query", ev.query, "Query feature prefix")->required();
  v->add_option("--gallery", ev.gallery, "Gallery feature prefix")->required();
  v->add_option("--report", ev.report, "Write the report as JSON");
  v->add_option("--dataset", ev.dataset, "Dataset name shown in the report");
  v->add_flag("--rerank", ev.rerank, "Also report k-reciprocal re-ranking");
  v->add_option("--k1", ev.params.k1, "Re-ranking k1")->check(CLI::PositiveNumber);
  v->add_option("--k2", ev.params.k2, "Re-ranking k2")->check(CLI::PositiveNumber);
  v->add_option("--lambda", ev.params.lambda, "Re-ranking weight of the original distance")->check(CLI::Range(0.0, 1.0));
  v->add_flag("--multi-query", ev.multi_query, "Pool queries sharing identity and camera");
  v->add_option("--pool", ev.pool, "Multi-query pooling: avg or max");
  v->add_option("--config", ev.config, "Run config whose eval section supplies defaults for the options above");
  ev.given = [v](const std::string& name) { return v->count(name) > 0; };

  HeatmapArgs hm;
  auto* h = app.add_subcommand("heatmap", "Render branch response maps over an image");
  h->add_option("--checkpoint", hm.checkpoint, "Checkpoint or run directory")->required();
  h->add_option("--image", hm.image, "Input image")->required();
  h->add_option("--branch", hm.branch, "Branch name or 'all'");
  h->add_option("--out", hm.out, "Output directory");
  h->add_option("--alpha", hm.alpha, "Overlay opacity in [0, 1]");
  h->add_option("--config", hm.config, "Run config supplying normalization");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitConfig;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*t) return cmd_train(train_args);
    if (*e) return cmd_extract(ex);
    if (*v) return cmd_eval(ev);
    if (*h) return cmd_heatmap(hm);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return kExitConfig;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kExitData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

int run(const std::vector<std::string>& args) {
  std::vector<std::string> storage{"mgn"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : storage) argv.push_back(a.data());
  argv.push_back(nullptr);
  return run(static_cast<int>(storage.size()), argv.data());
}

}  // namespace mgn::cli
