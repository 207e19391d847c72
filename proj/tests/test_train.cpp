#include <doctest.h>

#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "mgn/config.hpp"
#include "mgn/train.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace mgn;

namespace {

const Dataset& small_dataset() {
  static const Dataset data = [] {
    const fs::path root = testing::scratch_dir("train_data");
    SyntheticSpec spec;
    spec.num_ids = 4;
    spec.images_per_id = 4;
    spec.height = 96;
    spec.width = 32;
    generate_synthetic(spec, root);
    return load_market_layout(root);
  }();
  return data;
}

TrainConfig small_train_config(int epochs = 4) {
  TrainConfig c;
  c.model = testing::tiny_config(0);
  c.sampler = {2, 4, 0};
  c.epochs = epochs;
  c.lr_schedule = {{0, 0.01}};
  c.seed = 5;
  return c;
}

double weight_sum(const Model& m) {
  double s = 0;
  m.visit_parameters([&](const std::string&, const Parameter& p) { s += p.value.cast<double>().sum(); });
  return s;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  const TrainConfig c;
  CHECK(lr_at(0, c) == 0.01);
  CHECK(lr_at(39, c) == 0.01);
  CHECK(lr_at(40, c) == 1e-3);
  CHECK(lr_at(59, c) == 1e-3);
  CHECK(lr_at(60, c) == 1e-4);
  CHECK(lr_at(79, c) == 1e-4);
  CHECK_THROWS_AS(lr_at(80, c), InputError);
  CHECK_THROWS_AS(lr_at(-1, c), InputError);
}

TEST_CASE("learning rate is the last scheduled step at or before the epoch") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    TrainConfig c;
    c.epochs = 100;
    c.lr_schedule = {{0, 0.1}};
    int epoch = 0;
    double lr = 0.1;
    while (true) {
      epoch += std::uniform_int_distribution<int>(1, 30)(rng);
      if (epoch >= 100) break;
      lr *= std::uniform_real_distribution<double>(0.05, 0.9)(rng);
      c.lr_schedule.push_back({epoch, lr});
    }
    double prev = 1.0;
    for (int e = 0; e < 100; ++e) {
      double want = 0;
      for (const auto& s : c.lr_schedule) {
        if (s.epoch <= e) want = s.lr;
      }
      const double got = lr_at(e, c);
      CHECK(got == want);
      CHECK(got <= prev);
      prev = got;
    }
  }
}

TEST_CASE("training configuration validation") {
  TrainConfig c;
  CHECK_NOTHROW(validate(c));
  TrainConfig bad = c;
  bad.lr_schedule = {{5, 0.01}};
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = c;
  bad.lr_schedule = {{0, 0.01}, {40, 1e-3}, {40, 1e-4}};
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = c;
  bad.lr_schedule = {{0, 0.0}};
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = c;
  bad.momentum = 1.0;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = c;
  bad.sampler.p = 1;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = c;
  bad.loss.enable_triplet = false;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad.model.global_head_input = GlobalHeadInput::kReduced;
  CHECK_NOTHROW(validate(bad));
}

TEST_CASE("SGD with momentum and decoupled norm parameters") {
  Model model(testing::tiny_config(3), 0);
  Model reference(testing::tiny_config(3), 0);
  model.zero_grad();
  SgdMomentum opt(0.9, 0.1, false);
  opt.step(model, 0.5);
  model.visit_parameters([&](const std::string& name, const Parameter& p) {
    Parameter* r = nullptr;
    reference.visit_parameters([&](const std::string& n, Parameter& q) {
      if (n == name) r = &q;
    });
    if (p.kind == ParamKind::kWeight) {
      CHECK_MESSAGE((p.value - r->value * (1.0F - 0.05F)).cwiseAbs().maxCoeff() < 1e-6F, name);
    } else {
      CHECK_MESSAGE(p.value == r->value, name);
    }
  });

  // Two steps with a constant gradient: v1 = g, v2 = 1.9 g.
  Model one(testing::tiny_config(3), 0);
  SgdMomentum plain(0.9, 0.0, false);
  Parameter* w = nullptr;
  one.visit_parameters([&](const std::string& n, Parameter& p) {
    if (n == "stem.conv.weight") w = &p;
  });
  const Eigen::VectorXf start = w->value;
  for (int i = 0; i < 2; ++i) {
    one.zero_grad();
    w->ensure_grad().setConstant(1.0F);
    plain.step(one, 0.1);
  }
  CHECK((w->value - (start.array() - 0.29F).matrix()).cwiseAbs().maxCoeff() < 1e-6F);

  Model decayed(testing::tiny_config(3), 0);
  decayed.zero_grad();
  SgdMomentum all(0.9, 0.1, true);
  all.step(decayed, 0.5);
  decayed.visit_parameters([&](const std::string& name, const Parameter& p) {
    if (name == "stem.bn.weight") CHECK(p.value.isConstant(0.95F, 1e-6F));
  });
}

TEST_CASE("ablation variants") {
  CHECK(parse_ablation_variant("canonical") == AblationVariant::kCanonical);
  CHECK(parse_ablation_variant("w/o Part-3") == AblationVariant::kWithoutPart3);
  CHECK(parse_ablation_variant("MGN w/ Part-4") == AblationVariant::kWithPart4);
  CHECK(parse_ablation_variant("part2+4") == AblationVariant::kPart2And4);
  CHECK(parse_ablation_variant("Part3+4") == AblationVariant::kPart3And4);
  CHECK(parse_ablation_variant("wo-tp") == AblationVariant::kWithoutTriplet);
  CHECK_THROWS_AS(parse_ablation_variant("w/ Part-9"), ConfigError);

  const std::map<AblationVariant, std::size_t> expected{
      {AblationVariant::kCanonical, 11}, {AblationVariant::kWithoutPart3, 6}, {AblationVariant::kWithPart4, 17},
      {AblationVariant::kPart2And4, 12}, {AblationVariant::kPart3And4, 13},   {AblationVariant::kWithoutTriplet, 8}};
  for (const AblationVariant v : all_ablation_variants()) {
    CHECK(parse_ablation_variant(to_string(v)) == v);
    const TrainConfig c = make_ablation_config(v);
    CHECK_NOTHROW(validate(c));
    CHECK_MESSAGE(loss_targets(c.model, c.loss).size() == expected.at(v), to_string(v));
  }
  const TrainConfig p34 = make_ablation_config(AblationVariant::kPart3And4);
  CHECK(p34.model.branches.size() == 3);
  CHECK(p34.model.branches[1].num_parts == 3);
  CHECK(p34.model.branches[2].num_parts == 4);
}

TEST_CASE("training is deterministic and reduces the loss") {
  Trainer a(small_train_config(), small_dataset());
  Trainer b(small_train_config(), small_dataset());
  CHECK(a.config().model.num_classes == 4);
  CHECK(a.steps_per_epoch() == 2);
  std::vector<double> losses;
  for (int i = 0; i < 10; ++i) {
    const StepRecord ra = a.step();
    const StepRecord rb = b.step();
    CHECK(ra.loss.total == rb.loss.total);
    CHECK(ra.step == i + 1);
    CHECK(ra.loss.terms.size() == 11);
    losses.push_back(ra.loss.total);
  }
  CHECK(weight_sum(a.model()) == weight_sum(b.model()));
  for (int i = 0; i < 20; ++i) losses.push_back(a.step().loss.total);
  const double head = (losses[0] + losses[1] + losses[2] + losses[3]) / 4;
  const double tail = (losses[26] + losses[27] + losses[28] + losses[29]) / 4;
  CHECK(tail < head);
}

TEST_CASE("resuming reproduces the uninterrupted run") {
  const fs::path full_dir = testing::scratch_dir("train_full");
  Trainer full(small_train_config(), small_dataset());
  const TrainResult full_run = train(full, {full_dir, std::nullopt, {}});
  CHECK(full_run.epochs_completed == 4);
  CHECK(full_run.history.size() == 8);
  CHECK(latest_checkpoint(full_dir).filename() == "epoch_0003");

  const fs::path resumed_dir = testing::scratch_dir("train_resumed");
  Trainer resumed(small_train_config(), small_dataset());
  const TrainResult tail = train(resumed, {resumed_dir, full_dir / "checkpoints" / "epoch_0001", {}});
  REQUIRE(tail.history.size() == 4);
  CHECK(tail.history.front().epoch == 2);
  CHECK(tail.history.front().step == 5);
  for (std::size_t i = 0; i < 4; ++i) CHECK(tail.history[i].loss.total == full_run.history[i + 4].loss.total);
  CHECK(weight_sum(resumed.model()) == weight_sum(full.model()));

  std::ifstream metrics(full_dir / "metrics.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(metrics, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("config_hash").get<std::string>() == config_hash(full.config().model));
    CHECK(j.at("terms").size() == 11);
    ++lines;
  }
  CHECK(lines == 8);

  const Model loaded = load_model_checkpoint(latest_checkpoint(full_dir));
  const Tensor4f images = testing::random_images(2, 96, 32, 3);
  CHECK((loaded.infer(images).concatenated() - full.model().infer(images).concatenated()).cwiseAbs().maxCoeff() ==
        0.0F);

  TrainConfig other = small_train_config();
  other.loss.margin = 0.3;
  Trainer mismatched(other, small_dataset());
  CHECK_THROWS(mismatched.load_checkpoint(full_dir / "checkpoints" / "epoch_0001"));
  CHECK_THROWS_AS(latest_checkpoint(testing::scratch_dir("no_checkpoints")), DataError);
}

TEST_CASE("step budget and checkpoint cadence") {
  TrainConfig c = small_train_config(10);
  c.max_steps = 5;
  c.checkpoint_every = 2;
  const fs::path dir = testing::scratch_dir("train_budget");
  Trainer t(c, small_dataset());
  const TrainResult r = train(t, {dir, std::nullopt, {}});
  CHECK(r.history.size() == 5);
  CHECK(fs::is_directory(dir / "checkpoints" / "epoch_0001"));
  CHECK(fs::is_directory(dir / "checkpoints" / "epoch_0002"));
  CHECK_FALSE(fs::exists(dir / "checkpoints" / "epoch_0000"));
}

TEST_CASE("non-finite losses name the offending term") {
  Trainer t(small_train_config(), small_dataset());
  Batch batch;
  batch.images = testing::random_images(8, 96, 32, 1);
  batch.images.data()[0] = std::numeric_limits<float>::quiet_NaN();
  batch.labels = {0, 0, 0, 0, 1, 1, 1, 1};
  try {
    t.step_on(batch);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string what = e.what();
    CHECK((what.find("softmax:") != std::string::npos || what.find("triplet:") != std::string::npos));
  }
}

TEST_CASE("num_classes must match the training identities") {
  TrainConfig c = small_train_config();
  c.model.num_classes = 7;
  CHECK_THROWS_AS(Trainer(c, small_dataset()), ConfigError);
}

TEST_CASE("metrics lines are valid JSON") {
  StepRecord r;
  r.epoch = 3;
  r.step = 17;
  r.lr = 0.01;
  r.loss.total = 2.5;
  r.loss.terms.push_back({LossKind::kSoftmax, "z_g@global", 2.5, 1.0});
  const auto j = nlohmann::json::parse(to_json_line(r, "abcd"));
  CHECK(j.at("epoch") == 3);
  CHECK(j.at("step") == 17);
  CHECK(j.at("loss") == 2.5);
  CHECK(j.at("terms").at("softmax:z_g@global") == 2.5);
}
