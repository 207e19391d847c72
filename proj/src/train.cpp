#include "mgn/train.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mgn/archive.hpp"
#include "mgn/config.hpp"
#include "mgn/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mgn {

void validate(const TrainConfig& config) {
  if (config.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (config.lr_schedule.empty()) throw ConfigError("train: lr_schedule is empty");
  if (config.lr_schedule.front().epoch != 0) throw ConfigError("train: lr_schedule must start at epoch 0");
  for (std::size_t i = 0; i < config.lr_schedule.size(); ++i) {
    const auto& s = config.lr_schedule[i];
    if (!(s.lr > 0)) throw ConfigError("train: learning rates must be > 0");
    if (i > 0 && s.epoch <= config.lr_schedule[i - 1].epoch) {
      throw ConfigError("train: lr_schedule epochs must be strictly increasing");
    }
  }
  if (config.momentum < 0 || config.momentum >= 1) throw ConfigError("train: momentum must be in [0, 1)");
  if (config.weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
  if (config.max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
  if (config.checkpoint_every < 1) throw ConfigError("train: checkpoint_every must be >= 1");
  if (config.sampler.p < 2 || config.sampler.k < 2) throw ConfigError("train: sampler needs P >= 2 and K >= 2");
  if (config.loader.flip_probability < 0 || config.loader.flip_probability > 1) {
    throw ConfigError("train: flip_probability must be in [0, 1]");
  }
  if (config.loss.enable_triplet && !(config.loss.margin > 0)) throw ConfigError("train: margin must be > 0");
  const bool reduced_head = config.model.global_head_input == GlobalHeadInput::kReduced;
  if (reduced_head == config.loss.enable_triplet) {
    throw ConfigError(
        "train: global_head_input must be 'non_reduced' with the triplet loss and 'reduced' without it");
  }
  validate(config.model);
}

double lr_at(int epoch, const TrainConfig& config) {
  if (epoch < 0 || epoch >= config.epochs) {
    throw InputError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(config.epochs) + ")");
  }
  double lr = config.lr_schedule.front().lr;
  for (const auto& s : config.lr_schedule) {
    if (s.epoch <= epoch) lr = s.lr;
  }
  return lr;
}

SgdMomentum::SgdMomentum(double momentum, double weight_decay, bool decay_norm_params)
    : momentum_(momentum), weight_decay_(weight_decay), decay_norm_params_(decay_norm_params) {}

void SgdMomentum::step(Model& model, double lr) {
  const auto mu = static_cast<float>(momentum_);
  const auto step = static_cast<float>(lr);
  model.visit_parameters([&](const std::string& name, Parameter& p) {
    if (!p.learnable()) return;
    auto& v = velocity_[name];
    if (v.size() != p.numel()) v = Eigen::VectorXf::Zero(p.numel());
    const bool decay = p.kind == ParamKind::kWeight || decay_norm_params_;
    const float wd = decay ? static_cast<float>(weight_decay_) : 0.0F;
    if (p.grad.size() == p.numel()) {
      v = mu * v + p.grad + wd * p.value;
    } else {
      v = mu * v + wd * p.value;
    }
    p.value -= step * v;
  });
}

namespace {

std::string normalize_variant(const std::string& name) {
  std::string s;
  for (char c : name) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isspace(u) || c == '(' || c == ')' || c == '-' || c == '_' || c == '/') continue;
    s.push_back(static_cast<char>(std::tolower(u)));
  }
  if (s.rfind("mgn", 0) == 0) s.erase(0, 3);
  return s;
}

}  // namespace

AblationVariant parse_ablation_variant(const std::string& name) {
  const std::string s = normalize_variant(name);
  if (s.empty() || s == "canonical") return AblationVariant::kCanonical;
  if (s == "wopart3") return AblationVariant::kWithoutPart3;
  if (s == "wpart4") return AblationVariant::kWithPart4;
  if (s == "part2+4") return AblationVariant::kPart2And4;
  if (s == "part3+4") return AblationVariant::kPart3And4;
  if (s == "wotp") return AblationVariant::kWithoutTriplet;
  throw ConfigError("unknown ablation variant '" + name +
                    "' (expected canonical, w/o Part-3, w/ Part-4, Part2+4, Part3+4 or w/o TP)");
}

std::string to_string(AblationVariant variant) {
  switch (variant) {
    case AblationVariant::kCanonical: return "canonical";
    case AblationVariant::kWithoutPart3: return "w/o Part-3";
    case AblationVariant::kWithPart4: return "w/ Part-4";
    case AblationVariant::kPart2And4: return "Part2+4";
    case AblationVariant::kPart3And4: return "Part3+4";
    case AblationVariant::kWithoutTriplet: return "w/o TP";
  }
  return "canonical";
}

std::vector<AblationVariant> all_ablation_variants() {
  return {AblationVariant::kCanonical, AblationVariant::kWithoutPart3, AblationVariant::kWithPart4,
          AblationVariant::kPart2And4,  AblationVariant::kPart3And4,    AblationVariant::kWithoutTriplet};
}

TrainConfig make_ablation_config(AblationVariant variant, TrainConfig base) {
  std::vector<int> parts;
  switch (variant) {
    case AblationVariant::kCanonical:
    case AblationVariant::kWithoutTriplet: parts = {2, 3}; break;
    case AblationVariant::kWithoutPart3: parts = {2}; break;
    case AblationVariant::kWithPart4: parts = {2, 3, 4}; break;
    case AblationVariant::kPart2And4: parts = {2, 4}; break;
    case AblationVariant::kPart3And4: parts = {3, 4}; break;
  }
  int reduced_dim = 256;
  if (!base.model.branches.empty()) reduced_dim = base.model.branches.front().reduced_dim;
  base.model.branches = {BranchConfig::global()};
  for (int n : parts) base.model.branches.push_back(BranchConfig::part(n));
  for (auto& b : base.model.branches) b.reduced_dim = reduced_dim;
  const bool triplet = variant != AblationVariant::kWithoutTriplet;
  base.loss.enable_triplet = triplet;
  base.model.global_head_input = triplet ? GlobalHeadInput::kNonReduced : GlobalHeadInput::kReduced;
  return base;
}

std::string to_json_line(const StepRecord& record, const std::string& config_hash) {
  json terms = json::object();
  const auto keys = record.loss.keys();
  for (std::size_t i = 0; i < keys.size(); ++i) terms[keys[i]] = record.loss.terms[i].value;
  json j = {{"config_hash", config_hash}, {"epoch", record.epoch},           {"step", record.step},
            {"lr", record.lr},            {"loss", record.loss.total},       {"accuracy", record.accuracy},
            {"terms", terms}};
  return j.dump();
}

namespace {

TrainConfig prepared(TrainConfig config, const Dataset& dataset) {
  if (config.model.num_classes <= 0) config.model.num_classes = dataset.meta.num_identities;
  if (config.model.num_classes != dataset.meta.num_identities) {
    throw ConfigError("model.num_classes is " + std::to_string(config.model.num_classes) + " but the training split has " +
                      std::to_string(dataset.meta.num_identities) + " identities");
  }
  config.loader.height = config.model.input_height;
  config.loader.width = config.model.input_width;
  validate(config);
  return config;
}

std::string head_for_accuracy(const ModelConfig& config) {
  const bool raw = config.global_head_input == GlobalHeadInput::kNonReduced;
  return feature_name(raw ? FeatureKind::kGlobalRaw : FeatureKind::kGlobal, config.branches.front().name);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump(1) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

}  // namespace

Trainer::Trainer(TrainConfig config, Dataset dataset)
    : config_(prepared(std::move(config), dataset)),
      dataset_(std::move(dataset)),
      train_records_(dataset_.trainable()),
      model_(config_.model, config_.seed),
      optimizer_(config_.momentum, config_.weight_decay, config_.decay_norm_params),
      sampler_(train_records_, dataset_.meta, config_.sampler),
      rng_(config_.seed ^ 0x5eedf11bULL) {}

double Trainer::current_lr() const { return lr_at(std::min(epoch_, config_.epochs - 1), config_); }

StepRecord Trainer::step() {
  const BatchIndices indices = sampler_.next();
  const Batch batch = assemble_batch(train_records_, dataset_.meta, indices, config_.loader, rng_);
  return step_on(batch);
}

StepRecord Trainer::step_on(const Batch& batch) {
  model_.zero_grad();
  const EmbeddingBundle bundle = model_.forward(batch.images, Mode::kTrain);
  LossGradients grads;
  StepRecord record;
  record.epoch = epoch_;
  record.step = global_step_ + 1;
  record.lr = current_lr();
  record.loss = route_losses(bundle, batch.labels, model_.heads(), config_.model, config_.loss, &grads);
  const auto keys = record.loss.keys();
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (!std::isfinite(record.loss.terms[i].value)) {
      throw NumericError("non-finite loss term '" + keys[i] + "' at step " + std::to_string(record.step));
    }
  }

  const std::string acc_head = head_for_accuracy(config_.model);
  const Eigen::MatrixXf logits = bundle.feature(acc_head) * model_.head(acc_head).weight().transpose();
  int correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    if (best == batch.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  record.accuracy = logits.rows() > 0 ? static_cast<double>(correct) / static_cast<double>(logits.rows()) : 0.0;

  for (const auto& [name, g] : grads.heads) model_.head(name).weight_grad() += g;
  model_.backward(grads.features);
  optimizer_.step(model_, record.lr);
  ++global_step_;
  return record;
}

void Trainer::save_checkpoint(const fs::path& dir) const {
  fs::create_directories(dir);
  export_weights(model_).save(dir / "model.bin");
  write_json(dir / "model.json", {{"format", "mgn-checkpoint"},
                                  {"version", 1},
                                  {"config_hash", config_hash(model_.config())},
                                  {"model", to_json(model_.config())}});
  TensorArchive velocity;
  for (const auto& [name, v] : optimizer_.velocity()) {
    velocity.put(name, {{static_cast<int>(v.size())}, std::vector<float>(v.data(), v.data() + v.size())});
  }
  velocity.save(dir / "optimizer.bin");
  std::ostringstream rng;
  rng << rng_;
  write_json(dir / "state.json", {{"epoch", epoch_},
                                  {"global_step", global_step_},
                                  {"config_hash", config_hash(config_)},
                                  {"model_config_hash", config_hash(model_.config())},
                                  {"rng", rng.str()},
                                  {"sampler", sampler_.state()}});
}

void Trainer::load_checkpoint(const fs::path& dir) {
  const json state = read_json(dir / "state.json");
  try {
    const std::string hash = state.at("config_hash").get<std::string>();
    if (hash != config_hash(config_)) {
      throw ConfigError("checkpoint '" + dir.string() + "' was written under config " + hash + ", current config is " +
                        config_hash(config_));
    }
    import_weights(model_, TensorArchive::load(dir / "model.bin"));
    const TensorArchive velocity = TensorArchive::load(dir / "optimizer.bin");
    optimizer_.velocity().clear();
    for (const auto& [name, t] : velocity.tensors()) {
      optimizer_.velocity()[name] = Eigen::Map<const Eigen::VectorXf>(t.data.data(), static_cast<Eigen::Index>(t.data.size()));
    }
    std::istringstream rng(state.at("rng").get<std::string>());
    rng >> rng_;
    sampler_.restore(state.at("sampler").get<std::string>());
    epoch_ = state.at("epoch").get<int>() + 1;
    global_step_ = state.at("global_step").get<int>();
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint state in '" + dir.string() + "': " + e.what());
  }
}

namespace {

fs::path epoch_dir(const fs::path& run_dir, int epoch) {
  char name[32];
  std::snprintf(name, sizeof(name), "epoch_%04d", epoch);
  return run_dir / "checkpoints" / name;
}

}  // namespace

TrainResult train(Trainer& trainer, const TrainOptions& options) {
  if (options.resume_from) trainer.load_checkpoint(*options.resume_from);
  const TrainConfig& config = trainer.config();
  const std::string hash = config_hash(config.model);
  std::ofstream metrics;
  if (!options.run_dir.empty()) {
    fs::create_directories(options.run_dir / "checkpoints");
    metrics.open(options.run_dir / "metrics.jsonl", std::ios::app);
    if (!metrics) throw DataError("cannot write metrics log in '" + options.run_dir.string() + "'");
  }

  TrainResult result;
  bool budget_spent = false;
  while (trainer.epoch() < config.epochs && !budget_spent) {
    const int epoch = trainer.epoch();
    for (int s = 0; s < trainer.steps_per_epoch(); ++s) {
      if (config.max_steps > 0 && trainer.global_step() >= config.max_steps) {
        budget_spent = true;
        break;
      }
      StepRecord record = trainer.step();
      if (metrics.is_open()) metrics << to_json_line(record, hash) << '\n' << std::flush;
      if (options.on_step) options.on_step(record);
      result.history.push_back(std::move(record));
    }
    if (config.max_steps > 0 && trainer.global_step() >= config.max_steps) budget_spent = true;
    const bool last = budget_spent || epoch + 1 == config.epochs;
    if (!options.run_dir.empty() && ((epoch + 1) % config.checkpoint_every == 0 || last)) {
      result.last_checkpoint = epoch_dir(options.run_dir, epoch);
      trainer.save_checkpoint(result.last_checkpoint);
    }
    ++result.epochs_completed;
    trainer.advance_epoch();
  }
  return result;
}

fs::path latest_checkpoint(const fs::path& dir) {
  fs::path root = dir;
  if (fs::is_directory(dir / "checkpoints")) root = dir / "checkpoints";
  if (!fs::is_directory(root)) throw DataError("no checkpoint directory at '" + dir.string() + "'");
  fs::path best;
  for (const auto& entry : fs::directory_iterator(root)) {
    const std::string name = entry.path().filename().string();
    if (!entry.is_directory() || name.rfind("epoch_", 0) != 0) continue;
    if (best.empty() || name > best.filename().string()) best = entry.path();
  }
  if (best.empty()) throw DataError("no epoch_NNNN checkpoints under '" + root.string() + "'");
  return best;
}

Model load_model_checkpoint(const fs::path& dir) {
  const fs::path ckpt = fs::exists(dir / "model.json") ? dir : latest_checkpoint(dir);
  const json meta = read_json(ckpt / "model.json");
  if (!meta.contains("model")) throw DataError("'" + (ckpt / "model.json").string() + "' has no model section");
  ModelConfig config;
  try {
    config = model_config_from_json(meta.at("model"), "model");
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint model config: ") + e.what());
  }
  Model model(config);
  import_weights(model, TensorArchive::load(ckpt / "model.bin"));
  return model;
}

}  // namespace mgn
