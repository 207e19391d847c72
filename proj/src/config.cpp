#include "mgn/config.hpp"

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>

#include "mgn/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mgn {

namespace {

/// Reads keys out of a JSON object and rejects anything it was not asked about.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config '" + path_ + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + path_ + "." + key + "' has the wrong type: " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + path_ + "." + key + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string backbone_name(BackboneDepth d) { return d == BackboneDepth::kTiny ? "tiny" : "resnet50"; }

BackboneDepth parse_backbone(const std::string& s) {
  if (s == "resnet50" || s == "full-50") return BackboneDepth::kResNet50;
  if (s == "tiny") return BackboneDepth::kTiny;
  throw ConfigError("unknown backbone '" + s + "' (expected resnet50 or tiny)");
}

std::string head_input_name(GlobalHeadInput h) { return h == GlobalHeadInput::kReduced ? "reduced" : "non_reduced"; }

GlobalHeadInput parse_head_input(const std::string& s) {
  if (s == "non_reduced") return GlobalHeadInput::kNonReduced;
  if (s == "reduced") return GlobalHeadInput::kReduced;
  throw ConfigError("unknown global_head_input '" + s + "' (expected non_reduced or reduced)");
}

json to_json(const LossConfig& c) {
  return {{"margin", c.margin}, {"enable_triplet", c.enable_triplet}, {"softmax_weight", c.softmax_weight},
          {"triplet_weight", c.triplet_weight}};
}

json to_json_train(const TrainConfig& c) {
  json schedule = json::array();
  for (const auto& s : c.lr_schedule) schedule.push_back({{"epoch", s.epoch}, {"lr", s.lr}});
  return {{"epochs", c.epochs},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"decay_norm_params", c.decay_norm_params},
          {"lr_schedule", schedule},
          {"max_steps", c.max_steps},
          {"checkpoint_every", c.checkpoint_every}};
}

}  // namespace

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json to_json(const ModelConfig& c) {
  json branches = json::array();
  for (const auto& b : c.branches) {
    branches.push_back({{"name", b.name},
                        {"num_parts", b.num_parts},
                        {"final_stage_stride", b.final_stage_stride},
                        {"reduced_dim", b.reduced_dim}});
  }
  return {{"backbone", backbone_name(c.backbone)},
          {"split_after", c.split_after},
          {"num_classes", c.num_classes},
          {"input_height", c.input_height},
          {"input_width", c.input_width},
          {"global_head_input", head_input_name(c.global_head_input)},
          {"branches", branches}};
}

ModelConfig model_config_from_json(const json& j, const std::string& path) {
  ModelConfig c = ModelConfig::canonical(0);
  Section s(j, path);
  std::string backbone = backbone_name(c.backbone);
  std::string head_input = head_input_name(c.global_head_input);
  s.read("backbone", backbone);
  s.read("split_after", c.split_after);
  s.read("num_classes", c.num_classes);
  s.read("input_height", c.input_height);
  s.read("input_width", c.input_width);
  s.read("global_head_input", head_input);
  c.backbone = parse_backbone(backbone);
  c.global_head_input = parse_head_input(head_input);
  if (const json* branches = s.child("branches")) {
    if (!branches->is_array()) throw ConfigError("config '" + s.path("branches") + "' must be an array");
    c.branches.clear();
    for (std::size_t i = 0; i < branches->size(); ++i) {
      Section b((*branches)[i], s.path("branches") + "[" + std::to_string(i) + "]");
      BranchConfig bc;
      b.read("name", bc.name);
      b.read("num_parts", bc.num_parts);
      b.read("final_stage_stride", bc.final_stage_stride);
      b.read("reduced_dim", bc.reduced_dim);
      b.finish();
      c.branches.push_back(bc);
    }
  }
  s.finish();
  return c;
}

std::string config_hash(const ModelConfig& config) { return fnv1a_hex(to_json(config).dump()); }

std::string config_hash(const TrainConfig& config) {
  json j = to_json_train(config);
  j["model"] = to_json(config.model);
  j["loss"] = to_json(config.loss);
  j["sampler"] = {{"p", config.sampler.p}, {"k", config.sampler.k}, {"seed", config.sampler.seed}};
  j["seed"] = config.seed;
  return fnv1a_hex(j.dump());
}

json to_json(const RunConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["seed"] = c.train.seed;
  const auto& n = c.train.loader.normalization;
  j["dataset"] = {{"root", c.dataset_root.string()},
                  {"name", c.eval.dataset_name},
                  {"mean", n.mean},
                  {"std", n.stddev},
                  {"flip_probability", c.train.loader.flip_probability}};
  j["sampler"] = {{"p", c.train.sampler.p}, {"k", c.train.sampler.k}, {"seed", c.train.sampler.seed}};
  j["model"] = to_json(c.train.model);
  j["loss"] = to_json(c.train.loss);
  j["train"] = to_json_train(c.train);
  j["eval"] = {{"batch_size", c.eval.batch_size},
               {"multi_query", c.eval.multi_query},
               {"pool", to_string(c.eval.pool)},
               {"rerank",
                {{"enabled", c.eval.rerank},
                 {"k1", c.eval.rerank_params.k1},
                 {"k2", c.eval.rerank_params.k2},
                 {"lambda", c.eval.rerank_params.lambda}}}};
  if (c.variant) j["variant"] = to_string(*c.variant);
  if (c.pretrained) j["pretrained"] = {{"archive", c.pretrained->archive.string()}, {"mapping", c.pretrained->mapping.string()}};
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Section top(j, "config");
  top.read("schema_version", c.schema_version);
  if (c.schema_version != kRunConfigSchemaVersion) {
    throw ConfigError("unsupported config schema_version " + std::to_string(c.schema_version));
  }
  top.read("seed", c.train.seed);
  c.train.sampler.seed = c.train.seed;

  if (const json* d = top.child("dataset")) {
    Section s(*d, "config.dataset");
    std::string root;
    s.read("root", root);
    c.dataset_root = root;
    s.read("name", c.eval.dataset_name);
    s.read("mean", c.train.loader.normalization.mean);
    s.read("std", c.train.loader.normalization.stddev);
    s.read("flip_probability", c.train.loader.flip_probability);
    s.finish();
  }
  if (const json* d = top.child("sampler")) {
    Section s(*d, "config.sampler");
    s.read("p", c.train.sampler.p);
    s.read("k", c.train.sampler.k);
    s.read("seed", c.train.sampler.seed);
    s.finish();
  }
  if (const json* d = top.child("model")) c.train.model = model_config_from_json(*d, "config.model");
  if (const json* d = top.child("loss")) {
    Section s(*d, "config.loss");
    s.read("margin", c.train.loss.margin);
    s.read("enable_triplet", c.train.loss.enable_triplet);
    s.read("softmax_weight", c.train.loss.softmax_weight);
    s.read("triplet_weight", c.train.loss.triplet_weight);
    s.finish();
  }
  if (const json* d = top.child("train")) {
    Section s(*d, "config.train");
    s.read("epochs", c.train.epochs);
    s.read("momentum", c.train.momentum);
    s.read("weight_decay", c.train.weight_decay);
    s.read("decay_norm_params", c.train.decay_norm_params);
    s.read("max_steps", c.train.max_steps);
    s.read("checkpoint_every", c.train.checkpoint_every);
    if (const json* sched = s.child("lr_schedule")) {
      if (!sched->is_array()) throw ConfigError("config 'config.train.lr_schedule' must be an array");
      c.train.lr_schedule.clear();
      for (std::size_t i = 0; i < sched->size(); ++i) {
        Section step((*sched)[i], "config.train.lr_schedule[" + std::to_string(i) + "]");
        LrStep ls;
        step.read("epoch", ls.epoch);
        step.read("lr", ls.lr);
        step.finish();
        c.train.lr_schedule.push_back(ls);
      }
    }
    s.finish();
  }
  if (const json* d = top.child("eval")) {
    Section s(*d, "config.eval");
    s.read("batch_size", c.eval.batch_size);
    s.read("multi_query", c.eval.multi_query);
    std::string pool = to_string(c.eval.pool);
    s.read("pool", pool);
    c.eval.pool = parse_pool_mode(pool);
    if (const json* r = s.child("rerank")) {
      Section rs(*r, "config.eval.rerank");
      rs.read("enabled", c.eval.rerank);
      rs.read("k1", c.eval.rerank_params.k1);
      rs.read("k2", c.eval.rerank_params.k2);
      rs.read("lambda", c.eval.rerank_params.lambda);
      rs.finish();
    }
    s.finish();
  }
  std::string variant;
  top.read("variant", variant);
  if (!variant.empty()) c.variant = parse_ablation_variant(variant);
  if (const json* p = top.child("pretrained")) {
    Section s(*p, "config.pretrained");
    std::string archive;
    std::string mapping;
    s.read("archive", archive);
    s.read("mapping", mapping);
    s.finish();
    if (archive.empty()) throw ConfigError("config 'config.pretrained.archive' is required");
    c.pretrained = PretrainedConfig{archive, mapping};
  }
  top.finish();
  if (c.variant) c.train = make_ablation_config(*c.variant, c.train);
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  const fs::path base = path.parent_path();
  auto resolve = [&](fs::path& p) {
    if (!p.empty() && p.is_relative()) p = (base / p).lexically_normal();
  };
  resolve(c.dataset_root);
  if (c.pretrained) {
    resolve(c.pretrained->archive);
    resolve(c.pretrained->mapping);
  }
  return c;
}

RunConfig desk_run_config(const fs::path& dataset_root) {
  RunConfig c;
  c.dataset_root = dataset_root;
  c.train.model.backbone = BackboneDepth::kTiny;
  c.train.model.num_classes = 0;  // taken from the training split
  c.train.sampler = {4, 4, 0};
  c.train.epochs = 100;
  c.train.lr_schedule = {{0, 0.01}, {60, 1e-3}, {80, 1e-4}};
  c.train.max_steps = 200;
  c.train.checkpoint_every = 25;
  c.eval.batch_size = 16;
  return c;
}

}  // namespace mgn
