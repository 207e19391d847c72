#include "mgn/model.hpp"

#include <charconv>
#include <set>
#include <utility>

#include "mgn/error.hpp"
#include "mgn/ops.hpp"

namespace mgn {

BackboneSpec BackboneSpec::resnet50() { return BackboneSpec{}; }

BackboneSpec BackboneSpec::tiny() { return BackboneSpec{8, {4, 8, 16, 32}, {1, 1, 2, 1}}; }

BackboneSpec BackboneSpec::of(BackboneDepth depth) {
  return depth == BackboneDepth::kTiny ? tiny() : resnet50();
}

BranchConfig BranchConfig::global() { return BranchConfig{"global", 1, 2, 256}; }

BranchConfig BranchConfig::part(int num_parts) {
  return BranchConfig{"part" + std::to_string(num_parts), num_parts, 1, 256};
}

ModelConfig ModelConfig::canonical(int num_classes) {
  ModelConfig config;
  config.branches = {BranchConfig::global(), BranchConfig::part(2), BranchConfig::part(3)};
  config.num_classes = num_classes;
  return config;
}

SplitPoint parse_split_landmark(const std::string& landmark, const BackboneSpec& spec) {
  auto fail = [&]() -> ConfigError {
    return ConfigError("unknown backbone landmark '" + landmark +
                       "' (expected resS or resS_B with S in 2..4 and B a block index of stage S)");
  };
  if (landmark.size() < 4 || landmark.compare(0, 3, "res") != 0) throw fail();
  const char* begin = landmark.data() + 3;
  const char* end = landmark.data() + landmark.size();
  int stage = 0;
  auto [p, ec] = std::from_chars(begin, end, stage);
  if (ec != std::errc() || stage < 2 || stage > 4) throw fail();
  SplitPoint split{stage, spec.stage_depth(stage)};
  if (p == end) return split;
  if (*p != '_') throw fail();
  int block = 0;
  auto [q, ec2] = std::from_chars(p + 1, end, block);
  if (ec2 != std::errc() || q != end || block < 1 || block > spec.stage_depth(stage)) throw fail();
  split.blocks = block;
  return split;
}

void validate(const ModelConfig& config) {
  if (config.branches.empty()) throw ConfigError("model: at least one branch is required");
  if (config.num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
  if (config.input_height < 32 || config.input_width < 32 || config.input_height % 32 != 0 ||
      config.input_width % 32 != 0) {
    throw ConfigError("model: input size must be a positive multiple of 32");
  }
  const BackboneSpec spec = BackboneSpec::of(config.backbone);
  parse_split_landmark(config.split_after, spec);
  std::set<std::string> names;
  for (const auto& b : config.branches) {
    if (b.name.empty() || b.name.find_first_of("@. ") != std::string::npos) {
      throw ConfigError("model: invalid branch name '" + b.name + "'");
    }
    if (!names.insert(b.name).second) throw ConfigError("model: duplicate branch name '" + b.name + "'");
    if (b.num_parts < 1) throw ConfigError("model: branch '" + b.name + "' needs num_parts >= 1");
    if (b.final_stage_stride != 1 && b.final_stage_stride != 2) {
      throw ConfigError("model: branch '" + b.name + "' final_stage_stride must be 1 or 2");
    }
    if (b.reduced_dim < 1) throw ConfigError("model: branch '" + b.name + "' reduced_dim must be >= 1");
    const int map_h = config.input_height / (16 * b.final_stage_stride);
    if (map_h % b.num_parts != 0) {
      throw ConfigError("model: branch '" + b.name + "' map height " + std::to_string(map_h) +
                        " is not divisible into " + std::to_string(b.num_parts) + " stripes");
    }
  }
}

std::string feature_name(FeatureKind kind, const std::string& branch, int part) {
  switch (kind) {
    case FeatureKind::kGlobalRaw:
      return "z_g@" + branch;
    case FeatureKind::kGlobal:
      return "f_g@" + branch;
    case FeatureKind::kPart:
      return "f_p" + std::to_string(part) + "@" + branch;
  }
  return {};
}

// --- EmbeddingBundle -------------------------------------------------------

namespace {

const Eigen::MatrixXf* find_feature(const EmbeddingBundle& bundle, const std::string& name) {
  for (const auto& b : bundle.branches) {
    if (name == feature_name(FeatureKind::kGlobalRaw, b.branch)) return &b.global_raw;
    if (name == feature_name(FeatureKind::kGlobal, b.branch)) return &b.global;
    for (std::size_t i = 0; i < b.parts.size(); ++i) {
      if (name == feature_name(FeatureKind::kPart, b.branch, static_cast<int>(i) + 1)) return &b.parts[i];
    }
  }
  return nullptr;
}

}  // namespace

int EmbeddingBundle::batch() const {
  return branches.empty() ? 0 : static_cast<int>(branches.front().global.rows());
}

const Eigen::MatrixXf& EmbeddingBundle::feature(const std::string& name) const {
  const Eigen::MatrixXf* f = find_feature(*this, name);
  if (f == nullptr) throw InputError("embedding bundle has no feature '" + name + "'");
  return *f;
}

Eigen::MatrixXf& EmbeddingBundle::feature(const std::string& name) {
  return const_cast<Eigen::MatrixXf&>(std::as_const(*this).feature(name));
}

bool EmbeddingBundle::has_feature(const std::string& name) const { return find_feature(*this, name) != nullptr; }

std::vector<std::string> EmbeddingBundle::reduced_feature_names() const {
  std::vector<std::string> names;
  for (const auto& b : branches) {
    names.push_back(feature_name(FeatureKind::kGlobal, b.branch));
    for (std::size_t i = 0; i < b.parts.size(); ++i) {
      names.push_back(feature_name(FeatureKind::kPart, b.branch, static_cast<int>(i) + 1));
    }
  }
  return names;
}

int EmbeddingBundle::reduced_count() const {
  int count = 0;
  for (const auto& b : branches) count += 1 + static_cast<int>(b.parts.size());
  return count;
}

Eigen::MatrixXf EmbeddingBundle::concatenated() const {
  Eigen::Index dim = 0;
  for (const auto& b : branches) {
    dim += b.global.cols();
    for (const auto& p : b.parts) dim += p.cols();
  }
  Eigen::MatrixXf out(batch(), dim);
  Eigen::Index col = 0;
  for (const auto& b : branches) {
    out.middleCols(col, b.global.cols()) = b.global;
    col += b.global.cols();
    for (const auto& p : b.parts) {
      out.middleCols(col, p.cols()) = p;
      col += p.cols();
    }
  }
  return out;
}

EmbeddingBundle EmbeddingBundle::zeros_like(const EmbeddingBundle& other) {
  EmbeddingBundle out;
  for (const auto& b : other.branches) {
    BranchEmbedding z;
    z.branch = b.branch;
    z.global_raw = Eigen::MatrixXf::Zero(b.global_raw.rows(), b.global_raw.cols());
    z.global = Eigen::MatrixXf::Zero(b.global.rows(), b.global.cols());
    for (const auto& p : b.parts) z.parts.push_back(Eigen::MatrixXf::Zero(p.rows(), p.cols()));
    out.branches.push_back(std::move(z));
  }
  return out;
}

Eigen::MatrixXf pooled_to_matrix(const Tensor4f& pooled) {
  Eigen::MatrixXf m(pooled.batch(), pooled.channels());
  for (int n = 0; n < pooled.batch(); ++n) {
    for (int c = 0; c < pooled.channels(); ++c) m(n, c) = pooled(n, c, 0, 0);
  }
  return m;
}

Tensor4f matrix_to_pooled(const Eigen::MatrixXf& m) {
  Tensor4f t(static_cast<int>(m.rows()), static_cast<int>(m.cols()), 1, 1);
  for (Eigen::Index n = 0; n < m.rows(); ++n) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) t(static_cast<int>(n), static_cast<int>(c), 0, 0) = m(n, c);
  }
  return t;
}

std::string backbone_tensor_name(const std::string& param_name) {
  static const std::string kPrefix = "branches.";
  if (param_name.compare(0, kPrefix.size(), kPrefix) != 0) return param_name;
  const auto dot = param_name.find('.', kPrefix.size());
  if (dot == std::string::npos) return param_name;
  return param_name.substr(dot + 1);
}

// --- Model -----------------------------------------------------------------

struct Model::Branch {
  BranchConfig config;
  std::vector<Block> blocks;
  Reduction reduce_global;
  std::vector<Reduction> reduce_parts;

  Tensor4f map;
  std::vector<std::int32_t> global_argmax;
  std::vector<Shape4> stripe_shapes;
  std::vector<std::vector<std::int32_t>> part_argmax;

  Tensor4f run_blocks(Tensor4f x, Mode mode) {
    for (auto& b : blocks) x = b.block.forward(x, mode);
    return x;
  }

  Tensor4f infer_blocks(Tensor4f x) const {
    for (const auto& b : blocks) x = b.block.infer(x);
    return x;
  }

  BranchEmbedding embed(const Tensor4f& trunk_out, Mode mode) {
    map = run_blocks(trunk_out, mode);
    BranchEmbedding e;
    e.branch = config.name;
    const Tensor4f pooled = global_max_pool(map, &global_argmax);
    e.global_raw = pooled_to_matrix(pooled);
    e.global = pooled_to_matrix(reduce_global.forward(pooled, mode));
    part_argmax.assign(reduce_parts.size(), {});
    stripe_shapes.clear();
    if (!reduce_parts.empty()) {
      auto stripes = partition_stripes(map, config.num_parts);
      for (std::size_t i = 0; i < stripes.size(); ++i) {
        stripe_shapes.push_back(stripes[i].shape());
        const Tensor4f part_pooled = global_max_pool(stripes[i], &part_argmax[i]);
        e.parts.push_back(pooled_to_matrix(reduce_parts[i].forward(part_pooled, mode)));
      }
    }
    return e;
  }

  BranchEmbedding embed_infer(const Tensor4f& trunk_out) const {
    const Tensor4f m = infer_blocks(trunk_out);
    BranchEmbedding e;
    e.branch = config.name;
    const Tensor4f pooled = global_max_pool<float>(m, nullptr);
    e.global_raw = pooled_to_matrix(pooled);
    e.global = pooled_to_matrix(reduce_global.infer(pooled));
    if (!reduce_parts.empty()) {
      auto stripes = partition_stripes(m, config.num_parts);
      for (std::size_t i = 0; i < stripes.size(); ++i) {
        e.parts.push_back(pooled_to_matrix(reduce_parts[i].infer(global_max_pool<float>(stripes[i], nullptr))));
      }
    }
    return e;
  }

  Tensor4f backward(const BranchEmbedding& grad) {
    Tensor4f grad_pooled = matrix_to_pooled(grad.global_raw);
    grad_pooled.array() += reduce_global.backward(matrix_to_pooled(grad.global)).array();
    Tensor4f grad_map = global_max_pool_backward(grad_pooled, map.shape(), std::span<const std::int32_t>(global_argmax));
    if (!reduce_parts.empty()) {
      std::vector<Tensor4f> stripe_grads;
      for (std::size_t i = 0; i < reduce_parts.size(); ++i) {
        const Tensor4f g = reduce_parts[i].backward(matrix_to_pooled(grad.parts[i]));
        stripe_grads.push_back(
            global_max_pool_backward(g, stripe_shapes[i], std::span<const std::int32_t>(part_argmax[i])));
      }
      grad_map.array() += concat_stripes(std::span<const Tensor4f>(stripe_grads)).array();
    }
    for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) grad_map = it->block.backward(grad_map);
    return grad_map;
  }

  void visit(const ParameterVisitor& fn) {
    const std::string prefix = "branches." + config.name + ".";
    for (auto& b : blocks) b.block.visit(prefix + b.name + ".", fn);
    reduce_global.visit(prefix + "reduce_g.", fn);
    for (std::size_t i = 0; i < reduce_parts.size(); ++i) {
      reduce_parts[i].visit(prefix + "reduce_p" + std::to_string(i + 1) + ".", fn);
    }
  }

  void visit(const ConstParameterVisitor& fn) const {
    const std::string prefix = "branches." + config.name + ".";
    for (const auto& b : blocks) b.block.visit(prefix + b.name + ".", fn);
    reduce_global.visit(prefix + "reduce_g.", fn);
    for (std::size_t i = 0; i < reduce_parts.size(); ++i) {
      reduce_parts[i].visit(prefix + "reduce_p" + std::to_string(i + 1) + ".", fn);
    }
  }
};

Model::~Model() = default;
Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  validate(config_);
  spec_ = BackboneSpec::of(config_.backbone);
  const SplitPoint split = parse_split_landmark(config_.split_after, spec_);

  std::mt19937_64 seeder(seed);
  std::mt19937_64 trunk_rng(seeder());
  const std::uint64_t branch_seed = seeder();
  std::mt19937_64 head_rng(seeder());

  stem_ = Stem(spec_.stem_width);
  stem_.init(trunk_rng);
  int channels = spec_.stem_width;
  auto stage_stride = [](int stage) { return stage == 2 ? 1 : 2; };

  for (int stage = 2; stage <= split.stage; ++stage) {
    const int count = stage == split.stage ? split.blocks : spec_.stage_depth(stage);
    for (int b = 0; b < count; ++b) {
      Bottleneck block(channels, spec_.widths[stage - 2], b == 0 ? stage_stride(stage) : 1);
      block.init(trunk_rng);
      channels = block.out_channels();
      trunk_.push_back({"res" + std::to_string(stage) + "." + std::to_string(b), std::move(block)});
    }
  }
  const int trunk_channels = channels;

  for (const auto& bc : config_.branches) {
    auto branch = std::make_unique<Branch>();
    branch->config = bc;
    std::mt19937_64 rng(branch_seed);  // identical backbone init in every branch
    int ch = trunk_channels;
    for (int stage = split.stage; stage <= 5; ++stage) {
      const int first = stage == split.stage ? split.blocks : 0;
      for (int b = first; b < spec_.stage_depth(stage); ++b) {
        int stride = 1;
        if (b == 0) stride = stage == 5 ? bc.final_stage_stride : stage_stride(stage);
        Bottleneck block(ch, spec_.widths[stage - 2], stride);
        block.init(rng);
        ch = block.out_channels();
        branch->blocks.push_back({"res" + std::to_string(stage) + "." + std::to_string(b), std::move(block)});
      }
    }
    branch->reduce_global = Reduction(ch, bc.reduced_dim);
    branch->reduce_global.init(head_rng);
    if (bc.num_parts > 1) {
      for (int i = 0; i < bc.num_parts; ++i) {
        branch->reduce_parts.emplace_back(ch, bc.reduced_dim);
        branch->reduce_parts.back().init(head_rng);
      }
    }
    branches_.push_back(std::move(branch));
  }

  constexpr float kHeadStd = 0.001F;
  const int raw_dim = spec_.stage_out_channels(5);
  for (const auto& bc : config_.branches) {
    const bool raw = config_.global_head_input == GlobalHeadInput::kNonReduced;
    const std::string global = feature_name(raw ? FeatureKind::kGlobalRaw : FeatureKind::kGlobal, bc.name);
    heads_[global] = ClassifierHead(config_.num_classes, raw ? raw_dim : bc.reduced_dim);
    heads_[global].init(head_rng, kHeadStd);
    if (bc.num_parts > 1) {
      for (int i = 1; i <= bc.num_parts; ++i) {
        const std::string part = feature_name(FeatureKind::kPart, bc.name, i);
        heads_[part] = ClassifierHead(config_.num_classes, bc.reduced_dim);
        heads_[part].init(head_rng, kHeadStd);
      }
    }
  }
}

Model build_model(const ModelConfig& config, std::uint64_t seed) { return Model(config, seed); }

void Model::check_input(const Tensor4f& images) const {
  if (images.channels() != 3 || images.height() != config_.input_height || images.width() != config_.input_width) {
    throw ShapeError("model expects images [N,3," + std::to_string(config_.input_height) + "," +
                     std::to_string(config_.input_width) + "], got " + images.shape().str());
  }
}

EmbeddingBundle Model::forward(const Tensor4f& images, Mode mode) {
  if (mode == Mode::kEval) return infer(images);
  check_input(images);
  Tensor4f x = stem_.forward(images, mode);
  for (auto& b : trunk_) x = b.block.forward(x, mode);
  EmbeddingBundle bundle;
  for (auto& branch : branches_) bundle.branches.push_back(branch->embed(x, mode));
  cached_batch_ = images.batch();
  return bundle;
}

EmbeddingBundle Model::infer(const Tensor4f& images) const {
  check_input(images);
  Tensor4f x = stem_.infer(images);
  for (const auto& b : trunk_) x = b.block.infer(x);
  EmbeddingBundle bundle;
  for (const auto& branch : branches_) bundle.branches.push_back(branch->embed_infer(x));
  return bundle;
}

void Model::backward(const EmbeddingBundle& grad) {
  if (cached_batch_ == 0) throw InputError("backward: no training-mode forward pass to differentiate");
  if (grad.branches.size() != branches_.size()) throw ShapeError("backward: gradient bundle has wrong branch count");
  if (grad.batch() != cached_batch_) {
    throw ShapeError("backward: gradient batch " + std::to_string(grad.batch()) + " does not match forward batch " +
                     std::to_string(cached_batch_));
  }
  Tensor4f trunk_grad;
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    Tensor4f g = branches_[i]->backward(grad.branches[i]);
    if (trunk_grad.empty()) {
      trunk_grad = std::move(g);
    } else {
      trunk_grad.array() += g.array();
    }
  }
  for (auto it = trunk_.rbegin(); it != trunk_.rend(); ++it) trunk_grad = it->block.backward(trunk_grad);
  stem_.backward(trunk_grad);
}

Tensor4f Model::branch_map(const Tensor4f& images, const std::string& branch) const {
  check_input(images);
  for (const auto& b : branches_) {
    if (b->config.name != branch) continue;
    Tensor4f x = stem_.infer(images);
    for (const auto& t : trunk_) x = t.block.infer(x);
    return b->infer_blocks(x);
  }
  std::string valid;
  for (const auto& name : branch_names()) valid += (valid.empty() ? "" : ", ") + name;
  throw ConfigError("unknown branch '" + branch + "' (valid: " + valid + ")");
}

std::vector<std::string> Model::branch_names() const {
  std::vector<std::string> names;
  for (const auto& b : branches_) names.push_back(b->config.name);
  return names;
}

bool Model::has_head(const std::string& feature) const { return heads_.count(feature) > 0; }

const ClassifierHead& Model::head(const std::string& feature) const {
  auto it = heads_.find(feature);
  if (it == heads_.end()) throw ConfigError("no classifier head for feature '" + feature + "'");
  return it->second;
}

ClassifierHead& Model::head(const std::string& feature) {
  return const_cast<ClassifierHead&>(std::as_const(*this).head(feature));
}

void Model::visit_parameters(const ParameterVisitor& fn) {
  stem_.visit("stem.", fn);
  for (auto& b : trunk_) b.block.visit(b.name + ".", fn);
  for (auto& branch : branches_) branch->visit(fn);
  for (auto& [name, head] : heads_) head.visit("heads." + name + ".", fn);
}

void Model::visit_parameters(const ConstParameterVisitor& fn) const {
  stem_.visit("stem.", fn);
  for (const auto& b : trunk_) b.block.visit(b.name + ".", fn);
  for (const auto& branch : branches_) std::as_const(*branch).visit(fn);
  for (const auto& [name, head] : heads_) head.visit("heads." + name + ".", fn);
}

void Model::zero_grad() {
  visit_parameters([](const std::string&, Parameter& p) { p.zero_grad(); });
}

std::size_t Model::num_parameters() const {
  std::size_t count = 0;
  visit_parameters([&](const std::string&, const Parameter& p) {
    if (p.learnable()) count += static_cast<std::size_t>(p.numel());
  });
  return count;
}

int Model::feature_dim() const {
  int dim = 0;
  for (const auto& b : config_.branches) dim += b.reduced_dim * (1 + (b.num_parts > 1 ? b.num_parts : 0));
  return dim;
}

}  // namespace mgn
