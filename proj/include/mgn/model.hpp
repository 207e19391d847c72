#ifndef MGN_MODEL_HPP
#define MGN_MODEL_HPP

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mgn/layers.hpp"
#include "mgn/tensor.hpp"

namespace mgn {

enum class BackboneDepth { kResNet50, kTiny };

/// Stage layout of a bottleneck ResNet. Stage s (2..5) has `widths[s-2]` bottleneck
/// channels, `4 * widths[s-2]` output channels and `depths[s-2]` blocks.
struct BackboneSpec {
  int stem_width = 64;
  std::array<int, 4> widths{64, 128, 256, 512};
  std::array<int, 4> depths{3, 4, 6, 3};

  static BackboneSpec resnet50();
  static BackboneSpec tiny();
  static BackboneSpec of(BackboneDepth depth);

  int stage_out_channels(int stage) const { return widths[stage - 2] * Bottleneck::kExpansion; }
  int stage_depth(int stage) const { return depths[stage - 2]; }
};

struct BranchConfig {
  std::string name;
  int num_parts = 1;
  int final_stage_stride = 2;
  int reduced_dim = 256;

  static BranchConfig global();
  static BranchConfig part(int num_parts);

  bool operator==(const BranchConfig&) const = default;
};

/// Where the classifier attached to each branch's global feature reads from.
/// Joint training classifies the non-reduced pooled feature; without the metric
/// loss the classifier moves to the reduced feature.
enum class GlobalHeadInput { kNonReduced, kReduced };

/// Backbone landmark after which the network forks into branches: the first
/// `blocks` bottlenecks of stage `stage` stay in the shared trunk.
struct SplitPoint {
  int stage = 4;
  int blocks = 1;
};

SplitPoint parse_split_landmark(const std::string& landmark, const BackboneSpec& spec);

struct ModelConfig {
  std::vector<BranchConfig> branches;
  std::string split_after = "res4_1";
  BackboneDepth backbone = BackboneDepth::kResNet50;
  int num_classes = 751;
  int input_height = 384;
  int input_width = 128;
  GlobalHeadInput global_head_input = GlobalHeadInput::kNonReduced;

  /// Global + Part-2 + Part-3 branches on a ResNet-50 split after res4_1.
  static ModelConfig canonical(int num_classes);

  bool operator==(const ModelConfig&) const = default;
};

/// Throws ConfigError describing the first problem found.
void validate(const ModelConfig& config);

enum class FeatureKind { kGlobalRaw, kGlobal, kPart };

/// "z_g@global", "f_g@part2", "f_p1@part3" (parts are 1-based).
std::string feature_name(FeatureKind kind, const std::string& branch, int part = 0);

struct BranchEmbedding {
  std::string branch;
  Eigen::MatrixXf global_raw;          // z_g, [N x C_backbone]
  Eigen::MatrixXf global;              // f_g, [N x reduced_dim]
  std::vector<Eigen::MatrixXf> parts;  // f_p_i, [N x reduced_dim] each
};

/// All per-branch features of a batch of images. Gradients with respect to the
/// features use the same structure.
struct EmbeddingBundle {
  std::vector<BranchEmbedding> branches;

  int batch() const;
  const Eigen::MatrixXf& feature(const std::string& name) const;
  Eigen::MatrixXf& feature(const std::string& name);
  bool has_feature(const std::string& name) const;

  /// Reduced features in persisted order: per branch, f_g then f_p1..f_pN.
  std::vector<std::string> reduced_feature_names() const;
  /// Reduced features concatenated in persisted order, [N x D].
  Eigen::MatrixXf concatenated() const;
  int reduced_count() const;

  static EmbeddingBundle zeros_like(const EmbeddingBundle& other);
};

class Model {
 public:
  /// Builds the network with deterministic random initialization. All branches
  /// receive the same initial backbone weights; reductions and heads are independent.
  explicit Model(ModelConfig config, std::uint64_t seed = 0);
  ~Model();
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;

  const ModelConfig& config() const { return config_; }
  const BackboneSpec& backbone() const { return spec_; }

  EmbeddingBundle forward(const Tensor4f& images, Mode mode);
  /// Inference-mode forward; read-only, safe for concurrent callers.
  EmbeddingBundle infer(const Tensor4f& images) const;
  /// Back-propagates gradients with respect to every bundle feature through the
  /// most recent training-mode forward, accumulating parameter gradients.
  void backward(const EmbeddingBundle& grad);

  /// Final feature map of a branch before pooling, inference mode.
  Tensor4f branch_map(const Tensor4f& images, const std::string& branch) const;
  std::vector<std::string> branch_names() const;

  bool has_head(const std::string& feature) const;
  const ClassifierHead& head(const std::string& feature) const;
  ClassifierHead& head(const std::string& feature);
  const std::map<std::string, ClassifierHead>& heads() const { return heads_; }

  void visit_parameters(const ParameterVisitor& fn);
  void visit_parameters(const ConstParameterVisitor& fn) const;
  void zero_grad();
  std::size_t num_parameters() const;
  /// Length of the concatenated reduced feature.
  int feature_dim() const;

 private:
  struct Branch;
  struct Block {
    std::string name;
    Bottleneck block;
  };

  void check_input(const Tensor4f& images) const;

  ModelConfig config_;
  BackboneSpec spec_;
  Stem stem_;
  std::vector<Block> trunk_;
  std::vector<std::unique_ptr<Branch>> branches_;
  std::map<std::string, ClassifierHead> heads_;
  int cached_batch_ = 0;  // batch of the last training forward, 0 if none
};

Model build_model(const ModelConfig& config, std::uint64_t seed = 0);

/// Canonical backbone name of a model parameter: strips the "branches.<name>."
/// prefix so every branch copy maps onto the same pretrained tensor.
std::string backbone_tensor_name(const std::string& param_name);

/// Conversions between pooled [N, C, 1, 1] tensors and [N x C] matrices.
Eigen::MatrixXf pooled_to_matrix(const Tensor4f& pooled);
Tensor4f matrix_to_pooled(const Eigen::MatrixXf& m);

}  // namespace mgn

#endif  // MGN_MODEL_HPP
