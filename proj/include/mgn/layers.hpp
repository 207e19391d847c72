#ifndef MGN_LAYERS_HPP
#define MGN_LAYERS_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mgn/ops.hpp"
#include "mgn/tensor.hpp"

namespace mgn {

enum class Mode { kTrain, kEval };

enum class ParamKind {
  kWeight,      // convolution / classifier weights, subject to weight decay
  kNormAffine,  // batch-norm scale and shift
  kBuffer,      // batch-norm running statistics (not optimized)
};

/// A named, shaped parameter. Gradients are allocated lazily on first use so
/// inference-only models do not pay for them.
struct Parameter {
  std::vector<int> shape;
  ParamKind kind = ParamKind::kWeight;
  Eigen::VectorXf value;
  Eigen::VectorXf grad;

  Parameter() = default;
  Parameter(std::vector<int> dims, ParamKind k);

  Eigen::Index numel() const { return value.size(); }
  bool learnable() const { return kind != ParamKind::kBuffer; }
  Eigen::VectorXf& ensure_grad();
  void zero_grad();
};

using ParameterVisitor = std::function<void(const std::string& name, Parameter& param)>;
using ConstParameterVisitor = std::function<void(const std::string& name, const Parameter& param)>;

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, ConvGeometry geometry);

  Tensor4f forward(const Tensor4f& x, Mode mode);
  Tensor4f infer(const Tensor4f& x) const;
  Tensor4f backward(const Tensor4f& grad_out, bool need_input_grad = true);

  /// Kaiming-normal initialization using fan-out (backbone) or fan-in (reduction layers).
  void init_kaiming(std::mt19937_64& rng, bool fan_out);
  void visit(const std::string& prefix, const ParameterVisitor& fn);
  void visit(const std::string& prefix, const ConstParameterVisitor& fn) const;

  int in_channels() const { return in_channels_; }
  int out_channels() const { return out_channels_; }
  const ConvGeometry& geometry() const { return geometry_; }
  ConstMatrixView<float> weight_matrix() const;
  Parameter& weight() { return weight_; }

 private:
  int in_channels_ = 0;
  int out_channels_ = 0;
  ConvGeometry geometry_;
  Parameter weight_;
  Tensor4f cached_input_;
};

class BatchNorm2d {
 public:
  static constexpr float kMomentum = 0.1F;
  static constexpr float kEps = 1e-5F;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels);

  Tensor4f forward(const Tensor4f& x, Mode mode);
  Tensor4f infer(const Tensor4f& x) const;
  Tensor4f backward(const Tensor4f& grad_out);

  void visit(const std::string& prefix, const ParameterVisitor& fn);
  void visit(const std::string& prefix, const ConstParameterVisitor& fn) const;

 private:
  Parameter gamma_;
  Parameter beta_;
  Parameter running_mean_;
  Parameter running_var_;
  BatchNormCache<float> cache_;
};

/// ResNet bottleneck: 1x1 -> 3x3 (strided) -> 1x1 with an optional projection shortcut.
class Bottleneck {
 public:
  static constexpr int kExpansion = 4;

  Bottleneck() = default;
  Bottleneck(int in_channels, int width, int stride);

  Tensor4f forward(const Tensor4f& x, Mode mode);
  Tensor4f infer(const Tensor4f& x) const;
  Tensor4f backward(const Tensor4f& grad_out);

  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParameterVisitor& fn);
  void visit(const std::string& prefix, const ConstParameterVisitor& fn) const;

  int out_channels() const { return conv3_.out_channels(); }

 private:
  Conv2d conv1_;
  BatchNorm2d bn1_;
  Conv2d conv2_;
  BatchNorm2d bn2_;
  Conv2d conv3_;
  BatchNorm2d bn3_;
  std::optional<Conv2d> down_conv_;
  std::optional<BatchNorm2d> down_bn_;
  Tensor4f act1_;
  Tensor4f act2_;
  Tensor4f output_;
};

/// conv 7x7/2 -> BN -> ReLU -> max-pool 3x3/2.
class Stem {
 public:
  Stem() = default;
  explicit Stem(int width);

  Tensor4f forward(const Tensor4f& x, Mode mode);
  Tensor4f infer(const Tensor4f& x) const;
  void backward(const Tensor4f& grad_out);

  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParameterVisitor& fn);
  void visit(const std::string& prefix, const ConstParameterVisitor& fn) const;

 private:
  static constexpr ConvGeometry kPool{3, 2, 1};
  Conv2d conv_;
  BatchNorm2d bn_;
  Tensor4f activation_;
  std::vector<std::int32_t> pool_argmax_;
};

/// 1x1 convolution + BN + ReLU applied to a pooled [N, C, 1, 1] feature.
class Reduction {
 public:
  Reduction() = default;
  Reduction(int in_channels, int out_channels);

  Tensor4f forward(const Tensor4f& x, Mode mode);
  Tensor4f infer(const Tensor4f& x) const;
  Tensor4f backward(const Tensor4f& grad_out);

  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParameterVisitor& fn);
  void visit(const std::string& prefix, const ConstParameterVisitor& fn) const;

 private:
  Conv2d conv_;
  BatchNorm2d bn_;
  Tensor4f output_;
};

/// Bias-free linear classifier: logits = W f with W of shape [C, d].
class ClassifierHead {
 public:
  ClassifierHead() = default;
  ClassifierHead(int num_classes, int dim);

  int num_classes() const { return static_cast<int>(weight_.shape[0]); }
  int dim() const { return static_cast<int>(weight_.shape[1]); }

  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> weight() const;
  Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> mutable_weight();
  Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> weight_grad();

  void init(std::mt19937_64& rng, float stddev);
  void visit(const std::string& prefix, const ParameterVisitor& fn);
  void visit(const std::string& prefix, const ConstParameterVisitor& fn) const;

 private:
  Parameter weight_;
};

/// logits = W feature. Throws ShapeError on dimension mismatch.
Eigen::VectorXf classifier_logits(const ClassifierHead& head, const Eigen::Ref<const Eigen::VectorXf>& feature);

}  // namespace mgn

#endif  // MGN_LAYERS_HPP
