#include "mgn/layers.hpp"

#include <cmath>
#include <numeric>

namespace mgn {

namespace {

Eigen::Index product(const std::vector<int>& dims) {
  return std::accumulate(dims.begin(), dims.end(), Eigen::Index{1},
                         [](Eigen::Index acc, int d) { return acc * static_cast<Eigen::Index>(d); });
}

void fill_normal(Eigen::VectorXf& v, std::mt19937_64& rng, float stddev) {
  std::normal_distribution<float> dist(0.0F, stddev);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = dist(rng);
}

Tensor4f relu_copy(Tensor4f x) {
  relu_inplace(x);
  return x;
}

}  // namespace

Parameter::Parameter(std::vector<int> dims, ParamKind k)
    : shape(std::move(dims)), kind(k), value(Eigen::VectorXf::Zero(product(shape))) {}

Eigen::VectorXf& Parameter::ensure_grad() {
  if (grad.size() != value.size()) grad = Eigen::VectorXf::Zero(value.size());
  return grad;
}

void Parameter::zero_grad() {
  if (grad.size() == value.size()) grad.setZero();
}

// --- Conv2d ----------------------------------------------------------------

Conv2d::Conv2d(int in_channels, int out_channels, ConvGeometry geometry)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      geometry_(geometry),
      weight_({out_channels, in_channels, geometry.kernel, geometry.kernel}, ParamKind::kWeight) {}

ConstMatrixView<float> Conv2d::weight_matrix() const {
  return ConstMatrixView<float>(weight_.value.data(), out_channels_,
                                static_cast<Eigen::Index>(in_channels_) * geometry_.kernel * geometry_.kernel);
}

Tensor4f Conv2d::forward(const Tensor4f& x, Mode mode) {
  if (mode == Mode::kTrain) cached_input_ = x;
  return conv2d(x, weight_matrix(), geometry_);
}

Tensor4f Conv2d::infer(const Tensor4f& x) const { return conv2d(x, weight_matrix(), geometry_); }

Tensor4f Conv2d::backward(const Tensor4f& grad_out, bool need_input_grad) {
  auto& grad = weight_.ensure_grad();
  MatrixView<float> grad_w(grad.data(), out_channels_,
                           static_cast<Eigen::Index>(in_channels_) * geometry_.kernel * geometry_.kernel);
  return conv2d_backward(cached_input_, weight_matrix(), geometry_, grad_out, grad_w, need_input_grad);
}

void Conv2d::init_kaiming(std::mt19937_64& rng, bool fan_out) {
  const int k2 = geometry_.kernel * geometry_.kernel;
  const float fan = static_cast<float>((fan_out ? out_channels_ : in_channels_) * k2);
  fill_normal(weight_.value, rng, std::sqrt(2.0F / fan));
}

void Conv2d::visit(const std::string& prefix, const ParameterVisitor& fn) { fn(prefix + "weight", weight_); }
void Conv2d::visit(const std::string& prefix, const ConstParameterVisitor& fn) const {
  fn(prefix + "weight", weight_);
}

// --- BatchNorm2d -----------------------------------------------------------

BatchNorm2d::BatchNorm2d(int channels)
    : gamma_({channels}, ParamKind::kNormAffine),
      beta_({channels}, ParamKind::kNormAffine),
      running_mean_({channels}, ParamKind::kBuffer),
      running_var_({channels}, ParamKind::kBuffer) {
  gamma_.value.setOnes();
  running_var_.value.setOnes();
}

Tensor4f BatchNorm2d::forward(const Tensor4f& x, Mode mode) {
  if (mode == Mode::kEval) return infer(x);
  return batch_norm_train<float>(x, gamma_.value, beta_.value, running_mean_.value, running_var_.value, kMomentum,
                                 kEps, &cache_);
}

Tensor4f BatchNorm2d::infer(const Tensor4f& x) const {
  return batch_norm_eval<float>(x, gamma_.value, beta_.value, running_mean_.value, running_var_.value, kEps);
}

Tensor4f BatchNorm2d::backward(const Tensor4f& grad_out) {
  return batch_norm_backward<float>(grad_out, gamma_.value, cache_, gamma_.ensure_grad(), beta_.ensure_grad());
}

void BatchNorm2d::visit(const std::string& prefix, const ParameterVisitor& fn) {
  fn(prefix + "weight", gamma_);
  fn(prefix + "bias", beta_);
  fn(prefix + "running_mean", running_mean_);
  fn(prefix + "running_var", running_var_);
}

void BatchNorm2d::visit(const std::string& prefix, const ConstParameterVisitor& fn) const {
  fn(prefix + "weight", gamma_);
  fn(prefix + "bias", beta_);
  fn(prefix + "running_mean", running_mean_);
  fn(prefix + "running_var", running_var_);
}

// --- Bottleneck ------------------------------------------------------------

Bottleneck::Bottleneck(int in_channels, int width, int stride)
    : conv1_(in_channels, width, {1, 1, 0}),
      bn1_(width),
      conv2_(width, width, {3, stride, 1}),
      bn2_(width),
      conv3_(width, width * kExpansion, {1, 1, 0}),
      bn3_(width * kExpansion) {
  if (stride != 1 || in_channels != width * kExpansion) {
    down_conv_.emplace(in_channels, width * kExpansion, ConvGeometry{1, stride, 0});
    down_bn_.emplace(width * kExpansion);
  }
}

Tensor4f Bottleneck::forward(const Tensor4f& x, Mode mode) {
  if (mode == Mode::kEval) return infer(x);
  Tensor4f a1 = bn1_.forward(conv1_.forward(x, mode), mode);
  relu_inplace(a1);
  Tensor4f a2 = bn2_.forward(conv2_.forward(a1, mode), mode);
  relu_inplace(a2);
  Tensor4f out = bn3_.forward(conv3_.forward(a2, mode), mode);
  if (down_conv_) {
    out.array() += down_bn_->forward(down_conv_->forward(x, mode), mode).array();
  } else {
    out.array() += x.array();
  }
  relu_inplace(out);
  act1_ = std::move(a1);
  act2_ = std::move(a2);
  output_ = out;
  return out;
}

Tensor4f Bottleneck::infer(const Tensor4f& x) const {
  Tensor4f out = bn3_.infer(conv3_.infer(relu_copy(bn2_.infer(conv2_.infer(relu_copy(bn1_.infer(conv1_.infer(x))))))));
  if (down_conv_) {
    out.array() += down_bn_->infer(down_conv_->infer(x)).array();
  } else {
    out.array() += x.array();
  }
  relu_inplace(out);
  return out;
}

Tensor4f Bottleneck::backward(const Tensor4f& grad_out) {
  Tensor4f g = grad_out;
  relu_backward_inplace(g, output_);
  Tensor4f shortcut = down_conv_ ? down_conv_->backward(down_bn_->backward(g)) : g;
  Tensor4f g2 = conv3_.backward(bn3_.backward(g));
  relu_backward_inplace(g2, act2_);
  Tensor4f g1 = conv2_.backward(bn2_.backward(g2));
  relu_backward_inplace(g1, act1_);
  Tensor4f grad_in = conv1_.backward(bn1_.backward(g1));
  grad_in.array() += shortcut.array();
  return grad_in;
}

void Bottleneck::init(std::mt19937_64& rng) {
  conv1_.init_kaiming(rng, true);
  conv2_.init_kaiming(rng, true);
  conv3_.init_kaiming(rng, true);
  if (down_conv_) down_conv_->init_kaiming(rng, true);
}

void Bottleneck::visit(const std::string& prefix, const ParameterVisitor& fn) {
  conv1_.visit(prefix + "conv1.", fn);
  bn1_.visit(prefix + "bn1.", fn);
  conv2_.visit(prefix + "conv2.", fn);
  bn2_.visit(prefix + "bn2.", fn);
  conv3_.visit(prefix + "conv3.", fn);
  bn3_.visit(prefix + "bn3.", fn);
  if (down_conv_) {
    down_conv_->visit(prefix + "downsample.conv.", fn);
    down_bn_->visit(prefix + "downsample.bn.", fn);
  }
}

void Bottleneck::visit(const std::string& prefix, const ConstParameterVisitor& fn) const {
  conv1_.visit(prefix + "conv1.", fn);
  bn1_.visit(prefix + "bn1.", fn);
  conv2_.visit(prefix + "conv2.", fn);
  bn2_.visit(prefix + "bn2.", fn);
  conv3_.visit(prefix + "conv3.", fn);
  bn3_.visit(prefix + "bn3.", fn);
  if (down_conv_) {
    down_conv_->visit(prefix + "downsample.conv.", fn);
    down_bn_->visit(prefix + "downsample.bn.", fn);
  }
}

// --- Stem ------------------------------------------------------------------

Stem::Stem(int width) : conv_(3, width, {7, 2, 3}), bn_(width) {}

Tensor4f Stem::forward(const Tensor4f& x, Mode mode) {
  if (mode == Mode::kEval) return infer(x);
  activation_ = bn_.forward(conv_.forward(x, mode), mode);
  relu_inplace(activation_);
  return max_pool2d(activation_, kPool, &pool_argmax_);
}

Tensor4f Stem::infer(const Tensor4f& x) const {
  return max_pool2d(relu_copy(bn_.infer(conv_.infer(x))), kPool, nullptr);
}

void Stem::backward(const Tensor4f& grad_out) {
  Tensor4f g = max_pool2d_backward(grad_out, activation_.shape(), std::span<const std::int32_t>(pool_argmax_));
  relu_backward_inplace(g, activation_);
  conv_.backward(bn_.backward(g), /*need_input_grad=*/false);
}

void Stem::init(std::mt19937_64& rng) { conv_.init_kaiming(rng, true); }

void Stem::visit(const std::string& prefix, const ParameterVisitor& fn) {
  conv_.visit(prefix + "conv.", fn);
  bn_.visit(prefix + "bn.", fn);
}

void Stem::visit(const std::string& prefix, const ConstParameterVisitor& fn) const {
  conv_.visit(prefix + "conv.", fn);
  bn_.visit(prefix + "bn.", fn);
}

// --- Reduction -------------------------------------------------------------

Reduction::Reduction(int in_channels, int out_channels)
    : conv_(in_channels, out_channels, {1, 1, 0}), bn_(out_channels) {}

Tensor4f Reduction::forward(const Tensor4f& x, Mode mode) {
  if (mode == Mode::kEval) return infer(x);
  output_ = bn_.forward(conv_.forward(x, mode), mode);
  relu_inplace(output_);
  return output_;
}

Tensor4f Reduction::infer(const Tensor4f& x) const { return relu_copy(bn_.infer(conv_.infer(x))); }

Tensor4f Reduction::backward(const Tensor4f& grad_out) {
  Tensor4f g = grad_out;
  relu_backward_inplace(g, output_);
  return conv_.backward(bn_.backward(g));
}

void Reduction::init(std::mt19937_64& rng) { conv_.init_kaiming(rng, false); }

void Reduction::visit(const std::string& prefix, const ParameterVisitor& fn) {
  conv_.visit(prefix + "conv.", fn);
  bn_.visit(prefix + "bn.", fn);
}

void Reduction::visit(const std::string& prefix, const ConstParameterVisitor& fn) const {
  conv_.visit(prefix + "conv.", fn);
  bn_.visit(prefix + "bn.", fn);
}

// --- ClassifierHead --------------------------------------------------------

ClassifierHead::ClassifierHead(int num_classes, int dim) : weight_({num_classes, dim}, ParamKind::kWeight) {}

Eigen::Map<const RowMatrixXf> ClassifierHead::weight() const {
  return Eigen::Map<const RowMatrixXf>(weight_.value.data(), weight_.shape[0], weight_.shape[1]);
}

Eigen::Map<RowMatrixXf> ClassifierHead::mutable_weight() {
  return Eigen::Map<RowMatrixXf>(weight_.value.data(), weight_.shape[0], weight_.shape[1]);
}

Eigen::Map<RowMatrixXf> ClassifierHead::weight_grad() {
  return Eigen::Map<RowMatrixXf>(weight_.ensure_grad().data(), weight_.shape[0], weight_.shape[1]);
}

void ClassifierHead::init(std::mt19937_64& rng, float stddev) { fill_normal(weight_.value, rng, stddev); }

void ClassifierHead::visit(const std::string& prefix, const ParameterVisitor& fn) { fn(prefix + "weight", weight_); }
void ClassifierHead::visit(const std::string& prefix, const ConstParameterVisitor& fn) const {
  fn(prefix + "weight", weight_);
}

Eigen::VectorXf classifier_logits(const ClassifierHead& head, const Eigen::Ref<const Eigen::VectorXf>& feature) {
  if (feature.size() != head.dim()) {
    throw ShapeError("classifier_logits: feature has " + std::to_string(feature.size()) + " dims, head expects " +
                     std::to_string(head.dim()));
  }
  return head.weight() * feature;
}

}  // namespace mgn
