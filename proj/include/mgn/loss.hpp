#ifndef MGN_LOSS_HPP
#define MGN_LOSS_HPP

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mgn/error.hpp"
#include "mgn/model.hpp"

namespace mgn {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Mean over the batch of -log softmax(W f_i)[y_i] with bias-free logits.
/// `features` is [N x d], `weight` is [C x d]. Gradients are written (not
/// accumulated) when the output pointers are non-null.
template <typename Scalar>
Scalar softmax_loss(const Matrix<Scalar>& features, std::span<const int> labels, const Matrix<Scalar>& weight,
                    Matrix<Scalar>* grad_features = nullptr, Matrix<Scalar>* grad_weight = nullptr) {
  const Eigen::Index n = features.rows();
  const Eigen::Index classes = weight.rows();
  if (weight.cols() != features.cols()) {
    throw ShapeError("softmax_loss: feature dim " + std::to_string(features.cols()) + " vs weight dim " +
                     std::to_string(weight.cols()));
  }
  if (static_cast<Eigen::Index>(labels.size()) != n) throw ShapeError("softmax_loss: label count mismatch");
  for (int y : labels) {
    if (y < 0 || y >= classes) throw InputError("softmax_loss: label " + std::to_string(y) + " out of range");
  }
  if (n == 0) {
    if (grad_features != nullptr) grad_features->setZero(0, features.cols());
    if (grad_weight != nullptr) grad_weight->setZero(weight.rows(), weight.cols());
    return Scalar(0);
  }
  Matrix<Scalar> logits = features * weight.transpose();  // [N x C]
  Scalar loss = 0;
  Matrix<Scalar> grad_logits(n, classes);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar peak = logits.row(i).maxCoeff();
    const auto shifted = (logits.row(i).array() - peak).eval();
    const Scalar sum = shifted.exp().sum();
    loss += std::log(sum) - shifted(labels[i]);
    grad_logits.row(i) = (shifted.exp() / sum).matrix();
    grad_logits(i, labels[i]) -= Scalar(1);
  }
  grad_logits /= static_cast<Scalar>(n);
  if (grad_features != nullptr) *grad_features = grad_logits * weight;
  if (grad_weight != nullptr) *grad_weight = grad_logits.transpose() * features;
  return loss / static_cast<Scalar>(n);
}

/// Hardest positive / negative chosen for each anchor.
struct TripletMining {
  std::vector<int> hardest_positive;
  std::vector<int> hardest_negative;
  std::vector<bool> active;
};

/// Batch-hard triplet loss with Euclidean distances, summed over anchors:
///   sum_a [margin + max_{p: y_p = y_a, p != a} |f_a - f_p| - min_{n: y_n != y_a} |f_a - f_n|]_+
/// Ties resolve to the lowest batch index. Every anchor needs another sample of
/// its identity and a sample of another identity.
template <typename Scalar>
Scalar batch_hard_triplet(const Matrix<Scalar>& features, std::span<const int> labels, Scalar margin,
                          Matrix<Scalar>* grad_features = nullptr, TripletMining* mining = nullptr) {
  const Eigen::Index n = features.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n) throw ShapeError("batch_hard_triplet: label count mismatch");
  if (!(margin > Scalar(0))) throw InputError("batch_hard_triplet: margin must be positive");

  Matrix<Scalar> dist(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    dist(i, i) = Scalar(0);
    for (Eigen::Index j = i + 1; j < n; ++j) {
      dist(i, j) = dist(j, i) = (features.row(i) - features.row(j)).norm();
    }
  }

  if (grad_features != nullptr) grad_features->setZero(n, features.cols());
  if (mining != nullptr) {
    mining->hardest_positive.assign(n, -1);
    mining->hardest_negative.assign(n, -1);
    mining->active.assign(n, false);
  }

  Scalar loss = 0;
  for (Eigen::Index a = 0; a < n; ++a) {
    Eigen::Index pos = -1;
    Eigen::Index neg = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) {
        if (pos < 0 || dist(a, j) > dist(a, pos)) pos = j;
      } else if (neg < 0 || dist(a, j) < dist(a, neg)) {
        neg = j;
      }
    }
    if (pos < 0 || neg < 0) {
      throw InputError("batch_hard_triplet: anchor " + std::to_string(a) +
                       " lacks a positive or negative (need >= 2 identities with >= 2 samples each)");
    }
    const Scalar term = margin + dist(a, pos) - dist(a, neg);
    if (mining != nullptr) {
      mining->hardest_positive[a] = static_cast<int>(pos);
      mining->hardest_negative[a] = static_cast<int>(neg);
    }
    if (term <= Scalar(0)) continue;
    loss += term;
    if (mining != nullptr) mining->active[a] = true;
    if (grad_features != nullptr) {
      if (dist(a, pos) > Scalar(0)) {
        const auto unit = ((features.row(a) - features.row(pos)) / dist(a, pos)).eval();
        grad_features->row(a) += unit;
        grad_features->row(pos) -= unit;
      }
      if (dist(a, neg) > Scalar(0)) {
        const auto unit = ((features.row(a) - features.row(neg)) / dist(a, neg)).eval();
        grad_features->row(a) -= unit;
        grad_features->row(neg) += unit;
      }
    }
  }
  return loss;
}

struct LossConfig {
  double margin = 1.2;
  bool enable_triplet = true;
  double softmax_weight = 1.0;
  double triplet_weight = 1.0;

  bool operator==(const LossConfig&) const = default;
};

enum class LossKind { kSoftmax, kTriplet };

std::string to_string(LossKind kind);

/// One supervisory signal: a loss kind applied to one named feature.
struct LossTarget {
  LossKind kind;
  std::string feature;
};

struct LossTerm {
  LossKind kind;
  std::string feature;
  double value = 0;
  double weight = 1;
};

struct LossReport {
  double total = 0;
  std::vector<LossTerm> terms;

  std::size_t count(LossKind kind) const;
  /// "softmax:z_g@global" style keys, in routing order.
  std::vector<std::string> keys() const;
};

/// Supervisory signals for a model/loss configuration. With the metric loss
/// enabled: softmax on every non-reduced global and every reduced part feature,
/// triplet on every reduced global. Without it: softmax on every reduced feature.
std::vector<LossTarget> loss_targets(const ModelConfig& model, const LossConfig& loss);

/// Gradients produced by route_losses.
struct LossGradients {
  EmbeddingBundle features;
  std::map<std::string, RowMatrixXf> heads;
};

/// Evaluates every routed loss on the bundle. When `grads` is non-null it receives
/// weighted gradients with respect to the bundle features and each head weight.
LossReport route_losses(const EmbeddingBundle& bundle, std::span<const int> labels,
                        const std::map<std::string, ClassifierHead>& heads, const ModelConfig& model,
                        const LossConfig& config, LossGradients* grads = nullptr);

}  // namespace mgn

#endif  // MGN_LOSS_HPP
