#include "mgn/loss.hpp"

namespace mgn {

std::string to_string(LossKind kind) { return kind == LossKind::kSoftmax ? "softmax" : "triplet"; }

std::size_t LossReport::count(LossKind kind) const {
  std::size_t c = 0;
  for (const auto& t : terms) c += t.kind == kind ? 1 : 0;
  return c;
}

std::vector<std::string> LossReport::keys() const {
  std::vector<std::string> out;
  out.reserve(terms.size());
  for (const auto& t : terms) out.push_back(to_string(t.kind) + ":" + t.feature);
  return out;
}

std::vector<LossTarget> loss_targets(const ModelConfig& model, const LossConfig& loss) {
  std::vector<LossTarget> targets;
  for (const auto& b : model.branches) {
    const FeatureKind global = loss.enable_triplet ? FeatureKind::kGlobalRaw : FeatureKind::kGlobal;
    targets.push_back({LossKind::kSoftmax, feature_name(global, b.name)});
    if (b.num_parts > 1) {
      for (int i = 1; i <= b.num_parts; ++i) targets.push_back({LossKind::kSoftmax, feature_name(FeatureKind::kPart, b.name, i)});
    }
  }
  if (loss.enable_triplet) {
    for (const auto& b : model.branches) targets.push_back({LossKind::kTriplet, feature_name(FeatureKind::kGlobal, b.name)});
  }
  return targets;
}

LossReport route_losses(const EmbeddingBundle& bundle, std::span<const int> labels,
                        const std::map<std::string, ClassifierHead>& heads, const ModelConfig& model,
                        const LossConfig& config, LossGradients* grads) {
  if (config.enable_triplet && !(config.margin > 0)) throw ConfigError("loss: margin must be > 0");
  const auto targets = loss_targets(model, config);
  if (grads != nullptr) {
    grads->features = EmbeddingBundle::zeros_like(bundle);
    grads->heads.clear();
  }
  LossReport report;
  for (const auto& target : targets) {
    const Eigen::MatrixXf& f = bundle.feature(target.feature);
    LossTerm term{target.kind, target.feature, 0.0, 1.0};
    Eigen::MatrixXf grad_f;
    if (target.kind == LossKind::kSoftmax) {
      auto it = heads.find(target.feature);
      if (it == heads.end()) throw ConfigError("loss routing: no classifier head for '" + target.feature + "'");
      const Eigen::MatrixXf w = it->second.weight();
      Eigen::MatrixXf grad_w;
      term.weight = config.softmax_weight;
      term.value = softmax_loss<float>(f, labels, w, grads ? &grad_f : nullptr, grads ? &grad_w : nullptr);
      if (grads != nullptr) grads->heads[target.feature] = RowMatrixXf(grad_w * static_cast<float>(term.weight));
    } else {
      term.weight = config.triplet_weight;
      term.value = batch_hard_triplet<float>(f, labels, static_cast<float>(config.margin), grads ? &grad_f : nullptr);
    }
    if (grads != nullptr) grads->features.feature(target.feature) += grad_f * static_cast<float>(term.weight);
    report.total += term.weight * term.value;
    report.terms.push_back(std::move(term));
  }
  return report;
}

}  // namespace mgn
