#ifndef MGN_TRAIN_HPP
#define MGN_TRAIN_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mgn/data.hpp"
#include "mgn/loss.hpp"
#include "mgn/model.hpp"

namespace mgn {

struct LrStep {
  int epoch = 0;
  double lr = 0.01;

  bool operator==(const LrStep&) const = default;
};

struct TrainConfig {
  int epochs = 80;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<LrStep> lr_schedule{{0, 0.01}, {40, 1e-3}, {60, 1e-4}};
  /// Stop after this many optimizer steps (0 = run every epoch).
  int max_steps = 0;
  int checkpoint_every = 1;
  bool decay_norm_params = false;
  std::uint64_t seed = 0;
  SamplerConfig sampler;
  LossConfig loss;
  ModelConfig model = ModelConfig::canonical(751);
  LoaderConfig loader;

  bool operator==(const TrainConfig&) const = default;
};

void validate(const TrainConfig& config);

/// Piecewise-constant learning rate of `epoch` (0-based). Throws InputError
/// outside [0, epochs).
double lr_at(int epoch, const TrainConfig& config);

/// SGD with momentum and L2 weight decay (v = mu v + g + wd w; w -= lr v).
/// Batch-norm affine parameters are exempt from decay unless `decay_norm_params`.
class SgdMomentum {
 public:
  SgdMomentum(double momentum, double weight_decay, bool decay_norm_params);

  void step(Model& model, double lr);

  std::map<std::string, Eigen::VectorXf>& velocity() { return velocity_; }
  const std::map<std::string, Eigen::VectorXf>& velocity() const { return velocity_; }

 private:
  double momentum_;
  double weight_decay_;
  bool decay_norm_params_;
  std::map<std::string, Eigen::VectorXf> velocity_;
};

enum class AblationVariant { kCanonical, kWithoutPart3, kWithPart4, kPart2And4, kPart3And4, kWithoutTriplet };

/// Accepts "canonical", "w/o Part-3", "w/ Part-4", "Part2+4", "Part3+4", "w/o TP"
/// (case-insensitive, optional "MGN" prefix) and the slug forms wo-part3,
/// w-part4, part2+4, part3+4, wo-tp.
AblationVariant parse_ablation_variant(const std::string& name);
std::string to_string(AblationVariant variant);
std::vector<AblationVariant> all_ablation_variants();

/// `base` with the branch list and loss flags of the variant applied.
TrainConfig make_ablation_config(AblationVariant variant, TrainConfig base = {});

struct StepRecord {
  int epoch = 0;  // 0-based
  int step = 0;   // global optimizer step, 1-based
  double lr = 0;
  LossReport loss;
  double accuracy = 0;  // batch accuracy of the first branch's global classifier
};

/// Serializes a step as one JSON-lines record.
std::string to_json_line(const StepRecord& record, const std::string& config_hash);

/// Mutable training state: model, optimizer, sampler and RNG.
class Trainer {
 public:
  Trainer(TrainConfig config, Dataset dataset);

  /// One optimizer step on a freshly sampled batch.
  StepRecord step();
  /// Optimizer step on a caller-provided batch (labels must be dense class ids).
  StepRecord step_on(const Batch& batch);

  int epoch() const { return epoch_; }
  int global_step() const { return global_step_; }
  int steps_per_epoch() const { return sampler_.batches_per_epoch(); }
  double current_lr() const;
  void advance_epoch() { ++epoch_; }

  Model& model() { return model_; }
  const Model& model() const { return model_; }
  const TrainConfig& config() const { return config_; }
  const Dataset& dataset() const { return dataset_; }

  /// Writes `<dir>/model.bin`, `model.json`, `optimizer.bin` and `state.json`.
  void save_checkpoint(const std::filesystem::path& dir) const;
  /// Restores a checkpoint written under the same configuration; training
  /// continues at the epoch after the saved one.
  void load_checkpoint(const std::filesystem::path& dir);

 private:
  TrainConfig config_;
  Dataset dataset_;
  std::vector<ImageRecord> train_records_;
  Model model_;
  SgdMomentum optimizer_;
  PkSampler sampler_;
  std::mt19937_64 rng_;
  int epoch_ = 0;
  int global_step_ = 0;
};

struct TrainOptions {
  std::filesystem::path run_dir;  // empty: no files written
  std::optional<std::filesystem::path> resume_from;
  std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
  std::vector<StepRecord> history;
  std::filesystem::path last_checkpoint;
  int epochs_completed = 0;
};

/// Runs the full loop: per-step metrics to `<run_dir>/metrics.jsonl`, checkpoints
/// to `<run_dir>/checkpoints/epoch_NNNN`. Non-finite losses abort with NumericError
/// naming the offending term.
TrainResult train(Trainer& trainer, const TrainOptions& options);

/// Latest `epoch_NNNN` checkpoint under a run directory or checkpoint directory.
std::filesystem::path latest_checkpoint(const std::filesystem::path& run_or_checkpoints_dir);

/// Loads a model from a checkpoint directory (model.bin + model.json).
Model load_model_checkpoint(const std::filesystem::path& dir);

}  // namespace mgn

#endif  // MGN_TRAIN_HPP
