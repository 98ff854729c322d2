#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mmml/data.hpp"
#include "mmml/model.hpp"

namespace mmml {

enum class LossMode { multi, single };

std::string to_string(LossMode mode);
LossMode parse_loss_mode(const std::string& text);

/// Per-head loss weights, ordered (audio, text, fused).
struct LossWeights {
  double audio = 1.0;
  double text = 1.0;
  double fused = 1.0;

  bool operator==(const LossWeights&) const = default;
};

enum class Head { fused, text, audio };

std::string to_string(Head head);
Head parse_head(const std::string& text);

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t patience = 8;
  std::size_t max_epochs = 100;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  LossWeights alphas;
  LossMode loss_mode = LossMode::multi;
  std::uint64_t seed = 0;

  /// (0, 0, 1) in single mode, `alphas` otherwise.
  LossWeights effective_alphas() const;
  /// Head whose validation MAE is reported: fused unless its weight is zero.
  Head monitored_head() const;
  void validate() const;
};

/// mean over the batch of  sum_m alpha_m * (y_m - target_m)^2.
Tensor multi_loss(const std::vector<PredictionTensors>& preds, const Targets& targets, const LossWeights& alphas);
/// mean over the batch of (y_fused - target_fused)^2.
Tensor single_loss(const std::vector<PredictionTensors>& preds, const Targets& targets);

struct AdamState {
  std::size_t step = 0;
  std::map<std::string, std::vector<double>> m, v;
};

/// Decoupled weight decay (p -= lr*wd*p) followed by a bias-corrected Adam
/// update from each parameter's accumulated gradient.
void adamw_step(const std::vector<NamedTensor>& params, AdamState& state, const TrainConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_mae = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based
  std::string stop_reason;     // "early_stopping" or "max_epochs"

  bool operator==(const TrainHistory& other) const;
};

std::string history_csv(const TrainHistory& history);

/// Trains in place and leaves the parameters of the best validation epoch in
/// `model`. Batches come from a seeded per-epoch shuffle of `train_set`.
TrainHistory train(MmmlModel& model, const std::vector<UtteranceSample>& train_set,
                   const std::vector<UtteranceSample>& val_set, const TrainConfig& config);

/// Loss of `model` over a whole dataset under the given weights.
double evaluate_loss(const MmmlModel& model, const std::vector<UtteranceSample>& samples, const LossWeights& alphas,
                     std::size_t batch_size = 16);

/// Predictions of one head paired with that head's target.
struct HeadOutputs {
  std::vector<double> predictions;
  std::vector<double> targets;
};

HeadOutputs head_outputs(const MmmlModel& model, const std::vector<UtteranceSample>& samples, Head head,
                         std::size_t batch_size = 16);

/// Gradient of every parameter under `loss_fn`, in parameters() order.
std::vector<std::vector<double>> parameter_gradients(const MmmlModel& model, const Batch& batch,
                                                     const std::function<Tensor(const std::vector<PredictionTensors>&,
                                                                                const Targets&)>& loss_fn);

/// True when multi_loss with alphas (0,0,1) and single_loss give gradients
/// within 1e-12 of each other for every parameter.
bool grads_equal_under_alpha_zero(const MmmlModel& model, const Batch& batch);

}  // namespace mmml
