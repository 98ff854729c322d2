#include "mmml/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "mmml/errors.hpp"

namespace mmml {

std::string to_string(LossMode mode) { return mode == LossMode::multi ? "multi" : "single"; }

LossMode parse_loss_mode(const std::string& text) {
  if (text == "multi") return LossMode::multi;
  if (text == "single") return LossMode::single;
  throw ConfigError("unknown loss mode '" + text + "' (expected single|multi)");
}

std::string to_string(Head head) {
  switch (head) {
    case Head::fused: return "fused";
    case Head::text: return "text";
    case Head::audio: return "audio";
  }
  return "fused";
}

Head parse_head(const std::string& text) {
  if (text == "fused") return Head::fused;
  if (text == "text") return Head::text;
  if (text == "audio") return Head::audio;
  throw ConfigError("unknown head '" + text + "' (expected fused|text|audio)");
}

LossWeights TrainConfig::effective_alphas() const {
  return loss_mode == LossMode::single ? LossWeights{0.0, 0.0, 1.0} : alphas;
}

Head TrainConfig::monitored_head() const {
  const auto a = effective_alphas();
  if (a.fused > 0.0) return Head::fused;
  return a.text >= a.audio ? Head::text : Head::audio;
}

void TrainConfig::validate() const {
  if (patience == 0) throw ConfigError("patience must be at least 1");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
  if (!(learning_rate >= 0.0) || !(weight_decay >= 0.0)) throw ConfigError("learning rate and weight decay must be nonnegative");
  const auto a = effective_alphas();
  if (!(a.audio >= 0.0 && a.text >= 0.0 && a.fused >= 0.0)) throw ConfigError("loss weights must be nonnegative");
  if (a.audio + a.text + a.fused <= 0.0) throw ConfigError("at least one loss weight must be positive");
}

// ---- losses -----------------------------------------------------------------

namespace {

Tensor squared_error_sum(const std::vector<PredictionTensors>& preds, Tensor PredictionTensors::*field,
                         const std::vector<double>& targets) {
  std::vector<Tensor> ys;
  ys.reserve(preds.size());
  for (const auto& p : preds) ys.push_back(p.*field);
  Tensor y = concat(ys, 0);
  Tensor t = Tensor::from_data({targets.size(), 1}, targets);
  return sum(square(sub(y, t)));
}

}  // namespace

Tensor multi_loss(const std::vector<PredictionTensors>& preds, const Targets& targets, const LossWeights& alphas) {
  const std::size_t n = preds.size();
  if (n == 0) throw ContractError("multi_loss: no predictions");
  if (targets.fused.size() != n || targets.text.size() != n || targets.audio.size() != n) {
    throw ContractError("multi_loss: " + std::to_string(n) + " predictions but " +
                        std::to_string(targets.fused.size()) + " targets");
  }
  Tensor total;
  auto accumulate = [&](double alpha, Tensor PredictionTensors::*field, const std::vector<double>& t) {
    if (alpha == 0.0) return;
    Tensor term = scale(squared_error_sum(preds, field, t), alpha);
    total = total.defined() ? add(total, term) : term;
  };
  accumulate(alphas.audio, &PredictionTensors::y_audio, targets.audio);
  accumulate(alphas.text, &PredictionTensors::y_text, targets.text);
  accumulate(alphas.fused, &PredictionTensors::y_fused, targets.fused);
  if (!total.defined()) return Tensor::scalar(0.0);
  return scale(total, 1.0 / static_cast<double>(n));
}

Tensor single_loss(const std::vector<PredictionTensors>& preds, const Targets& targets) {
  const std::size_t n = preds.size();
  if (n == 0) throw ContractError("single_loss: no predictions");
  if (targets.fused.size() != n) throw ContractError("single_loss: prediction/target count mismatch");
  return scale(squared_error_sum(preds, &PredictionTensors::y_fused, targets.fused), 1.0 / static_cast<double>(n));
}

// ---- optimizer --------------------------------------------------------------

void adamw_step(const std::vector<NamedTensor>& params, AdamState& state, const TrainConfig& config) {
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (double g : p.node()->grad) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + name + "'");
    }
  }
  ++state.step;
  const double lr = config.learning_rate;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (const auto& [name, param] : params) {
    Tensor p = param;
    auto values = p.mutable_data();
    const std::vector<double> grad = p.grad();
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != values.size()) {
      m.assign(values.size(), 0.0);
      v.assign(values.size(), 0.0);
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] -= lr * config.weight_decay * values[i];
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      values[i] -= lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
  }
}

// ---- history ----------------------------------------------------------------

bool TrainHistory::operator==(const TrainHistory& other) const {
  if (best_epoch != other.best_epoch || stop_reason != other.stop_reason || epochs.size() != other.epochs.size()) {
    return false;
  }
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto& a = epochs[i];
    const auto& b = other.epochs[i];
    if (a.epoch != b.epoch || a.train_loss != b.train_loss || a.val_loss != b.val_loss || a.val_mae != b.val_mae) {
      return false;
    }
  }
  return true;
}

std::string history_csv(const TrainHistory& history) {
  std::ostringstream out;
  out << "epoch,train_loss,val_loss,val_mae\n";
  char buf[128];
  for (const auto& e : history.epochs) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss, e.val_loss, e.val_mae);
    out << buf;
  }
  return out.str();
}

// ---- evaluation helpers -----------------------------------------------------

double evaluate_loss(const MmmlModel& model, const std::vector<UtteranceSample>& samples, const LossWeights& alphas,
                     std::size_t batch_size) {
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& batch : pad_batch(samples, batch_size)) {
    total += multi_loss(forward(model, batch), batch.targets, alphas).item() * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(samples.size());
}

HeadOutputs head_outputs(const MmmlModel& model, const std::vector<UtteranceSample>& samples, Head head,
                         std::size_t batch_size) {
  NoGradGuard no_grad;
  HeadOutputs out;
  const auto preds = predict(model, samples, batch_size);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    switch (head) {
      case Head::fused:
        out.predictions.push_back(preds[i].y_fused);
        out.targets.push_back(samples[i].label_f);
        break;
      case Head::text:
        out.predictions.push_back(preds[i].y_text);
        out.targets.push_back(samples[i].target_text());
        break;
      case Head::audio:
        out.predictions.push_back(preds[i].y_audio);
        out.targets.push_back(samples[i].target_audio());
        break;
    }
  }
  return out;
}

namespace {

double mean_abs_error(const HeadOutputs& h) {
  double total = 0.0;
  for (std::size_t i = 0; i < h.predictions.size(); ++i) total += std::abs(h.predictions[i] - h.targets[i]);
  return total / static_cast<double>(h.predictions.size());
}

std::vector<std::vector<double>> snapshot(const MmmlModel& model) {
  std::vector<std::vector<double>> values;
  for (const auto& [name, t] : model.parameters()) values.emplace_back(t.data().begin(), t.data().end());
  return values;
}

void restore(const MmmlModel& model, const std::vector<std::vector<double>>& values) {
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(values[i].begin(), values[i].end(), params[i].second.mutable_data().begin());
  }
}

}  // namespace

TrainHistory train(MmmlModel& model, const std::vector<UtteranceSample>& train_set,
                   const std::vector<UtteranceSample>& val_set, const TrainConfig& config) {
  config.validate();
  if (train_set.empty()) throw ContractError("train: empty training split");
  if (val_set.empty()) throw ContractError("train: empty validation split");

  const LossWeights alphas = config.effective_alphas();
  const Head monitored = config.monitored_head();
  const auto params = model.parameters();
  AdamState state;
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainHistory history;
  double best_loss = std::numeric_limits<double>::infinity();
  auto best_params = snapshot(model);
  std::size_t since_best = 0;
  history.stop_reason = "max_epochs";

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<UtteranceSample> chunk;
      chunk.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) chunk.push_back(train_set[order[i]]);
      const Batch batch = make_batch(chunk);

      model.zero_grad();
      Tensor loss = multi_loss(forward(model, batch), batch.targets, alphas);
      loss_sum += loss.item() * static_cast<double>(batch.size());
      backward(loss);
      adamw_step(params, state, config);
    }

    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / static_cast<double>(train_set.size());
    record.val_loss = evaluate_loss(model, val_set, alphas, config.batch_size);
    record.val_mae = mean_abs_error(head_outputs(model, val_set, monitored, config.batch_size));
    history.epochs.push_back(record);

    if (record.val_loss < best_loss) {
      best_loss = record.val_loss;
      history.best_epoch = epoch;
      best_params = snapshot(model);
      since_best = 0;
    } else if (++since_best >= config.patience) {
      history.stop_reason = "early_stopping";
      break;
    }
  }
  restore(model, best_params);
  model.zero_grad();
  return history;
}

// ---- gradient comparison ----------------------------------------------------

std::vector<std::vector<double>> parameter_gradients(
    const MmmlModel& model, const Batch& batch,
    const std::function<Tensor(const std::vector<PredictionTensors>&, const Targets&)>& loss_fn) {
  model.zero_grad();
  backward(loss_fn(forward(model, batch), batch.targets));
  std::vector<std::vector<double>> grads;
  for (const auto& [name, t] : model.parameters()) grads.push_back(t.grad());
  model.zero_grad();
  return grads;
}

bool grads_equal_under_alpha_zero(const MmmlModel& model, const Batch& batch) {
  const auto multi = parameter_gradients(model, batch, [](const auto& p, const Targets& t) {
    return multi_loss(p, t, LossWeights{0.0, 0.0, 1.0});
  });
  const auto single = parameter_gradients(model, batch, [](const auto& p, const Targets& t) { return single_loss(p, t); });
  for (std::size_t i = 0; i < multi.size(); ++i) {
    for (std::size_t j = 0; j < multi[i].size(); ++j) {
      if (std::abs(multi[i][j] - single[i][j]) > 1e-12) return false;
    }
  }
  return true;
}

}  // namespace mmml
