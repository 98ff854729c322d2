#include "mmml/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "mmml/errors.hpp"

namespace mmml {

namespace {

void require_pairs(const EvalPairs& pairs, const char* metric) {
  if (pairs.predictions.empty()) throw ContractError(std::string(metric) + ": no pairs");
  if (pairs.predictions.size() != pairs.labels.size()) {
    throw ContractError(std::string(metric) + ": " + std::to_string(pairs.predictions.size()) + " predictions but " +
                        std::to_string(pairs.labels.size()) + " labels");
  }
}

// Accuracy and support-weighted F1 over two classes (zero_division -> 0).
BinaryScore binary_score(const std::vector<bool>& pred, const std::vector<bool>& truth) {
  const std::size_t n = truth.size();
  std::size_t correct = 0;
  double weighted_f1 = 0.0;
  for (bool cls : {false, true}) {
    std::size_t tp = 0, fp = 0, fn = 0, support = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (truth[i] == cls) ++support;
      if (pred[i] == cls && truth[i] == cls) ++tp;
      if (pred[i] == cls && truth[i] != cls) ++fp;
      if (pred[i] != cls && truth[i] == cls) ++fn;
    }
    const double denom = static_cast<double>(2 * tp + fp + fn);
    const double f1 = denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
    weighted_f1 += f1 * static_cast<double>(support) / static_cast<double>(n);
  }
  for (std::size_t i = 0; i < n; ++i) correct += pred[i] == truth[i] ? 1 : 0;
  return {static_cast<double>(correct) / static_cast<double>(n), weighted_f1};
}

template <typename Classify>
double class_accuracy(const EvalPairs& pairs, Classify classify) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pairs.labels.size(); ++i) {
    correct += classify(pairs.predictions[i]) == classify(pairs.labels[i]) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.labels.size());
}

}  // namespace

BinaryScore has0_binary(const EvalPairs& pairs) {
  require_pairs(pairs, "has0_binary");
  std::vector<bool> pred, truth;
  for (std::size_t i = 0; i < pairs.labels.size(); ++i) {
    pred.push_back(pairs.predictions[i] >= 0.0);
    truth.push_back(pairs.labels[i] >= 0.0);
  }
  return binary_score(pred, truth);
}

BinaryScore non0_binary(const EvalPairs& pairs) {
  require_pairs(pairs, "non0_binary");
  std::vector<bool> pred, truth;
  for (std::size_t i = 0; i < pairs.labels.size(); ++i) {
    if (pairs.labels[i] == 0.0) continue;
    pred.push_back(pairs.predictions[i] > 0.0);
    truth.push_back(pairs.labels[i] > 0.0);
  }
  if (truth.empty()) throw UndefinedMetricError("non0_binary: every label is zero");
  return binary_score(pred, truth);
}

int mosi_class(double value, int k) {
  if (k != 5 && k != 7) throw ContractError("acc_k_mosi: k must be 5 or 7");
  const double bound = (k - 1) / 2.0;
  return static_cast<int>(std::round(std::clamp(value, -bound, bound)));
}

double acc_k_mosi(const EvalPairs& pairs, int k) {
  require_pairs(pairs, "acc_k_mosi");
  return class_accuracy(pairs, [k](double v) { return mosi_class(v, k); });
}

int sims_class(double value, int k) {
  const double v = std::clamp(value, -1.0, 1.0);
  switch (k) {
    case 2: return v < 0.0 ? 0 : 1;
    case 3:
      if (v <= -0.1) return 0;
      if (v < 0.1) return 1;
      return 2;
    case 5:
      if (v <= -0.7) return 0;
      if (v <= -0.1) return 1;
      if (v < 0.1) return 2;
      if (v < 0.7) return 3;
      return 4;
    default: throw ContractError("sims_acc: k must be 2, 3 or 5");
  }
}

double sims_acc(const EvalPairs& pairs, int k) {
  require_pairs(pairs, "sims_acc");
  return class_accuracy(pairs, [k](double v) { return sims_class(v, k); });
}

double mae(const EvalPairs& pairs) {
  require_pairs(pairs, "mae");
  double total = 0.0;
  for (std::size_t i = 0; i < pairs.labels.size(); ++i) total += std::abs(pairs.predictions[i] - pairs.labels[i]);
  return total / static_cast<double>(pairs.labels.size());
}

double pearson(const EvalPairs& pairs) {
  require_pairs(pairs, "pearson");
  const auto n = static_cast<double>(pairs.labels.size());
  double mp = 0.0, ml = 0.0;
  for (std::size_t i = 0; i < pairs.labels.size(); ++i) {
    mp += pairs.predictions[i];
    ml += pairs.labels[i];
  }
  mp /= n;
  ml /= n;
  double cov = 0.0, vp = 0.0, vl = 0.0;
  for (std::size_t i = 0; i < pairs.labels.size(); ++i) {
    const double dp = pairs.predictions[i] - mp;
    const double dl = pairs.labels[i] - ml;
    cov += dp * dl;
    vp += dp * dp;
    vl += dl * dl;
  }
  if (vp == 0.0 || vl == 0.0) throw UndefinedMetricError("pearson: zero variance");
  return std::clamp(cov / std::sqrt(vp * vl), -1.0, 1.0);
}

std::optional<double> MetricsReport::get(const std::string& name) const {
  for (const auto& [key, value] : fields) {
    if (key == name) return value;
  }
  return std::nullopt;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["style"] = to_string(style);
  for (const auto& [key, value] : fields) {
    if (value) j[key] = *value;
    else j[key] = nullptr;
  }
  if (auto m = get("mae")) j["mae_x100"] = *m * 100.0;
  return j.dump();
}

std::string MetricsReport::csv_header() const {
  std::string out;
  for (const auto& [key, value] : fields) out += (out.empty() ? "" : ",") + key;
  return out + ",mae_x100";
}

std::string MetricsReport::csv_row() const {
  std::string out;
  char buf[64];
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ",";
    if (fields[i].second) {
      std::snprintf(buf, sizeof(buf), "%.17g", *fields[i].second);
      out += buf;
    }
  }
  out += ",";
  if (auto m = get("mae")) {
    std::snprintf(buf, sizeof(buf), "%.17g", *m * 100.0);
    out += buf;
  }
  return out;
}

namespace {

template <typename F>
std::optional<double> defined(F f) {
  try {
    return f();
  } catch (const UndefinedMetricError&) {
    return std::nullopt;
  }
}

}  // namespace

MetricsReport full_report(const EvalPairs& pairs) {
  require_pairs(pairs, "full_report");
  MetricsReport r;
  r.style = pairs.style;
  if (pairs.style == TaskStyle::mosi) {
    const auto has0 = has0_binary(pairs);
    std::optional<BinaryScore> n0;
    try {
      n0 = non0_binary(pairs);
    } catch (const UndefinedMetricError&) {
    }
    r.fields = {{"has0_acc2", has0.accuracy},
                {"has0_f1", has0.f1},
                {"non0_acc2", n0 ? std::optional<double>(n0->accuracy) : std::nullopt},
                {"non0_f1", n0 ? std::optional<double>(n0->f1) : std::nullopt},
                {"acc5", acc_k_mosi(pairs, 5)},
                {"acc7", acc_k_mosi(pairs, 7)},
                {"mae", mae(pairs)},
                {"corr", defined([&] { return pearson(pairs); })}};
  } else {
    const auto bin = has0_binary(pairs);
    r.fields = {{"acc2", sims_acc(pairs, 2)},
                {"acc3", sims_acc(pairs, 3)},
                {"acc5", sims_acc(pairs, 5)},
                {"f1", bin.f1},
                {"mae", mae(pairs)},
                {"corr", defined([&] { return pearson(pairs); })}};
  }
  return r;
}

}  // namespace mmml
