#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmml/data.hpp"

namespace mmml {

struct EvalPairs {
  std::vector<double> predictions;
  std::vector<double> labels;
  TaskStyle style = TaskStyle::mosi;
};

struct BinaryScore {
  double accuracy = 0.0;
  double f1 = 0.0;  // support-weighted average over the two classes
};

/// Zero counts as positive on both sides.
BinaryScore has0_binary(const EvalPairs& pairs);
/// Pairs whose label is exactly zero are dropped; a value is positive iff > 0.
BinaryScore non0_binary(const EvalPairs& pairs);
/// Clamp to [-(k-1)/2, (k-1)/2], round half away from zero, compare. k is 5 or 7.
double acc_k_mosi(const EvalPairs& pairs, int k);
/// SIMS-style ordinal bins at +-0.1 (k=3) and +-0.1, +-0.7 (k=5); k=2 splits at 0.
double sims_acc(const EvalPairs& pairs, int k);
double mae(const EvalPairs& pairs);
double pearson(const EvalPairs& pairs);

/// Class index of a SIMS-style value under the k-class binning.
int sims_class(double value, int k);
/// Class of a MOSI-style value under the k-class clamp-and-round rule.
int mosi_class(double value, int k);

/// Ordered metric fields; an absent value means the metric is undefined on
/// this data (never reported as zero).
struct MetricsReport {
  TaskStyle style = TaskStyle::mosi;
  std::vector<std::pair<std::string, std::optional<double>>> fields;

  std::optional<double> get(const std::string& name) const;
  std::string to_json() const;
  std::string csv_header() const;
  std::string csv_row() const;
};

/// MOSI-style: has0_acc2, has0_f1, non0_acc2, non0_f1, acc5, acc7, mae, corr.
/// SIMS-style: acc2, acc3, acc5, f1, mae, corr.
MetricsReport full_report(const EvalPairs& pairs);

}  // namespace mmml
