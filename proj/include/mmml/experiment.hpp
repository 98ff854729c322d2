#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mmml/data.hpp"
#include "mmml/metrics.hpp"
#include "mmml/model.hpp"
#include "mmml/training.hpp"

namespace mmml {

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  GeneratorConfig generator;
  std::optional<std::filesystem::path> data_path;
  std::array<double, 3> split_fractions{0.7, 0.15, 0.15};
  std::uint64_t split_seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::filesystem::path out_dir = "out";
};

/// Parses a JSON config document; absent keys keep the values in `base`.
///
///   {"model":   {"d_model", "num_heads", "fusion_layers", "d_ff", "feature_encoder_layers",
///                "variant", "fusion", "positional_encoding"},
///    "train":   {"learning_rate", "batch_size", "patience", "max_epochs", "weight_decay",
///                "betas": [b1, b2], "eps", "alphas": [a, t, f], "loss"},
///    "data":    {"path", "n_samples", "style", "d_in_text", "d_in_audio", "min_length", "max_length",
///                "sigma_t", "sigma_a", "sigma_e", "min_dialogue", "max_dialogue", "rho",
///                "modality_labels", "seed", "split": [train, val, test], "split_seed"},
///    "context": {"method", "text_window", "audio_window"},
///    "seeds":   [n, ...],
///    "out":     "dir"}
ExperimentConfig experiment_from_json(const std::string& text, ExperimentConfig base = {});
std::string experiment_to_json(const ExperimentConfig& config);

/// Dataset for one run: the data file if configured, else synthetic data with
/// generator seed offset by `run_seed`.
std::vector<UtteranceSample> load_or_generate(const ExperimentConfig& config, std::uint64_t run_seed);

/// Context assembly (per the model's context config) followed by the split.
DataSplit prepare_splits(const ExperimentConfig& config, const std::vector<UtteranceSample>& samples);

/// Sets the model's input widths from the first sample.
void adopt_input_widths(ModelConfig& model, const std::vector<UtteranceSample>& samples);

EvalPairs head_pairs(const MmmlModel& model, const std::vector<UtteranceSample>& samples, Head head,
                     std::size_t batch_size = 16);

struct RunResult {
  MmmlModel model;
  TrainHistory history;
  DataSplit data;
};

/// Initializes with `run_seed`, trains on train/val and returns the best model.
RunResult run_training(ExperimentConfig config, const std::vector<UtteranceSample>& samples, std::uint64_t run_seed);

// ---- ablations --------------------------------------------------------------

enum class Suite { fusion, restoration, multiloss, context };

std::string to_string(Suite suite);
Suite parse_suite(const std::string& text);

struct ArmSpec {
  std::string name;
  std::function<void(ExperimentConfig&)> configure;
  bool duplicate_labels = false;
  std::vector<Head> heads{Head::fused};
};

std::vector<ArmSpec> suite_arms(Suite suite);

struct AblationRow {
  std::string arm;
  Head head = Head::fused;
  std::optional<std::uint64_t> seed;  // empty for mean rows
  MetricsReport report;
  std::size_t parameter_count = 0;
  std::size_t epochs = 0;
};

struct AblationResult {
  Suite suite = Suite::fusion;
  std::vector<AblationRow> seed_rows;
  std::vector<AblationRow> mean_rows;

  const AblationRow* mean(const std::string& arm, Head head = Head::fused) const;
  std::string to_csv() const;
  std::string to_json() const;
};

/// Mean of every metric over the given rows; a metric absent in any row is absent.
MetricsReport mean_report(const std::vector<const MetricsReport*>& reports);

using ProgressFn = std::function<void(const std::string&)>;

/// Runs every arm for every seed on shared per-seed data.
AblationResult run_ablation(Suite suite, const ExperimentConfig& config, const ProgressFn& progress = {});
AblationResult run_arms(Suite suite, const std::vector<ArmSpec>& arms, const ExperimentConfig& config,
                        const ProgressFn& progress = {});

// ---- gradient checks --------------------------------------------------------

struct GradcheckEntry {
  std::string component;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

inline constexpr double kGradcheckTolerance = 1e-5;

/// Central-difference checks (h = 1e-5) of every differentiable operation and
/// of the full multi-loss model (d_model 8, 2 heads, 2 fusion layers, d_ff 16, 2 samples).
std::vector<GradcheckEntry> run_gradcheck(std::uint64_t seed = 0);

}  // namespace mmml
