#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmml/tensor.hpp"

namespace mmml {

enum class TaskStyle { mosi, sims };

std::string to_string(TaskStyle style);
TaskStyle parse_task_style(const std::string& text);
/// Sentiment range bound: 3 for MOSI-style, 1 for SIMS-style.
double label_bound(TaskStyle style);

enum class ContextMethod { none, concatenation, independent };

std::string to_string(ContextMethod method);
ContextMethod parse_context_method(const std::string& text);

struct ContextConfig {
  ContextMethod method = ContextMethod::none;
  std::size_t text_window = 0;
  std::size_t audio_window = 0;

  std::size_t effective_text_window() const { return method == ContextMethod::none ? 0 : text_window; }
  std::size_t effective_audio_window() const { return method == ContextMethod::none ? 0 : audio_window; }
  bool operator==(const ContextConfig&) const = default;
};

struct UtteranceSample {
  std::string id;
  std::string dialogue_id;
  std::size_t turn_index = 0;
  Tensor text_seq;   // (L_t, d_in_text)
  Tensor audio_seq;  // (L_a, d_in_audio)
  double label_f = 0.0;
  std::optional<double> label_t;
  std::optional<double> label_a;
  TaskStyle style = TaskStyle::mosi;
  // Set by assemble_context with the independent method: preceding utterances'
  // sequences stacked time-wise.
  std::optional<Tensor> text_context;
  std::optional<Tensor> audio_context;

  double target_text() const { return label_t.value_or(label_f); }
  double target_audio() const { return label_a.value_or(label_f); }
};

bool samples_equal(const UtteranceSample& a, const UtteranceSample& b);

struct GeneratorConfig {
  std::size_t n_samples = 600;
  TaskStyle style = TaskStyle::mosi;
  std::size_t d_in_text = 8;
  std::size_t d_in_audio = 8;
  std::size_t min_length = 3;
  std::size_t max_length = 6;
  double sigma_text = 0.8;       // label noise of the text view
  double sigma_audio = 0.8;      // label noise of the audio view
  double sigma_embedding = 0.3;  // per-step, per-dimension embedding noise
  std::size_t min_dialogue = 4;
  std::size_t max_dialogue = 12;
  double rho = 0.0;  // AR(1) coefficient of the latent sentiment within a dialogue
  /// Emit label_t / label_a; defaults to true for SIMS-style data.
  std::optional<bool> modality_labels;
  std::uint64_t seed = 0;

  bool emits_modality_labels() const { return modality_labels.value_or(style == TaskStyle::sims); }
  void validate() const;
};

/// Synthetic dialogues. The latent sentiment of consecutive turns follows an
/// AR(1) process with Gaussian marginal N(0, B^2/3) (B the label bound), the
/// fused label is its clipped value, and each modality sees a noisy clipped
/// view y_m encoded along a fixed random unit direction with per-step noise.
std::vector<UtteranceSample> generate(const GeneratorConfig& config);

void save_jsonl(const std::vector<UtteranceSample>& samples, const std::filesystem::path& path);
std::vector<UtteranceSample> load_jsonl(const std::filesystem::path& path);

/// Attaches up to W_m preceding utterances of the same dialogue per modality.
/// Concatenation prepends them to the sequence; independent stores them in
/// text_context / audio_context. Context labels are never used.
std::vector<UtteranceSample> assemble_context(const std::vector<UtteranceSample>& samples,
                                              const ContextConfig& config);

struct Targets {
  std::vector<double> text;
  std::vector<double> audio;
  std::vector<double> fused;

  std::size_t size() const { return fused.size(); }
};

/// Padded (B, L, d) tensor of one modality plus its per-sample masks.
struct PaddedSequences {
  Tensor values;
  std::vector<Mask> masks;
};

struct Batch {
  PaddedSequences text;
  PaddedSequences audio;
  // Present when at least one sample carries a context attachment; samples
  // without one have an all-zero mask row.
  std::optional<PaddedSequences> text_context;
  std::optional<PaddedSequences> audio_context;
  Targets targets;

  std::size_t size() const { return targets.size(); }
};

Batch make_batch(const std::vector<UtteranceSample>& samples);
/// Consecutive chunks of `batch_size` samples, order preserved.
std::vector<Batch> pad_batch(const std::vector<UtteranceSample>& samples, std::size_t batch_size);

struct DataSplit {
  std::vector<UtteranceSample> train, val, test;
};

/// Dialogue-level split: whole dialogues are assigned by a seeded shuffle.
DataSplit split(const std::vector<UtteranceSample>& samples, std::array<double, 3> fractions, std::uint64_t seed);

/// Copy with per-modality labels removed so that targets duplicate label_f.
std::vector<UtteranceSample> drop_modality_labels(std::vector<UtteranceSample> samples);

}  // namespace mmml
