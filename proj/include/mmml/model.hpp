#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mmml/attention.hpp"
#include "mmml/data.hpp"
#include "mmml/gradcheck.hpp"

namespace mmml {

/// How the original encoded signal is re-injected after cross-modal fusion.
enum class RestorationVariant { fused_only, concat_restore, transformer_restore };

/// transformer: the cross-attention fusion stack. concatenation: pooled
/// encoder outputs go straight into the fused head (no fusion stack).
enum class FusionKind { transformer, concatenation };

std::string to_string(RestorationVariant v);
RestorationVariant parse_variant(const std::string& text);
std::string to_string(FusionKind k);
FusionKind parse_fusion_kind(const std::string& text);

struct ModelConfig {
  std::size_t d_in_text = 8;
  std::size_t d_in_audio = 8;
  std::size_t d_model = 16;
  std::size_t num_heads = 2;
  std::size_t fusion_layers = 5;
  std::size_t d_ff = 0;  // 0 selects 4 * d_model
  std::size_t feature_encoder_layers = 1;
  RestorationVariant variant = RestorationVariant::fused_only;
  FusionKind fusion = FusionKind::transformer;
  bool positional_encoding = true;
  ContextConfig context;

  std::size_t ffn_width() const { return d_ff ? d_ff : 4 * d_model; }
  bool independent_context_text() const {
    return context.method == ContextMethod::independent && context.text_window > 0;
  }
  bool independent_context_audio() const {
    return context.method == ContextMethod::independent && context.audio_window > 0;
  }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Projection plus self-attention encoder layers for one modality.
struct ModalityEncoder {
  Linear projection;
  std::vector<EncoderLayerParams> layers;
};

/// One repetition of the fusion stack: cross-attention encoder layer, then a
/// self-attention encoder layer, then a residual pointwise FFN with norm.
struct FusionStage {
  EncoderLayerParams cross;
  EncoderLayerParams self;
  FfnParams ffn;
  LayerNormParams norm;
};

struct Restoration {
  Linear merge;                           // (2 d_model -> d_model)
  std::optional<EncoderLayerParams> encoder;  // transformer_restore only
};

struct FusionBranch {
  std::vector<FusionStage> stages;
  std::optional<Restoration> restoration;
};

/// Linear maps merging a pooled context vector into the pooled utterance
/// vector, one for the subnet head and one for the fused head.
struct ContextMerge {
  Linear subnet;
  Linear fused;
};

enum class ParamKind { weight, bias, gain };

class MmmlModel {
 public:
  ModelConfig config;
  ModalityEncoder text, audio;
  FusionBranch text_query, audio_query;
  Linear head_text, head_audio, head_fused;
  std::optional<ContextMerge> context_text, context_audio;

  /// Every parameter in a fixed order with its kind.
  void for_each_parameter(const std::function<void(const std::string&, const Tensor&, ParamKind)>& fn) const;
  std::vector<NamedTensor> parameters() const;
  std::size_t parameter_count() const;
  /// Deep copy; the result shares no storage with this model.
  MmmlModel clone() const;
  void zero_grad() const;
};

/// Model with zero weights, unit layer-norm gains and zero biases.
MmmlModel build_model(const ModelConfig& config);
/// Weights uniform in (-sqrt(1/fan_in), +sqrt(1/fan_in)); biases zero; norm gains one.
MmmlModel init_model(const ModelConfig& config, std::uint64_t seed);

/// One modality's input for a single sample.
struct ModalityInput {
  Tensor sequence;  // (L, d_in)
  Mask mask;
  std::optional<Tensor> context;  // (L_c, d_in), independent context only
  Mask context_mask;
};

struct SampleInput {
  std::optional<ModalityInput> text;
  std::optional<ModalityInput> audio;
};

SampleInput sample_input(const Batch& batch, std::size_t index);
SampleInput sample_input(const UtteranceSample& sample);

struct PredictionTensors {
  Tensor y_text, y_audio, y_fused;  // shape (1, 1)
};

struct Prediction {
  double y_text = 0.0;
  double y_audio = 0.0;
  double y_fused = 0.0;
};

struct PartialPrediction {
  std::optional<double> y_text, y_audio, y_fused;
};

Tensor encode_modality(const MmmlModel& model, const ModalityEncoder& encoder, const Tensor& sequence,
                       const Mask& mask);

Tensor fusion_branch(const MmmlModel& model, const FusionBranch& branch, const Tensor& f_query,
                     const Tensor& f_kv, const Mask& query_mask, const Mask& kv_mask);

/// Re-injects `original` into `fused` per the model's variant; `mask` marks
/// valid rows for the transformer variant's self-attention.
Tensor apply_restoration(const MmmlModel& model, const FusionBranch& branch, const Tensor& original,
                         const Tensor& fused, const Mask& mask);

PredictionTensors forward_sample(const MmmlModel& model, const SampleInput& input);
std::vector<PredictionTensors> forward(const MmmlModel& model, const Batch& batch);
std::vector<Prediction> predict(const MmmlModel& model, const Batch& batch);
std::vector<Prediction> predict(const MmmlModel& model, const std::vector<UtteranceSample>& samples,
                                std::size_t batch_size = 16);

/// Runs whichever heads the available modalities support: the subnet head of
/// each present modality, and the fused head only when both are present.
PartialPrediction predict_available(const MmmlModel& model, const SampleInput& input);

// ---- persistence ------------------------------------------------------------

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

std::vector<std::uint8_t> serialize_model(const MmmlModel& model);
MmmlModel deserialize_model(const std::vector<std::uint8_t>& bytes);
void save_model(const MmmlModel& model, const std::filesystem::path& path);
MmmlModel load_model(const std::filesystem::path& path);

}  // namespace mmml
