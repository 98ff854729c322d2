#include "mmml/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mmml/errors.hpp"

namespace mmml {

std::string to_string(RestorationVariant v) {
  switch (v) {
    case RestorationVariant::fused_only: return "fused_only";
    case RestorationVariant::concat_restore: return "concat_restore";
    case RestorationVariant::transformer_restore: return "transformer_restore";
  }
  return "fused_only";
}

RestorationVariant parse_variant(const std::string& text) {
  if (text == "fused_only") return RestorationVariant::fused_only;
  if (text == "concat_restore") return RestorationVariant::concat_restore;
  if (text == "transformer_restore") return RestorationVariant::transformer_restore;
  throw ConfigError("unknown variant '" + text + "' (expected fused_only|concat_restore|transformer_restore)");
}

std::string to_string(FusionKind k) { return k == FusionKind::transformer ? "transformer" : "concatenation"; }

FusionKind parse_fusion_kind(const std::string& text) {
  if (text == "transformer") return FusionKind::transformer;
  if (text == "concatenation" || text == "concat") return FusionKind::concatenation;
  throw ConfigError("unknown fusion kind '" + text + "' (expected transformer|concatenation)");
}

void ModelConfig::validate() const {
  if (d_in_text == 0 || d_in_audio == 0) throw ConfigError("input widths must be positive");
  if (d_model == 0 || num_heads == 0 || d_model % num_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (fusion_layers == 0) throw ConfigError("fusion_layers must be at least 1");
  if (positional_encoding && d_model % 2 != 0) throw ConfigError("positional encoding needs an even d_model");
  if (fusion == FusionKind::concatenation && variant != RestorationVariant::fused_only) {
    throw ConfigError("restoration variants apply to the transformer fusion stack only");
  }
}

// ---- parameters -------------------------------------------------------------

namespace {

using Visitor = std::function<void(const std::string&, const Tensor&, ParamKind)>;

void visit(const std::string& p, const Linear& l, const Visitor& fn) {
  fn(p + ".weight", l.weight, ParamKind::weight);
  fn(p + ".bias", l.bias, ParamKind::bias);
}

void visit(const std::string& p, const LayerNormParams& n, const Visitor& fn) {
  fn(p + ".gain", n.gain, ParamKind::gain);
  fn(p + ".bias", n.bias, ParamKind::bias);
}

void visit(const std::string& p, const FfnParams& f, const Visitor& fn) {
  for (std::size_t i = 0; i < f.layers.size(); ++i) visit(p + "." + std::to_string(i), f.layers[i], fn);
}

void visit(const std::string& p, const EncoderLayerParams& e, const Visitor& fn) {
  fn(p + ".attn.w_q", e.attention.w_q, ParamKind::weight);
  fn(p + ".attn.w_k", e.attention.w_k, ParamKind::weight);
  fn(p + ".attn.w_v", e.attention.w_v, ParamKind::weight);
  fn(p + ".attn.w_o", e.attention.w_o, ParamKind::weight);
  visit(p + ".ffn", e.ffn, fn);
  visit(p + ".norm1", e.norm1, fn);
  visit(p + ".norm2", e.norm2, fn);
}

void visit(const std::string& p, const ModalityEncoder& m, const Visitor& fn) {
  visit(p + ".proj", m.projection, fn);
  for (std::size_t i = 0; i < m.layers.size(); ++i) visit(p + ".encoder." + std::to_string(i), m.layers[i], fn);
}

void visit(const std::string& p, const FusionBranch& b, const Visitor& fn) {
  for (std::size_t i = 0; i < b.stages.size(); ++i) {
    const std::string s = p + "." + std::to_string(i);
    visit(s + ".cross", b.stages[i].cross, fn);
    visit(s + ".self", b.stages[i].self, fn);
    visit(s + ".ffn", b.stages[i].ffn, fn);
    visit(s + ".norm", b.stages[i].norm, fn);
  }
  if (b.restoration) {
    visit(p + ".restore.merge", b.restoration->merge, fn);
    if (b.restoration->encoder) visit(p + ".restore.encoder", *b.restoration->encoder, fn);
  }
}

}  // namespace

void MmmlModel::for_each_parameter(const Visitor& fn) const {
  visit("text", text, fn);
  visit("audio", audio, fn);
  visit("branch_text", text_query, fn);
  visit("branch_audio", audio_query, fn);
  if (context_text) {
    visit("context_text.subnet", context_text->subnet, fn);
    visit("context_text.fused", context_text->fused, fn);
  }
  if (context_audio) {
    visit("context_audio.subnet", context_audio->subnet, fn);
    visit("context_audio.fused", context_audio->fused, fn);
  }
  visit("head_text", head_text, fn);
  visit("head_audio", head_audio, fn);
  visit("head_fused", head_fused, fn);
}

std::vector<NamedTensor> MmmlModel::parameters() const {
  std::vector<NamedTensor> out;
  for_each_parameter([&](const std::string& name, const Tensor& t, ParamKind) { out.emplace_back(name, t); });
  return out;
}

std::size_t MmmlModel::parameter_count() const {
  std::size_t n = 0;
  for_each_parameter([&](const std::string&, const Tensor& t, ParamKind) { n += t.numel(); });
  return n;
}

MmmlModel MmmlModel::clone() const {
  MmmlModel copy = build_model(config);
  auto src = parameters();
  auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto from = src[i].second.data();
    std::copy(from.begin(), from.end(), dst[i].second.mutable_data().begin());
  }
  return copy;
}

void MmmlModel::zero_grad() const {
  for (auto& [name, t] : parameters()) {
    Tensor handle = t;
    handle.zero_grad();
  }
}

MmmlModel build_model(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model;
  const std::size_t h = config.num_heads;
  const std::size_t ff = config.ffn_width();

  MmmlModel m;
  m.config = config;
  auto make_encoder = [&](std::size_t d_in) {
    ModalityEncoder enc{Linear::zeros(d_in, d), {}};
    for (std::size_t i = 0; i < config.feature_encoder_layers; ++i) enc.layers.push_back(EncoderLayerParams::zeros(d, h, ff));
    return enc;
  };
  m.text = make_encoder(config.d_in_text);
  m.audio = make_encoder(config.d_in_audio);

  auto make_branch = [&] {
    FusionBranch b;
    if (config.fusion == FusionKind::concatenation) return b;
    for (std::size_t i = 0; i < config.fusion_layers; ++i) {
      b.stages.push_back({EncoderLayerParams::zeros(d, h, ff), EncoderLayerParams::zeros(d, h, ff),
                          FfnParams::zeros(d, ff), LayerNormParams::identity(d)});
    }
    if (config.variant != RestorationVariant::fused_only) {
      Restoration r{Linear::zeros(2 * d, d), std::nullopt};
      if (config.variant == RestorationVariant::transformer_restore) r.encoder = EncoderLayerParams::zeros(d, h, ff);
      b.restoration = std::move(r);
    }
    return b;
  };
  m.text_query = make_branch();
  m.audio_query = make_branch();

  if (config.independent_context_text()) m.context_text = ContextMerge{Linear::zeros(2 * d, d), Linear::zeros(2 * d, d)};
  if (config.independent_context_audio()) m.context_audio = ContextMerge{Linear::zeros(2 * d, d), Linear::zeros(2 * d, d)};

  m.head_text = Linear::zeros(d, 1);
  m.head_audio = Linear::zeros(d, 1);
  m.head_fused = Linear::zeros(2 * d, 1);
  return m;
}

MmmlModel init_model(const ModelConfig& config, std::uint64_t seed) {
  MmmlModel m = build_model(config);
  std::mt19937_64 rng(seed);
  m.for_each_parameter([&](const std::string&, const Tensor& t, ParamKind kind) {
    Tensor handle = t;
    auto values = handle.mutable_data();
    switch (kind) {
      case ParamKind::weight: {
        const double bound = std::sqrt(1.0 / static_cast<double>(t.dim(0)));
        std::uniform_real_distribution<double> uniform(-bound, bound);
        for (auto& v : values) v = uniform(rng);
        break;
      }
      case ParamKind::bias: std::fill(values.begin(), values.end(), 0.0); break;
      case ParamKind::gain: std::fill(values.begin(), values.end(), 1.0); break;
    }
  });
  return m;
}

// ---- inputs -----------------------------------------------------------------

namespace {

Tensor batch_row(const Tensor& padded, std::size_t index) {
  const std::size_t L = padded.dim(1), d = padded.dim(2);
  auto data = padded.data();
  return Tensor::from_data({L, d}, std::vector<double>(data.begin() + index * L * d, data.begin() + (index + 1) * L * d));
}

bool any_valid(const Mask& mask) {
  return std::any_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; });
}

ModalityInput modality_from_batch(const PaddedSequences& seqs, const std::optional<PaddedSequences>& ctx,
                                  std::size_t index) {
  ModalityInput in{batch_row(seqs.values, index), seqs.masks[index], std::nullopt, {}};
  if (ctx && any_valid(ctx->masks[index])) {
    in.context = batch_row(ctx->values, index);
    in.context_mask = ctx->masks[index];
  }
  return in;
}

ModalityInput modality_from_sample(const Tensor& seq, const std::optional<Tensor>& ctx) {
  ModalityInput in{seq, Mask(seq.dim(0), 1), std::nullopt, {}};
  if (ctx) {
    in.context = *ctx;
    in.context_mask = Mask(ctx->dim(0), 1);
  }
  return in;
}

}  // namespace

SampleInput sample_input(const Batch& batch, std::size_t index) {
  if (index >= batch.size()) throw ContractError("sample index out of range");
  return {modality_from_batch(batch.text, batch.text_context, index),
          modality_from_batch(batch.audio, batch.audio_context, index)};
}

SampleInput sample_input(const UtteranceSample& sample) {
  return {modality_from_sample(sample.text_seq, sample.text_context),
          modality_from_sample(sample.audio_seq, sample.audio_context)};
}

// ---- forward ----------------------------------------------------------------

Tensor encode_modality(const MmmlModel& model, const ModalityEncoder& encoder, const Tensor& sequence,
                       const Mask& mask) {
  if (sequence.rank() != 2 || sequence.dim(1) != encoder.projection.in_features()) {
    throw DimensionError("modality input of shape " + shape_string(sequence.shape()) + " does not match input width " +
                         std::to_string(encoder.projection.in_features()));
  }
  Tensor x = linear(encoder.projection, sequence);
  if (model.config.positional_encoding) x = add(x, sinusoidal_pe(x.dim(0), x.dim(1)));
  for (const auto& layer : encoder.layers) x = encoder_layer(layer, x, x, mask);
  return x;
}

Tensor fusion_branch(const MmmlModel& model, const FusionBranch& branch, const Tensor& f_query,
                     const Tensor& f_kv, const Mask& query_mask, const Mask& kv_mask) {
  (void)model;
  Tensor x = f_query;
  for (const auto& stage : branch.stages) {
    x = encoder_layer(stage.cross, x, f_kv, kv_mask);
    x = encoder_layer(stage.self, x, x, query_mask);
    x = layer_norm(add(x, pointwise_ffn(stage.ffn, x)), stage.norm.gain, stage.norm.bias);
  }
  return x;
}

Tensor apply_restoration(const MmmlModel& model, const FusionBranch& branch, const Tensor& original,
                         const Tensor& fused, const Mask& mask) {
  if (original.rank() != 2 || fused.rank() != 2 || original.dim(0) != fused.dim(0)) {
    throw DimensionError("restoration: original " + shape_string(original.shape()) + " and fused " +
                         shape_string(fused.shape()) + " differ in length");
  }
  if (model.config.variant == RestorationVariant::fused_only) return fused;
  if (!branch.restoration) throw ContractError("restoration parameters missing for variant " + to_string(model.config.variant));
  Tensor merged = linear(branch.restoration->merge, concat({original, fused}, 1));
  if (branch.restoration->encoder) merged = encoder_layer(*branch.restoration->encoder, merged, merged, mask);
  return merged;
}

namespace {

Tensor context_vector(const MmmlModel& model, const ModalityEncoder& encoder, const ModalityInput& in) {
  if (!in.context || !any_valid(in.context_mask)) return Tensor::zeros({model.config.d_model});
  return masked_mean_pool(encode_modality(model, encoder, *in.context, in.context_mask), in.context_mask);
}

Tensor with_context(const Linear& merge, const Tensor& pooled, const Tensor& context) {
  return reshape(linear(merge, reshape(concat({pooled, context}, 0), {1, 2 * pooled.dim(0)})), {pooled.dim(0)});
}

Tensor head(const Linear& layer, const Tensor& pooled) {
  return linear(layer, reshape(pooled, {1, pooled.dim(0)}));
}

struct SubnetOutput {
  Tensor encoded;
  Tensor context;  // undefined when the model has no context merge for this modality
  Tensor y;
};

SubnetOutput run_subnet(const MmmlModel& model, const ModalityEncoder& encoder, const Linear& head_layer,
                        const std::optional<ContextMerge>& merge, const ModalityInput& in) {
  SubnetOutput out;
  out.encoded = encode_modality(model, encoder, in.sequence, in.mask);
  Tensor pooled = masked_mean_pool(out.encoded, in.mask);
  if (merge) {
    out.context = context_vector(model, encoder, in);
    pooled = with_context(merge->subnet, pooled, out.context);
  }
  out.y = head(head_layer, pooled);
  return out;
}

}  // namespace

PredictionTensors forward_sample(const MmmlModel& model, const SampleInput& input) {
  if (!input.text || !input.audio) throw ContractError("forward needs both modalities; use predict_available");
  const auto& ti = *input.text;
  const auto& ai = *input.audio;
  SubnetOutput t = run_subnet(model, model.text, model.head_text, model.context_text, ti);
  SubnetOutput a = run_subnet(model, model.audio, model.head_audio, model.context_audio, ai);

  Tensor pooled_t, pooled_a;
  if (model.config.fusion == FusionKind::transformer) {
    Tensor bt = fusion_branch(model, model.text_query, t.encoded, a.encoded, ti.mask, ai.mask);
    Tensor ba = fusion_branch(model, model.audio_query, a.encoded, t.encoded, ai.mask, ti.mask);
    bt = apply_restoration(model, model.text_query, t.encoded, bt, ti.mask);
    ba = apply_restoration(model, model.audio_query, a.encoded, ba, ai.mask);
    pooled_t = masked_mean_pool(bt, ti.mask);
    pooled_a = masked_mean_pool(ba, ai.mask);
  } else {
    pooled_t = masked_mean_pool(t.encoded, ti.mask);
    pooled_a = masked_mean_pool(a.encoded, ai.mask);
  }
  if (model.context_text) pooled_t = with_context(model.context_text->fused, pooled_t, t.context);
  if (model.context_audio) pooled_a = with_context(model.context_audio->fused, pooled_a, a.context);
  Tensor y_f = head(model.head_fused, concat({pooled_t, pooled_a}, 0));
  return {t.y, a.y, y_f};
}

std::vector<PredictionTensors> forward(const MmmlModel& model, const Batch& batch) {
  if (batch.size() == 0) throw ContractError("forward: empty batch");
  std::vector<PredictionTensors> out;
  out.reserve(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) out.push_back(forward_sample(model, sample_input(batch, b)));
  return out;
}

std::vector<Prediction> predict(const MmmlModel& model, const Batch& batch) {
  std::vector<Prediction> out;
  for (const auto& p : forward(model, batch)) out.push_back({p.y_text.item(), p.y_audio.item(), p.y_fused.item()});
  return out;
}

std::vector<Prediction> predict(const MmmlModel& model, const std::vector<UtteranceSample>& samples,
                                std::size_t batch_size) {
  std::vector<Prediction> out;
  out.reserve(samples.size());
  for (const auto& batch : pad_batch(samples, batch_size)) {
    auto part = predict(model, batch);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

PartialPrediction predict_available(const MmmlModel& model, const SampleInput& input) {
  if (!input.text && !input.audio) throw ContractError("predict_available: no modality present");
  if (input.text && input.audio) {
    auto p = forward_sample(model, input);
    return {p.y_text.item(), p.y_audio.item(), p.y_fused.item()};
  }
  PartialPrediction out;
  if (input.text) out.y_text = run_subnet(model, model.text, model.head_text, model.context_text, *input.text).y.item();
  if (input.audio) out.y_audio = run_subnet(model, model.audio, model.head_audio, model.context_audio, *input.audio).y.item();
  return out;
}

}  // namespace mmml
