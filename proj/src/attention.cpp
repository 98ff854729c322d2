#include "mmml/attention.hpp"

#include <cmath>

#include "mmml/errors.hpp"

namespace mmml {

Linear Linear::zeros(std::size_t d_in, std::size_t d_out) {
  return {Tensor::zeros({d_in, d_out}, true), Tensor::zeros({d_out}, true)};
}

Tensor linear(const Linear& layer, const Tensor& x) { return add_rowvec(matmul(x, layer.weight), layer.bias); }

LayerNormParams LayerNormParams::identity(std::size_t d) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

AttentionParams AttentionParams::zeros(std::size_t d_model, std::size_t num_heads) {
  if (num_heads == 0 || d_model % num_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  auto w = [&] { return Tensor::zeros({d_model, d_model}, true); };
  return {w(), w(), w(), w(), num_heads};
}

FfnParams FfnParams::zeros(std::size_t d_model, std::size_t d_ff) {
  return {{Linear::zeros(d_model, d_ff), Linear::zeros(d_ff, d_ff), Linear::zeros(d_ff, d_model)}};
}

EncoderLayerParams EncoderLayerParams::zeros(std::size_t d_model, std::size_t num_heads, std::size_t d_ff) {
  return {AttentionParams::zeros(d_model, num_heads), FfnParams::zeros(d_model, d_ff),
          LayerNormParams::identity(d_model), LayerNormParams::identity(d_model)};
}

namespace {

void require_sequence(const Tensor& x, std::size_t d, const char* what) {
  if (x.rank() != 2 || x.dim(1) != d) {
    throw DimensionError(std::string(what) + " must have shape (L, " + std::to_string(d) + "), got " +
                         shape_string(x.shape()));
  }
}

}  // namespace

Tensor multi_head_attention(const AttentionParams& params, const Tensor& query_seq, const Tensor& kv_seq,
                            const Mask& kv_mask) {
  const std::size_t d = params.d_model();
  require_sequence(query_seq, d, "attention query");
  require_sequence(kv_seq, d, "attention key/value");
  const std::size_t lkv = kv_seq.dim(0);
  if (kv_mask.size() != lkv) {
    throw DimensionError("attention mask length " + std::to_string(kv_mask.size()) +
                         " does not match key/value length " + std::to_string(lkv));
  }
  std::vector<double> bias(lkv);
  bool any_valid = false;
  for (std::size_t j = 0; j < lkv; ++j) {
    bias[j] = kv_mask[j] ? 0.0 : kMaskedScore;
    any_valid = any_valid || kv_mask[j];
  }
  if (!any_valid) throw ContractError("attention: every key position is masked (empty attention)");
  const Tensor score_bias = Tensor::from_data({lkv}, std::move(bias));

  const Tensor q = matmul(query_seq, params.w_q);
  const Tensor k = matmul(kv_seq, params.w_k);
  const Tensor v = matmul(kv_seq, params.w_v);

  const std::size_t h = params.num_heads;
  const std::size_t dk = params.d_k();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  std::vector<Tensor> heads;
  heads.reserve(h);
  for (std::size_t i = 0; i < h; ++i) {
    Tensor qh = h == 1 ? q : slice(q, 1, i * dk, dk);
    Tensor kh = h == 1 ? k : slice(k, 1, i * dk, dk);
    Tensor vh = h == 1 ? v : slice(v, 1, i * dk, dk);
    Tensor scores = add_rowvec(scale(matmul(qh, transpose(kh)), inv_sqrt_dk), score_bias);
    heads.push_back(matmul(softmax_lastdim(scores), vh));
  }
  Tensor merged = h == 1 ? heads.front() : concat(heads, 1);
  return matmul(merged, params.w_o);
}

Tensor pointwise_ffn(const FfnParams& params, const Tensor& x) {
  Tensor h = relu(linear(params.layers[0], x));
  h = relu(linear(params.layers[1], h));
  return linear(params.layers[2], h);
}

Tensor encoder_layer(const EncoderLayerParams& params, const Tensor& query_seq, const Tensor& kv_seq,
                     const Mask& kv_mask) {
  Tensor attended = multi_head_attention(params.attention, query_seq, kv_seq, kv_mask);
  Tensor h = layer_norm(add(query_seq, attended), params.norm1.gain, params.norm1.bias);
  return layer_norm(add(h, pointwise_ffn(params.ffn, h)), params.norm2.gain, params.norm2.bias);
}

Tensor sinusoidal_pe(std::size_t length, std::size_t d) {
  if (d == 0 || d % 2 != 0) throw ContractError("sinusoidal_pe: width must be even, got " + std::to_string(d));
  if (length == 0) throw ContractError("sinusoidal_pe: length must be positive");
  std::vector<double> pe(length * d);
  for (std::size_t p = 0; p < length; ++p) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double angle =
          static_cast<double>(p) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      pe[p * d + 2 * i] = std::sin(angle);
      pe[p * d + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor::from_data({length, d}, std::move(pe));
}

}  // namespace mmml
