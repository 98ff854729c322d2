#pragma once

#include <array>
#include <cstddef>

#include "mmml/tensor.hpp"

namespace mmml {

/// y = x W + b with W of shape (d_in, d_out).
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear zeros(std::size_t d_in, std::size_t d_out);
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

Tensor linear(const Linear& layer, const Tensor& x);

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams identity(std::size_t d);
};

/// Projection matrices are (d_model, d_model); heads split the feature axis
/// into num_heads contiguous blocks of d_k = d_model / num_heads.
struct AttentionParams {
  Tensor w_q, w_k, w_v, w_o;
  std::size_t num_heads = 1;

  static AttentionParams zeros(std::size_t d_model, std::size_t num_heads);
  std::size_t d_model() const { return w_q.dim(0); }
  std::size_t d_k() const { return d_model() / num_heads; }
};

/// Three linear layers with ReLU between them: d_model -> d_ff -> d_ff -> d_model.
struct FfnParams {
  std::array<Linear, 3> layers;

  static FfnParams zeros(std::size_t d_model, std::size_t d_ff);
};

struct EncoderLayerParams {
  AttentionParams attention;
  FfnParams ffn;
  LayerNormParams norm1, norm2;

  static EncoderLayerParams zeros(std::size_t d_model, std::size_t num_heads, std::size_t d_ff);
};

/// Additive score bias for a key mask: 0 for valid keys, -1e30 for masked ones.
inline constexpr double kMaskedScore = -1e30;

/// softmax(Q K^T / sqrt(d_k)) V per head with Q from `query_seq` and K, V from
/// `kv_seq`, heads merged through w_o. Output has query_seq's length.
Tensor multi_head_attention(const AttentionParams& params, const Tensor& query_seq, const Tensor& kv_seq,
                            const Mask& kv_mask);

Tensor pointwise_ffn(const FfnParams& params, const Tensor& x);

/// Post-norm encoder layer:
///   h   = LN1(query + MHA(query, kv))
///   out = LN2(h + FFN(h))
Tensor encoder_layer(const EncoderLayerParams& params, const Tensor& query_seq, const Tensor& kv_seq,
                     const Mask& kv_mask);

/// pe[p][2i] = sin(p / 10000^(2i/d)), pe[p][2i+1] = cos(p / 10000^(2i/d)).
Tensor sinusoidal_pe(std::size_t length, std::size_t d);

}  // namespace mmml
