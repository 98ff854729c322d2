#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mmml/attention.hpp"
#include "mmml/errors.hpp"
#include "mmml/gradcheck.hpp"
#include "support.hpp"

using namespace mmml;
using mmml::test::random_tensor;
using mmml::test::uniform_int;

namespace {

AttentionParams random_attention(std::mt19937_64& rng, std::size_t d, std::size_t heads) {
  auto p = AttentionParams::zeros(d, heads);
  for (Tensor* t : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) *t = random_tensor(rng, {d, d}, false, 0.5);
  return p;
}

FfnParams random_ffn(std::mt19937_64& rng, std::size_t d, std::size_t ff) {
  auto p = FfnParams::zeros(d, ff);
  for (auto& l : p.layers) {
    l.weight = random_tensor(rng, l.weight.shape(), false, 0.5);
    l.bias = random_tensor(rng, l.bias.shape(), false, 0.1);
  }
  return p;
}

EncoderLayerParams random_layer(std::mt19937_64& rng, std::size_t d, std::size_t heads, std::size_t ff) {
  auto p = EncoderLayerParams::zeros(d, heads, ff);
  p.attention = random_attention(rng, d, heads);
  p.ffn = random_ffn(rng, d, ff);
  return p;
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  std::vector<Tensor> rows;
  for (std::size_t i : perm) rows.push_back(slice(x, 0, i, 1));
  return concat(rows, 0);
}

}  // namespace

TEST_CASE("output length follows the query") {
  std::mt19937_64 rng(1);
  const auto p = random_attention(rng, 4, 2);
  const Tensor q = random_tensor(rng, {3, 4});
  const Tensor kv = random_tensor(rng, {7, 4});
  CHECK(multi_head_attention(p, q, kv, Mask(7, 1)).shape() == Shape{3, 4});
}

TEST_CASE("zero query and key maps average the unmasked values") {
  auto p = AttentionParams::zeros(2, 1);
  p.w_v = Tensor::identity(2);
  p.w_o = Tensor::identity(2);
  const Tensor q = Tensor::matrix({{5, -1}, {0.3, 2}});
  const Tensor kv = Tensor::matrix({{1, 2}, {3, 4}, {100, 100}, {5, 0}});
  const Tensor out = multi_head_attention(p, q, kv, {1, 1, 0, 1});
  for (std::size_t r = 0; r < 2; ++r) {
    CHECK(std::abs(out.at({r, 0}) - 3.0) < 1e-12);
    CHECK(std::abs(out.at({r, 1}) - 2.0) < 1e-12);
  }
}

TEST_CASE("a single valid key is copied to every row") {
  std::mt19937_64 rng(2);
  auto p = random_attention(rng, 4, 2);
  p.w_v = Tensor::identity(4);
  p.w_o = Tensor::identity(4);
  const Tensor q = random_tensor(rng, {3, 4});
  const Tensor kv = random_tensor(rng, {5, 4});
  const Tensor out = multi_head_attention(p, q, kv, {0, 0, 1, 0, 0});
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 4; ++c) CHECK(out.at({r, c}) == doctest::Approx(kv.at({2, c})).epsilon(1e-14));
  }
}

TEST_CASE("attention errors") {
  std::mt19937_64 rng(3);
  const auto p = random_attention(rng, 4, 2);
  const Tensor q = random_tensor(rng, {2, 4});
  CHECK_THROWS_AS(multi_head_attention(p, q, random_tensor(rng, {3, 5}), Mask(3, 1)), DimensionError);
  CHECK_THROWS_AS(multi_head_attention(p, q, random_tensor(rng, {3, 4}), Mask(2, 1)), DimensionError);
  CHECK_THROWS_AS(multi_head_attention(p, q, random_tensor(rng, {3, 4}), Mask(3, 0)), ContractError);
  CHECK_THROWS_AS(AttentionParams::zeros(6, 4), ConfigError);
}

TEST_CASE("one head equals the attention equation evaluated directly") {
  std::mt19937_64 rng(4);
  const std::size_t d = 3;
  const auto p = random_attention(rng, d, 1);
  const Tensor q = random_tensor(rng, {2, d});
  const Tensor kv = random_tensor(rng, {4, d});
  const Tensor out = multi_head_attention(p, q, kv, Mask(4, 1));

  // Plain loops, no tensor ops.
  auto proj = [&](const Tensor& x, const Tensor& w, std::size_t r, std::size_t c) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += x.at({r, i}) * w.at({i, c});
    return s;
  };
  for (std::size_t r = 0; r < 2; ++r) {
    std::vector<double> scores(4);
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += proj(q, p.w_q, r, c) * proj(kv, p.w_k, j, c);
      scores[j] = s / std::sqrt(static_cast<double>(d));
    }
    const double mx = *std::max_element(scores.begin(), scores.end());
    double z = 0.0;
    for (auto& s : scores) z += (s = std::exp(s - mx));
    std::vector<double> head(d, 0.0);
    for (std::size_t j = 0; j < 4; ++j) {
      for (std::size_t c = 0; c < d; ++c) head[c] += scores[j] / z * proj(kv, p.w_v, j, c);
    }
    for (std::size_t c = 0; c < d; ++c) {
      double expected = 0.0;
      for (std::size_t i = 0; i < d; ++i) expected += head[i] * p.w_o.at({i, c});
      CHECK(std::abs(out.at({r, c}) - expected) < 1e-12);
    }
  }
}

TEST_CASE("query length is preserved and masked keys are ignored over 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    std::mt19937_64 rng(seed);
    const std::size_t heads = uniform_int(rng, 1, 3);
    const std::size_t d = heads * uniform_int(rng, 1, 3);
    const std::size_t lq = uniform_int(rng, 1, 7), lkv = uniform_int(rng, 1, 7);
    const auto p = random_attention(rng, d, heads);
    const auto layer = random_layer(rng, d, heads, 2 * d);
    const Tensor q = random_tensor(rng, {lq, d});
    Tensor kv = random_tensor(rng, {lkv, d});
    Mask mask(lkv);
    for (auto& m : mask) m = static_cast<std::uint8_t>(uniform_int(rng, 0, 1));
    mask[uniform_int(rng, 0, lkv - 1)] = 1;

    const Tensor before = multi_head_attention(p, q, kv, mask);
    const Tensor layer_before = encoder_layer(layer, q, kv, mask);
    CHECK(before.shape() == Shape{lq, d});
    CHECK(layer_before.shape() == Shape{lq, d});

    auto values = kv.mutable_data();
    for (std::size_t r = 0; r < lkv; ++r) {
      if (mask[r]) continue;
      for (std::size_t c = 0; c < d; ++c) values[r * d + c] = 1e6 * (static_cast<double>(c) - 0.5);
    }
    CHECK(test::bitwise_equal(multi_head_attention(p, q, kv, mask).data(), before.data()));
    CHECK(test::bitwise_equal(encoder_layer(layer, q, kv, mask).data(), layer_before.data()));
  }
}

TEST_CASE("pointwise FFN commutes with row permutations over 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(300 + seed);
    const std::size_t d = uniform_int(rng, 1, 6), l = uniform_int(rng, 1, 8);
    const auto p = random_ffn(rng, d, uniform_int(rng, 1, 10));
    const Tensor x = random_tensor(rng, {l, d});
    std::vector<std::size_t> perm(l);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const Tensor a = pointwise_ffn(p, permute_rows(x, perm));
    const Tensor b = permute_rows(pointwise_ffn(p, x), perm);
    CHECK(test::bitwise_equal(a.data(), b.data()));
  }
}

TEST_CASE("FFN hand examples") {
  auto p = FfnParams::zeros(3, 5);
  p.layers[2].bias = Tensor::vector({0.5, -1.0, 2.0});
  const Tensor out = pointwise_ffn(p, Tensor::matrix({{1, 2, 3}, {-4, 5, 6}}));
  for (std::size_t r = 0; r < 2; ++r) {
    CHECK(out.at({r, 0}) == 0.5);
    CHECK(out.at({r, 1}) == -1.0);
    CHECK(out.at({r, 2}) == 2.0);
  }

  auto unit = FfnParams::zeros(1, 1);
  for (auto& l : unit.layers) l.weight = Tensor::matrix({{1.0}});
  CHECK(pointwise_ffn(unit, Tensor::matrix({{2.0}})).item() == 2.0);
}

TEST_CASE("encoder layer gradients match central differences") {
  std::mt19937_64 rng(5);
  auto layer = random_layer(rng, 4, 2, 8);
  layer.norm1.gain = random_tensor(rng, {4});
  layer.norm2.bias = random_tensor(rng, {4});
  const Tensor q = random_tensor(rng, {3, 4});
  const Tensor kv = random_tensor(rng, {5, 4});
  const Mask mask{1, 0, 1, 1, 0};
  std::vector<NamedTensor> params{{"w_q", layer.attention.w_q}, {"w_k", layer.attention.w_k},
                                  {"w_v", layer.attention.w_v}, {"w_o", layer.attention.w_o},
                                  {"n1g", layer.norm1.gain},    {"n1b", layer.norm1.bias},
                                  {"n2g", layer.norm2.gain},    {"n2b", layer.norm2.bias}};
  for (auto& l : layer.ffn.layers) {
    params.emplace_back("w", l.weight);
    params.emplace_back("b", l.bias);
  }
  for (auto& [name, t] : params) t.set_requires_grad(true);
  const auto r = finite_diff_check([&] { return sum(encoder_layer(layer, q, kv, mask)); }, params);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("self-attention is the layer with kv equal to the query") {
  std::mt19937_64 rng(6);
  const auto layer = random_layer(rng, 4, 2, 8);
  const Tensor x = random_tensor(rng, {4, 4});
  const Tensor h = layer_norm(add(x, multi_head_attention(layer.attention, x, x, Mask(4, 1))), layer.norm1.gain,
                              layer.norm1.bias);
  const Tensor expected = layer_norm(add(h, pointwise_ffn(layer.ffn, h)), layer.norm2.gain, layer.norm2.bias);
  CHECK(test::bitwise_equal(encoder_layer(layer, x, x, Mask(4, 1)).data(), expected.data()));
}

TEST_CASE("sinusoidal positional encoding") {
  const Tensor pe = sinusoidal_pe(4, 2);
  CHECK(pe.at({0, 0}) == 0.0);
  CHECK(pe.at({0, 1}) == 1.0);
  CHECK(pe.at({2, 0}) == std::sin(2.0));
  CHECK(pe.at({2, 1}) == std::cos(2.0));
  const Tensor wide = sinusoidal_pe(16, 8);
  for (std::size_t c = 0; c < 8; ++c) CHECK(wide.at({0, c}) == (c % 2 == 0 ? 0.0 : 1.0));
  for (double v : wide.data()) CHECK(std::abs(v) <= 1.0);
  CHECK(std::abs(wide.at({3, 2}) - std::sin(3.0 / std::pow(10000.0, 2.0 / 8.0))) < 1e-15);
  CHECK_THROWS_AS(sinusoidal_pe(4, 3), ContractError);
}
