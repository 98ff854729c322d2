#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "mmml/errors.hpp"
#include "mmml/gradcheck.hpp"
#include "mmml/model.hpp"
#include "mmml/training.hpp"
#include "support.hpp"

using namespace mmml;
using mmml::test::random_tensor;
using mmml::test::uniform_int;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config(RestorationVariant variant = RestorationVariant::fused_only) {
  ModelConfig c;
  c.d_in_text = 5;
  c.d_in_audio = 3;
  c.d_model = 8;
  c.num_heads = 2;
  c.fusion_layers = 2;
  c.d_ff = 12;
  c.variant = variant;
  return c;
}

UtteranceSample random_sample(std::mt19937_64& rng, const ModelConfig& c, std::size_t lt, std::size_t la) {
  UtteranceSample s;
  s.id = "s";
  s.dialogue_id = "d";
  s.text_seq = random_tensor(rng, {lt, c.d_in_text});
  s.audio_seq = random_tensor(rng, {la, c.d_in_audio});
  s.label_f = 0.25;
  return s;
}

std::vector<UtteranceSample> random_samples(std::mt19937_64& rng, const ModelConfig& c, std::size_t n) {
  std::vector<UtteranceSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(random_sample(rng, c, uniform_int(rng, 1, 6), uniform_int(rng, 1, 6)));
    out.back().id = "s" + std::to_string(i);
    out.back().turn_index = i;
  }
  return out;
}

std::size_t layer_params(std::size_t d, std::size_t ff) {
  return 4 * d * d + (d * ff + ff) + (ff * ff + ff) + (ff * d + d) + 4 * d;
}

void expect_same(const Prediction& a, const Prediction& b) {
  CHECK(a.y_text == b.y_text);
  CHECK(a.y_audio == b.y_audio);
  CHECK(a.y_fused == b.y_fused);
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mmml_test_model";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("initialization is seeded") {
  const auto c = small_config();
  const auto a = init_model(c, 7), b = init_model(c, 7), other = init_model(c, 8);
  const auto pa = a.parameters(), pb = b.parameters(), po = other.parameters();
  REQUIRE(pa.size() == pb.size());
  bool any_differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(test::bitwise_equal(pa[i].second.data(), pb[i].second.data()));
    any_differs = any_differs || !test::bitwise_equal(pa[i].second.data(), po[i].second.data());
  }
  CHECK(any_differs);
}

TEST_CASE("initialization ranges") {
  const auto m = init_model(small_config(RestorationVariant::transformer_restore), 3);
  m.for_each_parameter([](const std::string& name, const Tensor& t, ParamKind kind) {
    CAPTURE(name);
    if (kind == ParamKind::bias) {
      for (double v : t.data()) CHECK(v == 0.0);
    } else if (kind == ParamKind::gain) {
      for (double v : t.data()) CHECK(v == 1.0);
    } else {
      const double bound = std::sqrt(1.0 / static_cast<double>(t.dim(0)));
      for (double v : t.data()) CHECK(std::abs(v) <= bound);
    }
  });
}

TEST_CASE("five fusion layers give five stages per branch") {
  auto c = small_config();
  c.fusion_layers = 5;
  const auto m = init_model(c, 0);
  CHECK(m.text_query.stages.size() == 5);
  CHECK(m.audio_query.stages.size() == 5);
}

TEST_CASE("model config errors") {
  auto c = small_config();
  c.num_heads = 3;
  CHECK_THROWS_AS(init_model(c, 0), ConfigError);
  c = small_config();
  c.fusion_layers = 0;
  CHECK_THROWS_AS(init_model(c, 0), ConfigError);
  c = small_config(RestorationVariant::concat_restore);
  c.fusion = FusionKind::concatenation;
  CHECK_THROWS_AS(init_model(c, 0), ConfigError);
}

TEST_CASE("restoration variants add exactly their declared parameters") {
  const std::size_t d = 8, ff = 12;
  const auto base = init_model(small_config(), 0).parameter_count();
  const auto cat = init_model(small_config(RestorationVariant::concat_restore), 0).parameter_count();
  const auto tr = init_model(small_config(RestorationVariant::transformer_restore), 0).parameter_count();
  const std::size_t merge = 2 * (2 * d * d + d);
  CHECK(cat - base == merge);
  CHECK(tr - base == merge + 2 * layer_params(d, ff));
}

TEST_CASE("forward preserves order and has no cross-sample interaction") {
  std::mt19937_64 rng(1);
  const auto c = small_config(RestorationVariant::concat_restore);
  const auto m = init_model(c, 1);
  auto samples = random_samples(rng, c, 5);
  const auto preds = predict(m, make_batch(samples));
  REQUIRE(preds.size() == 5);
  std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<UtteranceSample> shuffled;
  for (std::size_t i : perm) shuffled.push_back(samples[i]);
  const auto again = predict(m, make_batch(shuffled));
  for (std::size_t i = 0; i < perm.size(); ++i) expect_same(again[i], preds[perm[i]]);
  CHECK_THROWS_AS(forward(m, Batch{}), ContractError);
}

TEST_CASE("zero weights give the head biases") {
  auto m = build_model(small_config());
  m.head_text.bias.mutable_data()[0] = 0.1;
  m.head_audio.bias.mutable_data()[0] = -0.2;
  m.head_fused.bias.mutable_data()[0] = 0.3;
  std::mt19937_64 rng(2);
  for (const auto& p : predict(m, make_batch(random_samples(rng, m.config, 3)))) {
    CHECK(p.y_text == 0.1);
    CHECK(p.y_audio == -0.2);
    CHECK(p.y_fused == 0.3);
  }
}

TEST_CASE("restoration examples") {
  std::mt19937_64 rng(3);
  const Tensor original = random_tensor(rng, {4, 8});
  const Tensor fused = random_tensor(rng, {4, 8});
  const Mask mask(4, 1);

  const auto plain = init_model(small_config(), 0);
  CHECK(test::bitwise_equal(apply_restoration(plain, plain.text_query, original, fused, mask).data(), fused.data()));

  auto cat = init_model(small_config(RestorationVariant::concat_restore), 0);
  CHECK(apply_restoration(cat, cat.text_query, original, fused, mask).shape() == Shape{4, 8});
  auto w = cat.text_query.restoration->merge.weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < 8; ++i) {
    w[i * 8 + i] = 0.5;
    w[(8 + i) * 8 + i] = 0.5;
  }
  const Tensor same = apply_restoration(cat, cat.text_query, fused, fused, mask);
  CHECK(test::max_abs_diff(same.data(), fused.data()) < 1e-15);

  CHECK_THROWS_AS(apply_restoration(cat, cat.text_query, random_tensor(rng, {3, 8}), fused, mask), DimensionError);
}

TEST_CASE("fusion branch output length and kv mask soundness") {
  std::mt19937_64 rng(4);
  auto c = small_config();
  c.fusion_layers = 1;
  const auto m = init_model(c, 4);
  const Tensor fq = random_tensor(rng, {3, 8});
  Tensor fkv = random_tensor(rng, {6, 8});
  const Mask qmask(3, 1), kvmask{1, 0, 1, 1, 0, 0};
  const Tensor before = fusion_branch(m, m.text_query, fq, fkv, qmask, kvmask);
  CHECK(before.shape() == Shape{3, 8});
  auto v = fkv.mutable_data();
  for (std::size_t r : {1, 4, 5}) {
    for (std::size_t k = 0; k < 8; ++k) v[r * 8 + k] = -50.0 + static_cast<double>(k);
  }
  CHECK(test::bitwise_equal(fusion_branch(m, m.text_query, fq, fkv, qmask, kvmask).data(), before.data()));
}

TEST_CASE("padding leaves all three outputs unchanged over 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    std::mt19937_64 rng(seed);
    const auto variant = static_cast<RestorationVariant>(seed % 3);
    const auto m = init_model(small_config(variant), seed);
    const auto s = random_sample(rng, m.config, uniform_int(rng, 1, 4), uniform_int(rng, 1, 4));
    auto longer = random_sample(rng, m.config, s.text_seq.dim(0) + uniform_int(rng, 1, 4),
                                s.audio_seq.dim(0) + uniform_int(rng, 1, 4));
    const auto alone = predict(m, make_batch({s}));
    const auto padded = predict(m, make_batch({longer, s}));
    expect_same(padded[1], alone[0]);
  }
}

TEST_CASE("subnet heads ignore the other modality") {
  std::mt19937_64 rng(5);
  const auto m = init_model(small_config(RestorationVariant::transformer_restore), 5);
  auto s = random_sample(rng, m.config, 4, 3);
  const auto full = predict(m, make_batch({s}))[0];

  auto changed = s;
  changed.audio_seq = random_tensor(rng, {5, m.config.d_in_audio});
  const auto other = predict(m, make_batch({changed}))[0];
  CHECK(other.y_text == full.y_text);
  CHECK(other.y_fused != full.y_fused);

  changed = s;
  changed.text_seq = random_tensor(rng, {2, m.config.d_in_text});
  CHECK(predict(m, make_batch({changed}))[0].y_audio == full.y_audio);
}

TEST_CASE("missing modalities") {
  std::mt19937_64 rng(6);
  const auto m = init_model(small_config(RestorationVariant::concat_restore), 6);
  const auto s = random_sample(rng, m.config, 4, 3);
  const auto full = predict(m, make_batch({s}))[0];

  SampleInput text_only = sample_input(s);
  text_only.audio.reset();
  const auto t = predict_available(m, text_only);
  REQUIRE(t.y_text.has_value());
  CHECK(*t.y_text == full.y_text);
  CHECK_FALSE(t.y_audio.has_value());
  CHECK_FALSE(t.y_fused.has_value());

  SampleInput audio_only = sample_input(s);
  audio_only.text.reset();
  const auto a = predict_available(m, audio_only);
  REQUIRE(a.y_audio.has_value());
  CHECK(*a.y_audio == full.y_audio);
  CHECK_FALSE(a.y_text.has_value());
  CHECK_FALSE(a.y_fused.has_value());

  CHECK_THROWS_AS(predict_available(m, SampleInput{}), ContractError);
}

TEST_CASE("concatenation fusion skips the fusion stack") {
  auto c = small_config();
  c.fusion = FusionKind::concatenation;
  const auto m = init_model(c, 0);
  const auto transformer = init_model(small_config(), 0);
  CHECK(m.parameter_count() < transformer.parameter_count());
  CHECK(m.text_query.stages.empty());
  std::mt19937_64 rng(7);
  const auto preds = predict(m, make_batch(random_samples(rng, c, 3)));
  CHECK(preds.size() == 3);
}

TEST_CASE("independent context changes only context-carrying predictions") {
  auto c = small_config();
  c.context = {ContextMethod::independent, 2, 1};
  const auto m = init_model(c, 9);
  REQUIRE(m.context_text.has_value());
  REQUIRE(m.context_audio.has_value());
  std::mt19937_64 rng(8);
  auto s = random_sample(rng, c, 3, 3);
  const auto without = predict(m, make_batch({s}))[0];
  s.text_context = random_tensor(rng, {5, c.d_in_text});
  const auto with = predict(m, make_batch({s}))[0];
  CHECK(with.y_text != without.y_text);
  CHECK(with.y_fused != without.y_fused);
  CHECK(with.y_audio == without.y_audio);

  // A context-free sample batched next to one with context is unaffected.
  auto plain = random_sample(rng, c, 2, 4);
  const auto alone = predict(m, make_batch({plain}))[0];
  expect_same(predict(m, make_batch({s, plain}))[1], alone);
}

TEST_CASE("context model gradients match central differences") {
  auto c = small_config(RestorationVariant::concat_restore);
  c.fusion_layers = 1;
  c.context = {ContextMethod::independent, 1, 1};
  auto m = init_model(c, 10);
  // Seed chosen so no ReLU pre-activation falls inside the h = 1e-5 stencil;
  // seed 9 puts one within 1e-5 of zero and agrees only at h = 1e-6.
  std::mt19937_64 rng(13);
  for (auto& [name, t] : m.parameters()) {
    Tensor h = t;
    for (auto& v : h.mutable_data()) v += std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
  }
  auto s = random_sample(rng, c, 3, 2);
  s.text_context = random_tensor(rng, {2, c.d_in_text});
  s.label_t = 0.4;
  s.label_a = -0.1;
  auto s2 = random_sample(rng, c, 2, 3);
  const Batch batch = make_batch({s, s2});
  const auto r = finite_diff_check([&] { return multi_loss(forward(m, batch), batch.targets, {1.0, 1.0, 1.0}); },
                                   m.parameters());
  CAPTURE(r.worst_parameter);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("save and load round trip") {
  auto c = small_config(RestorationVariant::transformer_restore);
  c.context = {ContextMethod::independent, 2, 0};
  const auto m = init_model(c, 11);
  const auto path = temp_path("model.mmml");
  save_model(m, path);
  const auto loaded = load_model(path);
  CHECK(loaded.config == m.config);
  const auto a = m.parameters(), b = loaded.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.shape() == b[i].second.shape());
    CHECK(test::bitwise_equal(a[i].second.data(), b[i].second.data()));
  }
  CHECK(serialize_model(loaded) == serialize_model(m));

  std::mt19937_64 rng(12);
  const Batch batch = make_batch(random_samples(rng, c, 4));
  const auto pa = predict(m, batch), pb = predict(loaded, batch);
  for (std::size_t i = 0; i < pa.size(); ++i) expect_same(pa[i], pb[i]);
}

TEST_CASE("model file header layout") {
  const auto bytes = serialize_model(init_model(small_config(), 0));
  REQUIRE(bytes.size() > 12);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MMML");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 0);
  CHECK(bytes[7] == 0);
}

TEST_CASE("corrupted model files") {
  const auto good = serialize_model(init_model(small_config(), 0));

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_model(bad_magic), FormatError);

  auto bad_version = good;
  bad_version[4] = 2;
  CHECK_THROWS_AS(deserialize_model(bad_version), FormatError);

  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, good.size() / 2, good.size() - 1}) {
    CAPTURE(cut);
    const std::vector<std::uint8_t> truncated(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    try {
      deserialize_model(truncated);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }
  }

  auto trailing = good;
  trailing.push_back(0);
  CHECK_THROWS_AS(deserialize_model(trailing), FormatError);

  CHECK_THROWS_AS(load_model(temp_path("missing.mmml")), FileError);
}
