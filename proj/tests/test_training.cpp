#include <doctest.h>

#include <cmath>
#include <limits>

#include "mmml/errors.hpp"
#include "mmml/training.hpp"
#include "support.hpp"

using namespace mmml;

namespace {

PredictionTensors pred(double a, double t, double f) {
  return {Tensor::matrix({{t}}), Tensor::matrix({{a}}), Tensor::matrix({{f}})};
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.d_in_text = 4;
  c.d_in_audio = 4;
  c.d_model = 8;
  c.num_heads = 2;
  c.fusion_layers = 1;
  c.d_ff = 16;
  return c;
}

std::vector<UtteranceSample> tiny_data(std::size_t n, std::uint64_t seed, TaskStyle style = TaskStyle::sims) {
  GeneratorConfig g;
  g.n_samples = n;
  g.d_in_text = 4;
  g.d_in_audio = 4;
  g.style = style;
  g.seed = seed;
  return generate(g);
}

}  // namespace

TEST_CASE("multi-loss hand example") {
  Targets zero{{0.0}, {0.0}, {0.0}};
  // PredictionTensors is (text, audio, fused); pred() takes (audio, text, fused).
  const auto loss = multi_loss({pred(0.3, 0.5, 0.4)}, zero, {1.0, 1.0, 1.0});
  CHECK(std::abs(loss.item() - 0.50) < 1e-15);
  CHECK(std::abs(multi_loss({pred(0.3, 0.5, 0.4)}, zero, {0.0, 0.0, 1.0}).item() - 0.16) < 1e-15);
  CHECK(multi_loss({pred(0.2, -0.1, 0.7)}, Targets{{-0.1}, {0.2}, {0.7}}, {1.0, 1.0, 1.0}).item() == 0.0);
  CHECK_THROWS_AS(multi_loss({pred(0, 0, 0), pred(0, 0, 0)}, zero, {1.0, 1.0, 1.0}), ContractError);
}

TEST_CASE("multi-loss averages over the batch") {
  const Targets t{{1.0, 0.0}, {0.0, 0.0}, {0.0, 2.0}};
  const double loss = multi_loss({pred(0.0, 0.0, 0.0), pred(1.0, 0.0, 0.0)}, t, {1.0, 2.0, 0.5}).item();
  // sample 0: text residual 1 weighted 2; sample 1: audio 1 weighted 1, fused 2 weighted 0.5
  CHECK(std::abs(loss - (2.0 + 1.0 + 0.5 * 4.0) / 2.0) < 1e-15);
  CHECK(loss >= 0.0);
}

TEST_CASE("AdamW single-step examples") {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.weight_decay = 0.0;

  Tensor p = Tensor::vector({0.5}, true);
  p.mutable_grad()[0] = 2.0;
  AdamState state;
  adamw_step({{"p", p}}, state, cfg);
  CHECK(std::abs((p.data()[0] - 0.5) - (-1e-3)) < 1e-6);
  CHECK(state.step == 1);

  Tensor q = Tensor::vector({0.5}, true);
  AdamState s2;
  adamw_step({{"q", q}}, s2, cfg);
  CHECK(q.data()[0] == 0.5);

  cfg.weight_decay = 0.01;
  Tensor r = Tensor::vector({1.0}, true);
  AdamState s3;
  adamw_step({{"r", r}}, s3, cfg);
  CHECK(r.data()[0] == 1.0 - 1e-5);

  cfg.learning_rate = 0.0;
  Tensor z = Tensor::vector({0.7, -0.2}, true);
  z.mutable_grad()[0] = 3.0;
  z.mutable_grad()[1] = -1.0;
  AdamState s4;
  adamw_step({{"z", z}}, s4, cfg);
  CHECK(z.data()[0] == 0.7);
  CHECK(z.data()[1] == -0.2);
}

TEST_CASE("non-finite gradients name the parameter") {
  Tensor p = Tensor::vector({0.5}, true);
  p.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  AdamState state;
  try {
    adamw_step({{"branch_text.0.ffn.2.weight", p}}, state, TrainConfig{});
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("branch_text.0.ffn.2.weight") != std::string::npos);
  }
}

TEST_CASE("train config rules") {
  TrainConfig cfg;
  cfg.loss_mode = LossMode::single;
  CHECK(cfg.effective_alphas() == LossWeights{0.0, 0.0, 1.0});
  cfg.loss_mode = LossMode::multi;
  cfg.alphas = {0.0, 1.0, 0.0};
  CHECK(cfg.monitored_head() == Head::text);
  cfg.patience = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.patience = 1;
  cfg.alphas = {-1.0, 1.0, 1.0};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("single-loss and zero-weight multi-loss gradients agree") {
  const auto data = tiny_data(6, 1);
  const Batch batch = make_batch(data);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto m = init_model(tiny_model(), seed);
    CHECK(grads_equal_under_alpha_zero(m, batch));

    const auto single = parameter_gradients(m, batch, [](const auto& p, const Targets& t) { return single_loss(p, t); });
    const auto doubled = parameter_gradients(
        m, batch, [](const auto& p, const Targets& t) { return multi_loss(p, t, {0.0, 0.0, 2.0}); });
    const auto full = parameter_gradients(
        m, batch, [](const auto& p, const Targets& t) { return multi_loss(p, t, {1.0, 1.0, 1.0}); });
    bool differs = false;
    for (std::size_t i = 0; i < single.size(); ++i) {
      for (std::size_t j = 0; j < single[i].size(); ++j) {
        CHECK(doubled[i][j] == 2.0 * single[i][j]);
        differs = differs || full[i][j] != single[i][j];
      }
    }
    CHECK(differs);
  }
}

TEST_CASE("training is deterministic and keeps the best epoch") {
  const auto data = tiny_data(48, 2);
  const auto parts = split(data, {0.7, 0.15, 0.15}, 0);
  TrainConfig cfg;
  cfg.max_epochs = 6;
  cfg.patience = 2;
  cfg.seed = 5;

  auto m1 = init_model(tiny_model(), 3);
  auto m2 = init_model(tiny_model(), 3);
  const auto h1 = train(m1, parts.train, parts.val, cfg);
  const auto h2 = train(m2, parts.train, parts.val, cfg);
  CHECK(h1 == h2);
  CHECK(history_csv(h1) == history_csv(h2));
  CHECK(serialize_model(m1) == serialize_model(m2));

  REQUIRE_FALSE(h1.epochs.empty());
  double best = h1.epochs[h1.best_epoch - 1].val_loss;
  for (const auto& e : h1.epochs) CHECK(best <= e.val_loss);
  const double returned = evaluate_loss(m1, parts.val, cfg.effective_alphas());
  CHECK(returned == best);
  CHECK((h1.stop_reason == "early_stopping" || h1.stop_reason == "max_epochs"));
  if (h1.stop_reason == "early_stopping") CHECK(h1.epochs.size() == h1.best_epoch + cfg.patience);

  cfg.seed = 6;
  auto m3 = init_model(tiny_model(), 3);
  CHECK_FALSE(train(m3, parts.train, parts.val, cfg) == h1);
}

TEST_CASE("one epoch stops on the epoch limit") {
  const auto data = tiny_data(30, 3);
  auto m = init_model(tiny_model(), 0);
  TrainConfig cfg;
  cfg.max_epochs = 1;
  const auto h = train(m, data, data, cfg);
  CHECK(h.epochs.size() == 1);
  CHECK(h.stop_reason == "max_epochs");
  CHECK(h.best_epoch == 1);
  CHECK(history_csv(h).rfind("epoch,train_loss,val_loss,val_mae\n1,", 0) == 0);
  CHECK_THROWS_AS(train(m, {}, data, cfg), ContractError);
  CHECK_THROWS_AS(train(m, data, {}, cfg), ContractError);
}

TEST_CASE("single mode equals weights 0,0,1") {
  const auto data = tiny_data(40, 4);
  const auto parts = split(data, {0.75, 0.25, 0.0}, 1);
  TrainConfig single;
  single.max_epochs = 3;
  single.loss_mode = LossMode::single;
  TrainConfig weighted = single;
  weighted.loss_mode = LossMode::multi;
  weighted.alphas = {0.0, 0.0, 1.0};
  auto a = init_model(tiny_model(), 1);
  auto b = init_model(tiny_model(), 1);
  CHECK(train(a, parts.train, parts.val, single) == train(b, parts.train, parts.val, weighted));
}

TEST_CASE("head outputs pair each head with its own target") {
  auto data = tiny_data(10, 5);
  const auto m = init_model(tiny_model(), 2);
  const auto text = head_outputs(m, data, Head::text);
  const auto fused = head_outputs(m, data, Head::fused);
  const auto preds = predict(m, data);
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(text.targets[i] == *data[i].label_t);
    CHECK(fused.targets[i] == data[i].label_f);
    CHECK(text.predictions[i] == preds[i].y_text);
    CHECK(fused.predictions[i] == preds[i].y_fused);
  }
}
