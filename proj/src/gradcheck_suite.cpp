#include <cmath>
#include <random>

#include "mmml/experiment.hpp"
#include "mmml/gradcheck.hpp"

namespace mmml {

namespace {

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}

  // Entries kept at least 0.05 away from zero so ReLU kinks stay out of the
  // finite-difference stencil.
  Tensor param(Shape shape) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) {
      x = normal(rng_);
      if (std::abs(x) < 0.05) x = x < 0 ? -0.05 : 0.05;
    }
    return Tensor::from_data(std::move(shape), std::move(v), true);
  }

  Tensor constant(Shape shape) {
    Tensor t = param(std::move(shape));
    t.set_requires_grad(false);
    return t;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

// Scalar probe sum(out * weights) so that every output coordinate matters.
Tensor probe(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

GradcheckEntry check(const std::string& name, const std::function<Tensor()>& f, const std::vector<NamedTensor>& params) {
  const auto r = finite_diff_check(f, params, 1e-5);
  return {name, r.max_rel_error, r.coordinates};
}

void randomize(const MmmlModel& model, Sampler& s) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& [name, t] : model.parameters()) {
    Tensor h = t;
    for (auto& v : h.mutable_data()) v += u(s.rng());
  }
}

}  // namespace

std::vector<GradcheckEntry> run_gradcheck(std::uint64_t seed) {
  Sampler s(seed);
  std::vector<GradcheckEntry> out;

  {
    Tensor a = s.param({3, 4}), b = s.param({4, 5}), w = s.constant({3, 5});
    out.push_back(check("matmul", [&] { return probe(matmul(a, b), w); }, {{"a", a}, {"b", b}}));
  }
  {
    Tensor a = s.param({2, 3, 4}), b = s.param({4, 2}), w = s.constant({2, 3, 2});
    out.push_back(check("matmul_batched", [&] { return probe(matmul(a, b), w); }, {{"a", a}, {"b", b}}));
  }
  {
    Tensor a = s.param({3, 4}), w = s.constant({4, 3});
    out.push_back(check("transpose", [&] { return probe(transpose(a), w); }, {{"a", a}}));
  }
  {
    Tensor a = s.param({3, 4}), b = s.param({3, 4}), w = s.constant({3, 4});
    out.push_back(check("add", [&] { return probe(add(a, b), w); }, {{"a", a}, {"b", b}}));
    out.push_back(check("sub", [&] { return probe(sub(a, b), w); }, {{"a", a}, {"b", b}}));
    out.push_back(check("mul", [&] { return probe(mul(a, b), w); }, {{"a", a}, {"b", b}}));
    out.push_back(check("scale", [&] { return probe(scale(a, -1.7), w); }, {{"a", a}}));
    out.push_back(check("square", [&] { return probe(square(a), w); }, {{"a", a}}));
    out.push_back(check("relu", [&] { return probe(relu(a), w); }, {{"a", a}}));
    out.push_back(check("softmax_lastdim", [&] { return probe(softmax_lastdim(a), w); }, {{"a", a}}));
  }
  {
    Tensor a = s.param({3, 4}), row = s.param({4}), w = s.constant({3, 4});
    out.push_back(check("add_rowvec", [&] { return probe(add_rowvec(a, row), w); }, {{"a", a}, {"row", row}}));
  }
  {
    Tensor a = s.param({2, 3});
    out.push_back(check("sum", [&] { return sum(a); }, {{"a", a}}));
    out.push_back(check("mean", [&] { return mean(square(a)); }, {{"a", a}}));
    Tensor w = s.constant({3, 2});
    out.push_back(check("reshape", [&] { return probe(reshape(a, {3, 2}), w); }, {{"a", a}}));
  }
  {
    Tensor x = s.param({3, 5}), g = s.param({5}), b = s.param({5}), w = s.constant({3, 5});
    out.push_back(check("layer_norm", [&] { return probe(layer_norm(x, g, b), w); }, {{"x", x}, {"gain", g}, {"bias", b}}));
  }
  {
    Tensor a = s.param({2, 3}), b = s.param({2, 2}), w = s.constant({2, 5});
    out.push_back(check("concat", [&] { return probe(concat({a, b}, 1), w); }, {{"a", a}, {"b", b}}));
    Tensor w2 = s.constant({2, 2});
    out.push_back(check("slice", [&] { return probe(slice(a, 1, 1, 2), w2); }, {{"a", a}}));
  }
  {
    Tensor x = s.param({4, 3}), w = s.constant({3});
    const Mask mask{1, 0, 1, 1};
    out.push_back(check("masked_mean_pool", [&] { return probe(masked_mean_pool(x, mask), w); }, {{"x", x}}));
  }

  const std::size_t d = 8, heads = 2, ff = 16;
  {
    auto p = AttentionParams::zeros(d, heads);
    for (Tensor* t : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) *t = s.param({d, d});
    Tensor q = s.param({3, d}), kv = s.param({5, d}), w = s.constant({3, d});
    const Mask mask{1, 1, 0, 1, 1};
    out.push_back(check("multi_head_attention", [&] { return probe(multi_head_attention(p, q, kv, mask), w); },
                        {{"w_q", p.w_q}, {"w_k", p.w_k}, {"w_v", p.w_v}, {"w_o", p.w_o}, {"query", q}, {"kv", kv}}));
  }
  {
    auto p = FfnParams::zeros(d, ff);
    std::vector<NamedTensor> params;
    for (std::size_t i = 0; i < 3; ++i) {
      p.layers[i].weight = s.param(p.layers[i].weight.shape());
      p.layers[i].bias = s.param(p.layers[i].bias.shape());
      params.emplace_back("ffn." + std::to_string(i) + ".weight", p.layers[i].weight);
      params.emplace_back("ffn." + std::to_string(i) + ".bias", p.layers[i].bias);
    }
    Tensor x = s.param({3, d}), w = s.constant({3, d});
    params.emplace_back("x", x);
    out.push_back(check("pointwise_ffn", [&] { return probe(pointwise_ffn(p, x), w); }, params));
  }

  ModelConfig cfg;
  cfg.d_in_text = 5;
  cfg.d_in_audio = 4;
  cfg.d_model = d;
  cfg.num_heads = heads;
  cfg.fusion_layers = 2;
  cfg.d_ff = ff;
  cfg.variant = RestorationVariant::transformer_restore;
  MmmlModel model = init_model(cfg, seed + 1);
  randomize(model, s);
  {
    const auto& layer = model.text.layers.front();
    Tensor q = s.constant({3, d}), kv = s.constant({4, d}), w = s.constant({3, d});
    const Mask mask{1, 1, 1, 0};
    std::vector<NamedTensor> params;
    for (auto& p : model.parameters()) {
      if (p.first.rfind("text.encoder.0.", 0) == 0) params.push_back(p);
    }
    out.push_back(check("encoder_layer", [&] { return probe(encoder_layer(layer, q, kv, mask), w); }, params));
  }
  {
    Tensor fq = s.constant({3, d}), fkv = s.constant({4, d}), w = s.constant({3, d});
    const Mask qmask{1, 1, 1}, kvmask{1, 0, 1, 1};
    std::vector<NamedTensor> params;
    for (auto& p : model.parameters()) {
      if (p.first.rfind("branch_text.", 0) == 0 && p.first.find(".restore.") == std::string::npos) params.push_back(p);
    }
    out.push_back(check("fusion_branch", [&] {
      return probe(fusion_branch(model, model.text_query, fq, fkv, qmask, kvmask), w);
    }, params));
  }
  {
    Tensor orig = s.constant({3, d}), fused = s.constant({3, d}), w = s.constant({3, d});
    const Mask mask{1, 1, 0};
    std::vector<NamedTensor> params;
    for (auto& p : model.parameters()) {
      if (p.first.rfind("branch_audio.restore.", 0) == 0) params.push_back(p);
    }
    out.push_back(check("apply_restoration", [&] {
      return probe(apply_restoration(model, model.audio_query, orig, fused, mask), w);
    }, params));
  }
  {
    ModelConfig full = cfg;
    full.variant = RestorationVariant::fused_only;
    MmmlModel m = init_model(full, seed + 2);
    randomize(m, s);
    GeneratorConfig g;
    g.n_samples = 2;
    g.d_in_text = cfg.d_in_text;
    g.d_in_audio = cfg.d_in_audio;
    g.min_length = 2;
    g.max_length = 4;
    g.style = TaskStyle::sims;
    g.seed = seed;
    const Batch batch = make_batch(generate(g));
    out.push_back(check("full_model_multi_loss", [&] {
      return multi_loss(forward(m, batch), batch.targets, LossWeights{1.0, 1.0, 1.0});
    }, m.parameters()));
  }
  return out;
}

}  // namespace mmml
