#include "mmml/experiment.hpp"

#include <cstdio>
#include <map>
#include <sstream>

#include <json.hpp>

#include "mmml/errors.hpp"

namespace mmml {

using nlohmann::json;

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key) && !j[key].is_null()) out = j[key].get<T>();
}

}  // namespace

ExperimentConfig experiment_from_json(const std::string& text, ExperimentConfig c) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    if (j.contains("model")) {
      const auto& m = j["model"];
      read(m, "d_model", c.model.d_model);
      read(m, "num_heads", c.model.num_heads);
      read(m, "fusion_layers", c.model.fusion_layers);
      read(m, "d_ff", c.model.d_ff);
      read(m, "feature_encoder_layers", c.model.feature_encoder_layers);
      read(m, "positional_encoding", c.model.positional_encoding);
      if (m.contains("variant")) c.model.variant = parse_variant(m["variant"].get<std::string>());
      if (m.contains("fusion")) c.model.fusion = parse_fusion_kind(m["fusion"].get<std::string>());
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      read(t, "learning_rate", c.train.learning_rate);
      read(t, "batch_size", c.train.batch_size);
      read(t, "patience", c.train.patience);
      read(t, "max_epochs", c.train.max_epochs);
      read(t, "weight_decay", c.train.weight_decay);
      read(t, "eps", c.train.eps);
      if (t.contains("betas")) {
        auto b = t["betas"].get<std::vector<double>>();
        if (b.size() != 2) throw ConfigError("train.betas needs two values");
        c.train.beta1 = b[0];
        c.train.beta2 = b[1];
      }
      if (t.contains("alphas")) {
        auto a = t["alphas"].get<std::vector<double>>();
        if (a.size() != 3) throw ConfigError("train.alphas needs three values (audio, text, fused)");
        c.train.alphas = {a[0], a[1], a[2]};
      }
      if (t.contains("loss")) c.train.loss_mode = parse_loss_mode(t["loss"].get<std::string>());
    }
    if (j.contains("data")) {
      const auto& d = j["data"];
      if (d.contains("path") && !d["path"].is_null()) c.data_path = d["path"].get<std::string>();
      read(d, "n_samples", c.generator.n_samples);
      if (d.contains("style")) c.generator.style = parse_task_style(d["style"].get<std::string>());
      read(d, "d_in_text", c.generator.d_in_text);
      read(d, "d_in_audio", c.generator.d_in_audio);
      read(d, "min_length", c.generator.min_length);
      read(d, "max_length", c.generator.max_length);
      read(d, "sigma_t", c.generator.sigma_text);
      read(d, "sigma_a", c.generator.sigma_audio);
      read(d, "sigma_e", c.generator.sigma_embedding);
      read(d, "min_dialogue", c.generator.min_dialogue);
      read(d, "max_dialogue", c.generator.max_dialogue);
      read(d, "rho", c.generator.rho);
      if (d.contains("modality_labels") && !d["modality_labels"].is_null()) {
        c.generator.modality_labels = d["modality_labels"].get<bool>();
      }
      read(d, "seed", c.generator.seed);
      if (d.contains("split")) {
        auto s = d["split"].get<std::vector<double>>();
        if (s.size() != 3) throw ConfigError("data.split needs three fractions");
        c.split_fractions = {s[0], s[1], s[2]};
      }
      read(d, "split_seed", c.split_seed);
    }
    if (j.contains("context")) {
      const auto& x = j["context"];
      if (x.contains("method")) c.model.context.method = parse_context_method(x["method"].get<std::string>());
      read(x, "text_window", c.model.context.text_window);
      read(x, "audio_window", c.model.context.audio_window);
    }
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("out")) c.out_dir = j["out"].get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  if (c.seeds.empty()) throw ConfigError("at least one seed is required");
  return c;
}

std::string experiment_to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = {{"d_model", c.model.d_model},
                {"num_heads", c.model.num_heads},
                {"fusion_layers", c.model.fusion_layers},
                {"d_ff", c.model.d_ff},
                {"feature_encoder_layers", c.model.feature_encoder_layers},
                {"variant", to_string(c.model.variant)},
                {"fusion", to_string(c.model.fusion)},
                {"positional_encoding", c.model.positional_encoding}};
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"batch_size", c.train.batch_size},
                {"patience", c.train.patience},
                {"max_epochs", c.train.max_epochs},
                {"weight_decay", c.train.weight_decay},
                {"betas", {c.train.beta1, c.train.beta2}},
                {"eps", c.train.eps},
                {"alphas", {c.train.alphas.audio, c.train.alphas.text, c.train.alphas.fused}},
                {"loss", to_string(c.train.loss_mode)}};
  nlohmann::ordered_json data = {{"n_samples", c.generator.n_samples},
                                 {"style", to_string(c.generator.style)},
                                 {"d_in_text", c.generator.d_in_text},
                                 {"d_in_audio", c.generator.d_in_audio},
                                 {"min_length", c.generator.min_length},
                                 {"max_length", c.generator.max_length},
                                 {"sigma_t", c.generator.sigma_text},
                                 {"sigma_a", c.generator.sigma_audio},
                                 {"sigma_e", c.generator.sigma_embedding},
                                 {"min_dialogue", c.generator.min_dialogue},
                                 {"max_dialogue", c.generator.max_dialogue},
                                 {"rho", c.generator.rho},
                                 {"modality_labels", c.generator.emits_modality_labels()},
                                 {"seed", c.generator.seed},
                                 {"split", c.split_fractions},
                                 {"split_seed", c.split_seed}};
  if (c.data_path) data["path"] = c.data_path->string();
  j["data"] = data;
  j["context"] = {{"method", to_string(c.model.context.method)},
                  {"text_window", c.model.context.text_window},
                  {"audio_window", c.model.context.audio_window}};
  j["seeds"] = c.seeds;
  j["out"] = c.out_dir.string();
  return j.dump(2);
}

std::vector<UtteranceSample> load_or_generate(const ExperimentConfig& config, std::uint64_t run_seed) {
  if (config.data_path) return load_jsonl(*config.data_path);
  GeneratorConfig g = config.generator;
  g.seed += run_seed;
  return generate(g);
}

DataSplit prepare_splits(const ExperimentConfig& config, const std::vector<UtteranceSample>& samples) {
  return split(assemble_context(samples, config.model.context), config.split_fractions, config.split_seed);
}

void adopt_input_widths(ModelConfig& model, const std::vector<UtteranceSample>& samples) {
  if (samples.empty()) throw ContractError("dataset is empty");
  model.d_in_text = samples.front().text_seq.dim(1);
  model.d_in_audio = samples.front().audio_seq.dim(1);
}

EvalPairs head_pairs(const MmmlModel& model, const std::vector<UtteranceSample>& samples, Head head,
                     std::size_t batch_size) {
  if (samples.empty()) throw ContractError("evaluation split is empty");
  auto out = head_outputs(model, samples, head, batch_size);
  return {std::move(out.predictions), std::move(out.targets), samples.front().style};
}

RunResult run_training(ExperimentConfig config, const std::vector<UtteranceSample>& samples, std::uint64_t run_seed) {
  adopt_input_widths(config.model, samples);
  DataSplit data = prepare_splits(config, samples);
  if (data.train.empty() || data.val.empty()) throw ContractError("train or validation split is empty");
  config.train.seed = run_seed;
  MmmlModel model = init_model(config.model, run_seed);
  TrainHistory history = train(model, data.train, data.val, config.train);
  return {std::move(model), std::move(history), std::move(data)};
}

// ---- ablations --------------------------------------------------------------

std::string to_string(Suite suite) {
  switch (suite) {
    case Suite::fusion: return "fusion";
    case Suite::restoration: return "restoration";
    case Suite::multiloss: return "multiloss";
    case Suite::context: return "context";
  }
  return "fusion";
}

Suite parse_suite(const std::string& text) {
  if (text == "fusion") return Suite::fusion;
  if (text == "restoration") return Suite::restoration;
  if (text == "multiloss") return Suite::multiloss;
  if (text == "context") return Suite::context;
  throw ConfigError("unknown suite '" + text + "' (expected fusion|restoration|multiloss|context)");
}

namespace {

void text_only(ExperimentConfig& c) {
  c.train.loss_mode = LossMode::multi;
  c.train.alphas = {0.0, 1.0, 0.0};
}

}  // namespace

std::vector<ArmSpec> suite_arms(Suite suite) {
  std::vector<ArmSpec> arms;
  switch (suite) {
    case Suite::fusion:
      arms.push_back({"text_only", text_only, false, {Head::text}});
      arms.push_back({"concatenation", [](ExperimentConfig& c) {
                        c.model.fusion = FusionKind::concatenation;
                        c.model.variant = RestorationVariant::fused_only;
                      }});
      arms.push_back({"transformer", [](ExperimentConfig& c) { c.model.fusion = FusionKind::transformer; }});
      break;
    case Suite::restoration:
      for (auto v : {RestorationVariant::fused_only, RestorationVariant::concat_restore,
                     RestorationVariant::transformer_restore}) {
        arms.push_back({to_string(v), [v](ExperimentConfig& c) {
                          c.model.fusion = FusionKind::transformer;
                          c.model.variant = v;
                        }});
      }
      break;
    case Suite::multiloss:
      for (bool duplicated : {true, false}) {
        const std::string labels = duplicated ? "duplicated" : "distinct";
        arms.push_back({"single_" + labels, [](ExperimentConfig& c) { c.train.loss_mode = LossMode::single; },
                        duplicated});
        arms.push_back({"multi_" + labels,
                        [](ExperimentConfig& c) {
                          c.train.loss_mode = LossMode::multi;
                          c.train.alphas = {1.0, 1.0, 1.0};
                        },
                        duplicated,
                        {Head::fused, Head::text}});
      }
      arms.push_back({"text_only_distinct", text_only, false, {Head::text}});
      break;
    case Suite::context:
      for (auto method : {ContextMethod::concatenation, ContextMethod::independent}) {
        for (std::size_t w = 0; w <= 3; ++w) {
          arms.push_back({to_string(method) + "_w" + std::to_string(w), [method, w](ExperimentConfig& c) {
                            c.model.context.method = method;
                            c.model.context.text_window = w;
                          }});
        }
      }
      break;
  }
  return arms;
}

const AblationRow* AblationResult::mean(const std::string& arm, Head head) const {
  for (const auto& r : mean_rows) {
    if (r.arm == arm && r.head == head) return &r;
  }
  return nullptr;
}

MetricsReport mean_report(const std::vector<const MetricsReport*>& reports) {
  if (reports.empty()) throw ContractError("mean_report: no reports");
  MetricsReport out;
  out.style = reports.front()->style;
  for (std::size_t f = 0; f < reports.front()->fields.size(); ++f) {
    std::optional<double> total = 0.0;
    for (const auto* r : reports) {
      const auto& v = r->fields.at(f).second;
      if (!v || !total) {
        total.reset();
        continue;
      }
      *total += *v;
    }
    if (total) *total /= static_cast<double>(reports.size());
    out.fields.emplace_back(reports.front()->fields[f].first, total);
  }
  return out;
}

namespace {

std::string row_csv(const AblationRow& r) {
  std::string out = r.arm + "," + to_string(r.head) + "," + (r.seed ? std::to_string(*r.seed) : "mean") + "," +
                    std::to_string(r.parameter_count) + "," + std::to_string(r.epochs) + "," + r.report.csv_row();
  return out;
}

nlohmann::ordered_json row_json(const AblationRow& r) {
  nlohmann::ordered_json j;
  j["arm"] = r.arm;
  j["head"] = to_string(r.head);
  if (r.seed) j["seed"] = *r.seed;
  else j["seed"] = "mean";
  j["parameter_count"] = r.parameter_count;
  j["epochs"] = r.epochs;
  j["metrics"] = nlohmann::ordered_json::parse(r.report.to_json());
  return j;
}

}  // namespace

std::string AblationResult::to_csv() const {
  if (seed_rows.empty()) return "";
  std::string out = "arm,head,seed,parameter_count,epochs," + seed_rows.front().report.csv_header() + "\n";
  for (const auto& r : seed_rows) out += row_csv(r) + "\n";
  for (const auto& r : mean_rows) out += row_csv(r) + "\n";
  return out;
}

std::string AblationResult::to_json() const {
  nlohmann::ordered_json j;
  j["suite"] = to_string(suite);
  j["runs"] = nlohmann::ordered_json::array();
  for (const auto& r : seed_rows) j["runs"].push_back(row_json(r));
  j["means"] = nlohmann::ordered_json::array();
  for (const auto& r : mean_rows) j["means"].push_back(row_json(r));
  return j.dump(2);
}

AblationResult run_ablation(Suite suite, const ExperimentConfig& config, const ProgressFn& progress) {
  return run_arms(suite, suite_arms(suite), config, progress);
}

AblationResult run_arms(Suite suite, const std::vector<ArmSpec>& arms, const ExperimentConfig& config,
                        const ProgressFn& progress) {
  if (config.seeds.empty()) throw ConfigError("at least one seed is required");
  AblationResult result;
  result.suite = suite;
  for (std::uint64_t seed : config.seeds) {
    const auto samples = load_or_generate(config, seed);
    for (const auto& arm : arms) {
      ExperimentConfig arm_config = config;
      if (arm.configure) arm.configure(arm_config);
      const auto data = arm.duplicate_labels ? drop_modality_labels(samples) : samples;
      try {
        RunResult run = run_training(arm_config, data, seed);
        if (run.data.test.empty()) throw ContractError("test split is empty");
        for (Head head : arm.heads) {
          AblationRow row{arm.name, head, seed, full_report(head_pairs(run.model, run.data.test, head)),
                          run.model.parameter_count(), run.history.epochs.size()};
          if (progress) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%s seed=%llu head=%s epochs=%zu test_mae=%.4f", arm.name.c_str(),
                          static_cast<unsigned long long>(seed), to_string(head).c_str(), row.epochs,
                          row.report.get("mae").value_or(-1.0));
            progress(buf);
          }
          result.seed_rows.push_back(std::move(row));
        }
      } catch (const Error& e) {
        throw Error("ablation arm '" + arm.name + "' (seed " + std::to_string(seed) + ") failed: " + e.what());
      }
    }
  }
  for (const auto& arm : arms) {
    for (Head head : arm.heads) {
      std::vector<const MetricsReport*> reports;
      std::size_t params = 0;
      double epochs = 0.0;
      for (const auto& r : result.seed_rows) {
        if (r.arm == arm.name && r.head == head) {
          reports.push_back(&r.report);
          params = r.parameter_count;
          epochs += static_cast<double>(r.epochs);
        }
      }
      AblationRow mean_row{arm.name, head, std::nullopt, mean_report(reports), params,
                           static_cast<std::size_t>(epochs / static_cast<double>(reports.size()) + 0.5)};
      result.mean_rows.push_back(std::move(mean_row));
    }
  }
  return result;
}

}  // namespace mmml
