// mmml: generate data, train, evaluate, run ablation suites and gradient checks.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "mmml/errors.hpp"
#include "mmml/experiment.hpp"

namespace fs = std::filesystem;
using namespace mmml;

namespace {

enum class LogLevel { quiet = 0, info = 1, debug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("MMML_LOG");
  if (!env) return LogLevel::info;
  const std::string v = env;
  if (v == "quiet" || v == "error" || v == "0") return LogLevel::quiet;
  if (v == "debug" || v == "2") return LogLevel::debug;
  return LogLevel::info;
}

void log(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) <= static_cast<int>(log_level())) std::cerr << "[mmml] " << msg << '\n';
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(text)) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(s, &used));
      if (used != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw ConfigError("invalid seed '" + s + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("--seed needs at least one value");
  return seeds;
}

LossWeights parse_alphas(const std::string& text) {
  const auto parts = split_list(text);
  if (parts.size() != 3) throw ConfigError("--alphas expects three values a,t,f");
  try {
    return {std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2])};
  } catch (const std::exception&) {
    throw ConfigError("invalid --alphas '" + text + "'");
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text, bool force) {
  if (fs::exists(path) && !force) {
    throw FileError("refusing to overwrite '" + path.string() + "' (pass --force)");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw FileError("write to '" + path.string() + "' failed");
}

void guard_output(const fs::path& path, bool force) {
  if (fs::exists(path) && !force) throw FileError("refusing to overwrite '" + path.string() + "' (pass --force)");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

// Flag values collected before being applied on top of the config file.
struct Flags {
  std::string config;
  std::string data;
  std::string out;
  std::string seeds;
  std::string style;
  std::string variant;
  std::string fusion;
  std::string loss;
  std::string alphas;
  std::string context_method;
  std::optional<std::size_t> text_window, audio_window;
  std::string head = "fused";
  bool force = false;

  std::optional<std::size_t> n;
  std::optional<double> sigma_t, sigma_a, sigma_e, rho, lr;
  std::string modality_labels;
  std::optional<std::size_t> max_epochs, patience, batch_size, d_model, num_heads, fusion_layers, d_ff;
  std::optional<std::uint64_t> data_seed;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON experiment config");
  cmd->add_option("--data", f.data, "JSONL dataset (default: synthetic data)");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seeds, "seed or comma-separated seeds");
  cmd->add_option("--style", f.style, "mosi|sims");
  cmd->add_flag("--force", f.force, "overwrite existing outputs");
}

void add_data_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--n", f.n, "number of synthetic samples");
  cmd->add_option("--sigma-t", f.sigma_t, "text label noise");
  cmd->add_option("--sigma-a", f.sigma_a, "audio label noise");
  cmd->add_option("--sigma-e", f.sigma_e, "embedding noise");
  cmd->add_option("--rho", f.rho, "dialogue autocorrelation");
  cmd->add_option("--modality-labels", f.modality_labels, "on|off: emit label_t/label_a");
  cmd->add_option("--data-seed", f.data_seed, "generator seed");
}

void add_model_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--variant", f.variant, "fused_only|concat_restore|transformer_restore");
  cmd->add_option("--fusion", f.fusion, "transformer|concatenation");
  cmd->add_option("--loss", f.loss, "single|multi");
  cmd->add_option("--alphas", f.alphas, "loss weights a,t,f");
  cmd->add_option("--context-method", f.context_method, "none|concatenation|independent");
  cmd->add_option("--text-window", f.text_window, "text context window");
  cmd->add_option("--audio-window", f.audio_window, "audio context window");
  cmd->add_option("--lr", f.lr, "learning rate");
  cmd->add_option("--max-epochs", f.max_epochs, "epoch limit");
  cmd->add_option("--patience", f.patience, "early-stopping patience");
  cmd->add_option("--batch-size", f.batch_size, "batch size");
  cmd->add_option("--d-model", f.d_model, "model width");
  cmd->add_option("--heads", f.num_heads, "attention heads");
  cmd->add_option("--fusion-layers", f.fusion_layers, "fusion stack depth");
  cmd->add_option("--d-ff", f.d_ff, "feed-forward width (0 = 4*d_model)");
}

ExperimentConfig build_config(const Flags& f) {
  ExperimentConfig c;
  if (!f.config.empty()) c = experiment_from_json(read_file(f.config));
  if (!f.data.empty()) c.data_path = fs::path(f.data);
  if (!f.out.empty()) c.out_dir = f.out;
  if (!f.seeds.empty()) c.seeds = parse_seeds(f.seeds);
  if (!f.style.empty()) c.generator.style = parse_task_style(f.style);
  if (!f.variant.empty()) c.model.variant = parse_variant(f.variant);
  if (!f.fusion.empty()) c.model.fusion = parse_fusion_kind(f.fusion);
  if (!f.loss.empty()) c.train.loss_mode = parse_loss_mode(f.loss);
  if (!f.alphas.empty()) c.train.alphas = parse_alphas(f.alphas);
  if (!f.context_method.empty()) c.model.context.method = parse_context_method(f.context_method);
  if (f.text_window) c.model.context.text_window = *f.text_window;
  if (f.audio_window) c.model.context.audio_window = *f.audio_window;
  if (f.n) c.generator.n_samples = *f.n;
  if (f.sigma_t) c.generator.sigma_text = *f.sigma_t;
  if (f.sigma_a) c.generator.sigma_audio = *f.sigma_a;
  if (f.sigma_e) c.generator.sigma_embedding = *f.sigma_e;
  if (f.rho) c.generator.rho = *f.rho;
  if (f.data_seed) c.generator.seed = *f.data_seed;
  if (!f.modality_labels.empty()) {
    if (f.modality_labels != "on" && f.modality_labels != "off") throw ConfigError("--modality-labels expects on|off");
    c.generator.modality_labels = f.modality_labels == "on";
  }
  if (f.lr) c.train.learning_rate = *f.lr;
  if (f.max_epochs) c.train.max_epochs = *f.max_epochs;
  if (f.patience) c.train.patience = *f.patience;
  if (f.batch_size) c.train.batch_size = *f.batch_size;
  if (f.d_model) c.model.d_model = *f.d_model;
  if (f.num_heads) c.model.num_heads = *f.num_heads;
  if (f.fusion_layers) c.model.fusion_layers = *f.fusion_layers;
  if (f.d_ff) c.model.d_ff = *f.d_ff;
  return c;
}

std::string label_stats(const std::vector<UtteranceSample>& samples) {
  double lo = samples.front().label_f, hi = lo, total = 0.0, sq = 0.0;
  for (const auto& s : samples) {
    lo = std::min(lo, s.label_f);
    hi = std::max(hi, s.label_f);
    total += s.label_f;
    sq += s.label_f * s.label_f;
  }
  const double n = static_cast<double>(samples.size());
  const double m = total / n;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "labels: mean %.4f std %.4f min %.4f max %.4f", m,
                std::sqrt(std::max(0.0, sq / n - m * m)), lo, hi);
  return buf;
}

int cmd_generate(const Flags& f) {
  ExperimentConfig c = build_config(f);
  c.generator.seed += c.seeds.front();
  const auto samples = generate(c.generator);
  const fs::path path = c.out_dir / "dataset.jsonl";
  guard_output(path, f.force);
  save_jsonl(samples, path);
  std::cout << "wrote " << samples.size() << " samples to " << path.string() << '\n' << label_stats(samples) << '\n';
  return 0;
}

std::vector<UtteranceSample> load_data(const ExperimentConfig& c, std::uint64_t seed) {
  auto samples = load_or_generate(c, seed);
  if (samples.empty()) throw ContractError("dataset is empty");
  return samples;
}

int cmd_train(const Flags& f) {
  ExperimentConfig c = build_config(f);
  const std::uint64_t seed = c.seeds.front();
  const auto samples = load_data(c, seed);

  const fs::path model_path = c.out_dir / "model.mmml";
  const fs::path history_path = c.out_dir / "history.csv";
  guard_output(model_path, f.force);
  guard_output(history_path, f.force);

  log(LogLevel::info, "training on " + std::to_string(samples.size()) + " samples, seed " + std::to_string(seed));
  RunResult run = run_training(c, samples, seed);
  save_model(run.model, model_path);
  write_file(history_path, history_csv(run.history), true);
  write_file(c.out_dir / "config.json", experiment_to_json(c), true);
  if (!c.data_path) {
    const fs::path data_path = c.out_dir / "dataset.jsonl";
    guard_output(data_path, f.force);
    save_jsonl(samples, data_path);
  }

  const Head head = c.train.monitored_head();
  std::cout << "epochs " << run.history.epochs.size() << " (best " << run.history.best_epoch << ", "
            << run.history.stop_reason << ")\n";
  for (const auto& [name, part] : {std::pair{"train", &run.data.train}, std::pair{"val", &run.data.val},
                                   std::pair{"test", &run.data.test}}) {
    if (part->empty()) continue;
    const auto report = full_report(head_pairs(run.model, *part, head));
    std::cout << name << " " << to_string(head) << " " << report.to_json() << '\n';
  }
  return 0;
}

int cmd_eval(const Flags& f, const std::string& model_path, const std::string& split_name) {
  ExperimentConfig c = build_config(f);
  if (model_path.empty()) throw ConfigError("eval needs --model");
  const MmmlModel model = load_model(model_path);
  c.model = model.config;
  const auto samples = load_data(c, c.seeds.front());
  if (samples.front().text_seq.dim(1) != model.config.d_in_text ||
      samples.front().audio_seq.dim(1) != model.config.d_in_audio) {
    throw DimensionError("data widths (" + std::to_string(samples.front().text_seq.dim(1)) + ", " +
                         std::to_string(samples.front().audio_seq.dim(1)) + ") do not match the model's (" +
                         std::to_string(model.config.d_in_text) + ", " + std::to_string(model.config.d_in_audio) + ")");
  }
  const DataSplit parts = prepare_splits(c, samples);
  std::vector<UtteranceSample> chosen;
  if (split_name == "train") chosen = parts.train;
  else if (split_name == "val") chosen = parts.val;
  else if (split_name == "test") chosen = parts.test;
  else if (split_name == "all") chosen = assemble_context(samples, c.model.context);
  else throw ConfigError("unknown split '" + split_name + "' (expected train|val|test|all)");
  if (chosen.empty()) throw ContractError("split '" + split_name + "' is empty");

  const Head head = parse_head(f.head);
  const auto report = full_report(head_pairs(model, chosen, head));
  std::cout << report.to_json() << '\n';
  if (!f.out.empty()) {
    const std::string stem = "metrics_" + split_name + "_" + to_string(head);
    write_file(c.out_dir / (stem + ".json"), report.to_json() + "\n", f.force);
    write_file(c.out_dir / (stem + ".csv"), report.csv_header() + "\n" + report.csv_row() + "\n", f.force);
  }
  return 0;
}

int cmd_ablate(const Flags& f, const std::string& suite_name) {
  const ExperimentConfig c = build_config(f);
  const Suite suite = parse_suite(suite_name);
  const fs::path csv = c.out_dir / ("ablate_" + suite_name + ".csv");
  const fs::path js = c.out_dir / ("ablate_" + suite_name + ".json");
  guard_output(csv, f.force);
  guard_output(js, f.force);

  const auto result = run_ablation(suite, c, [](const std::string& m) { log(LogLevel::info, m); });
  write_file(csv, result.to_csv(), true);
  write_file(js, result.to_json() + "\n", true);
  for (const auto& r : result.mean_rows) {
    char buf[200];
    std::snprintf(buf, sizeof(buf), "%-24s %-6s params=%-7zu mae=%.4f corr=%.4f", r.arm.c_str(),
                  to_string(r.head).c_str(), r.parameter_count, r.report.get("mae").value_or(NAN),
                  r.report.get("corr").value_or(NAN));
    std::cout << buf << '\n';
  }
  std::cout << "wrote " << csv.string() << " and " << js.string() << '\n';
  return 0;
}

int cmd_gradcheck(const Flags& f, const std::string& corrupt) {
  if (!corrupt.empty()) testing::set_corrupted_backward(corrupt);
  const std::uint64_t seed = f.seeds.empty() ? 0 : parse_seeds(f.seeds).front();
  const auto entries = run_gradcheck(seed);
  bool ok = true;
  for (const auto& e : entries) {
    const bool pass = e.max_rel_error < kGradcheckTolerance;
    ok = ok && pass;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-24s coords=%-7zu max_rel_error=%.3e %s", e.component.c_str(), e.coordinates,
                  e.max_rel_error, pass ? "ok" : "FAIL");
    std::cout << buf << '\n';
  }
  std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << '\n';
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal multi-loss fusion network: data, training, evaluation, ablations"};
  app.require_subcommand(1);
  Flags flags;

  auto* gen = app.add_subcommand("generate", "write a synthetic JSONL dataset to <out>/dataset.jsonl");
  add_common(gen, flags);
  add_data_flags(gen, flags);

  auto* tr = app.add_subcommand("train", "train a model; writes model.mmml and history.csv to <out>");
  add_common(tr, flags);
  add_data_flags(tr, flags);
  add_model_flags(tr, flags);

  std::string model_path, split_name = "test";
  auto* ev = app.add_subcommand("eval", "evaluate a saved model on a data split");
  add_common(ev, flags);
  add_data_flags(ev, flags);
  ev->add_option("--model", model_path, "model file")->required();
  ev->add_option("--split", split_name, "train|val|test|all");
  ev->add_option("--head", flags.head, "fused|text|audio");
  ev->add_option("--context-method", flags.context_method, "ignored: taken from the model");

  std::string suite_name;
  auto* ab = app.add_subcommand("ablate", "run an ablation suite over all seeds");
  ab->add_option("suite", suite_name, "fusion|restoration|multiloss|context")->required();
  add_common(ab, flags);
  add_data_flags(ab, flags);
  add_model_flags(ab, flags);

  std::string corrupt;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every operation and the full model");
  gc->add_option("--seed", flags.seeds, "random seed");
  gc->add_option("--corrupt-op", corrupt, "scale one backward rule (detector self-test)")->group("");
  gc->add_option("--config", flags.config, "unused; accepted for symmetry");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_generate(flags);
    if (*tr) return cmd_train(flags);
    if (*ev) return cmd_eval(flags, model_path, split_name);
    if (*ab) return cmd_ablate(flags, suite_name);
    if (*gc) return cmd_gradcheck(flags, corrupt);
  } catch (const mmml::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
