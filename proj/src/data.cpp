#include "mmml/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <unordered_map>

#include <json.hpp>

#include "mmml/errors.hpp"

namespace mmml {

using nlohmann::json;

std::string to_string(TaskStyle style) { return style == TaskStyle::mosi ? "mosi" : "sims"; }

TaskStyle parse_task_style(const std::string& text) {
  if (text == "mosi") return TaskStyle::mosi;
  if (text == "sims") return TaskStyle::sims;
  throw ConfigError("unknown task style '" + text + "' (expected mosi|sims)");
}

double label_bound(TaskStyle style) { return style == TaskStyle::mosi ? 3.0 : 1.0; }

std::string to_string(ContextMethod method) {
  switch (method) {
    case ContextMethod::none: return "none";
    case ContextMethod::concatenation: return "concatenation";
    case ContextMethod::independent: return "independent";
  }
  return "none";
}

ContextMethod parse_context_method(const std::string& text) {
  if (text == "none") return ContextMethod::none;
  if (text == "concatenation" || text == "concat") return ContextMethod::concatenation;
  if (text == "independent") return ContextMethod::independent;
  throw ConfigError("unknown context method '" + text + "' (expected none|concatenation|independent)");
}

namespace {

bool tensors_equal(const Tensor& a, const Tensor& b) {
  if (a.defined() != b.defined()) return false;
  if (!a.defined()) return true;
  if (a.shape() != b.shape()) return false;
  auto da = a.data();
  auto db = b.data();
  return std::equal(da.begin(), da.end(), db.begin());
}

bool optional_tensors_equal(const std::optional<Tensor>& a, const std::optional<Tensor>& b) {
  if (a.has_value() != b.has_value()) return false;
  return !a || tensors_equal(*a, *b);
}

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t index, std::uint32_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), tag};
  return std::mt19937_64(seq);
}

std::vector<double> unit_direction(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> u(d);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& x : u) {
      x = normal(rng);
      norm += x * x;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (auto& x : u) x /= norm;
  return u;
}

Tensor encode_view(std::mt19937_64& rng, double value, const std::vector<double>& direction, std::size_t length,
                   double noise) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d = direction.size();
  std::vector<double> rows(length * d);
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t j = 0; j < d; ++j) rows[t * d + j] = value * direction[j] + noise * normal(rng);
  return Tensor::from_data({length, d}, std::move(rows));
}

}  // namespace

bool samples_equal(const UtteranceSample& a, const UtteranceSample& b) {
  return a.id == b.id && a.dialogue_id == b.dialogue_id && a.turn_index == b.turn_index &&
         tensors_equal(a.text_seq, b.text_seq) && tensors_equal(a.audio_seq, b.audio_seq) &&
         a.label_f == b.label_f && a.label_t == b.label_t && a.label_a == b.label_a && a.style == b.style &&
         optional_tensors_equal(a.text_context, b.text_context) &&
         optional_tensors_equal(a.audio_context, b.audio_context);
}

void GeneratorConfig::validate() const {
  if (n_samples == 0) throw ConfigError("generator: n_samples must be positive");
  if (d_in_text == 0 || d_in_audio == 0) throw ConfigError("generator: input widths must be positive");
  if (min_length == 0 || min_length > max_length) throw ConfigError("generator: invalid length range");
  if (min_dialogue == 0 || min_dialogue > max_dialogue) throw ConfigError("generator: invalid dialogue length range");
  if (!(sigma_text >= 0.0) || !(sigma_audio >= 0.0) || !(sigma_embedding >= 0.0)) {
    throw ConfigError("generator: noise levels must be nonnegative");
  }
  if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("generator: rho must lie in [0, 1)");
}

std::vector<UtteranceSample> generate(const GeneratorConfig& config) {
  config.validate();
  const double bound = label_bound(config.style);
  const double latent_std = bound / std::sqrt(3.0);
  const double innovation = std::sqrt(1.0 - config.rho * config.rho);
  const bool with_labels = config.emits_modality_labels();

  auto direction_rng = stream(config.seed, 0, 0xD17EC7u);
  const auto text_dir = unit_direction(direction_rng, config.d_in_text);
  const auto audio_dir = unit_direction(direction_rng, config.d_in_audio);

  std::vector<UtteranceSample> samples;
  samples.reserve(config.n_samples);
  for (std::uint64_t dialogue = 0; samples.size() < config.n_samples; ++dialogue) {
    auto rng = stream(config.seed, dialogue, 0xD1A106u);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> dialogue_len(config.min_dialogue, config.max_dialogue);
    std::uniform_int_distribution<std::size_t> seq_len(config.min_length, config.max_length);

    const std::size_t turns = std::min(dialogue_len(rng), config.n_samples - samples.size());
    double latent = 0.0;
    for (std::size_t turn = 0; turn < turns; ++turn) {
      const double shock = latent_std * normal(rng);
      latent = turn == 0 ? shock : config.rho * latent + innovation * shock;
      const double label = std::clamp(latent, -bound, bound);
      const double y_text = std::clamp(label + config.sigma_text * normal(rng), -bound, bound);
      const double y_audio = std::clamp(label + config.sigma_audio * normal(rng), -bound, bound);

      UtteranceSample s;
      s.dialogue_id = "d" + std::to_string(dialogue);
      s.id = s.dialogue_id + "_u" + std::to_string(turn);
      s.turn_index = turn;
      s.style = config.style;
      s.label_f = label;
      if (with_labels) {
        s.label_t = y_text;
        s.label_a = y_audio;
      }
      s.text_seq = encode_view(rng, y_text, text_dir, seq_len(rng), config.sigma_embedding);
      s.audio_seq = encode_view(rng, y_audio, audio_dir, seq_len(rng), config.sigma_embedding);
      samples.push_back(std::move(s));
    }
  }
  return samples;
}

// ---- JSONL ------------------------------------------------------------------

namespace {

json rows_to_json(const Tensor& t) {
  json rows = json::array();
  const std::size_t L = t.dim(0), d = t.dim(1);
  auto data = t.data();
  for (std::size_t i = 0; i < L; ++i) rows.push_back(std::vector<double>(data.begin() + i * d, data.begin() + (i + 1) * d));
  return rows;
}

Tensor rows_from_json(const json& rows, const char* field, std::size_t line) {
  if (!rows.is_array() || rows.empty()) throw FormatError("line " + std::to_string(line) + ": '" + field + "' must be a nonempty array of rows");
  std::vector<double> flat;
  std::size_t width = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (!row.is_array() || row.empty()) throw FormatError("line " + std::to_string(line) + ": '" + field + "' rows must be nonempty arrays");
    if (i == 0) width = row.size();
    if (row.size() != width) {
      throw FormatError("line " + std::to_string(line) + ": inconsistent embedding width inside '" + field + "'");
    }
    for (const auto& v : row) {
      if (!v.is_number()) throw ParseError(std::string("non-numeric value in '") + field + "'", line);
      flat.push_back(v.get<double>());
    }
  }
  return Tensor::from_data({rows.size(), width}, std::move(flat));
}

void check_label(double value, TaskStyle style, const char* field, std::size_t line) {
  const double bound = label_bound(style);
  if (!std::isfinite(value) || value < -bound || value > bound) {
    throw FormatError("line " + std::to_string(line) + ": " + field + " " + std::to_string(value) +
                      " outside the " + to_string(style) + " range");
  }
}

}  // namespace

void save_jsonl(const std::vector<UtteranceSample>& samples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot open '" + path.string() + "' for writing");
  for (const auto& s : samples) {
    json record;
    record["id"] = s.id;
    record["dialogue_id"] = s.dialogue_id;
    record["turn"] = s.turn_index;
    record["text_emb"] = rows_to_json(s.text_seq);
    record["audio_emb"] = rows_to_json(s.audio_seq);
    record["label"] = s.label_f;
    if (s.label_t) record["label_t"] = *s.label_t;
    if (s.label_a) record["label_a"] = *s.label_a;
    record["style"] = to_string(s.style);
    out << record.dump() << '\n';
  }
  if (!out) throw FileError("write to '" + path.string() + "' failed");
}

std::vector<UtteranceSample> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open dataset '" + path.string() + "'");
  std::vector<UtteranceSample> samples;
  std::string text;
  std::size_t line = 0;
  std::optional<std::size_t> text_width, audio_width;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json record;
    try {
      record = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(e.what(), line);
    }
    if (!record.is_object()) throw ParseError("record is not a JSON object", line);
    try {
      UtteranceSample s;
      s.id = record.at("id").get<std::string>();
      s.dialogue_id = record.at("dialogue_id").get<std::string>();
      const auto turn = record.at("turn").get<long long>();
      if (turn < 0) throw ParseError("turn must be nonnegative", line);
      s.turn_index = static_cast<std::size_t>(turn);
      s.style = parse_task_style(record.at("style").get<std::string>());
      s.label_f = record.at("label").get<double>();
      check_label(s.label_f, s.style, "label", line);
      if (record.contains("label_t") && !record["label_t"].is_null()) {
        s.label_t = record["label_t"].get<double>();
        check_label(*s.label_t, s.style, "label_t", line);
      }
      if (record.contains("label_a") && !record["label_a"].is_null()) {
        s.label_a = record["label_a"].get<double>();
        check_label(*s.label_a, s.style, "label_a", line);
      }
      s.text_seq = rows_from_json(record.at("text_emb"), "text_emb", line);
      s.audio_seq = rows_from_json(record.at("audio_emb"), "audio_emb", line);
      if (!text_width) text_width = s.text_seq.dim(1);
      if (!audio_width) audio_width = s.audio_seq.dim(1);
      if (s.text_seq.dim(1) != *text_width || s.audio_seq.dim(1) != *audio_width) {
        throw FormatError("line " + std::to_string(line) + ": embedding width differs from earlier records");
      }
      samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw ParseError(e.what(), line);
    } catch (const ConfigError& e) {
      throw ParseError(e.what(), line);
    }
  }
  return samples;
}

// ---- context ----------------------------------------------------------------

std::vector<UtteranceSample> assemble_context(const std::vector<UtteranceSample>& samples,
                                              const ContextConfig& config) {
  const std::size_t wt = config.effective_text_window();
  const std::size_t wa = config.effective_audio_window();
  if (wt == 0 && wa == 0) return samples;

  std::map<std::pair<std::string, std::size_t>, std::size_t> index;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!index.emplace(std::make_pair(samples[i].dialogue_id, samples[i].turn_index), i).second) {
      throw ContractError("assemble_context: duplicate turn " + std::to_string(samples[i].turn_index) +
                          " in dialogue '" + samples[i].dialogue_id + "'");
    }
  }

  auto preceding = [&](const UtteranceSample& s, std::size_t window, bool text) {
    std::vector<Tensor> seqs;
    const std::size_t first = s.turn_index >= window ? s.turn_index - window : 0;
    for (std::size_t turn = first; turn < s.turn_index; ++turn) {
      auto it = index.find({s.dialogue_id, turn});
      if (it == index.end()) continue;
      const auto& prev = samples[it->second];
      seqs.push_back(text ? prev.text_seq : prev.audio_seq);
    }
    return seqs;
  };

  std::vector<UtteranceSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    UtteranceSample r = s;
    auto text_ctx = preceding(s, wt, true);
    auto audio_ctx = preceding(s, wa, false);
    if (config.method == ContextMethod::concatenation) {
      if (!text_ctx.empty()) {
        text_ctx.push_back(s.text_seq);
        r.text_seq = concat(text_ctx, 0);
      }
      if (!audio_ctx.empty()) {
        audio_ctx.push_back(s.audio_seq);
        r.audio_seq = concat(audio_ctx, 0);
      }
    } else {
      if (!text_ctx.empty()) r.text_context = concat(text_ctx, 0);
      if (!audio_ctx.empty()) r.audio_context = concat(audio_ctx, 0);
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---- batching ---------------------------------------------------------------

namespace {

template <typename Get>
PaddedSequences pad(const std::vector<UtteranceSample>& samples, Get get, const char* what) {
  std::size_t max_len = 1;
  std::optional<std::size_t> width;
  for (const auto& s : samples) {
    const Tensor* t = get(s);
    if (!t) continue;
    max_len = std::max(max_len, t->dim(0));
    if (!width) width = t->dim(1);
    if (t->dim(1) != *width) {
      throw DimensionError(std::string("batch: inconsistent ") + what + " width " + std::to_string(t->dim(1)) +
                           " vs " + std::to_string(*width));
    }
  }
  const std::size_t d = width.value_or(1);
  const std::size_t B = samples.size();
  std::vector<double> values(B * max_len * d, 0.0);
  std::vector<Mask> masks(B, Mask(max_len, 0));
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor* t = get(samples[b]);
    if (!t) continue;
    auto src = t->data();
    std::copy(src.begin(), src.end(), values.begin() + b * max_len * d);
    std::fill_n(masks[b].begin(), t->dim(0), std::uint8_t{1});
  }
  return {Tensor::from_data({B, max_len, d}, std::move(values)), std::move(masks)};
}

}  // namespace

Batch make_batch(const std::vector<UtteranceSample>& samples) {
  if (samples.empty()) throw ContractError("make_batch: no samples");
  Batch batch;
  batch.text = pad(samples, [](const UtteranceSample& s) { return &s.text_seq; }, "text");
  batch.audio = pad(samples, [](const UtteranceSample& s) { return &s.audio_seq; }, "audio");
  const bool any_text_ctx = std::any_of(samples.begin(), samples.end(), [](const auto& s) { return s.text_context.has_value(); });
  const bool any_audio_ctx = std::any_of(samples.begin(), samples.end(), [](const auto& s) { return s.audio_context.has_value(); });
  if (any_text_ctx) {
    batch.text_context = pad(samples, [](const UtteranceSample& s) -> const Tensor* {
      return s.text_context ? &*s.text_context : nullptr;
    }, "text context");
  }
  if (any_audio_ctx) {
    batch.audio_context = pad(samples, [](const UtteranceSample& s) -> const Tensor* {
      return s.audio_context ? &*s.audio_context : nullptr;
    }, "audio context");
  }
  for (const auto& s : samples) {
    batch.targets.text.push_back(s.target_text());
    batch.targets.audio.push_back(s.target_audio());
    batch.targets.fused.push_back(s.label_f);
  }
  return batch;
}

std::vector<Batch> pad_batch(const std::vector<UtteranceSample>& samples, std::size_t batch_size) {
  if (samples.empty()) throw ContractError("pad_batch: no samples");
  if (batch_size == 0) throw ContractError("pad_batch: batch_size must be positive");
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    batches.push_back(make_batch(std::vector<UtteranceSample>(samples.begin() + start, samples.begin() + end)));
  }
  return batches;
}

// ---- splitting --------------------------------------------------------------

DataSplit split(const std::vector<UtteranceSample>& samples, std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw ConfigError("split fractions must be nonnegative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1, got " + std::to_string(total));

  std::vector<std::string> dialogues;
  std::set<std::string> seen;
  for (const auto& s : samples) {
    if (seen.insert(s.dialogue_id).second) dialogues.push_back(s.dialogue_id);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(dialogues.begin(), dialogues.end(), rng);

  const std::size_t D = dialogues.size();
  const auto n_train = std::min<std::size_t>(D, static_cast<std::size_t>(std::llround(fractions[0] * D)));
  const auto n_val = std::min<std::size_t>(D - n_train, static_cast<std::size_t>(std::llround(fractions[1] * D)));
  std::unordered_map<std::string, int> part;
  for (std::size_t i = 0; i < D; ++i) part[dialogues[i]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);

  DataSplit out;
  for (const auto& s : samples) {
    switch (part[s.dialogue_id]) {
      case 0: out.train.push_back(s); break;
      case 1: out.val.push_back(s); break;
      default: out.test.push_back(s); break;
    }
  }
  return out;
}

std::vector<UtteranceSample> drop_modality_labels(std::vector<UtteranceSample> samples) {
  for (auto& s : samples) {
    s.label_t.reset();
    s.label_a.reset();
  }
  return samples;
}

}  // namespace mmml
