// Model file layout (all integers little-endian):
//   "MMML" | u32 version=1 | u32 config length | config JSON (UTF-8)
//   u32 parameter count
//   per parameter: u16 name length | name | u8 rank | u32 extent * rank | f64 values

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <json.hpp>

#include "mmml/errors.hpp"
#include "mmml/model.hpp"

namespace mmml {

using nlohmann::json;

namespace {

constexpr std::uint32_t kFormatVersion = 1;
constexpr char kMagic[4] = {'M', 'M', 'M', 'L'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T value) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(in_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  double f64(const char* what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) throw FormatError(std::string("truncated model file while reading ") + what, pos_);
  }
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string config_to_json(const ModelConfig& c) {
  json j;
  j["d_in_text"] = c.d_in_text;
  j["d_in_audio"] = c.d_in_audio;
  j["d_model"] = c.d_model;
  j["num_heads"] = c.num_heads;
  j["fusion_layers"] = c.fusion_layers;
  j["d_ff"] = c.d_ff;
  j["feature_encoder_layers"] = c.feature_encoder_layers;
  j["variant"] = to_string(c.variant);
  j["fusion"] = to_string(c.fusion);
  j["positional_encoding"] = c.positional_encoding;
  j["context"] = {{"method", to_string(c.context.method)},
                  {"text_window", c.context.text_window},
                  {"audio_window", c.context.audio_window}};
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.d_in_text = j.at("d_in_text").get<std::size_t>();
    c.d_in_audio = j.at("d_in_audio").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.fusion_layers = j.at("fusion_layers").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.feature_encoder_layers = j.at("feature_encoder_layers").get<std::size_t>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.fusion = parse_fusion_kind(j.at("fusion").get<std::string>());
    c.positional_encoding = j.at("positional_encoding").get<bool>();
    const auto& ctx = j.at("context");
    c.context.method = parse_context_method(ctx.at("method").get<std::string>());
    c.context.text_window = ctx.at("text_window").get<std::size_t>();
    c.context.audio_window = ctx.at("audio_window").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::uint8_t> serialize_model(const MmmlModel& model) {
  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(kFormatVersion);
  const std::string cfg = config_to_json(model.config);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg.data(), cfg.size());
  const auto params = model.parameters();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) w.le<std::uint32_t>(static_cast<std::uint32_t>(e));
    for (double v : t.data()) w.f64(v);
  }
  return w.take();
}

MmmlModel deserialize_model(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(4, "magic") != std::string(kMagic, 4)) throw FormatError("bad magic: not a model file", 0);
  const std::size_t version_at = r.pos();
  const auto version = r.le<std::uint32_t>("version");
  if (version != kFormatVersion) {
    throw FormatError("unsupported model file version " + std::to_string(version), version_at);
  }
  const auto cfg_len = r.le<std::uint32_t>("config length");
  const std::size_t cfg_at = r.pos();
  ModelConfig config;
  try {
    config = config_from_json(r.str(cfg_len, "config"));
  } catch (const FormatError& e) {
    throw FormatError(e.what(), cfg_at);
  } catch (const ConfigError& e) {
    throw FormatError(e.what(), cfg_at);
  }

  MmmlModel model = build_model(config);
  std::map<std::string, Tensor> expected;
  for (auto& [name, t] : model.parameters()) expected.emplace(name, t);

  const std::size_t count_at = r.pos();
  const auto count = r.le<std::uint32_t>("parameter count");
  if (count != expected.size()) {
    throw FormatError("parameter count " + std::to_string(count) + " does not match config (" +
                      std::to_string(expected.size()) + ")", count_at);
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t entry_at = r.pos();
    const auto name_len = r.le<std::uint16_t>("parameter name length");
    const std::string name = r.str(name_len, "parameter name");
    auto it = expected.find(name);
    if (it == expected.end()) throw FormatError("unexpected parameter '" + name + "'", entry_at);
    const auto rank = r.le<std::uint8_t>("rank");
    Shape shape;
    for (std::uint8_t k = 0; k < rank; ++k) shape.push_back(r.le<std::uint32_t>("extent"));
    Tensor& target = it->second;
    if (shape != target.shape()) {
      throw FormatError("parameter '" + name + "' has shape " + shape_string(shape) + ", expected " +
                        shape_string(target.shape()), entry_at);
    }
    for (auto& v : target.mutable_data()) v = r.f64("parameter values");
    expected.erase(it);
  }
  if (!r.done()) throw FormatError("trailing bytes after last parameter", r.pos());
  return model;
}

void save_model(const MmmlModel& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FileError("write to '" + path.string() + "' failed");
}

MmmlModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open model file '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace mmml
