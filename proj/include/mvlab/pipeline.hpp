#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvlab/datasets.hpp"
#include "mvlab/encoder.hpp"
#include "mvlab/error.hpp"
#include "mvlab/evaluation.hpp"
#include "mvlab/losses.hpp"
#include "mvlab/trainer.hpp"

namespace mvlab {

enum class Phase : std::uint8_t { Unsupervised, Supervised, Kd };

inline const char* to_string(Phase p) {
  switch (p) {
    case Phase::Unsupervised: return "unsupervised";
    case Phase::Supervised: return "supervised";
    case Phase::Kd: return "kd";
  }
  return "?";
}

inline LossKind loss_for(Phase p) {
  switch (p) {
    case Phase::Unsupervised: return LossKind::InfoNCE;
    case Phase::Supervised: return LossKind::Supervised;
    case Phase::Kd: return LossKind::KdKl;
  }
  return LossKind::InfoNCE;
}

inline SourceKind source_for(Phase p) {
  switch (p) {
    case Phase::Unsupervised: return SourceKind::Pairs;
    case Phase::Supervised: return SourceKind::Triples;
    case Phase::Kd: return SourceKind::ScoredLists;
  }
  return SourceKind::Pairs;
}

// Learning-rate sweep ranges per phase.
inline SweepSpec default_sweep(Phase p) {
  switch (p) {
    case Phase::Unsupervised: return {1e-5, 3e-3, 10};
    case Phase::Supervised: return {8e-8, 2e-5, 10};
    case Phase::Kd: return {1e-7, 1e-3, 10};
  }
  return {};
}

struct TemperaturePolicy {
  bool trainable = false;
  double value = TemperatureParam::kDefaultFixed;  // fixed value, or the initial one when trainable

  TemperatureParam param() const {
    return trainable ? TemperatureParam::learnable(value) : TemperatureParam::fixed(value);
  }
  friend bool operator==(const TemperaturePolicy&, const TemperaturePolicy&) = default;
};

struct PhaseConfig {
  Phase phase = Phase::Unsupervised;
  Interaction interaction = Interaction::Late;
  LossKind loss = LossKind::InfoNCE;
  std::size_t batch_size = 256;
  std::size_t chunk_size = 0;    // gradient-cache chunk; 0 = whole batch at once
  std::size_t workers = 1;       // simulated gather workers
  std::size_t accumulation = 1;  // kd only
  double lr = 1e-2;
  bool sweep = false;
  SweepSpec sweep_range;
  TemperaturePolicy temperature;
  LengthBudget budget;
  bool prompts = true;
  bool query_expansion = false;
  bool score_prompt_tokens = true;
  bool include_in_batch = true;
  std::vector<std::string> sources;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 0;

  friend bool operator==(const PhaseConfig&, const PhaseConfig&) = default;

  EncodeSettings settings() const {
    return {budget, prompts, query_expansion, score_prompt_tokens, interaction};
  }

  LossSpec loss_spec() const {
    return {loss, temperature.param(), include_in_batch, settings()};
  }

  StepPlan step_plan() const {
    if (workers > 1) return {StepMode::Gathered, chunk_size, workers, 1};
    if (accumulation > 1) return {StepMode::Accumulated, 0, 1, accumulation};
    if (chunk_size > 0 && chunk_size < batch_size) return {StepMode::GradCache, chunk_size, 1, 1};
    return {StepMode::Full, 0, 1, 1};
  }

  void validate() const {
    const std::string name = to_string(phase);
    if (loss != loss_for(phase)) {
      throw ConfigError(name + ": loss '" + to_string(loss) + "' does not match the phase");
    }
    if (phase == Phase::Kd && interaction != Interaction::Late) {
      throw ConfigError(name + ": distillation runs with late interaction only");
    }
    if (batch_size == 0) throw ConfigError(name + ": batch_size must be at least 1");
    if (epochs == 0) throw ConfigError(name + ": epochs must be at least 1");
    if (workers == 0) throw ConfigError(name + ": workers must be at least 1");
    if (workers > batch_size) throw ConfigError(name + ": more workers than samples per batch");
    if (accumulation == 0) throw ConfigError(name + ": accumulation must be at least 1");
    if (accumulation > 1 && phase != Phase::Kd) {
      throw ConfigError(name + ": gradient accumulation is only valid for distillation");
    }
    if (accumulation > 1 && batch_size % accumulation != 0) {
      throw ConfigError(name + ": batch_size must be a multiple of accumulation");
    }
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError(name + ": lr must be >= 0");
    if (sweep) sweep_range.validate();
    if (!(temperature.value > 0.0)) throw ConfigError(name + ": temperature must be positive");
    if (sources.empty()) throw ConfigError(name + ": no data sources");
    if (!(weight_decay >= 0.0)) throw ConfigError(name + ": weight_decay must be >= 0");
  }

  // Desk-scale defaults per phase.
  static PhaseConfig preset(Phase p, Interaction mode) {
    PhaseConfig c;
    c.phase = p;
    c.interaction = mode;
    c.loss = loss_for(p);
    c.sweep_range = default_sweep(p);
    c.budget = {32, 64, true};
    switch (p) {
      case Phase::Unsupervised:
        c.batch_size = 256;
        c.chunk_size = 32;
        c.budget.doc_len = 48;
        c.lr = 1e-2;
        c.sources = {"synthetic-pairs"};
        break;
      case Phase::Supervised:
        c.batch_size = 64;
        c.lr = 1e-2;
        c.epochs = 4;
        c.sources = {"synthetic-triples"};
        break;
      case Phase::Kd:
        c.batch_size = 128;
        c.accumulation = 2;
        c.lr = 3e-3;
        c.epochs = 3;
        c.sources = {"synthetic-scored"};
        break;
    }
    return c;
  }
};

enum class Variant : std::uint8_t { A, B, C };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::A: return "a";
    case Variant::B: return "b";
    case Variant::C: return "c";
  }
  return "?";
}

// Interaction of each phase (unsupervised, supervised, kd) per variant.
inline std::vector<Interaction> variant_modes(Variant v) {
  using I = Interaction;
  switch (v) {
    case Variant::A: return {I::Dense, I::Dense, I::Late};
    case Variant::B: return {I::Dense, I::Late, I::Late};
    case Variant::C: return {I::Late, I::Late, I::Late};
  }
  return {};
}

struct PipelineConfig {
  Variant variant = Variant::C;
  std::vector<PhaseConfig> phases;
  TokenizerConfig tokenizer;
  EncoderConfig encoder;
  SyntheticSpec data;
  SubsetSpec subset;
  std::size_t eval_k = 10;
  std::uint64_t seed = 0;

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;

  // Seeds the data, the initialization and every phase from one number.
  void set_seed(std::uint64_t s) {
    seed = s;
    data.seed = s;
    subset.seed = s;
    for (std::size_t i = 0; i < phases.size(); ++i) phases[i].seed = derive_seed(s, i + 1);
  }

  static PipelineConfig preset(Variant v, std::uint64_t seed = 0) {
    PipelineConfig c;
    c.variant = v;
    const auto modes = variant_modes(v);
    c.phases = {PhaseConfig::preset(Phase::Unsupervised, modes[0]),
                PhaseConfig::preset(Phase::Supervised, modes[1]),
                PhaseConfig::preset(Phase::Kd, modes[2])};
    c.set_seed(seed);
    return c;
  }

  void validate() const {
    tokenizer.validate();
    data.validate();
    if (eval_k == 0) throw ConfigError("eval_k must be at least 1");
    const auto modes = variant_modes(variant);
    const Phase order[] = {Phase::Unsupervised, Phase::Supervised, Phase::Kd};
    if (phases.size() != 3) throw ConfigError("pipeline: expected three phases");
    for (std::size_t i = 0; i < 3; ++i) {
      if (phases[i].phase != order[i]) {
        throw ConfigError(std::string("pipeline: phase ") + std::to_string(i + 1) + " must be " +
                          to_string(order[i]));
      }
      if (phases[i].interaction != modes[i]) {
        throw ConfigError(std::string("pipeline (") + to_string(variant) + "): " +
                          to_string(order[i]) + " phase must use " + to_string(modes[i]) +
                          " interaction");
      }
      phases[i].validate();
    }
  }

  PhaseConfig& phase(Phase p) {
    for (auto& ph : phases)
      if (ph.phase == p) return ph;
    throw ConfigError(std::string("pipeline has no ") + to_string(p) + " phase");
  }
  const PhaseConfig& phase(Phase p) const { return const_cast<PipelineConfig*>(this)->phase(p); }
};

// ---------------------------------------------------------------------------
// Configuration text: flat `key = value` lines, '#' comments.

namespace config_detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": '" + v + "' is not a number");
  return out;
}

inline std::uint64_t parse_count(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError(key + ": '" + v + "' is not a non-negative integer");
  }
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError(key + ": '" + v + "' is out of range");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError(key + ": '" + v + "' is not a boolean (true/false)");
}

inline Interaction parse_interaction(const std::string& key, const std::string& v) {
  if (v == "late") return Interaction::Late;
  if (v == "dense") return Interaction::Dense;
  throw ConfigError(key + ": '" + v + "' is not late|dense");
}

inline LossKind parse_loss(const std::string& key, const std::string& v) {
  if (v == "infonce") return LossKind::InfoNCE;
  if (v == "supervised_contrastive") return LossKind::Supervised;
  if (v == "kd_kl") return LossKind::KdKl;
  throw ConfigError(key + ": '" + v + "' is not infonce|supervised_contrastive|kd_kl");
}

inline Variant parse_variant(const std::string& key, const std::string& v) {
  if (v == "a") return Variant::A;
  if (v == "b") return Variant::B;
  if (v == "c") return Variant::C;
  throw ConfigError(key + ": '" + v + "' is not a|b|c");
}

inline std::vector<std::string> parse_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Field {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <class T>
Field count_field(const std::string& key, T& ref) {
  return {[&ref, key](const std::string& v) { ref = static_cast<T>(parse_count(key, v)); },
          [&ref] { return std::to_string(ref); }};
}

inline Field double_field(const std::string& key, double& ref) {
  return {[&ref, key](const std::string& v) { ref = parse_double(key, v); },
          [&ref] { return fmt_double(ref); }};
}

inline Field bool_field(const std::string& key, bool& ref) {
  return {[&ref, key](const std::string& v) { ref = parse_bool(key, v); },
          [&ref] { return std::string(ref ? "true" : "false"); }};
}

// Every recognized key, in serialization order, bound to `cfg`.
inline std::vector<std::pair<std::string, Field>> fields(PipelineConfig& cfg) {
  std::vector<std::pair<std::string, Field>> f;
  auto add = [&](const std::string& key, Field fl) { f.emplace_back(key, std::move(fl)); };
  add("variant", {[&cfg](const std::string& v) {
                    cfg.variant = parse_variant("variant", v);
                  },
                  [&cfg] { return std::string(to_string(cfg.variant)); }});
  add("seed", count_field("seed", cfg.seed));
  add("eval_k", count_field("eval_k", cfg.eval_k));
  add("tokenizer.vocab_size", count_field("tokenizer.vocab_size", cfg.tokenizer.vocab_size));
  add("tokenizer.prompt_len", count_field("tokenizer.prompt_len", cfg.tokenizer.prompt_len));
  add("tokenizer.lowercase", bool_field("tokenizer.lowercase", cfg.tokenizer.lowercase));
  add("encoder.d_model", count_field("encoder.d_model", cfg.encoder.d_model));
  add("encoder.d_out", count_field("encoder.d_out", cfg.encoder.d_out));
  add("encoder.context_mix", bool_field("encoder.context_mix", cfg.encoder.context_mix));
  auto& d = cfg.data;
  add("data.topic_count", count_field("data.topic_count", d.topic_count));
  add("data.vocab_per_topic", count_field("data.vocab_per_topic", d.vocab_per_topic));
  add("data.queries_per_topic", count_field("data.queries_per_topic", d.queries_per_topic));
  add("data.docs_per_topic", count_field("data.docs_per_topic", d.docs_per_topic));
  add("data.query_len_tokens", count_field("data.query_len_tokens", d.query_len_tokens));
  add("data.doc_len_tokens", count_field("data.doc_len_tokens", d.doc_len_tokens));
  add("data.distractor_rate", double_field("data.distractor_rate", d.distractor_rate));
  add("data.seed", count_field("data.seed", d.seed));
  add("data.train_queries_per_topic",
      count_field("data.train_queries_per_topic", d.train_queries_per_topic));
  add("data.distractor_pool", count_field("data.distractor_pool", d.distractor_pool));
  add("data.negatives_per_query", count_field("data.negatives_per_query", d.negatives_per_query));
  add("data.kd_candidates", count_field("data.kd_candidates", d.kd_candidates));
  add("data.teacher_gamma", double_field("data.teacher_gamma", d.teacher_gamma));
  add("subset.max_queries", count_field("subset.max_queries", cfg.subset.max_queries));
  add("subset.max_corpus", count_field("subset.max_corpus", cfg.subset.max_corpus));
  add("subset.seed", count_field("subset.seed", cfg.subset.seed));
  for (auto& ph : cfg.phases) {
    const std::string p = std::string(to_string(ph.phase)) + ".";
    add(p + "interaction", {[&ph, p](const std::string& v) {
                              ph.interaction = parse_interaction(p + "interaction", v);
                            },
                            [&ph] { return std::string(to_string(ph.interaction)); }});
    add(p + "loss", {[&ph, p](const std::string& v) { ph.loss = parse_loss(p + "loss", v); },
                     [&ph] { return std::string(to_string(ph.loss)); }});
    add(p + "batch_size", count_field(p + "batch_size", ph.batch_size));
    add(p + "chunk_size", count_field(p + "chunk_size", ph.chunk_size));
    add(p + "workers", count_field(p + "workers", ph.workers));
    add(p + "accumulation", count_field(p + "accumulation", ph.accumulation));
    add(p + "lr", double_field(p + "lr", ph.lr));
    add(p + "sweep", bool_field(p + "sweep", ph.sweep));
    add(p + "sweep_min", double_field(p + "sweep_min", ph.sweep_range.lr_min));
    add(p + "sweep_max", double_field(p + "sweep_max", ph.sweep_range.lr_max));
    add(p + "sweep_points", count_field(p + "sweep_points", ph.sweep_range.points));
    add(p + "temperature", double_field(p + "temperature", ph.temperature.value));
    add(p + "temperature_trainable",
        bool_field(p + "temperature_trainable", ph.temperature.trainable));
    add(p + "query_len", count_field(p + "query_len", ph.budget.query_len));
    add(p + "doc_len", count_field(p + "doc_len", ph.budget.doc_len));
    add(p + "length_compensation",
        bool_field(p + "length_compensation", ph.budget.length_compensation));
    add(p + "prompts", bool_field(p + "prompts", ph.prompts));
    add(p + "query_expansion", bool_field(p + "query_expansion", ph.query_expansion));
    add(p + "score_prompt_tokens", bool_field(p + "score_prompt_tokens", ph.score_prompt_tokens));
    add(p + "include_in_batch", bool_field(p + "include_in_batch", ph.include_in_batch));
    add(p + "sources", {[&ph](const std::string& v) { ph.sources = parse_list(v); },
                        [&ph] {
                          std::string s;
                          for (const auto& x : ph.sources) s += (s.empty() ? "" : ",") + x;
                          return s;
                        }});
    add(p + "epochs", count_field(p + "epochs", ph.epochs));
    add(p + "seed", count_field(p + "seed", ph.seed));
    add(p + "weight_decay", double_field(p + "weight_decay", ph.weight_decay));
    add(p + "warmup_steps", count_field(p + "warmup_steps", ph.warmup_steps));
  }
  return f;
}

}  // namespace config_detail

inline std::string to_config_text(const PipelineConfig& cfg) {
  PipelineConfig copy = cfg;
  std::string out;
  for (auto& [key, field] : config_detail::fields(copy)) out += key + " = " + field.get() + "\n";
  return out;
}

// Applies `key = value` lines on top of `base`. A `variant` line (or `seed`)
// re-derives the preset for that variant before the remaining keys are applied,
// so it may appear anywhere in the file.
inline PipelineConfig parse_config(const std::string& text, PipelineConfig base = PipelineConfig::preset(Variant::C)) {
  std::vector<std::tuple<std::size_t, std::string, std::string>> entries;
  std::stringstream ss(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(ss, line);) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    entries.emplace_back(lineno, config_detail::trim(line.substr(0, eq)),
                         config_detail::trim(line.substr(eq + 1)));
  }
  PipelineConfig cfg = base;
  for (const auto& [ln, key, value] : entries) {
    if (key == "variant") {
      const Variant v = config_detail::parse_variant("variant", value);
      if (v != cfg.variant) {
        PipelineConfig fresh = PipelineConfig::preset(v, cfg.seed);
        fresh.tokenizer = cfg.tokenizer;
        fresh.encoder = cfg.encoder;
        fresh.data = cfg.data;
        fresh.subset = cfg.subset;
        fresh.eval_k = cfg.eval_k;
        cfg = fresh;
      }
    } else if (key == "seed") {
      cfg.set_seed(config_detail::parse_count("seed", value));
    }
  }
  std::map<std::string, std::size_t> seen;
  auto table = config_detail::fields(cfg);
  for (const auto& [ln, key, value] : entries) {
    if (key == "variant" || key == "seed") continue;
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& kv) { return kv.first == key; });
    if (it == table.end()) {
      throw ConfigError("config line " + std::to_string(ln) + ": unknown key '" + key + "'");
    }
    if (auto [pos, fresh] = seen.emplace(key, ln); !fresh) {
      throw ConfigError("config line " + std::to_string(ln) + ": duplicate key '" + key +
                        "' (first on line " + std::to_string(pos->second) + ")");
    }
    try {
      it->second.set(value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(ln) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

inline PipelineConfig load_config(const std::filesystem::path& path,
                                  PipelineConfig base = PipelineConfig::preset(Variant::C)) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

inline std::uint64_t config_hash(const PipelineConfig& cfg) { return fnv1a64(to_config_text(cfg)); }

// ---------------------------------------------------------------------------
// Checkpoints.
//
//   "CBZ1" | u32 version | u32 matrix count |
//   per matrix: u32 name length, name bytes, u32 rows, u32 cols, rows*cols f64 |
//   u32 config length | config JSON
// All integers and floats little-endian.

struct Provenance {
  std::string pipeline;
  std::string phase;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  Model model;
  TemperatureParam temperature;
  EncodeSettings settings;  // how the model was last trained / should be evaluated
  Provenance provenance;

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return a.model.tokenizer == b.model.tokenizer && a.model.encoder == b.model.encoder &&
           a.model.params == b.model.params && a.temperature == b.temperature &&
           a.settings == b.settings && a.provenance == b.provenance;
  }

  static Checkpoint fresh(const TokenizerConfig& tok, const EncoderConfig& enc, std::uint64_t seed) {
    Checkpoint c{Model::fresh(tok, enc, seed), TemperatureParam{}, EncodeSettings{}, {}};
    c.provenance.seed = seed;
    c.provenance.phase = "init";
    return c;
  }
};

namespace ckpt_detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, sizeof v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw IoError("checkpoint: truncated at offset " + std::to_string(pos_) + " reading " +
                    what + " (" + std::to_string(n) + " bytes needed, " +
                    std::to_string(bytes_.size() - pos_) + " left)");
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    double d;
    std::memcpy(&d, &v, sizeof d);
    return d;
  }
  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline nlohmann::json settings_json(const EncodeSettings& s) {
  return {{"query_len", s.budget.query_len},
          {"doc_len", s.budget.doc_len},
          {"length_compensation", s.budget.length_compensation},
          {"prompts", s.prompts_enabled},
          {"query_expansion", s.query_expansion},
          {"score_prompt_tokens", s.score_prompt_tokens},
          {"interaction", to_string(s.interaction)}};
}

inline EncodeSettings settings_from(const nlohmann::json& j) {
  EncodeSettings s;
  s.budget.query_len = j.at("query_len").get<std::size_t>();
  s.budget.doc_len = j.at("doc_len").get<std::size_t>();
  s.budget.length_compensation = j.at("length_compensation").get<bool>();
  s.prompts_enabled = j.at("prompts").get<bool>();
  s.query_expansion = j.at("query_expansion").get<bool>();
  s.score_prompt_tokens = j.at("score_prompt_tokens").get<bool>();
  s.interaction = j.at("interaction").get<std::string>() == "dense" ? Interaction::Dense
                                                                      : Interaction::Late;
  return s;
}

}  // namespace ckpt_detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  using namespace ckpt_detail;
  std::string out = "CBZ1";
  put_u32(out, Checkpoint::kVersion);
  const auto& p = c.model.params;
  std::vector<std::pair<std::string, const DenseMatrix*>> mats{
      {EncoderParams::kEmbedding, &p.embedding}, {EncoderParams::kProjection, &p.projection}};
  if (p.has_context_mix()) mats.emplace_back(EncoderParams::kContextMix, &p.context_mix);
  const DenseMatrix log_tau = DenseMatrix::scalar(c.temperature.log_tau);
  mats.emplace_back(TemperatureParam::kName, &log_tau);
  put_u32(out, static_cast<std::uint32_t>(mats.size()));
  for (const auto& [name, m] : mats) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(m->rows()));
    put_u32(out, static_cast<std::uint32_t>(m->cols()));
    for (double v : m->data()) put_f64(out, v);
  }
  nlohmann::json cfg{
      {"tokenizer",
       {{"vocab_size", c.model.tokenizer.vocab_size},
        {"prompt_len", c.model.tokenizer.prompt_len},
        {"lowercase", c.model.tokenizer.lowercase}}},
      {"encoder",
       {{"d_model", c.model.encoder.d_model},
        {"d_out", c.model.encoder.d_out},
        {"context_mix", c.model.encoder.context_mix}}},
      {"temperature",
       {{"trainable", c.temperature.trainable},
        {"fixed_value", c.temperature.fixed_value ? nlohmann::json(*c.temperature.fixed_value)
                                                  : nlohmann::json(nullptr)}}},
      {"settings", settings_json(c.settings)},
      {"provenance",
       {{"pipeline", c.provenance.pipeline},
        {"phase", c.provenance.phase},
        {"seed", c.provenance.seed},
        {"config_hash", c.provenance.config_hash}}}};
  const std::string text = cfg.dump();
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  return out;
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  ckpt_detail::Reader r(bytes);
  if (r.take(4, "magic") != "CBZ1") throw IoError("checkpoint: bad magic at offset 0");
  const std::uint32_t version = r.u32("version");
  if (version != Checkpoint::kVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version) + " at offset 4");
  }
  const std::uint32_t count = r.u32("matrix count");
  std::map<std::string, DenseMatrix> mats;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.pos();
    const std::uint32_t len = r.u32("matrix name length");
    std::string name(r.take(len, "matrix name"));
    const std::uint32_t rows = r.u32("rows");
    const std::uint32_t cols = r.u32("cols");
    const std::uint64_t n = static_cast<std::uint64_t>(rows) * cols;
    if (n > r.remaining() / 8) {
      throw IoError("checkpoint: truncated at offset " + std::to_string(r.pos()) + " reading " +
                    std::to_string(n) + " values of '" + name + "'");
    }
    DenseMatrix m(rows, cols);
    for (double& v : m.data()) v = r.f64();
    if (!mats.emplace(name, std::move(m)).second) {
      throw IoError("checkpoint: duplicate matrix '" + name + "' at offset " + std::to_string(at));
    }
  }
  const std::size_t cfg_at = r.pos();
  const std::uint32_t len = r.u32("config length");
  const std::string_view text = r.take(len, "config");
  if (r.remaining() != 0) {
    throw IoError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes at offset " +
                  std::to_string(r.pos()));
  }
  Checkpoint c;
  try {
    const auto j = nlohmann::json::parse(text);
    const auto& t = j.at("tokenizer");
    c.model.tokenizer.vocab_size = t.at("vocab_size").get<std::uint32_t>();
    c.model.tokenizer.prompt_len = t.at("prompt_len").get<std::uint32_t>();
    c.model.tokenizer.lowercase = t.at("lowercase").get<bool>();
    const auto& e = j.at("encoder");
    c.model.encoder.d_model = e.at("d_model").get<std::size_t>();
    c.model.encoder.d_out = e.at("d_out").get<std::size_t>();
    c.model.encoder.context_mix = e.at("context_mix").get<bool>();
    const auto& tp = j.at("temperature");
    c.temperature.trainable = tp.at("trainable").get<bool>();
    if (tp.at("fixed_value").is_null()) {
      c.temperature.fixed_value.reset();
    } else {
      c.temperature.fixed_value = tp.at("fixed_value").get<double>();
    }
    c.settings = ckpt_detail::settings_from(j.at("settings"));
    const auto& pv = j.at("provenance");
    c.provenance = {pv.at("pipeline").get<std::string>(), pv.at("phase").get<std::string>(),
                    pv.at("seed").get<std::uint64_t>(), pv.at("config_hash").get<std::uint64_t>()};
  } catch (const nlohmann::json::exception& ex) {
    throw IoError("checkpoint: bad config JSON at offset " + std::to_string(cfg_at + 4) + ": " +
                  ex.what());
  }
  auto take = [&](const char* name, bool required) {
    auto it = mats.find(name);
    if (it == mats.end()) {
      if (required) throw IoError(std::string("checkpoint: missing matrix '") + name + "'");
      return DenseMatrix{};
    }
    DenseMatrix m = std::move(it->second);
    mats.erase(it);
    return m;
  };
  c.model.params.embedding = take(EncoderParams::kEmbedding, true);
  c.model.params.projection = take(EncoderParams::kProjection, true);
  c.model.params.context_mix = take(EncoderParams::kContextMix, false);
  const DenseMatrix lt = take(TemperatureParam::kName, true);
  if (lt.rows() != 1 || lt.cols() != 1) throw IoError("checkpoint: log_tau must be 1x1");
  c.temperature.log_tau = lt.item();
  if (!mats.empty()) throw IoError("checkpoint: unexpected matrix '" + mats.begin()->first + "'");
  try {
    c.model.params.check(c.model.tokenizer, c.model.encoder);
  } catch (const ShapeError& ex) {
    throw IoError(std::string("checkpoint: ") + ex.what());
  }
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

inline std::uint64_t checkpoint_hash(const Checkpoint& c) {
  return fnv1a64(serialize_checkpoint(c));
}

// ---------------------------------------------------------------------------
// Phases.

struct RunOptions {
  unsigned threads = 0;
  std::size_t eval_k = 10;
  SubsetSpec subset;
  std::string pipeline = "custom";
  std::uint64_t config_hash = 0;
  std::function<void(const std::string&)> log;  // progress lines, optional
};

struct PhaseResult {
  Checkpoint checkpoint;
  std::vector<TrainStepReport> steps;
  double lr = 0.0;
  std::optional<SweepResult> sweep;
};

// Raised when training diverges; carries the last state whose parameters were finite.
class PhaseDivergence : public DivergenceError {
 public:
  PhaseDivergence(const std::string& what, Checkpoint last)
      : DivergenceError(what), last_(std::move(last)) {}
  const Checkpoint& last_finite() const { return last_; }

 private:
  Checkpoint last_;
};

namespace detail {

inline std::vector<const DataSource*> phase_sources(const PhaseConfig& cfg, const Dataset& data) {
  std::vector<const DataSource*> out;
  for (const auto& id : cfg.sources) {
    const DataSource* found = nullptr;
    for (const auto& s : data.sources)
      if (s.source_id == id) found = &s;
    if (!found) {
      throw ConfigError(std::string(to_string(cfg.phase)) + ": unknown data source '" + id + "'");
    }
    if (found->kind != source_for(cfg.phase)) {
      throw ConfigError(std::string(to_string(cfg.phase)) + ": source '" + id + "' holds " +
                        to_string(found->kind) + ", phase needs " +
                        to_string(source_for(cfg.phase)));
    }
    out.push_back(found);
  }
  return out;
}

inline PhaseResult train_phase(const PhaseConfig& cfg, const Checkpoint& init, const Dataset& data,
                               double lr, const RunOptions& opts) {
  const auto sources = phase_sources(cfg, data);
  init.model.params.check(init.model.tokenizer, init.model.encoder);
  TrainableState state{init.model, cfg.temperature.param()};
  const LossSpec spec = cfg.loss_spec();
  const StepPlan plan = cfg.step_plan();
  OptimizerState opt;
  opt.config.lr = lr;
  opt.config.weight_decay = cfg.weight_decay;
  opt.config.warmup_steps = cfg.warmup_steps;

  auto snapshot = [&](const TrainableState& s) {
    Checkpoint c{s.model, s.temperature, cfg.settings(), init.provenance};
    c.provenance.pipeline = opts.pipeline;
    c.provenance.phase = to_string(cfg.phase);
    c.provenance.seed = cfg.seed;
    c.provenance.config_hash = opts.config_hash;
    return c;
  };

  PhaseResult out;
  out.lr = lr;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = single_source_batches(sources, cfg.batch_size, derive_seed(cfg.seed, epoch));
    for (const auto& ref : batches) {
      const TrainBatch batch = make_batch(state.model, *sources[ref.source], ref.samples,
                                          spec.kind, spec.settings);
      TrainableState before = state;
      try {
        out.steps.push_back(train_step(state, batch, spec, plan, opt, opts.threads));
      } catch (const DivergenceError& e) {
        throw PhaseDivergence(std::string(to_string(cfg.phase)) + " step " +
                                  std::to_string(out.steps.size() + 1) + ": " + e.what(),
                              snapshot(before));
      }
      if (opts.log) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s step %zu loss %.6f grad_norm %.4g tau %.4g (%.2fs)",
                      to_string(cfg.phase), out.steps.size(), out.steps.back().loss,
                      out.steps.back().grad_norm, out.steps.back().tau, out.steps.back().seconds);
        opts.log(buf);
      }
    }
  }
  out.checkpoint = snapshot(state);
  return out;
}

}  // namespace detail

// Runs one phase from `init`. With sweeping enabled the phase is trained once per
// log-spaced learning rate, the best rate by subset nDCG is kept and the phase is
// retrained with it.
inline PhaseResult run_phase(const PhaseConfig& cfg, const Checkpoint& init, const Dataset& data,
                             const RunOptions& opts = {}) {
  cfg.validate();
  detail::phase_sources(cfg, data);
  double lr = cfg.lr;
  std::optional<SweepResult> sw;
  if (cfg.sweep) {
    sw = sweep(cfg.sweep_range, [&](double candidate) {
      RunOptions quiet = opts;
      quiet.log = nullptr;
      const PhaseResult r = detail::train_phase(cfg, init, data, candidate, quiet);
      EvalOptions eo{opts.eval_k, Gain::Linear, opts.threads, "subset"};
      return evaluate_subset(r.checkpoint.model, data.corpus, data.queries, data.qrels,
                             cfg.settings(), opts.subset, eo)
          .mean;
    });
    if (!sw->best_lr) throw DivergenceError(std::string(to_string(cfg.phase)) + ": every sweep point diverged");
    lr = *sw->best_lr;
    if (opts.log) opts.log(std::string(to_string(cfg.phase)) + " sweep selected lr " + config_detail::fmt_double(lr));
  }
  PhaseResult r = detail::train_phase(cfg, init, data, lr, opts);
  r.sweep = std::move(sw);
  return r;
}

// ---------------------------------------------------------------------------
// Pipelines.

struct PhaseRow {
  std::string phase;
  Interaction interaction = Interaction::Late;
  double lr = 0.0;
  double ndcg = 0.0;
  double seconds = 0.0;
};

struct PipelineResult {
  std::vector<Checkpoint> checkpoints;  // one per phase
  std::vector<PhaseRow> rows;
  double baseline_ndcg = 0.0;           // untrained model, final phase's settings
  EvalReport final_report;
};

inline EvalReport evaluate_checkpoint(const Checkpoint& c, const Dataset& data,
                                      const EncodeSettings& settings, const RunOptions& opts) {
  return evaluate(c.model, data.corpus, data.queries, data.qrels, settings,
                  EvalOptions{opts.eval_k, Gain::Linear, opts.threads, "synthetic"});
}

inline PipelineResult run_pipeline(const PipelineConfig& cfg, const Dataset& data,
                                   unsigned threads = 0,
                                   std::function<void(const std::string&)> log = nullptr) {
  cfg.validate();
  RunOptions opts{threads, cfg.eval_k, cfg.subset, std::string("pipeline-") + to_string(cfg.variant),
                  config_hash(cfg), log};
  PipelineResult out;
  Checkpoint current = Checkpoint::fresh(cfg.tokenizer, cfg.encoder, cfg.seed);
  current.provenance.pipeline = opts.pipeline;
  current.provenance.config_hash = opts.config_hash;
  out.baseline_ndcg = evaluate_checkpoint(current, data, cfg.phases.back().settings(), opts).mean;
  if (log) log("baseline ndcg@" + std::to_string(cfg.eval_k) + " " + config_detail::fmt_double(out.baseline_ndcg));
  for (const auto& ph : cfg.phases) {
    const auto start = std::chrono::steady_clock::now();
    PhaseResult r;
    try {
      r = run_phase(ph, current, data, opts);
    } catch (const PhaseDivergence&) {
      throw;
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(to_string(ph.phase)) + " phase: " + e.what());
    }
    current = r.checkpoint;
    EvalReport rep = evaluate_checkpoint(current, data, ph.settings(), opts);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.rows.push_back({to_string(ph.phase), ph.interaction, r.lr, rep.mean, secs});
    if (log) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s (%s) ndcg@%zu %.4f in %.1fs", to_string(ph.phase),
                    to_string(ph.interaction), cfg.eval_k, rep.mean, secs);
      log(buf);
    }
    out.checkpoints.push_back(current);
    out.final_report = std::move(rep);
  }
  return out;
}

inline void write_pipeline_table(std::ostream& os, const PipelineResult& r) {
  os << "phase,interaction,lr,ndcg,seconds\n";
  os << "untrained," << to_string(r.checkpoints.empty() ? Interaction::Late
                                                        : r.checkpoints.back().settings.interaction)
     << ",0," << config_detail::fmt_double(r.baseline_ndcg) << ",0\n";
  for (const auto& row : r.rows) {
    os << row.phase << ',' << to_string(row.interaction) << ',' << config_detail::fmt_double(row.lr)
       << ',' << config_detail::fmt_double(row.ndcg) << ',' << config_detail::fmt_double(row.seconds)
       << '\n';
  }
}

// ---------------------------------------------------------------------------
// Prompt / length ablation.

struct AblationCell {
  bool prompts = false;
  bool length = false;
  std::size_t query_len = 0;  // effective, prompts included
  std::size_t doc_len = 0;
  double ndcg = 0.0;
  double delta = 0.0;  // against the (off, off) cell
};

struct AblationResult {
  bool init_prompts = true;
  std::vector<AblationCell> cells;  // (off,off), (on,off), (off,on), (on,on)
};

struct AblationOptions {
  // Pre-trained starting point. When absent, the base pipeline's unsupervised
  // phase is run with prompts set to `init_prompts`.
  std::optional<Checkpoint> init;
  bool init_prompts = true;
  std::vector<Phase> phases{Phase::Supervised, Phase::Kd};
};

inline AblationResult run_ablation_grid(const PipelineConfig& base, const Dataset& data,
                                        const AblationOptions& ab, unsigned threads = 0,
                                        std::function<void(const std::string&)> log = nullptr) {
  base.validate();
  if (ab.phases.empty()) throw ConfigError("ablation: no phases to fine-tune");
  RunOptions opts{threads, base.eval_k, base.subset,
                  std::string("ablation-") + to_string(base.variant), config_hash(base), log};
  AblationResult out;
  Checkpoint init;
  if (ab.init) {
    init = *ab.init;
    out.init_prompts = init.settings.prompts_enabled;
  } else {
    PhaseConfig pre = base.phase(Phase::Unsupervised);
    pre.prompts = ab.init_prompts;
    pre.budget.length_compensation = ab.init_prompts;
    init = run_phase(pre, Checkpoint::fresh(base.tokenizer, base.encoder, base.seed), data, opts)
               .checkpoint;
    out.init_prompts = ab.init_prompts;
  }
  const std::uint32_t plen = base.tokenizer.prompt_len;
  for (const auto& [prompts, length] : {std::pair{false, false}, std::pair{true, false},
                                        std::pair{false, true}, std::pair{true, true}}) {
    Checkpoint cur = init;
    EncodeSettings last;
    for (Phase p : ab.phases) {
      PhaseConfig ph = base.phase(p);
      ph.prompts = prompts;
      ph.budget.length_compensation = length;
      cur = run_phase(ph, cur, data, opts).checkpoint;
      last = ph.settings();
    }
    AblationCell cell{prompts, length, last.budget.effective(Role::Query, plen),
                      last.budget.effective(Role::Document, plen),
                      evaluate_checkpoint(cur, data, last, opts).mean, 0.0};
    if (log) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "ablation prompts=%d length=%d ndcg %.4f", prompts, length,
                    cell.ndcg);
      log(buf);
    }
    out.cells.push_back(cell);
  }
  for (auto& c : out.cells) c.delta = c.ndcg - out.cells.front().ndcg;
  return out;
}

inline void write_ablation_table(std::ostream& os, const AblationResult& r) {
  os << "init_prompts,prompts,length,query_len,doc_len,ndcg,delta\n";
  for (const auto& c : r.cells) {
    os << (r.init_prompts ? "on" : "off") << ',' << (c.prompts ? "on" : "off") << ','
       << (c.length ? "on" : "off") << ',' << c.query_len << ',' << c.doc_len << ','
       << config_detail::fmt_double(c.ndcg) << ',' << config_detail::fmt_double(c.delta) << '\n';
  }
}

}  // namespace mvlab
