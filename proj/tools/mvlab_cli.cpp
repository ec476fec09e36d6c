// mvlab: data generation, training, evaluation and checkpoint inspection.
//
// Exit codes: 0 success, 1 configuration error, 2 training divergence, 3 I/O error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mvlab/mvlab.hpp"

using namespace mvlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kConfig = 1, kDiverged = 2, kIo = 3 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::string out = "mvlab_out";
  unsigned threads = 0;
  std::string format = "csv";
};

void add_common(CLI::App* app, Common& c, bool with_out = true) {
  app->add_option("--config", c.config, "Config file (key = value lines)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "Override the run seed");
  app->add_option("--variant", c.variant, "Pipeline variant preset")->check(CLI::IsMember({"a", "b", "c"}));
  app->add_option("--threads", c.threads, "Worker threads (0 = sequential, bit-reproducible)");
  app->add_option("--format", c.format, "Report format")->check(CLI::IsMember({"csv", "jsonl"}));
  if (with_out) app->add_option("--out", c.out, "Output directory");
}

PipelineConfig resolve_config(const Common& c) {
  std::string text;
  if (!c.variant.empty()) text += "variant = " + c.variant + "\n";
  PipelineConfig cfg = parse_config(text);
  if (!c.config.empty()) cfg = load_config(c.config, cfg);
  if (c.seed) cfg.set_seed(*c.seed);
  cfg.validate();
  return cfg;
}

Phase parse_phase(const std::string& s) {
  if (s == "unsupervised") return Phase::Unsupervised;
  if (s == "supervised") return Phase::Supervised;
  if (s == "kd") return Phase::Kd;
  throw ConfigError("unknown phase '" + s + "'");
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

fs::path prepare_out(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
  return dir;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write '" + p.string() + "'");
  return f;
}

void write_snapshot(const fs::path& dir, const PipelineConfig& cfg) {
  open_out(dir / "config.txt") << to_config_text(cfg);
}

void write_report(const fs::path& path, const EvalReport& r, const std::string& format) {
  auto f = open_out(path);
  if (format == "jsonl") {
    write_report_jsonl(f, r);
  } else {
    write_report_csv(f, r);
  }
}

void write_sample(std::ostream& os, const Sample& s) {
  json j{{"query_id", s.query_id}, {"query", s.query}, {"positive_id", s.positive_id}, {"positive", s.positive}};
  if (!s.negative_ids.empty()) j["negative_ids"] = s.negative_ids;
  if (!s.teacher.empty()) j["teacher"] = s.teacher;
  os << j.dump() << '\n';
}

json checkpoint_summary(const Checkpoint& c) {
  json mats = json::array();
  auto add = [&](const char* name, const DenseMatrix& m) {
    if (!m.empty()) mats.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  };
  add(EncoderParams::kEmbedding, c.model.params.embedding);
  add(EncoderParams::kProjection, c.model.params.projection);
  add(EncoderParams::kContextMix, c.model.params.context_mix);
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(checkpoint_hash(c)));
  char cfg_hash[32];
  std::snprintf(cfg_hash, sizeof cfg_hash, "%016llx", static_cast<unsigned long long>(c.provenance.config_hash));
  return {{"version", Checkpoint::kVersion},
          {"hash", hash},
          {"matrices", mats},
          {"vocab_size", c.model.tokenizer.vocab_size},
          {"prompt_len", c.model.tokenizer.prompt_len},
          {"d_model", c.model.encoder.d_model},
          {"d_out", c.model.encoder.d_out},
          {"tau", c.temperature.tau()},
          {"tau_trainable", c.temperature.trainable},
          {"interaction", to_string(c.settings.interaction)},
          {"prompts", c.settings.prompts_enabled},
          {"query_len", c.settings.budget.effective(Role::Query, c.model.tokenizer.prompt_len)},
          {"doc_len", c.settings.budget.effective(Role::Document, c.model.tokenizer.prompt_len)},
          {"pipeline", c.provenance.pipeline},
          {"phase", c.provenance.phase},
          {"seed", c.provenance.seed},
          {"config_hash", cfg_hash}};
}

int cmd_gen_data(const Common& c) {
  const PipelineConfig cfg = resolve_config(c);
  const fs::path dir = prepare_out(c.out);
  const Dataset data = generate_synthetic(cfg.data);
  write_beir_dir(dir, data.corpus, data.queries, data.qrels);
  prepare_out((dir / "sources").string());
  for (const auto& src : data.sources) {
    auto f = open_out(dir / "sources" / (src.source_id + ".jsonl"));
    for (const auto& s : src.samples) write_sample(f, s);
  }
  write_snapshot(dir, cfg);
  std::cout << data.corpus.size() << " documents, " << data.queries.size() << " queries";
  for (const auto& s : data.sources) std::cout << ", " << s.size() << " " << s.source_id;
  std::cout << " -> " << dir.string() << '\n';
  return kOk;
}

int cmd_export_beir(const Common& c, bool subset) {
  const PipelineConfig cfg = resolve_config(c);
  const fs::path dir = prepare_out(c.out);
  const Dataset data = generate_synthetic(cfg.data);
  if (subset) {
    const EvalSet s = make_subset(data.corpus, data.queries, data.qrels, cfg.subset);
    write_beir_dir(dir, s.corpus, s.queries, s.qrels);
    std::cout << s.corpus.size() << " documents, " << s.queries.size() << " queries";
  } else {
    write_beir_dir(dir, data.corpus, data.queries, data.qrels);
    std::cout << data.corpus.size() << " documents, " << data.queries.size() << " queries";
  }
  std::cout << " -> " << dir.string() << '\n';
  return kOk;
}

Checkpoint initial_checkpoint(const PipelineConfig& cfg, const std::string& init) {
  if (!init.empty()) return load_checkpoint(init);
  return Checkpoint::fresh(cfg.tokenizer, cfg.encoder, cfg.seed);
}

RunOptions run_options(const PipelineConfig& cfg, const Common& c) {
  return {c.threads, cfg.eval_k, cfg.subset, std::string("pipeline-") + to_string(cfg.variant), config_hash(cfg),
          log_line};
}

int run_single_phase(const Common& c, const std::string& phase, const std::string& init, bool force_sweep) {
  const PipelineConfig cfg = resolve_config(c);
  const fs::path dir = prepare_out(c.out);
  write_snapshot(dir, cfg);
  PhaseConfig ph = cfg.phase(parse_phase(phase));
  if (force_sweep) ph.sweep = true;
  const Dataset data = generate_synthetic(cfg.data);
  const RunOptions opts = run_options(cfg, c);
  Checkpoint start = initial_checkpoint(cfg, init);
  if (init.empty()) {
    start.provenance.pipeline = opts.pipeline;
    start.provenance.config_hash = opts.config_hash;
  }
  PhaseResult r;
  try {
    r = run_phase(ph, start, data, opts);
  } catch (const PhaseDivergence& e) {
    save_checkpoint(e.last_finite(), dir / (phase + ".last_finite.cbz"));
    throw;
  }
  save_checkpoint(r.checkpoint, dir / (phase + ".cbz"));
  if (r.sweep) {
    auto f = open_out(dir / (phase + ".sweep.csv"));
    write_sweep_csv(f, *r.sweep);
  }
  const EvalReport rep = evaluate_checkpoint(r.checkpoint, data, ph.settings(), opts);
  write_report(dir / (phase + ".report." + c.format), rep, c.format);
  std::printf("%s lr %g ndcg@%zu %.4f -> %s\n", phase.c_str(), r.lr, cfg.eval_k, rep.mean,
              (dir / (phase + ".cbz")).string().c_str());
  return kOk;
}

int cmd_run_pipeline(const Common& c) {
  const PipelineConfig cfg = resolve_config(c);
  const fs::path dir = prepare_out(c.out);
  write_snapshot(dir, cfg);
  const Dataset data = generate_synthetic(cfg.data);
  const PipelineResult r = run_pipeline(cfg, data, c.threads, log_line);
  for (const auto& ck : r.checkpoints) save_checkpoint(ck, dir / (ck.provenance.phase + ".cbz"));
  write_report(dir / ("final.report." + c.format), r.final_report, c.format);
  if (c.format == "jsonl") {
    auto f = open_out(dir / "pipeline.jsonl");
    f << json{{"phase", "untrained"}, {"ndcg", r.baseline_ndcg}}.dump() << '\n';
    for (const auto& row : r.rows) {
      f << json{{"phase", row.phase},
                {"interaction", to_string(row.interaction)},
                {"lr", row.lr},
                {"ndcg", row.ndcg},
                {"seconds", row.seconds}}
               .dump()
        << '\n';
    }
  } else {
    auto f = open_out(dir / "pipeline.csv");
    write_pipeline_table(f, r);
  }
  write_pipeline_table(std::cout, r);
  return kOk;
}

int cmd_ablate(const Common& c, const std::string& init, bool no_init_prompts) {
  const PipelineConfig cfg = resolve_config(c);
  const fs::path dir = prepare_out(c.out);
  write_snapshot(dir, cfg);
  AblationOptions ab;
  if (!init.empty()) ab.init = load_checkpoint(init);
  ab.init_prompts = !no_init_prompts;
  const AblationResult r = run_ablation_grid(cfg, generate_synthetic(cfg.data), ab, c.threads, log_line);
  if (c.format == "jsonl") {
    auto f = open_out(dir / "ablation.jsonl");
    for (const auto& cell : r.cells) {
      f << json{{"init_prompts", r.init_prompts}, {"prompts", cell.prompts}, {"length", cell.length},
                {"query_len", cell.query_len},     {"doc_len", cell.doc_len}, {"ndcg", cell.ndcg},
                {"delta", cell.delta}}
               .dump()
        << '\n';
    }
  } else {
    auto f = open_out(dir / "ablation.csv");
    write_ablation_table(f, r);
  }
  write_ablation_table(std::cout, r);
  return kOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data_dir, const std::string& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  EvalOptions eo;
  eo.threads = c.threads;
  EvalReport rep;
  if (!data_dir.empty()) {
    const BeirData d = load_beir_dir(data_dir);
    eo.dataset = fs::path(data_dir).filename().string();
    rep = evaluate(ck.model, d.corpus, d.queries, d.qrels, ck.settings, eo);
  } else {
    const PipelineConfig cfg = resolve_config(c);
    eo.k = cfg.eval_k;
    eo.dataset = "synthetic";
    const Dataset d = generate_synthetic(cfg.data);
    rep = evaluate(ck.model, d.corpus, d.queries, d.qrels, ck.settings, eo);
  }
  if (out.empty()) {
    if (c.format == "jsonl") {
      write_report_jsonl(std::cout, rep);
    } else {
      write_report_csv(std::cout, rep);
    }
  } else {
    write_report(out, rep, c.format);
  }
  std::fprintf(stderr, "ndcg@%zu %.4f over %zu queries (%zu excluded)\n", rep.k, rep.mean, rep.query_count,
               rep.excluded_queries);
  return kOk;
}

int cmd_inspect(const std::string& checkpoint) {
  std::cout << checkpoint_summary(load_checkpoint(checkpoint)).dump(2) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-vector retrieval training lab"};
  app.require_subcommand(1);
  Common common;
  std::string phase = "unsupervised", init, checkpoint, data_dir, report_out;
  bool subset = false, no_init_prompts = false;

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic corpus, queries, qrels and training sources");
  add_common(gen, common);

  auto* train = app.add_subcommand("train-phase", "Train one phase and save its checkpoint");
  add_common(train, common);
  train->add_option("--phase", phase, "unsupervised, supervised or kd")
      ->check(CLI::IsMember({"unsupervised", "supervised", "kd"}));
  train->add_option("--init", init, "Starting checkpoint (fresh model when omitted)")->check(CLI::ExistingFile);

  auto* pipe = app.add_subcommand("run-pipeline", "Run every phase of the configured variant");
  add_common(pipe, common);

  auto* ablate = app.add_subcommand("ablate", "Prompt by length-compensation grid");
  add_common(ablate, common);
  ablate->add_option("--init", init, "Pre-trained starting checkpoint")->check(CLI::ExistingFile);
  ablate->add_flag("--no-init-prompts", no_init_prompts, "Pre-train the starting point without prompts");

  auto* sweep_cmd = app.add_subcommand("sweep", "Learning-rate sweep for one phase, then train at the best rate");
  add_common(sweep_cmd, common);
  sweep_cmd->add_option("--phase", phase, "unsupervised, supervised or kd")
      ->check(CLI::IsMember({"unsupervised", "supervised", "kd"}));
  sweep_cmd->add_option("--init", init, "Starting checkpoint")->check(CLI::ExistingFile);

  auto* eval_cmd = app.add_subcommand("eval", "nDCG of a checkpoint on synthetic or BEIR data");
  add_common(eval_cmd, common, false);
  eval_cmd->add_option("checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", data_dir, "BEIR directory (synthetic set from the config when omitted)")
      ->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--out", report_out, "Report file (stdout when omitted)");

  auto* exp = app.add_subcommand("export-beir", "Write the evaluation split in BEIR layout");
  add_common(exp, common);
  exp->add_flag("--subset", subset, "Export the seeded evaluation subset only");

  auto* inspect = app.add_subcommand("inspect-checkpoint", "Print a checkpoint summary as JSON");
  inspect->add_option("checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*train) return run_single_phase(common, phase, init, false);
    if (*pipe) return cmd_run_pipeline(common);
    if (*ablate) return cmd_ablate(common, init, no_init_prompts);
    if (*sweep_cmd) return run_single_phase(common, phase, init, true);
    if (*eval_cmd) return cmd_eval(common, checkpoint, data_dir, report_out);
    if (*exp) return cmd_export_beir(common, subset);
    if (*inspect) return cmd_inspect(checkpoint);
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  }
  return kOk;
}
