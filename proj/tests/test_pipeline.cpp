#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>
#include <string>

#include <unistd.h>

#include "mvlab/pipeline.hpp"

using namespace mvlab;
namespace fs = std::filesystem;

namespace {

// A pipeline small enough to run in well under a second.
PipelineConfig tiny_config(Variant v = Variant::C, std::uint64_t seed = 0) {
  PipelineConfig c = PipelineConfig::preset(v, seed);
  c.tokenizer.vocab_size = 512;
  c.encoder = {16, 8, false};
  c.data.topic_count = 3;
  c.data.vocab_per_topic = 32;
  c.data.docs_per_topic = 8;
  c.data.queries_per_topic = 4;
  c.data.train_queries_per_topic = 16;
  c.data.doc_len_tokens = 12;
  c.data.kd_candidates = 4;
  c.data.negatives_per_query = 2;
  c.subset = {6, 20, seed};
  for (auto& ph : c.phases) {
    ph.batch_size = 8;
    ph.chunk_size = ph.phase == Phase::Unsupervised ? 4 : 0;
    ph.accumulation = ph.phase == Phase::Kd ? 2 : 1;
    ph.epochs = 1;
    ph.budget = {8, 12, true};
  }
  return c;
}

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("mvlab_test_" + name + "_" + std::to_string(::getpid()));
}

}  // namespace

TEST(Presets, SweepRangesAndTemperature) {
  const PipelineConfig c = PipelineConfig::preset(Variant::C);
  const auto& un = c.phase(Phase::Unsupervised).sweep_range;
  EXPECT_EQ(un.points, 10u);
  EXPECT_EQ(un.lr_max, 3e-3);
  EXPECT_EQ(un.lr_min, 1e-5);
  const auto lrs = log_spaced(un);
  EXPECT_EQ(lrs.size(), 10u);
  EXPECT_EQ(lrs.front(), 3e-3);
  EXPECT_EQ(lrs.back(), 1e-5);
  for (const auto& ph : c.phases) {
    EXPECT_EQ(ph.temperature.value, 0.2);
    EXPECT_FALSE(ph.temperature.trainable);
    EXPECT_EQ(ph.loss, loss_for(ph.phase));
  }
  EXPECT_EQ(c.phase(Phase::Supervised).sweep_range, (SweepSpec{8e-8, 2e-5, 10}));
  EXPECT_EQ(c.phase(Phase::Kd).sweep_range, (SweepSpec{1e-7, 1e-3, 10}));
}

TEST(Presets, VariantInteractions) {
  using I = Interaction;
  EXPECT_EQ(variant_modes(Variant::A), (std::vector<I>{I::Dense, I::Dense, I::Late}));
  EXPECT_EQ(variant_modes(Variant::B), (std::vector<I>{I::Dense, I::Late, I::Late}));
  EXPECT_EQ(variant_modes(Variant::C), (std::vector<I>{I::Late, I::Late, I::Late}));
  for (Variant v : {Variant::A, Variant::B, Variant::C}) EXPECT_NO_THROW(PipelineConfig::preset(v).validate());
}

TEST(Presets, SeedPropagates) {
  const PipelineConfig c = PipelineConfig::preset(Variant::B, 7);
  EXPECT_EQ(c.data.seed, 7u);
  EXPECT_EQ(c.subset.seed, 7u);
  EXPECT_NE(c.phases[0].seed, c.phases[1].seed);
}

TEST(Config, TextRoundTrip) {
  PipelineConfig c = tiny_config(Variant::B, 3);
  c.phase(Phase::Kd).lr = 1.25e-4;
  c.phase(Phase::Supervised).sources = {"synthetic-triples", "extra"};
  const PipelineConfig back = parse_config(to_config_text(c), PipelineConfig::preset(Variant::C));
  EXPECT_EQ(back, c);
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, VariantLineSelectsPresetAnywhere) {
  const PipelineConfig c = parse_config("kd.lr = 0.5\nvariant = a\n");
  EXPECT_EQ(c.variant, Variant::A);
  EXPECT_EQ(c.phases[0].interaction, Interaction::Dense);
  EXPECT_EQ(c.phase(Phase::Kd).lr, 0.5);
}

TEST(Config, UnknownKeyNamesLine) {
  try {
    parse_config("seed = 1\n\nbogus = 3\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos) << e.what();
  }
}

TEST(Config, DuplicateAndMalformedLines) {
  EXPECT_THROW(parse_config("kd.lr = 1\nkd.lr = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("kd.lr 1\n"), ConfigError);
  EXPECT_THROW(parse_config("kd.lr = fast\n"), ConfigError);
  EXPECT_THROW(parse_config("kd.prompts = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("variant = d\n"), ConfigError);
}

TEST(Config, ValidationRejectsInconsistentPhases) {
  EXPECT_THROW(parse_config("kd.interaction = dense\n"), ConfigError);
  EXPECT_THROW(parse_config("supervised.loss = kd_kl\n"), ConfigError);
  EXPECT_THROW(parse_config("supervised.accumulation = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("variant = a\nunsupervised.interaction = late\n"), ConfigError);
  EXPECT_THROW(parse_config("kd.batch_size = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("kd.temperature = 0\n"), ConfigError);
}

TEST(Config, CommentsAndBlankLinesIgnored) {
  const PipelineConfig c = parse_config("# header\n\n  kd.lr = 0.25  # trailing\n");
  EXPECT_EQ(c.phase(Phase::Kd).lr, 0.25);
}

TEST(Config, StepPlanFollowsSettings) {
  PhaseConfig p = PhaseConfig::preset(Phase::Unsupervised, Interaction::Late);
  EXPECT_EQ(p.step_plan().mode, StepMode::GradCache);
  p.workers = 4;
  EXPECT_EQ(p.step_plan().mode, StepMode::Gathered);
  const PhaseConfig kd = PhaseConfig::preset(Phase::Kd, Interaction::Late);
  EXPECT_EQ(kd.step_plan().mode, StepMode::Accumulated);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Checkpoint c = Checkpoint::fresh(TokenizerConfig{}, {16, 8, true}, 5);
  c.temperature = TemperatureParam::learnable(0.37);
  c.settings.interaction = Interaction::Dense;
  c.provenance = {"pipeline-c", "kd", 9, 0xDEADBEEFCAFEull};
  const std::string bytes = serialize_checkpoint(c);
  const Checkpoint back = parse_checkpoint(bytes);
  EXPECT_EQ(back, c);
  EXPECT_EQ(serialize_checkpoint(back), bytes);

  const fs::path p = temp_file("ckpt");
  save_checkpoint(c, p);
  EXPECT_EQ(load_checkpoint(p), c);
  fs::remove(p);
}

TEST(Checkpoint, EveryTruncationIsRejected) {
  const Checkpoint c = Checkpoint::fresh(TokenizerConfig{64, 2, true}, {4, 2, false}, 1);
  const std::string bytes = serialize_checkpoint(c);
  for (std::size_t n = 0; n < bytes.size(); ++n)
    EXPECT_THROW(parse_checkpoint(std::string_view(bytes).substr(0, n)), IoError) << n;
}

TEST(Checkpoint, TruncationErrorNamesOffset) {
  const Checkpoint c = Checkpoint::fresh(TokenizerConfig{64, 2, true}, {4, 2, false}, 1);
  const std::string bytes = serialize_checkpoint(c);
  try {
    parse_checkpoint(std::string_view(bytes).substr(0, 10));
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 8"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, CorruptHeaderAndTrailingBytesRejected) {
  const Checkpoint c = Checkpoint::fresh(TokenizerConfig{64, 2, true}, {4, 2, false}, 1);
  std::string bytes = serialize_checkpoint(c);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad), IoError);
  bad = bytes;
  bad[4] = 2;
  EXPECT_THROW(parse_checkpoint(bad), IoError);
  EXPECT_THROW(parse_checkpoint(bytes + "x"), IoError);
  EXPECT_THROW(load_checkpoint(temp_file("does_not_exist")), IoError);
}

TEST(Phase, UnknownOrMismatchedSourceIsConfigError) {
  const PipelineConfig c = tiny_config();
  const Dataset data = generate_synthetic(c.data);
  PhaseConfig ph = c.phase(Phase::Supervised);
  ph.sources = {"nope"};
  const Checkpoint init = Checkpoint::fresh(c.tokenizer, c.encoder, 0);
  EXPECT_THROW(run_phase(ph, init, data), ConfigError);
  ph.sources = {"synthetic-pairs"};
  EXPECT_THROW(run_phase(ph, init, data), ConfigError);
}

TEST(Phase, SweepSelectsAFiniteRate) {
  PipelineConfig c = tiny_config();
  const Dataset data = generate_synthetic(c.data);
  PhaseConfig ph = c.phase(Phase::Unsupervised);
  ph.sweep = true;
  ph.sweep_range = {1e-4, 1e-2, 3};
  RunOptions o;
  o.subset = c.subset;
  const PhaseResult r = run_phase(ph, Checkpoint::fresh(c.tokenizer, c.encoder, 0), data, o);
  ASSERT_TRUE(r.sweep.has_value());
  EXPECT_EQ(r.sweep->points.size(), 3u);
  EXPECT_EQ(r.lr, *r.sweep->best_lr);
}

TEST(Phase, DivergenceCarriesLastFiniteCheckpoint) {
  PipelineConfig c = tiny_config();
  const Dataset data = generate_synthetic(c.data);
  PhaseConfig ph = c.phase(Phase::Unsupervised);
  ph.lr = 1e300;
  const Checkpoint init = Checkpoint::fresh(c.tokenizer, c.encoder, 0);
  try {
    run_phase(ph, init, data);
    FAIL() << "expected divergence";
  } catch (const PhaseDivergence& e) {
    EXPECT_TRUE(e.last_finite().model.params.embedding.all_finite());
  }
}

TEST(Pipeline, SameSeedGivesIdenticalCheckpoints) {
  const PipelineConfig c = tiny_config(Variant::C, 4);
  const Dataset data = generate_synthetic(c.data);
  const PipelineResult a = run_pipeline(c, data, 0);
  const PipelineResult b = run_pipeline(c, data, 0);
  ASSERT_EQ(a.checkpoints.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_EQ(serialize_checkpoint(a.checkpoints[i]), serialize_checkpoint(b.checkpoints[i]));
  EXPECT_EQ(a.checkpoints.back().provenance.phase, "kd");
  EXPECT_EQ(a.checkpoints.back().provenance.config_hash, config_hash(c));
  const PipelineResult other = run_pipeline(tiny_config(Variant::C, 5), generate_synthetic(tiny_config(Variant::C, 5).data), 0);
  EXPECT_NE(checkpoint_hash(other.checkpoints.back()), checkpoint_hash(a.checkpoints.back()));
}

TEST(Pipeline, TableListsBaselineAndPhases) {
  const PipelineConfig c = tiny_config(Variant::A);
  const PipelineResult r = run_pipeline(c, generate_synthetic(c.data), 0);
  std::ostringstream os;
  write_pipeline_table(os, r);
  const std::string t = os.str();
  EXPECT_EQ(t.rfind("phase,interaction,lr,ndcg,seconds\nuntrained,late,0,", 0), 0u) << t;
  EXPECT_NE(t.find("\nunsupervised,dense,"), std::string::npos);
  EXPECT_NE(t.find("\nsupervised,dense,"), std::string::npos);
  EXPECT_NE(t.find("\nkd,late,"), std::string::npos);
}

TEST(Ablation, GridHasFourCellsWithSevenExtraTokensUnderLength) {
  PipelineConfig c = tiny_config();
  c.tokenizer.prompt_len = 7;
  const Dataset data = generate_synthetic(c.data);
  for (bool init_prompts : {true, false}) {
    AblationOptions ab;
    ab.init_prompts = init_prompts;
    ab.phases = {Phase::Supervised};
    const AblationResult r = run_ablation_grid(c, data, ab);
    EXPECT_EQ(r.init_prompts, init_prompts);
    ASSERT_EQ(r.cells.size(), 4u);
    const std::size_t q = c.phase(Phase::Supervised).budget.query_len;
    const std::size_t d = c.phase(Phase::Supervised).budget.doc_len;
    for (const auto& cell : r.cells) {
      EXPECT_EQ(cell.query_len, q + (cell.length ? 7u : 0u));
      EXPECT_EQ(cell.doc_len, d + (cell.length ? 7u : 0u));
    }
    EXPECT_FALSE(r.cells[0].prompts || r.cells[0].length);
    EXPECT_TRUE(r.cells[1].prompts && !r.cells[1].length);
    EXPECT_TRUE(!r.cells[2].prompts && r.cells[2].length);
    EXPECT_TRUE(r.cells[3].prompts && r.cells[3].length);
    EXPECT_EQ(r.cells[0].delta, 0.0);
  }
}

TEST(Ablation, AcceptsAnExplicitInitCheckpoint) {
  PipelineConfig c = tiny_config();
  const Dataset data = generate_synthetic(c.data);
  AblationOptions ab;
  Checkpoint init = Checkpoint::fresh(c.tokenizer, c.encoder, 2);
  init.settings.prompts_enabled = false;
  ab.init = init;
  ab.phases = {Phase::Kd};
  const AblationResult r = run_ablation_grid(c, data, ab);
  EXPECT_FALSE(r.init_prompts);
  std::ostringstream os;
  write_ablation_table(os, r);
  EXPECT_EQ(os.str().rfind("init_prompts,prompts,length,query_len,doc_len,ndcg,delta\noff,off,off,", 0), 0u);
}
