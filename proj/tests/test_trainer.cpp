#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "mvlab/datasets.hpp"
#include "mvlab/trainer.hpp"
#include "test_support.hpp"

using namespace mvlab;
using mvlab::testing::max_rel_err;
using mvlab::testing::random_matrix;

namespace {

constexpr double kGradTol = 1e-8;
// Entries below this magnitude in both stores compare absolutely.
constexpr double kGradFloor = 1e-12;

std::string random_text(Rng& rng, std::size_t words) {
  std::string s;
  for (std::size_t i = 0; i < words; ++i) {
    if (i) s += ' ';
    s += "w" + std::to_string(rng.below(60));
  }
  return s;
}

TrainableState small_state(std::uint64_t seed, bool mix = true, bool learn_tau = true) {
  TokenizerConfig tok;
  tok.vocab_size = 160;
  tok.prompt_len = 2;
  TrainableState s{Model::fresh(tok, {12, 6, mix}, seed),
                   learn_tau ? TemperatureParam::learnable(0.3) : TemperatureParam::fixed(0.3)};
  return s;
}

LossSpec spec_for(LossKind kind, Interaction mode = Interaction::Late) {
  LossSpec s;
  s.kind = kind;
  s.settings.budget = {5, 7, true};
  s.settings.interaction = mode;
  return s;
}

std::vector<Sample> random_samples(Rng& rng, std::size_t n, std::size_t negs) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.query_id = "q" + std::to_string(i);
    s.query = random_text(rng, 1 + rng.below(5));
    s.positive_id = "p" + std::to_string(i);
    s.positive = random_text(rng, 1 + rng.below(8));
    for (std::size_t k = 0; k < negs; ++k) {
      s.negative_ids.push_back("n" + std::to_string(i) + "_" + std::to_string(k));
      s.negatives.push_back(random_text(rng, 1 + rng.below(8)));
    }
    for (std::size_t k = 0; k <= negs; ++k) s.teacher.push_back(2.0 * rng.normal());
    out.push_back(std::move(s));
  }
  return out;
}

TrainBatch random_batch(const TrainableState& st, const LossSpec& spec, std::size_t b,
                        std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t negs = spec.kind == LossKind::InfoNCE ? 0 : 3;
  const auto samples = random_samples(rng, b, negs);
  std::vector<const Sample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return make_batch(st.model, ptrs, spec.kind, spec.settings);
}

}  // namespace

TEST(GradCache, MatchesFullBatchForEveryLossAndChunking) {
  const std::size_t b = 16;
  double worst = 0.0;
  for (LossKind kind : {LossKind::InfoNCE, LossKind::Supervised, LossKind::KdKl}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto st = small_state(seed);
      const auto spec = spec_for(kind, seed % 3 == 2 ? Interaction::Dense : Interaction::Late);
      const auto batch = random_batch(st, spec, b, 100 + seed);
      const auto full = compute_gradients_full(st, batch, spec);
      for (std::size_t chunk : {std::size_t{1}, b / 4, b / 2, b}) {
        const auto gc = compute_gradients_gradcache(st, batch, spec, ChunkPlan::uniform(b, chunk));
        worst = std::max(worst, max_rel_err(gc.grads, full.grads, kGradFloor));
        EXPECT_NEAR(gc.loss, full.loss, 1e-12 * std::max(1.0, std::abs(full.loss)));
        EXPECT_EQ(gc.chunks, (b + chunk - 1) / chunk);
      }
    }
  }
  EXPECT_LE(worst, kGradTol);
}

TEST(GradCache, UnevenChunksAlsoMatch) {
  const auto st = small_state(3);
  const auto spec = spec_for(LossKind::Supervised);
  const auto batch = random_batch(st, spec, 10, 7);
  ChunkPlan plan{10, 0, {{0, 1}, {1, 7}, {7, 10}}};
  const auto full = compute_gradients_full(st, batch, spec);
  EXPECT_LE(max_rel_err(compute_gradients_gradcache(st, batch, spec, plan).grads, full.grads, kGradFloor),
            kGradTol);
}

TEST(GradCache, PeakLiveItemsBoundedByChunk) {
  const auto st = small_state(1);
  const auto spec = spec_for(LossKind::Supervised);
  const auto batch = random_batch(st, spec, 12, 5);
  const auto gc = compute_gradients_gradcache(st, batch, spec, ChunkPlan::uniform(12, 4));
  EXPECT_EQ(gc.stats.chunks, 3u);
  // Four queries plus their four documents each.
  EXPECT_EQ(gc.stats.peak_live_rep_items, 4u + 4u * 4u);
  EXPECT_EQ(gc.stats.cached_cotangent_items, 12u + 12u * 4u);
}

TEST(ChunkPlan, RejectsGapsAndWrongTotals) {
  EXPECT_THROW(ChunkPlan::uniform(4, 0), ContractError);
  EXPECT_THROW((ChunkPlan{4, 0, {{0, 2}, {3, 4}}}).validate(4), ContractError);
  EXPECT_THROW((ChunkPlan{4, 0, {{0, 2}}}).validate(4), ContractError);
  EXPECT_THROW(ChunkPlan::uniform(4, 2).validate(5), ContractError);
  EXPECT_NO_THROW(ChunkPlan::uniform(5, 2).validate(5));
}

TEST(Gather, WorkerSumsMatchFullBatch) {
  const std::size_t b = 32;
  for (LossKind kind : {LossKind::InfoNCE, LossKind::Supervised, LossKind::KdKl}) {
    const auto st = small_state(11);
    const auto spec = spec_for(kind);
    const auto batch = random_batch(st, spec, b, 21);
    const auto full = compute_gradients_full(st, batch, spec);
    for (std::size_t w : {1u, 2u, 4u, 8u}) {
      const auto g = compute_gradients_gathered(st, batch, spec, WorkerSet::even(b, w));
      EXPECT_LE(max_rel_err(g.grads, full.grads, kGradFloor), kGradTol) << to_string(kind) << " w=" << w;
      GatherOptions comp;
      comp.chunk_size = 2;
      const auto c = compute_gradients_gathered(st, batch, spec, WorkerSet::even(b, w), comp);
      EXPECT_LE(max_rel_err(c.grads, full.grads, kGradFloor), kGradTol) << to_string(kind) << " w=" << w;
    }
  }
}

TEST(Gather, ExecutionOrderDoesNotChangeTheResult) {
  const auto st = small_state(2);
  const auto spec = spec_for(LossKind::InfoNCE);
  const auto batch = random_batch(st, spec, 16, 3);
  const auto ref = compute_gradients_gathered(st, batch, spec, WorkerSet::even(16, 4));
  GatherOptions o;
  o.execution_order = {3, 0, 2, 1};
  const auto perm = compute_gradients_gathered(st, batch, spec, WorkerSet::even(16, 4), o);
  for (const auto& [name, g] : ref.grads.entries()) EXPECT_EQ(g, perm.grads.at(name)) << name;
  o.execution_order = {0, 0, 1, 2};
  EXPECT_THROW(compute_gradients_gathered(st, batch, spec, WorkerSet::even(16, 4), o), ContractError);
}

TEST(WorkerSet, EmptyShardIsContractError) {
  EXPECT_THROW(WorkerSet::even(3, 4).validate(3), ContractError);
  EXPECT_THROW(WorkerSet::even(3, 0), ContractError);
  const auto w = WorkerSet::even(10, 4);
  EXPECT_EQ(w.shards.front(), (std::pair<std::size_t, std::size_t>{0, 3}));
  EXPECT_EQ(w.shards.back(), (std::pair<std::size_t, std::size_t>{8, 10}));
}

TEST(Accumulation, KdMicroBatchesMatchFullBatch) {
  const auto st = small_state(4, true, false);
  const auto spec = spec_for(LossKind::KdKl);
  const auto batch = random_batch(st, spec, 12, 8);
  const auto full = compute_gradients_full(st, batch, spec);
  for (std::size_t acc : {1u, 2u, 3u, 4u, 12u}) {
    const auto g = compute_gradients_accumulated(st, batch, spec, acc);
    EXPECT_LE(max_rel_err(g.grads, full.grads, kGradFloor), kGradTol) << acc;
    EXPECT_NEAR(g.loss, full.loss, 1e-12);
  }
  EXPECT_THROW(compute_gradients_accumulated(st, batch, spec, 5), ConfigError);
}

TEST(Accumulation, RejectedForContrastiveLosses) {
  const auto st = small_state(4);
  const auto spec = spec_for(LossKind::InfoNCE);
  const auto batch = random_batch(st, spec, 8, 8);
  EXPECT_THROW(compute_gradients_accumulated(st, batch, spec, 2), ConfigError);
}

TEST(Temperature, LearnableGetsGradientFixedDoesNot) {
  const auto spec = spec_for(LossKind::InfoNCE);
  const auto learn = small_state(1, true, true);
  const auto batch = random_batch(learn, spec, 8, 2);
  EXPECT_NE(compute_gradients_full(learn, batch, spec).grads.find(TemperatureParam::kName), nullptr);
  const auto fixed = small_state(1, true, false);
  EXPECT_EQ(compute_gradients_full(fixed, batch, spec).grads.find(TemperatureParam::kName), nullptr);
}

TEST(Temperature, FixedTauUnchangedAfterTraining) {
  auto st = small_state(5, false, true);
  st.temperature = fix_temperature(st.temperature, 0.2);
  const auto spec = spec_for(LossKind::InfoNCE);
  OptimizerState opt;
  opt.config.lr = 1e-2;
  for (int step = 0; step < 100; ++step) {
    const auto batch = random_batch(st, spec, 4, static_cast<std::uint64_t>(step));
    train_step_full(st, batch, spec, opt);
  }
  EXPECT_EQ(st.temperature.tau(), 0.2);
}

TEST(Training, LossDecreasesOnRepeatedBatch) {
  auto st = small_state(6);
  const auto spec = spec_for(LossKind::InfoNCE);
  const auto batch = random_batch(st, spec, 8, 1);
  OptimizerState opt;
  opt.config.lr = 1e-2;
  const double before = batch_loss_value(st, batch, spec);
  for (int i = 0; i < 30; ++i) train_step_gradcache(st, batch, spec, ChunkPlan::uniform(8, 2), opt);
  EXPECT_LT(batch_loss_value(st, batch, spec), before);
}

TEST(Adam, FirstStepsMatchHandComputedUpdate) {
  OptimizerState opt;
  opt.config.lr = 0.1;
  opt.config.weight_decay = 0.01;
  DenseMatrix p = DenseMatrix::from_rows({{1.0, -2.0}});
  DenseMatrix tau = DenseMatrix::scalar(0.5);
  ParamRefs refs{{"w", &p}, {TemperatureParam::kName, &tau}};
  GradStore g;
  g.accumulate("w", DenseMatrix::from_rows({{0.5, 0.0}}));
  g.accumulate(TemperatureParam::kName, DenseMatrix::scalar(-1.0));
  adam_update(opt, g, refs);
  // Step 1: mhat = g, vhat = g^2, so the step is lr * sign(g) up to eps.
  EXPECT_NEAR(p(0, 0), 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0), 1e-15);
  EXPECT_NEAR(p(0, 1), -2.0 - 0.1 * (0.0 + 0.01 * -2.0), 1e-15);
  EXPECT_NEAR(tau.item(), 0.5 + 0.1 * (1.0 / (1.0 + 1e-8)), 1e-15);

  // Step 2 with the same gradient; moments from the recurrences.
  const double p0 = p(0, 0);
  adam_update(opt, g, refs);
  const double m = 0.9 * 0.05 + 0.1 * 0.5;
  const double v = 0.999 * 0.00025 + 0.001 * 0.25;
  const double mhat = m / (1.0 - 0.81);
  const double vhat = v / (1.0 - 0.999 * 0.999);
  EXPECT_NEAR(p(0, 0), p0 - 0.1 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * p0), 1e-14);
}

TEST(Adam, LinearWarmup) {
  OptimizerState opt;
  opt.config.lr = 1.0;
  opt.config.warmup_steps = 4;
  std::vector<double> lrs;
  DenseMatrix p(1, 1);
  for (int i = 0; i < 6; ++i) {
    lrs.push_back(opt.current_lr());
    adam_update(opt, GradStore{}, {{"p", &p}});
  }
  EXPECT_EQ(lrs, (std::vector<double>{0.25, 0.5, 0.75, 1.0, 1.0, 1.0}));
}

TEST(Adam, GradientShapeMismatchIsShapeError) {
  OptimizerState opt;
  DenseMatrix p(2, 2);
  GradStore g;
  g.accumulate("p", DenseMatrix(1, 2));
  EXPECT_THROW(adam_update(opt, g, {{"p", &p}}), ShapeError);
}

TEST(Training, NonFiniteGradientIsDivergence) {
  auto st = small_state(1);
  OptimizerState opt;
  BatchGradients g;
  g.grads.accumulate(EncoderParams::kProjection, DenseMatrix(12, 6, NAN));
  EXPECT_THROW(apply_gradients(st, opt, g), DivergenceError);
}

TEST(MakeBatch, LayoutIsSampleMajorWithPositiveFirst) {
  const auto st = small_state(1);
  Rng rng(3);
  const auto samples = random_samples(rng, 3, 2);
  std::vector<const Sample*> ptrs{&samples[0], &samples[1], &samples[2]};
  const auto spec = spec_for(LossKind::KdKl);
  const auto b = make_batch(st.model, ptrs, LossKind::KdKl, spec.settings);
  EXPECT_EQ(b.docs_per_sample, 3u);
  EXPECT_EQ(b.docs.size(), 9u);
  EXPECT_EQ(b.docs[3], st.model.tokenize(samples[1].positive, Role::Document, spec.settings));
  EXPECT_EQ(b.docs[5], st.model.tokenize(samples[1].negatives[1], Role::Document, spec.settings));
  EXPECT_EQ(b.teacher(2, 1), samples[2].teacher[1]);
  auto odd = samples;
  odd[1].negatives.pop_back();
  std::vector<const Sample*> bad{&odd[0], &odd[1]};
  EXPECT_THROW(make_batch(st.model, bad, LossKind::Supervised, spec.settings), InputError);
}

TEST(Sampler, BatchesAreSingleSourceFullAndSeeded) {
  Rng rng(1);
  DataSource a{"a", SourceKind::Pairs, random_samples(rng, 23, 0)};
  DataSource b{"b", SourceKind::Pairs, random_samples(rng, 9, 0)};
  const std::vector<const DataSource*> srcs{&a, &b};
  const auto batches = single_source_batches(srcs, 4, 7);
  EXPECT_EQ(batches.size(), 5u + 2u);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& br : batches) {
    EXPECT_EQ(br.samples.size(), 4u);
    for (auto i : br.samples) EXPECT_TRUE(seen.insert({br.source, i}).second);
  }
  EXPECT_EQ(single_source_batches(srcs, 4, 7), batches);
  EXPECT_NE(single_source_batches(srcs, 4, 8), batches);
  EXPECT_THROW(single_source_batches(srcs, 100, 7), ConfigError);
}

TEST(Sampler, SourceFrequencyFollowsSize) {
  Rng rng(2);
  DataSource big{"big", SourceKind::Pairs, random_samples(rng, 300, 0)};
  DataSource small{"small", SourceKind::Pairs, random_samples(rng, 100, 0)};
  const std::vector<const DataSource*> srcs{&big, &small};
  // Over the first half of an epoch the big source should supply about 3/4 of batches.
  std::size_t big_first_half = 0, total_first_half = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto batches = single_source_batches(srcs, 10, seed);
    for (std::size_t i = 0; i < batches.size() / 2; ++i) {
      big_first_half += batches[i].source == 0;
      ++total_first_half;
    }
  }
  const double frac = static_cast<double>(big_first_half) / static_cast<double>(total_first_half);
  EXPECT_NEAR(frac, 0.75, 0.05);
}
