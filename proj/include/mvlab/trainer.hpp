#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvlab/autodiff.hpp"
#include "mvlab/datasets.hpp"
#include "mvlab/encoder.hpp"
#include "mvlab/error.hpp"
#include "mvlab/losses.hpp"
#include "mvlab/rng.hpp"

namespace mvlab {

enum class LossKind : std::uint8_t { InfoNCE, Supervised, KdKl };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::InfoNCE: return "infonce";
    case LossKind::Supervised: return "supervised_contrastive";
    case LossKind::KdKl: return "kd_kl";
  }
  return "?";
}

struct LossSpec {
  LossKind kind = LossKind::InfoNCE;
  TemperatureParam temperature;  // unused by kd_kl
  bool include_in_batch = true;  // supervised: other queries' positives as extra negatives
  EncodeSettings settings;
};

// Everything a training step reads: the model weights and the temperature.
struct TrainableState {
  Model model;
  TemperatureParam temperature;
};

// Tokenized batch. Documents are sample-major: sample i owns documents
// [i*docs_per_sample, (i+1)*docs_per_sample) with its positive first.
struct TrainBatch {
  std::vector<TokenSequence> queries;
  std::vector<TokenSequence> docs;
  std::size_t docs_per_sample = 1;
  DenseMatrix teacher;  // samples x docs_per_sample, kd only

  std::size_t size() const { return queries.size(); }
};

inline TrainBatch make_batch(const Model& model, std::span<const Sample* const> samples,
                             LossKind kind, const EncodeSettings& settings) {
  if (samples.empty()) throw ContractError("make_batch: empty batch");
  TrainBatch b;
  const std::size_t negs = kind == LossKind::InfoNCE ? 0 : samples.front()->negatives.size();
  b.docs_per_sample = 1 + negs;
  if (kind == LossKind::KdKl) b.teacher = DenseMatrix(samples.size(), b.docs_per_sample);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = *samples[i];
    if (kind != LossKind::InfoNCE && s.negatives.size() != negs) {
      throw InputError("make_batch: sample '" + s.query_id + "' has " +
                       std::to_string(s.negatives.size()) + " negatives, expected " +
                       std::to_string(negs));
    }
    b.queries.push_back(model.tokenize(s.query, Role::Query, settings));
    b.docs.push_back(model.tokenize(s.positive, Role::Document, settings));
    for (std::size_t k = 0; k < negs; ++k)
      b.docs.push_back(model.tokenize(s.negatives[k], Role::Document, settings));
    if (kind == LossKind::KdKl) {
      if (s.teacher.size() != b.docs_per_sample) {
        throw InputError("make_batch: sample '" + s.query_id + "' teacher scores do not match "
                         "its candidates");
      }
      for (std::size_t g = 0; g < b.docs_per_sample; ++g) b.teacher(i, g) = s.teacher[g];
    }
  }
  return b;
}

inline TrainBatch make_batch(const Model& model, const DataSource& source,
                             std::span<const std::size_t> indices, LossKind kind,
                             const EncodeSettings& settings) {
  std::vector<const Sample*> ptrs;
  ptrs.reserve(indices.size());
  for (std::size_t i : indices) ptrs.push_back(&source.samples.at(i));
  return make_batch(model, ptrs, kind, settings);
}

// Row structure of stacked query or document representations.
struct RepBlock {
  std::size_t rows_per_item = 1;
  std::vector<std::uint8_t> mask;
};

namespace detail {

inline PairLayout supervised_layout(std::size_t b, std::size_t g, bool in_batch) {
  // Row i: its own group (positive, negatives), then every sample's positive.
  PairLayout p{b, g + (in_batch ? b : 0), {}};
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < g; ++k)
      p.cells.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i * g + k));
    if (in_batch)
      for (std::size_t j = 0; j < b; ++j)
        p.cells.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j * g));
  }
  return p;
}

inline kernels::EntrySelection column_block(std::size_t rows, std::size_t first,
                                            std::size_t count) {
  kernels::EntrySelection sel{rows, count, {}};
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t c = 0; c < count; ++c) sel.source.emplace_back(i, first + c);
  return sel;
}

}  // namespace detail

// Batch loss as a function of stacked query and document representations.
template <class Ctx>
typename Ctx::Value batch_loss(Ctx& ctx, const typename Ctx::Value& q, const RepBlock& qb,
                               const typename Ctx::Value& d, const RepBlock& db,
                               const TrainBatch& batch, const LossSpec& spec) {
  const std::size_t b = batch.size();
  const std::size_t g = batch.docs_per_sample;
  auto operands = [&](PairLayout layout) {
    return MaxSimOperands{qb.rows_per_item, qb.mask, db.rows_per_item, db.mask, std::move(layout)};
  };
  switch (spec.kind) {
    case LossKind::InfoNCE: {
      if (g != 1) throw ContractError("infonce: batch must hold one document per sample");
      auto scores = ctx.maxsim(q, d, operands(PairLayout::all_pairs(b, b)));
      return infonce_loss(ctx, scores, inverse_temperature(ctx, spec.temperature));
    }
    case LossKind::Supervised: {
      if (g < 2 && !(spec.include_in_batch && b > 1)) {
        throw ContractError("supervised_contrastive: batch has no negatives");
      }
      auto all = ctx.maxsim(q, d, operands(detail::supervised_layout(b, g, spec.include_in_batch)));
      auto pos = ctx.select_entries(all, detail::column_block(b, 0, 1));
      auto neg = ctx.select_entries(all, detail::column_block(b, 1, g - 1));
      std::optional<typename Ctx::Value> in_batch;
      if (spec.include_in_batch) in_batch = ctx.select_entries(all, detail::column_block(b, g, b));
      return supervised_contrastive_loss(ctx, pos, neg, inverse_temperature(ctx, spec.temperature),
                                         in_batch);
    }
    case LossKind::KdKl: {
      auto student = ctx.maxsim(q, d, operands(PairLayout::grouped(b, g, g, 0)));
      return kd_kl_loss(ctx, batch.teacher, student);
    }
  }
  throw ContractError("batch_loss: unknown loss kind");
}

// ---------------------------------------------------------------------------
// Chunk and worker plans.

struct ChunkPlan {
  std::size_t effective_batch = 0;
  std::size_t chunk_size = 0;
  std::vector<std::pair<std::size_t, std::size_t>> chunks;  // [begin, end)

  static ChunkPlan uniform(std::size_t batch, std::size_t chunk) {
    if (chunk == 0) throw ContractError("ChunkPlan: chunk size must be at least 1");
    ChunkPlan p{batch, chunk, {}};
    for (std::size_t lo = 0; lo < batch; lo += chunk) p.chunks.emplace_back(lo, std::min(batch, lo + chunk));
    return p;
  }

  // The chunks must partition [0, batch) in order.
  void validate(std::size_t batch) const {
    if (effective_batch != batch) {
      throw ContractError("ChunkPlan: plan covers " + std::to_string(effective_batch) +
                          " samples, batch has " + std::to_string(batch));
    }
    std::size_t next = 0;
    for (const auto& [lo, hi] : chunks) {
      if (lo != next || hi <= lo) {
        throw ContractError("ChunkPlan: gap or overlap at sample " + std::to_string(next));
      }
      next = hi;
    }
    if (next != batch) throw ContractError("ChunkPlan: chunks stop at " + std::to_string(next));
  }
};

struct WorkerSet {
  std::size_t worker_count = 1;
  std::vector<std::pair<std::size_t, std::size_t>> shards;  // [begin, end) per worker

  // Contiguous shards by index; the first batch % workers shards get one extra sample.
  static WorkerSet even(std::size_t batch, std::size_t workers) {
    if (workers == 0) throw ContractError("WorkerSet: worker_count must be at least 1");
    WorkerSet w{workers, {}};
    std::size_t lo = 0;
    for (std::size_t i = 0; i < workers; ++i) {
      const std::size_t n = batch / workers + (i < batch % workers ? 1 : 0);
      w.shards.emplace_back(lo, lo + n);
      lo += n;
    }
    return w;
  }

  void validate(std::size_t batch) const {
    if (worker_count == 0 || shards.size() != worker_count) {
      throw ContractError("WorkerSet: shard count does not match worker_count");
    }
    std::size_t next = 0;
    for (std::size_t i = 0; i < shards.size(); ++i) {
      const auto [lo, hi] = shards[i];
      if (hi <= lo) throw ContractError("WorkerSet: worker " + std::to_string(i) + " has an empty shard");
      if (lo != next) throw ContractError("WorkerSet: shards do not partition the batch");
      next = hi;
    }
    if (next != batch) throw ContractError("WorkerSet: shards do not cover the batch");
  }
};

// ---------------------------------------------------------------------------
// Gradient computation.

struct GradCacheStats {
  std::size_t chunks = 0;
  std::size_t cached_cotangent_items = 0;
  std::size_t peak_live_rep_items = 0;  // items encoded on one tape during replay
};

struct BatchGradients {
  GradStore grads;
  double loss = 0.0;
  std::size_t chunks = 1;
  GradCacheStats stats;
};

namespace detail {

template <class Ctx>
struct EncodedPair {
  EncodedBatch<Ctx> q;
  EncodedBatch<Ctx> d;
};

// Encodes samples [lo, hi): their queries and their document groups.
template <class Ctx>
EncodedPair<Ctx> encode_range(Ctx& ctx, const BoundParams<Ctx>& bound, const TrainBatch& batch,
                              std::size_t lo, std::size_t hi, const EncodeSettings& s) {
  const std::size_t g = batch.docs_per_sample;
  std::span<const TokenSequence> qs(batch.queries);
  std::span<const TokenSequence> ds(batch.docs);
  return {encode_batch(ctx, bound, qs.subspan(lo, hi - lo), s.interaction, s.options()),
          encode_batch(ctx, bound, ds.subspan(lo * g, (hi - lo) * g), s.interaction, s.options())};
}

template <class Ctx>
RepBlock block_of(const EncodedBatch<Ctx>& b) {
  return {b.rows_per_item, b.mask};
}

inline RepBlock concat_blocks(const std::vector<RepBlock>& parts) {
  RepBlock out{parts.front().rows_per_item, {}};
  for (const auto& p : parts) out.mask.insert(out.mask.end(), p.mask.begin(), p.mask.end());
  return out;
}

inline void check_finite_loss(double loss) {
  if (!std::isfinite(loss)) throw DivergenceError("training loss is not finite");
}

inline constexpr const char* kQueryReps = "q_reps";
inline constexpr const char* kDocReps = "d_reps";

// Full-batch loss on eager representations; returns the loss, the cotangents of
// every representation row and the log_tau gradient (when trainable).
struct RepCotangents {
  double loss = 0.0;
  DenseMatrix q;
  DenseMatrix d;
  std::optional<DenseMatrix> log_tau;
};

inline RepCotangents rep_cotangents(const DenseMatrix& q, const RepBlock& qb, const DenseMatrix& d,
                                    const RepBlock& db, const TrainBatch& batch,
                                    const LossSpec& spec, unsigned threads) {
  Tape head(threads);
  Var qv = head.parameter(kQueryReps, q);
  Var dv = head.parameter(kDocReps, d);
  Var loss = batch_loss(head, qv, qb, dv, db, batch, spec);
  GradStore g = head.backward(loss);
  RepCotangents out{head.value(loss).item(), g.at(kQueryReps), g.at(kDocReps), std::nullopt};
  if (const DenseMatrix* lt = g.find(TemperatureParam::kName)) out.log_tau = *lt;
  return out;
}

// Replays samples [lo, hi) with recording and pulls the cached cotangent rows back
// to the parameters.
inline GradStore replay_chunk(const TrainableState& state, const TrainBatch& batch,
                              const LossSpec& spec, const RepCotangents& cot, std::size_t lo,
                              std::size_t hi, unsigned threads, std::size_t& live_items) {
  Tape tape(threads);
  auto bound = bind_params(tape, state.model.params);
  auto enc = encode_range(tape, bound, batch, lo, hi, spec.settings);
  live_items = enc.q.items + enc.d.items;
  const std::size_t g = batch.docs_per_sample;
  const std::size_t qr = enc.q.rows_per_item, dr = enc.d.rows_per_item;
  std::vector<Var> parts{enc.q.vectors, enc.d.vectors};
  Var both = tape.concat_rows(parts);
  std::vector<DenseMatrix> cparts{kernels::slice_rows(cot.q, lo * qr, hi * qr),
                                  kernels::slice_rows(cot.d, lo * g * dr, hi * g * dr)};
  return tape.backward_from(both, kernels::concat_rows(std::vector<const DenseMatrix*>{
                                      &cparts[0], &cparts[1]}));
}

}  // namespace detail

inline BatchGradients compute_gradients_full(const TrainableState& state, const TrainBatch& batch,
                                             const LossSpec& spec, unsigned threads = 0) {
  if (batch.size() == 0) throw ContractError("train step: empty batch");
  Tape tape(threads);
  auto bound = bind_params(tape, state.model.params);
  auto enc = detail::encode_range(tape, bound, batch, 0, batch.size(), spec.settings);
  LossSpec s = spec;
  s.temperature = state.temperature;
  Var loss = batch_loss(tape, enc.q.vectors, detail::block_of(enc.q), enc.d.vectors,
                        detail::block_of(enc.d), batch, s);
  BatchGradients out;
  out.loss = tape.value(loss).item();
  detail::check_finite_loss(out.loss);
  out.grads = tape.backward(loss);
  return out;
}

// Three passes: (1) encode every chunk without recording; (2) full-batch loss on
// the cached representations, giving d loss / d rep; (3) re-encode each chunk on a
// fresh tape and back-propagate its slice of the cached cotangents.
inline BatchGradients compute_gradients_gradcache(const TrainableState& state,
                                                  const TrainBatch& batch, const LossSpec& spec,
                                                  const ChunkPlan& plan, unsigned threads = 0) {
  if (batch.size() == 0) throw ContractError("train step: empty batch");
  plan.validate(batch.size());
  LossSpec s = spec;
  s.temperature = state.temperature;

  Eager eager(threads);
  auto ebound = bind_params(eager, state.model.params);
  std::vector<DenseMatrix> qs, ds;
  std::vector<RepBlock> qbs, dbs;
  for (const auto& [lo, hi] : plan.chunks) {
    auto enc = detail::encode_range(eager, ebound, batch, lo, hi, s.settings);
    qbs.push_back(detail::block_of(enc.q));
    dbs.push_back(detail::block_of(enc.d));
    qs.push_back(std::move(enc.q.vectors));
    ds.push_back(std::move(enc.d.vectors));
  }
  const RepBlock qb = detail::concat_blocks(qbs), db = detail::concat_blocks(dbs);
  detail::RepCotangents cot;
  {
    const DenseMatrix q = eager.concat_rows(qs), d = eager.concat_rows(ds);
    qs.clear();
    ds.clear();
    cot = detail::rep_cotangents(q, qb, d, db, batch, s, threads);
  }
  detail::check_finite_loss(cot.loss);

  BatchGradients out;
  out.loss = cot.loss;
  out.chunks = plan.chunks.size();
  out.stats.chunks = plan.chunks.size();
  out.stats.cached_cotangent_items = batch.size() * (1 + batch.docs_per_sample);
  for (const auto& [lo, hi] : plan.chunks) {
    std::size_t live = 0;
    out.grads.merge(detail::replay_chunk(state, batch, s, cot, lo, hi, threads, live));
    out.stats.peak_live_rep_items = std::max(out.stats.peak_live_rep_items, live);
  }
  if (cot.log_tau) out.grads.accumulate(TemperatureParam::kName, *cot.log_tau);
  return out;
}

struct GatherOptions {
  // Chunk size for gradient caching inside every worker; whole shard when unset.
  std::optional<std::size_t> chunk_size;
  // Order in which simulated workers run. Reduction always follows worker index.
  std::vector<std::size_t> execution_order;
};

// Every worker records only its own shard, sees the other shards' representations
// as constants, evaluates the full-batch loss and back-propagates locally. Encoder
// gradients are summed in worker order. log_tau is replicated on every worker, so
// its gradient is the mean of the (identical) per-worker values.
inline BatchGradients compute_gradients_gathered(const TrainableState& state,
                                                 const TrainBatch& batch, const LossSpec& spec,
                                                 const WorkerSet& workers,
                                                 const GatherOptions& opts = {},
                                                 unsigned threads = 0) {
  if (batch.size() == 0) throw ContractError("train step: empty batch");
  workers.validate(batch.size());
  LossSpec s = spec;
  s.temperature = state.temperature;
  const std::size_t n = workers.worker_count;

  std::vector<std::size_t> order = opts.execution_order;
  if (order.empty()) {
    order.resize(n);
    std::iota(order.begin(), order.end(), 0);
  }
  {
    std::vector<std::size_t> check = order;
    std::sort(check.begin(), check.end());
    for (std::size_t i = 0; i < check.size(); ++i)
      if (check.size() != n || check[i] != i) {
        throw ContractError("GatherOptions: execution_order must permute the workers");
      }
  }

  // What each worker broadcasts: its shard's representations, computed once.
  Eager eager(threads);
  auto ebound = bind_params(eager, state.model.params);
  std::vector<DenseMatrix> shard_q, shard_d;
  std::vector<RepBlock> qbs, dbs;
  for (const auto& [lo, hi] : workers.shards) {
    auto enc = detail::encode_range(eager, ebound, batch, lo, hi, s.settings);
    qbs.push_back(detail::block_of(enc.q));
    dbs.push_back(detail::block_of(enc.d));
    shard_q.push_back(std::move(enc.q.vectors));
    shard_d.push_back(std::move(enc.d.vectors));
  }
  const RepBlock qb = detail::concat_blocks(qbs), db = detail::concat_blocks(dbs);

  struct WorkerResult {
    GradStore grads;
    double loss = 0.0;
    std::size_t chunks = 0;
    std::size_t peak = 0;
  };
  std::vector<WorkerResult> results(n);
  for (std::size_t w : order) {
    const auto [lo, hi] = workers.shards[w];
    WorkerResult& r = results[w];
    if (!opts.chunk_size) {
      Tape tape(threads);
      auto bound = bind_params(tape, state.model.params);
      auto local = detail::encode_range(tape, bound, batch, lo, hi, s.settings);
      std::vector<Var> qparts, dparts;
      for (std::size_t k = 0; k < n; ++k) {
        qparts.push_back(k == w ? local.q.vectors : tape.constant(shard_q[k]));
        dparts.push_back(k == w ? local.d.vectors : tape.constant(shard_d[k]));
      }
      Var loss = batch_loss(tape, tape.concat_rows(qparts), qb, tape.concat_rows(dparts), db,
                            batch, s);
      r.loss = tape.value(loss).item();
      detail::check_finite_loss(r.loss);
      r.grads = tape.backward(loss);
      r.chunks = 1;
      r.peak = local.q.items + local.d.items;
    } else {
      // Gradient caching within the worker: cotangents from the gathered batch,
      // replayed chunk by chunk over the local shard only.
      const detail::RepCotangents cot = detail::rep_cotangents(
          eager.concat_rows(shard_q), qb, eager.concat_rows(shard_d), db, batch, s, threads);
      r.loss = cot.loss;
      detail::check_finite_loss(r.loss);
      const ChunkPlan plan = ChunkPlan::uniform(hi - lo, *opts.chunk_size);
      for (const auto& [clo, chi] : plan.chunks) {
        std::size_t live = 0;
        r.grads.merge(
            detail::replay_chunk(state, batch, s, cot, lo + clo, lo + chi, threads, live));
        r.peak = std::max(r.peak, live);
      }
      if (cot.log_tau) r.grads.accumulate(TemperatureParam::kName, *cot.log_tau);
      r.chunks = plan.chunks.size();
    }
  }

  BatchGradients out;
  out.loss = results.front().loss;
  out.chunks = 0;
  std::optional<DenseMatrix> tau_sum;
  for (std::size_t w = 0; w < n; ++w) {
    GradStore g = std::move(results[w].grads);
    if (const DenseMatrix* lt = g.find(TemperatureParam::kName)) {
      tau_sum = tau_sum ? kernels::add(*tau_sum, *lt) : *lt;
      g.erase(TemperatureParam::kName);
    }
    out.grads.merge(g);
    out.chunks += results[w].chunks;
    out.stats.peak_live_rep_items = std::max(out.stats.peak_live_rep_items, results[w].peak);
  }
  if (tau_sum) {
    out.grads.accumulate(TemperatureParam::kName,
                         kernels::scale(*tau_sum, 1.0 / static_cast<double>(n)));
  }
  out.stats.chunks = out.chunks;
  return out;
}

// Plain gradient accumulation over equal micro-batches, valid for losses that
// are means of independent per-sample terms (kd_kl). Each micro-batch gradient
// is weighted by its share of the batch.
inline BatchGradients compute_gradients_accumulated(const TrainableState& state,
                                                    const TrainBatch& batch, const LossSpec& spec,
                                                    std::size_t accumulation,
                                                    unsigned threads = 0) {
  if (accumulation == 0) throw ContractError("accumulation must be at least 1");
  if (spec.kind != LossKind::KdKl && accumulation > 1) {
    throw ConfigError("gradient accumulation is only valid for kd_kl; use gradient caching for "
                      "contrastive losses");
  }
  if (accumulation == 1) return compute_gradients_full(state, batch, spec, threads);
  if (batch.size() % accumulation != 0) {
    throw ConfigError("batch of " + std::to_string(batch.size()) +
                      " does not split into " + std::to_string(accumulation) + " micro-batches");
  }
  const std::size_t micro = batch.size() / accumulation;
  const std::size_t g = batch.docs_per_sample;
  BatchGradients out;
  out.chunks = accumulation;
  for (std::size_t m = 0; m < accumulation; ++m) {
    TrainBatch part;
    part.docs_per_sample = g;
    const std::size_t lo = m * micro;
    part.queries.assign(batch.queries.begin() + static_cast<std::ptrdiff_t>(lo),
                        batch.queries.begin() + static_cast<std::ptrdiff_t>(lo + micro));
    part.docs.assign(batch.docs.begin() + static_cast<std::ptrdiff_t>(lo * g),
                     batch.docs.begin() + static_cast<std::ptrdiff_t>((lo + micro) * g));
    part.teacher = kernels::slice_rows(batch.teacher, lo, lo + micro);
    BatchGradients mg = compute_gradients_full(state, part, spec, threads);
    const double w = static_cast<double>(micro) / static_cast<double>(batch.size());
    mg.grads.scale(w);
    out.grads.merge(mg.grads);
    out.loss += w * mg.loss;
  }
  out.grads.set_accumulation_count(accumulation);
  return out;
}

// ---------------------------------------------------------------------------
// AdamW.

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 0;
  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct OptimizerState {
  AdamConfig config;
  std::map<std::string, DenseMatrix> m;
  std::map<std::string, DenseMatrix> v;
  std::size_t step = 0;

  // Learning rate for the step about to be taken (1-based), with linear warmup.
  double current_lr() const {
    const double t = static_cast<double>(step + 1);
    if (config.warmup_steps == 0 || t >= static_cast<double>(config.warmup_steps)) return config.lr;
    return config.lr * t / static_cast<double>(config.warmup_steps);
  }
};

using ParamRefs = std::vector<std::pair<std::string, DenseMatrix*>>;

//   m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g^2
//   p -= lr * ( m/(1-b1^t) / (sqrt(v/(1-b2^t)) + eps) + wd * p )     (no decay on log_tau)
// Parameters without a gradient entry are treated as having a zero gradient.
inline void adam_update(OptimizerState& opt, const GradStore& grads, const ParamRefs& params) {
  const AdamConfig& c = opt.config;
  const double lr = opt.current_lr();
  ++opt.step;
  const double t = static_cast<double>(opt.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (const auto& [name, p] : params) {
    const DenseMatrix* g = grads.find(name);
    if (g && !g->same_shape(*p)) {
      throw ShapeError("adam: gradient " + g->shape() + " vs parameter '" + name + "' " +
                       p->shape());
    }
    auto& m = opt.m.try_emplace(name, p->rows(), p->cols()).first->second;
    auto& v = opt.v.try_emplace(name, p->rows(), p->cols()).first->second;
    if (!m.same_shape(*p)) throw ShapeError("adam: moment shape mismatch for '" + name + "'");
    const double wd = name == TemperatureParam::kName ? 0.0 : c.weight_decay;
    auto pd = p->data();
    auto md = m.data();
    auto vd = v.data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      const double gi = g ? g->data()[i] : 0.0;
      md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
      vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
      const double mhat = md[i] / bc1;
      const double vhat = vd[i] / bc2;
      pd[i] -= lr * (mhat / (std::sqrt(vhat) + c.eps) + wd * pd[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// Training steps.

struct TrainStepReport {
  double loss = 0.0;
  double grad_norm = 0.0;
  double tau = 0.0;
  std::size_t chunks = 1;
  double seconds = 0.0;
};

enum class StepMode : std::uint8_t { Full, GradCache, Gathered, Accumulated };

struct StepPlan {
  StepMode mode = StepMode::Full;
  std::size_t chunk_size = 0;     // gradcache, or per-worker chunking when gathered
  std::size_t workers = 1;        // gathered
  std::size_t accumulation = 1;   // accumulated
};

inline BatchGradients compute_gradients(const TrainableState& state, const TrainBatch& batch,
                                        const LossSpec& spec, const StepPlan& plan,
                                        unsigned threads = 0) {
  switch (plan.mode) {
    case StepMode::Full: return compute_gradients_full(state, batch, spec, threads);
    case StepMode::GradCache:
      return compute_gradients_gradcache(
          state, batch, spec,
          ChunkPlan::uniform(batch.size(), plan.chunk_size ? plan.chunk_size : batch.size()),
          threads);
    case StepMode::Gathered: {
      GatherOptions o;
      if (plan.chunk_size) o.chunk_size = plan.chunk_size;
      return compute_gradients_gathered(state, batch, spec,
                                        WorkerSet::even(batch.size(), plan.workers), o, threads);
    }
    case StepMode::Accumulated:
      return compute_gradients_accumulated(state, batch, spec, plan.accumulation, threads);
  }
  throw ContractError("unknown step mode");
}

// One optimizer update from precomputed gradients.
inline TrainStepReport apply_gradients(TrainableState& state, OptimizerState& opt,
                                       const BatchGradients& g) {
  if (!g.grads.all_finite()) throw DivergenceError("non-finite gradient");
  ParamRefs refs{{EncoderParams::kEmbedding, &state.model.params.embedding},
                 {EncoderParams::kProjection, &state.model.params.projection}};
  if (state.model.params.has_context_mix())
    refs.emplace_back(EncoderParams::kContextMix, &state.model.params.context_mix);
  DenseMatrix log_tau = DenseMatrix::scalar(state.temperature.log_tau);
  if (state.temperature.trainable) refs.emplace_back(TemperatureParam::kName, &log_tau);
  adam_update(opt, g.grads, refs);
  if (state.temperature.trainable) state.temperature.log_tau = log_tau.item();
  for (const auto& [name, p] : refs)
    if (!p->all_finite()) throw DivergenceError("parameter '" + name + "' became non-finite");
  return {g.loss, g.grads.global_norm(), state.temperature.tau(), g.chunks, 0.0};
}

inline TrainStepReport train_step(TrainableState& state, const TrainBatch& batch,
                                  const LossSpec& spec, const StepPlan& plan, OptimizerState& opt,
                                  unsigned threads = 0) {
  const auto start = std::chrono::steady_clock::now();
  TrainStepReport r = apply_gradients(state, opt, compute_gradients(state, batch, spec, plan, threads));
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline TrainStepReport train_step_full(TrainableState& state, const TrainBatch& batch,
                                       const LossSpec& spec, OptimizerState& opt,
                                       unsigned threads = 0) {
  return train_step(state, batch, spec, {StepMode::Full}, opt, threads);
}

inline TrainStepReport train_step_gradcache(TrainableState& state, const TrainBatch& batch,
                                            const LossSpec& spec, const ChunkPlan& plan,
                                            OptimizerState& opt, unsigned threads = 0) {
  const auto start = std::chrono::steady_clock::now();
  TrainStepReport r = apply_gradients(
      state, opt, compute_gradients_gradcache(state, batch, spec, plan, threads));
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline TrainStepReport train_step_gathered(TrainableState& state, const TrainBatch& batch,
                                           const LossSpec& spec, const WorkerSet& workers,
                                           OptimizerState& opt, unsigned threads = 0) {
  const auto start = std::chrono::steady_clock::now();
  TrainStepReport r = apply_gradients(
      state, opt, compute_gradients_gathered(state, batch, spec, workers, {}, threads));
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// Eager loss of a batch under the current state.
inline double batch_loss_value(const TrainableState& state, const TrainBatch& batch,
                               const LossSpec& spec, unsigned threads = 0) {
  Eager ctx(threads);
  auto bound = bind_params(ctx, state.model.params);
  auto enc = detail::encode_range(ctx, bound, batch, 0, batch.size(), spec.settings);
  LossSpec s = spec;
  s.temperature = state.temperature;
  return batch_loss(ctx, enc.q.vectors, detail::block_of(enc.q), enc.d.vectors,
                    detail::block_of(enc.d), batch, s)
      .item();
}

// ---------------------------------------------------------------------------
// Single-source batching.

struct BatchRef {
  std::size_t source = 0;             // index into the source list
  std::vector<std::size_t> samples;   // indices into that source
  friend bool operator==(const BatchRef&, const BatchRef&) = default;
};

// One epoch of batches, each drawn from a single source. Every source is shuffled
// and cut into full batches (the remainder is dropped); the next batch comes
// from a source chosen with probability proportional to its remaining samples.
inline std::vector<BatchRef> single_source_batches(std::span<const DataSource* const> sources,
                                                   std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  Rng rng(derive_seed(seed, 0xBA7C4));
  std::vector<std::vector<std::size_t>> order(sources.size());
  std::vector<std::size_t> next(sources.size(), 0), full(sources.size(), 0);
  bool any = false;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    order[s].resize(sources[s]->size());
    std::iota(order[s].begin(), order[s].end(), 0);
    rng.shuffle(std::span<std::size_t>(order[s]));
    full[s] = sources[s]->size() / batch_size;
    any = any || full[s] > 0;
  }
  if (!any) {
    throw ConfigError("every data source is smaller than the batch size " +
                      std::to_string(batch_size));
  }
  std::vector<BatchRef> out;
  for (;;) {
    std::uint64_t remaining = 0;
    for (std::size_t s = 0; s < sources.size(); ++s) remaining += (full[s] - next[s]) * batch_size;
    if (remaining == 0) break;
    std::uint64_t pick = rng.below(remaining);
    std::size_t s = 0;
    for (;; ++s) {
      const std::uint64_t left = (full[s] - next[s]) * batch_size;
      if (pick < left) break;
      pick -= left;
    }
    BatchRef b{s, {}};
    const std::size_t lo = next[s] * batch_size;
    b.samples.assign(order[s].begin() + static_cast<std::ptrdiff_t>(lo),
                     order[s].begin() + static_cast<std::ptrdiff_t>(lo + batch_size));
    ++next[s];
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace mvlab
