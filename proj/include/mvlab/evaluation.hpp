#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mvlab/datasets.hpp"
#include "mvlab/encoder.hpp"
#include "mvlab/error.hpp"
#include "mvlab/maxsim.hpp"
#include "mvlab/rng.hpp"

namespace mvlab {

enum class Gain : std::uint8_t { Linear, Exponential };

inline double gain_of(int rel, Gain g) {
  if (rel <= 0) return 0.0;
  return g == Gain::Linear ? static_cast<double>(rel) : std::exp2(static_cast<double>(rel)) - 1.0;
}

inline bool has_positive(const std::map<std::string, int>& row) {
  return std::any_of(row.begin(), row.end(), [](const auto& kv) { return kv.second > 0; });
}

// DCG@k / IDCG@k with discount 1/log2(rank+1). Returns 0 when the row has no
// positive judgment (callers exclude such queries from means).
inline double ndcg_at_k(std::span<const std::string> ranking, const std::map<std::string, int>& row,
                        std::size_t k, Gain gain = Gain::Linear) {
  if (k == 0) throw ContractError("ndcg_at_k: k must be at least 1");
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i) {
    auto it = row.find(ranking[i]);
    if (it != row.end()) dcg += gain_of(it->second, gain) / std::log2(static_cast<double>(i) + 2.0);
  }
  std::vector<int> ideal;
  for (const auto& [id, rel] : row)
    if (rel > 0) ideal.push_back(rel);
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  double idcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ideal.size()); ++i)
    idcg += gain_of(ideal[i], gain) / std::log2(static_cast<double>(i) + 2.0);
  return idcg > 0.0 ? dcg / idcg : 0.0;
}

struct QueryScore {
  std::string query_id;
  double ndcg = 0.0;
  friend bool operator==(const QueryScore&, const QueryScore&) = default;
};

struct EvalReport {
  std::string dataset = "default";
  std::size_t k = 10;
  std::vector<QueryScore> per_query;  // query-id order
  std::map<std::string, double> per_dataset;
  double mean = 0.0;
  std::size_t query_count = 0;        // queries scored
  std::size_t excluded_queries = 0;   // queries without any positive judgment
  double seconds = 0.0;

  // Equality ignores timing.
  bool same_results(const EvalReport& o) const {
    return dataset == o.dataset && k == o.k && per_query == o.per_query &&
           per_dataset == o.per_dataset && mean == o.mean && query_count == o.query_count &&
           excluded_queries == o.excluded_queries;
  }
};

// Scores explicit rankings (query id -> ranked doc ids).
inline EvalReport score_rankings(const std::map<std::string, std::vector<std::string>>& rankings,
                                 const Qrels& qrels, std::size_t k, Gain gain = Gain::Linear,
                                 std::string dataset = "default") {
  EvalReport r;
  r.dataset = std::move(dataset);
  r.k = k;
  double sum = 0.0;
  for (const auto& [qid, ranking] : rankings) {
    auto row = qrels.find(qid);
    if (row == qrels.end() || !has_positive(row->second)) {
      ++r.excluded_queries;
      continue;
    }
    const double v = ndcg_at_k(ranking, row->second, k, gain);
    r.per_query.push_back({qid, v});
    sum += v;
  }
  r.query_count = r.per_query.size();
  r.mean = r.query_count ? sum / static_cast<double>(r.query_count) : 0.0;
  r.per_dataset[r.dataset] = r.mean;
  return r;
}

struct EvalOptions {
  std::size_t k = 10;
  Gain gain = Gain::Linear;
  unsigned threads = 0;
  std::string dataset = "default";
};

// Encodes the corpus once, retrieves the top k for every query and scores it.
inline EvalReport evaluate(const Model& model, const Corpus& corpus, const QuerySet& queries,
                           const Qrels& qrels, const EncodeSettings& settings,
                           const EvalOptions& opts = {}) {
  if (queries.empty()) throw ConfigError("evaluate: empty query set");
  if (corpus.empty()) throw ConfigError("evaluate: empty corpus");
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::string> doc_ids, doc_texts, qids, qtexts;
  for (const auto& [id, text] : corpus) {
    doc_ids.push_back(id);
    doc_texts.push_back(text);
  }
  for (const auto& [id, text] : queries) {
    qids.push_back(id);
    qtexts.push_back(text);
  }
  const CorpusIndex index = build_index(model, doc_ids, doc_texts, settings);
  const StackedReps q = to_stacked(encode_texts(model, qtexts, Role::Query, settings));
  const auto hits = retrieve_all(q, index, opts.k, opts.threads);
  std::map<std::string, std::vector<std::string>> rankings;
  for (std::size_t i = 0; i < qids.size(); ++i) {
    auto& ranking = rankings[qids[i]];
    for (const Hit& h : hits[i]) ranking.push_back(h.doc_id);
  }
  EvalReport r = score_rankings(rankings, qrels, opts.k, opts.gain, opts.dataset);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// Ranks by summed inverse document frequency of the distinct query words a
// document contains; ties by doc id.
inline std::map<std::string, std::vector<std::string>> lexical_rankings(const Corpus& corpus,
                                                                        const QuerySet& queries) {
  std::vector<std::string> ids;
  std::vector<std::vector<std::string>> doc_words;
  std::unordered_map<std::string, double> df;
  for (const auto& [id, text] : corpus) {
    ids.push_back(id);
    auto words = split_words(text, true);
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    for (const auto& w : words) df[w] += 1.0;
    doc_words.push_back(std::move(words));
  }
  const double n = static_cast<double>(ids.size());
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& [qid, text] : queries) {
    auto qw = split_words(text, true);
    std::sort(qw.begin(), qw.end());
    qw.erase(std::unique(qw.begin(), qw.end()), qw.end());
    std::vector<double> scores(ids.size(), 0.0);
    for (std::size_t d = 0; d < ids.size(); ++d)
      for (const auto& w : qw)
        if (std::binary_search(doc_words[d].begin(), doc_words[d].end(), w))
          scores[d] += std::log(n / df[w]);
    auto& ranking = out[qid];
    for (const Hit& h : top_k(scores, ids, ids.size())) ranking.push_back(h.doc_id);
  }
  return out;
}

// Perfect ranking: judged documents by descending relevance, then the rest.
inline std::map<std::string, std::vector<std::string>> qrels_rankings(const Corpus& corpus,
                                                                      const QuerySet& queries,
                                                                      const Qrels& qrels) {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& [qid, text] : queries) {
    std::vector<std::pair<int, std::string>> order;
    auto row = qrels.find(qid);
    for (const auto& [id, _] : corpus) {
      int rel = 0;
      if (row != qrels.end()) {
        auto it = row->second.find(id);
        if (it != row->second.end()) rel = it->second;
      }
      order.emplace_back(-rel, id);
    }
    std::sort(order.begin(), order.end());
    auto& ranking = out[qid];
    for (auto& [_, id] : order) ranking.push_back(std::move(id));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Seeded subsets for cheap model selection.

struct SubsetSpec {
  std::size_t max_queries = 50;
  std::size_t max_corpus = 2000;
  std::uint64_t seed = 0;
  friend bool operator==(const SubsetSpec&, const SubsetSpec&) = default;
};

struct EvalSet {
  Corpus corpus;
  QuerySet queries;
  Qrels qrels;
};

// Samples up to max_queries queries, keeps every document judged relevant for
// them and fills the corpus with other sampled documents up to max_corpus.
inline EvalSet make_subset(const Corpus& corpus, const QuerySet& queries, const Qrels& qrels,
                           const SubsetSpec& spec) {
  if (spec.max_queries == 0 || spec.max_corpus == 0) {
    throw ConfigError("subset: sizes must be at least 1");
  }
  Rng rng(derive_seed(spec.seed, 0x5B5E7));
  std::vector<std::string> qids;
  for (const auto& [id, _] : queries) qids.push_back(id);
  rng.shuffle(std::span<std::string>(qids));
  if (qids.size() > spec.max_queries) qids.resize(spec.max_queries);

  EvalSet out;
  for (const auto& id : qids) {
    out.queries.emplace(id, queries.at(id));
    auto row = qrels.find(id);
    if (row == qrels.end()) continue;
    out.qrels.emplace(id, row->second);
    for (const auto& [doc, rel] : row->second)
      if (rel > 0) {
        auto it = corpus.find(doc);
        if (it != corpus.end()) out.corpus.emplace(doc, it->second);
      }
  }
  std::vector<std::string> rest;
  for (const auto& [id, _] : corpus)
    if (!out.corpus.count(id)) rest.push_back(id);
  rng.shuffle(std::span<std::string>(rest));
  for (const auto& id : rest) {
    if (out.corpus.size() >= spec.max_corpus) break;
    out.corpus.emplace(id, corpus.at(id));
  }
  return out;
}

inline EvalReport evaluate_subset(const Model& model, const Corpus& corpus,
                                  const QuerySet& queries, const Qrels& qrels,
                                  const EncodeSettings& settings, const SubsetSpec& spec,
                                  const EvalOptions& opts = {}) {
  const EvalSet sub = make_subset(corpus, queries, qrels, spec);
  return evaluate(model, sub.corpus, sub.queries, sub.qrels, settings, opts);
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("spearman: need two equal series");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Learning-rate sweeps.

struct SweepSpec {
  double lr_min = 1e-5;
  double lr_max = 3e-3;
  std::size_t points = 10;

  friend bool operator==(const SweepSpec&, const SweepSpec&) = default;

  void validate() const {
    if (!(lr_min > 0.0) || !(lr_min < lr_max)) {
      throw ConfigError("sweep: need 0 < lr_min < lr_max");
    }
    if (points < 2) throw ConfigError("sweep: need at least 2 points");
  }
};

// Geometric sequence from lr_max down to lr_min, endpoints exact.
inline std::vector<double> log_spaced(const SweepSpec& spec) {
  spec.validate();
  const double hi = std::log(spec.lr_max), lo = std::log(spec.lr_min);
  std::vector<double> out(spec.points);
  for (std::size_t i = 0; i < spec.points; ++i) {
    const double f = static_cast<double>(i) / static_cast<double>(spec.points - 1);
    out[i] = std::exp(hi + f * (lo - hi));
  }
  out.front() = spec.lr_max;
  out.back() = spec.lr_min;
  return out;
}

struct SweepPoint {
  double lr = 0.0;
  double subset_ndcg = 0.0;
  bool ok = true;
  std::string message;
};

struct SweepResult {
  std::vector<SweepPoint> points;
  std::optional<double> best_lr;
};

// `run` trains at one learning rate and returns the selection metric. Diverged
// runs are recorded as failed and never selected; ties go to the lower rate.
inline SweepResult sweep(const SweepSpec& spec, const std::function<double(double)>& run) {
  SweepResult r;
  std::optional<std::size_t> best;
  for (double lr : log_spaced(spec)) {
    SweepPoint p{lr, 0.0, true, {}};
    try {
      p.subset_ndcg = run(lr);
      if (!std::isfinite(p.subset_ndcg)) throw DivergenceError("non-finite metric");
    } catch (const DivergenceError& e) {
      p.ok = false;
      p.message = e.what();
    }
    r.points.push_back(p);
    if (!p.ok) continue;
    const std::size_t i = r.points.size() - 1;
    if (!best || p.subset_ndcg > r.points[*best].subset_ndcg ||
        (p.subset_ndcg == r.points[*best].subset_ndcg && p.lr < r.points[*best].lr)) {
      best = i;
    }
  }
  if (best) r.best_lr = r.points[*best].lr;
  return r;
}

// ---------------------------------------------------------------------------
// Report serialization.

inline void write_report_jsonl(std::ostream& os, const EvalReport& r) {
  for (const auto& q : r.per_query)
    os << nlohmann::json{{"query_id", q.query_id}, {"ndcg", q.ndcg}}.dump() << '\n';
  nlohmann::json summary{{"summary", true},
                         {"dataset", r.dataset},
                         {"k", r.k},
                         {"mean", r.mean},
                         {"query_count", r.query_count},
                         {"excluded_queries", r.excluded_queries},
                         {"seconds", r.seconds},
                         {"per_dataset", r.per_dataset}};
  os << summary.dump() << '\n';
}

inline void write_report_csv(std::ostream& os, const EvalReport& r) {
  os << "query_id,ndcg\n";
  char buf[64];
  for (const auto& q : r.per_query) {
    std::snprintf(buf, sizeof buf, "%.17g", q.ndcg);
    os << q.query_id << ',' << buf << '\n';
  }
}

inline void write_sweep_csv(std::ostream& os, const SweepResult& r) {
  os << "lr,subset_ndcg,status\n";
  char buf[96];
  for (const auto& p : r.points) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,", p.lr, p.subset_ndcg);
    os << buf << (p.ok ? "ok" : "failed") << '\n';
  }
}

}  // namespace mvlab
