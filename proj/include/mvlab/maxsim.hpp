#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mvlab/encoder.hpp"
#include "mvlab/error.hpp"
#include "mvlab/maxsim_kernel.hpp"
#include "mvlab/tensor.hpp"

namespace mvlab {

// Query x document similarities plus the ids labelling rows and columns.
struct ScoreMatrix {
  DenseMatrix values;
  std::vector<std::string> row_ids;
  std::vector<std::string> col_ids;
  bool diagonal_is_positive = false;
};

// Stacks representations row-wise, padding shorter items with masked-out zero rows.
struct StackedReps {
  DenseMatrix vectors;
  std::vector<std::uint8_t> mask;
  std::size_t rows_per_item = 1;

  std::size_t items() const { return rows_per_item == 0 ? 0 : vectors.rows() / rows_per_item; }
  ItemRows rows() const { return {rows_per_item, mask}; }
};

inline StackedReps stack_reps(std::span<const MultiVectorRep> reps) {
  if (reps.empty()) throw InputError("stack_reps: no representations");
  std::size_t len = 0;
  const std::size_t width = reps.front().vectors.cols();
  for (const auto& r : reps) {
    if (r.vectors.cols() != width) {
      throw ShapeError("stack_reps: widths differ " + reps.front().vectors.shape() + " vs " +
                       r.vectors.shape());
    }
    if (r.scoring_mask.size() != r.vectors.rows()) throw ShapeError("stack_reps: mask length");
    len = std::max(len, r.vectors.rows());
  }
  StackedReps s;
  s.rows_per_item = len;
  s.vectors = DenseMatrix(reps.size() * len, width);
  s.mask.assign(reps.size() * len, 0);
  for (std::size_t i = 0; i < reps.size(); ++i) {
    for (std::size_t t = 0; t < reps[i].vectors.rows(); ++t) {
      std::copy_n(reps[i].vectors.row(t).data(), width, s.vectors.row(i * len + t).data());
      s.mask[i * len + t] = reps[i].scoring_mask[t];
    }
  }
  return s;
}

inline StackedReps to_stacked(EncodedBatch<Eager> b) {
  return {std::move(b.vectors), std::move(b.mask), b.rows_per_item};
}

// Sum over masked-in query rows of the best dot product against masked-in document rows.
inline double maxsim(const MultiVectorRep& q, const MultiVectorRep& d) {
  if (q.vectors.cols() != d.vectors.cols()) {
    throw ShapeError("maxsim: widths differ " + q.vectors.shape() + " vs " + d.vectors.shape());
  }
  if (d.masked_in() == 0) throw InputError("maxsim: document has no masked-in rows");
  return kernels::maxsim_pairs(q.vectors, ItemRows{q.vectors.rows(), q.scoring_mask}, d.vectors,
                               ItemRows{d.vectors.rows(), d.scoring_mask},
                               PairLayout::all_pairs(1, 1))
      .item();
}

// All-pairs score matrix. Dense reps are single rows, for which MaxSim reduces
// to the dot product.
inline ScoreMatrix score_matrix(std::span<const MultiVectorRep> queries,
                                std::span<const MultiVectorRep> docs, Interaction interaction,
                                unsigned threads = 0, Blocking blocking = {}) {
  if (queries.empty() || docs.empty()) throw ContractError("score_matrix: empty input");
  if (interaction == Interaction::Dense) {
    auto single = [](const MultiVectorRep& r) { return r.vectors.rows() == 1; };
    if (!std::all_of(queries.begin(), queries.end(), single) ||
        !std::all_of(docs.begin(), docs.end(), single)) {
      throw ContractError("score_matrix: dense interaction requires single-vector reps");
    }
  }
  const StackedReps q = stack_reps(queries);
  const StackedReps d = stack_reps(docs);
  ScoreMatrix out;
  out.values = kernels::maxsim_pairs(q.vectors, q.rows(), d.vectors, d.rows(),
                                     PairLayout::all_pairs(queries.size(), docs.size()), nullptr,
                                     threads, blocking);
  out.diagonal_is_positive = queries.size() == docs.size();
  return out;
}

// Frozen document representations for exact retrieval.
struct CorpusIndex {
  std::vector<std::string> doc_ids;
  StackedReps reps;
  Interaction interaction = Interaction::Late;

  std::size_t size() const { return doc_ids.size(); }
  bool empty() const { return doc_ids.empty(); }
};

inline CorpusIndex build_index(std::vector<std::string> doc_ids, StackedReps reps,
                               Interaction interaction) {
  if (reps.items() != doc_ids.size()) throw ShapeError("CorpusIndex: ids and reps misaligned");
  std::unordered_set<std::string> seen;
  for (const auto& id : doc_ids)
    if (!seen.insert(id).second) throw InputError("CorpusIndex: duplicate doc id '" + id + "'");
  return {std::move(doc_ids), std::move(reps), interaction};
}

inline CorpusIndex build_index(const Model& model, std::vector<std::string> doc_ids,
                               std::span<const std::string> texts, const EncodeSettings& s) {
  return build_index(std::move(doc_ids), to_stacked(encode_texts(model, texts, Role::Document, s)),
                     s.interaction);
}

struct Hit {
  std::string doc_id;
  double score = 0.0;
  friend bool operator==(const Hit&, const Hit&) = default;
};

// Top-k ordering of one row of scores: score descending, then doc id ascending.
inline std::vector<Hit> top_k(std::span<const double> scores, const std::vector<std::string>& ids,
                              std::size_t k) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  };
  const std::size_t n = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                    better);
  std::vector<Hit> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back({ids[order[i]], scores[order[i]]});
  return out;
}

// Exact top-k for every query item in `queries` against the index.
inline std::vector<std::vector<Hit>> retrieve_all(const StackedReps& queries,
                                                  const CorpusIndex& index, std::size_t k,
                                                  unsigned threads = 0) {
  if (k == 0) throw ContractError("retrieve: k must be at least 1");
  std::vector<std::vector<Hit>> out(queries.items());
  if (index.empty() || queries.items() == 0) return out;
  const DenseMatrix scores = kernels::maxsim_pairs(
      queries.vectors, queries.rows(), index.reps.vectors, index.reps.rows(),
      PairLayout::all_pairs(queries.items(), index.size()), nullptr, threads);
  parallel_for(out.size(), threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) out[i] = top_k(scores.row(i), index.doc_ids, k);
  });
  return out;
}

inline std::vector<Hit> retrieve(const MultiVectorRep& q, const CorpusIndex& index, std::size_t k,
                                 unsigned threads = 0) {
  if (k == 0) throw ContractError("retrieve: k must be at least 1");
  if (index.empty()) return {};
  if (q.vectors.cols() != index.reps.vectors.cols()) {
    throw ShapeError("retrieve: query width " + q.vectors.shape() + " vs index " +
                     index.reps.vectors.shape());
  }
  StackedReps one{q.vectors, q.scoring_mask, q.vectors.rows()};
  return retrieve_all(one, index, k, threads).front();
}

}  // namespace mvlab
