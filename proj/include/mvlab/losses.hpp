#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mvlab/autodiff.hpp"
#include "mvlab/error.hpp"
#include "mvlab/maxsim.hpp"
#include "mvlab/tensor.hpp"

namespace mvlab {

// Softmax temperature, parameterized as log(tau) so it stays positive.
struct TemperatureParam {
  static constexpr const char* kName = "log_tau";
  static constexpr double kDefaultFixed = 0.2;

  double log_tau = std::log(kDefaultFixed);
  bool trainable = false;
  std::optional<double> fixed_value = kDefaultFixed;

  double tau() const { return trainable ? std::exp(log_tau) : *fixed_value; }

  static TemperatureParam fixed(double value) {
    if (!(value > 0.0)) throw ContractError("temperature must be positive");
    return {std::log(value), false, value};
  }

  static TemperatureParam learnable(double initial = kDefaultFixed) {
    if (!(initial > 0.0)) throw ContractError("temperature must be positive");
    return {std::log(initial), true, std::nullopt};
  }

  friend bool operator==(const TemperatureParam&, const TemperatureParam&) = default;
};

// Freezes the temperature; later losses carry no gradient to log_tau.
inline TemperatureParam fix_temperature(const TemperatureParam&, double value) {
  return TemperatureParam::fixed(value);
}

// 1x1 value holding 1/tau; tracked through log_tau when trainable.
template <class Ctx>
typename Ctx::Value inverse_temperature(Ctx& ctx, const TemperatureParam& temp) {
  if (temp.trainable) {
    auto lt = ctx.parameter(TemperatureParam::kName, DenseMatrix::scalar(temp.log_tau));
    return ctx.exp(ctx.scale(lt, -1.0));
  }
  return ctx.constant(DenseMatrix::scalar(1.0 / temp.tau()));
}

namespace detail {

inline kernels::EntrySelection diagonal_selection(std::size_t n) {
  kernels::EntrySelection sel{n, 1, {}};
  for (std::size_t i = 0; i < n; ++i) sel.source.emplace_back(i, i);
  return sel;
}

inline kernels::EntrySelection off_diagonal_selection(std::size_t n) {
  kernels::EntrySelection sel{n, n == 0 ? 0 : n - 1, {}};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) sel.source.emplace_back(i, j);
  return sel;
}

inline DenseMatrix log_softmax_rows(const DenseMatrix& m) {
  const DenseMatrix lse = kernels::logsumexp_rows(m);
  DenseMatrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j) - lse(i, 0);
  return out;
}

// mean over rows of (lse(row) - row[0]): cross-entropy with the target in column 0.
template <class Ctx>
typename Ctx::Value first_column_cross_entropy(Ctx& ctx, const typename Ctx::Value& logits) {
  const std::size_t rows = ctx.value(logits).rows();
  kernels::EntrySelection first{rows, 1, {}};
  for (std::size_t i = 0; i < rows; ++i) first.source.emplace_back(i, 0);
  auto lse = ctx.logsumexp_rows(logits);
  auto target = ctx.select_entries(logits, std::move(first));
  auto per_row = ctx.add(lse, ctx.scale(target, -1.0));
  return ctx.scale(ctx.sum_all(per_row), 1.0 / static_cast<double>(rows));
}

}  // namespace detail

// InfoNCE with in-batch negatives over a square matrix whose diagonal holds the positives:
//   L = -(1/B) sum_i [ s_ii / tau - logsumexp_j (s_ij / tau) ]
template <class Ctx>
typename Ctx::Value infonce_loss(Ctx& ctx, const typename Ctx::Value& scores,
                                 const typename Ctx::Value& inv_tau) {
  // Shapes are copied out: recording new nodes may move earlier values.
  const auto [b, cols] = ctx.value(scores).shape_pair();
  if (b != cols || b == 0) {
    throw ContractError("infonce: score matrix must be square and non-empty, got " +
                        DenseMatrix::shape_of(b, cols));
  }
  auto logits = ctx.mul_scalar(scores, inv_tau);
  auto lse = ctx.logsumexp_rows(logits);
  auto diag = ctx.select_entries(logits, detail::diagonal_selection(b));
  auto per_row = ctx.add(lse, ctx.scale(diag, -1.0));
  return ctx.scale(ctx.sum_all(per_row), 1.0 / static_cast<double>(b));
}

// Softmax cross-entropy of each positive against its K hard negatives and,
// optionally, the other queries' positives (off-diagonal of `in_batch`).
template <class Ctx>
typename Ctx::Value supervised_contrastive_loss(
    Ctx& ctx, const typename Ctx::Value& pos, const typename Ctx::Value& neg,
    const typename Ctx::Value& inv_tau,
    const std::optional<typename Ctx::Value>& in_batch = std::nullopt) {
  const auto [b, pcols] = ctx.value(pos).shape_pair();
  const auto [nrows, k] = ctx.value(neg).shape_pair();
  if (pcols != 1 || b == 0) {
    throw ContractError("supervised_contrastive: positives must be a non-empty column, got " +
                        DenseMatrix::shape_of(b, pcols));
  }
  if (nrows != b) {
    throw ContractError("supervised_contrastive: negatives " + DenseMatrix::shape_of(nrows, k) +
                        " vs positives " + DenseMatrix::shape_of(b, pcols));
  }
  if (k == 0 && !in_batch) {
    throw ContractError("supervised_contrastive: no negatives (K=0 without in-batch)");
  }
  std::vector<typename Ctx::Value> cols{ctx.mul_scalar(pos, inv_tau)};
  if (k > 0) cols.push_back(ctx.mul_scalar(neg, inv_tau));
  if (in_batch) {
    const auto [ir, ic] = ctx.value(*in_batch).shape_pair();
    if (ir != b || ic != b) {
      throw ContractError("supervised_contrastive: in-batch scores " + DenseMatrix::shape_of(ir, ic) +
                          " must be BxB for B=" + std::to_string(b));
    }
    if (b > 1) {
      cols.push_back(ctx.mul_scalar(
          ctx.select_entries(*in_batch, detail::off_diagonal_selection(b)), inv_tau));
    }
  }
  if (cols.size() == 1) {
    throw ContractError("supervised_contrastive: no negatives (K=0 and batch of one)");
  }
  return detail::first_column_cross_entropy(ctx, ctx.concat_cols(cols));
}

// mean over queries of KL(softmax(teacher) || softmax(student)). The teacher is
// a constant; only student scores receive gradient.
template <class Ctx>
typename Ctx::Value kd_kl_loss(Ctx& ctx, const DenseMatrix& teacher,
                               const typename Ctx::Value& student) {
  const auto [rows, cols] = ctx.value(student).shape_pair();
  if (teacher.rows() != rows || teacher.cols() != cols) {
    throw ContractError("kd_kl: teacher " + teacher.shape() + " vs student " +
                        DenseMatrix::shape_of(rows, cols));
  }
  if (cols < 2 || rows == 0) {
    throw ContractError("kd_kl: need at least two candidates per query, got " +
                        DenseMatrix::shape_of(rows, cols));
  }
  const DenseMatrix log_p = detail::log_softmax_rows(teacher);
  const DenseMatrix probs = kernels::map(log_p, [](double v) { return std::exp(v); });
  // log q = s - lse(s), with lse broadcast across the row.
  auto lse = ctx.logsumexp_rows(student);
  auto lse_wide = ctx.matmul(lse, ctx.constant(DenseMatrix(1, cols, 1.0)));
  auto log_q = ctx.add(student, ctx.scale(lse_wide, -1.0));
  auto diff = ctx.add(ctx.constant(log_p), ctx.scale(log_q, -1.0));
  auto kl = ctx.sum_all(ctx.mul(ctx.constant(probs), diff));
  return ctx.scale(kl, 1.0 / static_cast<double>(rows));
}

// Eager conveniences returning plain numbers.

inline double infonce(const ScoreMatrix& scores, const TemperatureParam& temp) {
  if (!scores.diagonal_is_positive) {
    throw ContractError("infonce: score matrix does not carry diagonal positives");
  }
  Eager ctx;
  return infonce_loss(ctx, scores.values, inverse_temperature(ctx, temp)).item();
}

inline double supervised_contrastive(const DenseMatrix& pos, const DenseMatrix& neg,
                                     const TemperatureParam& temp, bool include_in_batch,
                                     const std::optional<DenseMatrix>& in_batch = std::nullopt) {
  if (include_in_batch && !in_batch) {
    throw ContractError("supervised_contrastive: include_in_batch without in-batch scores");
  }
  Eager ctx;
  return supervised_contrastive_loss(ctx, pos, neg, inverse_temperature(ctx, temp),
                                     include_in_batch ? in_batch : std::nullopt)
      .item();
}

inline double kd_kl(const DenseMatrix& teacher, const DenseMatrix& student) {
  Eager ctx;
  return kd_kl_loss(ctx, teacher, student).item();
}

}  // namespace mvlab
