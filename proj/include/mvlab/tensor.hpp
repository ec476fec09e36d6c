#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mvlab/error.hpp"

namespace mvlab {

// Row-major double-precision matrix. Value type: copies are deep.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("DenseMatrix: data length " + std::to_string(data_.size()) +
                       " does not match " + shape_of(rows_, cols_));
    }
  }

  static DenseMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("DenseMatrix::from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return DenseMatrix(r, c, std::move(data));
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static DenseMatrix column(std::span<const double> values) {
    return DenseMatrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
  }

  static DenseMatrix scalar(double v) { return DenseMatrix(1, 1, v); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  // Value of a 1x1 matrix.
  double item() const {
    if (rows_ != 1 || cols_ != 1) throw ShapeError("item() on " + shape());
    return data_[0];
  }

  std::string shape() const { return shape_of(rows_, cols_); }
  std::pair<std::size_t, std::size_t> shape_pair() const { return {rows_, cols_}; }

  bool same_shape(const DenseMatrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  // Bitwise-style equality (exact double comparison).
  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

  static std::string shape_of(std::size_t r, std::size_t c) {
    return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Forward kernels shared by the eager evaluator and the tape. Every kernel is
// a pure function with a fixed reduction order, so identical inputs give
// bit-identical outputs no matter which path calls it.
namespace kernels {

inline void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + a.shape() + " x " + b.shape());
  }
  DenseMatrix out(a.rows(), b.cols());
  const std::size_t n = a.cols();
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* dst = out.row(i).data();
    const double* ar = a.row(i).data();
    for (std::size_t k = 0; k < n; ++k) {
      const double s = ar[k];
      const double* br = b.row(k).data();
      for (std::size_t j = 0; j < m; ++j) dst[j] += s * br[j];
    }
  }
  return out;
}

// a * b^T
inline DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: column counts differ " + a.shape() + " x " + b.shape() + "^T");
  }
  DenseMatrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ar = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto br = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < ar.size(); ++k) s += ar[k] * br[k];
      out(i, j) = s;
    }
  }
  return out;
}

// a^T * b
inline DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: row counts differ " + a.shape() + "^T x " + b.shape());
  }
  DenseMatrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const auto ar = a.row(k);
    const auto br = b.row(k);
    for (std::size_t i = 0; i < ar.size(); ++i) {
      const double s = ar[i];
      double* dst = out.row(i).data();
      for (std::size_t j = 0; j < br.size(); ++j) dst[j] += s * br[j];
    }
  }
  return out;
}

inline DenseMatrix transpose(const DenseMatrix& a) {
  DenseMatrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <class F>
DenseMatrix map(const DenseMatrix& a, F f) {
  DenseMatrix out(a.rows(), a.cols());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <class F>
DenseMatrix zip(const DenseMatrix& a, const DenseMatrix& b, const char* op, F f) {
  require_same_shape(a, b, op);
  DenseMatrix out(a.rows(), a.cols());
  auto x = a.data();
  auto y = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i]);
  return out;
}

inline DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
  return zip(a, b, "add", [](double x, double y) { return x + y; });
}

inline DenseMatrix hadamard(const DenseMatrix& a, const DenseMatrix& b) {
  return zip(a, b, "mul", [](double x, double y) { return x * y; });
}

inline DenseMatrix scale(const DenseMatrix& a, double s) {
  return map(a, [s](double x) { return x * s; });
}

// Adds a 1xC row vector to every row of a.
inline DenseMatrix add_row_broadcast(const DenseMatrix& a, const DenseMatrix& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row_broadcast: " + a.shape() + " + " + row.shape());
  }
  DenseMatrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += row(0, j);
  }
  return out;
}

inline DenseMatrix row_sum(const DenseMatrix& a) {
  DenseMatrix out(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (double v : a.row(i)) s += v;
    out(i, 0) = s;
  }
  return out;
}

inline DenseMatrix sum_all(const DenseMatrix& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return DenseMatrix::scalar(s);
}

// Row maximum; ties resolve to the lowest column index.
inline DenseMatrix row_max(const DenseMatrix& a, std::vector<std::size_t>* argmax = nullptr) {
  if (a.cols() == 0) throw ShapeError("row_max: zero columns");
  DenseMatrix out(a.rows(), 1);
  if (argmax) argmax->assign(a.rows(), 0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < r.size(); ++j)
      if (r[j] > r[best]) best = j;
    out(i, 0) = r[best];
    if (argmax) (*argmax)[i] = best;
  }
  return out;
}

inline DenseMatrix gather_rows(const DenseMatrix& table, std::span<const std::uint32_t> ids) {
  DenseMatrix out(ids.size(), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows()) {
      throw InputError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(table.rows()) + " rows");
    }
    std::copy_n(table.row(ids[i]).data(), table.cols(), out.row(i).data());
  }
  return out;
}

inline double row_norm(std::span<const double> r) {
  double s = 0.0;
  for (double v : r) s += v * v;
  return std::sqrt(s);
}

// Divides each row by max(||row||, epsilon). Optionally reports the divisors.
inline DenseMatrix normalize_rows(const DenseMatrix& a, double epsilon,
                                  std::vector<double>* divisors = nullptr) {
  if (!(epsilon > 0.0)) throw ContractError("normalize_rows: epsilon must be positive");
  DenseMatrix out(a.rows(), a.cols());
  if (divisors) divisors->assign(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double d = std::max(row_norm(a.row(i)), epsilon);
    auto src = a.row(i);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] / d;
    if (divisors) (*divisors)[i] = d;
  }
  return out;
}

inline DenseMatrix logsumexp_rows(const DenseMatrix& a) {
  if (a.cols() == 0) throw ShapeError("logsumexp_rows: zero columns");
  DenseMatrix out(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    out(i, 0) = mx + std::log(s);
  }
  return out;
}

inline DenseMatrix concat_rows(std::span<const DenseMatrix* const> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  std::size_t rows = 0;
  const std::size_t cols = parts.front()->cols();
  for (const auto* p : parts) {
    if (p->cols() != cols) throw ShapeError("concat_rows: column mismatch " + p->shape());
    rows += p->rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const auto* p : parts) data.insert(data.end(), p->data().begin(), p->data().end());
  return DenseMatrix(rows, cols, std::move(data));
}

inline DenseMatrix concat_cols(std::span<const DenseMatrix* const> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t rows = parts.front()->rows();
  std::size_t cols = 0;
  for (const auto* p : parts) {
    if (p->rows() != rows) throw ShapeError("concat_cols: row mismatch " + p->shape());
    cols += p->cols();
  }
  DenseMatrix out(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t off = 0;
    for (const auto* p : parts) {
      std::copy_n(p->row(i).data(), p->cols(), out.row(i).data() + off);
      off += p->cols();
    }
  }
  return out;
}

inline DenseMatrix slice_rows(const DenseMatrix& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") outside " + a.shape());
  }
  std::vector<double> data(a.data().begin() + static_cast<std::ptrdiff_t>(begin * a.cols()),
                           a.data().begin() + static_cast<std::ptrdiff_t>(end * a.cols()));
  return DenseMatrix(end - begin, a.cols(), std::move(data));
}

// Flat (row, col) source coordinates for each output cell, row-major.
struct EntrySelection {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::pair<std::size_t, std::size_t>> source;
};

inline DenseMatrix select_entries(const DenseMatrix& a, const EntrySelection& sel) {
  if (sel.source.size() != sel.rows * sel.cols) throw ShapeError("select_entries: bad selection");
  DenseMatrix out(sel.rows, sel.cols);
  auto dst = out.data();
  for (std::size_t i = 0; i < sel.source.size(); ++i) {
    const auto [r, c] = sel.source[i];
    if (r >= a.rows() || c >= a.cols()) {
      throw ShapeError("select_entries: (" + std::to_string(r) + "," + std::to_string(c) +
                       ") outside " + a.shape());
    }
    dst[i] = a(r, c);
  }
  return out;
}

}  // namespace kernels

// Frobenius norm over several matrices.
inline double frobenius_norm(const DenseMatrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace mvlab
