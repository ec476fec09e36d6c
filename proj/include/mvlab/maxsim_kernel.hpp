#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mvlab/error.hpp"
#include "mvlab/parallel.hpp"
#include "mvlab/tensor.hpp"

namespace mvlab {

// Which (query item, document item) pair feeds each cell of a score matrix.
struct PairLayout {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> cells;  // row-major

  // cell (i, j) = (query i, doc j)
  static PairLayout all_pairs(std::size_t queries, std::size_t docs) {
    PairLayout p{queries, docs, {}};
    p.cells.reserve(queries * docs);
    for (std::size_t i = 0; i < queries; ++i)
      for (std::size_t j = 0; j < docs; ++j)
        p.cells.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
    return p;
  }

  // cell (i, g) = (query i, doc i*stride + offset + g)
  static PairLayout grouped(std::size_t queries, std::size_t group, std::size_t stride,
                            std::size_t offset) {
    PairLayout p{queries, group, {}};
    p.cells.reserve(queries * group);
    for (std::size_t i = 0; i < queries; ++i)
      for (std::size_t g = 0; g < group; ++g)
        p.cells.emplace_back(static_cast<std::uint32_t>(i),
                             static_cast<std::uint32_t>(i * stride + offset + g));
    return p;
  }
};

// Traversal tile for the scoring loop: query rows x document columns.
struct Blocking {
  std::size_t query_block = 64;
  std::size_t doc_block = 256;
};

// Row structure of a stacked representation matrix: items of equal row count,
// with a per-row scoring mask.
struct ItemRows {
  std::size_t rows_per_item = 1;
  std::span<const std::uint8_t> mask;
};

namespace kernels {

inline void check_item_rows(const DenseMatrix& m, const ItemRows& rows, const char* what) {
  if (rows.rows_per_item == 0 || m.rows() % rows.rows_per_item != 0) {
    throw ShapeError(std::string("maxsim: ") + what + " rows " + std::to_string(m.rows()) +
                     " not a multiple of " + std::to_string(rows.rows_per_item));
  }
  if (rows.mask.size() != m.rows()) {
    throw ShapeError(std::string("maxsim: ") + what + " mask length " +
                     std::to_string(rows.mask.size()) + " != rows " + std::to_string(m.rows()));
  }
}

// MaxSim over the cells of `layout`:
//   out(cell) = sum over masked-in query rows t of max over masked-in doc rows a of <q_t, d_a>.
// Document rows are packed transposed per item so the inner loop runs across
// document rows; each dot product is still summed over the feature index in
// ascending order, which keeps the result bit-identical to a plain double loop.
// Ties in the max go to the lowest row. When `argmax` is given it receives,
// per cell and query row, the absolute document row chosen (or -1).
inline DenseMatrix maxsim_pairs(const DenseMatrix& q, const ItemRows& qrows, const DenseMatrix& d,
                                const ItemRows& drows, const PairLayout& layout,
                                std::vector<std::int32_t>* argmax = nullptr,
                                unsigned threads = 0, Blocking blocking = {}) {
  if (q.cols() != d.cols()) {
    throw ShapeError("maxsim: embedding widths differ " + q.shape() + " vs " + d.shape());
  }
  check_item_rows(q, qrows, "query");
  check_item_rows(d, drows, "document");
  if (layout.cells.size() != layout.rows * layout.cols) throw ShapeError("maxsim: bad layout");

  const std::size_t width = q.cols();
  const std::size_t lq = qrows.rows_per_item;
  const std::size_t ld = drows.rows_per_item;
  const std::size_t nq = q.rows() / lq;
  const std::size_t nd = d.rows() / ld;

  // Masked-in rows per document item, packed transposed: width x count.
  std::vector<std::size_t> doc_offset(nd + 1, 0);
  std::vector<std::vector<std::uint32_t>> doc_valid(nd);
  for (std::size_t j = 0; j < nd; ++j) {
    for (std::size_t a = 0; a < ld; ++a)
      if (drows.mask[j * ld + a]) doc_valid[j].push_back(static_cast<std::uint32_t>(a));
    doc_offset[j + 1] = doc_offset[j] + doc_valid[j].size() * width;
  }
  std::vector<double> packed(doc_offset[nd]);
  for (std::size_t j = 0; j < nd; ++j) {
    const std::size_t cnt = doc_valid[j].size();
    double* base = packed.data() + doc_offset[j];
    for (std::size_t a = 0; a < cnt; ++a) {
      auto src = d.row(j * ld + doc_valid[j][a]);
      for (std::size_t k = 0; k < width; ++k) base[k * cnt + a] = src[k];
    }
  }
  std::vector<std::vector<std::uint32_t>> query_valid(nq);
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t t = 0; t < lq; ++t)
      if (qrows.mask[i * lq + t]) query_valid[i].push_back(static_cast<std::uint32_t>(t));

  for (const auto& [qi, dj] : layout.cells) {
    if (qi >= nq || dj >= nd) throw ShapeError("maxsim: layout references item outside batch");
    if (doc_valid[dj].empty()) {
      throw InputError("maxsim: document item " + std::to_string(dj) + " has no masked-in rows");
    }
  }

  DenseMatrix out(layout.rows, layout.cols);
  if (argmax) argmax->assign(layout.cells.size() * lq, -1);

  const std::size_t qb = std::max<std::size_t>(1, blocking.query_block);
  const std::size_t db = std::max<std::size_t>(1, blocking.doc_block);
  const std::size_t row_blocks = (layout.rows + qb - 1) / qb;

  // Cells are independent, so the tile order and the thread partition over
  // row tiles cannot change any output value.
  parallel_for(row_blocks, threads, [&](std::size_t block_begin, std::size_t block_end) {
    std::vector<double> acc;
    for (std::size_t rb = block_begin; rb < block_end; ++rb) {
      const std::size_t r_lo = rb * qb;
      const std::size_t r_hi = std::min(layout.rows, r_lo + qb);
      for (std::size_t c_lo = 0; c_lo < layout.cols; c_lo += db) {
        const std::size_t c_hi = std::min(layout.cols, c_lo + db);
        for (std::size_t r = r_lo; r < r_hi; ++r) {
          for (std::size_t c = c_lo; c < c_hi; ++c) {
            const std::size_t cell = r * layout.cols + c;
            const auto [qi, dj] = layout.cells[cell];
            const std::size_t cnt = doc_valid[dj].size();
            const double* dt = packed.data() + doc_offset[dj];
            acc.resize(cnt);
            double total = 0.0;
            for (std::uint32_t t : query_valid[qi]) {
              auto qr = q.row(qi * lq + t);
              std::fill(acc.begin(), acc.end(), 0.0);
              for (std::size_t k = 0; k < width; ++k) {
                const double s = qr[k];
                const double* dk = dt + k * cnt;
                for (std::size_t a = 0; a < cnt; ++a) acc[a] += s * dk[a];
              }
              std::size_t best = 0;
              for (std::size_t a = 1; a < cnt; ++a)
                if (acc[a] > acc[best]) best = a;
              total += acc[best];
              if (argmax) {
                (*argmax)[cell * lq + t] = static_cast<std::int32_t>(dj * ld + doc_valid[dj][best]);
              }
            }
            out(r, c) = total;
          }
        }
      }
    }
  });
  return out;
}

}  // namespace kernels
}  // namespace mvlab
