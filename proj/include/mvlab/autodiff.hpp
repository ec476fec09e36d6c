#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mvlab/error.hpp"
#include "mvlab/maxsim_kernel.hpp"
#include "mvlab/tensor.hpp"

namespace mvlab {

inline constexpr double kDefaultNormEpsilon = 1e-12;

// Gradients keyed by parameter name. Merging is an explicit reduction whose
// order is the caller's responsibility.
class GradStore {
 public:
  // Registers `name` with a zero gradient of the given shape if absent.
  void ensure(const std::string& name, std::size_t rows, std::size_t cols) {
    auto it = grads_.find(name);
    if (it == grads_.end()) {
      grads_.emplace(name, DenseMatrix(rows, cols));
    } else if (it->second.rows() != rows || it->second.cols() != cols) {
      throw ShapeError("GradStore: parameter '" + name + "' registered as " + it->second.shape() +
                       " and " + DenseMatrix::shape_of(rows, cols));
    }
  }

  void accumulate(const std::string& name, const DenseMatrix& g) {
    ensure(name, g.rows(), g.cols());
    auto dst = grads_.at(name).data();
    auto src = g.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
  }

  // this += other, parameter by parameter.
  void merge(const GradStore& other) {
    for (const auto& [name, g] : other.grads_) accumulate(name, g);
    count_ += other.count_;
  }

  void scale(double s) {
    for (auto& [name, g] : grads_)
      for (double& v : g.data()) v *= s;
  }

  const DenseMatrix* find(const std::string& name) const {
    auto it = grads_.find(name);
    return it == grads_.end() ? nullptr : &it->second;
  }

  const DenseMatrix& at(const std::string& name) const {
    auto it = grads_.find(name);
    if (it == grads_.end()) throw ContractError("GradStore: no gradient for '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return grads_.count(name) != 0; }
  void erase(const std::string& name) { grads_.erase(name); }

  const std::map<std::string, DenseMatrix>& entries() const { return grads_; }

  // Number of backward passes folded into this store.
  std::size_t accumulation_count() const { return count_; }
  void set_accumulation_count(std::size_t n) { count_ = n; }

  double global_norm() const {
    double s = 0.0;
    for (const auto& [name, g] : grads_)
      for (double v : g.data()) s += v * v;
    return std::sqrt(s);
  }

  bool all_finite() const {
    for (const auto& [name, g] : grads_)
      if (!g.all_finite()) return false;
    return true;
  }

 private:
  std::map<std::string, DenseMatrix> grads_;
  std::size_t count_ = 0;
};

// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
};

// Structural description of a stacked representation that a MaxSim node needs
// to keep after recording.
struct MaxSimOperands {
  std::size_t query_rows_per_item = 1;
  std::vector<std::uint8_t> query_mask;
  std::size_t doc_rows_per_item = 1;
  std::vector<std::uint8_t> doc_mask;
  PairLayout layout;
};

// Reverse-mode tape over the fixed primitive set. Nodes are appended in
// evaluation order, so every input id is smaller than the node's own id.
class Tape {
 public:
  enum class Op : std::uint8_t {
    Leaf,
    MatMul,
    MatMulNT,
    Add,
    AddRowBroadcast,
    Mul,
    Scale,
    MulScalar,
    Tanh,
    Exp,
    Log,
    RowSum,
    SumAll,
    RowMax,
    GatherRows,
    NormalizeRows,
    LogSumExp,
    ConcatRows,
    ConcatCols,
    SliceRows,
    Select,
    MaxSim,
  };

  using Value = Var;

  explicit Tape(unsigned threads = 0) : threads_(threads) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // Tracked leaf. Gradients are reported under `name`.
  Var parameter(const std::string& name, DenseMatrix value) {
    if (name.empty()) throw ContractError("Tape::parameter: empty name");
    Node n;
    n.op = Op::Leaf;
    n.tracked = true;
    n.param = name;
    n.value = std::move(value);
    return push(std::move(n), "parameter");
  }

  // Untracked leaf.
  Var constant(DenseMatrix value) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    return push(std::move(n), "constant");
  }

  Var matmul(Var a, Var b) { return binary(Op::MatMul, a, b, kernels::matmul(val(a), val(b))); }
  Var matmul_nt(Var a, Var b) {
    return binary(Op::MatMulNT, a, b, kernels::matmul_nt(val(a), val(b)));
  }
  Var add(Var a, Var b) { return binary(Op::Add, a, b, kernels::add(val(a), val(b))); }
  Var add_row_broadcast(Var a, Var row) {
    return binary(Op::AddRowBroadcast, a, row, kernels::add_row_broadcast(val(a), val(row)));
  }
  Var mul(Var a, Var b) { return binary(Op::Mul, a, b, kernels::hadamard(val(a), val(b))); }

  Var scale(Var a, double s) {
    Node n = unary_node(Op::Scale, a, kernels::scale(val(a), s));
    n.scalar = s;
    return push(std::move(n), "scale");
  }

  // a * s where s is a tracked or constant 1x1 node.
  Var mul_scalar(Var a, Var s) {
    if (val(s).rows() != 1 || val(s).cols() != 1) {
      throw ShapeError("mul_scalar: scalar operand is " + val(s).shape());
    }
    return binary(Op::MulScalar, a, s, kernels::scale(val(a), val(s).item()));
  }

  Var tanh(Var a) {
    return push(unary_node(Op::Tanh, a, kernels::map(val(a), [](double x) { return std::tanh(x); })),
                "tanh");
  }
  Var exp(Var a) {
    return push(unary_node(Op::Exp, a, kernels::map(val(a), [](double x) { return std::exp(x); })),
                "exp");
  }
  Var log(Var a) {
    return push(unary_node(Op::Log, a, kernels::map(val(a), [](double x) { return std::log(x); })),
                "log");
  }
  Var row_sum(Var a) { return push(unary_node(Op::RowSum, a, kernels::row_sum(val(a))), "row_sum"); }
  Var sum_all(Var a) { return push(unary_node(Op::SumAll, a, kernels::sum_all(val(a))), "sum_all"); }

  Var row_max(Var a) {
    std::vector<std::size_t> arg;
    Node n = unary_node(Op::RowMax, a, kernels::row_max(val(a), &arg));
    n.index = std::move(arg);
    return push(std::move(n), "row_max");
  }

  Var gather_rows(Var table, std::span<const std::uint32_t> ids) {
    Node n = unary_node(Op::GatherRows, table, kernels::gather_rows(val(table), ids));
    n.index.assign(ids.begin(), ids.end());
    return push(std::move(n), "gather_rows");
  }

  Var normalize_rows(Var a, double epsilon = kDefaultNormEpsilon) {
    Node n = unary_node(Op::NormalizeRows, a, kernels::normalize_rows(val(a), epsilon, &scratch_));
    n.aux = scratch_;
    n.scalar = epsilon;
    return push(std::move(n), "normalize_rows");
  }

  Var logsumexp_rows(Var a) {
    return push(unary_node(Op::LogSumExp, a, kernels::logsumexp_rows(val(a))), "logsumexp_rows");
  }

  Var concat_rows(std::span<const Var> parts) { return concat(Op::ConcatRows, parts); }
  Var concat_cols(std::span<const Var> parts) { return concat(Op::ConcatCols, parts); }

  Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    Node n = unary_node(Op::SliceRows, a, kernels::slice_rows(val(a), begin, end));
    n.index = {begin, end};
    return push(std::move(n), "slice_rows");
  }

  Var select_entries(Var a, kernels::EntrySelection sel) {
    Node n = unary_node(Op::Select, a, kernels::select_entries(val(a), sel));
    n.selection = std::make_shared<const kernels::EntrySelection>(std::move(sel));
    return push(std::move(n), "select_entries");
  }

  Var maxsim(Var q, Var d, MaxSimOperands ops) {
    std::vector<std::int32_t> arg;
    DenseMatrix out = kernels::maxsim_pairs(
        val(q), ItemRows{ops.query_rows_per_item, ops.query_mask}, val(d),
        ItemRows{ops.doc_rows_per_item, ops.doc_mask}, ops.layout, &arg, threads_);
    Node n = binary_node(Op::MaxSim, q, d, std::move(out));
    n.argmax = std::move(arg);
    n.maxsim = std::make_shared<const MaxSimOperands>(std::move(ops));
    return push(std::move(n), "maxsim");
  }

  const DenseMatrix& value(Var v) const { return val(v); }
  bool tracked(Var v) const { return nodes_.at(v.id).tracked; }
  std::size_t size() const { return nodes_.size(); }
  Op op(Var v) const { return nodes_.at(v.id).op; }
  std::span<const std::size_t> inputs(Var v) const { return nodes_.at(v.id).inputs; }
  unsigned threads() const { return threads_; }

  // Gradients of a scalar loss with respect to every parameter on the tape.
  GradStore backward(Var loss) const {
    if (val(loss).rows() != 1 || val(loss).cols() != 1) {
      throw ContractError("backward: loss node is " + val(loss).shape() + ", expected [1x1]");
    }
    return propagate(loss, DenseMatrix::scalar(1.0));
  }

  // Gradients of <cotangent, node> with respect to every parameter on the tape.
  GradStore backward_from(Var node, const DenseMatrix& cotangent) const {
    if (!val(node).same_shape(cotangent)) {
      throw ShapeError("backward_from: cotangent " + cotangent.shape() + " vs node " +
                       val(node).shape());
    }
    return propagate(node, cotangent);
  }

  // Recomputes every non-leaf node from its recorded inputs. Returns the id of
  // the first node whose recomputed value differs bitwise, if any.
  std::optional<std::size_t> replay_mismatch() const {
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      if (nodes_[id].op == Op::Leaf) continue;
      if (!(recompute(id) == nodes_[id].value)) return id;
    }
    return std::nullopt;
  }

 private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<std::size_t> inputs;
    DenseMatrix value;
    bool tracked = false;
    std::string param;
    double scalar = 0.0;
    std::vector<std::size_t> index;
    std::vector<double> aux;
    std::vector<std::int32_t> argmax;
    std::shared_ptr<const kernels::EntrySelection> selection;
    std::shared_ptr<const MaxSimOperands> maxsim;
  };

  const DenseMatrix& val(Var v) const {
    if (v.id >= nodes_.size()) throw ContractError("Tape: unknown node " + std::to_string(v.id));
    return nodes_[v.id].value;
  }

  Node unary_node(Op op, Var a, DenseMatrix out) const {
    Node n;
    n.op = op;
    n.inputs = {a.id};
    n.tracked = nodes_.at(a.id).tracked;
    n.value = std::move(out);
    return n;
  }

  Node binary_node(Op op, Var a, Var b, DenseMatrix out) const {
    Node n;
    n.op = op;
    n.inputs = {a.id, b.id};
    n.tracked = nodes_.at(a.id).tracked || nodes_.at(b.id).tracked;
    n.value = std::move(out);
    return n;
  }

  Var binary(Op op, Var a, Var b, DenseMatrix out) {
    return push(binary_node(op, a, b, std::move(out)), "binary op");
  }

  Var concat(Op op, std::span<const Var> parts) {
    std::vector<const DenseMatrix*> values;
    Node n;
    n.op = op;
    for (Var p : parts) {
      values.push_back(&val(p));
      n.inputs.push_back(p.id);
      n.tracked = n.tracked || nodes_[p.id].tracked;
    }
    n.value = op == Op::ConcatRows ? kernels::concat_rows(values) : kernels::concat_cols(values);
    return push(std::move(n), "concat");
  }

  Var push(Node n, const char* what) {
    if (!n.value.all_finite()) {
      throw DivergenceError(std::string("Tape: non-finite value produced by ") + what);
    }
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  DenseMatrix recompute(std::size_t id) const {
    const Node& n = nodes_[id];
    auto in = [&](std::size_t k) -> const DenseMatrix& { return nodes_[n.inputs[k]].value; };
    switch (n.op) {
      case Op::Leaf: return n.value;
      case Op::MatMul: return kernels::matmul(in(0), in(1));
      case Op::MatMulNT: return kernels::matmul_nt(in(0), in(1));
      case Op::Add: return kernels::add(in(0), in(1));
      case Op::AddRowBroadcast: return kernels::add_row_broadcast(in(0), in(1));
      case Op::Mul: return kernels::hadamard(in(0), in(1));
      case Op::Scale: return kernels::scale(in(0), n.scalar);
      case Op::MulScalar: return kernels::scale(in(0), in(1).item());
      case Op::Tanh: return kernels::map(in(0), [](double x) { return std::tanh(x); });
      case Op::Exp: return kernels::map(in(0), [](double x) { return std::exp(x); });
      case Op::Log: return kernels::map(in(0), [](double x) { return std::log(x); });
      case Op::RowSum: return kernels::row_sum(in(0));
      case Op::SumAll: return kernels::sum_all(in(0));
      case Op::RowMax: return kernels::row_max(in(0));
      case Op::GatherRows: {
        std::vector<std::uint32_t> ids(n.index.begin(), n.index.end());
        return kernels::gather_rows(in(0), ids);
      }
      case Op::NormalizeRows: return kernels::normalize_rows(in(0), n.scalar);
      case Op::LogSumExp: return kernels::logsumexp_rows(in(0));
      case Op::ConcatRows:
      case Op::ConcatCols: {
        std::vector<const DenseMatrix*> parts;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) parts.push_back(&in(k));
        return n.op == Op::ConcatRows ? kernels::concat_rows(parts) : kernels::concat_cols(parts);
      }
      case Op::SliceRows: return kernels::slice_rows(in(0), n.index[0], n.index[1]);
      case Op::Select: return kernels::select_entries(in(0), *n.selection);
      case Op::MaxSim: {
        const auto& m = *n.maxsim;
        return kernels::maxsim_pairs(in(0), ItemRows{m.query_rows_per_item, m.query_mask}, in(1),
                                     ItemRows{m.doc_rows_per_item, m.doc_mask}, m.layout, nullptr,
                                     threads_);
      }
    }
    throw ContractError("Tape: unknown op");
  }

  GradStore propagate(Var root, const DenseMatrix& seed) const {
    GradStore store;
    for (const Node& n : nodes_) {
      if (n.op == Op::Leaf && n.tracked) store.ensure(n.param, n.value.rows(), n.value.cols());
    }
    store.set_accumulation_count(1);
    if (!nodes_[root.id].tracked) return store;

    std::vector<DenseMatrix> adj(root.id + 1);
    adj[root.id] = seed;

    auto grad_of = [&](std::size_t id) -> DenseMatrix& {
      if (adj[id].empty() && !nodes_[id].value.empty()) {
        adj[id] = DenseMatrix(nodes_[id].value.rows(), nodes_[id].value.cols());
      }
      return adj[id];
    };
    auto add_into = [](DenseMatrix& dst, const DenseMatrix& src) {
      auto d = dst.data();
      auto s = src.data();
      for (std::size_t i = 0; i < s.size(); ++i) d[i] += s[i];
    };

    for (std::size_t id = root.id + 1; id-- > 0;) {
      const Node& n = nodes_[id];
      if (!n.tracked || adj[id].empty()) continue;
      const DenseMatrix& g = adj[id];
      auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].tracked; };
      auto in = [&](std::size_t k) -> const DenseMatrix& { return nodes_[n.inputs[k]].value; };

      switch (n.op) {
        case Op::Leaf:
          store.accumulate(n.param, g);
          break;
        case Op::MatMul:
          if (wants(0)) add_into(grad_of(n.inputs[0]), kernels::matmul_nt(g, in(1)));
          if (wants(1)) add_into(grad_of(n.inputs[1]), kernels::matmul_tn(in(0), g));
          break;
        case Op::MatMulNT:
          if (wants(0)) add_into(grad_of(n.inputs[0]), kernels::matmul(g, in(1)));
          if (wants(1)) add_into(grad_of(n.inputs[1]), kernels::matmul_tn(g, in(0)));
          break;
        case Op::Add:
          if (wants(0)) add_into(grad_of(n.inputs[0]), g);
          if (wants(1)) add_into(grad_of(n.inputs[1]), g);
          break;
        case Op::AddRowBroadcast:
          if (wants(0)) add_into(grad_of(n.inputs[0]), g);
          if (wants(1)) {
            DenseMatrix& dr = grad_of(n.inputs[1]);
            for (std::size_t i = 0; i < g.rows(); ++i)
              for (std::size_t j = 0; j < g.cols(); ++j) dr(0, j) += g(i, j);
          }
          break;
        case Op::Mul:
          if (wants(0)) add_into(grad_of(n.inputs[0]), kernels::hadamard(g, in(1)));
          if (wants(1)) add_into(grad_of(n.inputs[1]), kernels::hadamard(g, in(0)));
          break;
        case Op::Scale:
          add_into(grad_of(n.inputs[0]), kernels::scale(g, n.scalar));
          break;
        case Op::MulScalar:
          if (wants(0)) add_into(grad_of(n.inputs[0]), kernels::scale(g, in(1).item()));
          if (wants(1)) {
            double s = 0.0;
            auto gv = g.data();
            auto xv = in(0).data();
            for (std::size_t i = 0; i < gv.size(); ++i) s += gv[i] * xv[i];
            grad_of(n.inputs[1])(0, 0) += s;
          }
          break;
        case Op::Tanh: {
          DenseMatrix& dx = grad_of(n.inputs[0]);
          auto y = n.value.data();
          for (std::size_t i = 0; i < y.size(); ++i) dx.data()[i] += g.data()[i] * (1.0 - y[i] * y[i]);
          break;
        }
        case Op::Exp: {
          DenseMatrix& dx = grad_of(n.inputs[0]);
          auto y = n.value.data();
          for (std::size_t i = 0; i < y.size(); ++i) dx.data()[i] += g.data()[i] * y[i];
          break;
        }
        case Op::Log: {
          DenseMatrix& dx = grad_of(n.inputs[0]);
          auto x = in(0).data();
          for (std::size_t i = 0; i < x.size(); ++i) dx.data()[i] += g.data()[i] / x[i];
          break;
        }
        case Op::RowSum: {
          DenseMatrix& dx = grad_of(n.inputs[0]);
          for (std::size_t i = 0; i < dx.rows(); ++i)
            for (double& v : dx.row(i)) v += g(i, 0);
          break;
        }
        case Op::SumAll: {
          DenseMatrix& dx = grad_of(n.inputs[0]);
          for (double& v : dx.data()) v += g(0, 0);
          break;
        }
        case Op::RowMax: {
          DenseMatrix& dx = grad_of(n.inputs[0]);
          for (std::size_t i = 0; i < n.index.size(); ++i) dx(i, n.index[i]) += g(i, 0);
          break;
        }
        case Op::GatherRows: {
          DenseMatrix& dt = grad_of(n.inputs[0]);
          for (std::size_t i = 0; i < n.index.size(); ++i) {
            auto dst = dt.row(n.index[i]);
            auto src = g.row(i);
            for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
          }
          break;
        }
        case Op::NormalizeRows: {
          // y = x / max(|x|, eps). Above eps: dx = (g - y <y, g>) / |x|; below: dx = g / eps.
          DenseMatrix& dx = grad_of(n.inputs[0]);
          const DenseMatrix& x = in(0);
          for (std::size_t i = 0; i < x.rows(); ++i) {
            const double divisor = n.aux[i];
            auto gi = g.row(i);
            auto yi = n.value.row(i);
            auto di = dx.row(i);
            if (kernels::row_norm(x.row(i)) >= n.scalar) {
              double dot = 0.0;
              for (std::size_t j = 0; j < gi.size(); ++j) dot += yi[j] * gi[j];
              for (std::size_t j = 0; j < gi.size(); ++j) di[j] += (gi[j] - yi[j] * dot) / divisor;
            } else {
              for (std::size_t j = 0; j < gi.size(); ++j) di[j] += gi[j] / divisor;
            }
          }
          break;
        }
        case Op::LogSumExp: {
          DenseMatrix& dx = grad_of(n.inputs[0]);
          const DenseMatrix& x = in(0);
          for (std::size_t i = 0; i < x.rows(); ++i) {
            const double lse = n.value(i, 0);
            auto xi = x.row(i);
            auto di = dx.row(i);
            for (std::size_t j = 0; j < xi.size(); ++j) di[j] += g(i, 0) * std::exp(xi[j] - lse);
          }
          break;
        }
        case Op::ConcatRows: {
          std::size_t off = 0;
          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const std::size_t r = in(k).rows();
            if (wants(k)) add_into(grad_of(n.inputs[k]), kernels::slice_rows(g, off, off + r));
            off += r;
          }
          break;
        }
        case Op::ConcatCols: {
          std::size_t off = 0;
          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const std::size_t c = in(k).cols();
            if (wants(k)) {
              DenseMatrix& dk = grad_of(n.inputs[k]);
              for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < c; ++j) dk(i, j) += g(i, off + j);
            }
            off += c;
          }
          break;
        }
        case Op::SliceRows: {
          DenseMatrix& dx = grad_of(n.inputs[0]);
          const std::size_t begin = n.index[0];
          for (std::size_t i = 0; i < g.rows(); ++i) {
            auto dst = dx.row(begin + i);
            auto src = g.row(i);
            for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
          }
          break;
        }
        case Op::Select: {
          DenseMatrix& dx = grad_of(n.inputs[0]);
          const auto& src = n.selection->source;
          auto gv = g.data();
          for (std::size_t i = 0; i < src.size(); ++i) dx(src[i].first, src[i].second) += gv[i];
          break;
        }
        case Op::MaxSim: {
          const auto& m = *n.maxsim;
          const DenseMatrix& q = in(0);
          const DenseMatrix& d = in(1);
          DenseMatrix* dq = wants(0) ? &grad_of(n.inputs[0]) : nullptr;
          DenseMatrix* dd = wants(1) ? &grad_of(n.inputs[1]) : nullptr;
          const std::size_t lq = m.query_rows_per_item;
          const std::size_t width = q.cols();
          auto gv = g.data();
          for (std::size_t cell = 0; cell < m.layout.cells.size(); ++cell) {
            const double gc = gv[cell];
            if (gc == 0.0) continue;
            const std::size_t qi = m.layout.cells[cell].first;
            for (std::size_t t = 0; t < lq; ++t) {
              const std::int32_t a = n.argmax[cell * lq + t];
              if (a < 0) continue;
              const std::size_t qrow = qi * lq + t;
              if (dq) {
                auto dst = dq->row(qrow);
                auto src = d.row(static_cast<std::size_t>(a));
                for (std::size_t k = 0; k < width; ++k) dst[k] += gc * src[k];
              }
              if (dd) {
                auto dst = dd->row(static_cast<std::size_t>(a));
                auto src = q.row(qrow);
                for (std::size_t k = 0; k < width; ++k) dst[k] += gc * src[k];
              }
            }
          }
          break;
        }
      }
      // Free adjoints that are no longer needed (inputs are always lower ids).
      if (n.op != Op::Leaf) adj[id] = DenseMatrix();
    }
    return store;
  }

  std::vector<Node> nodes_;
  std::vector<double> scratch_;
  unsigned threads_ = 0;
};

// Same operation vocabulary as Tape, evaluated immediately without recording.
// Model code written against this interface runs either way and produces
// bit-identical values on both paths.
class Eager {
 public:
  using Value = DenseMatrix;

  explicit Eager(unsigned threads = 0) : threads_(threads) {}

  DenseMatrix parameter(const std::string&, DenseMatrix value) { return value; }
  DenseMatrix constant(DenseMatrix value) { return value; }
  DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) { return kernels::matmul(a, b); }
  DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
    return kernels::matmul_nt(a, b);
  }
  DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) { return kernels::add(a, b); }
  DenseMatrix add_row_broadcast(const DenseMatrix& a, const DenseMatrix& r) {
    return kernels::add_row_broadcast(a, r);
  }
  DenseMatrix mul(const DenseMatrix& a, const DenseMatrix& b) { return kernels::hadamard(a, b); }
  DenseMatrix scale(const DenseMatrix& a, double s) { return kernels::scale(a, s); }
  DenseMatrix mul_scalar(const DenseMatrix& a, const DenseMatrix& s) {
    return kernels::scale(a, s.item());
  }
  DenseMatrix tanh(const DenseMatrix& a) {
    return kernels::map(a, [](double x) { return std::tanh(x); });
  }
  DenseMatrix exp(const DenseMatrix& a) {
    return kernels::map(a, [](double x) { return std::exp(x); });
  }
  DenseMatrix log(const DenseMatrix& a) {
    return kernels::map(a, [](double x) { return std::log(x); });
  }
  DenseMatrix row_sum(const DenseMatrix& a) { return kernels::row_sum(a); }
  DenseMatrix sum_all(const DenseMatrix& a) { return kernels::sum_all(a); }
  DenseMatrix row_max(const DenseMatrix& a) { return kernels::row_max(a); }
  DenseMatrix gather_rows(const DenseMatrix& t, std::span<const std::uint32_t> ids) {
    return kernels::gather_rows(t, ids);
  }
  DenseMatrix normalize_rows(const DenseMatrix& a, double eps = kDefaultNormEpsilon) {
    return kernels::normalize_rows(a, eps);
  }
  DenseMatrix logsumexp_rows(const DenseMatrix& a) { return kernels::logsumexp_rows(a); }
  DenseMatrix concat_rows(std::span<const DenseMatrix> parts) {
    std::vector<const DenseMatrix*> p;
    for (const auto& m : parts) p.push_back(&m);
    return kernels::concat_rows(p);
  }
  DenseMatrix concat_cols(std::span<const DenseMatrix> parts) {
    std::vector<const DenseMatrix*> p;
    for (const auto& m : parts) p.push_back(&m);
    return kernels::concat_cols(p);
  }
  DenseMatrix slice_rows(const DenseMatrix& a, std::size_t b, std::size_t e) {
    return kernels::slice_rows(a, b, e);
  }
  DenseMatrix select_entries(const DenseMatrix& a, kernels::EntrySelection sel) {
    return kernels::select_entries(a, sel);
  }
  DenseMatrix maxsim(const DenseMatrix& q, const DenseMatrix& d, MaxSimOperands ops) {
    return kernels::maxsim_pairs(q, ItemRows{ops.query_rows_per_item, ops.query_mask}, d,
                                 ItemRows{ops.doc_rows_per_item, ops.doc_mask}, ops.layout,
                                 nullptr, threads_);
  }

  const DenseMatrix& value(const DenseMatrix& v) const { return v; }
  unsigned threads() const { return threads_; }

 private:
  unsigned threads_ = 0;
};

}  // namespace mvlab
