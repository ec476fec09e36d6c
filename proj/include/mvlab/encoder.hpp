#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvlab/autodiff.hpp"
#include "mvlab/error.hpp"
#include "mvlab/rng.hpp"
#include "mvlab/tensor.hpp"
#include "mvlab/tokenizer.hpp"

namespace mvlab {

enum class Interaction : std::uint8_t { Late, Dense };

inline const char* to_string(Interaction i) { return i == Interaction::Late ? "late" : "dense"; }

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t d_out = 32;
  bool context_mix = false;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Trainable encoder state. Parameter names double as GradStore keys.
struct EncoderParams {
  static constexpr const char* kEmbedding = "embedding";
  static constexpr const char* kProjection = "projection";
  static constexpr const char* kContextMix = "context_mix";

  DenseMatrix embedding;    // vocab_size x d_model
  DenseMatrix projection;   // d_model x d_out
  DenseMatrix context_mix;  // d_model x d_model, empty when disabled

  bool has_context_mix() const { return !context_mix.empty(); }

  static EncoderParams init(const TokenizerConfig& tok, const EncoderConfig& cfg,
                            std::uint64_t seed) {
    tok.validate();
    if (cfg.d_model == 0 || cfg.d_out == 0) throw ConfigError("encoder: zero dimension");
    Rng rng(derive_seed(seed, 0xE7C0DE));
    EncoderParams p;
    p.embedding = DenseMatrix(tok.vocab_size, cfg.d_model);
    for (double& v : p.embedding.data()) v = 0.5 * rng.normal();
    p.projection = DenseMatrix(cfg.d_model, cfg.d_out);
    const double proj_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    for (double& v : p.projection.data()) v = proj_scale * rng.normal();
    if (cfg.context_mix) {
      p.context_mix = DenseMatrix(cfg.d_model, cfg.d_model);
      for (double& v : p.context_mix.data()) v = 0.01 * rng.normal();
    }
    return p;
  }

  void check(const TokenizerConfig& tok, const EncoderConfig& cfg) const {
    auto expect = [](const DenseMatrix& m, std::size_t r, std::size_t c, const char* name) {
      if (m.rows() != r || m.cols() != c) {
        throw ShapeError(std::string("encoder: ") + name + " is " + m.shape() + ", expected " +
                         DenseMatrix::shape_of(r, c));
      }
    };
    expect(embedding, tok.vocab_size, cfg.d_model, kEmbedding);
    expect(projection, cfg.d_model, cfg.d_out, kProjection);
    if (cfg.context_mix) {
      expect(context_mix, cfg.d_model, cfg.d_model, kContextMix);
    } else if (has_context_mix()) {
      throw ShapeError("encoder: context_mix present but disabled in config");
    }
  }

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

struct EncodeOptions {
  bool query_expansion = false;
  bool score_prompt_tokens = true;
};

// One encoded text: per-token vectors and the rows that take part in scoring.
struct MultiVectorRep {
  DenseMatrix vectors;
  std::vector<std::uint8_t> scoring_mask;

  std::size_t masked_in() const {
    std::size_t n = 0;
    for (auto m : scoring_mask) n += m;
    return n;
  }
};

// A batch of equally long items stacked row-wise.
template <class Ctx>
struct EncodedBatch {
  typename Ctx::Value vectors;
  std::vector<std::uint8_t> mask;
  std::size_t rows_per_item = 1;
  std::size_t items = 0;
};

template <class Ctx>
struct BoundParams {
  typename Ctx::Value embedding;
  typename Ctx::Value projection;
  std::optional<typename Ctx::Value> context_mix;
};

template <class Ctx>
BoundParams<Ctx> bind_params(Ctx& ctx, const EncoderParams& p) {
  BoundParams<Ctx> b{ctx.parameter(EncoderParams::kEmbedding, p.embedding),
                     ctx.parameter(EncoderParams::kProjection, p.projection), std::nullopt};
  if (p.has_context_mix()) b.context_mix = ctx.parameter(EncoderParams::kContextMix, p.context_mix);
  return b;
}

inline std::vector<std::uint8_t> scoring_mask_for(const TokenSequence& seq,
                                                  const EncodeOptions& opts) {
  if (seq.role == Role::Query && opts.query_expansion) {
    return std::vector<std::uint8_t>(seq.size(), 1);
  }
  std::vector<std::uint8_t> mask = seq.valid_mask;
  if (!opts.score_prompt_tokens) {
    for (std::size_t i = 1; i <= seq.prompt_count && i < mask.size(); ++i) mask[i] = 0;
  }
  return mask;
}

// Encodes equally long sequences. Late mode yields one unit row per position;
// dense mode yields one unit row per item (mean of valid projected rows).
//
//   e_i = E[id_i]
//   h_i = e_i + C * mean(valid e)          (when context mixing is enabled)
//   late:  v_i = normalize(h_i W)
//   dense: v   = normalize(mean over valid i of h_i W)
template <class Ctx>
EncodedBatch<Ctx> encode_batch(Ctx& ctx, const BoundParams<Ctx>& p,
                               std::span<const TokenSequence> seqs, Interaction mode,
                               const EncodeOptions& opts) {
  if (seqs.empty()) throw InputError("encode: empty batch");
  const std::size_t len = seqs.front().size();
  const std::size_t n = seqs.size();
  const std::size_t vocab = ctx.value(p.embedding).rows();
  std::vector<std::uint32_t> ids;
  ids.reserve(n * len);
  std::vector<std::size_t> valid_counts(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = seqs[i];
    if (s.size() != len) throw ShapeError("encode: sequences in a batch must share one length");
    for (std::size_t t = 0; t < len; ++t) {
      if (s.ids[t] >= vocab) {
        throw InputError("encode: token id " + std::to_string(s.ids[t]) +
                         " out of range for vocab " + std::to_string(vocab));
      }
      ids.push_back(s.ids[t]);
      valid_counts[i] += s.valid_mask[t];
    }
  }

  // Pooling over valid positions as a constant (n x n*len) matrix.
  auto pooling = [&]() {
    DenseMatrix pool(n, n * len);
    for (std::size_t i = 0; i < n; ++i) {
      if (valid_counts[i] == 0) continue;
      const double w = 1.0 / static_cast<double>(valid_counts[i]);
      for (std::size_t t = 0; t < len; ++t)
        if (seqs[i].valid_mask[t]) pool(i, i * len + t) = w;
    }
    return pool;
  };

  auto hidden = ctx.gather_rows(p.embedding, ids);
  if (p.context_mix) {
    DenseMatrix expand(n * len, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < len; ++t) expand(i * len + t, i) = 1.0;
    auto mean = ctx.matmul(ctx.constant(pooling()), hidden);
    auto mixed = ctx.matmul(mean, *p.context_mix);
    hidden = ctx.add(hidden, ctx.matmul(ctx.constant(std::move(expand)), mixed));
  }
  auto projected = ctx.matmul(hidden, p.projection);

  EncodedBatch<Ctx> out{};
  out.items = n;
  if (mode == Interaction::Late) {
    out.vectors = ctx.normalize_rows(projected);
    out.rows_per_item = len;
    out.mask.reserve(n * len);
    for (const auto& s : seqs) {
      auto m = scoring_mask_for(s, opts);
      out.mask.insert(out.mask.end(), m.begin(), m.end());
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      if (valid_counts[i] == 0) throw InputError("encode_dense: item has no valid positions");
    }
    out.vectors = ctx.normalize_rows(ctx.matmul(ctx.constant(pooling()), projected));
    out.rows_per_item = 1;
    out.mask.assign(n, 1);
  }
  return out;
}

// Splits an eagerly encoded batch into per-item representations.
inline std::vector<MultiVectorRep> split_items(const EncodedBatch<Eager>& b) {
  std::vector<MultiVectorRep> out;
  out.reserve(b.items);
  for (std::size_t i = 0; i < b.items; ++i) {
    const std::size_t lo = i * b.rows_per_item;
    const std::size_t hi = lo + b.rows_per_item;
    out.push_back({kernels::slice_rows(b.vectors, lo, hi),
                   std::vector<std::uint8_t>(b.mask.begin() + static_cast<std::ptrdiff_t>(lo),
                                             b.mask.begin() + static_cast<std::ptrdiff_t>(hi))});
  }
  return out;
}

inline MultiVectorRep encode_late(const EncoderParams& params, const TokenSequence& tokens,
                                  bool query_expansion, bool score_prompt_tokens = true) {
  Eager ctx;
  auto bound = bind_params(ctx, params);
  auto batch = encode_batch(ctx, bound, std::span<const TokenSequence>(&tokens, 1),
                            Interaction::Late, {query_expansion, score_prompt_tokens});
  return {std::move(batch.vectors), std::move(batch.mask)};
}

// 1 x d_out unit vector.
inline DenseMatrix encode_dense(const EncoderParams& params, const TokenSequence& tokens) {
  Eager ctx;
  auto bound = bind_params(ctx, params);
  auto batch = encode_batch(ctx, bound, std::span<const TokenSequence>(&tokens, 1),
                            Interaction::Dense, {});
  return std::move(batch.vectors);
}

// How texts are turned into token sequences and representations for one
// training phase or evaluation.
struct EncodeSettings {
  LengthBudget budget;
  bool prompts_enabled = true;
  bool query_expansion = false;
  bool score_prompt_tokens = true;
  Interaction interaction = Interaction::Late;

  EncodeOptions options() const { return {query_expansion, score_prompt_tokens}; }
  friend bool operator==(const EncodeSettings&, const EncodeSettings&) = default;
};

// Tokenizer, architecture and weights: everything needed to encode text.
struct Model {
  TokenizerConfig tokenizer;
  EncoderConfig encoder;
  EncoderParams params;

  static Model fresh(const TokenizerConfig& tok, const EncoderConfig& enc, std::uint64_t seed) {
    return {tok, enc, EncoderParams::init(tok, enc, seed)};
  }

  TokenSequence tokenize(std::string_view text, Role role, const EncodeSettings& s) const {
    return mvlab::tokenize(text, role, tokenizer, s.budget, s.prompts_enabled);
  }
};

// Frozen-model batch encoding, split into chunks of `chunk` items.
// Every row is computed independently of its neighbours, so the result does not
// depend on the chunk size.
inline EncodedBatch<Eager> encode_texts(const Model& model, std::span<const std::string> texts,
                                        Role role, const EncodeSettings& s,
                                        std::size_t chunk = 256) {
  Eager ctx;
  auto bound = bind_params(ctx, model.params);
  EncodedBatch<Eager> out{};
  std::vector<DenseMatrix> parts;
  for (std::size_t lo = 0; lo < texts.size(); lo += chunk) {
    const std::size_t hi = std::min(texts.size(), lo + chunk);
    std::vector<TokenSequence> seqs;
    seqs.reserve(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) seqs.push_back(model.tokenize(texts[i], role, s));
    auto b = encode_batch(ctx, bound, std::span<const TokenSequence>(seqs), s.interaction,
                          s.options());
    out.rows_per_item = b.rows_per_item;
    out.items += b.items;
    out.mask.insert(out.mask.end(), b.mask.begin(), b.mask.end());
    parts.push_back(std::move(b.vectors));
  }
  if (!parts.empty()) out.vectors = ctx.concat_rows(parts);
  return out;
}

}  // namespace mvlab
