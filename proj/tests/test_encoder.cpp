#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mvlab/encoder.hpp"
#include "mvlab/maxsim.hpp"
#include "mvlab/tokenizer.hpp"
#include "test_support.hpp"

using namespace mvlab;
using mvlab::testing::FiniteDifference;
using mvlab::testing::ParamMap;

namespace {

TokenizerConfig small_tokenizer() {
  TokenizerConfig t;
  t.vocab_size = 97;
  t.prompt_len = 3;
  return t;
}

EncodeSettings settings(std::size_t q, std::size_t d, bool prompts, bool comp) {
  EncodeSettings s;
  s.budget = {q, d, comp};
  s.prompts_enabled = prompts;
  return s;
}

double row_norm(const DenseMatrix& m, std::size_t r) {
  double s = 0.0;
  for (double v : m.row(r)) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST(Tokenize, LayoutIsMarkerPromptsWordsPadding) {
  const TokenizerConfig cfg = small_tokenizer();
  const TokenSequence s = tokenize("alpha beta", Role::Query, cfg, {6, 8, true}, true);
  ASSERT_EQ(s.size(), 9u);  // 6 + 3 compensation
  EXPECT_EQ(s.ids[0], kQueryMarkerId);
  for (std::uint32_t i = 0; i < 3; ++i) EXPECT_EQ(s.ids[1 + i], cfg.prompt_id(Role::Query, i));
  EXPECT_EQ(s.ids[4], hash_token("alpha", cfg));
  EXPECT_EQ(s.ids[5], hash_token("beta", cfg));
  for (std::size_t i = 6; i < 9; ++i) {
    EXPECT_EQ(s.ids[i], kPadId);
    EXPECT_EQ(s.valid_mask[i], 0);
  }
  EXPECT_EQ(s.valid_count(), 6u);
  EXPECT_EQ(s.prompt_count, 3u);
}

TEST(Tokenize, DocumentPromptsDifferFromQueryPrompts) {
  const TokenizerConfig cfg = small_tokenizer();
  const TokenSequence d = tokenize("x", Role::Document, cfg, {4, 4, true}, true);
  EXPECT_EQ(d.ids[0], kDocMarkerId);
  EXPECT_EQ(d.ids[1], cfg.prompt_id(Role::Document, 0));
  EXPECT_NE(cfg.prompt_id(Role::Document, 0), cfg.prompt_id(Role::Query, 0));
}

TEST(Tokenize, HashedWordsAvoidReservedIds) {
  const TokenizerConfig cfg = small_tokenizer();
  for (int i = 0; i < 500; ++i) {
    const std::uint32_t id = hash_token("w" + std::to_string(i), cfg);
    EXPECT_GE(id, cfg.reserved_count());
    EXPECT_LT(id, cfg.vocab_size);
  }
}

TEST(Tokenize, LowercasesAndSplitsOnWhitespace) {
  const TokenizerConfig cfg = small_tokenizer();
  const auto a = tokenize("Hello \t World\n", Role::Query, cfg, {6, 6, false}, false);
  const auto b = tokenize("hello world", Role::Query, cfg, {6, 6, false}, false);
  EXPECT_EQ(a, b);
  EXPECT_EQ(split_words("a,b  c", false), (std::vector<std::string>{"a,b", "c"}));
}

TEST(Tokenize, TruncatesAtBudget) {
  const TokenizerConfig cfg = small_tokenizer();
  const auto s = tokenize("a b c d e f g", Role::Query, cfg, {4, 4, false}, false);
  EXPECT_EQ(s.size(), 4u);
  EXPECT_EQ(s.valid_count(), 4u);
  EXPECT_EQ(s.ids[3], hash_token("c", cfg));
}

TEST(Tokenize, CompensationAddsPromptLengthEvenWithoutPrompts) {
  TokenizerConfig cfg;
  EXPECT_EQ(cfg.prompt_len, 7u);
  for (bool prompts : {false, true}) {
    const auto on = tokenize("q", Role::Query, cfg, {32, 48, true}, prompts);
    const auto off = tokenize("q", Role::Query, cfg, {32, 48, false}, prompts);
    EXPECT_EQ(on.size(), 39u);
    EXPECT_EQ(off.size(), 32u);
  }
}

TEST(Tokenize, BudgetTooSmallForPromptsIsConfigError) {
  EXPECT_THROW(tokenize("q", Role::Query, small_tokenizer(), {3, 3, false}, true), ConfigError);
}

TEST(TokenizerConfig, VocabMustExceedReservedIds) {
  TokenizerConfig cfg;
  cfg.vocab_size = cfg.reserved_count();
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Encoder, LateRowsAreUnitNorm) {
  const Model m = Model::fresh(small_tokenizer(), {16, 8, false}, 3);
  const auto seq = m.tokenize("one two three", Role::Document, settings(6, 8, true, true));
  const MultiVectorRep r = encode_late(m.params, seq, false);
  ASSERT_EQ(r.vectors.rows(), seq.size());
  ASSERT_EQ(r.vectors.cols(), 8u);
  for (std::size_t i = 0; i < r.vectors.rows(); ++i) EXPECT_NEAR(row_norm(r.vectors, i), 1.0, 1e-12);
}

TEST(Encoder, DenseIsOneUnitRow) {
  const Model m = Model::fresh(small_tokenizer(), {16, 8, true}, 3);
  const auto seq = m.tokenize("one two", Role::Query, settings(6, 8, true, true));
  const DenseMatrix v = encode_dense(m.params, seq);
  ASSERT_EQ(v.rows(), 1u);
  EXPECT_NEAR(row_norm(v, 0), 1.0, 1e-12);
}

TEST(Encoder, DenseEqualsNormalizedMeanOfProjectedRows) {
  const Model m = Model::fresh(small_tokenizer(), {16, 8, false}, 5);
  const auto seq = m.tokenize("a b c", Role::Query, settings(6, 8, false, false));
  DenseMatrix mean(1, 8);
  std::size_t n = 0;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    if (!seq.valid_mask[t]) continue;
    ++n;
    for (std::size_t j = 0; j < 8; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 16; ++k) s += m.params.embedding(seq.ids[t], k) * m.params.projection(k, j);
      mean(0, j) += s;
    }
  }
  for (double& v : mean.data()) v /= static_cast<double>(n);
  const double norm = row_norm(mean, 0);
  const DenseMatrix dense = encode_dense(m.params, seq);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(dense(0, j), mean(0, j) / norm, 1e-12);
}

TEST(Encoder, PaddingIsMaskedOutOfScoring) {
  const Model m = Model::fresh(small_tokenizer(), {16, 8, false}, 3);
  const auto seq = m.tokenize("one", Role::Document, settings(6, 8, true, true));
  const auto r = encode_late(m.params, seq, false);
  EXPECT_EQ(r.scoring_mask, seq.valid_mask);
}

TEST(Encoder, QueryExpansionScoresPaddingRows) {
  const Model m = Model::fresh(small_tokenizer(), {16, 8, false}, 3);
  const auto seq = m.tokenize("one", Role::Query, settings(6, 8, true, true));
  const auto r = encode_late(m.params, seq, true);
  EXPECT_EQ(r.masked_in(), seq.size());
}

TEST(Encoder, PromptRowsCanBeExcludedFromScoring) {
  const Model m = Model::fresh(small_tokenizer(), {16, 8, false}, 3);
  const auto seq = m.tokenize("one two", Role::Query, settings(6, 8, true, true));
  const auto r = encode_late(m.params, seq, false, false);
  EXPECT_EQ(r.masked_in(), seq.valid_count() - 3);
  for (std::size_t i = 1; i <= 3; ++i) EXPECT_EQ(r.scoring_mask[i], 0);
}

TEST(Encoder, OutOfRangeTokenIsInputError) {
  const Model m = Model::fresh(small_tokenizer(), {16, 8, false}, 3);
  TokenSequence s;
  s.ids = {kQueryMarkerId, 500};
  s.valid_mask = {1, 1};
  EXPECT_THROW(encode_late(m.params, s, false), InputError);
}

TEST(Encoder, InitIsSeedDeterministic) {
  const auto a = EncoderParams::init(small_tokenizer(), {16, 8, true}, 11);
  const auto b = EncoderParams::init(small_tokenizer(), {16, 8, true}, 11);
  const auto c = EncoderParams::init(small_tokenizer(), {16, 8, true}, 12);
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == c);
}

TEST(Encoder, CheckRejectsWrongShapes) {
  const TokenizerConfig tok = small_tokenizer();
  auto p = EncoderParams::init(tok, {16, 8, false}, 1);
  EXPECT_NO_THROW(p.check(tok, {16, 8, false}));
  EXPECT_THROW(p.check(tok, {16, 9, false}), ShapeError);
  EXPECT_THROW(p.check(tok, {16, 8, true}), ShapeError);
}

TEST(Encoder, BatchEncodingMatchesSingleItemsForAnyChunk) {
  const Model m = Model::fresh(small_tokenizer(), {16, 8, true}, 9);
  const EncodeSettings s = settings(6, 8, true, true);
  const std::vector<std::string> texts{"a b", "c d e", "f", "g h i j", "k"};
  const auto whole = encode_texts(m, texts, Role::Document, s, 256);
  const auto pieces = encode_texts(m, texts, Role::Document, s, 2);
  EXPECT_EQ(whole.vectors, pieces.vectors);
  EXPECT_EQ(whole.mask, pieces.mask);
  const auto items = split_items(whole);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto single = encode_late(m.params, m.tokenize(texts[i], Role::Document, s), false);
    EXPECT_EQ(items[i].vectors, single.vectors);
  }
}

TEST(Encoder, EndToEndGradientMatchesFiniteDifferences) {
  const TokenizerConfig tok = small_tokenizer();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (bool mix : {false, true}) {
      for (Interaction mode : {Interaction::Late, Interaction::Dense}) {
        const Model m = Model::fresh(tok, {6, 4, mix}, seed);
        const EncodeSettings s = settings(4, 5, true, true);
        const std::vector<TokenSequence> qs{m.tokenize("a b c", Role::Query, s),
                                            m.tokenize("d e", Role::Query, s)};
        const std::vector<TokenSequence> ds{m.tokenize("a b x y", Role::Document, s),
                                            m.tokenize("d z", Role::Document, s)};
        auto loss_on = [&](auto& ctx, const BoundParams<std::decay_t<decltype(ctx)>>& b) {
          auto q = encode_batch(ctx, b, std::span<const TokenSequence>(qs), mode, {});
          auto d = encode_batch(ctx, b, std::span<const TokenSequence>(ds), mode, {});
          auto scores = ctx.maxsim(q.vectors, d.vectors,
                                   {q.rows_per_item, q.mask, d.rows_per_item, d.mask,
                                    PairLayout::all_pairs(2, 2)});
          const DenseMatrix w = DenseMatrix::from_rows({{0.7, -1.3}, {0.4, 2.1}});
          return ctx.sum_all(ctx.mul(scores, ctx.constant(w)));
        };
        ParamMap params{{EncoderParams::kEmbedding, m.params.embedding},
                        {EncoderParams::kProjection, m.params.projection}};
        if (mix) params.emplace(EncoderParams::kContextMix, m.params.context_mix);
        auto f = [&](const ParamMap& p) {
          EncoderParams ep{p.at(EncoderParams::kEmbedding), p.at(EncoderParams::kProjection),
                           mix ? p.at(EncoderParams::kContextMix) : DenseMatrix{}};
          Eager ctx;
          return loss_on(ctx, bind_params(ctx, ep)).item();
        };
        Tape tape;
        const GradStore g = tape.backward(loss_on(tape, bind_params(tape, m.params)));
        // Rows of the embedding that no token touches have zero gradient both ways;
        // only the used rows are differenced.
        std::vector<std::size_t> emb_idx;
        for (const auto* list : {&qs, &ds})
          for (const auto& seq : *list)
            for (auto id : seq.ids)
              for (std::size_t k = 0; k < 6; ++k) emb_idx.push_back(id * 6 + k);
        std::map<std::string, std::vector<std::size_t>> entries{{EncoderParams::kEmbedding, emb_idx}};
        std::vector<std::size_t> all_proj(m.params.projection.size());
        std::iota(all_proj.begin(), all_proj.end(), 0);
        entries[EncoderParams::kProjection] = all_proj;
        if (mix) {
          std::vector<std::size_t> all_mix(m.params.context_mix.size());
          std::iota(all_mix.begin(), all_mix.end(), 0);
          entries[EncoderParams::kContextMix] = all_mix;
        }
        worst = std::max(worst, mvlab::testing::fd_max_rel_err(g, FiniteDifference{}(f, params, entries)));
      }
    }
  }
  EXPECT_LE(worst, 1e-4);
}
