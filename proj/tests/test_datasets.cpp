#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <unistd.h>

#include "mvlab/datasets.hpp"
#include "mvlab/maxsim.hpp"

using namespace mvlab;
namespace fs = std::filesystem;

namespace {

SyntheticSpec tiny_spec(std::uint64_t seed = 0) {
  SyntheticSpec s;
  s.topic_count = 3;
  s.vocab_per_topic = 40;
  s.queries_per_topic = 4;
  s.docs_per_topic = 6;
  s.train_queries_per_topic = 5;
  s.kd_candidates = 5;
  s.seed = seed;
  return s;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / ("mvlab_test_" + name + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

std::size_t topic_of(const std::string& word) {
  return std::stoul(word.substr(1, word.find('w') - 1));
}

}  // namespace

TEST(Synthetic, DefaultSizes) {
  const Dataset ds = generate_synthetic(SyntheticSpec{});
  EXPECT_EQ(ds.corpus.size(), 8u * 64u);
  EXPECT_EQ(ds.queries.size(), 8u * 32u);
  EXPECT_EQ(ds.qrels.size(), ds.queries.size());
  for (const auto& [id, text] : ds.corpus) EXPECT_EQ(content_token_count(text), 48u);
  for (const auto& [id, text] : ds.queries) EXPECT_EQ(content_token_count(text), 8u);
  ASSERT_EQ(ds.sources.size(), 3u);
  EXPECT_EQ(ds.source("synthetic-pairs").size(), 8u * 256u);
  EXPECT_THROW(ds.source("nope"), ConfigError);
}

TEST(Synthetic, SeedDeterministic) {
  const Dataset a = generate_synthetic(tiny_spec(5));
  const Dataset b = generate_synthetic(tiny_spec(5));
  const Dataset c = generate_synthetic(tiny_spec(6));
  EXPECT_EQ(a.corpus, b.corpus);
  EXPECT_EQ(a.queries, b.queries);
  EXPECT_EQ(a.sources, b.sources);
  EXPECT_NE(a.corpus, c.corpus);
}

TEST(Synthetic, QrelsMarkExactlyTheQueryTopic) {
  const SyntheticSpec spec = tiny_spec();
  const Dataset ds = generate_synthetic(spec);
  for (const auto& [qid, row] : ds.qrels) {
    EXPECT_EQ(row.size(), spec.docs_per_topic);
    // The first query word is taken from a relevant document.
    const auto words = split_words(ds.queries.at(qid), true);
    std::set<std::size_t> topics;
    for (const auto& [doc, rel] : row) {
      EXPECT_EQ(rel, 1);
      topics.insert(std::stoul(doc.substr(3)) / spec.docs_per_topic);
    }
    ASSERT_EQ(topics.size(), 1u);
    EXPECT_EQ(topic_of(words[0]), *topics.begin());
  }
}

TEST(Synthetic, DistractorRateApproximatelyHonoured) {
  const SyntheticSpec spec;
  const Dataset ds = generate_synthetic(spec);
  std::size_t foreign = 0, total = 0;
  for (const auto& [id, text] : ds.corpus) {
    const std::size_t t = std::stoul(id.substr(3)) / spec.docs_per_topic;
    for (const auto& w : split_words(text, true)) {
      foreign += topic_of(w) != t;
      ++total;
    }
  }
  EXPECT_NEAR(static_cast<double>(foreign) / static_cast<double>(total), 0.2, 0.01);
}

TEST(Synthetic, TrainingQueriesAreSeparateFromEvaluation) {
  const Dataset ds = generate_synthetic(tiny_spec());
  for (const auto& s : ds.source("synthetic-pairs").samples) {
    EXPECT_EQ(ds.queries.count(s.query_id), 0u);
    EXPECT_EQ(ds.corpus.at(s.positive_id), s.positive);
  }
}

TEST(Synthetic, TriplesHaveForeignNegatives) {
  const SyntheticSpec spec = tiny_spec();
  const Dataset ds = generate_synthetic(spec);
  for (const auto& s : ds.source("synthetic-triples").samples) {
    ASSERT_EQ(s.negatives.size(), spec.negatives_per_query);
    const std::size_t t = std::stoul(s.positive_id.substr(3)) / spec.docs_per_topic;
    for (const auto& id : s.negative_ids) EXPECT_NE(std::stoul(id.substr(3)) / spec.docs_per_topic, t);
  }
}

TEST(Synthetic, ScoredListsRankThePositiveFirst) {
  const SyntheticSpec spec = tiny_spec();
  const Dataset ds = generate_synthetic(spec);
  for (const auto& s : ds.source("synthetic-scored").samples) {
    ASSERT_EQ(s.teacher.size(), spec.kd_candidates);
    std::set<std::string> ids(s.negative_ids.begin(), s.negative_ids.end());
    ids.insert(s.positive_id);
    EXPECT_EQ(ids.size(), spec.kd_candidates);
    // Positive: gamma + overlap >= gamma; foreign negatives: overlap alone <= 1.
    for (std::size_t k = 0; k < s.negative_ids.size(); ++k) {
      const std::size_t t = std::stoul(s.positive_id.substr(3)) / spec.docs_per_topic;
      if (std::stoul(s.negative_ids[k].substr(3)) / spec.docs_per_topic != t) {
        EXPECT_GT(s.teacher[0], s.teacher[k + 1]);
      }
    }
  }
}

TEST(Synthetic, InvalidSpecIsConfigError) {
  SyntheticSpec s;
  s.distractor_rate = 1.5;
  EXPECT_THROW(generate_synthetic(s), ConfigError);
  s = SyntheticSpec{};
  s.kd_candidates = 1;
  EXPECT_THROW(generate_synthetic(s), ConfigError);
  s = SyntheticSpec{};
  s.topic_count = 0;
  EXPECT_THROW(generate_synthetic(s), ConfigError);
}

TEST(TokenOverlap, CountsMultisetIntersection) {
  EXPECT_DOUBLE_EQ(token_overlap("a a b c", "a b b"), 0.5);
  EXPECT_DOUBLE_EQ(token_overlap("A", "a"), 1.0);
  EXPECT_DOUBLE_EQ(token_overlap("", "a"), 0.0);
}

TEST(OracleTeacher, GammaTimesRelevancePlusOverlap) {
  const Corpus corpus{{"d1", "x y"}, {"d2", "z"}};
  const QuerySet queries{{"q", "x z"}};
  const Qrels qrels{{"q", {{"d1", 2}}}};
  const auto s = oracle_teacher(qrels, corpus, queries, 4.0, {{"q", {"d1", "d2"}}});
  EXPECT_DOUBLE_EQ(s[0][0], 8.5);
  EXPECT_DOUBLE_EQ(s[0][1], 0.5);
  EXPECT_THROW(oracle_teacher(qrels, corpus, queries, 4.0, {{"q", {"d9"}}}), InputError);
}

TEST(Beir, RoundTripThroughDirectory) {
  const Dataset ds = generate_synthetic(tiny_spec());
  TempDir dir("beir_rt");
  write_beir_dir(dir.path, ds.corpus, ds.queries, ds.qrels);
  const BeirData back = load_beir_dir(dir.path);
  EXPECT_EQ(back.corpus, ds.corpus);
  EXPECT_EQ(back.queries, ds.queries);
  EXPECT_EQ(back.qrels, ds.qrels);
}

TEST(Beir, TitleIsPrependedToText) {
  TempDir dir("beir_title");
  write_file(dir.path / "corpus.jsonl", "{\"_id\":\"d\",\"title\":\"T\",\"text\":\"body\"}\n");
  write_file(dir.path / "queries.jsonl", "{\"_id\":\"q\",\"text\":\"body\"}\n");
  write_file(dir.path / "qrels" / "test.tsv", "query-id\tcorpus-id\tscore\nq\td\t1\n");
  EXPECT_EQ(load_beir_dir(dir.path).corpus.at("d"), "T body");
}

TEST(Beir, ErrorsNameFileAndLine) {
  TempDir dir("beir_err");
  write_file(dir.path / "corpus.jsonl", "{\"_id\":\"d\",\"text\":\"a\"}\n{not json\n");
  write_file(dir.path / "queries.jsonl", "{\"_id\":\"q\",\"text\":\"a\"}\n");
  write_file(dir.path / "qrels" / "test.tsv", "query-id\tcorpus-id\tscore\nq\td\t1\n");
  try {
    load_beir_dir(dir.path);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("corpus.jsonl:2"), std::string::npos) << e.what();
  }
}

TEST(Beir, UnknownIdInQrelsIsNamed) {
  TempDir dir("beir_unknown");
  write_file(dir.path / "corpus.jsonl", "{\"_id\":\"d\",\"text\":\"a\"}\n");
  write_file(dir.path / "queries.jsonl", "{\"_id\":\"q\",\"text\":\"a\"}\n");
  write_file(dir.path / "qrels" / "test.tsv", "query-id\tcorpus-id\tscore\nq\tmissing\t1\n");
  try {
    load_beir_dir(dir.path);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("'missing'"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("test.tsv:2"), std::string::npos) << e.what();
  }
}

TEST(Beir, MissingFilesAndBadHeaders) {
  TempDir dir("beir_missing");
  EXPECT_THROW(load_beir_dir(dir.path), IoError);
  write_file(dir.path / "corpus.jsonl", "{\"_id\":\"d\",\"text\":\"a\"}\n");
  write_file(dir.path / "queries.jsonl", "{\"_id\":\"q\",\"text\":\"a\"}\n");
  write_file(dir.path / "qrels" / "test.tsv", "qid\tdid\tscore\nq\td\t1\n");
  EXPECT_THROW(load_beir_dir(dir.path), IoError);
  write_file(dir.path / "qrels" / "test.tsv", "query-id\tcorpus-id\tscore\nq\td\tx\n");
  EXPECT_THROW(load_beir_dir(dir.path), IoError);
}

TEST(HardNegatives, ExcludePositivesAndRelevantDocs) {
  const Dataset ds = generate_synthetic(tiny_spec());
  TokenizerConfig tok;
  tok.vocab_size = 512;
  const Model model = Model::fresh(tok, {16, 8, false}, 1);
  EncodeSettings settings;
  settings.budget = {8, 48, true};
  std::vector<std::string> ids, texts;
  for (const auto& [id, text] : ds.corpus) {
    ids.push_back(id);
    texts.push_back(text);
  }
  const CorpusIndex index = build_index(model, ids, texts, settings);
  const DataSource& pairs = ds.source("synthetic-pairs");
  Qrels train_qrels;
  for (const auto& s : pairs.samples) train_qrels[s.query_id][s.positive_id] = 1;
  const DataSource mined = mine_hard_negatives(model, pairs, ds.corpus, index, train_qrels, 3, settings);
  EXPECT_EQ(mined.kind, SourceKind::Triples);
  for (const auto& s : mined.samples) {
    ASSERT_EQ(s.negative_ids.size(), 3u);
    for (const auto& id : s.negative_ids) EXPECT_NE(id, s.positive_id);
  }
  EXPECT_THROW(mine_hard_negatives(model, pairs, ds.corpus, index, train_qrels, ids.size(), settings),
               ConfigError);
  EXPECT_THROW(mine_hard_negatives(model, ds.source("synthetic-triples"), ds.corpus, index,
                                   train_qrels, 2, settings),
               ConfigError);
}
