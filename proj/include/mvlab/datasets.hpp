#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mvlab/encoder.hpp"
#include "mvlab/error.hpp"
#include "mvlab/maxsim.hpp"
#include "mvlab/rng.hpp"

namespace mvlab {

// Ordered maps keep iteration (and therefore every derived artifact) deterministic.
using Corpus = std::map<std::string, std::string>;
using QuerySet = std::map<std::string, std::string>;
using Qrels = std::map<std::string, std::map<std::string, int>>;

enum class SourceKind : std::uint8_t { Pairs, Triples, ScoredLists };

inline const char* to_string(SourceKind k) {
  switch (k) {
    case SourceKind::Pairs: return "pairs";
    case SourceKind::Triples: return "triples";
    case SourceKind::ScoredLists: return "scored_lists";
  }
  return "?";
}

// Scored lists keep the positive as candidate 0; `teacher` holds one score per
// candidate (positive first, then negatives).
struct Sample {
  std::string query_id;
  std::string query;
  std::string positive_id;
  std::string positive;
  std::vector<std::string> negative_ids;
  std::vector<std::string> negatives;
  std::vector<double> teacher;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct DataSource {
  std::string source_id;
  SourceKind kind = SourceKind::Pairs;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  friend bool operator==(const DataSource&, const DataSource&) = default;
};

struct SyntheticSpec {
  std::size_t topic_count = 8;
  std::size_t vocab_per_topic = 512;
  std::size_t queries_per_topic = 32;  // evaluation queries
  std::size_t docs_per_topic = 64;
  std::size_t query_len_tokens = 8;
  std::size_t doc_len_tokens = 48;
  double distractor_rate = 0.2;
  std::uint64_t seed = 0;
  // Training queries are drawn separately from the evaluation queries.
  std::size_t train_queries_per_topic = 256;
  // Distractors come from the first few words of a foreign topic's vocabulary.
  std::size_t distractor_pool = 4;
  std::size_t negatives_per_query = 4;
  std::size_t kd_candidates = 8;
  double teacher_gamma = 4.0;

  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("synthetic: ") + name + " must be at least 1");
    };
    positive(topic_count, "topic_count");
    positive(vocab_per_topic, "vocab_per_topic");
    positive(queries_per_topic, "queries_per_topic");
    positive(docs_per_topic, "docs_per_topic");
    positive(query_len_tokens, "query_len_tokens");
    positive(doc_len_tokens, "doc_len_tokens");
    positive(train_queries_per_topic, "train_queries_per_topic");
    positive(distractor_pool, "distractor_pool");
    if (!(distractor_rate >= 0.0 && distractor_rate <= 1.0)) {
      throw ConfigError("synthetic: distractor_rate must lie in [0, 1]");
    }
    if (distractor_pool > vocab_per_topic) {
      throw ConfigError("synthetic: distractor_pool exceeds vocab_per_topic");
    }
    if (topic_count < 2 && (distractor_rate > 0.0 || query_len_tokens > 1 ||
                            negatives_per_query > 0)) {
      throw ConfigError("synthetic: distractors and foreign negatives need at least two topics");
    }
    if (kd_candidates < 2) throw ConfigError("synthetic: kd_candidates must be at least 2");
    if (kd_candidates > topic_count * docs_per_topic) {
      throw ConfigError("synthetic: kd_candidates exceeds corpus size");
    }
  }
};

struct Dataset {
  Corpus corpus;
  QuerySet queries;
  Qrels qrels;
  std::vector<DataSource> sources;

  const DataSource& source(const std::string& id) const {
    for (const auto& s : sources)
      if (s.source_id == id) return s;
    throw ConfigError("unknown data source '" + id + "'");
  }
};

inline std::size_t content_token_count(const std::string& text) {
  return split_words(text, true).size();
}

// |query multiset ∩ doc multiset| / |query tokens|, over lowercased whitespace tokens.
inline double token_overlap(const std::string& query, const std::string& doc) {
  const auto q = split_words(query, true);
  if (q.empty()) return 0.0;
  std::unordered_map<std::string, std::size_t> counts;
  for (auto& w : split_words(doc, true)) ++counts[w];
  std::size_t hit = 0;
  for (const auto& w : q) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++hit;
    }
  }
  return static_cast<double>(hit) / static_cast<double>(q.size());
}

struct TeacherRequest {
  std::string query_id;
  std::vector<std::string> candidate_ids;
};

// score = gamma * relevance + token_overlap(query, doc)
inline std::vector<std::vector<double>> oracle_teacher(const Qrels& qrels, const Corpus& corpus,
                                                       const QuerySet& queries, double gamma,
                                                       const std::vector<TeacherRequest>& requests) {
  std::vector<std::vector<double>> out;
  out.reserve(requests.size());
  for (const auto& r : requests) {
    auto q = queries.find(r.query_id);
    if (q == queries.end()) throw InputError("oracle_teacher: unknown query '" + r.query_id + "'");
    const auto qrow = qrels.find(r.query_id);
    std::vector<double> scores;
    scores.reserve(r.candidate_ids.size());
    for (const auto& id : r.candidate_ids) {
      auto d = corpus.find(id);
      if (d == corpus.end()) throw InputError("oracle_teacher: unknown doc '" + id + "'");
      int rel = 0;
      if (qrow != qrels.end()) {
        auto it = qrow->second.find(id);
        if (it != qrow->second.end()) rel = it->second;
      }
      scores.push_back(gamma * rel + token_overlap(q->second, d->second));
    }
    out.push_back(std::move(scores));
  }
  return out;
}

namespace detail {

inline std::string numbered(const char* prefix, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

}  // namespace detail

// Topic t owns words "t<t>w<j>". Documents draw from their topic's vocabulary and,
// with probability distractor_rate per token, from a foreign topic's distractor pool.
// A query shares one word with its positive document, takes the rest of its topical
// half from the topic vocabulary and fills the remainder with foreign distractors.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t T = spec.topic_count;
  auto word = [](std::size_t topic, std::size_t j) {
    return "t" + std::to_string(topic) + "w" + std::to_string(j);
  };
  auto foreign_topic = [&](std::size_t t) {
    std::size_t o = static_cast<std::size_t>(rng.below(T - 1));
    return o >= t ? o + 1 : o;
  };
  auto distractor = [&](std::size_t t) {
    return word(foreign_topic(t), static_cast<std::size_t>(rng.below(spec.distractor_pool)));
  };

  Dataset ds;
  const std::size_t n_docs = T * spec.docs_per_topic;
  std::vector<std::string> doc_ids(n_docs);
  std::vector<std::vector<std::string>> own_words(n_docs);
  std::vector<std::size_t> doc_topic(n_docs);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < spec.docs_per_topic; ++i) {
      const std::size_t d = t * spec.docs_per_topic + i;
      std::vector<std::string> words;
      for (std::size_t k = 0; k < spec.doc_len_tokens; ++k) {
        if (T > 1 && rng.uniform() < spec.distractor_rate) {
          words.push_back(distractor(t));
        } else {
          words.push_back(word(t, static_cast<std::size_t>(rng.below(spec.vocab_per_topic))));
          own_words[d].push_back(words.back());
        }
      }
      doc_ids[d] = detail::numbered("doc", d, 5);
      doc_topic[d] = t;
      ds.corpus.emplace(doc_ids[d], detail::join_words(words));
    }
  }

  const std::size_t topical = (spec.query_len_tokens + 1) / 2;
  auto make_query = [&](std::size_t t, std::size_t pos) {
    std::vector<std::string> words;
    for (std::size_t k = 0; k < spec.query_len_tokens; ++k) {
      if (k == 0 && !own_words[pos].empty()) {
        words.push_back(own_words[pos][rng.below(own_words[pos].size())]);
      } else if (k < topical) {
        words.push_back(word(t, static_cast<std::size_t>(rng.below(spec.vocab_per_topic))));
      } else {
        words.push_back(distractor(t));
      }
    }
    return detail::join_words(words);
  };

  auto topic_qrels = [&](std::size_t t) {
    std::map<std::string, int> row;
    for (std::size_t i = 0; i < spec.docs_per_topic; ++i)
      row.emplace(doc_ids[t * spec.docs_per_topic + i], 1);
    return row;
  };

  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < spec.queries_per_topic; ++j) {
      const std::size_t pos = t * spec.docs_per_topic + rng.below(spec.docs_per_topic);
      const std::string qid = detail::numbered("q", t * spec.queries_per_topic + j, 5);
      ds.queries.emplace(qid, make_query(t, pos));
      ds.qrels.emplace(qid, topic_qrels(t));
    }
  }

  // Training queries and their relevance (kept out of the evaluation sets).
  QuerySet train_queries;
  Qrels train_qrels;
  std::vector<Sample> pairs;
  std::vector<std::size_t> train_topic;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < spec.train_queries_per_topic; ++j) {
      const std::size_t pos = t * spec.docs_per_topic + rng.below(spec.docs_per_topic);
      Sample s;
      s.query_id = detail::numbered("tq", t * spec.train_queries_per_topic + j, 6);
      s.query = make_query(t, pos);
      s.positive_id = doc_ids[pos];
      s.positive = ds.corpus.at(s.positive_id);
      train_queries.emplace(s.query_id, s.query);
      train_qrels.emplace(s.query_id, topic_qrels(t));
      train_topic.push_back(t);
      pairs.push_back(std::move(s));
    }
  }

  std::vector<Sample> triples = pairs;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    for (std::size_t k = 0; k < spec.negatives_per_query; ++k) {
      const std::size_t d =
          foreign_topic(train_topic[i]) * spec.docs_per_topic + rng.below(spec.docs_per_topic);
      triples[i].negative_ids.push_back(doc_ids[d]);
      triples[i].negatives.push_back(ds.corpus.at(doc_ids[d]));
    }
  }

  // KD candidates: the positive plus distinct other documents, half from the
  // query's own topic where possible.
  std::vector<Sample> lists = pairs;
  std::vector<TeacherRequest> requests;
  for (std::size_t i = 0; i < lists.size(); ++i) {
    Sample& s = lists[i];
    std::set<std::string> used{s.positive_id};
    const std::size_t t = train_topic[i];
    const std::size_t same_wanted =
        std::min((spec.kd_candidates - 1) / 2, spec.docs_per_topic - 1);
    std::size_t same = 0;
    while (used.size() < spec.kd_candidates) {
      std::size_t d;
      if (same < same_wanted) {
        d = t * spec.docs_per_topic + rng.below(spec.docs_per_topic);
      } else if (T > 1) {
        d = foreign_topic(t) * spec.docs_per_topic + rng.below(spec.docs_per_topic);
      } else {
        d = rng.below(n_docs);
      }
      if (!used.insert(doc_ids[d]).second) continue;
      if (doc_topic[d] == t) ++same;
      s.negative_ids.push_back(doc_ids[d]);
      s.negatives.push_back(ds.corpus.at(doc_ids[d]));
    }
    TeacherRequest r{s.query_id, {s.positive_id}};
    r.candidate_ids.insert(r.candidate_ids.end(), s.negative_ids.begin(), s.negative_ids.end());
    requests.push_back(std::move(r));
  }
  const auto teacher = oracle_teacher(train_qrels, ds.corpus, train_queries, spec.teacher_gamma,
                                      requests);
  for (std::size_t i = 0; i < lists.size(); ++i) lists[i].teacher = teacher[i];

  ds.sources.push_back({"synthetic-pairs", SourceKind::Pairs, std::move(pairs)});
  ds.sources.push_back({"synthetic-triples", SourceKind::Triples, std::move(triples)});
  ds.sources.push_back({"synthetic-scored", SourceKind::ScoredLists, std::move(lists)});
  return ds;
}

// ---------------------------------------------------------------------------
// BEIR directory layout: corpus.jsonl, queries.jsonl, qrels/*.tsv

struct BeirData {
  Corpus corpus;
  QuerySet queries;
  Qrels qrels;
  friend bool operator==(const BeirData&, const BeirData&) = default;
};

namespace detail {

inline std::ifstream open_input(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return in;
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

template <class OnRecord>
void read_jsonl(const std::filesystem::path& path, OnRecord on_record) {
  auto in = open_input(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    strip_cr(line);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": malformed JSON: " + e.what());
    }
    auto field = [&](const char* key, bool required) -> std::string {
      if (!j.is_object() || !j.contains(key)) {
        if (required) {
          throw IoError(path.string() + ":" + std::to_string(lineno) + ": missing \"" + key + "\"");
        }
        return {};
      }
      if (!j[key].is_string()) {
        throw IoError(path.string() + ":" + std::to_string(lineno) + ": \"" + key +
                      "\" is not a string");
      }
      return j[key].get<std::string>();
    };
    on_record(field, lineno);
  }
}

}  // namespace detail

inline BeirData load_beir_dir(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  BeirData data;
  const fs::path corpus_path = dir / "corpus.jsonl";
  detail::read_jsonl(corpus_path, [&](auto field, std::size_t lineno) {
    const std::string id = field("_id", true);
    const std::string title = field("title", false);
    const std::string text = field("text", true);
    if (!data.corpus.emplace(id, title.empty() ? text : title + " " + text).second) {
      throw IoError(corpus_path.string() + ":" + std::to_string(lineno) + ": duplicate _id '" +
                    id + "'");
    }
  });
  const fs::path queries_path = dir / "queries.jsonl";
  detail::read_jsonl(queries_path, [&](auto field, std::size_t lineno) {
    const std::string id = field("_id", true);
    if (!data.queries.emplace(id, field("text", true)).second) {
      throw IoError(queries_path.string() + ":" + std::to_string(lineno) + ": duplicate _id '" +
                    id + "'");
    }
  });

  const fs::path qrels_dir = dir / "qrels";
  if (!fs::is_directory(qrels_dir)) throw IoError("missing directory " + qrels_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(qrels_dir))
    if (e.is_regular_file() && e.path().extension() == ".tsv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .tsv files in " + qrels_dir.string());

  for (const auto& path : files) {
    auto in = detail::open_input(path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      detail::strip_cr(line);
      const std::string where = path.string() + ":" + std::to_string(lineno);
      if (lineno == 1) {
        if (line != "query-id\tcorpus-id\tscore") {
          throw IoError(where + ": expected header 'query-id<TAB>corpus-id<TAB>score'");
        }
        continue;
      }
      if (line.empty()) continue;
      std::vector<std::string> cols;
      std::stringstream ss(line);
      for (std::string c; std::getline(ss, c, '\t');) cols.push_back(c);
      if (cols.size() != 3) throw IoError(where + ": expected 3 tab-separated columns");
      int score = 0;
      std::size_t used = 0;
      try {
        score = std::stoi(cols[2], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != cols[2].size() || cols[2].empty()) {
        throw IoError(where + ": score '" + cols[2] + "' is not an integer");
      }
      if (score < 0) throw IoError(where + ": negative relevance " + cols[2]);
      if (!data.queries.count(cols[0])) throw IoError(where + ": unknown query id '" + cols[0] + "'");
      if (!data.corpus.count(cols[1])) throw IoError(where + ": unknown corpus id '" + cols[1] + "'");
      data.qrels[cols[0]][cols[1]] = score;
    }
  }
  return data;
}

inline void write_beir_dir(const std::filesystem::path& dir, const Corpus& corpus,
                           const QuerySet& queries, const Qrels& qrels) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "qrels", ec);
  if (ec) throw IoError("cannot create " + (dir / "qrels").string() + ": " + ec.message());
  auto open = [](const fs::path& p) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    return out;
  };
  {
    auto out = open(dir / "corpus.jsonl");
    for (const auto& [id, text] : corpus)
      out << nlohmann::json{{"_id", id}, {"title", ""}, {"text", text}}.dump() << '\n';
  }
  {
    auto out = open(dir / "queries.jsonl");
    for (const auto& [id, text] : queries) out << nlohmann::json{{"_id", id}, {"text", text}}.dump() << '\n';
  }
  auto out = open(dir / "qrels" / "test.tsv");
  out << "query-id\tcorpus-id\tscore\n";
  for (const auto& [qid, row] : qrels)
    for (const auto& [did, rel] : row) out << qid << '\t' << did << '\t' << rel << '\n';
  if (!out) throw IoError("write failed in " + dir.string());
}

// For every pair, the top-k retrieved documents that are neither the positive nor
// judged relevant to the query.
inline DataSource mine_hard_negatives(const Model& model, const DataSource& pairs,
                                      const Corpus& corpus, const CorpusIndex& index,
                                      const Qrels& qrels, std::size_t k,
                                      const EncodeSettings& settings, unsigned threads = 0) {
  if (k == 0) throw ConfigError("mine_hard_negatives: k must be at least 1");
  if (index.size() < k + 1) {
    throw ConfigError("mine_hard_negatives: corpus of " + std::to_string(index.size()) +
                      " docs is smaller than k+1 = " + std::to_string(k + 1));
  }
  if (pairs.kind != SourceKind::Pairs) {
    throw ConfigError("mine_hard_negatives: source '" + pairs.source_id + "' is not pairs");
  }
  DataSource out{pairs.source_id + "-mined", SourceKind::Triples, pairs.samples};
  if (out.samples.empty()) return out;
  std::vector<std::string> texts;
  texts.reserve(pairs.size());
  for (const auto& s : pairs.samples) texts.push_back(s.query);
  const StackedReps q = to_stacked(encode_texts(model, texts, Role::Query, settings));
  const auto ranked = retrieve_all(q, index, index.size(), threads);
  for (std::size_t i = 0; i < out.samples.size(); ++i) {
    Sample& s = out.samples[i];
    s.negative_ids.clear();
    s.negatives.clear();
    const auto row = qrels.find(s.query_id);
    for (const Hit& h : ranked[i]) {
      if (s.negative_ids.size() == k) break;
      if (h.doc_id == s.positive_id) continue;
      if (row != qrels.end()) {
        auto it = row->second.find(h.doc_id);
        if (it != row->second.end() && it->second > 0) continue;
      }
      auto text = corpus.find(h.doc_id);
      if (text == corpus.end()) throw InputError("mine_hard_negatives: unknown doc '" + h.doc_id + "'");
      s.negative_ids.push_back(h.doc_id);
      s.negatives.push_back(text->second);
    }
    if (s.negative_ids.size() < k) {
      throw ConfigError("mine_hard_negatives: query '" + s.query_id + "' has fewer than " +
                        std::to_string(k) + " non-relevant documents");
    }
  }
  return out;
}

}  // namespace mvlab
