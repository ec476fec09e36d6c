#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mvlab/error.hpp"

namespace mvlab {

enum class Role : std::uint8_t { Query, Document };

inline const char* to_string(Role r) { return r == Role::Query ? "query" : "document"; }

// Reserved ids. Prompt ids follow: queries use [4, 4+P), documents [4+P, 4+2P).
inline constexpr std::uint32_t kPadId = 0;
inline constexpr std::uint32_t kQueryMarkerId = 1;
inline constexpr std::uint32_t kDocMarkerId = 2;
inline constexpr std::uint32_t kUnknownId = 3;
inline constexpr std::uint32_t kFirstPromptId = 4;

struct TokenizerConfig {
  std::uint32_t vocab_size = 8192;
  std::uint32_t prompt_len = 7;
  bool lowercase = true;

  std::uint32_t reserved_count() const { return kFirstPromptId + 2 * prompt_len; }

  std::uint32_t prompt_id(Role role, std::uint32_t i) const {
    return kFirstPromptId + (role == Role::Query ? 0 : prompt_len) + i;
  }

  void validate() const {
    if (vocab_size <= reserved_count()) {
      throw ConfigError("tokenizer: vocab_size " + std::to_string(vocab_size) +
                        " leaves no room after " + std::to_string(reserved_count()) +
                        " reserved ids");
    }
  }

  friend bool operator==(const TokenizerConfig&, const TokenizerConfig&) = default;
};

// Base sequence lengths. With compensation on, each budget grows by the
// prompt length so prompts do not displace content.
struct LengthBudget {
  std::size_t query_len = 32;
  std::size_t doc_len = 48;
  bool length_compensation = true;

  std::size_t base(Role role) const { return role == Role::Query ? query_len : doc_len; }

  std::size_t effective(Role role, std::uint32_t prompt_len) const {
    return base(role) + (length_compensation ? prompt_len : 0);
  }

  friend bool operator==(const LengthBudget&, const LengthBudget&) = default;
};

struct TokenSequence {
  std::vector<std::uint32_t> ids;
  std::vector<std::uint8_t> valid_mask;
  Role role = Role::Query;
  std::size_t prompt_count = 0;  // prompt ids occupy positions [1, 1 + prompt_count)

  std::size_t size() const { return ids.size(); }
  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto v : valid_mask) n += v;
    return n;
  }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// 64-bit FNV-1a of the word's bytes, folded into the non-reserved id range.
inline std::uint32_t hash_token(std::string_view word, const TokenizerConfig& cfg) {
  if (word.empty()) throw ContractError("hash_token: empty word");
  const std::uint64_t slots = cfg.vocab_size - cfg.reserved_count();
  return cfg.reserved_count() + static_cast<std::uint32_t>(fnv1a64(word) % slots);
}

inline std::vector<std::string> split_words(std::string_view text, bool lowercase) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      flush();
    } else {
      cur.push_back(lowercase && c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : ch);
    }
  }
  flush();
  return out;
}

// Layout: marker, prompt ids (if enabled), hashed words, then PAD up to the
// effective budget. Content beyond the budget is truncated.
inline TokenSequence tokenize(std::string_view text, Role role, const TokenizerConfig& cfg,
                              const LengthBudget& budget, bool prompts_enabled) {
  cfg.validate();
  const std::size_t length = budget.effective(role, cfg.prompt_len);
  const std::size_t prompts = prompts_enabled ? cfg.prompt_len : 0;
  if (length < 1 + prompts) {
    throw ConfigError(std::string("tokenize: ") + to_string(role) + " budget " +
                      std::to_string(length) + " cannot hold marker and " +
                      std::to_string(prompts) + " prompt tokens");
  }
  TokenSequence seq;
  seq.role = role;
  seq.prompt_count = prompts;
  seq.ids.reserve(length);
  seq.ids.push_back(role == Role::Query ? kQueryMarkerId : kDocMarkerId);
  for (std::uint32_t i = 0; i < prompts; ++i) seq.ids.push_back(cfg.prompt_id(role, i));
  for (const auto& w : split_words(text, cfg.lowercase)) {
    if (seq.ids.size() == length) break;
    seq.ids.push_back(hash_token(w, cfg));
  }
  seq.valid_mask.assign(seq.ids.size(), 1);
  seq.ids.resize(length, kPadId);
  seq.valid_mask.resize(length, 0);
  return seq;
}

}  // namespace mvlab
