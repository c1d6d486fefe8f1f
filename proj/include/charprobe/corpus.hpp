#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "charprobe/tokenizer.hpp"

namespace charprobe {

enum class Separator { kWhitespace, kSlash };

std::string_view to_string(Separator s);
Separator separator_from_string(std::string_view s);

// One line of a vocabulary file: "token_id<TAB>surface".
struct VocabEntry {
  int token_id = 0;
  std::string surface;
};

struct TokenRecord {
  std::string surface;  // word-head marker stripped
  int token_id = 0;
  bool has_word_head_prefix = true;
  int length = 0;

  char char_at(int n) const { return surface.at(static_cast<std::size_t>(n - 1)); }
  friend bool operator==(const TokenRecord&, const TokenRecord&) = default;
};

struct SpellingDataset {
  std::vector<TokenRecord> records;  // sorted by token_id, unique
  std::size_t source_vocab_size = 0;
  Separator separator = Separator::kWhitespace;

  double retention() const {
    return source_vocab_size == 0 ? 0.0
                                  : static_cast<double>(records.size()) / static_cast<double>(source_vocab_size);
  }
  friend bool operator==(const SpellingDataset&, const SpellingDataset&) = default;
};

struct FilterOptions {
  std::string word_head_marker = "_";
  std::size_t min_len = 5;
};

// Keeps entries that (1) carry the word-head marker, (2) are [a-z]+ after the
// marker is stripped and (3) have at least `min_len` characters.
SpellingDataset filter_vocabulary(std::span<const VocabEntry> entries, const FilterOptions& options = {});

// Retention as a percentage string with two decimals ("15.38").
std::string retention_percent(const SpellingDataset& ds);

// "token" -> "t o k e n" (whitespace) or "/t/o/k/e/n/" (slash).
std::string spell_out(std::string_view word, Separator sep);
// Inverse of spell_out: splits on the separator. Pieces are returned verbatim,
// so malformed spellings produce multi-character or empty pieces.
std::vector<std::string> split_spelling(std::string_view spelled, Separator sep);

struct PromptSpec {
  std::vector<std::string> shots = {"hello", "world", "orange"};
  Separator separator = Separator::kWhitespace;

  std::vector<std::pair<std::string, std::string>> shot_pairs() const;
};

struct Prompt {
  std::string text;
  std::string expected;
};

// Shot lines "word : spelled," joined by newlines, then "target :".
Prompt build_prompt(std::string_view target, const PromptSpec& spec);

// Prompt followed by the first n-1 spelled characters and a trailing
// separator, so the next token to predict is the n-th character.
std::string position_prompt(std::string_view target, const PromptSpec& spec, int n);

// Prompt followed by the complete spelling (no terminator).
std::string spelled_prompt(std::string_view target, const PromptSpec& spec);

struct DatasetStats {
  std::vector<std::size_t> length_histogram;                  // index = length - 1
  std::vector<std::array<std::size_t, 26>> position_frequency;  // row = position - 1
  nlohmann::json to_json() const;
};

DatasetStats dataset_stats(const SpellingDataset& ds);

struct SyntheticVocab {
  std::vector<VocabEntry> entries;  // generated word tokens only
  Tokenizer tokenizer;              // specials, characters, shot words, generated words
};

// `size` unique lowercase words with lengths in [min_len, max_len], none equal
// to a default shot word. The shot words are part of the tokenizer so prompts
// are encodable, but they are not vocabulary entries.
SyntheticVocab make_synthetic_vocab(std::uint64_t seed, std::size_t size, int min_len, int max_len,
                                    std::string word_head_marker = "_");

// Seeded split of records into (train, held-out); the held-out part gets
// round(fraction * n) records. Both parts stay sorted by token_id.
std::pair<SpellingDataset, SpellingDataset> split_holdout(const SpellingDataset& ds, double fraction,
                                                          std::uint64_t seed);

std::vector<VocabEntry> read_vocab_file(const std::filesystem::path& path);
void write_vocab_file(const std::filesystem::path& path, std::span<const VocabEntry> entries);

nlohmann::json dataset_to_json(const SpellingDataset& ds);
SpellingDataset dataset_from_json(const nlohmann::json& j);

}  // namespace charprobe
