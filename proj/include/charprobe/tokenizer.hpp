#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace charprobe {

// Closed-vocabulary tokenizer for the toy model.
//
// Layout: <bos>, the separators (space, ":", ",", "/", newline), the 26
// character tokens "a".."z", then word tokens carrying the word-head marker.
// Encoding is deterministic: a maximal run of two or more lowercase letters
// must be a word token, a single letter is a character token, and every
// other byte must be one of the separators.
class Tokenizer {
 public:
  static constexpr int kBos = 0;
  static constexpr int kSpace = 1;
  static constexpr int kColon = 2;
  static constexpr int kComma = 3;
  static constexpr int kSlash = 4;
  static constexpr int kNewline = 5;
  static constexpr int kFirstChar = 6;
  static constexpr int kFirstWord = kFirstChar + 26;

  Tokenizer() : Tokenizer(std::vector<std::string>{}) {}
  // `words` are plain lowercase surfaces; duplicates are rejected.
  explicit Tokenizer(std::vector<std::string> words, std::string word_head_marker = "_");

  int size() const noexcept { return static_cast<int>(surfaces_.size()); }
  const std::string& word_head_marker() const noexcept { return marker_; }

  // Raw surface as a tokenizer would print it (word tokens carry the marker).
  const std::string& surface(int id) const;
  std::optional<int> word_id(std::string_view word) const;
  int char_id(char c) const;
  bool is_char(int id) const noexcept { return id >= kFirstChar && id < kFirstWord; }
  bool is_word(int id) const noexcept { return id >= kFirstWord && id < size(); }
  char char_of(int id) const;
  std::string_view word_of(int id) const;

  std::vector<int> encode(std::string_view text, bool add_bos = true) const;
  // Inverse of encode for everything but <bos>, which renders as nothing.
  std::string decode(std::span<const int> ids) const;

  nlohmann::json to_json() const;
  static Tokenizer from_json(const nlohmann::json& j);

  friend bool operator==(const Tokenizer& a, const Tokenizer& b) {
    return a.marker_ == b.marker_ && a.surfaces_ == b.surfaces_;
  }

 private:
  std::string marker_;
  std::vector<std::string> surfaces_;
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> word_ids_;
};

}  // namespace charprobe
