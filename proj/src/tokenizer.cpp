#include "charprobe/tokenizer.hpp"

#include "charprobe/errors.hpp"

namespace charprobe {

namespace {

bool is_lower(char c) { return c >= 'a' && c <= 'z'; }

}  // namespace

Tokenizer::Tokenizer(std::vector<std::string> words, std::string word_head_marker)
    : marker_(std::move(word_head_marker)), words_(std::move(words)) {
  surfaces_ = {"<bos>", " ", ":", ",", "/", "\n"};
  for (char c = 'a'; c <= 'z'; ++c) surfaces_.emplace_back(1, c);
  for (const auto& w : words_) {
    if (w.size() < 2) throw InputError("word token must have at least two letters: '" + w + "'");
    for (char c : w) {
      if (!is_lower(c)) throw InputError("word token must match [a-z]+: '" + w + "'");
    }
    const int id = static_cast<int>(surfaces_.size());
    if (!word_ids_.emplace(w, id).second) throw InputError("duplicate word token '" + w + "'");
    surfaces_.push_back(marker_ + w);
  }
}

const std::string& Tokenizer::surface(int id) const {
  if (id < 0 || id >= size()) throw InputError("token id out of range: " + std::to_string(id));
  return surfaces_[static_cast<std::size_t>(id)];
}

std::optional<int> Tokenizer::word_id(std::string_view word) const {
  auto it = word_ids_.find(std::string(word));
  if (it == word_ids_.end()) return std::nullopt;
  return it->second;
}

int Tokenizer::char_id(char c) const {
  if (!is_lower(c)) throw InputError(std::string("not a character token: '") + c + "'");
  return kFirstChar + (c - 'a');
}

char Tokenizer::char_of(int id) const {
  if (!is_char(id)) throw InputError("not a character token id: " + std::to_string(id));
  return static_cast<char>('a' + (id - kFirstChar));
}

std::string_view Tokenizer::word_of(int id) const {
  if (!is_word(id)) throw InputError("not a word token id: " + std::to_string(id));
  return words_[static_cast<std::size_t>(id - kFirstWord)];
}

std::vector<int> Tokenizer::encode(std::string_view text, bool add_bos) const {
  std::vector<int> ids;
  ids.reserve(text.size() + 1);
  if (add_bos) ids.push_back(kBos);
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (is_lower(c)) {
      std::size_t j = i;
      while (j < text.size() && is_lower(text[j])) ++j;
      if (j - i == 1) {
        ids.push_back(char_id(c));
      } else {
        auto w = word_id(text.substr(i, j - i));
        if (!w) throw InputError("word not in vocabulary: '" + std::string(text.substr(i, j - i)) + "'");
        ids.push_back(*w);
      }
      i = j;
      continue;
    }
    switch (c) {
      case ' ': ids.push_back(kSpace); break;
      case ':': ids.push_back(kColon); break;
      case ',': ids.push_back(kComma); break;
      case '/': ids.push_back(kSlash); break;
      case '\n': ids.push_back(kNewline); break;
      default: throw InputError(std::string("unencodable byte in text: '") + c + "'");
    }
    ++i;
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kBos) continue;
    if (is_word(id)) {
      out += word_of(id);
    } else {
      out += surface(id);
    }
  }
  return out;
}

nlohmann::json Tokenizer::to_json() const {
  return {{"kind", "toy"}, {"word_head_marker", marker_}, {"words", words_}};
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "toy") throw FormatError("unknown tokenizer kind");
  return Tokenizer(j.at("words").get<std::vector<std::string>>(), j.at("word_head_marker").get<std::string>());
}

}  // namespace charprobe
