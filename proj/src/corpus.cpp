#include "charprobe/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <unordered_set>

#include "charprobe/errors.hpp"

namespace charprobe {

namespace {

bool all_lower(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= 'a' && c <= 'z'; });
}

char sep_char(Separator sep) { return sep == Separator::kSlash ? '/' : ' '; }

}  // namespace

std::string_view to_string(Separator s) { return s == Separator::kSlash ? "slash" : "whitespace"; }

Separator separator_from_string(std::string_view s) {
  if (s == "whitespace") return Separator::kWhitespace;
  if (s == "slash") return Separator::kSlash;
  throw InputError("unknown separator '" + std::string(s) + "' (expected whitespace|slash)");
}

SpellingDataset filter_vocabulary(std::span<const VocabEntry> entries, const FilterOptions& options) {
  if (entries.empty()) throw InputError("empty vocabulary");
  const std::string& marker = options.word_head_marker;
  SpellingDataset ds;
  ds.source_vocab_size = entries.size();
  std::set<int> seen;
  for (const auto& e : entries) {
    const std::string_view raw = e.surface;
    if (marker.empty() || !raw.starts_with(marker)) continue;
    const std::string_view stripped = raw.substr(marker.size());
    if (!all_lower(stripped) || stripped.size() < options.min_len) continue;
    if (!seen.insert(e.token_id).second) continue;
    ds.records.push_back({std::string(stripped), e.token_id, true, static_cast<int>(stripped.size())});
  }
  std::sort(ds.records.begin(), ds.records.end(),
            [](const TokenRecord& a, const TokenRecord& b) { return a.token_id < b.token_id; });
  return ds;
}

std::string retention_percent(const SpellingDataset& ds) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * ds.retention());
  return buf;
}

std::string spell_out(std::string_view word, Separator sep) {
  if (!all_lower(word)) throw InputError("spell_out expects [a-z]+, got '" + std::string(word) + "'");
  const char s = sep_char(sep);
  std::string out;
  if (sep == Separator::kSlash) out.push_back(s);
  for (std::size_t i = 0; i < word.size(); ++i) {
    out.push_back(word[i]);
    if (sep == Separator::kSlash || i + 1 < word.size()) out.push_back(s);
  }
  return out;
}

std::vector<std::string> split_spelling(std::string_view spelled, Separator sep) {
  std::vector<std::string> pieces;
  if (sep == Separator::kWhitespace) {
    std::size_t i = 0;
    while (i < spelled.size()) {
      while (i < spelled.size() && std::isspace(static_cast<unsigned char>(spelled[i]))) ++i;
      if (i >= spelled.size()) break;
      std::size_t j = i;
      while (j < spelled.size() && !std::isspace(static_cast<unsigned char>(spelled[j]))) ++j;
      pieces.emplace_back(spelled.substr(i, j - i));
      i = j;
    }
    return pieces;
  }
  std::string_view body = spelled;
  while (!body.empty() && std::isspace(static_cast<unsigned char>(body.front()))) body.remove_prefix(1);
  while (!body.empty() && std::isspace(static_cast<unsigned char>(body.back()))) body.remove_suffix(1);
  if (body.starts_with('/')) body.remove_prefix(1);
  if (body.ends_with('/')) body.remove_suffix(1);
  if (body.empty()) return pieces;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= body.size(); ++i) {
    if (i == body.size() || body[i] == '/') {
      pieces.emplace_back(body.substr(start, i - start));
      start = i + 1;
    }
  }
  return pieces;
}

std::vector<std::pair<std::string, std::string>> PromptSpec::shot_pairs() const {
  std::vector<std::pair<std::string, std::string>> out;
  out.reserve(shots.size());
  for (const auto& w : shots) out.emplace_back(w, spell_out(w, separator));
  return out;
}

Prompt build_prompt(std::string_view target, const PromptSpec& spec) {
  if (!all_lower(target)) throw InputError("prompt target must match [a-z]+: '" + std::string(target) + "'");
  if (std::find(spec.shots.begin(), spec.shots.end(), target) != spec.shots.end()) {
    throw InputError("target '" + std::string(target) + "' is one of the few-shot words");
  }
  const bool ws = spec.separator == Separator::kWhitespace;
  std::string text;
  for (const auto& [word, spelled] : spec.shot_pairs()) {
    text += word;
    text += ws ? " : " : " :";
    text += spelled;
    text += ",\n";
  }
  text += target;
  text += " :";
  return {std::move(text), spell_out(target, spec.separator)};
}

std::string position_prompt(std::string_view target, const PromptSpec& spec, int n) {
  if (n < 1 || static_cast<std::size_t>(n) > target.size()) {
    throw InputError("character position " + std::to_string(n) + " outside '" + std::string(target) + "'");
  }
  auto [text, spelled] = build_prompt(target, spec);
  const auto k = static_cast<std::size_t>(n - 1);
  if (spec.separator == Separator::kWhitespace) {
    text += ' ';
    text += spelled.substr(0, 2 * k);
  } else {
    text += spelled.substr(0, 2 * k + 1);
  }
  return text;
}

std::string spelled_prompt(std::string_view target, const PromptSpec& spec) {
  auto [text, spelled] = build_prompt(target, spec);
  if (spec.separator == Separator::kWhitespace) text += ' ';
  return text + spelled;
}

nlohmann::json DatasetStats::to_json() const {
  nlohmann::json freq = nlohmann::json::array();
  for (const auto& row : position_frequency) freq.push_back(row);
  return {{"length_histogram", length_histogram}, {"position_frequency", freq}};
}

DatasetStats dataset_stats(const SpellingDataset& ds) {
  if (ds.records.empty()) throw InputError("dataset_stats on an empty dataset");
  std::size_t max_len = 0;
  for (const auto& r : ds.records) max_len = std::max(max_len, r.surface.size());
  DatasetStats st;
  st.length_histogram.assign(max_len, 0);
  st.position_frequency.assign(max_len, {});
  for (const auto& r : ds.records) {
    ++st.length_histogram[r.surface.size() - 1];
    for (std::size_t p = 0; p < r.surface.size(); ++p) ++st.position_frequency[p][r.surface[p] - 'a'];
  }
  return st;
}

SyntheticVocab make_synthetic_vocab(std::uint64_t seed, std::size_t size, int min_len, int max_len,
                                    std::string word_head_marker) {
  if (size < 1) throw InputError("synthetic vocabulary size must be >= 1");
  if (min_len < 5 || max_len < min_len) throw InputError("synthetic word lengths must satisfy 5 <= min <= max");
  const std::vector<std::string> shots = PromptSpec{}.shots;
  // Available strings, saturating well above any realistic request.
  double available = 0.0;
  for (int len = min_len; len <= max_len; ++len) available += std::pow(26.0, len);
  for (const auto& s : shots) {
    if (static_cast<int>(s.size()) >= min_len && static_cast<int>(s.size()) <= max_len) available -= 1.0;
  }
  if (static_cast<double>(size) > available) {
    throw CapacityError("cannot draw " + std::to_string(size) + " unique words of length " +
                        std::to_string(min_len) + ".." + std::to_string(max_len));
  }

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> len_dist(min_len, max_len);
  std::uniform_int_distribution<int> letter(0, 25);
  std::unordered_set<std::string> taken(shots.begin(), shots.end());
  std::vector<std::string> words;
  words.reserve(size);
  while (words.size() < size) {
    std::string w(static_cast<std::size_t>(len_dist(rng)), 'a');
    for (auto& c : w) c = static_cast<char>('a' + letter(rng));
    if (taken.insert(w).second) words.push_back(std::move(w));
  }

  std::vector<std::string> all = shots;
  all.insert(all.end(), words.begin(), words.end());
  SyntheticVocab out{{}, Tokenizer(std::move(all), std::move(word_head_marker))};
  out.entries.reserve(size);
  for (const auto& w : words) {
    const int id = *out.tokenizer.word_id(w);
    out.entries.push_back({id, out.tokenizer.surface(id)});
  }
  return out;
}

std::pair<SpellingDataset, SpellingDataset> split_holdout(const SpellingDataset& ds, double fraction,
                                                          std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0) throw InputError("held-out fraction must lie in [0,1]");
  std::vector<std::size_t> order(ds.records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(order.size())));
  std::vector<bool> held(ds.records.size(), false);
  for (std::size_t i = 0; i < n_held; ++i) held[order[i]] = true;
  SpellingDataset train{{}, ds.source_vocab_size, ds.separator};
  SpellingDataset test{{}, ds.source_vocab_size, ds.separator};
  for (std::size_t i = 0; i < ds.records.size(); ++i) (held[i] ? test : train).records.push_back(ds.records[i]);
  return {std::move(train), std::move(test)};
}

std::vector<VocabEntry> read_vocab_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open vocabulary file " + path.string());
  std::vector<VocabEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected token_id<TAB>surface");
    }
    VocabEntry e;
    try {
      std::size_t used = 0;
      e.token_id = std::stoi(line.substr(0, tab), &used);
      if (used != tab) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad token id");
    }
    e.surface = line.substr(tab + 1);
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_vocab_file(const std::filesystem::path& path, std::span<const VocabEntry> entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write vocabulary file " + path.string());
  for (const auto& e : entries) out << e.token_id << '\t' << e.surface << '\n';
}

nlohmann::json dataset_to_json(const SpellingDataset& ds) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : ds.records) {
    recs.push_back({{"surface", r.surface},
                    {"token_id", r.token_id},
                    {"has_word_head_prefix", r.has_word_head_prefix},
                    {"length", r.length}});
  }
  return {{"records", recs},
          {"source_vocab_size", ds.source_vocab_size},
          {"separator", to_string(ds.separator)},
          {"retention", ds.retention()}};
}

SpellingDataset dataset_from_json(const nlohmann::json& j) {
  SpellingDataset ds;
  ds.source_vocab_size = j.at("source_vocab_size").get<std::size_t>();
  ds.separator = separator_from_string(j.at("separator").get<std::string>());
  for (const auto& r : j.at("records")) {
    TokenRecord rec{r.at("surface").get<std::string>(), r.at("token_id").get<int>(),
                    r.at("has_word_head_prefix").get<bool>(), r.at("length").get<int>()};
    if (!all_lower(rec.surface) || rec.length != static_cast<int>(rec.surface.size())) {
      throw FormatError("dataset record '" + rec.surface + "' violates the record invariants");
    }
    ds.records.push_back(std::move(rec));
  }
  std::sort(ds.records.begin(), ds.records.end(),
            [](const TokenRecord& a, const TokenRecord& b) { return a.token_id < b.token_id; });
  return ds;
}

}  // namespace charprobe
