#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "charprobe/corpus.hpp"
#include "charprobe/model.hpp"
#include "charprobe/tokenizer.hpp"

namespace test_support {

inline charprobe::Tokenizer small_tokenizer() {
  return charprobe::Tokenizer({"hello", "world", "orange", "token", "libert", "spelling", "queue", "zebra"});
}

inline charprobe::ModelConfig tiny_config(int vocab_size, std::uint64_t seed = 11) {
  charprobe::ModelConfig c;
  c.num_layers = 2;
  c.num_heads = 2;
  c.model_dim = 16;
  c.ffn_dim = 24;
  c.vocab_size = vocab_size;
  c.max_seq_len = 96;
  c.rng_seed = seed;
  return c;
}

// Large init so gradients and attributions are far from zero.
inline charprobe::ModelParams random_params(const charprobe::ModelConfig& cfg, double stddev = 0.3) {
  charprobe::InitOptions o;
  o.stddev = stddev;
  return charprobe::init_params(cfg, o);
}

inline charprobe::SpellingDataset dataset_of(std::initializer_list<const char*> words,
                                             const charprobe::Tokenizer& tok) {
  charprobe::SpellingDataset ds;
  for (const char* w : words) {
    const std::string s(w);
    ds.records.push_back({s, *tok.word_id(s), true, static_cast<int>(s.size())});
  }
  ds.source_vocab_size = ds.records.size();
  return ds;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const char* env = std::getenv("CHARPROBE_TEST_TMP");
  const std::filesystem::path base =
      env && *env ? std::filesystem::path(env) : std::filesystem::temp_directory_path() / "charprobe-tests";
  const auto dir = base / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace test_support
