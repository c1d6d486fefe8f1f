#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "charprobe/corpus.hpp"
#include "charprobe/model.hpp"
#include "charprobe/tokenizer.hpp"

namespace charprobe {

inline constexpr int kMaxProbePosition = 5;

struct StopSpec {
  int max_steps = 32;
  std::vector<int> terminators = {Tokenizer::kComma, Tokenizer::kNewline};
};

// Greedy generation; argmax ties go to the lowest token id. The returned ids
// include the terminator when one was produced. Generation also stops when
// the sequence reaches max_seq_len.
std::vector<int> greedy_decode(const Model& model, std::span<const int> prompt_ids, const StopSpec& stop,
                               std::vector<ActivationOverride> overrides = {});

// Greedy continuation of `prompt` as text, without the terminator.
std::string generate_text(const Model& model, const Tokenizer& tokenizer, std::string_view prompt,
                          const StopSpec& stop = {});

struct PredictionScore {
  bool entire = false;
  std::vector<bool> per_position;  // index N-1
};

// Compares spelled characters after trimming and collapsing whitespace.
// Pieces longer than one character fail their position.
PredictionScore score_prediction(std::string_view predicted, std::string_view gold,
                                 Separator sep = Separator::kWhitespace, int positions = kMaxProbePosition);

struct Fraction {
  std::size_t correct = 0;
  std::size_t total = 0;
  double value() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

struct TokenOutcome {
  int token_id = 0;
  std::string surface;
  std::string predicted;
  bool entire = false;
  std::vector<bool> per_position;
};

struct EvalReport {
  Fraction entire;
  std::array<Fraction, kMaxProbePosition> per_position;  // N = 1..5
  std::map<int, Fraction> per_length;
  std::vector<int> correct_token_ids;
  std::vector<TokenOutcome> outcomes;  // sorted by token_id

  double entire_accuracy() const { return entire.value(); }
  double position_accuracy(int n) const { return per_position.at(static_cast<std::size_t>(n - 1)).value(); }

  nlohmann::json to_json() const;
  std::string outcomes_csv() const;
};

enum class AblationValue {
  kZero,    // activations forced to 0
  kTraced,  // activations replaced by the values of an unablated run
};

struct EvalOptions {
  int jobs = 1;
  // 0 picks 2 * length + 4 per record, enough to expose extra characters.
  int max_new_tokens = 0;
  // Neurons overridden at every position during generation.
  std::vector<NeuronId> ablate;
  AblationValue ablation_value = AblationValue::kZero;
};

// Scores already generated text (e.g. an external model's generations).
struct GeneratedSpelling {
  TokenRecord token;
  std::string generated;
};
EvalReport score_generations(std::span<const GeneratedSpelling> items, Separator sep);

EvalReport evaluate_spelling(const Model& model, const Tokenizer& tokenizer, const SpellingDataset& ds,
                             const PromptSpec& spec, const EvalOptions& options = {});

}  // namespace charprobe
