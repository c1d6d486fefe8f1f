#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "charprobe/corpus.hpp"
#include "charprobe/eval.hpp"
#include "charprobe/model.hpp"
#include "charprobe/tokenizer.hpp"

namespace charprobe {

struct AttributionQuery {
  TokenRecord token;
  int n = 1;  // predicted character is token.char_at(n)
  PromptSpec spec;
};

struct AttributionOptions {
  int m = 20;
  // Sum attributions over every input position instead of the final one.
  bool aggregate_positions = false;
  // Restrict scoring to these neurons; others stay 0. Empty = all.
  std::vector<NeuronId> neurons;
};

struct AttributionResult {
  MatR<double> scores;  // [num_layers x ffn_dim]
  int m = 0;
};

// Integrated-gradient attribution of P(target | ids) to every FFN neuron at
// the final input position: (w/m) * sum_k dP/dw evaluated with only that
// neuron rescaled to (k/m) * w.
AttributionResult attribute_ids(const Model& model, std::span<const int> ids, int target_id,
                                const AttributionOptions& options = {});
AttributionResult attribute(const Model& model, const Tokenizer& tokenizer, const AttributionQuery& query,
                            const AttributionOptions& options = {});

struct KnowledgeNeuronSet {
  std::string key;  // "N=3" or "c=e"
  int n = 0;        // 0 in character mode
  char character = 0;
  std::vector<NeuronId> neurons;  // sorted
  std::size_t sample_count = 0;
  double top_pct = 0.01;
  double consensus = 0.75;
  std::vector<int> sampled_token_ids;
  // Over all neurons: share of samples whose top set held the neuron, and
  // mean attribution across samples. [num_layers x ffn_dim]
  MatR<double> top_fraction;
  MatR<double> mean_attribution;

  // Members of `neurons` ordered by mean attribution (descending, then id).
  std::vector<NeuronId> ranked() const;
  nlohmann::json to_json() const;
  // layer,index,consensus_fraction,mean_attribution for each member.
  std::string to_csv() const;
};

struct IdentifyOptions {
  std::size_t samples = 1000;
  double top_pct = 0.01;
  double consensus = 0.75;
  std::uint64_t seed = 0;
  AttributionOptions attribution;
  int jobs = 1;
};

// ceil(top_pct * total), at least 1.
std::size_t top_count(std::size_t total, double top_pct);
// Top `count` neuron ids of a score matrix; ties go to the lower (layer, index).
std::vector<NeuronId> top_neurons(const MatR<double>& scores, std::size_t count);

KnowledgeNeuronSet identify_knowledge_neurons(const Model& model, const Tokenizer& tokenizer,
                                              const SpellingDataset& ds, int n, const PromptSpec& spec,
                                              const IdentifyOptions& options = {});

// Prompts whose next gold character is `c`, over positions 1..5.
KnowledgeNeuronSet alphabet_neurons(const Model& model, const Tokenizer& tokenizer, const SpellingDataset& ds,
                                    char c, const PromptSpec& spec, const IdentifyOptions& options = {});

// Consensus step on precomputed per-sample attributions.
KnowledgeNeuronSet consensus_set(std::span<const MatR<double>> attributions, double top_pct, double consensus);

std::vector<std::size_t> layer_distribution(const KnowledgeNeuronSet& set, int num_layers);

struct OverlapResult {
  std::vector<std::string> keys;
  // Exclusive Venn regions keyed by membership mask (bit i = set i).
  std::map<unsigned, std::size_t> regions;
  std::map<unsigned, std::size_t> intersections;  // inclusive, every mask with >= 2 bits
  std::size_t union_size = 0;

  nlohmann::json to_json() const;
};

OverlapResult overlap(std::span<const KnowledgeNeuronSet> sets);

struct AblationOptions {
  std::size_t top_k = 100;
  AblationValue value = AblationValue::kZero;
  int jobs = 1;
};

struct AblationEntry {
  std::string key;
  int n = 0;
  std::vector<NeuronId> ablated;
  bool flagged_small_set = false;
  EvalReport report;
  double entire_delta = 0.0;
  std::vector<double> position_delta;  // N = 1..5
  nlohmann::json to_json() const;
};

struct AblationReport {
  EvalReport baseline;
  std::vector<AblationEntry> entries;
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

AblationEntry ablate_neurons(const Model& model, const Tokenizer& tokenizer, const SpellingDataset& ds,
                             const PromptSpec& spec, const EvalReport& baseline, std::vector<NeuronId> neurons,
                             const AblationOptions& options, std::string key = "custom", int n = 0);

// Per set: ablate the top_k members by mean attribution (the whole set when
// smaller, flagged) and evaluate.
AblationReport ablate_and_eval(const Model& model, const Tokenizer& tokenizer, std::span<const KnowledgeNeuronSet> sets,
                               const SpellingDataset& ds, const PromptSpec& spec, const AblationOptions& options = {},
                               const EvalReport* baseline = nullptr);

// `count` distinct neurons drawn uniformly.
std::vector<NeuronId> random_neurons(const ModelConfig& config, std::size_t count, std::uint64_t seed);

}  // namespace charprobe
