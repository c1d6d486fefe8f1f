#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "charprobe/corpus.hpp"
#include "charprobe/model.hpp"
#include "charprobe/serialize.hpp"
#include "charprobe/tokenizer.hpp"

namespace charprobe {

inline constexpr int kNumClasses = 26;
// Layer selector for the token-embedding row v_t.
inline constexpr int kEmbedding = -1;

struct FeatureSet {
  MatR<float> features;  // [samples x dim]
  std::vector<int> labels;
  std::vector<int> token_ids;
  std::size_t skipped = 0;  // records shorter than the requested position

  std::size_t size() const { return labels.size(); }
};

// kEmbedding: v_t. Otherwise hidden_states[layer] (0 = embedding output) at
// the last position of position_prompt(token, spec, n). Label = n-th character.
FeatureSet extract_features(const Model& model, const Tokenizer& tokenizer, const SpellingDataset& ds, int layer,
                            int n, const PromptSpec& spec);

// Same prompts, all num_layers+1 hidden-state layers from one pass per record.
std::vector<FeatureSet> extract_layer_features(const Model& model, const Tokenizer& tokenizer,
                                               const SpellingDataset& ds, int n, const PromptSpec& spec,
                                               int jobs = 1);

// Features from exported traces. Uses annotations {"kind":"probe", "position",
// "label", "n"}; files whose n differs are ignored. kEmbedding reads row
// annotations.token_id of the file's embeddings tensor, or of the first file
// in `traces` that has one.
FeatureSet features_from_traces(std::span<const TraceFile> traces, int layer, int n);

struct ProbeConfig {
  int input_dim = 0;
  // 0 means (512, 256) scaled by input_dim / 512 when input_dim < 512.
  int hidden1 = 0;
  int hidden2 = 0;
  double learning_rate = 1e-3;
  int batch_size = 32;
  int max_epochs = 300;
  int patience = 10;
  double min_delta = 1e-4;
  std::uint64_t seed = 0;

  // Resolved hidden widths.
  std::pair<int, int> hidden_dims() const;
  nlohmann::json to_json() const;
};

// softmax(W3 tanh(W2 tanh(W1 z + b1) + b2) + b3) where z is the input
// standardized by training-set statistics.
struct ProbeModel {
  RowVec<float> mean, inv_std;
  MatR<float> w1, w2, w3;  // [in x out]
  RowVec<float> b1, b2, b3;
  int epochs_run = 0;
  double final_loss = 0.0;

  int input_dim() const { return static_cast<int>(w1.rows()); }
  // All-zero weights with identity standardization.
  static ProbeModel zeros(const ProbeConfig& config);
};

ProbeModel train_probe(const MatR<float>& features, std::span<const int> labels, const ProbeConfig& config);
ColVec<double> predict_char(const ProbeModel& probe, std::span<const float> feature);
std::vector<int> predict_labels(const ProbeModel& probe, const MatR<float>& features);
double probe_accuracy(const ProbeModel& probe, const MatR<float>& features, std::span<const int> labels);

enum class SplitMode { kDisjoint, kRandom };

struct CrossValidation {
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> fold_accuracy;
  // Disjoint mode: fold index of every sample. Random mode: the number of
  // repetitions in which the sample was in the test split.
  std::vector<int> assignment;
};

// Disjoint folds come from a seeded shuffle dealt round-robin, so fold sizes
// differ by at most one. Random mode draws an independent 90/10 split per
// repetition.
CrossValidation cross_validate(const MatR<float>& features, std::span<const int> labels, const ProbeConfig& config,
                               int folds = 10, SplitMode mode = SplitMode::kDisjoint, int jobs = 1);

struct ProbeReport {
  int num_layers = 0;
  std::vector<int> positions;                  // N values, columns of the matrices
  std::vector<std::vector<double>> accuracy;   // [num_layers+1][positions]
  std::vector<std::vector<double>> fold_std;
  std::vector<std::vector<std::size_t>> samples;
  std::vector<double> embedding_accuracy;      // v_t probe per position; empty if not run
  std::optional<int> breakthrough_layer;

  static double relative_depth(int layer, int num_layers) {
    return static_cast<double>(layer) / static_cast<double>(num_layers);
  }
  nlohmann::json to_json() const;
  // One row per layer: layer, relative_depth, then one column per N.
  std::string to_csv() const;
};

struct ProbeRunOptions {
  std::vector<int> positions = {1, 2, 3, 4, 5};
  int folds = 10;
  SplitMode mode = SplitMode::kDisjoint;
  ProbeConfig probe;  // input_dim is filled in
  bool embedding_probe = true;
  int jobs = 1;
};

ProbeReport probe_all_layers(const Model& model, const Tokenizer& tokenizer, const SpellingDataset& ds,
                             const PromptSpec& spec, const ProbeRunOptions& options = {});

// Layer-probe surface over exported traces (no model needed).
ProbeReport probe_traces(std::span<const TraceFile> traces, const ProbeRunOptions& options = {});

// argmax over l >= 1 of the mean over columns with N >= 2 of
// accuracy[l][N] - accuracy[l-1][N]; near-ties (1e-9) go to the earlier layer.
std::optional<int> detect_breakthrough(const std::vector<std::vector<double>>& accuracy,
                                       std::span<const int> positions);
std::optional<int> detect_breakthrough(const ProbeReport& report);

}  // namespace charprobe
