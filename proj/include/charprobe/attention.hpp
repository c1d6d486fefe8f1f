#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "charprobe/corpus.hpp"
#include "charprobe/model.hpp"
#include "charprobe/probe.hpp"
#include "charprobe/serialize.hpp"
#include "charprobe/tokenizer.hpp"

namespace charprobe {

struct TargetAttention {
  std::vector<double> per_layer;             // mean over heads and usable query rows
  std::vector<std::size_t> rows_used;        // per layer
  std::size_t degenerate_rows = 0;           // rows with no mass off BOS, excluded
};

// `attention` is [layers, heads, T, T]. For every (head, query) row the BOS
// column is dropped and the row renormalized; the mass on [span_begin,
// span_end) is then averaged over heads and queries.
TargetAttention attention_to_target(const Tensor& attention, int span_begin, int span_end,
                                    std::span<const int> query_positions, int bos_position);

// Row after BOS removal and renormalization; empty when the row is degenerate.
std::vector<double> renormalized_row(const Tensor& attention, std::size_t layer, std::size_t head,
                                     std::size_t query, int bos_position);

struct AttentionProfile {
  std::vector<double> per_layer_mean;  // index l = transformer layer l (0-based)
  int peak_layer = 0;                  // earliest argmax
  std::size_t sample_count = 0;
  std::size_t requested_samples = 0;
  bool flagged_insufficient = false;
  std::size_t degenerate_rows = 0;
  std::vector<int> sampled_token_ids;

  int num_layers() const { return static_cast<int>(per_layer_mean.size()); }
  // Output of transformer layer l sits at relative depth (l+1) / L.
  double relative_depth(int layer) const { return static_cast<double>(layer + 1) / num_layers(); }
  nlohmann::json to_json() const;
  // layer,relative_depth,mean_weight,peak
  std::string to_csv() const;
};

struct AttentionOptions {
  std::size_t samples = 1000;
  bool restrict_to_correct = true;
  std::uint64_t seed = 0;
  int jobs = 1;
};

// Positions of the target token, ':' and every spelled character in a
// spelled_prompt encoding. Returns {target_position, query_positions}.
std::pair<int, std::vector<int>> spelled_query_positions(std::span<const int> ids);

AttentionProfile profile_attention(const Model& model, const Tokenizer& tokenizer, const SpellingDataset& ds,
                                   const PromptSpec& spec, std::span<const int> correct_token_ids,
                                   const AttentionOptions& options = {});

// Averages traces annotated {"kind":"attention", "bos_position",
// "target_span", "query_positions"}.
AttentionProfile profile_traces(std::span<const TraceFile> traces);

AttentionProfile make_profile(std::vector<double> sums, std::size_t samples);

struct PeakComparison {
  int peak_layer = 0;
  double peak_depth = 0.0;
  std::optional<int> breakthrough_layer;
  double breakthrough_depth = 0.0;
  double tolerance = 0.1;
  bool coincide = false;
  nlohmann::json to_json() const;
};

bool depths_coincide(double a, double b, double tolerance);

PeakComparison compare_peak_vs_breakthrough(const AttentionProfile& profile, const ProbeReport& report,
                                            double tolerance = 0.1);

}  // namespace charprobe
