#include "charprobe/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "charprobe/detail/parallel.hpp"
#include "charprobe/errors.hpp"

namespace charprobe {

std::vector<double> renormalized_row(const Tensor& attention, std::size_t layer, std::size_t head,
                                     std::size_t query, int bos_position) {
  const auto row = attention.slice({layer, head, query});
  std::vector<double> out(row.begin(), row.end());
  if (bos_position >= 0 && static_cast<std::size_t>(bos_position) < out.size()) {
    out[static_cast<std::size_t>(bos_position)] = 0.0;
  }
  const double total = std::accumulate(out.begin(), out.end(), 0.0);
  if (!(total > 0.0)) return {};
  for (auto& v : out) v /= total;
  return out;
}

TargetAttention attention_to_target(const Tensor& attention, int span_begin, int span_end,
                                    std::span<const int> query_positions, int bos_position) {
  if (attention.shape.size() != 4 || attention.shape[2] != attention.shape[3]) {
    throw InputError("attention must be [layers, heads, T, T]");
  }
  const auto L = attention.shape[0];
  const auto H = attention.shape[1];
  const auto T = static_cast<int>(attention.shape[2]);
  if (span_begin < 0 || span_end > T || span_begin >= span_end) throw InputError("invalid target span");
  if (bos_position >= span_begin && bos_position < span_end) throw InputError("BOS inside the target span");
  for (int q : query_positions) {
    if (q < 0 || q >= T) throw InputError("query position outside the sequence");
  }
  TargetAttention out;
  out.per_layer.assign(L, 0.0);
  out.rows_used.assign(L, 0);
  for (std::size_t l = 0; l < L; ++l) {
    double sum = 0.0;
    for (std::size_t h = 0; h < H; ++h) {
      for (int q : query_positions) {
        const auto row = renormalized_row(attention, l, h, static_cast<std::size_t>(q), bos_position);
        if (row.empty()) {
          ++out.degenerate_rows;
          continue;
        }
        for (int k = span_begin; k < span_end; ++k) sum += row[static_cast<std::size_t>(k)];
        ++out.rows_used[l];
      }
    }
    out.per_layer[l] = out.rows_used[l] ? sum / static_cast<double>(out.rows_used[l]) : 0.0;
  }
  return out;
}

std::pair<int, std::vector<int>> spelled_query_positions(std::span<const int> ids) {
  int target = -1;
  for (int i = static_cast<int>(ids.size()) - 1; i >= 0; --i) {
    if (ids[static_cast<std::size_t>(i)] == Tokenizer::kNewline) {
      target = i + 1;
      break;
    }
  }
  if (target < 0) target = (!ids.empty() && ids[0] == Tokenizer::kBos) ? 1 : 0;
  int colon = -1;
  for (int i = target + 1; i < static_cast<int>(ids.size()); ++i) {
    if (ids[static_cast<std::size_t>(i)] == Tokenizer::kColon) {
      colon = i;
      break;
    }
  }
  if (target >= static_cast<int>(ids.size()) || colon < 0) throw InputError("sequence has no 'target :' line");
  std::vector<int> q{target, colon};
  for (int i = colon + 1; i < static_cast<int>(ids.size()); ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id >= Tokenizer::kFirstChar && id < Tokenizer::kFirstWord) q.push_back(i);
  }
  return {target, q};
}

AttentionProfile make_profile(std::vector<double> sums, std::size_t samples) {
  AttentionProfile p;
  p.sample_count = samples;
  for (auto& v : sums) v = samples ? v / static_cast<double>(samples) : 0.0;
  p.per_layer_mean = std::move(sums);
  p.peak_layer = 0;
  for (std::size_t l = 1; l < p.per_layer_mean.size(); ++l) {
    if (p.per_layer_mean[l] > p.per_layer_mean[static_cast<std::size_t>(p.peak_layer)]) p.peak_layer = static_cast<int>(l);
  }
  return p;
}

AttentionProfile profile_attention(const Model& model, const Tokenizer& tokenizer, const SpellingDataset& ds,
                                   const PromptSpec& spec, std::span<const int> correct_token_ids,
                                   const AttentionOptions& options) {
  if (ds.records.empty()) throw InputError("attention dataset is empty");
  std::vector<const TokenRecord*> eligible;
  for (const auto& r : ds.records) {
    if (!options.restrict_to_correct ||
        std::find(correct_token_ids.begin(), correct_token_ids.end(), r.token_id) != correct_token_ids.end()) {
      eligible.push_back(&r);
    }
  }
  std::sort(eligible.begin(), eligible.end(),
            [](const TokenRecord* a, const TokenRecord* b) { return a->token_id < b->token_id; });
  const bool short_supply = eligible.size() < options.samples;
  if (!short_supply) {
    std::vector<std::size_t> idx(eligible.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(options.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(options.samples);
    std::sort(idx.begin(), idx.end());
    std::vector<const TokenRecord*> picked;
    for (auto i : idx) picked.push_back(eligible[i]);
    eligible = std::move(picked);
  }

  const auto L = static_cast<std::size_t>(model.config().num_layers);
  std::vector<TargetAttention> per_sample(eligible.size());
  detail::parallel_for(eligible.size(), options.jobs, [&](std::size_t i) {
    const auto ids = tokenizer.encode(spelled_prompt(eligible[i]->surface, spec));
    const auto [target, queries] = spelled_query_positions(ids);
    const auto trace = forward(model, ids, true).trace;
    per_sample[i] = attention_to_target(trace->attention, target, target + 1, queries, 0);
  });
  std::vector<double> sums(L, 0.0);
  std::size_t degenerate = 0;
  for (const auto& s : per_sample) {
    for (std::size_t l = 0; l < L; ++l) sums[l] += s.per_layer[l];
    degenerate += s.degenerate_rows;
  }
  auto p = make_profile(std::move(sums), eligible.size());
  p.requested_samples = options.samples;
  p.flagged_insufficient = short_supply;
  p.degenerate_rows = degenerate;
  for (const auto* r : eligible) p.sampled_token_ids.push_back(r->token_id);
  return p;
}

AttentionProfile profile_traces(std::span<const TraceFile> traces) {
  std::vector<double> sums;
  std::size_t used = 0;
  std::size_t degenerate = 0;
  std::vector<int> ids;
  for (const auto& tf : traces) {
    const auto& a = tf.meta.annotations;
    if (a.value("kind", std::string()) != "attention") continue;
    if (tf.trace.attention.empty()) throw InputError("attention trace lacks the attention tensor");
    const auto span = a.at("target_span").get<std::vector<int>>();
    if (span.size() != 2) throw FormatError("target_span must be [begin, end)");
    const auto queries = a.at("query_positions").get<std::vector<int>>();
    const auto r = attention_to_target(tf.trace.attention, span[0], span[1], queries, a.value("bos_position", 0));
    if (sums.empty()) sums.assign(r.per_layer.size(), 0.0);
    if (sums.size() != r.per_layer.size()) throw FormatError("traces disagree on num_layers");
    for (std::size_t l = 0; l < sums.size(); ++l) sums[l] += r.per_layer[l];
    degenerate += r.degenerate_rows;
    ids.push_back(a.value("token_id", -1));
    ++used;
  }
  if (used == 0) throw InputError("no attention-annotated traces");
  auto p = make_profile(std::move(sums), used);
  p.requested_samples = used;
  p.degenerate_rows = degenerate;
  p.sampled_token_ids = std::move(ids);
  return p;
}

nlohmann::json AttentionProfile::to_json() const {
  nlohmann::json depth = nlohmann::json::array();
  for (int l = 0; l < num_layers(); ++l) depth.push_back(relative_depth(l));
  return {{"per_layer_mean", per_layer_mean},
          {"relative_depth", depth},
          {"peak_layer", peak_layer},
          {"peak_relative_depth", num_layers() ? relative_depth(peak_layer) : 0.0},
          {"sample_count", sample_count},
          {"requested_samples", requested_samples},
          {"flagged_insufficient", flagged_insufficient},
          {"degenerate_rows", degenerate_rows},
          {"sampled_token_ids", sampled_token_ids}};
}

std::string AttentionProfile::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "layer,relative_depth,mean_weight,peak\n";
  for (int l = 0; l < num_layers(); ++l) {
    out << l << ',' << relative_depth(l) << ',' << per_layer_mean[static_cast<std::size_t>(l)] << ','
        << (l == peak_layer ? 1 : 0) << '\n';
  }
  return out.str();
}

bool depths_coincide(double a, double b, double tolerance) { return std::abs(a - b) <= tolerance + 1e-12; }

PeakComparison compare_peak_vs_breakthrough(const AttentionProfile& profile, const ProbeReport& report,
                                            double tolerance) {
  PeakComparison c;
  c.tolerance = tolerance;
  c.peak_layer = profile.peak_layer;
  c.peak_depth = profile.num_layers() ? profile.relative_depth(profile.peak_layer) : 0.0;
  c.breakthrough_layer = report.breakthrough_layer;
  if (c.breakthrough_layer) {
    c.breakthrough_depth = ProbeReport::relative_depth(*c.breakthrough_layer, report.num_layers);
    c.coincide = depths_coincide(c.peak_depth, c.breakthrough_depth, tolerance);
  }
  return c;
}

nlohmann::json PeakComparison::to_json() const {
  nlohmann::json j = {{"peak_layer", peak_layer},
                      {"peak_relative_depth", peak_depth},
                      {"breakthrough_layer", nullptr},
                      {"breakthrough_relative_depth", nullptr},
                      {"tolerance", tolerance},
                      {"coincide", coincide}};
  if (breakthrough_layer) {
    j["breakthrough_layer"] = *breakthrough_layer;
    j["breakthrough_relative_depth"] = breakthrough_depth;
  }
  return j;
}

}  // namespace charprobe
