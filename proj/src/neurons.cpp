#include "charprobe/neurons.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "charprobe/detail/parallel.hpp"
#include "charprobe/errors.hpp"

namespace charprobe {

namespace {

// Scores of the neurons `cols` at one (layer, position) site.
RowVec<double> site_attribution(const TracedPass& pass, int layer, int position, int target_id, int m,
                                const std::vector<Eigen::Index>& cols) {
  const RowVec<double> wbar = pass.activations(layer, position);
  const auto F = wbar.size();
  const auto C = static_cast<Eigen::Index>(cols.size());
  RowVec<double> out = RowVec<double>::Zero(F);
  if (C == 0) return out;
  MatR<double> rows(C * m, F);
  for (int k = 1; k <= m; ++k) {
    const double alpha = static_cast<double>(k) / m;
    for (Eigen::Index c = 0; c < C; ++c) {
      auto row = rows.row((k - 1) * C + c);
      row = wbar;
      row(cols[static_cast<std::size_t>(c)]) = alpha * wbar(cols[static_cast<std::size_t>(c)]);
    }
  }
  const auto eval = pass.evaluate_site(layer, position, rows, target_id);
  for (Eigen::Index c = 0; c < C; ++c) {
    const auto j = cols[static_cast<std::size_t>(c)];
    double sum = 0.0;
    for (int k = 1; k <= m; ++k) sum += eval.gradient((k - 1) * C + c, j);
    out(j) = wbar(j) * sum / static_cast<double>(m);
  }
  return out;
}

struct Query {
  std::vector<int> ids;
  int target = 0;
  int token_id = 0;
};

KnowledgeNeuronSet identify_from_queries(const Model& model, const std::vector<Query>& queries,
                                         const IdentifyOptions& options) {
  std::vector<MatR<double>> attributions(queries.size());
  detail::parallel_for(queries.size(), options.jobs, [&](std::size_t i) {
    attributions[i] = attribute_ids(model, queries[i].ids, queries[i].target, options.attribution).scores;
  });
  auto set = consensus_set(attributions, options.top_pct, options.consensus);
  for (const auto& q : queries) set.sampled_token_ids.push_back(q.token_id);
  return set;
}

void check_identify_options(const IdentifyOptions& o) {
  if (o.samples < 1) throw InputError("samples must be >= 1");
  if (!(o.top_pct > 0.0 && o.top_pct <= 1.0)) throw InputError("top_pct must be in (0, 1]");
  if (!(o.consensus > 0.0 && o.consensus <= 1.0)) throw InputError("consensus must be in (0, 1]");
}

// Seeded sample of `count` items, returned in their original order.
template <typename T>
std::vector<T> sample_ordered(const std::vector<T>& items, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  std::vector<T> out;
  for (auto i : idx) out.push_back(items[i]);
  return out;
}

nlohmann::json neuron_list(std::span<const NeuronId> ns) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& n : ns) a.push_back({n.layer, n.index});
  return a;
}

}  // namespace

AttributionResult attribute_ids(const Model& model, std::span<const int> ids, int target_id,
                                const AttributionOptions& options) {
  if (options.m < 1) throw InputError("interpolation steps m must be >= 1");
  const auto& cfg = model.config();
  TracedPass pass(model, ids);
  AttributionResult out{MatR<double>::Zero(cfg.num_layers, cfg.ffn_dim), options.m};
  const int last = pass.length() - 1;
  const int first = options.aggregate_positions ? 0 : last;
  for (int l = 0; l < cfg.num_layers; ++l) {
    std::vector<Eigen::Index> cols;
    if (options.neurons.empty()) {
      for (Eigen::Index j = 0; j < cfg.ffn_dim; ++j) cols.push_back(j);
    } else {
      for (const auto& n : options.neurons) {
        if (n.layer < 0 || n.layer >= cfg.num_layers || n.index < 0 || n.index >= cfg.ffn_dim) {
          throw InputError("attribution neuron out of range");
        }
        if (n.layer == l) cols.push_back(n.index);
      }
    }
    for (int p = first; p <= last; ++p) {
      out.scores.row(l) += site_attribution(pass, l, p, target_id, options.m, cols);
    }
  }
  return out;
}

AttributionResult attribute(const Model& model, const Tokenizer& tokenizer, const AttributionQuery& query,
                            const AttributionOptions& options) {
  if (query.n < 1 || query.n > query.token.length) throw InputError("position outside the token");
  const auto ids = tokenizer.encode(position_prompt(query.token.surface, query.spec, query.n));
  return attribute_ids(model, ids, tokenizer.char_id(query.token.char_at(query.n)), options);
}

std::size_t top_count(std::size_t total, double top_pct) {
  const double raw = top_pct * static_cast<double>(total);
  // Guard against 0.01 * 1000 landing a hair above 10.
  const auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::clamp<std::size_t>(k, 1, total);
}

std::vector<NeuronId> top_neurons(const MatR<double>& scores, std::size_t count) {
  const auto F = static_cast<std::size_t>(scores.cols());
  std::vector<std::size_t> idx(static_cast<std::size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  count = std::min(count, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double sa = scores.data()[a];
                      const double sb = scores.data()[b];
                      return sa != sb ? sa > sb : a < b;
                    });
  std::vector<NeuronId> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back({static_cast<int>(idx[i] / F), static_cast<int>(idx[i] % F)});
  }
  std::sort(out.begin(), out.end());
  return out;
}

KnowledgeNeuronSet consensus_set(std::span<const MatR<double>> attributions, double top_pct, double consensus) {
  if (attributions.empty()) throw InputError("no attributions to aggregate");
  const auto L = attributions.front().rows();
  const auto F = attributions.front().cols();
  KnowledgeNeuronSet set;
  set.top_pct = top_pct;
  set.consensus = consensus;
  set.sample_count = attributions.size();
  set.top_fraction = MatR<double>::Zero(L, F);
  set.mean_attribution = MatR<double>::Zero(L, F);
  const auto k = top_count(static_cast<std::size_t>(L * F), top_pct);
  MatR<double> counts = MatR<double>::Zero(L, F);
  for (const auto& a : attributions) {
    if (a.rows() != L || a.cols() != F) throw InputError("attribution shapes differ");
    set.mean_attribution += a;
    for (const auto& n : top_neurons(a, k)) counts(n.layer, n.index) += 1.0;
  }
  const auto s = static_cast<double>(attributions.size());
  set.mean_attribution /= s;
  set.top_fraction = counts / s;
  const double need = consensus * s - 1e-9;
  for (Eigen::Index l = 0; l < L; ++l) {
    for (Eigen::Index j = 0; j < F; ++j) {
      if (counts(l, j) >= need) set.neurons.push_back({static_cast<int>(l), static_cast<int>(j)});
    }
  }
  return set;
}

KnowledgeNeuronSet identify_knowledge_neurons(const Model& model, const Tokenizer& tokenizer,
                                              const SpellingDataset& ds, int n, const PromptSpec& spec,
                                              const IdentifyOptions& options) {
  check_identify_options(options);
  if (n < 1) throw InputError("position must be >= 1");
  std::vector<const TokenRecord*> eligible;
  for (const auto& r : ds.records) {
    if (r.length >= n) eligible.push_back(&r);
  }
  if (eligible.size() < options.samples) {
    throw InputError("identification needs " + std::to_string(options.samples) + " tokens of length >= " +
                     std::to_string(n) + ", only " + std::to_string(eligible.size()) + " available");
  }
  std::sort(eligible.begin(), eligible.end(),
            [](const TokenRecord* a, const TokenRecord* b) { return a->token_id < b->token_id; });
  std::vector<Query> queries;
  for (const auto* r : sample_ordered(eligible, options.samples, options.seed)) {
    queries.push_back({tokenizer.encode(position_prompt(r->surface, spec, n)), tokenizer.char_id(r->char_at(n)),
                       r->token_id});
  }
  auto set = identify_from_queries(model, queries, options);
  set.n = n;
  set.key = "N=" + std::to_string(n);
  return set;
}

KnowledgeNeuronSet alphabet_neurons(const Model& model, const Tokenizer& tokenizer, const SpellingDataset& ds,
                                    char c, const PromptSpec& spec, const IdentifyOptions& options) {
  check_identify_options(options);
  if (c < 'a' || c > 'z') throw InputError(std::string("not a lowercase character: ") + c);
  std::vector<std::pair<const TokenRecord*, int>> eligible;
  std::vector<const TokenRecord*> records;
  for (const auto& r : ds.records) records.push_back(&r);
  std::sort(records.begin(), records.end(),
            [](const TokenRecord* a, const TokenRecord* b) { return a->token_id < b->token_id; });
  for (const auto* r : records) {
    for (int n = 1; n <= std::min(r->length, kMaxProbePosition); ++n) {
      if (r->char_at(n) == c) eligible.emplace_back(r, n);
    }
  }
  if (eligible.size() < options.samples) {
    throw InputError("character '" + std::string(1, c) + "' needs " + std::to_string(options.samples) +
                     " prompts, only " + std::to_string(eligible.size()) + " available");
  }
  std::vector<Query> queries;
  for (const auto& [r, n] : sample_ordered(eligible, options.samples, options.seed)) {
    queries.push_back({tokenizer.encode(position_prompt(r->surface, spec, n)), tokenizer.char_id(c), r->token_id});
  }
  auto set = identify_from_queries(model, queries, options);
  set.character = c;
  set.key = std::string("c=") + c;
  return set;
}

std::vector<NeuronId> KnowledgeNeuronSet::ranked() const {
  std::vector<NeuronId> out = neurons;
  std::stable_sort(out.begin(), out.end(), [&](const NeuronId& a, const NeuronId& b) {
    const double sa = mean_attribution(a.layer, a.index);
    const double sb = mean_attribution(b.layer, b.index);
    return sa != sb ? sa > sb : a < b;
  });
  return out;
}

nlohmann::json KnowledgeNeuronSet::to_json() const {
  nlohmann::json members = nlohmann::json::array();
  for (const auto& nid : neurons) {
    members.push_back({{"layer", nid.layer},
                       {"index", nid.index},
                       {"consensus_fraction", top_fraction(nid.layer, nid.index)},
                       {"mean_attribution", mean_attribution(nid.layer, nid.index)}});
  }
  nlohmann::json j = {{"key", key},
                      {"n", n},
                      {"character", character ? std::string(1, character) : std::string()},
                      {"sample_count", sample_count},
                      {"top_pct", top_pct},
                      {"consensus", consensus},
                      {"sampled_token_ids", sampled_token_ids},
                      {"neurons", members},
                      {"size", neurons.size()}};
  auto matrix = [](const MatR<double>& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index l = 0; l < m.rows(); ++l) {
      rows.push_back(std::vector<double>(m.row(l).data(), m.row(l).data() + m.cols()));
    }
    return rows;
  };
  j["top_fraction"] = matrix(top_fraction);
  j["mean_attribution"] = matrix(mean_attribution);
  return j;
}

std::string KnowledgeNeuronSet::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "layer,index,consensus_fraction,mean_attribution\n";
  for (const auto& nid : neurons) {
    out << nid.layer << ',' << nid.index << ',' << top_fraction(nid.layer, nid.index) << ','
        << mean_attribution(nid.layer, nid.index) << '\n';
  }
  return out.str();
}

std::vector<std::size_t> layer_distribution(const KnowledgeNeuronSet& set, int num_layers) {
  std::vector<std::size_t> h(static_cast<std::size_t>(std::max(0, num_layers)), 0);
  for (const auto& n : set.neurons) {
    if (n.layer < 0 || n.layer >= num_layers) throw InputError("neuron layer outside the histogram");
    ++h[static_cast<std::size_t>(n.layer)];
  }
  return h;
}

OverlapResult overlap(std::span<const KnowledgeNeuronSet> sets) {
  if (sets.size() > 3) throw UnsupportedError("overlap supports at most 3 sets");
  if (sets.size() < 2) throw InputError("overlap needs at least 2 sets");
  OverlapResult out;
  std::map<NeuronId, unsigned> membership;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    out.keys.push_back(sets[i].key);
    for (const auto& n : sets[i].neurons) membership[n] |= 1u << i;
  }
  const unsigned full = (1u << sets.size()) - 1;
  for (unsigned mask = 1; mask <= full; ++mask) {
    out.regions[mask] = 0;
    if (std::popcount(mask) >= 2) out.intersections[mask] = 0;
  }
  for (const auto& [n, mask] : membership) {
    ++out.regions[mask];
    for (auto& [m, count] : out.intersections) {
      if ((mask & m) == m) ++count;
    }
  }
  out.union_size = membership.size();
  return out;
}

nlohmann::json OverlapResult::to_json() const {
  auto name = [&](unsigned mask) {
    std::string s;
    for (std::size_t i = 0; i < keys.size(); ++i) {
      if (mask & (1u << i)) s += (s.empty() ? "" : "&") + keys[i];
    }
    return s;
  };
  nlohmann::json reg = nlohmann::json::object();
  for (const auto& [m, c] : regions) reg[name(m) + (std::popcount(m) == 1 ? " only" : " exclusive")] = c;
  nlohmann::json inter = nlohmann::json::object();
  for (const auto& [m, c] : intersections) inter[name(m)] = c;
  return {{"sets", keys}, {"regions", reg}, {"intersections", inter}, {"union", union_size}};
}

std::vector<NeuronId> random_neurons(const ModelConfig& config, std::size_t count, std::uint64_t seed) {
  const auto total = static_cast<std::size_t>(config.num_layers) * static_cast<std::size_t>(config.ffn_dim);
  if (count > total) throw InputError("more random neurons requested than the model has");
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<NeuronId> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back({static_cast<int>(idx[i] / static_cast<std::size_t>(config.ffn_dim)),
                   static_cast<int>(idx[i] % static_cast<std::size_t>(config.ffn_dim))});
  }
  std::sort(out.begin(), out.end());
  return out;
}

AblationEntry ablate_neurons(const Model& model, const Tokenizer& tokenizer, const SpellingDataset& ds,
                             const PromptSpec& spec, const EvalReport& baseline, std::vector<NeuronId> neurons,
                             const AblationOptions& options, std::string key, int n) {
  AblationEntry e;
  e.key = std::move(key);
  e.n = n;
  e.ablated = std::move(neurons);
  if (e.ablated.empty()) {
    e.report = baseline;
  } else {
    EvalOptions eo;
    eo.jobs = options.jobs;
    eo.ablate = e.ablated;
    eo.ablation_value = options.value;
    e.report = evaluate_spelling(model, tokenizer, ds, spec, eo);
  }
  e.entire_delta = e.report.entire_accuracy() - baseline.entire_accuracy();
  for (int k = 1; k <= kMaxProbePosition; ++k) {
    e.position_delta.push_back(e.report.position_accuracy(k) - baseline.position_accuracy(k));
  }
  return e;
}

AblationReport ablate_and_eval(const Model& model, const Tokenizer& tokenizer, std::span<const KnowledgeNeuronSet> sets,
                               const SpellingDataset& ds, const PromptSpec& spec, const AblationOptions& options,
                               const EvalReport* baseline) {
  AblationReport rep;
  if (baseline) {
    rep.baseline = *baseline;
  } else {
    EvalOptions eo;
    eo.jobs = options.jobs;
    rep.baseline = evaluate_spelling(model, tokenizer, ds, spec, eo);
  }
  for (const auto& set : sets) {
    auto ranked = set.ranked();
    const bool small = ranked.size() < options.top_k;
    if (!small) ranked.resize(options.top_k);
    std::sort(ranked.begin(), ranked.end());
    auto e = ablate_neurons(model, tokenizer, ds, spec, rep.baseline, std::move(ranked), options, set.key, set.n);
    e.flagged_small_set = small;
    rep.entries.push_back(std::move(e));
  }
  return rep;
}

nlohmann::json AblationEntry::to_json() const {
  return {{"key", key},
          {"n", n},
          {"ablated", neuron_list(ablated)},
          {"ablated_count", ablated.size()},
          {"flagged_small_set", flagged_small_set},
          {"entire_accuracy", report.entire_accuracy()},
          {"entire_delta", entire_delta},
          {"position_delta", position_delta}};
}

nlohmann::json AblationReport::to_json() const {
  nlohmann::json e = nlohmann::json::array();
  for (const auto& x : entries) e.push_back(x.to_json());
  nlohmann::json base_pos = nlohmann::json::array();
  for (int k = 1; k <= kMaxProbePosition; ++k) base_pos.push_back(baseline.position_accuracy(k));
  return {{"baseline_entire_accuracy", baseline.entire_accuracy()},
          {"baseline_position_accuracy", base_pos},
          {"entries", e}};
}

std::string AblationReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "key,n,ablated_count,flagged_small_set,entire_delta";
  for (int k = 1; k <= kMaxProbePosition; ++k) out << ",delta_N" << k;
  out << '\n';
  for (const auto& e : entries) {
    out << e.key << ',' << e.n << ',' << e.ablated.size() << ',' << (e.flagged_small_set ? 1 : 0) << ','
        << e.entire_delta;
    for (double d : e.position_delta) out << ',' << d;
    out << '\n';
  }
  return out.str();
}

}  // namespace charprobe
