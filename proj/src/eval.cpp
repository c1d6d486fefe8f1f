#include "charprobe/eval.hpp"

#include <algorithm>
#include <cctype>
#include <functional>
#include <sstream>

#include "charprobe/detail/parallel.hpp"
#include "charprobe/errors.hpp"

namespace charprobe {

namespace {

int argmax_lowest(const RowVec<double>& row) {
  int best = 0;
  for (int i = 1; i < row.size(); ++i) {
    if (row(i) > row(best)) best = i;
  }
  return best;
}

std::vector<int> decode_in(DecodeSession& session, const Model& model, std::span<const int> prompt_ids,
                           const StopSpec& stop) {
  model.check_tokens(prompt_ids);
  std::vector<int> out;
  if (stop.max_steps <= 0) return out;
  RowVec<double> logits = session.append(prompt_ids);
  const int cap = model.config().max_seq_len;
  for (int step = 0; step < stop.max_steps; ++step) {
    const int next = argmax_lowest(logits);
    out.push_back(next);
    if (std::find(stop.terminators.begin(), stop.terminators.end(), next) != stop.terminators.end()) break;
    if (step + 1 == stop.max_steps || session.length() >= cap) break;
    logits = session.append(std::span<const int>(&next, 1));
  }
  return out;
}

std::string normalize(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

// Generated text with a trailing terminator removed.
std::string prediction_text(const Tokenizer& tok, std::vector<int> ids, const StopSpec& stop) {
  if (!ids.empty() &&
      std::find(stop.terminators.begin(), stop.terminators.end(), ids.back()) != stop.terminators.end()) {
    ids.pop_back();
  }
  return tok.decode(ids);
}

nlohmann::json fraction_json(const Fraction& f) {
  return {{"correct", f.correct}, {"total", f.total}, {"accuracy", f.value()}};
}

std::vector<ActivationOverride> overrides_for(std::span<const NeuronId> neurons, int seq_len,
                                              const std::function<double(const NeuronId&, int)>& value) {
  std::vector<ActivationOverride> out;
  out.reserve(neurons.size() * static_cast<std::size_t>(seq_len));
  for (int p = 0; p < seq_len; ++p) {
    for (const auto& n : neurons) out.push_back({p, n, value(n, p)});
  }
  return out;
}

}  // namespace

std::vector<int> greedy_decode(const Model& model, std::span<const int> prompt_ids, const StopSpec& stop,
                               std::vector<ActivationOverride> overrides) {
  DecodeSession session(model, std::move(overrides));
  return decode_in(session, model, prompt_ids, stop);
}

std::string generate_text(const Model& model, const Tokenizer& tokenizer, std::string_view prompt,
                          const StopSpec& stop) {
  return prediction_text(tokenizer, greedy_decode(model, tokenizer.encode(prompt), stop), stop);
}

PredictionScore score_prediction(std::string_view predicted, std::string_view gold, Separator sep, int positions) {
  PredictionScore s;
  const std::string p = normalize(predicted);
  const std::string g = normalize(gold);
  s.entire = p == g;
  const auto pp = split_spelling(p, sep);
  const auto gp = split_spelling(g, sep);
  s.per_position.resize(static_cast<std::size_t>(positions));
  for (std::size_t n = 0; n < s.per_position.size(); ++n) {
    s.per_position[n] = n < pp.size() && n < gp.size() && pp[n].size() == 1 && pp[n] == gp[n];
  }
  return s;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json pos = nlohmann::json::array();
  for (const auto& f : per_position) pos.push_back(fraction_json(f));
  nlohmann::json by_len = nlohmann::json::object();
  for (const auto& [len, f] : per_length) by_len[std::to_string(len)] = fraction_json(f);
  return {{"entire", fraction_json(entire)},
          {"entire_accuracy", entire.value()},
          {"per_position", pos},
          {"per_length", by_len},
          {"correct_token_ids", correct_token_ids}};
}

std::string EvalReport::outcomes_csv() const {
  std::ostringstream out;
  out << "token_id,surface,predicted,entire";
  for (int n = 1; n <= kMaxProbePosition; ++n) out << ",pos" << n;
  out << '\n';
  for (const auto& o : outcomes) {
    std::string pred = o.predicted;
    std::replace(pred.begin(), pred.end(), '"', '\'');
    out << o.token_id << ',' << o.surface << ",\"" << pred << "\"," << (o.entire ? 1 : 0);
    for (bool b : o.per_position) out << ',' << (b ? 1 : 0);
    out << '\n';
  }
  return out.str();
}

EvalReport evaluate_spelling(const Model& model, const Tokenizer& tokenizer, const SpellingDataset& ds,
                             const PromptSpec& spec, const EvalOptions& options) {
  if (ds.records.empty()) throw InputError("evaluation dataset is empty");
  std::vector<const TokenRecord*> records;
  for (const auto& r : ds.records) records.push_back(&r);
  std::sort(records.begin(), records.end(),
            [](const TokenRecord* a, const TokenRecord* b) { return a->token_id < b->token_id; });

  const int cap = model.config().max_seq_len;
  std::vector<std::vector<int>> prompts;
  for (const auto* r : records) prompts.push_back(tokenizer.encode(build_prompt(r->surface, spec).text));

  std::vector<GeneratedSpelling> items(records.size());
  detail::parallel_for(records.size(), options.jobs, [&](std::size_t i) {
    const auto& r = *records[i];
    StopSpec stop;
    stop.max_steps = options.max_new_tokens > 0 ? options.max_new_tokens : 2 * r.length + 4;
    std::vector<int> ids;
    if (options.ablate.empty()) {
      ids = greedy_decode(model, prompts[i], stop);
    } else if (options.ablation_value == AblationValue::kZero) {
      ids = greedy_decode(model, prompts[i], stop,
                          overrides_for(options.ablate, cap, [](const NeuronId&, int) { return 0.0; }));
    } else {
      DecodeSession base(model);
      decode_in(base, model, prompts[i], stop);
      auto traced = overrides_for(options.ablate, base.length(),
                                  [&](const NeuronId& n, int p) { return base.activation(n.layer, p, n.index); });
      ids = greedy_decode(model, prompts[i], stop, std::move(traced));
    }
    items[i] = {r, prediction_text(tokenizer, ids, stop)};
  });
  return score_generations(items, spec.separator);
}

EvalReport score_generations(std::span<const GeneratedSpelling> items, Separator sep) {
  if (items.empty()) throw InputError("nothing to score");
  std::vector<const GeneratedSpelling*> order;
  for (const auto& it : items) order.push_back(&it);
  std::stable_sort(order.begin(), order.end(), [](const GeneratedSpelling* a, const GeneratedSpelling* b) {
    return a->token.token_id < b->token.token_id;
  });
  EvalReport rep;
  for (const auto* it : order) {
    const auto& r = it->token;
    TokenOutcome o;
    o.token_id = r.token_id;
    o.surface = r.surface;
    o.predicted = it->generated;
    const auto score = score_prediction(o.predicted, spell_out(r.surface, sep), sep);
    o.entire = score.entire;
    o.per_position = score.per_position;

    ++rep.entire.total;
    auto& len = rep.per_length[r.length];
    ++len.total;
    if (o.entire) {
      ++rep.entire.correct;
      ++len.correct;
      rep.correct_token_ids.push_back(r.token_id);
    }
    for (int n = 1; n <= kMaxProbePosition && n <= r.length; ++n) {
      auto& f = rep.per_position[static_cast<std::size_t>(n - 1)];
      ++f.total;
      if (o.per_position[static_cast<std::size_t>(n - 1)]) ++f.correct;
    }
    rep.outcomes.push_back(std::move(o));
  }
  return rep;
}

}  // namespace charprobe
