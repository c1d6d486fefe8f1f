#include "charprobe/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "charprobe/detail/engine.hpp"
#include "charprobe/detail/parallel.hpp"
#include "charprobe/errors.hpp"

namespace charprobe {

namespace {

std::vector<std::span<float>> flat_views(Weights<float>& w) {
  std::vector<std::span<float>> out;
  w.for_each([&](const std::string&, auto& t) { out.emplace_back(t.data(), static_cast<std::size_t>(t.size())); });
  return out;
}

// Line "word : spelled," as tokens. Returns the index (within the line) of
// the ':' token so supervision can start there.
std::vector<int> encode_line(const Tokenizer& tok, const std::string& word, Separator sep, int& colon_index) {
  const std::string text = word + (sep == Separator::kWhitespace ? " : " : " :") + spell_out(word, sep) + ",";
  auto ids = tok.encode(text, false);
  colon_index = static_cast<int>(std::find(ids.begin(), ids.end(), Tokenizer::kColon) - ids.begin());
  return ids;
}

}  // namespace

nlohmann::json TrainParams::to_json() const {
  return {{"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"max_steps", max_steps},
          {"seed", seed},
          {"warmup_steps", warmup_steps},
          {"min_lr_fraction", min_lr_fraction},
          {"grad_clip", grad_clip},
          {"canonical_fraction", canonical_fraction},
          {"slash_fraction", slash_fraction},
          {"max_pairs", max_pairs},
          {"heldout_token_ids", heldout_token_ids},
          {"shots", prompt.shots}};
}

TrainingDocument make_training_document(const SpellingDataset& corpus, const Tokenizer& tokenizer,
                                        const TrainParams& params, std::uint64_t doc_seed, int max_tokens) {
  std::mt19937_64 rng(doc_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Separator sep = unit(rng) < params.slash_fraction ? Separator::kSlash : Separator::kWhitespace;

  std::vector<std::string> lines;
  const bool canonical = unit(rng) < params.canonical_fraction;
  if (canonical) {
    std::vector<const TokenRecord*> eligible;
    for (const auto& r : corpus.records) {
      if (std::find(params.heldout_token_ids.begin(), params.heldout_token_ids.end(), r.token_id) ==
          params.heldout_token_ids.end()) {
        eligible.push_back(&r);
      }
    }
    if (!eligible.empty()) {
      lines = params.prompt.shots;
      std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
      lines.push_back(eligible[pick(rng)]->surface);
    }
  }
  if (lines.empty()) {
    std::vector<std::string> pool;
    pool.reserve(corpus.records.size() + params.prompt.shots.size());
    for (const auto& r : corpus.records) pool.push_back(r.surface);
    for (const auto& s : params.prompt.shots) pool.push_back(s);
    std::uniform_int_distribution<int> count(1, std::max(1, params.max_pairs));
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    const int k = count(rng);
    for (int i = 0; i < k; ++i) lines.push_back(pool[pick(rng)]);
  }

  std::vector<std::vector<int>> encoded;
  std::vector<int> colons;
  for (const auto& w : lines) {
    int colon = 0;
    encoded.push_back(encode_line(tokenizer, w, sep, colon));
    colons.push_back(colon);
  }
  // Drop leading lines until the document fits.
  if (max_tokens > 0) {
    auto length = [&] {
      std::size_t n = 1 + encoded.size() - 1;
      for (const auto& e : encoded) n += e.size();
      return static_cast<int>(n);
    };
    while (encoded.size() > 1 && length() > max_tokens) {
      encoded.erase(encoded.begin());
      colons.erase(colons.begin());
    }
  }
  TrainingDocument doc;
  doc.tokens.push_back(Tokenizer::kBos);
  for (std::size_t i = 0; i < encoded.size(); ++i) {
    if (i > 0) doc.tokens.push_back(Tokenizer::kNewline);
    const int base = static_cast<int>(doc.tokens.size());
    const auto& line = encoded[i];
    doc.tokens.insert(doc.tokens.end(), line.begin(), line.end());
    // Positions from ':' up to the last spelled token, which predicts ','.
    for (int p = base + colons[i]; p < base + static_cast<int>(line.size()) - 1; ++p) doc.supervised.push_back(p);
  }
  return doc;
}

Weights<float> document_gradient(const ModelParams& params, const TrainingDocument& doc, double* loss_sum) {
  const auto& cfg = params.config;
  const int n = static_cast<int>(doc.tokens.size());
  if (n > cfg.max_seq_len) throw CapacityError("training document longer than max_seq_len");
  detail::ForwardState<float> st(cfg, n);
  detail::run_forward(params.weights, cfg, st, doc.tokens);
  MatR<float> dlogits = MatR<float>::Zero(n, cfg.vocab_size);
  double loss = 0.0;
  for (int p : doc.supervised) {
    const int target = doc.tokens[static_cast<std::size_t>(p + 1)];
    auto row = st.logits.row(p);
    const float mx = row.maxCoeff();
    RowVec<float> e = (row.array() - mx).exp();
    const float z = e.sum();
    loss += -(static_cast<double>(row(target) - mx) - std::log(static_cast<double>(z)));
    dlogits.row(p) = e / z;
    dlogits(p, target) -= 1.0f;
  }
  Weights<float> grad = Weights<float>::zeros(cfg);
  detail::run_backward(params.weights, cfg, st, dlogits, grad);
  if (loss_sum) *loss_sum = loss;
  return grad;
}

double document_loss(const Model& model, const TrainingDocument& doc) {
  const auto logits = forward(model, doc.tokens, false).logits;
  double loss = 0.0;
  for (int p : doc.supervised) {
    const int target = doc.tokens[static_cast<std::size_t>(p + 1)];
    const auto row = logits.row(p);
    const double mx = row.maxCoeff();
    loss += -((row(target) - mx) - std::log((row.array() - mx).exp().sum()));
  }
  return loss / static_cast<double>(doc.supervised.size());
}

TrainResult train_toy_model(const SpellingDataset& corpus, const Tokenizer& tokenizer, const ModelConfig& config,
                            const TrainParams& params, const StepLogger& log) {
  if (corpus.records.empty()) throw InputError("training corpus is empty");
  config.validate();
  if (config.vocab_size != tokenizer.size()) {
    throw InputError("config vocab_size " + std::to_string(config.vocab_size) + " does not match tokenizer size " +
                     std::to_string(tokenizer.size()));
  }
  for (const auto& r : corpus.records) {
    if (!tokenizer.word_id(r.surface) || *tokenizer.word_id(r.surface) != r.token_id) {
      throw InputError("corpus token '" + r.surface + "' is not encoded by the tokenizer");
    }
  }
  if (params.batch_size < 1) throw InputError("batch_size must be >= 1");

  TrainResult result{init_params(config), {}};
  auto& model = result.params;
  Weights<float> m1 = Weights<float>::zeros(config);
  Weights<float> m2 = Weights<float>::zeros(config);
  auto theta = flat_views(model.weights);
  auto mom1 = flat_views(m1);
  auto mom2 = flat_views(m2);
  constexpr double beta1 = 0.9;
  constexpr double beta2 = 0.999;
  constexpr double eps = 1e-8;

  const auto batch = static_cast<std::size_t>(params.batch_size);
  std::vector<Weights<float>> grads(batch);
  std::vector<double> losses(batch);
  std::vector<std::size_t> counts(batch);

  for (int step = 0; step < params.max_steps; ++step) {
    detail::parallel_for(batch, params.jobs, [&](std::size_t b) {
      const auto doc_seed = detail::mix_seed(params.seed, static_cast<std::uint64_t>(step) * batch + b);
      const auto doc = make_training_document(corpus, tokenizer, params, doc_seed, config.max_seq_len);
      grads[b] = document_gradient(model, doc, &losses[b]);
      counts[b] = doc.supervised.size();
    });
    std::size_t total = 0;
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      total += counts[b];
      loss_sum += losses[b];
    }
    const double loss = loss_sum / static_cast<double>(total);
    if (!std::isfinite(loss)) throw TrainingError("training loss is not finite", step);

    auto g = flat_views(grads[0]);
    for (std::size_t b = 1; b < batch; ++b) {
      auto gb = flat_views(grads[b]);
      for (std::size_t t = 0; t < g.size(); ++t) {
        for (std::size_t i = 0; i < g[t].size(); ++i) g[t][i] += gb[t][i];
      }
    }
    double norm2 = 0.0;
    const float inv_total = 1.0f / static_cast<float>(total);
    for (auto& gt : g) {
      for (auto& v : gt) {
        v *= inv_total;
        norm2 += static_cast<double>(v) * v;
      }
    }
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw TrainingError("gradient norm is not finite", step);
    const double clip = (params.grad_clip > 0 && norm > params.grad_clip) ? params.grad_clip / norm : 1.0;

    double lr = params.learning_rate;
    if (step < params.warmup_steps) {
      lr *= static_cast<double>(step + 1) / params.warmup_steps;
    } else {
      const double span = std::max(1, params.max_steps - params.warmup_steps);
      const double progress = static_cast<double>(step - params.warmup_steps) / span;
      const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
      lr *= params.min_lr_fraction + (1.0 - params.min_lr_fraction) * cosine;
    }
    const double bc1 = 1.0 - std::pow(beta1, step + 1);
    const double bc2 = 1.0 - std::pow(beta2, step + 1);
    for (std::size_t t = 0; t < theta.size(); ++t) {
      for (std::size_t i = 0; i < theta[t].size(); ++i) {
        const double gi = clip * g[t][i];
        const double a = beta1 * mom1[t][i] + (1.0 - beta1) * gi;
        const double v = beta2 * mom2[t][i] + (1.0 - beta2) * gi * gi;
        mom1[t][i] = static_cast<float>(a);
        mom2[t][i] = static_cast<float>(v);
        theta[t][i] -= static_cast<float>(lr * (a / bc1) / (std::sqrt(v / bc2) + eps));
      }
    }
    result.loss_history.push_back(loss);
    if (log) log(step, loss);
  }
  model.version = params.max_steps;
  return result;
}

}  // namespace charprobe
