#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "charprobe/corpus.hpp"
#include "charprobe/model.hpp"
#include "charprobe/tokenizer.hpp"

namespace charprobe {

struct TrainParams {
  double learning_rate = 3e-3;
  int batch_size = 16;
  int max_steps = 2500;
  std::uint64_t seed = 0;
  int warmup_steps = 100;
  double min_lr_fraction = 0.1;
  double grad_clip = 1.0;
  // Share of documents that use the canonical few-shot prefix followed by a
  // target drawn outside `heldout_token_ids`. Other documents are runs of
  // randomly drawn "word : spelling," lines over the whole vocabulary.
  double canonical_fraction = 0.5;
  double slash_fraction = 0.0;
  int max_pairs = 4;
  std::vector<int> heldout_token_ids;
  PromptSpec prompt;  // shot words of canonical documents
  int jobs = 1;

  nlohmann::json to_json() const;
};

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_history;  // mean supervised cross-entropy per step
};

// One training document: token ids plus the positions whose next token is
// supervised (the spelled part of each line, through its trailing comma).
struct TrainingDocument {
  std::vector<int> tokens;
  std::vector<int> supervised;
};

TrainingDocument make_training_document(const SpellingDataset& corpus, const Tokenizer& tokenizer,
                                        const TrainParams& params, std::uint64_t doc_seed, int max_tokens = 0);

using StepLogger = std::function<void(int step, double loss)>;

// Trains from `init_params(config)`; the config's rng_seed drives the
// initialization and params.seed the data stream. Deterministic for fixed
// seeds regardless of params.jobs.
TrainResult train_toy_model(const SpellingDataset& corpus, const Tokenizer& tokenizer, const ModelConfig& config,
                            const TrainParams& params, const StepLogger& log = {});

// Mean next-token cross-entropy on the supervised positions of `doc`, in
// double precision. Exposed for gradient checks.
double document_loss(const Model& model, const TrainingDocument& doc);

// Float32 parameter gradient of the summed supervised cross-entropy of `doc`.
Weights<float> document_gradient(const ModelParams& params, const TrainingDocument& doc, double* loss_sum = nullptr);

}  // namespace charprobe
