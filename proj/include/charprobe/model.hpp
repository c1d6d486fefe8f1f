#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "charprobe/tensor.hpp"

namespace charprobe {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ModelConfig {
  int num_layers = 4;
  int num_heads = 4;
  int model_dim = 128;
  int ffn_dim = 256;
  int vocab_size = 0;
  int max_seq_len = 96;
  std::uint64_t rng_seed = 0;

  int head_dim() const { return model_dim / num_heads; }
  // Throws InputError when an invariant does not hold.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct LayerWeights {
  RowVec<T> ln1_gain, ln1_bias;
  MatR<T> wq, wk, wv, wo;  // [d x d], applied as x * W
  RowVec<T> ln2_gain, ln2_bias;
  MatR<T> w_in;  // [d x ffn]
  RowVec<T> b_in;
  MatR<T> w_out;  // [ffn x d], row j is neuron j's down-projection
  RowVec<T> b_out;
};

template <typename T>
struct Weights {
  MatR<T> token_embeddings;     // [vocab x d]
  MatR<T> position_embeddings;  // [max_seq_len x d]
  std::vector<LayerWeights<T>> layers;
  RowVec<T> lnf_gain, lnf_bias;
  MatR<T> unembed;  // [d x vocab]

  static Weights zeros(const ModelConfig& cfg);

  // Visits every tensor in checkpoint order as fn(name, eigen_object).
  template <typename F>
  void for_each(F&& fn) {
    fn(std::string("token_embeddings"), token_embeddings);
    fn(std::string("position_embeddings"), position_embeddings);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& L = layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      fn(p + "ln1_gain", L.ln1_gain);
      fn(p + "ln1_bias", L.ln1_bias);
      fn(p + "wq", L.wq);
      fn(p + "wk", L.wk);
      fn(p + "wv", L.wv);
      fn(p + "wo", L.wo);
      fn(p + "ln2_gain", L.ln2_gain);
      fn(p + "ln2_bias", L.ln2_bias);
      fn(p + "w_in", L.w_in);
      fn(p + "b_in", L.b_in);
      fn(p + "w_out", L.w_out);
      fn(p + "b_out", L.b_out);
    }
    fn(std::string("lnf_gain"), lnf_gain);
    fn(std::string("lnf_bias"), lnf_bias);
    fn(std::string("unembed"), unembed);
  }
  template <typename F>
  void for_each(F&& fn) const {
    const_cast<Weights*>(this)->for_each([&](const std::string& name, const auto& t) { fn(name, t); });
  }

  template <typename U>
  Weights<U> cast() const;
};

// Frozen snapshot of trained parameters. Stored in float32, which is also the
// checkpoint precision.
struct ModelParams {
  ModelConfig config;
  Weights<float> weights;
  std::int64_t version = 0;
};

struct InitOptions {
  double stddev = 0.02;
  bool zero_output_projection = false;
};

ModelParams init_params(const ModelConfig& config, const InitOptions& options = {});

// Bitwise equality of every tensor, config and version.
bool bit_equal(const ModelParams& a, const ModelParams& b);

struct NeuronId {
  int layer = 0;
  int index = 0;
  friend auto operator<=>(const NeuronId&, const NeuronId&) = default;
};

struct ActivationOverride {
  int position = 0;
  NeuronId neuron;
  double value = 0.0;
};

// Captured intermediate tensors of one forward pass.
//   hidden_states   [num_layers+1, seq_len, model_dim]; index 0 = embedding output
//   attention       [num_layers, num_heads, seq_len, seq_len]; rows are queries
//   ffn_activations [num_layers, seq_len, ffn_dim]; post-activation values
struct ForwardTrace {
  Tensor hidden_states;
  Tensor attention;
  Tensor ffn_activations;
  friend bool operator==(const ForwardTrace&, const ForwardTrace&) = default;
};

struct ForwardOutput {
  MatR<double> logits;  // [seq_len x vocab]
  std::optional<ForwardTrace> trace;
};

namespace detail {
template <typename T>
struct ForwardState;
}

// Read-only analysis handle over a parameter snapshot. Holds a double
// precision copy of the weights; every call owns its own buffers, so one
// Model can be shared across threads.
class Model {
 public:
  explicit Model(const ModelParams& params);

  const ModelConfig& config() const noexcept { return config_; }
  const Weights<double>& weights() const noexcept { return weights_; }

  void check_tokens(std::span<const int> ids) const;

 private:
  ModelConfig config_;
  Weights<double> weights_;
};

ForwardOutput forward(const Model& model, std::span<const int> ids, bool capture);
MatR<double> forward_with_overrides(const Model& model, std::span<const int> ids,
                                    std::span<const ActivationOverride> overrides);
// Softmax of the final-position logits.
ColVec<double> next_distribution(const Model& model, std::span<const int> ids);
double prob_of_next(const Model& model, std::span<const int> ids, int target_id);

// d prob_of_next(target) / d activation(layer, j) at `position`, for all j.
// Exact reverse mode through every computation downstream of the activation.
ColVec<double> grad_wrt_ffn_activations(const Model& model, std::span<const int> ids, int target_id, int layer,
                                        int position);

// Batched evaluation at a fixed (layer, position): each row of `activation_rows`
// replaces the whole activation vector at that site in one independent copy of
// the pass. Returns the target probability and the gradient wrt that site for
// every row. Used by integrated-gradient attribution.
struct SiteEvaluation {
  ColVec<double> probability;  // [rows]
  MatR<double> gradient;       // [rows x ffn_dim]
};

class TracedPass {
 public:
  TracedPass(const Model& model, std::span<const int> ids);
  ~TracedPass();
  TracedPass(TracedPass&&) noexcept;
  TracedPass& operator=(TracedPass&&) noexcept;

  int length() const noexcept;
  // Activation vector at (layer, position) from the unperturbed pass.
  RowVec<double> activations(int layer, int position) const;
  ForwardTrace trace() const;
  SiteEvaluation evaluate_site(int layer, int position, const MatR<double>& activation_rows, int target_id) const;

 private:
  const Model* model_;
  std::unique_ptr<detail::ForwardState<double>> state_;
};

// Incremental decoding over a growing sequence. Overrides apply whenever a
// listed position is computed.
class DecodeSession {
 public:
  explicit DecodeSession(const Model& model, std::vector<ActivationOverride> overrides = {});
  ~DecodeSession();
  DecodeSession(DecodeSession&&) noexcept;

  // Appends tokens and returns the logits row of the last appended position.
  RowVec<double> append(std::span<const int> ids);
  int length() const noexcept;
  const std::vector<int>& tokens() const noexcept;
  // Post-activation FFN values computed so far, [layer][position][j].
  double activation(int layer, int position, int j) const;

 private:
  const Model* model_;
  std::vector<ActivationOverride> overrides_;
  std::unique_ptr<detail::ForwardState<double>> state_;
};

}  // namespace charprobe
