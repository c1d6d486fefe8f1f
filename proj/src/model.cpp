#include "charprobe/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "charprobe/detail/engine.hpp"
#include "charprobe/errors.hpp"

namespace charprobe {

using detail::ForwardState;

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw InputError(std::string(name) + " must be >= 1");
  };
  positive(num_layers, "num_layers");
  positive(num_heads, "num_heads");
  positive(model_dim, "model_dim");
  positive(ffn_dim, "ffn_dim");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (model_dim % num_heads != 0) throw InputError("model_dim must be divisible by num_heads");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"num_layers", num_layers}, {"num_heads", num_heads}, {"model_dim", model_dim},
          {"ffn_dim", ffn_dim},       {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len},
          {"rng_seed", rng_seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_layers = j.at("num_layers").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  c.validate();
  return c;
}

template <typename T>
Weights<T> Weights<T>::zeros(const ModelConfig& cfg) {
  const int d = cfg.model_dim;
  const int f = cfg.ffn_dim;
  Weights<T> w;
  w.token_embeddings.setZero(cfg.vocab_size, d);
  w.position_embeddings.setZero(cfg.max_seq_len, d);
  w.layers.resize(static_cast<std::size_t>(cfg.num_layers));
  for (auto& L : w.layers) {
    for (RowVec<T>* v : {&L.ln1_gain, &L.ln1_bias, &L.ln2_gain, &L.ln2_bias, &L.b_out}) v->setZero(d);
    for (MatR<T>* m : {&L.wq, &L.wk, &L.wv, &L.wo}) m->setZero(d, d);
    L.w_in.setZero(d, f);
    L.b_in.setZero(f);
    L.w_out.setZero(f, d);
  }
  w.lnf_gain.setZero(d);
  w.lnf_bias.setZero(d);
  w.unembed.setZero(d, cfg.vocab_size);
  return w;
}

template <typename T>
template <typename U>
Weights<U> Weights<T>::cast() const {
  Weights<U> out;
  out.token_embeddings = token_embeddings.template cast<U>();
  out.position_embeddings = position_embeddings.template cast<U>();
  out.layers.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& s = layers[l];
    auto& t = out.layers[l];
    t.ln1_gain = s.ln1_gain.template cast<U>();
    t.ln1_bias = s.ln1_bias.template cast<U>();
    t.wq = s.wq.template cast<U>();
    t.wk = s.wk.template cast<U>();
    t.wv = s.wv.template cast<U>();
    t.wo = s.wo.template cast<U>();
    t.ln2_gain = s.ln2_gain.template cast<U>();
    t.ln2_bias = s.ln2_bias.template cast<U>();
    t.w_in = s.w_in.template cast<U>();
    t.b_in = s.b_in.template cast<U>();
    t.w_out = s.w_out.template cast<U>();
    t.b_out = s.b_out.template cast<U>();
  }
  out.lnf_gain = lnf_gain.template cast<U>();
  out.lnf_bias = lnf_bias.template cast<U>();
  out.unembed = unembed.template cast<U>();
  return out;
}

template struct Weights<float>;
template struct Weights<double>;
template Weights<double> Weights<float>::cast<double>() const;
template Weights<float> Weights<double>::cast<float>() const;

ModelParams init_params(const ModelConfig& config, const InitOptions& options) {
  config.validate();
  ModelParams p{config, Weights<float>::zeros(config), 0};
  std::mt19937_64 rng(config.rng_seed);
  std::normal_distribution<double> normal(0.0, options.stddev);
  const double residual_scale = 1.0 / std::sqrt(2.0 * config.num_layers);
  p.weights.for_each([&](const std::string& name, auto& t) {
    const bool gain = name.ends_with("_gain");
    const bool bias = name.ends_with("_bias") || name.ends_with(".b_in") || name.ends_with(".b_out");
    if (gain) {
      t.setOnes();
      return;
    }
    if (bias) return;
    if (name == "unembed" && options.zero_output_projection) return;
    const double s = (name.ends_with(".wo") || name.ends_with(".w_out")) ? residual_scale : 1.0;
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<float>(s * normal(rng));
  });
  return p;
}

bool bit_equal(const ModelParams& a, const ModelParams& b) {
  if (!(a.config == b.config) || a.version != b.version) return false;
  std::vector<std::pair<const float*, Eigen::Index>> lhs;
  a.weights.for_each([&](const std::string&, const auto& t) { lhs.emplace_back(t.data(), t.size()); });
  std::size_t k = 0;
  bool same = true;
  b.weights.for_each([&](const std::string&, const auto& t) {
    if (!same) return;
    if (k >= lhs.size() || lhs[k].second != t.size() ||
        std::memcmp(lhs[k].first, t.data(), sizeof(float) * static_cast<std::size_t>(t.size())) != 0) {
      same = false;
    }
    ++k;
  });
  return same && k == lhs.size();
}

Model::Model(const ModelParams& params) : config_(params.config), weights_(params.weights.cast<double>()) {
  config_.validate();
}

void Model::check_tokens(std::span<const int> ids) const {
  if (ids.empty()) throw InputError("empty token sequence");
  if (static_cast<int>(ids.size()) > config_.max_seq_len) {
    throw CapacityError("sequence of " + std::to_string(ids.size()) + " tokens exceeds max_seq_len " +
                        std::to_string(config_.max_seq_len));
  }
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab_size) throw InputError("token id out of range: " + std::to_string(id));
  }
}

namespace {

void check_neuron(const ModelConfig& cfg, const NeuronId& n) {
  if (n.layer < 0 || n.layer >= cfg.num_layers || n.index < 0 || n.index >= cfg.ffn_dim) {
    throw InputError("invalid neuron (" + std::to_string(n.layer) + ", " + std::to_string(n.index) + ")");
  }
}

void check_target(const ModelConfig& cfg, int target) {
  if (target < 0 || target >= cfg.vocab_size) throw InputError("target id out of range: " + std::to_string(target));
}

struct ApplyOverrides {
  std::span<const ActivationOverride> overrides;
  void operator()(int layer, int first, int count, MatR<double>& act) const {
    for (const auto& o : overrides) {
      if (o.neuron.layer == layer && o.position >= first && o.position < first + count) {
        act(o.position, o.neuron.index) = o.value;
      }
    }
  }
};

ForwardTrace make_trace(const ModelConfig& cfg, const ForwardState<double>& st) {
  const auto T = static_cast<std::size_t>(st.length);
  const auto L = static_cast<std::size_t>(cfg.num_layers);
  const auto H = static_cast<std::size_t>(cfg.num_heads);
  const auto d = static_cast<std::size_t>(cfg.model_dim);
  const auto f = static_cast<std::size_t>(cfg.ffn_dim);
  ForwardTrace tr{Tensor({L + 1, T, d}), Tensor({L, H, T, T}), Tensor({L, T, f})};
  auto copy_rows = [&](const MatR<double>& m, std::size_t cols, float* out) {
    for (std::size_t i = 0; i < T; ++i) {
      for (std::size_t j = 0; j < cols; ++j) {
        *out++ = static_cast<float>(m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      }
    }
  };
  copy_rows(st.h0, d, tr.hidden_states.data.data());
  for (std::size_t l = 0; l < L; ++l) {
    const auto& S = st.layers[l];
    copy_rows(S.x_out, d, tr.hidden_states.data.data() + (l + 1) * T * d);
    copy_rows(S.act, f, tr.ffn_activations.data.data() + l * T * f);
    for (std::size_t h = 0; h < H; ++h) copy_rows(S.probs[h], T, tr.attention.data.data() + (l * H + h) * T * T);
  }
  return tr;
}

ColVec<double> softmax(const RowVec<double>& logits) {
  const double mx = logits.maxCoeff();
  ColVec<double> p = (logits.array() - mx).exp().transpose();
  return p / p.sum();
}

}  // namespace

ForwardOutput forward(const Model& model, std::span<const int> ids, bool capture) {
  model.check_tokens(ids);
  ForwardState<double> st(model.config(), static_cast<int>(ids.size()));
  detail::run_forward(model.weights(), model.config(), st, ids);
  ForwardOutput out{st.logits, std::nullopt};
  if (capture) out.trace = make_trace(model.config(), st);
  return out;
}

MatR<double> forward_with_overrides(const Model& model, std::span<const int> ids,
                                    std::span<const ActivationOverride> overrides) {
  model.check_tokens(ids);
  for (const auto& o : overrides) {
    check_neuron(model.config(), o.neuron);
    if (o.position < 0 || o.position >= static_cast<int>(ids.size())) {
      throw InputError("override position " + std::to_string(o.position) + " outside the input");
    }
  }
  ForwardState<double> st(model.config(), static_cast<int>(ids.size()));
  detail::run_forward(model.weights(), model.config(), st, ids, ApplyOverrides{overrides});
  return st.logits;
}

ColVec<double> next_distribution(const Model& model, std::span<const int> ids) {
  const auto logits = forward(model, ids, false).logits;
  return softmax(logits.row(logits.rows() - 1));
}

double prob_of_next(const Model& model, std::span<const int> ids, int target_id) {
  check_target(model.config(), target_id);
  return next_distribution(model, ids)(target_id);
}

ColVec<double> grad_wrt_ffn_activations(const Model& model, std::span<const int> ids, int target_id, int layer,
                                        int position) {
  check_target(model.config(), target_id);
  if (layer < 0 || layer >= model.config().num_layers) throw InputError("layer out of range");
  if (position < 0 || position >= static_cast<int>(ids.size())) {
    throw InputError("position " + std::to_string(position) + " is not an input position");
  }
  TracedPass pass(model, ids);
  MatR<double> rows = pass.activations(layer, position);
  return pass.evaluate_site(layer, position, rows, target_id).gradient.row(0).transpose();
}

// ---------------------------------------------------------------------------
// TracedPass

TracedPass::TracedPass(const Model& model, std::span<const int> ids) : model_(&model) {
  model.check_tokens(ids);
  state_ = std::make_unique<ForwardState<double>>(model.config(), static_cast<int>(ids.size()));
  detail::run_forward(model.weights(), model.config(), *state_, ids);
}

TracedPass::~TracedPass() = default;
TracedPass::TracedPass(TracedPass&&) noexcept = default;
TracedPass& TracedPass::operator=(TracedPass&&) noexcept = default;

int TracedPass::length() const noexcept { return state_->length; }

RowVec<double> TracedPass::activations(int layer, int position) const {
  return state_->layers.at(static_cast<std::size_t>(layer)).act.row(position);
}

ForwardTrace TracedPass::trace() const { return make_trace(model_->config(), *state_); }

namespace {

// Per-layer buffers for the perturbed rows of a batch of independent worlds.
// World b owns rows [b*R, (b+1)*R), standing for sequence positions
// [p, p+R). Positions before p are shared with the traced pass.
struct TailLayer {
  MatR<double> x_in, ln1_hat, a, q, k, v, ctx, x_mid, ln2_hat, m, pre, act;
  ColVec<double> ln1_rstd, ln2_rstd;
  // Per head: probabilities over the shared prefix [rows x p] and over the
  // world's own rows [rows x R] (row r of world b covers keys b*R..b*R+R).
  std::vector<MatR<double>> pl, pr;
};

}  // namespace

SiteEvaluation TracedPass::evaluate_site(int layer, int position, const MatR<double>& activation_rows,
                                         int target_id) const {
  const auto& cfg = model_->config();
  const auto& w = model_->weights();
  const auto& st = *state_;
  check_target(cfg, target_id);
  if (layer < 0 || layer >= cfg.num_layers) throw InputError("layer out of range");
  if (position < 0 || position >= st.length) throw InputError("position is not an input position");
  if (activation_rows.cols() != cfg.ffn_dim) throw InputError("activation rows must have ffn_dim columns");

  const int B = static_cast<int>(activation_rows.rows());
  const int p = position;
  const int R = st.length - p;
  // Bound the batch so long tails do not blow up memory.
  const int chunk = std::max(1, 16384 / R);
  if (B > chunk) {
    SiteEvaluation out{ColVec<double>(B), MatR<double>(B, cfg.ffn_dim)};
    for (int b0 = 0; b0 < B; b0 += chunk) {
      const int nb = std::min(chunk, B - b0);
      auto part = evaluate_site(layer, position, activation_rows.middleRows(b0, nb), target_id);
      out.probability.segment(b0, nb) = part.probability;
      out.gradient.middleRows(b0, nb) = part.gradient;
    }
    return out;
  }
  const int d = cfg.model_dim;
  const int H = cfg.num_heads;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& site = st.layers[static_cast<std::size_t>(layer)];
  const auto& site_w = w.layers[static_cast<std::size_t>(layer)];

  // Residual stream after the perturbed FFN, rows p.. of every world.
  MatR<double> x(static_cast<Eigen::Index>(B) * R, d);
  {
    MatR<double> down = activation_rows * site_w.w_out;
    for (int b = 0; b < B; ++b) {
      x.middleRows(static_cast<Eigen::Index>(b) * R, R) = site.x_out.middleRows(p, R);
      x.row(static_cast<Eigen::Index>(b) * R) = site.x_mid.row(p) + down.row(b) + site_w.b_out;
    }
  }
  const Eigen::Index rows = x.rows();

  std::vector<TailLayer> tail(static_cast<std::size_t>(cfg.num_layers - layer - 1));
  for (int j = layer + 1; j < cfg.num_layers; ++j) {
    auto& T = tail[static_cast<std::size_t>(j - layer - 1)];
    const auto& W = w.layers[static_cast<std::size_t>(j)];
    const auto& base = st.layers[static_cast<std::size_t>(j)];
    T.x_in = x;
    T.ln1_hat.resize(rows, d);
    T.a.resize(rows, d);
    T.ln1_rstd.resize(rows);
    detail::layer_norm_rows(T.x_in, 0, static_cast<int>(rows), W.ln1_gain, W.ln1_bias, T.ln1_hat, T.a, T.ln1_rstd);
    T.q.noalias() = T.a * W.wq;
    T.k.noalias() = T.a * W.wk;
    T.v.noalias() = T.a * W.wv;
    T.ctx.setZero(rows, d);
    T.pl.resize(static_cast<std::size_t>(H));
    T.pr.resize(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) {
      auto& PL = T.pl[static_cast<std::size_t>(h)];
      auto& PR = T.pr[static_cast<std::size_t>(h)];
      const auto qh = T.q.middleCols(h * dh, dh);
      const auto kh = T.k.middleCols(h * dh, dh);
      PL.noalias() = qh * base.k.block(0, h * dh, p, dh).transpose();
      PL *= scale;
      PR.setZero(rows, R);
      for (Eigen::Index r = 0; r < rows; ++r) {
        const Eigen::Index r0 = r - r % R;
        const int i = static_cast<int>(r % R);
        double mx = p > 0 ? PL.row(r).maxCoeff() : -std::numeric_limits<double>::infinity();
        for (int c = 0; c <= i; ++c) {
          PR(r, c) = scale * qh.row(r).dot(kh.row(r0 + c));
          mx = std::max(mx, PR(r, c));
        }
        double sum = 0.0;
        for (int c = 0; c < p; ++c) sum += (PL(r, c) = std::exp(PL(r, c) - mx));
        for (int c = 0; c <= i; ++c) sum += (PR(r, c) = std::exp(PR(r, c) - mx));
        PL.row(r) /= sum;
        for (int c = 0; c <= i; ++c) PR(r, c) /= sum;
      }
      auto ch = T.ctx.middleCols(h * dh, dh);
      ch.noalias() = PL * base.v.block(0, h * dh, p, dh);
      const auto vh = T.v.middleCols(h * dh, dh);
      for (Eigen::Index r = 0; r < rows; ++r) {
        const Eigen::Index r0 = r - r % R;
        for (Eigen::Index c = 0; c <= r % R; ++c) ch.row(r) += PR(r, c) * vh.row(r0 + c);
      }
    }
    T.x_mid = T.x_in;
    T.x_mid.noalias() += T.ctx * W.wo;
    T.ln2_hat.resize(rows, d);
    T.m.resize(rows, d);
    T.ln2_rstd.resize(rows);
    detail::layer_norm_rows(T.x_mid, 0, static_cast<int>(rows), W.ln2_gain, W.ln2_bias, T.ln2_hat, T.m, T.ln2_rstd);
    T.pre.noalias() = T.m * W.w_in;
    T.pre.rowwise() += W.b_in;
    T.act = T.pre.unaryExpr([](double v) { return detail::gelu(v); });
    x = T.x_mid;
    x.noalias() += T.act * W.w_out;
    x.rowwise() += W.b_out;
  }

  // Final position of every world.
  MatR<double> last(B, d);
  for (int b = 0; b < B; ++b) last.row(b) = x.row(static_cast<Eigen::Index>(b) * R + R - 1);
  MatR<double> lnf_hat(B, d), lnf_out(B, d);
  ColVec<double> lnf_rstd(B);
  detail::layer_norm_rows(last, 0, B, w.lnf_gain, w.lnf_bias, lnf_hat, lnf_out, lnf_rstd);
  MatR<double> logits = lnf_out * w.unembed;

  SiteEvaluation out;
  out.probability.resize(B);
  MatR<double> dlogits(B, cfg.vocab_size);
  for (int b = 0; b < B; ++b) {
    const ColVec<double> prob = softmax(logits.row(b));
    const double pc = prob(target_id);
    out.probability(b) = pc;
    // d p_c / d z_i = p_c (delta_ci - p_i)
    dlogits.row(b) = -pc * prob.transpose();
    dlogits(b, target_id) += pc;
  }
  MatR<double> dlast = detail::layer_norm_backward<double>(dlogits * w.unembed.transpose(), lnf_hat, lnf_rstd, 0,
                                                           w.lnf_gain, nullptr, nullptr);
  MatR<double> dx = MatR<double>::Zero(rows, d);
  for (int b = 0; b < B; ++b) dx.row(static_cast<Eigen::Index>(b) * R + R - 1) = dlast.row(b);

  for (int j = cfg.num_layers - 1; j > layer; --j) {
    const auto& T = tail[static_cast<std::size_t>(j - layer - 1)];
    const auto& W = w.layers[static_cast<std::size_t>(j)];
    const auto& base = st.layers[static_cast<std::size_t>(j)];
    MatR<double> dpre = dx * W.w_out.transpose();
    dpre.array() *= T.pre.unaryExpr([](double v) { return detail::gelu_grad(v); }).array();
    MatR<double> dmid =
        dx + detail::layer_norm_backward<double>(dpre * W.w_in.transpose(), T.ln2_hat, T.ln2_rstd, 0, W.ln2_gain,
                                                 nullptr, nullptr);
    MatR<double> dctx = dmid * W.wo.transpose();
    MatR<double> dq(rows, d), dk = MatR<double>::Zero(rows, d), dv = MatR<double>::Zero(rows, d);
    for (int h = 0; h < H; ++h) {
      const auto& PL = T.pl[static_cast<std::size_t>(h)];
      const auto& PR = T.pr[static_cast<std::size_t>(h)];
      const auto dch = dctx.middleCols(h * dh, dh);
      const auto qh = T.q.middleCols(h * dh, dh);
      const auto kh = T.k.middleCols(h * dh, dh);
      const auto vh = T.v.middleCols(h * dh, dh);
      MatR<double> dSL = dch * base.v.block(0, h * dh, p, dh).transpose();
      MatR<double> dSR = MatR<double>::Zero(rows, R);
      for (Eigen::Index r = 0; r < rows; ++r) {
        const Eigen::Index r0 = r - r % R;
        const Eigen::Index i = r % R;
        double rowdot = PL.row(r).dot(dSL.row(r));
        for (Eigen::Index c = 0; c <= i; ++c) {
          dSR(r, c) = dch.row(r).dot(vh.row(r0 + c));
          rowdot += PR(r, c) * dSR(r, c);
        }
        dSL.row(r) = (PL.row(r).array() * (dSL.row(r).array() - rowdot) * scale).matrix();
        for (Eigen::Index c = 0; c <= i; ++c) dSR(r, c) = PR(r, c) * (dSR(r, c) - rowdot) * scale;
      }
      auto dqh = dq.middleCols(h * dh, dh);
      dqh.noalias() = dSL * base.k.block(0, h * dh, p, dh);
      auto dkh = dk.middleCols(h * dh, dh);
      auto dvh = dv.middleCols(h * dh, dh);
      for (Eigen::Index r = 0; r < rows; ++r) {
        const Eigen::Index r0 = r - r % R;
        for (Eigen::Index c = 0; c <= r % R; ++c) {
          dqh.row(r) += dSR(r, c) * kh.row(r0 + c);
          dkh.row(r0 + c) += dSR(r, c) * qh.row(r);
          dvh.row(r0 + c) += PR(r, c) * dch.row(r);
        }
      }
    }
    MatR<double> da = dq * W.wq.transpose();
    da.noalias() += dk * W.wk.transpose();
    da.noalias() += dv * W.wv.transpose();
    dx = dmid + detail::layer_norm_backward<double>(da, T.ln1_hat, T.ln1_rstd, 0, W.ln1_gain, nullptr, nullptr);
  }

  MatR<double> dsite(B, d);
  for (int b = 0; b < B; ++b) dsite.row(b) = dx.row(static_cast<Eigen::Index>(b) * R);
  out.gradient = dsite * site_w.w_out.transpose();
  return out;
}

// ---------------------------------------------------------------------------
// DecodeSession

DecodeSession::DecodeSession(const Model& model, std::vector<ActivationOverride> overrides)
    : model_(&model), overrides_(std::move(overrides)) {
  for (const auto& o : overrides_) {
    check_neuron(model.config(), o.neuron);
    if (o.position < 0 || o.position >= model.config().max_seq_len) {
      throw InputError("override position outside max_seq_len");
    }
  }
  state_ = std::make_unique<ForwardState<double>>(model.config(), model.config().max_seq_len);
}

DecodeSession::~DecodeSession() = default;
DecodeSession::DecodeSession(DecodeSession&&) noexcept = default;

RowVec<double> DecodeSession::append(std::span<const int> ids) {
  if (ids.empty()) throw InputError("append of an empty token span");
  for (int id : ids) {
    if (id < 0 || id >= model_->config().vocab_size) throw InputError("token id out of range: " + std::to_string(id));
  }
  detail::run_forward(model_->weights(), model_->config(), *state_, ids, ApplyOverrides{overrides_});
  return state_->logits.row(state_->length - 1);
}

int DecodeSession::length() const noexcept { return state_->length; }

const std::vector<int>& DecodeSession::tokens() const noexcept { return state_->tokens; }

double DecodeSession::activation(int layer, int position, int j) const {
  if (position < 0 || position >= state_->length) throw InputError("position not yet computed");
  return state_->layers.at(static_cast<std::size_t>(layer)).act(position, j);
}

}  // namespace charprobe
