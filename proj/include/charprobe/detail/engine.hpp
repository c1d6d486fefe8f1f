#pragma once

// Templated forward/backward kernels shared by training (float) and
// analysis (double). Not part of the public API.

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "charprobe/errors.hpp"
#include "charprobe/model.hpp"

namespace charprobe::detail {

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

// Row-wise layer norm over rows [row0, row0+n) of `x`. Stores the normalized
// rows in `hat`, the affine output in `out` and 1/std in `rstd`.
template <typename T>
void layer_norm_rows(const MatR<T>& x, int row0, int n, const RowVec<T>& gain, const RowVec<T>& bias, MatR<T>& hat,
                     MatR<T>& out, ColVec<T>& rstd) {
  const auto d = static_cast<T>(x.cols());
  for (int i = row0; i < row0 + n; ++i) {
    const T mean = x.row(i).sum() / d;
    const T var = (x.row(i).array() - mean).square().sum() / d;
    const T r = T(1) / std::sqrt(var + T(kLayerNormEps));
    rstd(i) = r;
    hat.row(i) = (x.row(i).array() - mean) * r;
    out.row(i) = hat.row(i).cwiseProduct(gain) + bias;
  }
}

// Gradient through y = hat * gain + bias for the given rows. Accumulates the
// parameter gradients when the pointers are non-null.
template <typename T>
MatR<T> layer_norm_backward(const MatR<T>& dy, const MatR<T>& hat, const ColVec<T>& rstd, int row0,
                            const RowVec<T>& gain, RowVec<T>* dgain, RowVec<T>* dbias) {
  const int n = static_cast<int>(dy.rows());
  const auto d = static_cast<T>(dy.cols());
  MatR<T> dx(n, dy.cols());
  for (int i = 0; i < n; ++i) {
    const auto h = hat.row(row0 + i);
    if (dgain) *dgain += dy.row(i).cwiseProduct(h);
    if (dbias) *dbias += dy.row(i);
    const RowVec<T> dh = dy.row(i).cwiseProduct(gain);
    const T mean_dh = dh.sum() / d;
    const T mean_dh_h = dh.cwiseProduct(h).sum() / d;
    dx.row(i) = rstd(row0 + i) * (dh.array() - mean_dh - h.array() * mean_dh_h).matrix();
  }
  return dx;
}

// Softmax over the first `valid` entries of each row of a score block;
// entries past `valid` become exactly zero.
template <typename T, typename Row>
void causal_softmax_row(Row&& row, int valid) {
  const T mx = row.head(valid).maxCoeff();
  T sum = 0;
  for (int j = 0; j < valid; ++j) {
    row(j) = std::exp(row(j) - mx);
    sum += row(j);
  }
  for (int j = 0; j < valid; ++j) row(j) /= sum;
  for (int j = valid; j < row.size(); ++j) row(j) = T(0);
}

template <typename T>
struct LayerState {
  MatR<T> x_in, ln1_hat, a, q, k, v, ctx, x_mid, ln2_hat, m, pre, act, x_out;
  ColVec<T> ln1_rstd, ln2_rstd;
  std::vector<MatR<T>> probs;  // per head [capacity x capacity], rows are queries
};

template <typename T>
struct ForwardState {
  int capacity = 0;
  int length = 0;
  std::vector<int> tokens;
  MatR<T> h0;
  std::vector<LayerState<T>> layers;
  MatR<T> lnf_hat, final_out, logits;
  ColVec<T> lnf_rstd;

  ForwardState(const ModelConfig& cfg, int cap) : capacity(cap) {
    const int d = cfg.model_dim;
    const int f = cfg.ffn_dim;
    tokens.reserve(static_cast<std::size_t>(cap));
    h0.setZero(cap, d);
    layers.resize(static_cast<std::size_t>(cfg.num_layers));
    for (auto& L : layers) {
      for (MatR<T>* m : {&L.x_in, &L.ln1_hat, &L.a, &L.q, &L.k, &L.v, &L.ctx, &L.x_mid, &L.ln2_hat, &L.m, &L.x_out}) {
        m->setZero(cap, d);
      }
      L.pre.setZero(cap, f);
      L.act.setZero(cap, f);
      L.ln1_rstd.setZero(cap);
      L.ln2_rstd.setZero(cap);
      L.probs.assign(static_cast<std::size_t>(cfg.num_heads), MatR<T>::Zero(cap, cap));
    }
    lnf_hat.setZero(cap, d);
    final_out.setZero(cap, d);
    lnf_rstd.setZero(cap);
    logits.setZero(cap, cfg.vocab_size);
  }
};

struct NoOverride {
  template <typename M>
  void operator()(int, int, int, M&) const {}
};

// Appends `ids` to the state, computing every new row. `apply_overrides`
// is invoked as (layer, first_row, row_count, act) after the activation
// function and before the down-projection.
template <typename T, typename OverrideFn = NoOverride>
void run_forward(const Weights<T>& w, const ModelConfig& cfg, ForwardState<T>& st, std::span<const int> ids,
                 OverrideFn&& apply_overrides = {}) {
  const int s = st.length;
  const int n = static_cast<int>(ids.size());
  if (s + n > st.capacity) {
    throw CapacityError("sequence of " + std::to_string(s + n) + " tokens exceeds capacity " +
                        std::to_string(st.capacity));
  }
  for (int i = 0; i < n; ++i) {
    st.tokens.push_back(ids[static_cast<std::size_t>(i)]);
    st.h0.row(s + i) = w.token_embeddings.row(ids[static_cast<std::size_t>(i)]) + w.position_embeddings.row(s + i);
  }
  const int dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const MatR<T>* x = &st.h0;
  for (int l = 0; l < cfg.num_layers; ++l) {
    auto& L = st.layers[static_cast<std::size_t>(l)];
    const auto& W = w.layers[static_cast<std::size_t>(l)];
    L.x_in.middleRows(s, n) = x->middleRows(s, n);
    layer_norm_rows(L.x_in, s, n, W.ln1_gain, W.ln1_bias, L.ln1_hat, L.a, L.ln1_rstd);
    L.q.middleRows(s, n).noalias() = L.a.middleRows(s, n) * W.wq;
    L.k.middleRows(s, n).noalias() = L.a.middleRows(s, n) * W.wk;
    L.v.middleRows(s, n).noalias() = L.a.middleRows(s, n) * W.wv;
    for (int h = 0; h < cfg.num_heads; ++h) {
      MatR<T> scores = (L.q.block(s, h * dh, n, dh) * L.k.block(0, h * dh, s + n, dh).transpose()) * scale;
      for (int i = 0; i < n; ++i) causal_softmax_row<T>(scores.row(i), s + i + 1);
      auto& P = L.probs[static_cast<std::size_t>(h)];
      P.block(s, 0, n, s + n) = scores;
      L.ctx.block(s, h * dh, n, dh).noalias() = scores * L.v.block(0, h * dh, s + n, dh);
    }
    L.x_mid.middleRows(s, n) = L.x_in.middleRows(s, n);
    L.x_mid.middleRows(s, n).noalias() += L.ctx.middleRows(s, n) * W.wo;
    layer_norm_rows(L.x_mid, s, n, W.ln2_gain, W.ln2_bias, L.ln2_hat, L.m, L.ln2_rstd);
    L.pre.middleRows(s, n).noalias() = L.m.middleRows(s, n) * W.w_in;
    L.pre.middleRows(s, n).rowwise() += W.b_in;
    L.act.middleRows(s, n) = L.pre.middleRows(s, n).unaryExpr([](T v) { return gelu(v); });
    apply_overrides(l, s, n, L.act);
    L.x_out.middleRows(s, n) = L.x_mid.middleRows(s, n);
    L.x_out.middleRows(s, n).noalias() += L.act.middleRows(s, n) * W.w_out;
    L.x_out.middleRows(s, n).rowwise() += W.b_out;
    x = &L.x_out;
  }
  layer_norm_rows(*x, s, n, w.lnf_gain, w.lnf_bias, st.lnf_hat, st.final_out, st.lnf_rstd);
  st.logits.middleRows(s, n).noalias() = st.final_out.middleRows(s, n) * w.unembed;
  st.length += n;
}

// Reverse pass over a complete state (rows [0, length)), accumulating
// parameter gradients of a loss whose logits gradient is `dlogits`.
template <typename T>
void run_backward(const Weights<T>& w, const ModelConfig& cfg, const ForwardState<T>& st, const MatR<T>& dlogits,
                  Weights<T>& g) {
  const int n = st.length;
  const int dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  g.unembed.noalias() += st.final_out.topRows(n).transpose() * dlogits;
  MatR<T> dfinal = dlogits * w.unembed.transpose();
  MatR<T> dx = layer_norm_backward(dfinal, st.lnf_hat, st.lnf_rstd, 0, w.lnf_gain, &g.lnf_gain, &g.lnf_bias);
  for (int l = cfg.num_layers - 1; l >= 0; --l) {
    const auto& L = st.layers[static_cast<std::size_t>(l)];
    const auto& W = w.layers[static_cast<std::size_t>(l)];
    auto& G = g.layers[static_cast<std::size_t>(l)];

    G.w_out.noalias() += L.act.topRows(n).transpose() * dx;
    G.b_out += dx.colwise().sum();
    MatR<T> dpre = dx * W.w_out.transpose();
    dpre.array() *= L.pre.topRows(n).unaryExpr([](T v) { return gelu_grad(v); }).array();
    G.w_in.noalias() += L.m.topRows(n).transpose() * dpre;
    G.b_in += dpre.colwise().sum();
    MatR<T> dm = dpre * W.w_in.transpose();
    MatR<T> dmid = dx + layer_norm_backward(dm, L.ln2_hat, L.ln2_rstd, 0, W.ln2_gain, &G.ln2_gain, &G.ln2_bias);

    G.wo.noalias() += L.ctx.topRows(n).transpose() * dmid;
    MatR<T> dctx = dmid * W.wo.transpose();
    MatR<T> dq(n, cfg.model_dim), dk(n, cfg.model_dim), dv(n, cfg.model_dim);
    for (int h = 0; h < cfg.num_heads; ++h) {
      const auto P = L.probs[static_cast<std::size_t>(h)].topLeftCorner(n, n);
      const auto dctx_h = dctx.middleCols(h * dh, dh);
      MatR<T> dP = dctx_h * L.v.block(0, h * dh, n, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() = P.transpose() * dctx_h;
      const ColVec<T> rowdot = P.cwiseProduct(dP).rowwise().sum();
      MatR<T> dS = (P.array() * (dP.colwise() - rowdot).array()) * scale;
      dq.middleCols(h * dh, dh).noalias() = dS * L.k.block(0, h * dh, n, dh);
      dk.middleCols(h * dh, dh).noalias() = dS.transpose() * L.q.block(0, h * dh, n, dh);
    }
    const auto a = L.a.topRows(n);
    G.wq.noalias() += a.transpose() * dq;
    G.wk.noalias() += a.transpose() * dk;
    G.wv.noalias() += a.transpose() * dv;
    MatR<T> da = dq * W.wq.transpose();
    da.noalias() += dk * W.wk.transpose();
    da.noalias() += dv * W.wv.transpose();
    dx = dmid + layer_norm_backward(da, L.ln1_hat, L.ln1_rstd, 0, W.ln1_gain, &G.ln1_gain, &G.ln1_bias);
  }
  for (int i = 0; i < n; ++i) {
    g.token_embeddings.row(st.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    g.position_embeddings.row(i) += dx.row(i);
  }
}

}  // namespace charprobe::detail
