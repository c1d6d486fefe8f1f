#include "charprobe/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "charprobe/detail/parallel.hpp"
#include "charprobe/errors.hpp"

namespace charprobe {

namespace {

int label_of(char c) { return c - 'a'; }

void check_position(int n) {
  if (n < 1 || n > 5) throw InputError("character position must be in 1..5, got " + std::to_string(n));
}

struct Adam {
  MatR<float> m, v;
  void init(Eigen::Index rows, Eigen::Index cols) {
    m.setZero(rows, cols);
    v.setZero(rows, cols);
  }
};

template <typename Param, typename Grad>
void adam_step(Param& p, const Grad& g, Adam& s, double lr, int t) {
  constexpr float b1 = 0.9f;
  constexpr float b2 = 0.999f;
  constexpr float eps = 1e-8f;
  s.m = b1 * s.m + (1.0f - b1) * g;
  s.v = b2 * s.v + (1.0f - b2) * g.cwiseProduct(g);
  const float c1 = 1.0f - std::pow(b1, static_cast<float>(t));
  const float c2 = 1.0f - std::pow(b2, static_cast<float>(t));
  const auto step = static_cast<float>(lr);
  p.array() -= step * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps);
}

MatR<float> standardize(const ProbeModel& p, const MatR<float>& x) {
  return (x.rowwise() - p.mean).array().rowwise() * p.inv_std.array();
}

MatR<float> logits_of(const ProbeModel& p, const MatR<float>& x) {
  const MatR<float> z = standardize(p, x);
  const MatR<float> h1 = ((z * p.w1).rowwise() + p.b1).array().tanh();
  const MatR<float> h2 = ((h1 * p.w2).rowwise() + p.b2).array().tanh();
  return (h2 * p.w3).rowwise() + p.b3;
}

void check_features(const MatR<float>& features, std::span<const int> labels) {
  if (static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw InputError("feature and label counts differ");
  }
  for (int y : labels) {
    if (y < 0 || y >= kNumClasses) throw InputError("label out of range: " + std::to_string(y));
  }
}

MatR<float> select_rows(const MatR<float>& x, std::span<const std::size_t> rows) {
  MatR<float> out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

std::vector<int> select(std::span<const int> v, std::span<const std::size_t> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(v[r]);
  return out;
}

double population_std(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Features

FeatureSet extract_features(const Model& model, const Tokenizer& tokenizer, const SpellingDataset& ds, int layer,
                            int n, const PromptSpec& spec) {
  check_position(n);
  if (layer != kEmbedding && (layer < 0 || layer > model.config().num_layers)) {
    throw InputError("layer out of range: " + std::to_string(layer));
  }
  if (layer != kEmbedding) {
    auto all = extract_layer_features(model, tokenizer, ds, n, spec);
    return std::move(all[static_cast<std::size_t>(layer)]);
  }
  FeatureSet out;
  std::vector<const TokenRecord*> kept;
  for (const auto& r : ds.records) {
    if (r.length < n) {
      ++out.skipped;
      continue;
    }
    kept.push_back(&r);
  }
  const auto& emb = model.weights().token_embeddings;
  out.features.resize(static_cast<Eigen::Index>(kept.size()), emb.cols());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (kept[i]->token_id < 0 || kept[i]->token_id >= emb.rows()) throw InputError("token id outside the model");
    out.features.row(static_cast<Eigen::Index>(i)) = emb.row(kept[i]->token_id).cast<float>();
    out.labels.push_back(label_of(kept[i]->char_at(n)));
    out.token_ids.push_back(kept[i]->token_id);
  }
  return out;
}

std::vector<FeatureSet> extract_layer_features(const Model& model, const Tokenizer& tokenizer,
                                               const SpellingDataset& ds, int n, const PromptSpec& spec, int jobs) {
  check_position(n);
  const auto& cfg = model.config();
  std::vector<const TokenRecord*> kept;
  std::size_t skipped = 0;
  for (const auto& r : ds.records) {
    if (r.length < n) {
      ++skipped;
      continue;
    }
    kept.push_back(&r);
  }
  const auto layers = static_cast<std::size_t>(cfg.num_layers + 1);
  std::vector<FeatureSet> out(layers);
  for (auto& fs : out) {
    fs.features.resize(static_cast<Eigen::Index>(kept.size()), cfg.model_dim);
    fs.skipped = skipped;
    for (const auto* r : kept) {
      fs.labels.push_back(label_of(r->char_at(n)));
      fs.token_ids.push_back(r->token_id);
    }
  }
  detail::parallel_for(kept.size(), jobs, [&](std::size_t i) {
    const auto ids = tokenizer.encode(position_prompt(kept[i]->surface, spec, n));
    const auto res = forward(model, ids, true);
    const auto& hs = res.trace->hidden_states;
    const std::size_t last = ids.size() - 1;
    for (std::size_t l = 0; l < layers; ++l) {
      const auto row = hs.slice({l, last});
      out[l].features.row(static_cast<Eigen::Index>(i)) =
          Eigen::Map<const RowVec<float>>(row.data(), static_cast<Eigen::Index>(row.size()));
    }
  });
  return out;
}

FeatureSet features_from_traces(std::span<const TraceFile> traces, int layer, int n) {
  check_position(n);
  FeatureSet out;
  std::vector<std::vector<float>> rows;
  // Probe traces may carry their own table; otherwise the first one found
  // (typically a dedicated "embeddings" trace) is shared.
  const Tensor* shared = nullptr;
  for (const auto& tf : traces) {
    if (tf.embeddings) {
      shared = &*tf.embeddings;
      break;
    }
  }
  for (const auto& tf : traces) {
    const auto& a = tf.meta.annotations;
    if (a.value("kind", std::string()) != "probe" || a.value("n", 0) != n) continue;
    const int label = a.at("label").get<int>();
    if (label < 0 || label >= kNumClasses) throw FormatError("trace probe label out of range");
    std::span<const float> row;
    if (layer == kEmbedding) {
      const Tensor* table = tf.embeddings ? &*tf.embeddings : shared;
      if (!table) throw InputError("no trace carries an embeddings tensor");
      const auto tid = static_cast<std::size_t>(a.at("token_id").get<int>());
      if (tid >= table->shape[0]) throw FormatError("trace token_id outside embeddings");
      row = table->slice({tid});
    } else {
      const auto& hs = tf.trace.hidden_states;
      if (hs.empty()) throw InputError("trace '" + tf.meta.prompt_text + "' has no hidden_states tensor");
      if (layer < 0 || static_cast<std::size_t>(layer) >= hs.shape[0]) throw InputError("layer out of range");
      const auto pos = static_cast<std::size_t>(a.value("position", static_cast<int>(hs.shape[1]) - 1));
      if (pos >= hs.shape[1]) throw FormatError("trace probe position outside the sequence");
      row = hs.slice({static_cast<std::size_t>(layer), pos});
    }
    if (!rows.empty() && row.size() != rows.front().size()) throw FormatError("traces disagree on model_dim");
    rows.emplace_back(row.begin(), row.end());
    out.labels.push_back(label);
    out.token_ids.push_back(a.value("token_id", -1));
  }
  const auto dim = rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size());
  out.features.resize(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const RowVec<float>>(rows[i].data(), dim);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Probe model

std::pair<int, int> ProbeConfig::hidden_dims() const {
  if (hidden1 > 0 && hidden2 > 0) return {hidden1, hidden2};
  const double scale = input_dim < 512 ? static_cast<double>(input_dim) / 512.0 : 1.0;
  return {std::max(1, static_cast<int>(std::lround(512 * scale))), std::max(1, static_cast<int>(std::lround(256 * scale)))};
}

nlohmann::json ProbeConfig::to_json() const {
  const auto [h1, h2] = hidden_dims();
  return {{"input_dim", input_dim},         {"hidden_dims", {h1, h2}},   {"learning_rate", learning_rate},
          {"batch_size", batch_size},       {"max_epochs", max_epochs}, {"patience", patience},
          {"min_delta", min_delta},         {"seed", seed}};
}

ProbeModel ProbeModel::zeros(const ProbeConfig& config) {
  if (config.input_dim < 1) throw InputError("probe input_dim must be >= 1");
  const auto [h1, h2] = config.hidden_dims();
  ProbeModel p;
  p.mean.setZero(config.input_dim);
  p.inv_std.setOnes(config.input_dim);
  p.w1.setZero(config.input_dim, h1);
  p.w2.setZero(h1, h2);
  p.w3.setZero(h2, kNumClasses);
  p.b1.setZero(h1);
  p.b2.setZero(h2);
  p.b3.setZero(kNumClasses);
  return p;
}

ProbeModel train_probe(const MatR<float>& features, std::span<const int> labels, const ProbeConfig& config) {
  check_features(features, labels);
  if (features.rows() < kNumClasses) {
    throw InputError("probe training needs at least 26 samples, got " + std::to_string(features.rows()));
  }
  if (config.input_dim != features.cols()) throw InputError("feature dimension does not match probe input_dim");
  if (config.batch_size < 1 || config.max_epochs < 0) throw InputError("invalid probe schedule");

  ProbeModel p = ProbeModel::zeros(config);
  const auto n = features.rows();
  p.mean = features.colwise().mean();
  for (Eigen::Index j = 0; j < features.cols(); ++j) {
    const double var = (features.col(j).array() - p.mean(j)).square().mean();
    p.inv_std(j) = var > 1e-16 ? static_cast<float>(1.0 / std::sqrt(var)) : 1.0f;
  }

  std::mt19937_64 rng(config.seed);
  auto glorot = [&](MatR<float>& w) {
    const double a = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    std::uniform_real_distribution<double> u(-a, a);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(u(rng));
  };
  glorot(p.w1);
  glorot(p.w2);
  glorot(p.w3);

  Adam s_w1, s_w2, s_w3, s_b1, s_b2, s_b3;
  s_w1.init(p.w1.rows(), p.w1.cols());
  s_w2.init(p.w2.rows(), p.w2.cols());
  s_w3.init(p.w3.rows(), p.w3.cols());
  s_b1.init(1, p.b1.cols());
  s_b2.init(1, p.b2.cols());
  s_b3.init(1, p.b3.cols());

  const MatR<float> z_all = standardize(p, features);
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  int t = 0;
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const auto bsz = static_cast<Eigen::Index>(end - start);
      MatR<float> z(bsz, z_all.cols());
      for (Eigen::Index i = 0; i < bsz; ++i) z.row(i) = z_all.row(static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(i)]));
      const MatR<float> h1 = ((z * p.w1).rowwise() + p.b1).array().tanh();
      const MatR<float> h2 = ((h1 * p.w2).rowwise() + p.b2).array().tanh();
      MatR<float> dlog = (h2 * p.w3).rowwise() + p.b3;
      for (Eigen::Index i = 0; i < bsz; ++i) {
        const int y = labels[order[start + static_cast<std::size_t>(i)]];
        auto row = dlog.row(i);
        const float mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        const float zsum = row.sum();
        loss_sum += -std::log(static_cast<double>(row(y)) / zsum);
        row /= zsum;
        row(y) -= 1.0f;
      }
      dlog /= static_cast<float>(bsz);
      const MatR<float> g_w3 = h2.transpose() * dlog;
      const RowVec<float> g_b3 = dlog.colwise().sum();
      const MatR<float> d2 = (dlog * p.w3.transpose()).array() * (1.0f - h2.array().square());
      const MatR<float> g_w2 = h1.transpose() * d2;
      const RowVec<float> g_b2 = d2.colwise().sum();
      const MatR<float> d1 = (d2 * p.w2.transpose()).array() * (1.0f - h1.array().square());
      const MatR<float> g_w1 = z.transpose() * d1;
      const RowVec<float> g_b1 = d1.colwise().sum();
      ++t;
      adam_step(p.w1, g_w1, s_w1, config.learning_rate, t);
      adam_step(p.w2, g_w2, s_w2, config.learning_rate, t);
      adam_step(p.w3, g_w3, s_w3, config.learning_rate, t);
      adam_step(p.b1, g_b1, s_b1, config.learning_rate, t);
      adam_step(p.b2, g_b2, s_b2, config.learning_rate, t);
      adam_step(p.b3, g_b3, s_b3, config.learning_rate, t);
    }
    const double loss = loss_sum / static_cast<double>(n);
    if (!std::isfinite(loss)) throw TrainingError("probe loss is not finite", epoch);
    p.epochs_run = epoch + 1;
    p.final_loss = loss;
    if (loss < best - config.min_delta) {
      best = loss;
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
  }
  return p;
}

ColVec<double> predict_char(const ProbeModel& probe, std::span<const float> feature) {
  if (static_cast<int>(feature.size()) != probe.input_dim()) {
    throw InputError("feature dimension " + std::to_string(feature.size()) + " does not match probe input " +
                     std::to_string(probe.input_dim()));
  }
  const MatR<float> x = Eigen::Map<const RowVec<float>>(feature.data(), static_cast<Eigen::Index>(feature.size()));
  const RowVec<double> logits = logits_of(probe, x).row(0).cast<double>();
  ColVec<double> e = (logits.array() - logits.maxCoeff()).exp().transpose();
  return e / e.sum();
}

std::vector<int> predict_labels(const ProbeModel& probe, const MatR<float>& features) {
  if (features.cols() != probe.input_dim()) throw InputError("feature dimension does not match probe input");
  const MatR<float> logits = logits_of(probe, features);
  std::vector<int> out(static_cast<std::size_t>(features.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    int best = 0;
    for (int c = 1; c < kNumClasses; ++c) {
      if (logits(i, c) > logits(i, best)) best = c;
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

double probe_accuracy(const ProbeModel& probe, const MatR<float>& features, std::span<const int> labels) {
  check_features(features, labels);
  if (labels.empty()) return 0.0;
  const auto pred = predict_labels(probe, features);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

CrossValidation cross_validate(const MatR<float>& features, std::span<const int> labels, const ProbeConfig& config,
                               int folds, SplitMode mode, int jobs) {
  check_features(features, labels);
  const auto n = labels.size();
  if (folds < 2) throw InputError("cross-validation needs at least 2 folds");
  if (static_cast<std::size_t>(folds) > n) {
    throw InputError("folds (" + std::to_string(folds) + ") exceed samples (" + std::to_string(n) + ")");
  }
  ProbeConfig cfg = config;
  cfg.input_dim = static_cast<int>(features.cols());

  std::vector<std::vector<std::size_t>> tests(static_cast<std::size_t>(folds));
  CrossValidation cv;
  cv.assignment.assign(n, 0);
  std::vector<std::size_t> perm(n);
  if (mode == SplitMode::kDisjoint) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(config.seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < n; ++i) cv.assignment[perm[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));
    for (std::size_t i = 0; i < n; ++i) tests[static_cast<std::size_t>(cv.assignment[i])].push_back(i);
  } else {
    const auto test_size = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(n) / folds)));
    for (int f = 0; f < folds; ++f) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::mt19937_64 rng(detail::mix_seed(config.seed, static_cast<std::uint64_t>(f)));
      std::shuffle(perm.begin(), perm.end(), rng);
      auto& t = tests[static_cast<std::size_t>(f)];
      t.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(test_size));
      std::sort(t.begin(), t.end());
      for (auto i : t) ++cv.assignment[i];
    }
  }

  cv.fold_accuracy.assign(static_cast<std::size_t>(folds), 0.0);
  detail::parallel_for(static_cast<std::size_t>(folds), jobs, [&](std::size_t f) {
    const auto& test = tests[f];
    std::vector<std::size_t> train;
    train.reserve(n - test.size());
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (k < test.size() && test[k] == i) {
        ++k;
        continue;
      }
      train.push_back(i);
    }
    const auto probe = train_probe(select_rows(features, train), select(labels, train), cfg);
    cv.fold_accuracy[f] = probe_accuracy(probe, select_rows(features, test), select(labels, test));
  });
  cv.mean = std::accumulate(cv.fold_accuracy.begin(), cv.fold_accuracy.end(), 0.0) / folds;
  cv.stddev = population_std(cv.fold_accuracy);
  return cv;
}

// ---------------------------------------------------------------------------
// Reports

std::optional<int> detect_breakthrough(const std::vector<std::vector<double>>& accuracy,
                                       std::span<const int> positions) {
  if (accuracy.size() < 2) return std::nullopt;
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < positions.size(); ++c) {
    if (positions[c] >= 2) cols.push_back(c);
  }
  if (cols.empty()) return std::nullopt;
  constexpr double kTie = 1e-9;
  std::optional<int> best;
  double best_gain = 0.0;
  for (std::size_t l = 1; l < accuracy.size(); ++l) {
    double gain = 0.0;
    for (auto c : cols) gain += accuracy[l].at(c) - accuracy[l - 1].at(c);
    gain /= static_cast<double>(cols.size());
    if (!best || gain > best_gain + kTie) {
      best = static_cast<int>(l);
      best_gain = gain;
    }
  }
  return best;
}

std::optional<int> detect_breakthrough(const ProbeReport& report) {
  return detect_breakthrough(report.accuracy, report.positions);
}

nlohmann::json ProbeReport::to_json() const {
  nlohmann::json depth = nlohmann::json::array();
  for (int l = 0; l <= num_layers; ++l) depth.push_back(relative_depth(l, num_layers));
  nlohmann::json j = {{"num_layers", num_layers},
                      {"positions", positions},
                      {"accuracy", accuracy},
                      {"fold_std", fold_std},
                      {"samples", samples},
                      {"relative_depth", depth},
                      {"embedding_accuracy", embedding_accuracy},
                      {"breakthrough_layer", nullptr},
                      {"breakthrough_relative_depth", nullptr}};
  if (breakthrough_layer) {
    j["breakthrough_layer"] = *breakthrough_layer;
    j["breakthrough_relative_depth"] = relative_depth(*breakthrough_layer, num_layers);
  }
  return j;
}

std::string ProbeReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "layer,relative_depth";
  for (int n : positions) out << ",N" << n;
  out << ",breakthrough\n";
  for (std::size_t l = 0; l < accuracy.size(); ++l) {
    out << l << ',' << relative_depth(static_cast<int>(l), num_layers);
    for (double a : accuracy[l]) out << ',' << a;
    out << ',' << (breakthrough_layer && *breakthrough_layer == static_cast<int>(l) ? 1 : 0) << '\n';
  }
  return out.str();
}

namespace {

struct Cell {
  std::size_t row;  // layer row, or SIZE_MAX for the embedding probe
  std::size_t col;
  const FeatureSet* fs;
};

ProbeReport run_cells(int num_layers, const ProbeRunOptions& options,
                      const std::vector<std::vector<FeatureSet>>& layer_sets,
                      const std::vector<FeatureSet>& embedding_sets) {
  ProbeReport rep;
  rep.num_layers = num_layers;
  rep.positions = options.positions;
  const auto rows = static_cast<std::size_t>(num_layers + 1);
  const auto cols = options.positions.size();
  rep.accuracy.assign(rows, std::vector<double>(cols, 0.0));
  rep.fold_std.assign(rows, std::vector<double>(cols, 0.0));
  rep.samples.assign(rows, std::vector<std::size_t>(cols, 0));
  if (!embedding_sets.empty()) rep.embedding_accuracy.assign(cols, 0.0);

  std::vector<Cell> cells;
  for (std::size_t c = 0; c < cols; ++c) {
    for (std::size_t l = 0; l < rows; ++l) cells.push_back({l, c, &layer_sets[c][l]});
    if (!embedding_sets.empty()) cells.push_back({SIZE_MAX, c, &embedding_sets[c]});
  }
  std::vector<CrossValidation> results(cells.size());
  detail::parallel_for(cells.size(), options.jobs, [&](std::size_t i) {
    const auto& fs = *cells[i].fs;
    results[i] = cross_validate(fs.features, fs.labels, options.probe, options.folds, options.mode, 1);
  });
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& cell = cells[i];
    if (cell.row == SIZE_MAX) {
      rep.embedding_accuracy[cell.col] = results[i].mean;
      continue;
    }
    rep.accuracy[cell.row][cell.col] = results[i].mean;
    rep.fold_std[cell.row][cell.col] = results[i].stddev;
    rep.samples[cell.row][cell.col] = cell.fs->size();
  }
  rep.breakthrough_layer = detect_breakthrough(rep);
  return rep;
}

}  // namespace

ProbeReport probe_all_layers(const Model& model, const Tokenizer& tokenizer, const SpellingDataset& ds,
                             const PromptSpec& spec, const ProbeRunOptions& options) {
  if (ds.records.empty()) throw InputError("probe dataset is empty");
  std::vector<std::vector<FeatureSet>> layer_sets;
  std::vector<FeatureSet> embedding_sets;
  for (int n : options.positions) {
    layer_sets.push_back(extract_layer_features(model, tokenizer, ds, n, spec, options.jobs));
    if (options.embedding_probe) embedding_sets.push_back(extract_features(model, tokenizer, ds, kEmbedding, n, spec));
  }
  return run_cells(model.config().num_layers, options, layer_sets, embedding_sets);
}

ProbeReport probe_traces(std::span<const TraceFile> traces, const ProbeRunOptions& options) {
  if (traces.empty()) throw InputError("no traces to probe");
  const int num_layers = traces.front().meta.num_layers;
  for (const auto& t : traces) {
    if (t.meta.num_layers != num_layers || t.meta.model_dim != traces.front().meta.model_dim) {
      throw FormatError("traces come from models of different shapes");
    }
  }
  const bool embeddings =
      options.embedding_probe &&
      std::any_of(traces.begin(), traces.end(), [](const TraceFile& t) { return t.embeddings.has_value(); });
  std::vector<std::vector<FeatureSet>> layer_sets;
  std::vector<FeatureSet> embedding_sets;
  for (int n : options.positions) {
    std::vector<FeatureSet> per_layer;
    for (int l = 0; l <= num_layers; ++l) per_layer.push_back(features_from_traces(traces, l, n));
    layer_sets.push_back(std::move(per_layer));
    if (embeddings) embedding_sets.push_back(features_from_traces(traces, kEmbedding, n));
  }
  return run_cells(num_layers, options, layer_sets, embedding_sets);
}

}  // namespace charprobe
