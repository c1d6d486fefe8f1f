#include <doctest.h>

#include <random>

#include "charprobe/errors.hpp"
#include "charprobe/probe.hpp"
#include "helpers.hpp"

using namespace charprobe;

namespace {

ProbeConfig quick(int dim, std::uint64_t seed = 1) {
  ProbeConfig c;
  c.input_dim = dim;
  c.max_epochs = 60;
  c.patience = 60;
  c.seed = seed;
  return c;
}

// `per_class` noisy copies of a one-hot vector per class.
std::pair<MatR<float>, std::vector<int>> one_hot_data(int per_class, double noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, static_cast<float>(noise));
  MatR<float> x(26 * per_class, 26);
  std::vector<int> y;
  for (int i = 0; i < 26 * per_class; ++i) {
    const int c = i % 26;
    for (int j = 0; j < 26; ++j) x(i, j) = (j == c ? 1.0f : 0.0f) + g(rng);
    y.push_back(c);
  }
  return {x, y};
}

}  // namespace

TEST_SUITE("probe") {
  TEST_CASE("separable one-hot features are learned") {
    const auto [x, y] = one_hot_data(10, 0.05, 2);
    auto cfg = quick(26);
    cfg.max_epochs = 150;
    const auto p = train_probe(x, y, cfg);
    CHECK(probe_accuracy(p, x, y) == doctest::Approx(1.0));
    const auto cv = cross_validate(x, y, cfg, 4);
    CHECK(cv.mean >= 0.95);
  }

  TEST_CASE("uninformative features stay near chance") {
    std::mt19937_64 rng(5);
    std::normal_distribution<float> g;
    MatR<float> x(520, 8);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
    std::vector<int> y(520);
    std::uniform_int_distribution<int> lab(0, 25);
    for (auto& v : y) v = lab(rng);
    const auto cv = cross_validate(x, y, quick(8), 5);
    CHECK(cv.mean < 1.0 / 26 + 0.05);
  }

  TEST_CASE("shuffled labels destroy accuracy") {
    auto [x, y] = one_hot_data(10, 0.05, 3);
    std::mt19937_64 rng(8);
    std::shuffle(y.begin(), y.end(), rng);
    CHECK(cross_validate(x, y, quick(26), 5).mean < 1.0 / 26 + 0.08);
  }

  TEST_CASE("predictions are distributions; zero probe is uniform") {
    const auto [x, y] = one_hot_data(2, 0.1, 4);
    const auto p = train_probe(x, y, quick(26));
    const std::span<const float> row(x.row(3).data(), 26);
    CHECK(predict_char(p, row).sum() == doctest::Approx(1.0));
    const auto z = ProbeModel::zeros(quick(26));
    const auto u = predict_char(z, row);
    for (int i = 0; i < 26; ++i) CHECK(u(i) == doctest::Approx(1.0 / 26));
    CHECK(predict_labels(z, x) == std::vector<int>(x.rows(), 0));
  }

  TEST_CASE("hidden widths scale with small inputs") {
    ProbeConfig c;
    c.input_dim = 128;
    CHECK(c.hidden_dims() == std::pair{128, 64});
    c.input_dim = 4096;
    CHECK(c.hidden_dims() == std::pair{512, 256});
  }

  TEST_CASE("disjoint folds partition the samples") {
    const auto [x, y] = one_hot_data(4, 0.1, 6);
    MatR<float> xs = x.topRows(100);
    std::vector<int> ys(y.begin(), y.begin() + 100);
    auto cfg = quick(26);
    cfg.max_epochs = 1;
    const auto cv = cross_validate(xs, ys, cfg, 10);
    std::vector<int> per_fold(10, 0);
    for (int f : cv.assignment) ++per_fold[static_cast<std::size_t>(f)];
    CHECK(per_fold == std::vector<int>(10, 10));
    CHECK(cv.fold_accuracy.size() == 10);
    const auto again = cross_validate(xs, ys, cfg, 10, SplitMode::kDisjoint, 3);
    CHECK(again.fold_accuracy == cv.fold_accuracy);
    CHECK(again.assignment == cv.assignment);

    const auto rnd = cross_validate(xs, ys, cfg, 10, SplitMode::kRandom);
    int total = 0;
    for (int v : rnd.assignment) total += v;
    CHECK(total == 100);
    CHECK_THROWS_AS(cross_validate(xs, ys, cfg, 1), InputError);
    CHECK_THROWS_AS(cross_validate(xs.topRows(5), std::vector<int>(5, 0), cfg, 10), InputError);
  }

  TEST_CASE("breakthrough detection") {
    const std::vector<int> pos = {1, 2, 3};
    // Layer 2 gains most on N >= 2 even though layer 1 gains most on N = 1.
    const std::vector<std::vector<double>> acc = {
        {0.1, 0.1, 0.1}, {0.9, 0.2, 0.2}, {0.9, 0.7, 0.6}, {0.9, 0.8, 0.7}};
    CHECK(detect_breakthrough(acc, pos) == 2);

    std::vector<std::vector<double>> shifted = acc;
    for (auto& row : shifted)
      for (auto& v : row) v += 0.05;
    CHECK(detect_breakthrough(shifted, pos) == 2);

    const std::vector<std::vector<double>> flat = {{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}};
    CHECK(detect_breakthrough(flat, std::vector<int>{1, 2}) == 1);
    CHECK_FALSE(detect_breakthrough(acc, std::vector<int>{1, 1, 1}));
    CHECK_FALSE(detect_breakthrough({{0.3}}, std::vector<int>{2}));

    // Exhaustive check on small grids: result is the first argmax of mean gain.
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b)
        for (int c = 0; c < 4; ++c) {
          const std::vector<std::vector<double>> g = {{0.0}, {a * 0.25}, {b * 0.25}, {c * 0.25}};
          const std::vector<double> gains = {a * 0.25, (b - a) * 0.25, (c - b) * 0.25};
          const int expect = static_cast<int>(std::max_element(gains.begin(), gains.end()) - gains.begin()) + 1;
          CHECK(detect_breakthrough(g, std::vector<int>{2}) == expect);
        }
  }

  TEST_CASE("feature extraction labels and layers") {
    const auto tok = test_support::small_tokenizer();
    const Model model(test_support::random_params(test_support::tiny_config(tok.size())));
    const auto ds = test_support::dataset_of({"token", "queue", "zebra"}, tok);
    const auto fs = extract_features(model, tok, ds, 2, 3, PromptSpec{});
    REQUIRE(fs.size() == 3);
    CHECK(fs.labels[0] == 10);
    CHECK(fs.labels[1] == 'e' - 'a');
    const auto emb = extract_features(model, tok, ds, kEmbedding, 1, PromptSpec{});
    CHECK(emb.features.row(0).cast<double>() == model.weights().token_embeddings.row(*tok.word_id("token")));
    const auto longer = test_support::dataset_of({"token", "spelling"}, tok);
    CHECK(extract_features(model, tok, longer, 0, 5, PromptSpec{}).skipped == 0);
    CHECK_THROWS_AS(extract_features(model, tok, ds, 3, 1, PromptSpec{}), InputError);
    CHECK_THROWS_AS(extract_features(model, tok, ds, 0, 6, PromptSpec{}), InputError);

    const auto ids = tok.encode(position_prompt("token", PromptSpec{}, 3));
    const auto tr = *forward(model, ids, true).trace;
    const auto last = tr.hidden_states.slice({2, ids.size() - 1});
    for (std::size_t j = 0; j < last.size(); ++j) CHECK(fs.features(0, static_cast<Eigen::Index>(j)) == last[j]);
  }

  TEST_CASE("features from traces match direct extraction") {
    const auto tok = test_support::small_tokenizer();
    const auto params = test_support::random_params(test_support::tiny_config(tok.size()));
    const Model model(params);
    const auto ds = test_support::dataset_of({"token", "queue", "zebra", "libert"}, tok);
    std::vector<TraceFile> traces;
    TraceFile table;
    table.meta = trace_meta_for(params.config, tok, "toy", "", {});
    table.meta.annotations = {{"kind", "embeddings"}};
    Tensor emb({static_cast<std::size_t>(tok.size()), 16});
    for (std::size_t i = 0; i < emb.size(); ++i) emb.data[i] = params.weights.token_embeddings.data()[i];
    table.embeddings = emb;
    traces.push_back(table);
    for (const auto& r : ds.records) {
      const auto text = position_prompt(r.surface, PromptSpec{}, 2);
      const auto ids = tok.encode(text);
      TraceFile t;
      t.meta = trace_meta_for(params.config, tok, "toy", text, ids);
      t.meta.annotations = {{"kind", "probe"}, {"n", 2}, {"label", r.char_at(2) - 'a'},
                            {"position", ids.size() - 1}, {"token_id", r.token_id}};
      t.trace = *forward(model, ids, true).trace;
      traces.push_back(t);
    }
    for (int layer : {kEmbedding, 0, 1, 2}) {
      CAPTURE(layer);
      const auto a = features_from_traces(traces, layer, 2);
      const auto b = extract_features(model, tok, ds, layer, 2, PromptSpec{});
      CHECK(a.labels == b.labels);
      CHECK(a.features == b.features);
    }
    CHECK(features_from_traces(traces, 1, 3).size() == 0);
  }
}
