#include <doctest.h>

#include <numeric>

#include "charprobe/attention.hpp"
#include "charprobe/errors.hpp"
#include "helpers.hpp"

using namespace charprobe;

namespace {

// Causal attention, uniform over keys 0..q for every layer and head.
Tensor uniform_attention(std::size_t L, std::size_t H, std::size_t T) {
  Tensor a({L, H, T, T});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t q = 0; q < T; ++q)
        for (std::size_t k = 0; k <= q; ++k) a.at(l, h, q, k) = 1.0f / static_cast<float>(q + 1);
  return a;
}

ProbeReport report_with_breakthrough(int L, std::optional<int> b) {
  ProbeReport r;
  r.num_layers = L;
  r.breakthrough_layer = b;
  return r;
}

}  // namespace

TEST_SUITE("attention") {
  TEST_CASE("uniform rows give one over the non-BOS keys") {
    const auto a = uniform_attention(2, 3, 6);
    const std::vector<int> q = {5};
    const auto r = attention_to_target(a, 1, 2, q, 0);
    CHECK(r.per_layer[0] == doctest::Approx(0.2));
    CHECK(r.per_layer[1] == doctest::Approx(0.2));
    CHECK(r.rows_used == std::vector<std::size_t>{3, 3});
    CHECK(r.degenerate_rows == 0);
    const auto wide = attention_to_target(a, 1, 3, q, 0);
    CHECK(wide.per_layer[0] == doctest::Approx(0.4));
  }

  TEST_CASE("mass split between BOS and target renormalizes to one") {
    Tensor a({1, 1, 4, 4});
    a.at(0, 0, 3, 0) = 0.9f;
    a.at(0, 0, 3, 1) = 0.1f;
    const std::vector<int> q = {3};
    CHECK(attention_to_target(a, 1, 2, q, 0).per_layer[0] == doctest::Approx(1.0));
  }

  TEST_CASE("rows with all mass on BOS are excluded and counted") {
    Tensor a({1, 2, 4, 4});
    a.at(0, 0, 3, 0) = 1.0f;
    a.at(0, 1, 3, 2) = 1.0f;
    const std::vector<int> q = {3};
    const auto r = attention_to_target(a, 2, 3, q, 0);
    CHECK(r.degenerate_rows == 1);
    CHECK(r.rows_used[0] == 1);
    CHECK(r.per_layer[0] == doctest::Approx(1.0));
    CHECK(renormalized_row(a, 0, 0, 3, 0).empty());
  }

  TEST_CASE("renormalized rows sum to one") {
    const auto a = uniform_attention(1, 1, 7);
    for (std::size_t q = 1; q < 7; ++q) {
      const auto row = renormalized_row(a, 0, 0, q, 0);
      CHECK(row[0] == 0.0);
      CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(1.0));
    }
  }

  TEST_CASE("invalid spans and queries") {
    const auto a = uniform_attention(1, 1, 5);
    const std::vector<int> q = {4};
    CHECK_THROWS_AS(attention_to_target(a, 0, 1, q, 0), InputError);
    CHECK_THROWS_AS(attention_to_target(a, 3, 3, q, 0), InputError);
    CHECK_THROWS_AS(attention_to_target(a, 1, 6, q, 0), InputError);
    CHECK_THROWS_AS(attention_to_target(a, 1, 2, std::vector<int>{5}, 0), InputError);
    CHECK_THROWS_AS(attention_to_target(Tensor({1, 5, 5}), 1, 2, q, 0), InputError);
  }

  TEST_CASE("query positions of a spelled prompt") {
    const auto tok = test_support::small_tokenizer();
    const auto ids = tok.encode(spelled_prompt("zebra", PromptSpec{{"hello"}, Separator::kWhitespace}));
    const auto [target, queries] = spelled_query_positions(ids);
    CHECK(ids[static_cast<std::size_t>(target)] == *tok.word_id("zebra"));
    REQUIRE(queries.size() == 7);
    CHECK(queries[0] == target);
    CHECK(ids[static_cast<std::size_t>(queries[1])] == Tokenizer::kColon);
    CHECK(ids[static_cast<std::size_t>(queries[2])] == tok.char_id('z'));
    CHECK(ids[static_cast<std::size_t>(queries[6])] == tok.char_id('a'));
    const auto bare = tok.encode("zebra : z");
    CHECK(spelled_query_positions(bare).first == 1);
    CHECK_THROWS_AS(spelled_query_positions(tok.encode("zebra")), InputError);
  }

  TEST_CASE("profile over a model and its traces agree") {
    const auto tok = test_support::small_tokenizer();
    const auto params = test_support::random_params(test_support::tiny_config(tok.size()));
    const Model model(params);
    const auto ds = test_support::dataset_of({"token", "libert", "queue"}, tok);
    AttentionOptions o;
    o.samples = 10;
    o.restrict_to_correct = false;
    const auto p = profile_attention(model, tok, ds, PromptSpec{}, {}, o);
    CHECK(p.flagged_insufficient);
    CHECK(p.sample_count == 3);
    CHECK(p.num_layers() == 2);
    for (double v : p.per_layer_mean) CHECK((v >= 0.0 && v <= 1.0));

    std::vector<TraceFile> traces;
    for (const auto& r : ds.records) {
      const auto text = spelled_prompt(r.surface, PromptSpec{});
      const auto ids = tok.encode(text);
      const auto [target, queries] = spelled_query_positions(ids);
      TraceFile t;
      t.meta = trace_meta_for(params.config, tok, "toy", text, ids);
      t.meta.annotations = {{"kind", "attention"}, {"bos_position", 0}, {"target_span", {target, target + 1}},
                            {"query_positions", queries}, {"token_id", r.token_id}};
      t.trace = *forward(model, ids, true).trace;
      traces.push_back(t);
    }
    const auto q = profile_traces(traces);
    REQUIRE(q.per_layer_mean.size() == 2);
    for (std::size_t l = 0; l < 2; ++l) CHECK(q.per_layer_mean[l] == doctest::Approx(p.per_layer_mean[l]).epsilon(1e-6));
    CHECK_THROWS_AS(profile_traces({}), InputError);

    o.restrict_to_correct = true;
    const std::vector<int> correct = {*tok.word_id("queue")};
    const auto only = profile_attention(model, tok, ds, PromptSpec{}, correct, o);
    CHECK(only.sampled_token_ids == correct);
  }

  TEST_CASE("peak is the earliest maximum") {
    const auto p = make_profile({0.2, 0.8, 0.4, 0.8}, 2);
    CHECK(p.peak_layer == 1);
    CHECK(p.per_layer_mean[1] == doctest::Approx(0.4));
    CHECK(p.relative_depth(1) == doctest::Approx(0.5));
    CHECK(p.relative_depth(3) == doctest::Approx(1.0));
  }

  TEST_CASE("peak and breakthrough comparison") {
    const auto p = make_profile({0.1, 0.5, 0.2, 0.1}, 1);  // peak layer 1, depth 0.5
    const auto same = compare_peak_vs_breakthrough(p, report_with_breakthrough(4, 2), 0.1);
    CHECK(same.peak_depth == doctest::Approx(0.5));
    CHECK(same.breakthrough_depth == doctest::Approx(0.5));
    CHECK(same.coincide);
    const auto apart = compare_peak_vs_breakthrough(p, report_with_breakthrough(4, 4), 0.1);
    CHECK_FALSE(apart.coincide);
    CHECK(compare_peak_vs_breakthrough(p, report_with_breakthrough(4, 4), 0.5).coincide);
    const auto none = compare_peak_vs_breakthrough(p, report_with_breakthrough(4, std::nullopt));
    CHECK_FALSE(none.coincide);
    CHECK(depths_coincide(0.3, 0.4, 0.1));
    CHECK_FALSE(depths_coincide(0.3, 0.41, 0.1));
  }
}
