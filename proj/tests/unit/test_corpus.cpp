#include <doctest.h>

#include <algorithm>
#include <fstream>

#include "charprobe/corpus.hpp"
#include "charprobe/errors.hpp"
#include "helpers.hpp"

using namespace charprobe;

namespace {

std::vector<VocabEntry> crafted() {
  return {{10, "_hello"}, {11, "_Hello"}, {12, "hello"}, {13, "_hi"}, {14, "_token5"}, {15, "_worlds"}};
}

std::string strip(std::string s, char sep) {
  std::erase(s, sep);
  return s;
}

}  // namespace

TEST_SUITE("corpus") {
  TEST_CASE("crafted six-entry vocabulary keeps exactly two records") {
    const auto ds = filter_vocabulary(crafted());
    REQUIRE(ds.records.size() == 2);
    CHECK(ds.records[0] == TokenRecord{"hello", 10, true, 5});
    CHECK(ds.records[1] == TokenRecord{"worlds", 15, true, 6});
    CHECK(ds.source_vocab_size == 6);
  }

  TEST_CASE("filter is idempotent on its own output") {
    const auto ds = filter_vocabulary(crafted());
    std::vector<VocabEntry> again;
    for (const auto& r : ds.records) again.push_back({r.token_id, "_" + r.surface});
    const auto ds2 = filter_vocabulary(again);
    CHECK(ds2.records == ds.records);
  }

  TEST_CASE("filter honours the marker and minimum length") {
    const std::vector<VocabEntry> v = {{1, "\xC4\xA0" "apple"}, {2, "_apple"}, {3, "\xC4\xA0" "pear"}};
    const auto ds = filter_vocabulary(v, {"\xC4\xA0", 4});
    REQUIRE(ds.records.size() == 2);
    CHECK(ds.records[1].surface == "pear");
    CHECK_THROWS_AS(filter_vocabulary({}), InputError);
  }

  TEST_CASE("retention percentages format to two decimals") {
    SpellingDataset ds;
    ds.source_vocab_size = 128256;
    ds.records.resize(19724);
    CHECK(retention_percent(ds) == "15.38");
    ds.source_vocab_size = 32000;
    ds.records.resize(6130);
    CHECK(retention_percent(ds) == "19.16");
    ds.source_vocab_size = 256000;
    ds.records.resize(47833);
    CHECK(retention_percent(ds) == "18.68");
    ds.source_vocab_size = 152064;
    ds.records.resize(18973);
    CHECK(retention_percent(ds) == "12.48");
  }

  TEST_CASE("spell_out") {
    CHECK(spell_out("token", Separator::kWhitespace) == "t o k e n");
    CHECK(spell_out("hello", Separator::kSlash) == "/h/e/l/l/o/");
    CHECK(spell_out("a", Separator::kWhitespace) == "a");
    for (const char* w : {"libert", "queue", "a", "zebra"}) {
      CHECK(strip(spell_out(w, Separator::kWhitespace), ' ') == w);
      CHECK(strip(spell_out(w, Separator::kSlash), '/') == w);
      const auto pieces = split_spelling(spell_out(w, Separator::kSlash), Separator::kSlash);
      CHECK(pieces.size() == std::string(w).size());
    }
  }

  TEST_CASE("three-shot prompt layout") {
    const PromptSpec spec;
    const auto p = build_prompt("libert", spec);
    CHECK(p.text == "hello : h e l l o,\nworld : w o r l d,\norange : o r a n g e,\nlibert :");
    CHECK(p.expected == "l i b e r t");

    const PromptSpec none{{}, Separator::kWhitespace};
    CHECK(build_prompt("token", none).text == "token :");
    CHECK(build_prompt("token", none).expected == "t o k e n");

    const PromptSpec slash{{"hello", "world", "orange"}, Separator::kSlash};
    const auto s = build_prompt("libert", slash);
    CHECK(s.text.starts_with("hello :/h/e/l/l/o/,\nworld :/w/o/r/l/d/,\n"));
    CHECK(s.expected == "/l/i/b/e/r/t/");
    CHECK_THROWS_AS(build_prompt("hello", spec), InputError);
  }

  TEST_CASE("position prompts end right before the n-th character") {
    const PromptSpec spec;
    CHECK(position_prompt("token", spec, 3).ends_with("token : t o "));
    CHECK(position_prompt("token", spec, 1).ends_with("token : "));
    const PromptSpec slash{{"hello"}, Separator::kSlash};
    CHECK(position_prompt("token", slash, 3).ends_with("token :/t/o/"));
    CHECK_THROWS_AS(position_prompt("token", spec, 6), InputError);
    CHECK(spelled_prompt("token", spec).ends_with("token : t o k e n"));
  }

  TEST_CASE("dataset statistics by hand count") {
    const auto tok = test_support::small_tokenizer();
    const auto ds = test_support::dataset_of({"hello", "world"}, tok);
    const auto st = dataset_stats(ds);
    REQUIRE(st.length_histogram.size() == 5);
    CHECK(st.length_histogram[4] == 2);
    CHECK(st.position_frequency[0]['h' - 'a'] == 1);
    CHECK(st.position_frequency[0]['w' - 'a'] == 1);
    std::size_t total = 0;
    for (auto v : st.position_frequency[0]) total += v;
    CHECK(total == 2);
  }

  TEST_CASE("synthetic vocabulary") {
    const auto a = make_synthetic_vocab(7, 500, 5, 8);
    const auto b = make_synthetic_vocab(7, 500, 5, 8);
    REQUIRE(a.entries.size() == 500);
    CHECK(a.tokenizer == b.tokenizer);
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
      CHECK(a.entries[i].surface == b.entries[i].surface);
      CHECK(a.entries[i].token_id == b.entries[i].token_id);
    }
    const auto ds = filter_vocabulary(a.entries);
    CHECK(ds.records.size() == 500);
    CHECK(retention_percent(ds) == "100.00");
    for (const auto& r : ds.records) CHECK((r.length >= 5 && r.length <= 8));

    const auto one = make_synthetic_vocab(1, 1, 5, 5);
    CHECK(one.entries.size() == 1);
    CHECK(one.tokenizer.size() == Tokenizer::kFirstWord + 3 + 1);
    CHECK_THROWS_AS(make_synthetic_vocab(1, 0, 5, 8), InputError);
    CHECK_THROWS_AS(make_synthetic_vocab(1, 10, 4, 8), InputError);
  }

  TEST_CASE("held-out split") {
    const auto sv = make_synthetic_vocab(3, 101, 5, 6);
    const auto ds = filter_vocabulary(sv.entries);
    const auto [train, held] = split_holdout(ds, 0.1, 9);
    CHECK(held.records.size() == 10);
    CHECK(train.records.size() + held.records.size() == ds.records.size());
    for (const auto& r : held.records) {
      CHECK(std::find(train.records.begin(), train.records.end(), r) == train.records.end());
    }
    CHECK(std::is_sorted(held.records.begin(), held.records.end(),
                         [](const auto& x, const auto& y) { return x.token_id < y.token_id; }));
    const auto again = split_holdout(ds, 0.1, 9);
    CHECK(again.second.records == held.records);
  }

  TEST_CASE("vocabulary file round trip") {
    const auto dir = test_support::temp_dir("vocab");
    const auto path = dir / "vocab.txt";
    const std::vector<VocabEntry> v = {{0, "<s>"}, {1, "_hello"}, {2, "\xE2\x96\x81world"}, {7, "tab free"}};
    write_vocab_file(path, v);
    const auto back = read_vocab_file(path);
    REQUIRE(back.size() == v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      CHECK(back[i].token_id == v[i].token_id);
      CHECK(back[i].surface == v[i].surface);
    }
    std::ofstream(dir / "bad.txt") << "12 no tab\n";
    CHECK_THROWS(read_vocab_file(dir / "bad.txt"));
  }

  TEST_CASE("dataset json round trip") {
    auto ds = filter_vocabulary(crafted());
    ds.separator = Separator::kSlash;
    CHECK(dataset_from_json(dataset_to_json(ds)) == ds);
  }
}
