#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "charprobe/errors.hpp"
#include "charprobe/model.hpp"
#include "charprobe/serialize.hpp"
#include "helpers.hpp"

using namespace charprobe;

namespace {

TraceFile sample_trace(bool with_tensors) {
  const auto tok = test_support::small_tokenizer();
  const auto params = test_support::random_params(test_support::tiny_config(tok.size()));
  const Model model(params);
  const std::string text = "token : t o";
  const auto ids = tok.encode(text);
  TraceFile f;
  f.meta = trace_meta_for(params.config, tok, "toy", text, ids);
  f.meta.annotations = {{"kind", "probe"}, {"n", 3}, {"label", 10}, {"position", ids.size() - 1}};
  if (with_tensors) {
    f.trace = *forward(model, ids, true).trace;
    Tensor emb({static_cast<std::size_t>(tok.size()), 16});
    for (std::size_t i = 0; i < emb.size(); ++i) emb.data[i] = static_cast<float>(params.weights.token_embeddings.data()[i]);
    f.embeddings = emb;
  }
  return f;
}

}  // namespace

TEST_SUITE("serialize") {
  TEST_CASE("crc32 check value") {
    const std::string s = "123456789";
    CHECK(crc32({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}) == 0xCBF43926u);
    CHECK(crc32({}) == 0u);
  }

  TEST_CASE("canonical json sorts keys") {
    CHECK(canonical_dump(nlohmann::json{{"b", 1}, {"a", 0.5}}) == R"({"a":0.5,"b":1})");
  }

  TEST_CASE("checkpoint round trip is bit exact") {
    const auto tok = test_support::small_tokenizer();
    auto params = test_support::random_params(test_support::tiny_config(tok.size()));
    params.version = 42;
    params.weights.unembed(0, 0) = -0.0f;
    const auto dir = test_support::temp_dir("ckpt");
    write_checkpoint(dir / "m.cpml", params, tok);
    const auto back = read_checkpoint(dir / "m.cpml");
    CHECK(bit_equal(back.params, params));
    CHECK(std::signbit(back.params.weights.unembed(0, 0)));
    CHECK(back.tokenizer == tok);
    CHECK(encode_checkpoint(back.params, back.tokenizer) == encode_checkpoint(params, tok));
    for (const auto& e : std::filesystem::directory_iterator(dir)) CHECK(e.path().extension() != ".tmp");
  }

  TEST_CASE("checkpoint corruption is rejected") {
    const auto tok = test_support::small_tokenizer();
    const auto params = test_support::random_params(test_support::tiny_config(tok.size()));
    const auto bytes = encode_checkpoint(params, tok);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad_magic), FormatError);

    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_AS(decode_checkpoint(bad_version), UnsupportedVersionError);

    auto flipped = bytes;
    flipped[flipped.size() - 3] ^= 0x10;
    CHECK_THROWS_AS(decode_checkpoint(flipped), ChecksumError);

    for (std::size_t len = 0; len < bytes.size(); len += 97) {
      CHECK_THROWS_AS(decode_checkpoint(std::span(bytes).first(len)), FormatError);
    }
    CHECK_THROWS_AS(decode_checkpoint(std::span(bytes).first(bytes.size() - 1)), FormatError);
    auto extra = bytes;
    extra.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint(extra), FormatError);
  }

  TEST_CASE("trace round trip is bit exact") {
    const auto f = sample_trace(true);
    const auto dir = test_support::temp_dir("trace");
    write_trace(dir / "a.cptrace", f);
    const auto back = read_trace(dir / "a.cptrace");
    CHECK(back.meta == f.meta);
    CHECK(bit_equal(back.trace, f.trace));
    REQUIRE(back.embeddings);
    CHECK(bit_equal(*back.embeddings, *f.embeddings));
    CHECK(encode_trace(back) == encode_trace(f));
  }

  TEST_CASE("header-only trace is valid") {
    const auto f = sample_trace(false);
    const auto back = decode_trace(encode_trace(f));
    CHECK(back.meta == f.meta);
    CHECK(back.trace.hidden_states.empty());
    CHECK(back.trace.attention.empty());
    CHECK_FALSE(back.embeddings);
  }

  TEST_CASE("trace corruption is rejected at every truncation length") {
    auto f = sample_trace(true);
    f.embeddings.reset();
    const auto bytes = encode_trace(f);
    for (std::size_t len = 0; len < bytes.size(); ++len) {
      CHECK_THROWS_AS(decode_trace(std::span(bytes).first(len)), FormatError);
    }
    auto flipped = bytes;
    flipped.back() ^= 0x01;
    CHECK_THROWS_AS(decode_trace(flipped), ChecksumError);
    auto bad_magic = bytes;
    bad_magic[3] = 'Q';
    CHECK_THROWS_AS(decode_trace(bad_magic), FormatError);
  }

  TEST_CASE("unsupported trace version") {
    const auto f = sample_trace(false);
    auto bytes = encode_trace(f);
    const std::string from = "\"format_version\":1";
    const std::string to = "\"format_version\":7";
    auto it = std::search(bytes.begin(), bytes.end(), from.begin(), from.end());
    REQUIRE(it != bytes.end());
    std::copy(to.begin(), to.end(), it);
    CHECK_THROWS_AS(decode_trace(bytes), UnsupportedVersionError);
  }

  TEST_CASE("shape mismatch on write") {
    auto f = sample_trace(true);
    f.trace.attention.shape[0] += 1;
    f.trace.attention.data.resize(Tensor::element_count(f.trace.attention.shape));
    CHECK_THROWS_AS(encode_trace(f), FormatError);
    auto g = sample_trace(false);
    g.meta.token_ids.push_back(1000);
    CHECK_THROWS_AS(encode_trace(g), FormatError);
  }
}
