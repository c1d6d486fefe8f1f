#include "charprobe/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <zlib.h>

#include "charprobe/errors.hpp"

namespace charprobe {

namespace {

constexpr char kCheckpointMagic[4] = {'C', 'P', 'M', 'L'};
constexpr char kTraceMagic[4] = {'C', 'P', 'T', 'R'};

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

void put_floats(std::vector<std::uint8_t>& out, const float* data, std::size_t n) {
  const std::size_t base = out.size();
  out.resize(base + 4 * n);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + base, data, 4 * n);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(data[i]);
      for (int b = 0; b < 4; ++b) out[base + 4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
  }
}

void get_floats(const std::uint8_t* p, float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(data, p, 4 * n);
  } else {
    for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i));
  }
}

// Cursor over an untrusted byte buffer; every read is bounds-checked.
struct Reader {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;

  std::size_t remaining() const { return bytes.size() - pos; }
  const std::uint8_t* take(std::size_t n, const char* what) {
    if (n > remaining()) throw ChecksumError(std::string("truncated file: ") + what);
    const auto* p = bytes.data() + pos;
    pos += n;
    return p;
  }
};

void check_magic(Reader& r, const char (&magic)[4], const char* kind) {
  if (r.remaining() < 4 || std::memcmp(r.bytes.data(), magic, 4) != 0) {
    throw FormatError(std::string("not a ") + kind + " file (bad magic)");
  }
  r.pos = 4;
}

nlohmann::json parse_header(Reader& r) {
  const auto len = get_le<std::uint64_t>(r.take(8, "header length"));
  if (len > r.remaining()) throw ChecksumError("truncated file: header length exceeds file size");
  const auto* p = r.take(static_cast<std::size_t>(len), "header");
  try {
    auto j = nlohmann::json::parse(p, p + len);
    if (!j.is_object()) throw FormatError("header is not a JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
}

std::vector<std::size_t> shape_of(const nlohmann::json& j) {
  if (!j.is_array()) throw FormatError("tensor shape is not an array");
  std::vector<std::size_t> s;
  for (const auto& d : j) {
    if (!d.is_number_unsigned()) throw FormatError("tensor dimension is not a non-negative integer");
    s.push_back(d.get<std::size_t>());
  }
  return s;
}

// Element count with overflow and file-size guards.
std::size_t checked_count(const std::vector<std::size_t>& shape, std::size_t limit) {
  std::size_t n = 1;
  for (auto d : shape) {
    if (d != 0 && n > limit / d) throw FormatError("tensor shape exceeds payload size");
    n *= d;
  }
  return n;
}

struct Payload {
  std::vector<std::pair<std::string, Tensor>> tensors;
};

Payload read_payload(Reader& r, const nlohmann::json& header) {
  if (!header.contains("tensors") || !header.contains("payload_crc32")) {
    throw FormatError("header lacks tensors or payload_crc32");
  }
  const auto& list = header.at("tensors");
  if (!list.is_array()) throw FormatError("tensors is not an array");
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> decl;
  for (const auto& t : list) {
    if (!t.is_object() || !t.contains("name") || !t.contains("shape") || !t.at("name").is_string()) {
      throw FormatError("malformed tensor entry");
    }
    auto shape = shape_of(t.at("shape"));
    const auto n = checked_count(shape, r.remaining() / 4 + 1);
    total += n;
    decl.emplace_back(t.at("name").get<std::string>(), std::move(shape));
  }
  if (total * 4 != r.remaining()) {
    throw ChecksumError("payload size " + std::to_string(r.remaining()) + " does not match declared " +
                        std::to_string(total * 4) + " bytes");
  }
  const auto expected_crc = header.at("payload_crc32").get<std::uint32_t>();
  if (crc32(r.bytes.subspan(r.pos)) != expected_crc) throw ChecksumError("payload checksum mismatch");

  Payload out;
  for (auto& [name, shape] : decl) {
    Tensor t(shape);
    get_floats(r.take(4 * t.size(), "tensor"), t.data.data(), t.size());
    out.tensors.emplace_back(name, std::move(t));
  }
  return out;
}

std::vector<std::uint8_t> assemble(std::span<const char> magic, std::optional<std::uint32_t> version,
                                   nlohmann::json header, const std::vector<std::uint8_t>& payload) {
  header["payload_crc32"] = crc32(payload);
  const std::string text = canonical_dump(header);
  std::vector<std::uint8_t> out(magic.begin(), magic.end());
  if (version) put_le<std::uint32_t>(out, *version);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    c = ::crc32(c, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(c);
}

std::string canonical_dump(const nlohmann::json& j) { return j.dump(); }

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw InputError("cannot read " + path.string());
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write then rename so readers never see a partial file.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params, const Tokenizer& tokenizer) {
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<std::uint8_t> payload;
  params.weights.for_each([&](const std::string& name, const auto& t) {
    tensors.push_back({{"name", name},
                       {"shape", {static_cast<std::size_t>(t.rows()), static_cast<std::size_t>(t.cols())}}});
    put_floats(payload, t.data(), static_cast<std::size_t>(t.size()));
  });
  nlohmann::json header = {{"config", params.config.to_json()},
                           {"tokenizer", tokenizer.to_json()},
                           {"version_tag", params.version},
                           {"tensors", tensors}};
  return assemble(kCheckpointMagic, kCheckpointVersion, std::move(header), payload);
}

void write_checkpoint(const std::filesystem::path& path, const ModelParams& params, const Tokenizer& tokenizer) {
  write_file_bytes(path, encode_checkpoint(params, tokenizer));
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r{bytes};
  check_magic(r, kCheckpointMagic, "checkpoint");
  const auto version = get_le<std::uint32_t>(r.take(4, "version"));
  if (version != kCheckpointVersion) {
    throw UnsupportedVersionError("checkpoint format version " + std::to_string(version) + " is not supported");
  }
  const auto header = parse_header(r);
  auto payload = read_payload(r, header);

  ModelConfig cfg;
  Tokenizer tok;
  std::int64_t tag = 0;
  try {
    cfg = ModelConfig::from_json(header.at("config"));
    tok = Tokenizer::from_json(header.at("tokenizer"));
    tag = header.at("version_tag").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const InputError& e) {
    throw FormatError(std::string("invalid checkpoint header: ") + e.what());
  }

  Checkpoint ck{ModelParams{cfg, Weights<float>::zeros(cfg), tag}, std::move(tok)};
  std::size_t i = 0;
  ck.params.weights.for_each([&](const std::string& name, auto& t) {
    if (i >= payload.tensors.size()) throw FormatError("checkpoint is missing tensor " + name);
    const auto& [got_name, src] = payload.tensors[i++];
    const std::vector<std::size_t> want{static_cast<std::size_t>(t.rows()), static_cast<std::size_t>(t.cols())};
    if (got_name != name || src.shape != want) {
      throw FormatError("checkpoint tensor " + got_name + " does not match expected " + name);
    }
    std::memcpy(t.data(), src.data.data(), 4 * src.size());
  });
  if (i != payload.tensors.size()) throw FormatError("checkpoint has extra tensors");
  return ck;
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

// ---------------------------------------------------------------------------
// Traces

TraceMeta trace_meta_for(const ModelConfig& config, const Tokenizer& tokenizer, std::string model_name,
                         std::string prompt_text, std::vector<int> token_ids) {
  TraceMeta m;
  m.model_name = std::move(model_name);
  m.num_layers = config.num_layers;
  m.num_heads = config.num_heads;
  m.model_dim = config.model_dim;
  m.ffn_dim = config.ffn_dim;
  m.vocab_size = config.vocab_size;
  m.tokenizer = tokenizer.to_json();
  m.prompt_text = std::move(prompt_text);
  m.token_ids = std::move(token_ids);
  return m;
}

namespace {

std::vector<std::pair<std::string, std::vector<std::size_t>>> expected_shapes(const TraceMeta& m) {
  const auto L = static_cast<std::size_t>(m.num_layers);
  const auto H = static_cast<std::size_t>(m.num_heads);
  const auto d = static_cast<std::size_t>(m.model_dim);
  const auto F = static_cast<std::size_t>(m.ffn_dim);
  const auto V = static_cast<std::size_t>(m.vocab_size);
  const auto T = m.token_ids.size();
  return {{"embeddings", {V, d}},
          {"hidden_states", {L + 1, T, d}},
          {"attention", {L, H, T, T}},
          {"ffn_activations", {L, T, F}}};
}

void check_meta(const TraceMeta& m) {
  if (m.num_layers < 1 || m.num_heads < 1 || m.model_dim < 1 || m.ffn_dim < 1 || m.vocab_size < 1) {
    throw FormatError("trace dimensions must be positive");
  }
  for (int id : m.token_ids) {
    if (id < 0 || id >= m.vocab_size) throw FormatError("trace token id out of range");
  }
}

}  // namespace

std::vector<std::uint8_t> encode_trace(const TraceFile& file) {
  const auto& m = file.meta;
  check_meta(m);
  const std::array<const Tensor*, 4> present{file.embeddings ? &*file.embeddings : nullptr,
                                             &file.trace.hidden_states, &file.trace.attention,
                                             &file.trace.ffn_activations};
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<std::uint8_t> payload;
  const auto shapes = expected_shapes(m);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const Tensor* t = present[i];
    if (!t || t->empty()) continue;
    if (t->shape != shapes[i].second) throw FormatError(shapes[i].first + " shape disagrees with trace metadata");
    if (t->data.size() != Tensor::element_count(t->shape)) throw FormatError(shapes[i].first + " byte count mismatch");
    tensors.push_back({{"name", shapes[i].first}, {"shape", t->shape}});
    put_floats(payload, t->data.data(), t->size());
  }
  nlohmann::json header = {{"format_version", kTraceVersion},
                           {"model_name", m.model_name},
                           {"num_layers", m.num_layers},
                           {"num_heads", m.num_heads},
                           {"model_dim", m.model_dim},
                           {"ffn_dim", m.ffn_dim},
                           {"vocab_size", m.vocab_size},
                           {"tokenizer", m.tokenizer},
                           {"prompt_text", m.prompt_text},
                           {"token_ids", m.token_ids},
                           {"source_dtype", m.source_dtype},
                           {"annotations", m.annotations},
                           {"tensors", tensors}};
  return assemble(kTraceMagic, std::nullopt, std::move(header), payload);
}

void write_trace(const std::filesystem::path& path, const TraceFile& file) {
  write_file_bytes(path, encode_trace(file));
}

TraceFile decode_trace(std::span<const std::uint8_t> bytes) {
  Reader r{bytes};
  check_magic(r, kTraceMagic, "trace");
  const auto header = parse_header(r);
  if (!header.contains("format_version") || !header.at("format_version").is_number_integer()) {
    throw FormatError("trace header lacks format_version");
  }
  const int version = header.at("format_version").get<int>();
  if (version != kTraceVersion) {
    throw UnsupportedVersionError("trace format version " + std::to_string(version) + " is not supported");
  }
  TraceFile out;
  auto& m = out.meta;
  try {
    m.model_name = header.at("model_name").get<std::string>();
    m.num_layers = header.at("num_layers").get<int>();
    m.num_heads = header.at("num_heads").get<int>();
    m.model_dim = header.at("model_dim").get<int>();
    m.ffn_dim = header.at("ffn_dim").get<int>();
    m.vocab_size = header.at("vocab_size").get<int>();
    m.tokenizer = header.value("tokenizer", nlohmann::json::object());
    m.prompt_text = header.at("prompt_text").get<std::string>();
    m.token_ids = header.at("token_ids").get<std::vector<int>>();
    m.source_dtype = header.value("source_dtype", std::string("float32"));
    m.annotations = header.value("annotations", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed trace header: ") + e.what());
  }
  check_meta(m);
  auto payload = read_payload(r, header);

  const auto shapes = expected_shapes(m);
  std::vector<bool> seen(shapes.size(), false);
  for (auto& [name, t] : payload.tensors) {
    std::size_t k = 0;
    while (k < shapes.size() && shapes[k].first != name) ++k;
    if (k == shapes.size()) throw FormatError("unknown trace tensor " + name);
    if (seen[k]) throw FormatError("duplicate trace tensor " + name);
    seen[k] = true;
    if (t.shape != shapes[k].second) throw FormatError(name + " shape disagrees with trace header");
    switch (k) {
      case 0: out.embeddings = std::move(t); break;
      case 1: out.trace.hidden_states = std::move(t); break;
      case 2: out.trace.attention = std::move(t); break;
      default: out.trace.ffn_activations = std::move(t); break;
    }
  }
  return out;
}

TraceFile read_trace(const std::filesystem::path& path) { return decode_trace(read_file_bytes(path)); }

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data.size() == b.data.size() &&
         std::memcmp(a.data.data(), b.data.data(), 4 * a.data.size()) == 0;
}

bool bit_equal(const ForwardTrace& a, const ForwardTrace& b) {
  return bit_equal(a.hidden_states, b.hidden_states) && bit_equal(a.attention, b.attention) &&
         bit_equal(a.ffn_activations, b.ffn_activations);
}

}  // namespace charprobe
