#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "charprobe/model.hpp"
#include "charprobe/tensor.hpp"
#include "charprobe/tokenizer.hpp"

namespace charprobe {

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

// Canonical JSON text: sorted keys, no insignificant whitespace.
std::string canonical_dump(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Model checkpoints
//
//   "CPML" | u32 LE format version | u64 LE header length | header JSON |
//   payload of little-endian float32 tensors in header order
//
// The header carries the ModelConfig, the tokenizer, the version tag, the
// tensor list and the CRC-32 of the payload.

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const ModelParams& params, const Tokenizer& tokenizer);
std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params, const Tokenizer& tokenizer);

struct Checkpoint {
  ModelParams params;
  Tokenizer tokenizer;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Activation traces (".cptrace")
//
//   "CPTR" | u64 LE header length | header JSON | payload
//
// One prompt per file. Tensors are optional; a header-only file is a valid
// empty trace.

inline constexpr int kTraceVersion = 1;

struct TraceMeta {
  std::string model_name;
  int num_layers = 0;
  int num_heads = 0;
  int model_dim = 0;
  int ffn_dim = 0;
  int vocab_size = 0;
  nlohmann::json tokenizer = nlohmann::json::object();
  std::string prompt_text;
  std::vector<int> token_ids;
  std::string source_dtype = "float32";
  // Analysis annotations: kind ("probe"|"attention"|"eval"|"embeddings"), position,
  // label, token_id, bos_position, target_span [begin, end), query_positions.
  nlohmann::json annotations = nlohmann::json::object();

  friend bool operator==(const TraceMeta&, const TraceMeta&) = default;
};

struct TraceFile {
  TraceMeta meta;
  ForwardTrace trace;
  std::optional<Tensor> embeddings;  // [vocab_size, model_dim]
};

// Throws FormatError if any present tensor disagrees with the metadata.
void write_trace(const std::filesystem::path& path, const TraceFile& file);
std::vector<std::uint8_t> encode_trace(const TraceFile& file);

TraceFile read_trace(const std::filesystem::path& path);
TraceFile decode_trace(std::span<const std::uint8_t> bytes);

TraceMeta trace_meta_for(const ModelConfig& config, const Tokenizer& tokenizer, std::string model_name,
                         std::string prompt_text, std::vector<int> token_ids);

// Bytes are compared, so NaN payloads and signed zeros count.
bool bit_equal(const Tensor& a, const Tensor& b);
bool bit_equal(const ForwardTrace& a, const ForwardTrace& b);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace charprobe
