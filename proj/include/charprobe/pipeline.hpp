#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "charprobe/attention.hpp"
#include "charprobe/corpus.hpp"
#include "charprobe/eval.hpp"
#include "charprobe/model.hpp"
#include "charprobe/neurons.hpp"
#include "charprobe/probe.hpp"
#include "charprobe/train.hpp"

namespace charprobe {

// Run configuration, parsed from JSON. Every field has a default and unknown
// keys are rejected. See README for the schema.
struct RunConfig {
  std::filesystem::path output_dir;
  std::uint64_t seed = 0;
  int jobs = 1;

  struct Vocabulary {
    std::string kind = "synthetic";  // "synthetic" | "file"
    std::uint64_t seed = 7;
    std::size_t size = 500;
    int min_len = 5;
    int max_len = 8;
    std::filesystem::path path;
    std::string word_head_marker = "_";
  } vocabulary;
  double heldout_fraction = 0.1;

  struct ModelSource {
    std::string kind = "train";  // "train" | "checkpoint" | "traces"
    std::filesystem::path path;
    ModelConfig config;  // vocab_size and rng_seed are filled in
    TrainParams train;   // heldout ids, prompt, seed and jobs are filled in
  } model;

  Separator separator = Separator::kWhitespace;
  std::vector<std::string> shots = {"hello", "world", "orange"};

  struct Stages {
    bool eval = true;
    bool probe = true;
    bool neurons = true;
    bool attention = true;
  } stages;

  struct Probe {
    std::vector<int> positions = {1, 2, 3, 4, 5};
    int folds = 10;
    SplitMode split = SplitMode::kDisjoint;
    ProbeConfig config;
    bool embedding_probe = true;
  } probe;

  struct Neurons {
    std::vector<int> positions = {1, 2, 3, 4, 5};
    std::size_t samples = 1000;
    double top_pct = 0.01;
    double consensus = 0.75;
    int m = 20;
    bool aggregate_positions = false;
    std::size_t top_k = 100;
    int random_controls = 5;
    std::vector<int> overlap = {1, 2, 3};
    std::string alphabet;  // characters for per-character sets
  } neurons;

  struct Attention {
    std::size_t samples = 1000;
    bool restrict_to_correct = true;
    double tolerance = 0.1;
  } attention;

  PromptSpec prompt_spec() const { return {shots, separator}; }

  // Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  // to_json() without the fields that cannot change results (jobs,
  // output_dir). Embedded in every stage output and hashed.
  nlohmann::json result_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  // CRC-32 of canonical result_json(), as 8 hex digits.
  std::string hash() const;
};

// Output root when a config names none: $CHARPROBE_OUT, else "charprobe-out".
std::filesystem::path default_output_root();

enum class Stage { kDataset, kModel, kEval, kProbe, kNeurons, kAblate, kAttention, kComparison, kReport };

std::string_view to_string(Stage s);
Stage stage_from_string(std::string_view s);

enum class ReportFormat { kJson, kCsv, kBoth };

struct RunOptions {
  // Stages to run; prerequisites are loaded from disk when present with a
  // matching config hash, otherwise computed.
  std::set<Stage> stages;
  // Skip requested stages whose outputs already exist with a matching hash.
  bool resume = false;
  ReportFormat report_format = ReportFormat::kBoth;
  std::function<void(const std::string&)> log;
};

// Everything a run produced or loaded.
struct Bundle {
  RunConfig config;
  Tokenizer tokenizer;
  SpellingDataset dataset;
  SpellingDataset heldout;
  std::optional<ModelParams> params;
  std::vector<TraceFile> traces;
  std::optional<nlohmann::json> eval;        // {"all": EvalReport, "heldout": EvalReport}
  std::vector<int> correct_token_ids;
  std::optional<ProbeReport> probe;
  std::vector<KnowledgeNeuronSet> neuron_sets;
  std::optional<nlohmann::json> neurons;     // histograms, overlap, sets
  std::optional<nlohmann::json> ablation;
  std::optional<AttentionProfile> attention;
  std::optional<PeakComparison> comparison;
};

// Stages implied by the config flags (all of them plus the report).
std::set<Stage> configured_stages(const RunConfig& config);

// Runs stages in dependency order. A failing stage raises StageError; files
// from earlier stages stay on disk.
Bundle run(const RunConfig& config, const RunOptions& options);

// Writes one data file per figure-style artifact under <output_dir>/report.
std::vector<std::filesystem::path> export_report(const Bundle& bundle, ReportFormat format);

// Prompt manifest consumed by the activation exporter.
struct ManifestPrompt {
  std::string id;
  std::string kind;  // "probe" | "attention" | "eval"
  int token_id = 0;
  std::string surface;
  std::string text;
  int n = 0;      // probe: predicted position
  int label = 0;  // probe: class index of the n-th character
  // Attention: character ranges [begin, end) within `text`.
  std::pair<std::size_t, std::size_t> target_chars{0, 0};
  std::vector<std::pair<std::size_t, std::size_t>> query_chars;
  std::string expected;  // eval: gold spelling

  friend bool operator==(const ManifestPrompt&, const ManifestPrompt&) = default;
};

struct PromptManifest {
  int version = 1;
  std::string separator = "whitespace";
  std::vector<std::string> shots;
  std::vector<ManifestPrompt> prompts;

  nlohmann::json to_json() const;
  static PromptManifest from_json(const nlohmann::json& j);
  friend bool operator==(const PromptManifest&, const PromptManifest&) = default;
};

PromptManifest build_manifest(const SpellingDataset& ds, const PromptSpec& spec, std::span<const int> positions,
                              bool include_eval = true);

// Runs the toy model over every manifest prompt and writes one .cptrace per
// prompt, annotated the way the analysis stages expect. Stands in for the
// external exporter on toy models.
std::vector<std::filesystem::path> export_traces(const Model& model, const Tokenizer& tokenizer,
                                                 const PromptManifest& manifest, const std::filesystem::path& dir,
                                                 const std::string& model_name = "toy");

// Loads every *.cptrace file in a directory, sorted by file name.
std::vector<TraceFile> load_trace_dir(const std::filesystem::path& dir);

// Writes `doc` as {"config": ..., "config_hash": ..., "result": doc}.
void write_stage_json(const std::filesystem::path& path, const RunConfig& config, const nlohmann::json& result);
void write_text(const std::filesystem::path& path, const std::string& text);

ProbeReport probe_report_from_json(const nlohmann::json& j);
AttentionProfile attention_profile_from_json(const nlohmann::json& j);
KnowledgeNeuronSet neuron_set_from_json(const nlohmann::json& j);

}  // namespace charprobe
