#include "charprobe/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "charprobe/detail/parallel.hpp"
#include "charprobe/errors.hpp"
#include "charprobe/serialize.hpp"

namespace charprobe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::size_t kMinSpellLength = 5;

// Strict reader over one JSON object: unknown keys are configuration errors.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.push_back(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path(key) + ": " + e.what());
    }
  }

  void count(const std::string& key, std::size_t& out) {
    std::int64_t v = static_cast<std::int64_t>(out);
    get(key, v);
    if (v < 0) throw ConfigError(path(key) + " must be >= 0");
    out = static_cast<std::size_t>(v);
  }

  void path_field(const std::string& key, fs::path& out) {
    std::string s = out.string();
    get(key, s);
    out = s;
  }

  const json* object(const std::string& key) {
    seen_.push_back(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) {
        throw ConfigError("unknown configuration key '" + path(k) + "'");
      }
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::vector<std::string> seen_;
};

std::string crc_hex(const std::string& text) {
  const auto crc = crc32(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc);
  return buf;
}

std::string split_name(SplitMode m) { return m == SplitMode::kRandom ? "random" : "disjoint"; }

void check_positions(const std::vector<int>& positions, const std::string& where, bool allow_empty) {
  if (positions.empty() && !allow_empty) throw ConfigError(where + " must not be empty");
  for (int n : positions) {
    if (n < 1 || n > kMaxProbePosition) throw ConfigError(where + " entries must lie in 1..5");
  }
  auto sorted = positions;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError(where + " has duplicates");
  }
}

bool lower_word(const std::string& w) {
  return !w.empty() && std::all_of(w.begin(), w.end(), [](char c) { return c >= 'a' && c <= 'z'; });
}

std::string csv_number(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

// Token id -> character offset of its first byte, computed by decoding prefixes.
std::vector<std::size_t> token_offsets(const Tokenizer& tok, std::span<const int> ids) {
  std::vector<std::size_t> out;
  out.reserve(ids.size() + 1);
  std::size_t at = 0;
  for (int id : ids) {
    out.push_back(at);
    at += tok.decode(std::span<const int>(&id, 1)).size();
  }
  out.push_back(at);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

void RunConfig::validate() const {
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (vocabulary.kind == "synthetic") {
    if (vocabulary.size < 1) throw ConfigError("vocabulary.size must be >= 1");
    if (vocabulary.min_len < 5 || vocabulary.max_len < vocabulary.min_len) {
      throw ConfigError("vocabulary lengths must satisfy 5 <= min_len <= max_len");
    }
  } else if (vocabulary.kind == "file") {
    if (vocabulary.path.empty()) throw ConfigError("vocabulary.path is required for a file vocabulary");
  } else {
    throw ConfigError("vocabulary.kind must be synthetic or file");
  }
  if (vocabulary.word_head_marker.empty()) throw ConfigError("vocabulary.word_head_marker must not be empty");
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) throw ConfigError("heldout_fraction must lie in [0, 1)");

  if (model.kind != "train" && model.kind != "checkpoint" && model.kind != "traces") {
    throw ConfigError("model.kind must be train, checkpoint or traces");
  }
  if (model.kind != "train" && model.path.empty()) throw ConfigError("model.path is required for " + model.kind);
  if (model.kind == "traces" && stages.neurons) {
    throw ConfigError("knowledge-neuron attribution needs gradients; it cannot run on traces (set stages.neurons false)");
  }
  if (model.kind == "train") {
    auto cfg = model.config;
    cfg.vocab_size = 64;  // placeholder; the real size comes from the tokenizer
    try {
      cfg.validate();
    } catch (const InputError& e) {
      throw ConfigError(std::string("model.config: ") + e.what());
    }
    if (model.train.max_steps < 1 || model.train.batch_size < 1) {
      throw ConfigError("model.train needs max_steps >= 1 and batch_size >= 1");
    }
    if (!(model.train.learning_rate > 0.0)) throw ConfigError("model.train.learning_rate must be > 0");
  }

  if (shots.empty()) throw ConfigError("shots must not be empty");
  for (const auto& s : shots) {
    if (!lower_word(s) || s.size() < 2) throw ConfigError("shot '" + s + "' must be a lowercase word of 2+ letters");
  }

  check_positions(probe.positions, "probe.positions", false);
  if (probe.folds < 2) throw ConfigError("probe.folds must be >= 2");
  if (probe.config.max_epochs < 1 || probe.config.batch_size < 1 || !(probe.config.learning_rate > 0.0)) {
    throw ConfigError("probe.config needs max_epochs >= 1, batch_size >= 1, learning_rate > 0");
  }

  check_positions(neurons.positions, "neurons.positions", true);
  if (neurons.samples < 1) throw ConfigError("neurons.samples must be >= 1");
  if (!(neurons.top_pct > 0.0 && neurons.top_pct <= 1.0)) throw ConfigError("neurons.top_pct must lie in (0, 1]");
  if (!(neurons.consensus > 0.0 && neurons.consensus <= 1.0)) {
    throw ConfigError("neurons.consensus must lie in (0, 1]");
  }
  if (neurons.m < 1) throw ConfigError("neurons.m must be >= 1");
  if (neurons.top_k < 1) throw ConfigError("neurons.top_k must be >= 1");
  if (neurons.random_controls < 0) throw ConfigError("neurons.random_controls must be >= 0");
  if (!neurons.overlap.empty()) {
    check_positions(neurons.overlap, "neurons.overlap", true);
    if (neurons.overlap.size() < 2 || neurons.overlap.size() > 3) {
      throw ConfigError("neurons.overlap needs 2 or 3 positions");
    }
    for (int n : neurons.overlap) {
      if (std::find(neurons.positions.begin(), neurons.positions.end(), n) == neurons.positions.end()) {
        throw ConfigError("neurons.overlap positions must be listed in neurons.positions");
      }
    }
  }
  for (char c : neurons.alphabet) {
    if (c < 'a' || c > 'z') throw ConfigError("neurons.alphabet must hold lowercase letters");
  }

  if (attention.samples < 1) throw ConfigError("attention.samples must be >= 1");
  if (!(attention.tolerance >= 0.0)) throw ConfigError("attention.tolerance must be >= 0");
}

json RunConfig::to_json() const {
  auto j = result_json();
  j["output_dir"] = output_dir.string();
  j["jobs"] = jobs;
  return j;
}

json RunConfig::result_json() const {
  const auto& mc = model.config;
  const auto& tp = model.train;
  const auto& pc = probe.config;
  return {
      {"seed", seed},
      {"vocabulary",
       {{"kind", vocabulary.kind},
        {"seed", vocabulary.seed},
        {"size", vocabulary.size},
        {"min_len", vocabulary.min_len},
        {"max_len", vocabulary.max_len},
        {"path", vocabulary.path.string()},
        {"word_head_marker", vocabulary.word_head_marker}}},
      {"heldout_fraction", heldout_fraction},
      {"model",
       {{"kind", model.kind},
        {"path", model.path.string()},
        {"config",
         {{"num_layers", mc.num_layers},
          {"num_heads", mc.num_heads},
          {"model_dim", mc.model_dim},
          {"ffn_dim", mc.ffn_dim},
          {"max_seq_len", mc.max_seq_len}}},
        {"train",
         {{"learning_rate", tp.learning_rate},
          {"batch_size", tp.batch_size},
          {"max_steps", tp.max_steps},
          {"warmup_steps", tp.warmup_steps},
          {"min_lr_fraction", tp.min_lr_fraction},
          {"grad_clip", tp.grad_clip},
          {"canonical_fraction", tp.canonical_fraction},
          {"slash_fraction", tp.slash_fraction},
          {"max_pairs", tp.max_pairs}}}}},
      {"separator", std::string(charprobe::to_string(separator))},
      {"shots", shots},
      {"stages",
       {{"eval", stages.eval}, {"probe", stages.probe}, {"neurons", stages.neurons}, {"attention", stages.attention}}},
      {"probe",
       {{"positions", probe.positions},
        {"folds", probe.folds},
        {"split", split_name(probe.split)},
        {"embedding_probe", probe.embedding_probe},
        {"config",
         {{"hidden1", pc.hidden1},
          {"hidden2", pc.hidden2},
          {"learning_rate", pc.learning_rate},
          {"batch_size", pc.batch_size},
          {"max_epochs", pc.max_epochs},
          {"patience", pc.patience},
          {"min_delta", pc.min_delta}}}}},
      {"neurons",
       {{"positions", neurons.positions},
        {"samples", neurons.samples},
        {"top_pct", neurons.top_pct},
        {"consensus", neurons.consensus},
        {"m", neurons.m},
        {"aggregate_positions", neurons.aggregate_positions},
        {"top_k", neurons.top_k},
        {"random_controls", neurons.random_controls},
        {"overlap", neurons.overlap},
        {"alphabet", neurons.alphabet}}},
      {"attention",
       {{"samples", attention.samples},
        {"restrict_to_correct", attention.restrict_to_correct},
        {"tolerance", attention.tolerance}}},
  };
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  Fields top(j, "config");
  top.path_field("output_dir", c.output_dir);
  top.get("seed", c.seed);
  top.get("jobs", c.jobs);
  top.get("heldout_fraction", c.heldout_fraction);
  top.get("shots", c.shots);
  std::string sep(charprobe::to_string(c.separator));
  top.get("separator", sep);
  try {
    c.separator = separator_from_string(sep);
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }

  if (const auto* v = top.object("vocabulary")) {
    Fields f(*v, "vocabulary");
    auto& x = c.vocabulary;
    f.get("kind", x.kind);
    f.get("seed", x.seed);
    f.count("size", x.size);
    f.get("min_len", x.min_len);
    f.get("max_len", x.max_len);
    f.path_field("path", x.path);
    f.get("word_head_marker", x.word_head_marker);
    f.finish();
  }
  if (const auto* m = top.object("model")) {
    Fields f(*m, "model");
    f.get("kind", c.model.kind);
    f.path_field("path", c.model.path);
    if (const auto* mc = f.object("config")) {
      Fields g(*mc, "model.config");
      auto& x = c.model.config;
      g.get("num_layers", x.num_layers);
      g.get("num_heads", x.num_heads);
      g.get("model_dim", x.model_dim);
      g.get("ffn_dim", x.ffn_dim);
      g.get("max_seq_len", x.max_seq_len);
      g.finish();
    }
    if (const auto* tp = f.object("train")) {
      Fields g(*tp, "model.train");
      auto& x = c.model.train;
      g.get("learning_rate", x.learning_rate);
      g.get("batch_size", x.batch_size);
      g.get("max_steps", x.max_steps);
      g.get("warmup_steps", x.warmup_steps);
      g.get("min_lr_fraction", x.min_lr_fraction);
      g.get("grad_clip", x.grad_clip);
      g.get("canonical_fraction", x.canonical_fraction);
      g.get("slash_fraction", x.slash_fraction);
      g.get("max_pairs", x.max_pairs);
      g.finish();
    }
    f.finish();
  }
  if (const auto* s = top.object("stages")) {
    Fields f(*s, "stages");
    f.get("eval", c.stages.eval);
    f.get("probe", c.stages.probe);
    f.get("neurons", c.stages.neurons);
    f.get("attention", c.stages.attention);
    f.finish();
  }
  if (const auto* p = top.object("probe")) {
    Fields f(*p, "probe");
    f.get("positions", c.probe.positions);
    f.get("folds", c.probe.folds);
    f.get("embedding_probe", c.probe.embedding_probe);
    std::string split = split_name(c.probe.split);
    f.get("split", split);
    if (split == "disjoint") {
      c.probe.split = SplitMode::kDisjoint;
    } else if (split == "random") {
      c.probe.split = SplitMode::kRandom;
    } else {
      throw ConfigError("probe.split must be disjoint or random");
    }
    if (const auto* pc = f.object("config")) {
      Fields g(*pc, "probe.config");
      auto& x = c.probe.config;
      g.get("hidden1", x.hidden1);
      g.get("hidden2", x.hidden2);
      g.get("learning_rate", x.learning_rate);
      g.get("batch_size", x.batch_size);
      g.get("max_epochs", x.max_epochs);
      g.get("patience", x.patience);
      g.get("min_delta", x.min_delta);
      g.finish();
    }
    f.finish();
  }
  if (const auto* n = top.object("neurons")) {
    Fields f(*n, "neurons");
    auto& x = c.neurons;
    f.get("positions", x.positions);
    f.count("samples", x.samples);
    f.get("top_pct", x.top_pct);
    f.get("consensus", x.consensus);
    f.get("m", x.m);
    f.get("aggregate_positions", x.aggregate_positions);
    f.count("top_k", x.top_k);
    f.get("random_controls", x.random_controls);
    f.get("overlap", x.overlap);
    f.get("alphabet", x.alphabet);
    f.finish();
  }
  if (const auto* a = top.object("attention")) {
    Fields f(*a, "attention");
    f.count("samples", c.attention.samples);
    f.get("restrict_to_correct", c.attention.restrict_to_correct);
    f.get("tolerance", c.attention.tolerance);
    f.finish();
  }
  top.finish();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  auto c = from_json(j);
  // Relative paths inside a config file resolve against the file's directory.
  const auto base = path.parent_path();
  auto resolve = [&](fs::path& p) {
    if (!p.empty() && p.is_relative() && !base.empty()) p = base / p;
  };
  resolve(c.vocabulary.path);
  resolve(c.model.path);
  return c;
}

std::string RunConfig::hash() const { return crc_hex(canonical_dump(result_json())); }

fs::path default_output_root() {
  if (const char* env = std::getenv("CHARPROBE_OUT"); env && *env) return env;
  return "charprobe-out";
}

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::kDataset: return "dataset";
    case Stage::kModel: return "model";
    case Stage::kEval: return "eval";
    case Stage::kProbe: return "probe";
    case Stage::kNeurons: return "neurons";
    case Stage::kAblate: return "ablate";
    case Stage::kAttention: return "attention";
    case Stage::kComparison: return "comparison";
    case Stage::kReport: return "report";
  }
  return "?";
}

Stage stage_from_string(std::string_view s) {
  for (auto st : {Stage::kDataset, Stage::kModel, Stage::kEval, Stage::kProbe, Stage::kNeurons, Stage::kAblate,
                  Stage::kAttention, Stage::kComparison, Stage::kReport}) {
    if (to_string(st) == s) return st;
  }
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

std::set<Stage> configured_stages(const RunConfig& config) {
  std::set<Stage> s{Stage::kDataset, Stage::kModel, Stage::kReport};
  if (config.stages.eval) s.insert(Stage::kEval);
  if (config.stages.probe) s.insert(Stage::kProbe);
  if (config.stages.neurons) s.insert({Stage::kNeurons, Stage::kAblate});
  if (config.stages.attention) s.insert(Stage::kAttention);
  if (config.stages.probe && config.stages.attention) s.insert(Stage::kComparison);
  return s;
}

// ---------------------------------------------------------------------------
// Stage outputs

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_stage_json(const fs::path& path, const RunConfig& config, const json& result) {
  const json doc = {{"config", config.result_json()}, {"config_hash", config.hash()}, {"result", result}};
  write_text(path, doc.dump(2) + "\n");
}

namespace {

json read_json_file(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

MatR<double> matrix_from_json(const json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  if (rows.empty()) return {};
  MatR<double> m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows[0].size()) throw FormatError("ragged matrix");
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
  }
  return m;
}

}  // namespace

ProbeReport probe_report_from_json(const json& j) {
  ProbeReport r;
  r.num_layers = j.at("num_layers").get<int>();
  r.positions = j.at("positions").get<std::vector<int>>();
  r.accuracy = j.at("accuracy").get<std::vector<std::vector<double>>>();
  r.fold_std = j.at("fold_std").get<std::vector<std::vector<double>>>();
  r.samples = j.at("samples").get<std::vector<std::vector<std::size_t>>>();
  r.embedding_accuracy = j.at("embedding_accuracy").get<std::vector<double>>();
  if (!j.at("breakthrough_layer").is_null()) r.breakthrough_layer = j.at("breakthrough_layer").get<int>();
  return r;
}

AttentionProfile attention_profile_from_json(const json& j) {
  AttentionProfile p;
  p.per_layer_mean = j.at("per_layer_mean").get<std::vector<double>>();
  p.peak_layer = j.at("peak_layer").get<int>();
  p.sample_count = j.at("sample_count").get<std::size_t>();
  p.requested_samples = j.at("requested_samples").get<std::size_t>();
  p.flagged_insufficient = j.at("flagged_insufficient").get<bool>();
  p.degenerate_rows = j.at("degenerate_rows").get<std::size_t>();
  p.sampled_token_ids = j.at("sampled_token_ids").get<std::vector<int>>();
  return p;
}

KnowledgeNeuronSet neuron_set_from_json(const json& j) {
  KnowledgeNeuronSet s;
  s.key = j.at("key").get<std::string>();
  s.n = j.at("n").get<int>();
  const auto ch = j.at("character").get<std::string>();
  s.character = ch.empty() ? 0 : ch[0];
  s.sample_count = j.at("sample_count").get<std::size_t>();
  s.top_pct = j.at("top_pct").get<double>();
  s.consensus = j.at("consensus").get<double>();
  s.sampled_token_ids = j.at("sampled_token_ids").get<std::vector<int>>();
  for (const auto& n : j.at("neurons")) s.neurons.push_back({n.at("layer").get<int>(), n.at("index").get<int>()});
  s.top_fraction = matrix_from_json(j.at("top_fraction"));
  s.mean_attribution = matrix_from_json(j.at("mean_attribution"));
  return s;
}

// ---------------------------------------------------------------------------
// Manifest

json PromptManifest::to_json() const {
  json prompts = json::array();
  for (const auto& p : this->prompts) {
    json e = {{"id", p.id}, {"kind", p.kind}, {"token_id", p.token_id}, {"surface", p.surface}, {"text", p.text}};
    if (p.kind == "probe") {
      e["n"] = p.n;
      e["label"] = p.label;
    } else if (p.kind == "attention") {
      e["target_chars"] = {p.target_chars.first, p.target_chars.second};
      json q = json::array();
      for (const auto& [b, en] : p.query_chars) q.push_back({b, en});
      e["query_chars"] = q;
    } else if (p.kind == "eval") {
      e["expected"] = p.expected;
    }
    prompts.push_back(std::move(e));
  }
  return {{"version", version}, {"separator", separator}, {"shots", shots}, {"prompts", prompts}};
}

PromptManifest PromptManifest::from_json(const json& j) {
  PromptManifest m;
  try {
    m.version = j.at("version").get<int>();
    if (m.version != 1) throw UnsupportedVersionError("manifest version " + std::to_string(m.version));
    m.separator = j.at("separator").get<std::string>();
    separator_from_string(m.separator);
    m.shots = j.at("shots").get<std::vector<std::string>>();
    for (const auto& e : j.at("prompts")) {
      ManifestPrompt p;
      p.id = e.at("id").get<std::string>();
      p.kind = e.at("kind").get<std::string>();
      p.token_id = e.at("token_id").get<int>();
      p.surface = e.at("surface").get<std::string>();
      p.text = e.at("text").get<std::string>();
      if (p.kind == "probe") {
        p.n = e.at("n").get<int>();
        p.label = e.at("label").get<int>();
      } else if (p.kind == "attention") {
        const auto t = e.at("target_chars").get<std::vector<std::size_t>>();
        if (t.size() != 2) throw FormatError("target_chars must be [begin, end]");
        p.target_chars = {t[0], t[1]};
        for (const auto& q : e.at("query_chars")) {
          const auto r = q.get<std::vector<std::size_t>>();
          if (r.size() != 2) throw FormatError("query_chars entries must be [begin, end]");
          p.query_chars.emplace_back(r[0], r[1]);
        }
      } else if (p.kind == "eval") {
        p.expected = e.at("expected").get<std::string>();
      } else {
        throw FormatError("unknown prompt kind '" + p.kind + "'");
      }
      m.prompts.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed prompt manifest: ") + e.what());
  } catch (const InputError& e) {
    throw FormatError(std::string("malformed prompt manifest: ") + e.what());
  }
  return m;
}

PromptManifest build_manifest(const SpellingDataset& ds, const PromptSpec& spec, std::span<const int> positions,
                              bool include_eval) {
  PromptManifest m;
  m.separator = std::string(to_string(spec.separator));
  m.shots = spec.shots;
  char idbuf[64];
  for (const auto& r : ds.records) {
    for (int n : positions) {
      if (n > r.length) continue;
      ManifestPrompt p;
      std::snprintf(idbuf, sizeof idbuf, "probe-%07d-n%d", r.token_id, n);
      p.id = idbuf;
      p.kind = "probe";
      p.token_id = r.token_id;
      p.surface = r.surface;
      p.text = position_prompt(r.surface, spec, n);
      p.n = n;
      p.label = r.char_at(n) - 'a';
      m.prompts.push_back(std::move(p));
    }
    {
      ManifestPrompt p;
      std::snprintf(idbuf, sizeof idbuf, "attention-%07d", r.token_id);
      p.id = idbuf;
      p.kind = "attention";
      p.token_id = r.token_id;
      p.surface = r.surface;
      p.text = spelled_prompt(r.surface, spec);
      const auto line = p.text.rfind('\n');
      const std::size_t begin = line == std::string::npos ? 0 : line + 1;
      p.target_chars = {begin, begin + r.surface.size()};
      p.query_chars.push_back(p.target_chars);
      const auto colon = p.text.find(':', begin + r.surface.size());
      if (colon == std::string::npos) throw InputError("spelled prompt lacks ':'");
      p.query_chars.emplace_back(colon, colon + 1);
      for (std::size_t i = colon + 1; i < p.text.size(); ++i) {
        if (p.text[i] >= 'a' && p.text[i] <= 'z') p.query_chars.emplace_back(i, i + 1);
      }
      m.prompts.push_back(std::move(p));
    }
    if (include_eval) {
      ManifestPrompt p;
      std::snprintf(idbuf, sizeof idbuf, "eval-%07d", r.token_id);
      p.id = idbuf;
      p.kind = "eval";
      p.token_id = r.token_id;
      p.surface = r.surface;
      const auto prompt = build_prompt(r.surface, spec);
      p.text = prompt.text;
      p.expected = prompt.expected;
      m.prompts.push_back(std::move(p));
    }
  }
  return m;
}

std::vector<fs::path> export_traces(const Model& model, const Tokenizer& tokenizer, const PromptManifest& manifest,
                                    const fs::path& dir, const std::string& model_name) {
  const auto& cfg = model.config();
  const auto& emb = model.weights().token_embeddings;
  Tensor embeddings;
  embeddings.shape = {static_cast<std::size_t>(emb.rows()), static_cast<std::size_t>(emb.cols())};
  embeddings.data.resize(static_cast<std::size_t>(emb.size()));
  for (Eigen::Index i = 0; i < emb.size(); ++i) embeddings.data[static_cast<std::size_t>(i)] = static_cast<float>(emb.data()[i]);

  std::vector<fs::path> out;
  {
    TraceFile tf;
    tf.meta = trace_meta_for(cfg, tokenizer, model_name, "", {});
    tf.meta.annotations = {{"kind", "embeddings"}};
    tf.embeddings = std::move(embeddings);
    out.push_back(dir / "embeddings.cptrace");
    write_trace(out.back(), tf);
  }
  for (const auto& p : manifest.prompts) {
    const auto ids = tokenizer.encode(p.text);
    TraceFile tf;
    tf.meta = trace_meta_for(cfg, tokenizer, model_name, p.text, ids);
    json a = {{"kind", p.kind}, {"token_id", p.token_id}, {"surface", p.surface}};
    if (p.kind == "probe") {
      tf.trace = *forward(model, ids, true).trace;
      a["n"] = p.n;
      a["label"] = p.label;
      a["position"] = static_cast<int>(ids.size()) - 1;
    } else if (p.kind == "attention") {
      tf.trace = *forward(model, ids, true).trace;
      const auto off = token_offsets(tokenizer, ids);
      auto overlaps = [&](std::size_t t, std::pair<std::size_t, std::size_t> r) {
        return off[t] < r.second && off[t + 1] > r.first;
      };
      int first = -1;
      int last = -1;
      std::vector<int> queries;
      for (std::size_t t = 0; t < ids.size(); ++t) {
        if (overlaps(t, p.target_chars)) {
          if (first < 0) first = static_cast<int>(t);
          last = static_cast<int>(t);
        }
        for (const auto& q : p.query_chars) {
          if (overlaps(t, q)) {
            queries.push_back(static_cast<int>(t));
            break;
          }
        }
      }
      if (first < 0) throw InputError("target span maps to no token in prompt " + p.id);
      a["bos_position"] = 0;
      a["target_span"] = {first, last + 1};
      a["query_positions"] = queries;
    } else {
      const int len = static_cast<int>(p.surface.size());
      a["generated_text"] = generate_text(model, tokenizer, p.text, StopSpec{2 * len + 4});
      a["expected"] = p.expected;
    }
    tf.meta.annotations = std::move(a);
    const auto path = dir / (p.id + ".cptrace");
    write_trace(path, tf);
    out.push_back(path);
  }
  return out;
}

std::vector<TraceFile> load_trace_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InputError("trace directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".cptrace") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw InputError("no .cptrace files in " + dir.string());
  std::vector<TraceFile> out;
  out.reserve(files.size());
  for (const auto& f : files) {
    try {
      out.push_back(read_trace(f));
    } catch (const FormatError& e) {
      throw FormatError(f.filename().string() + ": " + e.what());
    }
  }
  for (const auto& t : out) {
    if (t.meta.num_layers != out.front().meta.num_layers || t.meta.model_name != out.front().meta.model_name) {
      throw FormatError("traces in " + dir.string() + " come from different models");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage runner

namespace {

class Runner {
 public:
  Runner(const RunConfig& config, const RunOptions& options) : cfg_(config), opt_(options) {
    b_.config = config;
    out_ = config.output_dir.empty() ? default_output_root() : config.output_dir;
    fs::create_directories(out_);
    const auto state_path = out_ / "stages.json";
    if (fs::exists(state_path)) {
      try {
        state_ = read_json_file(state_path);
      } catch (const FormatError&) {
        state_ = json::object();
      }
    }
    if (!state_.is_object()) state_ = json::object();
  }

  Bundle run() {
    for (auto st : {Stage::kDataset, Stage::kModel, Stage::kEval, Stage::kProbe, Stage::kNeurons, Stage::kAblate,
                    Stage::kAttention, Stage::kComparison, Stage::kReport}) {
      if (opt_.stages.count(st)) ensure(st, true);
    }
    return std::move(b_);
  }

 private:
  const RunConfig& cfg_;
  const RunOptions& opt_;
  fs::path out_;
  json state_ = json::object();
  Bundle b_;
  std::set<Stage> done_;
  std::map<Stage, std::string> hashes_;

  void log(const std::string& msg) const {
    if (opt_.log) opt_.log(msg);
  }

  std::uint64_t sub_seed(std::uint64_t k) const { return detail::mix_seed(cfg_.seed, k); }
  bool traces() const { return cfg_.model.kind == "traces"; }

  // Hash over the config sections a stage reads plus its upstream hashes.
  std::string stage_hash(Stage st) {
    if (auto it = hashes_.find(st); it != hashes_.end()) return it->second;
    const auto full = cfg_.result_json();
    json key = {{"stage", std::string(to_string(st))}};
    switch (st) {
      case Stage::kDataset:
        key["seed"] = full["seed"];
        key["vocabulary"] = full["vocabulary"];
        key["heldout_fraction"] = full["heldout_fraction"];
        key["shots"] = full["shots"];
        key["separator"] = full["separator"];
        key["model"] = {{"kind", full["model"]["kind"]}, {"path", full["model"]["path"]}};
        break;
      case Stage::kModel:
        key["up"] = stage_hash(Stage::kDataset);
        key["model"] = full["model"];
        break;
      case Stage::kEval:
        key["up"] = stage_hash(Stage::kModel);
        break;
      case Stage::kProbe:
        key["up"] = stage_hash(Stage::kModel);
        key["probe"] = full["probe"];
        break;
      case Stage::kNeurons:
        key["up"] = stage_hash(Stage::kModel);
        key["neurons"] = full["neurons"];
        break;
      case Stage::kAblate:
        key["up"] = stage_hash(Stage::kNeurons);
        break;
      case Stage::kAttention:
        key["up"] = {stage_hash(Stage::kModel), stage_hash(Stage::kEval)};
        key["attention"] = full["attention"];
        break;
      case Stage::kComparison:
        key["up"] = {stage_hash(Stage::kProbe), stage_hash(Stage::kAttention)};
        break;
      case Stage::kReport:
        key["config"] = full;
        break;
    }
    return hashes_[st] = crc_hex(canonical_dump(key));
  }

  std::vector<fs::path> outputs(Stage st) const {
    switch (st) {
      case Stage::kDataset: return {out_ / "dataset.json"};
      case Stage::kModel: return cfg_.model.kind == "train" ? std::vector<fs::path>{out_ / "model.cpml"} : std::vector<fs::path>{};
      case Stage::kEval: return {out_ / "eval.json"};
      case Stage::kProbe: return {out_ / "probe.json"};
      case Stage::kNeurons: return {out_ / "neurons.json"};
      case Stage::kAblate: return {out_ / "ablation.json"};
      case Stage::kAttention: return {out_ / "attention.json"};
      case Stage::kComparison: return {out_ / "comparison.json"};
      case Stage::kReport: return {};
    }
    return {};
  }

  bool cached(Stage st) {
    const auto name = std::string(to_string(st));
    if (!state_.contains(name) || state_[name] != stage_hash(st)) return false;
    const auto files = outputs(st);
    if (files.empty()) return false;
    return std::all_of(files.begin(), files.end(), [](const fs::path& p) { return fs::exists(p); });
  }

  void mark(Stage st) {
    state_[std::string(to_string(st))] = stage_hash(st);
    write_text(out_ / "stages.json", state_.dump(2) + "\n");
  }

  void ensure(Stage st, bool requested) {
    if (done_.count(st)) return;
    for (auto dep : deps(st)) ensure(dep, false);
    const auto name = std::string(to_string(st));
    const bool reuse = cached(st) && (!requested || opt_.resume);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      if (reuse) {
        log("[" + name + "] loading cached outputs");
        load(st);
      } else {
        log("[" + name + "] running");
        compute(st);
        if (!outputs(st).empty()) mark(st);
      }
    } catch (const StageError&) {
      throw;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log("[" + name + "] done in " + csv_number(std::round(secs * 10.0) / 10.0) + " s");
    done_.insert(st);
  }

  std::vector<Stage> deps(Stage st) const {
    switch (st) {
      case Stage::kDataset: return {};
      case Stage::kModel: return {Stage::kDataset};
      case Stage::kEval: return {Stage::kModel};
      case Stage::kProbe: return {Stage::kModel};
      case Stage::kNeurons: return {Stage::kModel};
      case Stage::kAblate: return {Stage::kNeurons};
      case Stage::kAttention:
        if (cfg_.attention.restrict_to_correct) return {Stage::kModel, Stage::kEval};
        return {Stage::kModel};
      case Stage::kComparison: return {Stage::kProbe, Stage::kAttention};
      case Stage::kReport: {
        std::vector<Stage> d{Stage::kDataset};
        for (auto s : configured_stages(cfg_)) {
          if (s != Stage::kReport && s != Stage::kDataset) d.push_back(s);
        }
        return d;
      }
    }
    return {};
  }

  static json stage_result(const fs::path& p) { return read_json_file(p).at("result"); }

  void load(Stage st) {
    switch (st) {
      case Stage::kDataset: {
        const auto r = stage_result(out_ / "dataset.json");
        b_.tokenizer = Tokenizer::from_json(r.at("tokenizer"));
        b_.dataset = dataset_from_json(r.at("dataset"));
        const auto held = r.at("heldout_token_ids").get<std::vector<int>>();
        b_.heldout = b_.dataset;
        b_.heldout.records.clear();
        for (const auto& rec : b_.dataset.records) {
          if (std::binary_search(held.begin(), held.end(), rec.token_id)) b_.heldout.records.push_back(rec);
        }
        break;
      }
      case Stage::kModel: {
        auto ck = read_checkpoint(out_ / "model.cpml");
        if (!(ck.tokenizer == b_.tokenizer)) throw FormatError("cached model was trained with another tokenizer");
        b_.params = std::move(ck.params);
        break;
      }
      case Stage::kEval: set_eval(stage_result(out_ / "eval.json")); break;
      case Stage::kProbe: b_.probe = probe_report_from_json(stage_result(out_ / "probe.json")); break;
      case Stage::kNeurons: {
        const auto r = stage_result(out_ / "neurons.json");
        b_.neuron_sets.clear();
        for (const auto& s : r.at("sets")) b_.neuron_sets.push_back(neuron_set_from_json(s));
        b_.neurons = r;
        break;
      }
      case Stage::kAblate: b_.ablation = stage_result(out_ / "ablation.json"); break;
      case Stage::kAttention: b_.attention = attention_profile_from_json(stage_result(out_ / "attention.json")); break;
      case Stage::kComparison: {
        const auto r = stage_result(out_ / "comparison.json");
        b_.comparison = compare_peak_vs_breakthrough(*b_.attention, *b_.probe, r.at("tolerance").get<double>());
        break;
      }
      case Stage::kReport: break;
    }
  }

  void set_eval(json r) {
    b_.correct_token_ids = r.at("all").at("correct_token_ids").get<std::vector<int>>();
    b_.eval = std::move(r);
  }

  const ModelParams& params() const {
    if (!b_.params) throw UnsupportedError("this stage needs model weights; traces carry none");
    return *b_.params;
  }

  void compute(Stage st) {
    switch (st) {
      case Stage::kDataset: build_dataset(); break;
      case Stage::kModel: build_model(); break;
      case Stage::kEval: run_eval(); break;
      case Stage::kProbe: run_probe(); break;
      case Stage::kNeurons: run_neurons(); break;
      case Stage::kAblate: run_ablation(); break;
      case Stage::kAttention: run_attention(); break;
      case Stage::kComparison: run_comparison(); break;
      case Stage::kReport: export_report(b_, opt_.report_format); break;
    }
  }

  static Tokenizer with_words(const Tokenizer& base, const std::vector<std::string>& extra) {
    std::vector<std::string> words;
    for (int id = Tokenizer::kFirstWord; id < base.size(); ++id) words.emplace_back(base.word_of(id));
    for (const auto& w : extra) {
      if (!base.word_id(w) && std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
    }
    return Tokenizer(std::move(words), base.word_head_marker());
  }

  // Re-keys records to the ids of `tok`, which must know every surface.
  static SpellingDataset rekey(const SpellingDataset& ds, const Tokenizer& tok) {
    SpellingDataset out = ds;
    for (auto& r : out.records) {
      const auto id = tok.word_id(r.surface);
      if (!id) throw InputError("word '" + r.surface + "' is not in the model's tokenizer");
      r.token_id = *id;
    }
    std::sort(out.records.begin(), out.records.end(),
              [](const TokenRecord& a, const TokenRecord& b) { return a.token_id < b.token_id; });
    return out;
  }

  void build_dataset() {
    const auto& v = cfg_.vocabulary;
    FilterOptions filter{v.word_head_marker, kMinSpellLength};
    std::vector<VocabEntry> entries;
    Tokenizer tok;
    if (v.kind == "synthetic") {
      auto sv = make_synthetic_vocab(v.seed, v.size, v.min_len, v.max_len, v.word_head_marker);
      entries = std::move(sv.entries);
      tok = with_words(sv.tokenizer, cfg_.shots);
    } else {
      entries = read_vocab_file(v.path);
    }
    auto ds = filter_vocabulary(entries, filter);
    ds.separator = cfg_.separator;
    if (v.kind == "file" && cfg_.model.kind == "train") {
      std::vector<std::string> words = cfg_.shots;
      for (const auto& r : ds.records) {
        if (std::find(words.begin(), words.end(), r.surface) == words.end()) words.push_back(r.surface);
      }
      tok = Tokenizer(std::move(words), v.word_head_marker);
      ds = rekey(ds, tok);
    } else if (cfg_.model.kind == "checkpoint") {
      tok = read_checkpoint(cfg_.model.path).tokenizer;
      ds = rekey(ds, tok);
    }
    const auto retention = retention_percent(ds);
    // Shot words never serve as targets.
    const auto before = ds.records.size();
    std::erase_if(ds.records, [&](const TokenRecord& r) {
      return std::find(cfg_.shots.begin(), cfg_.shots.end(), r.surface) != cfg_.shots.end();
    });
    if (ds.records.empty()) throw InputError("no vocabulary entry survived filtering");
    auto [train, held] = split_holdout(ds, cfg_.heldout_fraction, sub_seed(3));
    b_.tokenizer = std::move(tok);
    b_.dataset = std::move(ds);
    b_.heldout = std::move(held);

    std::vector<int> held_ids;
    for (const auto& r : b_.heldout.records) held_ids.push_back(r.token_id);
    const json result = {{"dataset", dataset_to_json(b_.dataset)},
                         {"source_entries", entries.size()},
                         {"retention_percent", retention},
                         {"excluded_shot_words", before - b_.dataset.records.size()},
                         {"heldout_token_ids", held_ids},
                         {"tokenizer", b_.tokenizer.to_json()},
                         {"stats", dataset_stats(b_.dataset).to_json()}};
    write_stage_json(out_ / "dataset.json", cfg_, result);
    log("[dataset] " + std::to_string(b_.dataset.records.size()) + " records (" + retention +
        "% of " + std::to_string(entries.size()) + "), " + std::to_string(held_ids.size()) + " held out");
  }

  void build_model() {
    if (cfg_.model.kind == "traces") {
      b_.traces = load_trace_dir(cfg_.model.path);
      log("[model] " + std::to_string(b_.traces.size()) + " traces from " + cfg_.model.path.string());
      return;
    }
    if (cfg_.model.kind == "checkpoint") {
      auto ck = read_checkpoint(cfg_.model.path);
      b_.params = std::move(ck.params);
      return;
    }
    ModelConfig mc = cfg_.model.config;
    mc.vocab_size = b_.tokenizer.size();
    mc.rng_seed = sub_seed(1);
    TrainParams tp = cfg_.model.train;
    tp.seed = sub_seed(2);
    tp.prompt = cfg_.prompt_spec();
    tp.jobs = cfg_.jobs;
    for (const auto& r : b_.heldout.records) tp.heldout_token_ids.push_back(r.token_id);
    std::ostringstream csv;
    csv.precision(17);
    csv << "step,loss\n";
    const int every = std::max(1, tp.max_steps / 20);
    auto result = train_toy_model(b_.dataset, b_.tokenizer, mc, tp, [&](int step, double loss) {
      csv << step << ',' << loss << '\n';
      if (step % every == 0 || step + 1 == tp.max_steps) {
        log("[model] step " + std::to_string(step) + " loss " + csv_number(loss));
      }
    });
    b_.params = std::move(result.params);
    write_checkpoint(out_ / "model.cpml", *b_.params, b_.tokenizer);
    write_text(out_ / "train_log.csv", csv.str());
  }

  void run_eval() {
    json r;
    if (traces()) {
      std::vector<GeneratedSpelling> items;
      for (const auto& t : b_.traces) {
        const auto& a = t.meta.annotations;
        if (a.value("kind", std::string()) != "eval") continue;
        const auto surface = a.at("surface").get<std::string>();
        items.push_back({TokenRecord{surface, a.at("token_id").get<int>(), true, static_cast<int>(surface.size())},
                         a.at("generated_text").get<std::string>()});
      }
      const auto rep = score_generations(items, cfg_.separator);
      write_text(out_ / "eval_outcomes.csv", rep.outcomes_csv());
      r = {{"all", rep.to_json()}, {"heldout", nullptr}};
    } else {
      const Model model(params());
      EvalOptions eo;
      eo.jobs = cfg_.jobs;
      const auto spec = cfg_.prompt_spec();
      const auto all = evaluate_spelling(model, b_.tokenizer, b_.dataset, spec, eo);
      write_text(out_ / "eval_outcomes.csv", all.outcomes_csv());
      r = {{"all", all.to_json()}, {"heldout", nullptr}};
      if (!b_.heldout.records.empty()) {
        const auto held = evaluate_spelling(model, b_.tokenizer, b_.heldout, spec, eo);
        r["heldout"] = held.to_json();
      }
      log("[eval] entire accuracy " + csv_number(all.entire_accuracy()) +
          (r["heldout"].is_null() ? "" : ", held-out " + csv_number(r["heldout"]["entire_accuracy"].get<double>())));
    }
    write_stage_json(out_ / "eval.json", cfg_, r);
    set_eval(std::move(r));
  }

  ProbeRunOptions probe_options() const {
    ProbeRunOptions po;
    po.positions = cfg_.probe.positions;
    po.folds = cfg_.probe.folds;
    po.mode = cfg_.probe.split;
    po.probe = cfg_.probe.config;
    po.probe.seed = sub_seed(4);
    po.embedding_probe = cfg_.probe.embedding_probe;
    po.jobs = cfg_.jobs;
    return po;
  }

  void run_probe() {
    const auto po = probe_options();
    if (traces()) {
      b_.probe = probe_traces(b_.traces, po);
    } else {
      const Model model(params());
      b_.probe = probe_all_layers(model, b_.tokenizer, b_.dataset, cfg_.prompt_spec(), po);
    }
    write_stage_json(out_ / "probe.json", cfg_, b_.probe->to_json());
    write_text(out_ / "probe.csv", b_.probe->to_csv());
    if (b_.probe->breakthrough_layer) log("[probe] breakthrough at layer " + std::to_string(*b_.probe->breakthrough_layer));
  }

  void run_neurons() {
    const Model model(params());
    const auto spec = cfg_.prompt_spec();
    const auto& nc = cfg_.neurons;
    IdentifyOptions io;
    io.samples = nc.samples;
    io.top_pct = nc.top_pct;
    io.consensus = nc.consensus;
    io.attribution.m = nc.m;
    io.attribution.aggregate_positions = nc.aggregate_positions;
    io.jobs = cfg_.jobs;
    b_.neuron_sets.clear();
    for (int n : nc.positions) {
      io.seed = sub_seed(100 + static_cast<std::uint64_t>(n));
      b_.neuron_sets.push_back(identify_knowledge_neurons(model, b_.tokenizer, b_.dataset, n, spec, io));
      log("[neurons] N=" + std::to_string(n) + ": " + std::to_string(b_.neuron_sets.back().neurons.size()) +
          " neurons");
    }
    for (char c : nc.alphabet) {
      io.seed = sub_seed(200 + static_cast<std::uint64_t>(c));
      b_.neuron_sets.push_back(alphabet_neurons(model, b_.tokenizer, b_.dataset, c, spec, io));
    }
    const int L = model.config().num_layers;
    json sets = json::array();
    json hist = json::object();
    for (const auto& s : b_.neuron_sets) {
      sets.push_back(s.to_json());
      hist[s.key] = layer_distribution(s, L);
      write_text(out_ / ("neurons_" + file_key(s.key) + ".csv"), s.to_csv());
    }
    json ov = nullptr;
    if (!nc.overlap.empty()) {
      std::vector<KnowledgeNeuronSet> chosen;
      for (int n : nc.overlap) {
        for (const auto& s : b_.neuron_sets) {
          if (s.n == n) chosen.push_back(s);
        }
      }
      ov = overlap(chosen).to_json();
    }
    b_.neurons = json{{"sets", sets}, {"layer_histogram", hist}, {"overlap", ov}, {"num_layers", L}};
    write_stage_json(out_ / "neurons.json", cfg_, *b_.neurons);
  }

  static std::string file_key(const std::string& key) {
    std::string s;
    for (char c : key) s.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
    return s;
  }

  void run_ablation() {
    const Model model(params());
    const auto spec = cfg_.prompt_spec();
    AblationOptions ao;
    ao.top_k = cfg_.neurons.top_k;
    ao.jobs = cfg_.jobs;
    std::vector<KnowledgeNeuronSet> positional;
    for (const auto& s : b_.neuron_sets) {
      if (s.n > 0) positional.push_back(s);
    }
    auto rep = ablate_and_eval(model, b_.tokenizer, positional, b_.dataset, spec, ao);
    const std::size_t total =
        static_cast<std::size_t>(model.config().num_layers) * static_cast<std::size_t>(model.config().ffn_dim);
    for (int i = 0; i < cfg_.neurons.random_controls; ++i) {
      auto ids = random_neurons(model.config(), std::min(cfg_.neurons.top_k, total), sub_seed(300 + static_cast<std::uint64_t>(i)));
      rep.entries.push_back(ablate_neurons(model, b_.tokenizer, b_.dataset, spec, rep.baseline, std::move(ids), ao,
                                           "random-" + std::to_string(i)));
    }
    for (const auto& e : rep.entries) {
      log("[ablate] " + e.key + ": " + std::to_string(e.ablated.size()) + " neurons, entire delta " +
          csv_number(e.entire_delta) + (e.flagged_small_set ? " (set smaller than top_k)" : ""));
    }
    b_.ablation = rep.to_json();
    write_stage_json(out_ / "ablation.json", cfg_, *b_.ablation);
    write_text(out_ / "ablation.csv", rep.to_csv());
  }

  void run_attention() {
    const auto& ac = cfg_.attention;
    if (traces()) {
      std::vector<TraceFile> picked;
      for (const auto& t : b_.traces) {
        const auto& a = t.meta.annotations;
        if (a.value("kind", std::string()) != "attention") continue;
        if (ac.restrict_to_correct && b_.eval) {
          const int tid = a.value("token_id", -1);
          if (std::find(b_.correct_token_ids.begin(), b_.correct_token_ids.end(), tid) ==
              b_.correct_token_ids.end()) {
            continue;
          }
        }
        picked.push_back(t);
        if (picked.size() == ac.samples) break;
      }
      if (picked.empty()) {
        // Nothing eligible: an all-zero profile, flagged below.
        b_.attention = make_profile(std::vector<double>(static_cast<std::size_t>(b_.traces.front().meta.num_layers), 0.0), 0);
      } else {
        b_.attention = profile_traces(picked);
      }
      b_.attention->requested_samples = ac.samples;
      b_.attention->flagged_insufficient = picked.size() < ac.samples;
    } else {
      const Model model(params());
      AttentionOptions ao;
      ao.samples = ac.samples;
      ao.restrict_to_correct = ac.restrict_to_correct;
      ao.seed = sub_seed(6);
      ao.jobs = cfg_.jobs;
      b_.attention = profile_attention(model, b_.tokenizer, b_.dataset, cfg_.prompt_spec(), b_.correct_token_ids, ao);
    }
    if (b_.attention->flagged_insufficient) {
      log("[attention] only " + std::to_string(b_.attention->sample_count) + " of " +
          std::to_string(ac.samples) + " requested samples available");
    }
    write_stage_json(out_ / "attention.json", cfg_, b_.attention->to_json());
    write_text(out_ / "attention.csv", b_.attention->to_csv());
  }

  void run_comparison() {
    b_.comparison = compare_peak_vs_breakthrough(*b_.attention, *b_.probe, cfg_.attention.tolerance);
    write_stage_json(out_ / "comparison.json", cfg_, b_.comparison->to_json());
  }
};

}  // namespace

Bundle run(const RunConfig& config, const RunOptions& options) {
  config.validate();
  return Runner(config, options).run();
}

// ---------------------------------------------------------------------------
// Report

namespace {

struct ReportWriter {
  fs::path dir;
  ReportFormat format;
  std::string hash;
  std::vector<fs::path> written;

  void emit(const std::string& name, const json& data, const std::string& csv) {
    if (format != ReportFormat::kCsv) {
      const json doc = {{"config_hash", hash}, {"data", data}};
      written.push_back(dir / (name + ".json"));
      write_text(written.back(), doc.dump(2) + "\n");
    }
    if (format != ReportFormat::kJson) {
      written.push_back(dir / (name + ".csv"));
      write_text(written.back(), csv);
    }
  }
};

std::string fraction_rows(const json& rep, const std::string& split) {
  std::ostringstream out;
  out.precision(17);
  const auto& e = rep.at("entire");
  out << split << ",entire," << e.at("correct").get<std::size_t>() << ',' << e.at("total").get<std::size_t>() << ','
      << e.at("accuracy").get<double>() << '\n';
  int n = 1;
  for (const auto& f : rep.at("per_position")) {
    out << split << ",N" << n++ << ',' << f.at("correct").get<std::size_t>() << ','
        << f.at("total").get<std::size_t>() << ',' << f.at("accuracy").get<double>() << '\n';
  }
  return out.str();
}

}  // namespace

std::vector<fs::path> export_report(const Bundle& b, ReportFormat format) {
  const auto& cfg = b.config;
  const fs::path root = cfg.output_dir.empty() ? default_output_root() : cfg.output_dir;
  ReportWriter w{root / "report", format, cfg.hash(), {}};

  if (!b.dataset.records.empty()) {
    const auto stats = dataset_stats(b.dataset);
    std::ostringstream lh;
    lh << "length,count\n";
    for (std::size_t i = 0; i < stats.length_histogram.size(); ++i) {
      if (stats.length_histogram[i]) lh << i + 1 << ',' << stats.length_histogram[i] << '\n';
    }
    json lj = json::object();
    for (std::size_t i = 0; i < stats.length_histogram.size(); ++i) {
      if (stats.length_histogram[i]) lj[std::to_string(i + 1)] = stats.length_histogram[i];
    }
    w.emit("length_histogram",
           {{"records", b.dataset.records.size()}, {"counts", lj}},
           lh.str());
    std::ostringstream pf;
    pf << "position";
    for (char c = 'a'; c <= 'z'; ++c) pf << ',' << c;
    pf << '\n';
    for (std::size_t p = 0; p < stats.position_frequency.size(); ++p) {
      pf << p + 1;
      for (auto v : stats.position_frequency[p]) pf << ',' << v;
      pf << '\n';
    }
    w.emit("position_frequency", stats.to_json().at("position_frequency"), pf.str());
  }

  if (b.eval) {
    const auto& e = *b.eval;
    std::string csv = "split,measure,correct,total,accuracy\n" + fraction_rows(e.at("all"), "all");
    json data = {{"all", {{"entire", e["all"]["entire"]}, {"per_position", e["all"]["per_position"]}}}};
    if (!e.at("heldout").is_null()) {
      csv += fraction_rows(e.at("heldout"), "heldout");
      data["heldout"] = {{"entire", e["heldout"]["entire"]}, {"per_position", e["heldout"]["per_position"]}};
    }
    w.emit("position_accuracy", data, csv);
    std::ostringstream la;
    la.precision(17);
    la << "length,correct,total,accuracy\n";
    for (const auto& [len, f] : e.at("all").at("per_length").items()) {
      la << len << ',' << f.at("correct").get<std::size_t>() << ',' << f.at("total").get<std::size_t>() << ','
         << f.at("accuracy").get<double>() << '\n';
    }
    w.emit("length_accuracy", e.at("all").at("per_length"), la.str());
  }

  if (b.probe) {
    const auto& p = *b.probe;
    json surface = p.to_json();
    surface.erase("embedding_accuracy");
    w.emit("probe_surface", surface, p.to_csv());
    if (!p.embedding_accuracy.empty()) {
      std::ostringstream ec;
      ec.precision(17);
      ec << "N,accuracy\n";
      for (std::size_t i = 0; i < p.positions.size(); ++i) ec << p.positions[i] << ',' << p.embedding_accuracy[i] << '\n';
      w.emit("embedding_probe", {{"positions", p.positions}, {"accuracy", p.embedding_accuracy}}, ec.str());
    }
  }

  if (b.neurons) {
    const auto& n = *b.neurons;
    const int L = n.at("num_layers").get<int>();
    json positional = json::object();
    json alphabet = json::object();
    for (const auto& s : b.neuron_sets) {
      (s.n > 0 ? positional : alphabet)[s.key] = layer_distribution(s, L);
    }
    auto hist_csv = [&](const json& h) {
      std::ostringstream out;
      out.precision(17);
      out << "layer,relative_depth";
      for (const auto& [k, v] : h.items()) out << ',' << k;
      out << '\n';
      for (int l = 0; l < L; ++l) {
        out << l << ',' << static_cast<double>(l + 1) / L;
        for (const auto& [k, v] : h.items()) out << ',' << v.at(static_cast<std::size_t>(l)).get<std::size_t>();
        out << '\n';
      }
      return out.str();
    };
    w.emit("neuron_layer_histogram", positional, hist_csv(positional));
    if (!alphabet.empty()) w.emit("alphabet_neurons", alphabet, hist_csv(alphabet));
    if (!n.at("overlap").is_null()) {
      std::ostringstream oc;
      oc << "region,count\n";
      for (const auto& [k, v] : n["overlap"]["regions"].items()) oc << '"' << k << "\"," << v.get<std::size_t>() << '\n';
      oc << "\"union\"," << n["overlap"]["union"].get<std::size_t>() << '\n';
      w.emit("neuron_overlap", n.at("overlap"), oc.str());
    }
  }

  if (b.ablation) {
    const auto& a = *b.ablation;
    std::ostringstream ac;
    ac.precision(17);
    ac << "key,n,ablated_count,flagged_small_set,entire_delta";
    for (int k = 1; k <= kMaxProbePosition; ++k) ac << ",delta_N" << k;
    ac << '\n';
    json entries = json::array();
    for (const auto& e : a.at("entries")) {
      ac << e.at("key").get<std::string>() << ',' << e.at("n").get<int>() << ','
         << e.at("ablated_count").get<std::size_t>() << ',' << (e.at("flagged_small_set").get<bool>() ? 1 : 0) << ','
         << e.at("entire_delta").get<double>();
      for (const auto& d : e.at("position_delta")) ac << ',' << d.get<double>();
      ac << '\n';
      auto slim = e;
      slim.erase("ablated");
      entries.push_back(std::move(slim));
    }
    w.emit("ablation_deltas",
           {{"baseline_entire_accuracy", a.at("baseline_entire_accuracy")},
            {"baseline_position_accuracy", a.at("baseline_position_accuracy")},
            {"entries", entries}},
           ac.str());
  }

  if (b.attention) w.emit("attention_by_layer", b.attention->to_json(), b.attention->to_csv());

  if (b.comparison) {
    const auto& c = *b.comparison;
    std::ostringstream cc;
    cc.precision(17);
    cc << "peak_layer,peak_relative_depth,breakthrough_layer,breakthrough_relative_depth,tolerance,coincide\n";
    cc << c.peak_layer << ',' << c.peak_depth << ','
       << (c.breakthrough_layer ? std::to_string(*c.breakthrough_layer) : std::string()) << ','
       << (c.breakthrough_layer ? csv_number(c.breakthrough_depth) : std::string()) << ',' << c.tolerance << ','
       << (c.coincide ? 1 : 0) << '\n';
    w.emit("peak_vs_breakthrough", c.to_json(), cc.str());
  }
  return w.written;
}

}  // namespace charprobe
