// charprobe command line: one subcommand per analysis stage plus run-all.

#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "charprobe/errors.hpp"
#include "charprobe/pipeline.hpp"
#include "charprobe/serialize.hpp"

namespace cp = charprobe;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct Overrides {
  std::string config;
  std::string output;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string vocab;
  std::optional<std::size_t> vocab_size;
  std::string checkpoint;
  std::string traces;
  std::string separator;
  std::string shots;
  std::optional<int> train_steps;
  std::optional<std::size_t> neuron_samples;
  std::optional<std::size_t> attention_samples;
  std::optional<int> folds;
  bool resume = false;
  bool quiet = false;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("-c,--config", o.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  app->add_option("-o,--output", o.output, "Output directory (default $CHARPROBE_OUT or ./charprobe-out)");
  app->add_option("--seed", o.seed, "Top-level seed");
  app->add_option("-j,--jobs", o.jobs, "Worker threads inside a stage")->check(CLI::PositiveNumber);
  app->add_option("--vocab", o.vocab, "Vocabulary file (token_id<TAB>surface); replaces the synthetic vocabulary");
  app->add_option("--vocab-size", o.vocab_size, "Synthetic vocabulary size");
  app->add_option("--checkpoint", o.checkpoint, "Analyse this checkpoint instead of training");
  app->add_option("--traces", o.traces, "Analyse a directory of .cptrace files instead of a model");
  app->add_option("--separator", o.separator, "whitespace | slash");
  app->add_option("--shots", o.shots, "Comma-separated few-shot words");
  app->add_option("--train-steps", o.train_steps, "Toy training steps");
  app->add_option("--neuron-samples", o.neuron_samples, "Samples per knowledge-neuron set");
  app->add_option("--attention-samples", o.attention_samples, "Samples for the attention profile");
  app->add_option("--folds", o.folds, "Probe cross-validation folds");
  app->add_flag("--resume", o.resume, "Skip stages whose outputs exist with a matching config hash");
  app->add_flag("-q,--quiet", o.quiet, "No progress output");
}

cp::RunConfig resolve(const Overrides& o) {
  auto cfg = o.config.empty() ? cp::RunConfig::from_json(nlohmann::json::object()) : cp::RunConfig::load(o.config);
  if (!o.output.empty()) cfg.output_dir = o.output;
  if (cfg.output_dir.empty()) cfg.output_dir = cp::default_output_root();
  if (o.seed) cfg.seed = *o.seed;
  if (o.jobs) cfg.jobs = *o.jobs;
  if (!o.vocab.empty()) {
    cfg.vocabulary.kind = "file";
    cfg.vocabulary.path = o.vocab;
  }
  if (o.vocab_size) cfg.vocabulary.size = *o.vocab_size;
  if (!o.checkpoint.empty() && !o.traces.empty()) throw cp::ConfigError("--checkpoint and --traces are exclusive");
  if (!o.checkpoint.empty()) {
    cfg.model.kind = "checkpoint";
    cfg.model.path = o.checkpoint;
  }
  if (!o.traces.empty()) {
    cfg.model.kind = "traces";
    cfg.model.path = o.traces;
  }
  if (!o.separator.empty()) {
    try {
      cfg.separator = cp::separator_from_string(o.separator);
    } catch (const cp::InputError& e) {
      throw cp::ConfigError(e.what());
    }
  }
  if (!o.shots.empty()) {
    cfg.shots.clear();
    std::stringstream ss(o.shots);
    for (std::string w; std::getline(ss, w, ',');) cfg.shots.push_back(w);
  }
  if (o.train_steps) cfg.model.train.max_steps = *o.train_steps;
  if (o.neuron_samples) cfg.neurons.samples = *o.neuron_samples;
  if (o.attention_samples) cfg.attention.samples = *o.attention_samples;
  if (o.folds) cfg.probe.folds = *o.folds;
  cfg.validate();
  return cfg;
}

cp::RunOptions run_options(const Overrides& o, std::set<cp::Stage> stages) {
  cp::RunOptions r;
  r.stages = std::move(stages);
  r.resume = o.resume;
  if (!o.quiet) r.log = [](const std::string& line) { std::cerr << line << std::endl; };
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Character-knowledge probing for small transformer language models"};
  app.require_subcommand(1);
  Overrides o;
  std::string format = "both";
  std::vector<int> manifest_positions{1, 2, 3, 4, 5};
  std::string manifest_out;
  std::string traces_out;

  struct Cmd {
    const char* name;
    const char* help;
    std::set<cp::Stage> stages;
  };
  const std::vector<Cmd> cmds = {
      {"build-dataset", "Filter or synthesize the vocabulary and write dataset.json", {cp::Stage::kDataset}},
      {"train-toy", "Train the toy model and write model.cpml", {cp::Stage::kModel}},
      {"eval-spelling", "Few-shot spelling accuracy", {cp::Stage::kEval}},
      {"probe", "Layer-wise character probes", {cp::Stage::kProbe}},
      {"neurons", "Knowledge-neuron identification", {cp::Stage::kNeurons}},
      {"ablate", "Ablate knowledge neurons against random controls", {cp::Stage::kAblate}},
      {"attention", "Attention to the target token per layer", {cp::Stage::kAttention}},
      {"report", "Write report data files from completed stages", {cp::Stage::kReport}},
  };
  std::vector<std::pair<CLI::App*, std::set<cp::Stage>>> stage_cmds;
  for (const auto& c : cmds) {
    auto* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, o);
    if (std::string(c.name) == "report") {
      sub->add_option("--format", format, "json | csv | both")->check(CLI::IsMember({"json", "csv", "both"}));
    }
    stage_cmds.emplace_back(sub, c.stages);
  }
  auto* all = app.add_subcommand("run-all", "Run every configured stage and write the report");
  add_common(all, o);
  all->add_option("--format", format, "json | csv | both")->check(CLI::IsMember({"json", "csv", "both"}));

  auto* manifest = app.add_subcommand("emit-manifest", "Write the prompt manifest for an external exporter");
  add_common(manifest, o);
  manifest->add_option("--positions", manifest_positions, "Probe positions");
  manifest->add_option("--out", manifest_out, "Manifest path (default <output>/manifest.json)");

  auto* export_cmd = app.add_subcommand("export-traces", "Write .cptrace files for the manifest using the toy model");
  add_common(export_cmd, o);
  export_cmd->add_option("--positions", manifest_positions, "Probe positions");
  export_cmd->add_option("--out", traces_out, "Trace directory (default <output>/traces)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    const auto cfg = resolve(o);
    auto report_format = cp::ReportFormat::kBoth;
    if (format == "json") report_format = cp::ReportFormat::kJson;
    if (format == "csv") report_format = cp::ReportFormat::kCsv;

    for (const auto& [sub, stages] : stage_cmds) {
      if (sub->parsed()) {
        auto opts = run_options(o, stages);
        opts.report_format = report_format;
        cp::run(cfg, opts);
      }
    }
    if (all->parsed()) {
      auto opts = run_options(o, cp::configured_stages(cfg));
      opts.report_format = report_format;
      const auto bundle = cp::run(cfg, opts);
      if (!o.quiet) std::cerr << "outputs in " << cfg.output_dir.string() << std::endl;
    }
    if (manifest->parsed() || export_cmd->parsed()) {
      for (int n : manifest_positions) {
        if (n < 1 || n > cp::kMaxProbePosition) throw cp::ConfigError("--positions entries must lie in 1..5");
      }
      const auto stages = export_cmd->parsed() ? std::set<cp::Stage>{cp::Stage::kModel}
                                               : std::set<cp::Stage>{cp::Stage::kDataset};
      auto opts = run_options(o, stages);
      opts.resume = true;
      const auto bundle = cp::run(cfg, opts);
      const auto m = cp::build_manifest(bundle.dataset, cfg.prompt_spec(), manifest_positions);
      if (manifest->parsed()) {
        const fs::path path = manifest_out.empty() ? cfg.output_dir / "manifest.json" : fs::path(manifest_out);
        cp::write_text(path, m.to_json().dump(2) + "\n");
        if (!o.quiet) std::cerr << m.prompts.size() << " prompts -> " << path.string() << std::endl;
      } else {
        if (!bundle.params) throw cp::ConfigError("export-traces needs a toy model (train or checkpoint)");
        const fs::path dir = traces_out.empty() ? cfg.output_dir / "traces" : fs::path(traces_out);
        const cp::Model model(*bundle.params);
        const auto files = cp::export_traces(model, bundle.tokenizer, m, dir);
        if (!o.quiet) std::cerr << files.size() << " traces -> " << dir.string() << std::endl;
      }
    }
  } catch (const cp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kExitConfig;
  } catch (const cp::StageError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitStage;
  }
  return 0;
}
