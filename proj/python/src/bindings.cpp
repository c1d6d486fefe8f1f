#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "charprobe/errors.hpp"
#include "charprobe/pipeline.hpp"
#include "charprobe/serialize.hpp"

namespace py = pybind11;
namespace cp = charprobe;
using nlohmann::json;

namespace {

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::handle& obj) {
  return json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::array_t<float> to_numpy(const cp::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<float> a(shape);
  std::copy(t.data.begin(), t.data.end(), a.mutable_data());
  return a;
}

cp::Tensor from_numpy(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  std::vector<std::size_t> shape(a.shape(), a.shape() + a.ndim());
  cp::Tensor t(shape);
  std::copy(a.data(), a.data() + a.size(), t.data.begin());
  return t;
}

cp::Separator sep_of(const std::string& s) { return cp::separator_from_string(s); }

cp::PromptSpec spec_of(const std::vector<std::string>& shots, const std::string& sep) {
  return {shots, sep_of(sep)};
}

const std::vector<std::string> kShots = cp::PromptSpec{}.shots;

py::dict trace_to_dict(const cp::TraceFile& f) {
  py::dict d;
  const auto& m = f.meta;
  d["model_name"] = m.model_name;
  d["num_layers"] = m.num_layers;
  d["num_heads"] = m.num_heads;
  d["model_dim"] = m.model_dim;
  d["ffn_dim"] = m.ffn_dim;
  d["vocab_size"] = m.vocab_size;
  d["tokenizer"] = to_py(m.tokenizer);
  d["prompt_text"] = m.prompt_text;
  d["token_ids"] = m.token_ids;
  d["source_dtype"] = m.source_dtype;
  d["annotations"] = to_py(m.annotations);
  auto opt = [](const cp::Tensor& t) -> py::object { return t.empty() ? py::object(py::none()) : to_numpy(t); };
  d["hidden_states"] = opt(f.trace.hidden_states);
  d["attention"] = opt(f.trace.attention);
  d["ffn_activations"] = opt(f.trace.ffn_activations);
  d["embeddings"] = f.embeddings ? py::object(to_numpy(*f.embeddings)) : py::object(py::none());
  return d;
}

cp::TraceFile trace_from_dict(const py::dict& d) {
  cp::TraceFile f;
  auto& m = f.meta;
  m.model_name = d["model_name"].cast<std::string>();
  m.num_layers = d["num_layers"].cast<int>();
  m.num_heads = d["num_heads"].cast<int>();
  m.model_dim = d["model_dim"].cast<int>();
  m.ffn_dim = d["ffn_dim"].cast<int>();
  m.vocab_size = d["vocab_size"].cast<int>();
  if (d.contains("tokenizer")) m.tokenizer = from_py(d["tokenizer"]);
  m.prompt_text = d["prompt_text"].cast<std::string>();
  m.token_ids = d["token_ids"].cast<std::vector<int>>();
  if (d.contains("source_dtype")) m.source_dtype = d["source_dtype"].cast<std::string>();
  if (d.contains("annotations")) m.annotations = from_py(d["annotations"]);
  auto get = [&](const char* key) -> std::optional<cp::Tensor> {
    if (!d.contains(key) || d[key].is_none()) return std::nullopt;
    return from_numpy(d[key].cast<py::array_t<float, py::array::c_style | py::array::forcecast>>());
  };
  if (auto t = get("hidden_states")) f.trace.hidden_states = *t;
  if (auto t = get("attention")) f.trace.attention = *t;
  if (auto t = get("ffn_activations")) f.trace.ffn_activations = *t;
  f.embeddings = get("embeddings");
  return f;
}

std::vector<cp::ActivationOverride> overrides_of(const std::vector<std::tuple<int, int, int, double>>& v) {
  std::vector<cp::ActivationOverride> out;
  for (const auto& [pos, layer, index, value] : v) out.push_back({pos, {layer, index}, value});
  return out;
}

cp::SpellingDataset dataset_of(const std::vector<std::pair<int, std::string>>& words) {
  cp::SpellingDataset ds;
  for (const auto& [id, w] : words) ds.records.push_back({w, id, true, static_cast<int>(w.size())});
  std::sort(ds.records.begin(), ds.records.end(),
            [](const auto& a, const auto& b) { return a.token_id < b.token_id; });
  ds.source_vocab_size = ds.records.size();
  return ds;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "charprobe native core";

  py::register_exception<cp::InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<cp::CapacityError>(m, "CapacityError", PyExc_ValueError);
  auto format_error = py::register_exception<cp::FormatError>(m, "FormatError", PyExc_RuntimeError);
  py::register_exception<cp::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<cp::StageError>(m, "StageError", PyExc_RuntimeError);

  py::class_<cp::Tokenizer>(m, "Tokenizer")
      .def(py::init<std::vector<std::string>, std::string>(), py::arg("words"), py::arg("word_head_marker") = "_")
      .def_property_readonly("size", &cp::Tokenizer::size)
      .def("surface", &cp::Tokenizer::surface)
      .def("word_id", &cp::Tokenizer::word_id)
      .def("char_id", &cp::Tokenizer::char_id)
      .def("encode", &cp::Tokenizer::encode, py::arg("text"), py::arg("add_bos") = true)
      .def("decode", [](const cp::Tokenizer& t, const std::vector<int>& ids) { return t.decode(ids); })
      .def("to_json", [](const cp::Tokenizer& t) { return to_py(t.to_json()); });

  m.def("filter_vocabulary",
        [](const std::vector<std::pair<int, std::string>>& entries, const std::string& marker, std::size_t min_len) {
          std::vector<cp::VocabEntry> v;
          for (const auto& [id, s] : entries) v.push_back({id, s});
          const auto ds = cp::filter_vocabulary(v, {marker, min_len});
          std::vector<std::pair<int, std::string>> out;
          for (const auto& r : ds.records) out.emplace_back(r.token_id, r.surface);
          return py::make_tuple(out, cp::retention_percent(ds));
        },
        py::arg("entries"), py::arg("word_head_marker") = "_", py::arg("min_len") = 5,
        "Returns ([(token_id, surface)], retention percent string).");
  m.def("retention_percent", [](std::size_t kept, std::size_t total) {
    cp::SpellingDataset ds;
    ds.records.resize(kept);
    ds.source_vocab_size = total;
    return cp::retention_percent(ds);
  });
  m.def("read_vocab_file", [](const std::filesystem::path& p) {
    std::vector<std::pair<int, std::string>> out;
    for (const auto& e : cp::read_vocab_file(p)) out.emplace_back(e.token_id, e.surface);
    return out;
  });
  m.def("write_vocab_file", [](const std::filesystem::path& p, const std::vector<std::pair<int, std::string>>& v) {
    std::vector<cp::VocabEntry> e;
    for (const auto& [id, s] : v) e.push_back({id, s});
    cp::write_vocab_file(p, e);
  });
  m.def("make_synthetic_vocab",
        [](std::uint64_t seed, std::size_t size, int min_len, int max_len) {
          auto sv = cp::make_synthetic_vocab(seed, size, min_len, max_len);
          std::vector<std::pair<int, std::string>> out;
          for (const auto& e : sv.entries) out.emplace_back(e.token_id, e.surface);
          return py::make_tuple(out, sv.tokenizer);
        },
        py::arg("seed"), py::arg("size"), py::arg("min_len") = 5, py::arg("max_len") = 8);

  m.def("spell_out", [](const std::string& w, const std::string& sep) { return cp::spell_out(w, sep_of(sep)); },
        py::arg("word"), py::arg("separator") = "whitespace");
  m.def("build_prompt",
        [](const std::string& target, const std::vector<std::string>& shots, const std::string& sep) {
          const auto p = cp::build_prompt(target, spec_of(shots, sep));
          return py::make_tuple(p.text, p.expected);
        },
        py::arg("target"), py::arg("shots") = kShots, py::arg("separator") = "whitespace");
  m.def("position_prompt",
        [](const std::string& target, int n, const std::vector<std::string>& shots, const std::string& sep) {
          return cp::position_prompt(target, spec_of(shots, sep), n);
        },
        py::arg("target"), py::arg("n"), py::arg("shots") = kShots, py::arg("separator") = "whitespace");
  m.def("spelled_prompt",
        [](const std::string& target, const std::vector<std::string>& shots, const std::string& sep) {
          return cp::spelled_prompt(target, spec_of(shots, sep));
        },
        py::arg("target"), py::arg("shots") = kShots, py::arg("separator") = "whitespace");
  m.def("score_prediction",
        [](const std::string& predicted, const std::string& gold, const std::string& sep) {
          const auto s = cp::score_prediction(predicted, gold, sep_of(sep));
          return py::make_tuple(s.entire, s.per_position);
        },
        py::arg("predicted"), py::arg("gold"), py::arg("separator") = "whitespace");

  py::class_<cp::ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("num_layers", &cp::ModelConfig::num_layers)
      .def_readwrite("num_heads", &cp::ModelConfig::num_heads)
      .def_readwrite("model_dim", &cp::ModelConfig::model_dim)
      .def_readwrite("ffn_dim", &cp::ModelConfig::ffn_dim)
      .def_readwrite("vocab_size", &cp::ModelConfig::vocab_size)
      .def_readwrite("max_seq_len", &cp::ModelConfig::max_seq_len)
      .def_readwrite("rng_seed", &cp::ModelConfig::rng_seed);

  py::class_<cp::Model>(m, "Model")
      .def(py::init([](const cp::ModelConfig& cfg, double stddev) {
             cp::InitOptions o;
             o.stddev = stddev;
             return cp::Model(cp::init_params(cfg, o));
           }),
           py::arg("config"), py::arg("init_stddev") = 0.02, "Freshly initialized model.")
      .def_property_readonly("config", &cp::Model::config)
      .def("logits", [](const cp::Model& mdl, const std::vector<int>& ids) { return cp::forward(mdl, ids, false).logits; })
      .def("trace",
           [](const cp::Model& mdl, const std::vector<int>& ids) {
             const auto out = cp::forward(mdl, ids, true);
             py::dict d;
             d["logits"] = out.logits;
             d["hidden_states"] = to_numpy(out.trace->hidden_states);
             d["attention"] = to_numpy(out.trace->attention);
             d["ffn_activations"] = to_numpy(out.trace->ffn_activations);
             return d;
           })
      .def("logits_with_overrides",
           [](const cp::Model& mdl, const std::vector<int>& ids,
              const std::vector<std::tuple<int, int, int, double>>& overrides) {
             return cp::forward_with_overrides(mdl, ids, overrides_of(overrides));
           },
           py::arg("ids"), py::arg("overrides"), "Overrides are (position, layer, index, value) tuples.")
      .def("next_distribution",
           [](const cp::Model& mdl, const std::vector<int>& ids) { return cp::next_distribution(mdl, ids); })
      .def("grad_wrt_ffn_activations",
           [](const cp::Model& mdl, const std::vector<int>& ids, int target, int layer, int position) {
             return cp::grad_wrt_ffn_activations(mdl, ids, target, layer, position);
           },
           py::arg("ids"), py::arg("target_id"), py::arg("layer"), py::arg("position"))
      .def("generate",
           [](const cp::Model& mdl, const cp::Tokenizer& tok, const std::string& prompt, int max_steps) {
             cp::StopSpec stop;
             stop.max_steps = max_steps;
             return cp::generate_text(mdl, tok, prompt, stop);
           },
           py::arg("tokenizer"), py::arg("prompt"), py::arg("max_steps") = 32)
      .def("evaluate",
           [](const cp::Model& mdl, const cp::Tokenizer& tok, const std::vector<std::pair<int, std::string>>& words,
              const std::vector<std::string>& shots, const std::string& sep, int jobs) {
             cp::EvalOptions eo;
             eo.jobs = jobs;
             return to_py(cp::evaluate_spelling(mdl, tok, dataset_of(words), spec_of(shots, sep), eo).to_json());
           },
           py::arg("tokenizer"), py::arg("words"), py::arg("shots") = kShots, py::arg("separator") = "whitespace",
           py::arg("jobs") = 1);

  py::class_<cp::Checkpoint>(m, "Checkpoint")
      .def_property_readonly("tokenizer", [](const cp::Checkpoint& c) { return c.tokenizer; })
      .def_property_readonly("config", [](const cp::Checkpoint& c) { return c.params.config; })
      .def("model", [](const cp::Checkpoint& c) { return cp::Model(c.params); });
  m.def("read_checkpoint", &cp::read_checkpoint);

  m.def("attribute",
        [](const cp::Model& mdl, const std::vector<int>& ids, int target, int steps,
           const std::vector<std::pair<int, int>>& neurons) {
          cp::AttributionOptions o;
          o.m = steps;
          for (const auto& [l, j] : neurons) o.neurons.push_back({l, j});
          return cp::attribute_ids(mdl, ids, target, o).scores;
        },
        py::arg("model"), py::arg("ids"), py::arg("target_id"), py::arg("m") = 20,
        py::arg("neurons") = std::vector<std::pair<int, int>>{},
        "Integrated-gradient scores [num_layers x ffn_dim] at the final position.");

  m.def("cross_validate",
        [](const cp::MatR<float>& features, const std::vector<int>& labels, int folds, std::uint64_t seed,
           int max_epochs) {
          cp::ProbeConfig pc;
          pc.seed = seed;
          pc.max_epochs = max_epochs;
          const auto cv = cp::cross_validate(features, labels, pc, folds);
          py::dict d;
          d["mean"] = cv.mean;
          d["std"] = cv.stddev;
          d["fold_accuracy"] = cv.fold_accuracy;
          d["assignment"] = cv.assignment;
          return d;
        },
        py::arg("features"), py::arg("labels"), py::arg("folds") = 10, py::arg("seed") = 0,
        py::arg("max_epochs") = 300);
  m.def("detect_breakthrough",
        [](const std::vector<std::vector<double>>& acc, const std::vector<int>& positions) {
          return cp::detect_breakthrough(acc, positions);
        },
        py::arg("accuracy"), py::arg("positions"));

  py::class_<cp::TargetAttention>(m, "AttentionResult")
      .def_readonly("per_layer", &cp::TargetAttention::per_layer)
      .def_readonly("rows_used", &cp::TargetAttention::rows_used)
      .def_readonly("degenerate_rows", &cp::TargetAttention::degenerate_rows);
  m.def("attention_to_target",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& att, int begin, int end,
           const std::vector<int>& queries, int bos) {
          return cp::attention_to_target(from_numpy(att), begin, end, queries, bos);
        },
        py::arg("attention"), py::arg("span_begin"), py::arg("span_end"), py::arg("query_positions"),
        py::arg("bos_position") = 0);

  m.def("read_trace", [](const std::filesystem::path& p) { return trace_to_dict(cp::read_trace(p)); });
  m.def("write_trace", [](const std::filesystem::path& p, const py::dict& d) { cp::write_trace(p, trace_from_dict(d)); });

  m.def("build_manifest",
        [](const std::vector<std::pair<int, std::string>>& words, const std::vector<int>& positions,
           const std::vector<std::string>& shots, const std::string& sep) {
          auto ds = dataset_of(words);
          ds.separator = sep_of(sep);
          return to_py(cp::build_manifest(ds, spec_of(shots, sep), positions).to_json());
        },
        py::arg("words"), py::arg("positions") = std::vector<int>{1, 2, 3, 4, 5}, py::arg("shots") = kShots,
        py::arg("separator") = "whitespace");

  m.def("run",
        [](const py::object& config, const std::filesystem::path& output_dir, const std::vector<std::string>& stages,
           bool resume) {
          cp::RunConfig cfg = py::isinstance<py::dict>(config)
                                  ? cp::RunConfig::from_json(from_py(config))
                                  : cp::RunConfig::load(config.cast<std::filesystem::path>());
          if (!output_dir.empty()) cfg.output_dir = output_dir;
          if (cfg.output_dir.empty()) cfg.output_dir = cp::default_output_root();
          cp::RunOptions opt;
          opt.resume = resume;
          if (stages.empty()) {
            opt.stages = cp::configured_stages(cfg);
          } else {
            for (const auto& s : stages) opt.stages.insert(cp::stage_from_string(s));
          }
          {
            py::gil_scoped_release release;
            cp::run(cfg, opt);
          }
          return cfg.output_dir;
        },
        py::arg("config"), py::arg("output_dir") = std::filesystem::path(),
        py::arg("stages") = std::vector<std::string>{}, py::arg("resume") = false,
        "Runs the pipeline from a config dict or file and returns the output directory.");
  (void)format_error;
}
