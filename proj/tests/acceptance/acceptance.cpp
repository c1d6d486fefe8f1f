// Acceptance checks. One PASS/FAIL line per criterion.
//
//   charprobe-acceptance --prepare --cache DIR     train and cache the toy model
//   charprobe-acceptance --criterion N --cache DIR run one criterion
//   charprobe-acceptance --cache DIR               run all of them

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "charprobe/errors.hpp"
#include "charprobe/pipeline.hpp"
#include "charprobe/serialize.hpp"

using namespace charprobe;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    notes.push_back(std::string(ok ? "ok: " : "FAILED: ") + what);
    pass = pass && ok;
  }
  void info(const std::string& what) { notes.push_back("info: " + what); }
};

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return json::parse(in);
}

RunConfig default_config(const fs::path& cache) {
  auto c = RunConfig::from_json(json::object());
  c.output_dir = cache / "run";
  return c;
}

// The default-config toy model and its dataset, as written by --prepare.
struct Toy {
  Checkpoint ck;
  SpellingDataset all;
  SpellingDataset heldout;
  json eval;
  double prepare_seconds = 0.0;
  PromptSpec spec;

  explicit Toy(const fs::path& cache) {
    const auto dir = cache / "run";
    if (!fs::exists(dir / "model.cpml")) throw std::runtime_error("no cached model; run --prepare first");
    ck = read_checkpoint(dir / "model.cpml");
    const auto ds = read_json(dir / "dataset.json").at("result");
    all = dataset_from_json(ds.at("dataset"));
    const auto held = ds.at("heldout_token_ids").get<std::vector<int>>();
    heldout = all;
    heldout.records.clear();
    for (const auto& r : all.records) {
      if (std::find(held.begin(), held.end(), r.token_id) != held.end()) heldout.records.push_back(r);
    }
    eval = read_json(dir / "eval.json").at("result");
    prepare_seconds = read_json(cache / "prepare.json").at("seconds").get<double>();
    spec = default_config(cache).prompt_spec();
  }
};

int prepare(const fs::path& cache) {
  fs::create_directories(cache);
  const auto cfg = default_config(cache);
  RunOptions opt;
  opt.stages = {Stage::kDataset, Stage::kModel, Stage::kEval};
  opt.resume = true;
  opt.log = [](const std::string& s) { std::cerr << s << std::endl; };
  const bool fresh = !fs::exists(cache / "prepare.json") || !fs::exists(cfg.output_dir / "model.cpml");
  const auto t0 = Clock::now();
  run(cfg, opt);
  const double secs = seconds_since(t0);
  if (fresh) write_text(cache / "prepare.json", json{{"seconds", secs}}.dump(2) + "\n");
  std::cout << "prepared toy model in " << fmt(secs, 1) << " s" << std::endl;
  return 0;
}

double softmax_at(const MatR<double>& logits, int pos, int target) {
  const RowVec<double> row = logits.row(pos);
  const double mx = row.maxCoeff();
  return std::exp(row(target) - mx) / (row.array() - mx).exp().sum();
}

// ---------------------------------------------------------------------------

Outcome criterion1(const Toy& toy) {
  Outcome o;
  const double acc = toy.eval.at("heldout").at("entire_accuracy").get<double>();
  o.check(acc >= 0.90, "held-out entire-token accuracy " + fmt(acc) + " >= 0.90 on " +
                           std::to_string(toy.heldout.records.size()) + " tokens");
  o.check(toy.prepare_seconds <= 1800.0, "train + eval runtime " + fmt(toy.prepare_seconds, 1) + " s <= 1800 s");
  return o;
}

Outcome criterion2(const Toy& toy) {
  Outcome o;
  const auto t0 = Clock::now();
  const Model model(toy.ck.params);
  const auto& cfg = model.config();
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> pick_rec(0, toy.all.records.size() - 1);
  std::uniform_int_distribution<int> pick_n(1, 5), pick_layer(0, cfg.num_layers - 1), pick_j(0, cfg.ffn_dim - 1);
  constexpr int kTriples = 200;
  constexpr double kEps = 1e-3;
  int good = 0;
  for (int t = 0; t < kTriples; ++t) {
    const auto& r = toy.all.records[pick_rec(rng)];
    const int n = std::min(pick_n(rng), r.length);
    const int layer = pick_layer(rng);
    const int j = pick_j(rng);
    const auto ids = toy.ck.tokenizer.encode(position_prompt(r.surface, toy.spec, n));
    const int pos = static_cast<int>(ids.size()) - 1;
    const int target = toy.ck.tokenizer.char_id(r.char_at(n));
    const auto g = grad_wrt_ffn_activations(model, ids, target, layer, pos);
    const double a = TracedPass(model, ids).activations(layer, pos)(j);
    const std::vector<ActivationOverride> up = {{pos, {layer, j}, a + kEps}};
    const std::vector<ActivationOverride> dn = {{pos, {layer, j}, a - kEps}};
    const double fd = (softmax_at(forward_with_overrides(model, ids, up), pos, target) -
                       softmax_at(forward_with_overrides(model, ids, dn), pos, target)) /
                      (2 * kEps);
    const double abs_err = std::abs(fd - g(j));
    const double rel_err = abs_err / std::max(std::abs(fd), 1e-300);
    if (rel_err <= 1e-3 || abs_err <= 1e-7) ++good;
  }
  const double secs = seconds_since(t0);
  o.check(good >= 198, std::to_string(good) + "/200 triples within rel 1e-3 or abs 1e-7 (need >= 99%)");
  o.check(secs <= 300.0, "runtime " + fmt(secs, 1) + " s <= 300 s");
  return o;
}

Outcome criterion3(const Toy& toy) {
  Outcome o;
  const Model model(toy.ck.params);
  std::mt19937_64 rng(3);
  std::vector<const TokenRecord*> recs;
  for (const auto& r : toy.all.records) recs.push_back(&r);
  std::shuffle(recs.begin(), recs.end(), rng);
  constexpr int kPrompts = 10;
  constexpr int kTop = 20;
  constexpr double kH = 1e-4;
  int agree = 0, refine_ok = 0, total = 0;
  double worst_oracle = 0.0, worst_refine = 0.0;
  double diff_sq = 0.0, fine_sq = 0.0;
  std::vector<std::string> outliers;
  for (int p = 0; p < kPrompts; ++p) {
    const auto& r = *recs[static_cast<std::size_t>(p)];
    const int n = 1 + p % 5;
    const auto ids = toy.ck.tokenizer.encode(position_prompt(r.surface, toy.spec, n));
    const int pos = static_cast<int>(ids.size()) - 1;
    const int target = toy.ck.tokenizer.char_id(r.char_at(n));
    AttributionOptions a20;
    a20.m = 20;
    const auto res = attribute_ids(model, ids, target, a20);
    const auto top = top_neurons(res.scores, kTop);
    const TracedPass pass(model, ids);

    AttributionOptions a200;
    a200.m = 200;
    a200.neurons = top;
    const auto fine = attribute_ids(model, ids, target, a200);

    for (const auto& nid : top) {
      const double w = pass.activations(nid.layer, pos)(nid.index);
      double sum = 0.0;
      for (int k = 1; k <= a20.m; ++k) {
        const double x = w * k / a20.m;
        const std::vector<ActivationOverride> up = {{pos, nid, x + kH}};
        const std::vector<ActivationOverride> dn = {{pos, nid, x - kH}};
        sum += (softmax_at(forward_with_overrides(model, ids, up), pos, target) -
                softmax_at(forward_with_overrides(model, ids, dn), pos, target)) /
               (2 * kH);
      }
      const double oracle = w / a20.m * sum;
      const double s = res.scores(nid.layer, nid.index);
      const double rel = std::abs(s - oracle) / std::max(std::abs(oracle), 1e-300);
      const double rel_ref = std::abs(s - fine.scores(nid.layer, nid.index)) /
                             std::max(std::abs(fine.scores(nid.layer, nid.index)), 1e-300);
      worst_oracle = std::max(worst_oracle, rel);
      worst_refine = std::max(worst_refine, rel_ref);
      agree += rel <= 1e-4 ? 1 : 0;
      refine_ok += rel_ref < 0.05 ? 1 : 0;
      const double f = fine.scores(nid.layer, nid.index);
      diff_sq += (s - f) * (s - f);
      fine_sq += f * f;
      if (rel_ref >= 0.05) {
        outliers.push_back("prompt " + std::to_string(p) + " neuron (" + std::to_string(nid.layer) + "," +
                           std::to_string(nid.index) + "): m=20 " + fmt(s, 6) + " vs m=200 " + fmt(f, 6) +
                           ", activation " + fmt(w, 4));
      }
      ++total;
    }
  }
  o.check(agree == total, std::to_string(agree) + "/" + std::to_string(total) +
                              " top-20 scores within 1e-4 relative of the forward-only oracle (worst " +
                              fmt(worst_oracle, 8) + ")");
  o.check(refine_ok == total, std::to_string(refine_ok) + "/" + std::to_string(total) +
                                  " scores change < 5% from m=20 to m=200 (worst " + fmt(worst_refine) + ")");
  for (const auto& line : outliers) o.info(line);
  o.info("relative L2 change over all top-20 scores: " + fmt(std::sqrt(diff_sq / fine_sq)));
  return o;
}

Outcome criterion4() {
  Outcome o;
  constexpr int kDim = 32;
  constexpr int kPerClass = 20;
  std::mt19937_64 rng(4);
  std::normal_distribution<float> g;
  MatR<float> centers(26, kDim);
  for (Eigen::Index i = 0; i < centers.size(); ++i) centers.data()[i] = 3.0f * g(rng);
  MatR<float> x(26 * kPerClass, kDim);
  std::vector<int> y;
  for (int i = 0; i < 26 * kPerClass; ++i) {
    const int c = i % 26;
    for (int d = 0; d < kDim; ++d) x(i, d) = centers(c, d) + 0.3f * g(rng);
    y.push_back(c);
  }
  ProbeConfig pc;
  pc.seed = 11;
  const auto cv = cross_validate(x, y, pc, 10);
  o.check(cv.mean >= 0.99, "separable 26-class features: 10-fold accuracy " + fmt(cv.mean) + " >= 0.99");

  std::vector<int> shuffled = y;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto ctrl = cross_validate(x, shuffled, pc, 10);
  o.check(std::abs(ctrl.mean - 1.0 / 26) <= 0.05,
          "shuffled-label control " + fmt(ctrl.mean) + " within 1/26 +- 0.05");

  std::vector<int> seen(y.size(), 0);
  bool cover = true;
  for (std::size_t i = 0; i < y.size(); ++i) cover = cover && cv.assignment[i] >= 0 && cv.assignment[i] < 10;
  // Rebuild the test sets from the assignment and count membership.
  for (int f = 0; f < 10; ++f)
    for (std::size_t i = 0; i < y.size(); ++i) seen[i] += cv.assignment[i] == f ? 1 : 0;
  cover = cover && std::all_of(seen.begin(), seen.end(), [](int v) { return v == 1; });
  o.check(cover, "every sample lies in exactly one of the 10 test folds");

  const auto again = cross_validate(x, y, pc, 10, SplitMode::kDisjoint, 2);
  bool same = again.fold_accuracy.size() == cv.fold_accuracy.size();
  for (std::size_t i = 0; same && i < cv.fold_accuracy.size(); ++i) {
    same = std::memcmp(&again.fold_accuracy[i], &cv.fold_accuracy[i], sizeof(double)) == 0;
  }
  o.check(same && again.mean == cv.mean, "identical seeds reproduce fold accuracies bit-for-bit");
  return o;
}

// Independent reference: first maximizer of the mean gain on columns N >= 2.
int brute_breakthrough(const std::vector<std::vector<double>>& acc, std::span<const int> positions) {
  int best = -1;
  double best_gain = -1e300;
  for (std::size_t l = 1; l < acc.size(); ++l) {
    double gain = 0.0;
    int cols = 0;
    for (std::size_t c = 0; c < positions.size(); ++c) {
      if (positions[c] < 2) continue;
      gain += acc[l][c] - acc[l - 1][c];
      ++cols;
    }
    gain /= cols;
    if (gain > best_gain + 1e-9) {
      best_gain = gain;
      best = static_cast<int>(l);
    }
  }
  return best;
}

Outcome criterion5() {
  Outcome o;
  const std::vector<int> positions = {1, 2, 3, 4, 5};
  int cases = 0, hits = 0, agree = 0;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> jitter(-0.01, 0.01);
  for (int L = 2; L <= 12; ++L) {
    for (int j = 1; j <= L; ++j) {
      std::vector<std::vector<double>> acc(static_cast<std::size_t>(L + 1), std::vector<double>(5));
      for (int l = 0; l <= L; ++l)
        for (int c = 0; c < 5; ++c)
          acc[static_cast<std::size_t>(l)][static_cast<std::size_t>(c)] =
              0.1 + 0.005 * l + (l >= j ? 0.5 : 0.0) + jitter(rng) * 0.1;
      const auto got = detect_breakthrough(acc, positions);
      ++cases;
      hits += got == j ? 1 : 0;
      agree += got && *got == brute_breakthrough(acc, positions) ? 1 : 0;
    }
  }
  o.check(hits == cases, std::to_string(hits) + "/" + std::to_string(cases) + " injected single jumps recovered");

  // Two-peak curve: an early bump that fades, then the main jump later on.
  for (int L = 6; L <= 32; L += 2) {
    const int early = L / 4;
    const int main = (2 * L) / 3;
    std::vector<std::vector<double>> acc(static_cast<std::size_t>(L + 1), std::vector<double>(5));
    for (int l = 0; l <= L; ++l) {
      for (int c = 0; c < 5; ++c) {
        double v = 0.05;
        if (l >= early && l < early + 2) v += 0.25;
        if (l >= main) v += 0.6 - 0.01 * (l - main);
        acc[static_cast<std::size_t>(l)][static_cast<std::size_t>(c)] = v;
      }
    }
    const auto got = detect_breakthrough(acc, positions);
    ++cases;
    hits += got == main ? 1 : 0;
    agree += got && *got == brute_breakthrough(acc, positions) ? 1 : 0;
  }
  o.check(hits == cases, "two-peak curves: main jump chosen in all " + std::to_string(cases) + " cases");

  // Random matrices against exhaustive enumeration.
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int rand_cases = 0, rand_agree = 0;
  for (int t = 0; t < 2000; ++t) {
    const int L = 1 + t % 10;
    std::vector<std::vector<double>> acc(static_cast<std::size_t>(L + 1), std::vector<double>(5));
    for (auto& row : acc)
      for (auto& v : row) v = std::round(u(rng) * 8) / 8;
    const auto got = detect_breakthrough(acc, positions);
    ++rand_cases;
    rand_agree += got && *got == brute_breakthrough(acc, positions) ? 1 : 0;
  }
  o.check(agree == cases && rand_agree == rand_cases,
          "matches exhaustive argmax enumeration on " + std::to_string(cases + rand_cases) + " matrices");
  return o;
}

Outcome criterion6(const Toy& toy) {
  Outcome o;
  const Model model(toy.ck.params);
  const auto& cfg = model.config();
  const auto& all = toy.eval.at("all").at("per_position");
  ProbeRunOptions pro;
  pro.positions = {1, 2, 3, 4, 5};
  pro.embedding_probe = true;
  const auto rep = probe_all_layers(model, toy.ck.tokenizer, toy.all, toy.spec, pro);
  double worst = 0.0;
  for (std::size_t c = 0; c < 5; ++c) {
    const double probe = rep.accuracy[static_cast<std::size_t>(cfg.num_layers)][c];
    const double fewshot = all.at(c).at("accuracy").get<double>();
    worst = std::max(worst, std::abs(probe - fewshot));
    o.info("N=" + std::to_string(c + 1) + ": final-layer probe " + fmt(probe) + ", few-shot " + fmt(fewshot) +
           ", embedding probe " + fmt(rep.embedding_accuracy[c]));
  }
  o.check(worst <= 0.05, "(a) final-layer probe within 5 points of few-shot accuracy at every N (max gap " +
                             fmt(worst) + ")");
  const double n1 = all.at(0).at("accuracy").get<double>();
  const double n5 = all.at(4).at("accuracy").get<double>();
  o.check(n1 >= n5, "(b) few-shot accuracy N=1 " + fmt(n1) + " >= N=5 " + fmt(n5));

  // Random-embedding control: the same probe on i.i.d. Gaussian token vectors.
  FeatureSet real = extract_features(model, toy.ck.tokenizer, toy.all, kEmbedding, 1, toy.spec);
  MatR<float> noise(real.features.rows(), real.features.cols());
  std::mt19937_64 rng(6);
  std::normal_distribution<float> g;
  for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = g(rng);
  const auto ctrl = cross_validate(noise, real.labels, pro.probe, 10);
  const double chance = 1.0 / 26;
  const double emb1 = rep.embedding_accuracy[0];
  o.check(emb1 > chance + 0.05, "(c) embedding probe N=1 " + fmt(emb1) + " above chance + 0.05");
  o.check(std::abs(ctrl.mean - chance) <= 0.05, "(c) random-embedding control " + fmt(ctrl.mean) +
                                                    " within chance " + fmt(chance) + " +- 0.05");
  return o;
}

Outcome criterion7(const Toy& toy) {
  Outcome o;
  const Model model(toy.ck.params);
  const auto& tok = toy.ck.tokenizer;
  const auto defaults = RunConfig::from_json(json::object()).neurons;
  const EvalReport baseline = [&] {
    EvalOptions eo;
    return evaluate_spelling(model, tok, toy.all, toy.spec, eo);
  }();

  // Sanity of the ablation machinery.
  KnowledgeNeuronSet probe_set;
  probe_set.key = "probe";
  probe_set.neurons = random_neurons(model.config(), 100, 77);
  probe_set.mean_attribution = MatR<double>::Zero(model.config().num_layers, model.config().ffn_dim);
  const std::vector<KnowledgeNeuronSet> one = {probe_set};
  AblationOptions none;
  none.top_k = 0;
  const auto r0 = ablate_and_eval(model, tok, one, toy.all, toy.spec, none, &baseline);
  o.check(r0.entries[0].entire_delta == 0.0 &&
              std::all_of(r0.entries[0].position_delta.begin(), r0.entries[0].position_delta.end(),
                          [](double d) { return d == 0.0; }),
          "top_k = 0 gives zero delta");
  AblationOptions traced;
  traced.value = AblationValue::kTraced;
  const auto rt = ablate_and_eval(model, tok, one, toy.all, toy.spec, traced, &baseline);
  o.check(rt.entries[0].report.outcomes_csv() == baseline.outcomes_csv() && rt.entries[0].entire_delta == 0.0,
          "traced-value substitution of 100 neurons reproduces the baseline exactly");

  // Directional check with the default identification rule.
  IdentifyOptions io;
  io.samples = 40;
  io.top_pct = defaults.top_pct;
  io.consensus = defaults.consensus;
  io.attribution.m = defaults.m;
  std::vector<KnowledgeNeuronSet> sets;
  for (int n : {1, 2, 3}) {
    io.seed = 700 + static_cast<std::uint64_t>(n);
    sets.push_back(identify_knowledge_neurons(model, tok, toy.all, n, toy.spec, io));
  }
  AblationOptions ab;
  ab.top_k = defaults.top_k;
  const auto rep = ablate_and_eval(model, tok, sets, toy.all, toy.spec, ab, &baseline);
  double random_delta = 0.0;
  for (int s = 0; s < 5; ++s) {
    const auto e = ablate_neurons(model, tok, toy.all, toy.spec, baseline,
                                  random_neurons(model.config(), ab.top_k, 900 + static_cast<std::uint64_t>(s)), ab,
                                  "random");
    random_delta += e.entire_delta / 5.0;
  }
  o.info("baseline entire-token accuracy " + fmt(baseline.entire_accuracy()) + "; random-100 mean delta " +
         fmt(random_delta));
  bool all_more = true;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    double max_frac = sets[i].top_fraction.maxCoeff();
    const auto& e = rep.entries[i];
    o.info(sets[i].key + ": " + std::to_string(sets[i].neurons.size()) + " neurons at consensus " +
           fmt(io.consensus, 2) + " (highest per-neuron consensus fraction " + fmt(max_frac, 3) + "), delta " +
           fmt(e.entire_delta));
    all_more = all_more && e.entire_delta < random_delta;
  }
  o.check(all_more, "identified sets degrade accuracy more than random-100 controls (defaults: top 1%, "
                    "consensus 0.75, " + std::to_string(io.samples) + " samples)");

  // Diagnostic only: the 100 neurons with the highest mean attribution,
  // ignoring the consensus threshold.
  for (const auto& s : sets) {
    const auto ranked = top_neurons(s.mean_attribution, 100);
    const auto e = ablate_neurons(model, tok, toy.all, toy.spec, baseline, ranked, ab, s.key);
    o.info(s.key + ": top-100 by mean attribution (no consensus) delta " + fmt(e.entire_delta));
  }
  return o;
}

Outcome criterion8(const Toy& toy) {
  Outcome o;
  const Model model(toy.ck.params);
  double worst = 0.0;
  std::size_t rows = 0, degenerate = 0;
  for (std::size_t i = 0; i < 20 && i < toy.all.records.size(); ++i) {
    const auto ids = toy.ck.tokenizer.encode(spelled_prompt(toy.all.records[i].surface, toy.spec));
    const auto tr = *forward(model, ids, true).trace;
    const auto& a = tr.attention;
    for (std::size_t l = 0; l < a.shape[0]; ++l)
      for (std::size_t h = 0; h < a.shape[1]; ++h)
        for (std::size_t q = 0; q < a.shape[2]; ++q) {
          const auto row = renormalized_row(a, l, h, q, 0);
          if (row.empty()) {
            ++degenerate;
            continue;
          }
          worst = std::max(worst, std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0));
          ++rows;
        }
  }
  o.check(worst <= 1e-6, std::to_string(rows) + " renormalized model rows sum to 1 (max error " +
                             fmt(worst, 12) + "); " + std::to_string(degenerate) + " degenerate");

  // Uniform causal attention over T positions.
  bool exact = true;
  for (std::size_t T : {4u, 9u, 17u}) {
    Tensor att({2, 3, T, T});
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t h = 0; h < 3; ++h)
        for (std::size_t q = 0; q < T; ++q)
          for (std::size_t k = 0; k <= q; ++k) att.at(l, h, q, k) = 1.0f / static_cast<float>(q + 1);
    for (int span = 1; span <= 2; ++span) {
      const int q = static_cast<int>(T) - 1;
      const std::vector<int> queries = {q};
      const auto r = attention_to_target(att, 1, 1 + span, queries, 0);
      const double expect = static_cast<double>(span) / static_cast<double>(q);  // keys - 1 = q
      for (double v : r.per_layer) exact = exact && std::abs(v - expect) <= 1e-12;
    }
  }
  o.check(exact, "uniform attention yields |target_span| / (keys - 1)");

  Tensor bos({1, 2, 5, 5});
  bos.at(0, 0, 4, 0) = 1.0f;
  bos.at(0, 1, 4, 0) = 0.5f;
  bos.at(0, 1, 4, 2) = 0.5f;
  const std::vector<int> q4 = {4};
  const auto r = attention_to_target(bos, 2, 3, q4, 0);
  o.check(r.degenerate_rows == 1 && r.rows_used[0] == 1 && std::abs(r.per_layer[0] - 1.0) < 1e-12,
          "BOS-only rows are excluded and counted");
  return o;
}

Outcome criterion9() {
  Outcome o;
  const std::vector<VocabEntry> crafted = {{10, "_hello"}, {11, "_Hello"}, {12, "hello"},
                                           {13, "_hi"},    {14, "_token5"}, {15, "_worlds"}};
  const auto ds = filter_vocabulary(crafted);
  o.check(ds.records.size() == 2 && ds.records[0].surface == "hello" && ds.records[1].surface == "worlds",
          "crafted 6-entry vocabulary yields exactly {hello, worlds}");
  std::vector<VocabEntry> again;
  for (const auto& r : ds.records) again.push_back({r.token_id, "_" + r.surface});
  o.check(filter_vocabulary(again).records == ds.records, "filter is idempotent");

  // Optional real vocabularies: <dir>/<name>.txt in token_id<TAB>surface form.
  struct Ref {
    const char* file;
    const char* marker;
    const char* percent;
  };
  const std::vector<Ref> refs = {{"llama3-8b.txt", "\xC4\xA0", "15.38"},
                                 {"gemma-7b.txt", "\xE2\x96\x81", "18.68"},
                                 {"qwen2.5-7b.txt", "\xC4\xA0", "12.48"},
                                 {"amber-6.7b.txt", "\xE2\x96\x81", "19.16"}};
  const char* dir = std::getenv("CHARPROBE_VOCAB_DIR");
  if (!dir || !*dir) {
    o.info("retention against real vocabularies skipped (set CHARPROBE_VOCAB_DIR)");
    return o;
  }
  for (const auto& ref : refs) {
    const fs::path p = fs::path(dir) / ref.file;
    if (!fs::exists(p)) {
      o.info(std::string(ref.file) + " not found, skipped");
      continue;
    }
    const auto entries = read_vocab_file(p);
    const auto got = retention_percent(filter_vocabulary(entries, {ref.marker, 5}));
    o.check(got == ref.percent, std::string(ref.file) + " retention " + got + "% (expected " + ref.percent + "%)");
  }
  return o;
}

Outcome criterion10(const Toy& toy, const fs::path& cache) {
  Outcome o;
  const auto dir = cache / "c10";
  fs::remove_all(dir);
  auto tiny = json::parse(R"({
    "seed": 9,
    "vocabulary": {"size": 120},
    "model": {"config": {"num_layers": 2, "num_heads": 2, "model_dim": 32, "ffn_dim": 64},
              "train": {"max_steps": 60}},
    "probe": {"positions": [1, 2, 3], "folds": 3, "config": {"max_epochs": 10}},
    "neurons": {"positions": [1, 2, 3], "samples": 5, "m": 4, "top_k": 10, "random_controls": 2,
                "alphabet": "e", "consensus": 0.4, "top_pct": 0.05},
    "attention": {"samples": 20, "restrict_to_correct": false}
  })");
  std::map<std::string, std::vector<std::uint8_t>> first;
  bool identical = true;
  std::size_t files = 0;
  for (int k = 0; k < 2; ++k) {
    auto cfg = RunConfig::from_json(tiny);
    cfg.output_dir = dir / ("run" + std::to_string(k));
    cfg.jobs = k + 1;
    RunOptions opt;
    opt.stages = configured_stages(cfg);
    opt.report_format = ReportFormat::kJson;
    run(cfg, opt);
    for (const auto& e : fs::directory_iterator(cfg.output_dir / "report")) {
      const auto bytes = read_file_bytes(e.path());
      const auto name = e.path().filename().string();
      if (k == 0) {
        first[name] = bytes;
      } else {
        identical = identical && first.count(name) && first[name] == bytes;
        ++files;
      }
    }
  }
  o.check(identical && files == first.size() && files > 0,
          std::to_string(files) + " report JSON files byte-identical across two runs (jobs 1 vs 2)");

  const auto ck_path = dir / "model.cpml";
  write_checkpoint(ck_path, toy.ck.params, toy.ck.tokenizer);
  const auto back = read_checkpoint(ck_path);
  o.check(bit_equal(back.params, toy.ck.params) && back.tokenizer == toy.ck.tokenizer,
          "checkpoint round trip is bit-exact");

  const Model model(toy.ck.params);
  const std::string text = spelled_prompt(toy.all.records.front().surface, toy.spec);
  const auto ids = toy.ck.tokenizer.encode(text);
  TraceFile tf;
  tf.meta = trace_meta_for(toy.ck.params.config, toy.ck.tokenizer, "toy", text, ids);
  tf.trace = *forward(model, ids, true).trace;
  write_trace(dir / "t.cptrace", tf);
  const auto tb = read_trace(dir / "t.cptrace");
  o.check(tb.meta == tf.meta && bit_equal(tb.trace, tf.trace), ".cptrace round trip is bit-exact");

  // Corruption: every truncation and a flipped payload byte must raise, and a
  // run pointed at a corrupted checkpoint must leave no stage outputs behind.
  auto bytes = read_file_bytes(dir / "t.cptrace");
  bool rejected = true;
  for (std::size_t len = 0; len < bytes.size(); len += 1 + bytes.size() / 3000) {
    try {
      decode_trace(std::span(bytes).first(len));
      rejected = false;
    } catch (const FormatError&) {
    }
  }
  bytes[bytes.size() / 2 + bytes.size() / 4] ^= 0x40;
  try {
    decode_trace(bytes);
    rejected = false;
  } catch (const FormatError&) {
  }
  auto ck_bytes = read_file_bytes(ck_path);
  ck_bytes[ck_bytes.size() - 5] ^= 0x01;
  write_file_bytes(dir / "bad.cpml", ck_bytes);
  try {
    read_checkpoint(dir / "bad.cpml");
    rejected = false;
  } catch (const ChecksumError&) {
  }
  auto cfg = RunConfig::from_json(tiny);
  cfg.model.kind = "checkpoint";
  cfg.model.path = dir / "bad.cpml";
  cfg.output_dir = dir / "corrupt-run";
  RunOptions opt;
  opt.stages = configured_stages(cfg);
  bool stage_failed = false;
  try {
    run(cfg, opt);
  } catch (const StageError& e) {
    stage_failed = e.stage() == "dataset" || e.stage() == "model";
  }
  const bool no_partial = !fs::exists(cfg.output_dir / "eval.json") && !fs::exists(cfg.output_dir / "model.cpml") &&
                          !fs::exists(cfg.output_dir / "report");
  o.check(rejected && stage_failed && no_partial,
          "truncated or corrupted files are rejected and leave no partial results");
  return o;
}

Outcome run_criterion(int c, const fs::path& cache) {
  switch (c) {
    case 4: return criterion4();
    case 5: return criterion5();
    case 9: return criterion9();
    default: break;
  }
  const Toy toy(cache);
  switch (c) {
    case 1: return criterion1(toy);
    case 2: return criterion2(toy);
    case 3: return criterion3(toy);
    case 6: return criterion6(toy);
    case 7: return criterion7(toy);
    case 8: return criterion8(toy);
    case 10: return criterion10(toy, cache);
    default: throw std::invalid_argument("criterion must be 1..10");
  }
}

const char* kTitles[] = {"",
                         "toy spelling competence",
                         "gradient oracle",
                         "attribution oracle",
                         "probe machinery",
                         "breakthrough detector",
                         "toy-scale directional reproduction",
                         "ablation soundness",
                         "attention invariants",
                         "filter golden test",
                         "determinism and persistence"};

bool report(int c, const fs::path& cache) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = run_criterion(c, cache);
  } catch (const std::exception& e) {
    o.check(false, std::string("exception: ") + e.what());
  }
  for (const auto& n : o.notes) std::cout << "    " << n << '\n';
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c << ": " << kTitles[c] << " ("
            << fmt(seconds_since(t0), 1) << " s)" << std::endl;
  return o.pass;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"charprobe acceptance checks"};
  std::string cache = "acceptance-cache";
  bool do_prepare = false;
  int criterion = 0;
  app.add_option("--cache", cache, "Directory for the cached toy model");
  app.add_flag("--prepare", do_prepare, "Train (or reuse) the toy model and exit");
  app.add_option("--criterion", criterion, "Run a single criterion")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  try {
    if (do_prepare) return prepare(cache);
  } catch (const std::exception& e) {
    std::cerr << "prepare failed: " << e.what() << std::endl;
    return 1;
  }
  if (criterion) return report(criterion, cache) ? 0 : 1;
  if (!fs::exists(fs::path(cache) / "prepare.json")) prepare(cache);
  int failed = 0;
  for (int c = 1; c <= 10; ++c) failed += report(c, cache) ? 0 : 1;
  std::cout << (10 - failed) << "/10 criteria passed" << std::endl;
  return failed ? 1 : 0;
}
