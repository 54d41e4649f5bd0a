#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "headprune/experiment.hpp"
#include "headprune/numfmt.hpp"
#include "io_util.hpp"
#include "json.hpp"

namespace headprune {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

std::string anchor_id(const ExperimentConfig& config) {
  for (const auto& d : config.languages)
    if (d.anchor) return d.id;
  throw std::invalid_argument("config has no anchor language");
}

double mean(const std::vector<double>& v) {
  std::vector<double> s = v;
  std::sort(s.begin(), s.end());
  double sum = 0.0;
  for (double x : s) sum += x;
  return sum / static_cast<double>(s.size());
}

ojson number_or_null(double v) { return std::isfinite(v) ? ojson(v) : ojson(nullptr); }

ojson summary_json(const RepeatSummary& r) {
  return {{"mean", r.mean}, {"stddev", r.stddev}, {"n_runs", r.n_runs}, {"finals", r.finals}};
}

ojson groups_json(const GroupMeans& g) {
  ojson j;
  j["by_family"] = g.by_family;
  j["by_tier"] = g.by_tier;
  return j;
}

std::string safe_name(std::string s) {
  for (char& c : s)
    if (c == ':' || c == '/' || c == ' ') c = '_';
  return s;
}

}  // namespace

ReportData aggregate_metrics(const ExperimentConfig& config, const std::vector<MetricsRecord>& records) {
  ReportData out;
  out.anchor = anchor_id(config);
  const auto suite = langlab::build_language_suite(config.languages, 0);

  // policy -> seed -> language -> final accuracy
  std::map<std::string, std::map<std::uint64_t, std::map<std::string, double>>> finals;
  // policy -> seed -> epoch -> anchor dev accuracy
  std::map<std::string, std::map<std::uint64_t, std::map<std::size_t, double>>> curves;
  for (const auto& r : records) {
    if (r.experiment_id != config.experiment_id) continue;
    if (r.task == "xnli") finals[r.policy][r.seed][r.language_id] = r.accuracy;
    else if (r.task == "nli" && r.language_id == out.anchor) curves[r.policy][r.seed][r.epoch] = r.accuracy;
  }

  std::vector<std::string> policies;
  for (const auto& p : config.policies) policies.push_back(PruningPolicy::parse(p).to_string());
  for (const auto& p : policies)
    for (std::uint64_t s : config.seeds)
      if (!finals.count(p) || !finals[p].count(s))
        out.missing_cells.push_back(Cell{PruningPolicy::parse(p), s}.id());

  for (const auto& p : policies) {
    if (!finals.count(p)) continue;
    std::map<std::string, std::vector<double>> by_lang;
    for (const auto& [seed, langs] : finals[p])
      for (const auto& [lang, acc] : langs) by_lang[lang].push_back(acc);
    for (const auto& [lang, accs] : by_lang) out.accuracy[p][lang] = summarize_finals(accs);
  }

  for (const auto& p : policies)
    if (PruningPolicy::parse(p).is_identity()) {
      out.base_policy = p;
      break;
    }

  // drops[policy][language], over seeds present for both policy and base
  std::map<std::string, std::map<std::string, double>> lang_drops;
  if (!out.base_policy.empty() && finals.count(out.base_policy)) {
    const auto& base = finals[out.base_policy];
    for (const auto& p : policies) {
      if (!finals.count(p)) continue;
      std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> paired;
      for (const auto& [seed, langs] : finals[p]) {
        if (!base.count(seed)) continue;
        for (const auto& [lang, acc] : langs)
          if (base.at(seed).count(lang)) {
            paired[lang].first.push_back(base.at(seed).at(lang));
            paired[lang].second.push_back(acc);
          }
      }
      for (const auto& spec : suite) {
        const auto it = paired.find(spec.language_id);
        if (it == paired.end()) continue;
        const double b = mean(it->second.first), q = mean(it->second.second);
        if (!(b > 0)) {
          out.warnings.push_back("base accuracy is zero for " + spec.language_id + "; drop undefined");
          continue;
        }
        lang_drops[p][spec.language_id] = out.drops.add(p, spec.language_id, b, q).drop;
      }
      std::vector<double> target_drops;
      std::map<std::string, double> targets;
      for (const auto& [lang, d] : lang_drops[p])
        if (lang != out.anchor) {
          target_drops.push_back(d);
          targets[lang] = d;
        }
      if (target_drops.empty()) continue;
      // Aggregate rows carry mean drops; their accuracy columns are means too.
      auto add_group = [&](const std::string& group, const std::vector<std::string>& langs) {
        std::vector<double> b, q;
        for (const auto& l : langs) {
          b.push_back(out.drops.at(p, l).base);
          q.push_back(out.drops.at(p, l).pruned);
        }
        std::vector<double> d;
        for (const auto& l : langs) d.push_back(lang_drops[p][l]);
        out.drops.add_row({p, group, mean(b), mean(q), mean(d)});
      };
      std::vector<std::string> all_targets;
      std::map<std::string, std::vector<std::string>> fam, tier;
      for (const auto& spec : suite) {
        if (!targets.count(spec.language_id)) continue;
        all_targets.push_back(spec.language_id);
        fam["family:" + langlab::to_string(spec.family())].push_back(spec.language_id);
        tier["tier:" + langlab::to_string(spec.tier)].push_back(spec.language_id);
      }
      add_group("targets_mean", all_targets);
      for (const auto& [g, langs] : fam) add_group(g, langs);
      for (const auto& [g, langs] : tier) add_group(g, langs);
    }
  }

  // d for every bottom:n / top:n pair in the grid.
  for (const auto& p : policies) {
    const PruningPolicy bottom = PruningPolicy::parse(p);
    if (bottom.kind != PruningPolicy::Kind::LayerSet || bottom.layers != LayerSet::Bottom) continue;
    const std::string top = PruningPolicy::layer_set(LayerSet::Top, bottom.count).to_string();
    if (!lang_drops.count(p) || !lang_drops.count(top)) continue;
    std::map<std::string, double> d;
    for (const auto& [lang, drop] : lang_drops[p])
      if (lang_drops[top].count(lang))
        d[lang] = d_metric({bottom.count, drop}, {bottom.count, lang_drops[top][lang]});
    std::map<std::string, double> targets = d;
    targets.erase(out.anchor);
    out.d_by_language[bottom.count] = d;
    out.d_groups[bottom.count] = group_means(targets, suite);
    const auto& fam = out.d_groups[bottom.count].by_family;
    const auto agg = fam.find(langlab::to_string(langlab::Family::Agglutinative));
    if (agg != fam.end() && !(agg->second > 0))
      out.warnings.push_back("d(Agglutinative) = " + format_double(agg->second) + " with " +
                             std::to_string(bottom.count) +
                             " layers: bottom layers did not matter more for the most distant family");
  }

  for (const auto& [p, seeds] : curves)
    for (const auto& [seed, epochs] : seeds) {
      std::vector<double> acc;
      for (const auto& [e, a] : epochs)
        if (e > 0) acc.push_back(a);
      if (acc.empty()) continue;
      try {
        const auto r = recovery_curve(acc);
        out.first_epoch_recovery[p].push_back(r.front());
        if (!(r.front() > 0 && r.front() <= 1))
          out.warnings.push_back("r_1 = " + format_double(r.front()) + " outside (0, 1] for " +
                                 Cell{PruningPolicy::parse(p), seed}.id());
      } catch (const std::domain_error& e) {
        out.warnings.push_back(Cell{PruningPolicy::parse(p), seed}.id() + ": " + e.what());
      }
    }
  return out;
}

std::string build_report(const ExperimentConfig& config, const RunLayout& layout) {
  io::require_file(layout.metrics(), "run");
  const auto records = MetricsSink::read_csv(layout.metrics().string());
  const ReportData data = aggregate_metrics(config, records);
  ojson j;
  j["schema_version"] = kSummarySchemaVersion;
  j["experiment_id"] = config.experiment_id;
  j["seed_root"] = config.seed_root;
  j["status"] = data.missing_cells.empty() ? "complete" : "incomplete";
  j["missing_cells"] = data.missing_cells;
  j["anchor"] = data.anchor;
  j["base_policy"] = data.base_policy;

  ojson acc = ojson::object();
  for (const auto& [p, langs] : data.accuracy) {
    ojson pl = ojson::object();
    for (const auto& [l, r] : langs) pl[l] = summary_json(r);
    acc[p] = pl;
  }
  j["accuracy"] = acc;

  ojson drops = ojson::array();
  for (const auto& r : data.drops.rows())
    drops.push_back({{"policy", r.policy},
                     {"group", r.group},
                     {"base_accuracy", r.base},
                     {"pruned_accuracy", r.pruned},
                     {"relative_drop_pct", r.drop}});
  j["drops"] = drops;

  ojson d = ojson::array();
  for (const auto& [n, langs] : data.d_by_language)
    d.push_back({{"layers", n},
                 {"by_language", langs},
                 {"groups", groups_json(data.d_groups.at(n))},
                 {"reference_family_order", ReferenceAnnotations::family_order},
                 {"reference_tier_order", ReferenceAnnotations::tier_order}});
  j["d_metric"] = d;

  ojson rec = ojson::object();
  for (const auto& [p, r1] : data.first_epoch_recovery)
    rec[p] = {{"r1_per_seed", r1}, {"r1_mean", mean(r1)}};
  j["recovery"] = {{"first_epoch", rec}, {"paper_reference_r1", ReferenceAnnotations::recovery_after_one_epoch}};

  // Entropy tables written by the run, if any.
  ojson ent = ojson::array();
  if (fs::exists(layout.entropy())) {
    std::vector<fs::path> deltas;
    for (const auto& e : fs::directory_iterator(layout.entropy()))
      if (e.path().filename().string().ends_with("_delta.csv")) deltas.push_back(e.path());
    std::sort(deltas.begin(), deltas.end());
    for (const auto& path : deltas) {
      std::istringstream in(io::read_file(path));
      std::string line;
      std::getline(in, line);
      std::map<std::string, std::pair<double, std::size_t>> bands;
      while (std::getline(in, line)) {
        std::stringstream ls(line);
        std::string layer, head, band, value;
        std::getline(ls, layer, ',');
        std::getline(ls, head, ',');
        std::getline(ls, band, ',');
        std::getline(ls, value, ',');
        bands[band].first += parse_double(value);
        ++bands[band].second;
      }
      ojson means = ojson::object();
      for (const char* b : {"bottom", "middle", "top"})
        means[b] = bands.count(b) ? number_or_null(bands[b].first / static_cast<double>(bands[b].second))
                                  : ojson(nullptr);
      std::string cell = path.filename().string();
      cell.resize(cell.size() - std::string("_delta.csv").size());
      ent.push_back({{"cell", cell}, {"delta_band_means", means}});
    }
  }
  j["entropy"] = ent;

  j["paper_reference"] = {
      {"glue_relative_drop_pct_at_random_50", ReferenceAnnotations::glue_drop_random_50},
      {"xnli_relative_drop_pct_at_random_50", ReferenceAnnotations::xnli_drop_random_50},
      {"xnli_relative_drop_pct_at_random_90",
       {ReferenceAnnotations::xnli_drop_random_90_lo, ReferenceAnnotations::xnli_drop_random_90_hi}},
      {"entropy_delta_band_means",
       {{"top", ReferenceAnnotations::entropy_delta_top},
        {"bottom", ReferenceAnnotations::entropy_delta_bottom},
        {"middle", ReferenceAnnotations::entropy_delta_middle}}},
      {"first_epoch_recovery", ReferenceAnnotations::recovery_after_one_epoch},
      {"d_family_order", ReferenceAnnotations::family_order},
      {"d_tier_order", ReferenceAnnotations::tier_order},
      {"note", "full-scale mBERT figures; compare direction, not magnitude"}};
  j["warnings"] = data.warnings;

  const std::string text = j.dump(2) + "\n";
  io::write_file_atomic(layout.summary(), text);

  // Plot series: relative drop against random-pruning percentage.
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  std::ostringstream layers;
  layers << "policy,group,relative_drop_pct\n";
  for (const auto& r : data.drops.rows()) {
    const PruningPolicy p = PruningPolicy::parse(r.policy);
    if (p.kind == PruningPolicy::Kind::RandomFraction) series[r.group].push_back({100.0 * p.fraction, r.drop});
    else layers << r.policy << ',' << r.group << ',' << format_double(r.drop) << '\n';
  }
  for (auto& [group, pts] : series) {
    std::sort(pts.begin(), pts.end());
    std::ostringstream out;
    out << "pruning_pct,relative_drop_pct\n";
    for (const auto& [x, y] : pts) out << format_double(x) << ',' << format_double(y) << '\n';
    io::write_file_atomic(layout.plotdata() / ("drop_vs_k_" + safe_name(group) + ".csv"), out.str());
  }
  io::write_file_atomic(layout.plotdata() / "layer_sets.csv", layers.str());

  std::ostringstream rec_csv;
  rec_csv << "policy,seed,epoch,recovery_ratio\n";
  std::map<std::string, std::map<std::uint64_t, std::vector<std::pair<std::size_t, double>>>> curves;
  for (const auto& r : records)
    if (r.experiment_id == config.experiment_id && r.task == "nli" && r.language_id == data.anchor &&
        r.epoch > 0)
      curves[r.policy][r.seed].push_back({r.epoch, r.accuracy});
  for (auto& [p, seeds] : curves)
    for (auto& [seed, pts] : seeds) {
      std::sort(pts.begin(), pts.end());
      std::vector<double> acc;
      for (const auto& pt : pts) acc.push_back(pt.second);
      if (!(acc.back() > 0)) continue;
      const auto r = recovery_curve(acc);
      for (std::size_t i = 0; i < pts.size(); ++i)
        rec_csv << p << ',' << seed << ',' << pts[i].first << ',' << format_double(r[i]) << '\n';
    }
  io::write_file_atomic(layout.plotdata() / "recovery.csv", rec_csv.str());
  return text;
}

}  // namespace headprune
