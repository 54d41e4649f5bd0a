// Command-line front end: one subcommand per pipeline stage, plus `run`
// (all stages) and `report` (aggregation only).

#include <fmt/core.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>

#include "headprune/experiment.hpp"

namespace fs = std::filesystem;
using namespace headprune;

namespace {

struct Common {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed_root;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "Experiment config (JSON); defaults apply when omitted");
  app->add_option("--out", c.out, "Run directory; overrides output_dir");
  app->add_option("--seed-root", c.seed_root, "Overrides seed_root");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig config;
  if (!c.config_path.empty()) config = load_config(c.config_path);
  if (!c.out.empty()) config.output_dir = c.out;
  if (c.seed_root) config.seed_root = *c.seed_root;
  config.validate();
  return config;
}

// A run directory belongs to one config; stepwise stages refuse to mix.
RunLayout claim(const ExperimentConfig& config) {
  RunLayout layout{config.output_dir};
  if (fs::exists(layout.config())) {
    const ExperimentConfig existing = load_config(layout.config());
    if (!(existing == config))
      throw std::runtime_error(layout.root.string() +
                               " holds a run with a different config; choose another --out");
  } else {
    save_config(config, layout.config());
  }
  return layout;
}

// Stages that read a run directory use its stored config when none is given.
ExperimentConfig resolve_existing(const Common& c) {
  if (c.config_path.empty() && !c.out.empty() && fs::exists(RunLayout{c.out}.config())) {
    ExperimentConfig config = load_config(RunLayout{c.out}.config());
    if (c.seed_root) config.seed_root = *c.seed_root;
    return config;
  }
  return resolve(c);
}

Cell parse_cell(const std::string& policy, std::uint64_t seed) {
  return Cell{PruningPolicy::parse(policy), seed};
}

std::mutex print_mutex;
void progress(const std::string& message) {
  std::lock_guard<std::mutex> lock(print_mutex);
  fmt::print(stderr, "[headprune] {}\n", message);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-head pruning experiments on synthetic multilingual data"};
  app.require_subcommand(1);

  Common common;
  std::size_t workers = 1;
  std::string only;
  std::string policy = "random:0";
  std::uint64_t seed = 1;
  std::string language;
  bool dry_run = false;
  std::string write_path;

  auto* run = app.add_subcommand("run", "Run every stage and write the full artifact directory");
  add_common(run, common);
  run->add_option("--workers", workers, "Cells fine-tuned concurrently")->check(CLI::PositiveNumber);
  run->add_option("--only", only, "Comma-separated globs over cell ids such as 'random:0.5@s*'");

  auto* gen = app.add_subcommand("gen-langs", "Generate the language suite and corpora");
  add_common(gen, common);

  auto* pre = app.add_subcommand("pretrain", "Train the tokenizer and MLM-pretrain the encoder");
  add_common(pre, common);

  auto add_cell = [&](CLI::App* sub) {
    add_common(sub, common);
    sub->add_option("--policy", policy, "Pruning policy, e.g. random:0.5 or bottom:6");
    sub->add_option("--seed", seed, "Run seed");
  };
  auto* prune = app.add_subcommand("prune", "Write the head mask of one cell");
  add_cell(prune);
  auto* ft = app.add_subcommand("finetune", "Fine-tune one cell on the anchor task");
  add_cell(ft);
  auto* ev = app.add_subcommand("eval", "Zero-shot evaluation of a fine-tuned cell");
  add_cell(ev);
  auto* ent = app.add_subcommand("entropy", "Attention entropy before and after one epoch");
  add_cell(ent);
  ent->add_option("--language", language, "Dev set language (default: the anchor)");
  auto* emb = app.add_subcommand("export-embeddings", "Sentence embeddings before and after one epoch");
  add_cell(emb);

  auto* rec = app.add_subcommand("recovery", "Print recovery ratios from metrics.csv");
  add_common(rec, common);
  auto* rep = app.add_subcommand("report", "Rebuild summary.json and plotdata/ from metrics.csv");
  add_common(rep, common);

  auto* sweep = app.add_subcommand("sweep", "Fine-tuning learning-rate x batch-size grid");
  add_common(sweep, common);
  sweep->add_option("--workers", workers)->check(CLI::PositiveNumber);
  sweep->add_flag("--dry-run", dry_run, "List the cells without training");

  auto* def = app.add_subcommand("default-config", "Write the default config");
  def->add_option("path", write_path, "Destination (stdout when omitted)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (def->parsed()) {
      const std::string text = config_to_json(ExperimentConfig{});
      if (write_path.empty()) fmt::print("{}", text);
      else save_config(ExperimentConfig{}, write_path);
      return 0;
    }
    if (run->parsed()) {
      const ExperimentConfig config = resolve(common);
      const RunLayout layout = claim(config);
      const bool ok = run_experiment(config, layout, {workers, only, progress});
      fmt::print("{}\n", layout.summary().string());
      return ok ? 0 : 1;
    }
    if (gen->parsed()) {
      const ExperimentConfig config = resolve(common);
      generate_languages(config, claim(config));
      return 0;
    }
    if (pre->parsed()) {
      const ExperimentConfig config = resolve_existing(common);
      pretrain_stage(config, claim(config), progress);
      return 0;
    }
    if (prune->parsed() || ft->parsed() || ev->parsed() || ent->parsed() || emb->parsed()) {
      ExperimentConfig config = resolve_existing(common);
      const RunLayout layout = claim(config);
      const Lab lab = load_lab(config, layout);
      const Cell cell = parse_cell(policy, seed);
      cell.policy.validate(lab.model_config);
      const fs::path dir = layout.cell_dir(cell.id());
      if (prune->parsed()) {
        fs::create_directories(dir);
        std::ofstream(dir / "mask.txt") << cell_mask(config, lab, cell).to_string() << '\n';
        fmt::print("{}\n", (dir / "mask.txt").string());
        return 0;
      }
      const EncoderModel pretrained = load_pretrained(layout);
      if (ft->parsed()) {
        CellOutput out = finetune_cell(config, layout, lab, pretrained, cell, true, false);
        write_cell_records(layout, cell.id(), out.records, "finetune");
        out.model->save((dir / "model.ckpt").string());
        merge_metrics(layout);
        return 0;
      }
      if (ev->parsed()) {
        if (!fs::exists(dir / "model.ckpt"))
          throw MissingInput("missing input: " + (dir / "model.ckpt").string() + " (run `finetune` first)");
        const EncoderModel model = EncoderModel::load((dir / "model.ckpt").string());
        write_cell_records(layout, cell.id(), evaluate_cell(config, lab, model, cell), "eval");
        merge_metrics(layout);
        return 0;
      }
      if (ent->parsed()) {
        if (!language.empty()) config.entropy.language = language;
        const EntropyDelta d = entropy_stage(config, layout, lab, pretrained, cell);
        fmt::print("entropy delta band means: bottom {:.4f}  middle {:.4f}  top {:.4f}\n",
                   d.band_means[0], d.band_means[1], d.band_means[2]);
        return 0;
      }
      embeddings_stage(config, layout, lab, pretrained, cell);
      return 0;
    }
    if (rec->parsed() || rep->parsed()) {
      const ExperimentConfig config = resolve_existing(common);
      const RunLayout layout{config.output_dir};
      if (rep->parsed()) {
        build_report(config, layout);
        fmt::print("{}\n", layout.summary().string());
        return 0;
      }
      if (!fs::exists(layout.metrics()))
        throw MissingInput("missing input: " + layout.metrics().string() + " (run `run` or `eval` first)");
      const ReportData data = aggregate_metrics(config, MetricsSink::read_csv(layout.metrics().string()));
      fmt::print("policy  r_1 per seed  (reference {})\n", ReferenceAnnotations::recovery_after_one_epoch);
      for (const auto& [p, r1] : data.first_epoch_recovery) {
        fmt::print("{:<12}", p);
        for (double r : r1) fmt::print(" {:.3f}", r);
        fmt::print("\n");
      }
      return 0;
    }
    if (sweep->parsed()) {
      const ExperimentConfig config = resolve_existing(common);
      if (dry_run) {
        for (const auto& c : enumerate_sweep(config))
          fmt::print("lr={} batch={}\n", c.learning_rate, c.batch_size);
        return 0;
      }
      const RunLayout layout = claim(config);
      for (const auto& [c, acc] : run_sweep(config, layout, {workers, "", progress}))
        fmt::print("lr={} batch={} dev_accuracy={:.4f}\n", c.learning_rate, c.batch_size, acc);
      return 0;
    }
  } catch (const ConfigValidationError& e) {
    fmt::print(stderr, "{}\n", e.what());
    return 2;
  } catch (const MissingInput& e) {
    fmt::print(stderr, "{}\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
