#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "headprune/diagnostics.hpp"
#include "headprune/encoder.hpp"
#include "headprune/langlab.hpp"
#include "headprune/pruning.hpp"
#include "headprune/tokenizer.hpp"
#include "headprune/trainer.hpp"

namespace headprune {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kSummarySchemaVersion = 1;

struct PretrainSettings {
  std::size_t corpus_base_size = 20000;  // High-tier sentences per language
  std::size_t steps = 3000;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double warmup_fraction = 0.1;
  friend bool operator==(const PretrainSettings&, const PretrainSettings&) = default;
};

struct FinetuneSettings {
  std::size_t train_size = 900;  // anchor-language labelled pairs
  std::size_t dev_size = 300;    // per language
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 3e-4;
  LrSchedule lr_schedule = LrSchedule::LinearDecay;
  double max_grad_norm = 1.0;
  friend bool operator==(const FinetuneSettings&, const FinetuneSettings&) = default;
};

struct EntropySettings {
  bool enabled = true;
  std::string policy = "random:0.9";
  std::string language;  // empty: the anchor
  std::size_t sentences = 500;
  friend bool operator==(const EntropySettings&, const EntropySettings&) = default;
};

struct EmbeddingSettings {
  bool enabled = true;
  std::string policy = "random:0.9";
  std::size_t per_language = 1000;
  friend bool operator==(const EmbeddingSettings&, const EmbeddingSettings&) = default;
};

struct SweepSettings {
  std::vector<double> learning_rates{2e-5, 3e-5, 4e-5, 5e-5};
  std::vector<std::size_t> batch_sizes{32, 64, 128};
  friend bool operator==(const SweepSettings&, const SweepSettings&) = default;
};

/// Everything a run depends on. Every random choice derives from seed_root.
struct ExperimentConfig {
  std::string experiment_id = "default";
  std::uint64_t seed_root = 20200101;
  std::vector<langlab::LanguageDecl> languages = langlab::default_language_decls();
  std::size_t tokenizer_vocab = 2000;
  ModelConfig model;  // vocab_size is taken from the trained tokenizer
  PretrainSettings pretrain;
  FinetuneSettings finetune;
  std::vector<std::string> policies{"random:0",   "random:0.1", "random:0.2", "random:0.25",
                                    "random:0.3", "random:0.4", "random:0.5", "random:0.6",
                                    "random:0.7", "random:0.75", "random:0.8", "random:0.9",
                                    "top:6",      "bottom:6",   "middle:6",   "odd:6",
                                    "even:6"};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  EntropySettings entropy;
  EmbeddingSettings embeddings;
  SweepSettings sweep;
  std::string output_dir = "runs/default";

  /// Every violation, one message each; empty when valid.
  std::vector<std::string> violations() const;
  /// Throws ConfigValidationError listing every violation.
  void validate() const;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

class ConfigValidationError : public std::invalid_argument {
 public:
  explicit ConfigValidationError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

/// JSON text, keys in a fixed order. Parsing rejects unknown keys, wrong
/// types and a schema version other than kConfigSchemaVersion, collecting
/// every problem into one ConfigValidationError. Missing keys keep their
/// defaults.
std::string config_to_json(const ExperimentConfig& config);
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& config, const std::filesystem::path& path);

/// A (policy, seed) cell; its id is "<policy>@s<seed>".
struct Cell {
  PruningPolicy policy;
  std::uint64_t seed = 0;
  std::string id() const;
};
std::vector<Cell> enumerate_cells(const ExperimentConfig& config);
/// Glob match (fnmatch syntax) against the cell id; an empty filter matches.
bool cell_matches(const Cell& cell, const std::string& filter);

/// Derived seeds; all distinct streams of the seed root.
struct SeedPlan {
  std::uint64_t root = 0;
  std::uint64_t suite = 0, corpus = 0, nli = 0, model_init = 0, pretrain = 0;
  std::uint64_t mask(std::uint64_t run_seed) const;
  std::uint64_t classifier(std::uint64_t run_seed) const;
  std::uint64_t finetune(std::uint64_t run_seed) const;
  static SeedPlan from_root(std::uint64_t root);
};

/// Names of the files a run directory contains.
struct RunLayout {
  std::filesystem::path root;
  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path suite() const { return root / "langs" / "suite.json"; }
  std::filesystem::path corpus(const std::string& lang, langlab::Split split) const;
  std::filesystem::path tokenizer() const { return root / "model" / "tokenizer.txt"; }
  std::filesystem::path pretrained() const { return root / "model" / "pretrained.ckpt"; }
  std::filesystem::path pretrain_loss() const { return root / "model" / "pretrain_loss.csv"; }
  std::filesystem::path cell_dir(const std::string& cell_id) const;
  std::filesystem::path metrics() const { return root / "metrics.csv"; }
  std::filesystem::path summary() const { return root / "summary.json"; }
  std::filesystem::path plotdata() const { return root / "plotdata"; }
  std::filesystem::path entropy() const { return root / "entropy"; }
  std::filesystem::path embeddings() const { return root / "embeddings"; }
  std::filesystem::path incomplete_marker() const { return root / "INCOMPLETE"; }
};

/// Thrown when a stage's input file is absent; the message names it.
class MissingInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loaded, tokenized lab state shared read-only by all cells.
struct Lab {
  std::vector<langlab::ToyLanguageSpec> suite;
  Tokenizer tokenizer;
  ModelConfig model_config;  // with the tokenizer's vocab size
  EncodedSet anchor_train;
  std::vector<EncodedSet> dev;  // one per language, suite order
  const langlab::ToyLanguageSpec& anchor() const;
  const EncodedSet& dev_for(const std::string& language_id) const;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Stage 1: language suite and all corpora.
void generate_languages(const ExperimentConfig& config, const RunLayout& layout);
/// Stage 2: tokenizer and MLM pretraining. Needs stage 1 outputs.
void pretrain_stage(const ExperimentConfig& config, const RunLayout& layout,
                    const ProgressFn& progress = {});
/// Reads stage 1 and 2 outputs.
Lab load_lab(const ExperimentConfig& config, const RunLayout& layout);
EncoderModel load_pretrained(const RunLayout& layout);

/// Mask written by `prune`: the HeadMask text form.
HeadMask cell_mask(const ExperimentConfig& config, const Lab& lab, const Cell& cell);

struct CellOutput {
  std::vector<MetricsRecord> records;
  std::optional<EncoderModel> model;  // kept when requested
};

/// Fine-tunes the pretrained model under the cell's mask on the anchor
/// task. Records: task "nli" anchor dev per epoch. When `diagnostics` is
/// set, the entropy and embedding outputs configured for this cell are
/// written as well.
CellOutput finetune_cell(const ExperimentConfig& config, const RunLayout& layout, const Lab& lab,
                         const EncoderModel& pretrained, const Cell& cell, bool keep_model,
                         bool diagnostics);
/// Zero-shot evaluation of a fine-tuned cell model: task "xnli" per language.
std::vector<MetricsRecord> evaluate_cell(const ExperimentConfig& config, const Lab& lab,
                                         const EncoderModel& finetuned, const Cell& cell);

/// Writes a cell's records through a staging file renamed into place.
void write_cell_records(const RunLayout& layout, const std::string& cell_id,
                        const std::vector<MetricsRecord>& records, const std::string& name);
/// Concatenates every cell's record files into metrics.csv (sorted).
void merge_metrics(const RunLayout& layout);

/// Entropy before and after one epoch of fine-tuning for `cell`; writes
/// entropy/<cell>_{before,after,delta}.csv and returns the delta.
EntropyDelta entropy_stage(const ExperimentConfig& config, const RunLayout& layout, const Lab& lab,
                           const EncoderModel& pretrained, const Cell& cell);
/// Embeddings before fine-tuning and after one epoch.
void embeddings_stage(const ExperimentConfig& config, const RunLayout& layout, const Lab& lab,
                      const EncoderModel& pretrained, const Cell& cell);

struct RunOptions {
  std::size_t workers = 1;
  std::string only;  // cell filter
  ProgressFn progress;
};

/// Full pipeline. Returns true when every selected cell completed; the
/// INCOMPLETE marker stays in place otherwise.
bool run_experiment(const ExperimentConfig& config, const RunLayout& layout,
                    const RunOptions& options);

/// Aggregates of a finished (or partial) run. Accuracies are final-epoch
/// zero-shot ("xnli") results; drops compare seed-averaged accuracies of a
/// policy with those of the identity policy over the seeds both completed.
struct ReportData {
  std::string anchor;
  std::string base_policy;  // empty when the grid has no identity policy
  std::vector<std::string> missing_cells;
  std::map<std::string, std::map<std::string, RepeatSummary>> accuracy;  // policy -> language
  DropTable drops;  // groups: languages, "targets_mean", "family:<F>", "tier:<T>"
  std::map<std::size_t, std::map<std::string, double>> d_by_language;  // layer count -> language
  std::map<std::size_t, GroupMeans> d_groups;                          // over target languages
  std::map<std::string, std::vector<double>> first_epoch_recovery;     // policy -> r_1 per seed
  std::vector<std::string> warnings;
};

/// Pure: depends only on the config and the records.
ReportData aggregate_metrics(const ExperimentConfig& config, const std::vector<MetricsRecord>& records);

/// Reads metrics.csv (and any entropy tables), writes summary.json and
/// plotdata/, and returns the summary text. Performs no training.
std::string build_report(const ExperimentConfig& config, const RunLayout& layout);

struct SweepCell {
  double learning_rate = 0.0;
  std::size_t batch_size = 0;
};
std::vector<SweepCell> enumerate_sweep(const ExperimentConfig& config);
/// Fine-tunes the unpruned model once per cell; writes sweep.csv.
std::vector<std::pair<SweepCell, double>> run_sweep(const ExperimentConfig& config,
                                                    const RunLayout& layout,
                                                    const RunOptions& options);

}  // namespace headprune
