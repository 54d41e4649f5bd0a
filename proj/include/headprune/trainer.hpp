#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "headprune/encoder.hpp"
#include "headprune/langlab.hpp"
#include "headprune/rng.hpp"
#include "headprune/tokenizer.hpp"

namespace headprune {

enum class Phase { Pretrain, Finetune };
enum class LrSchedule { Constant, LinearDecay };

std::string to_string(Phase);
std::string to_string(LrSchedule);
LrSchedule parse_lr_schedule(const std::string&);

struct TrainSchedule {
  Phase phase = Phase::Finetune;
  std::size_t steps = 0;    // pretraining budget
  std::size_t epochs = 10;  // fine-tuning budget
  std::size_t batch_size = 32;
  double learning_rate = 3e-4;
  std::uint64_t seed = 0;
  bool eval_every_epoch = true;
  std::size_t warmup_steps = 0;
  LrSchedule lr_schedule = LrSchedule::Constant;
  double max_grad_norm = 1.0;  // 0 disables clipping

  static TrainSchedule pretrain(std::size_t steps, std::uint64_t seed);
  static TrainSchedule finetune(std::size_t epochs, std::uint64_t seed);

  /// Throws std::invalid_argument on nonpositive batch size or learning rate.
  void validate() const;
  /// Compact, stable text form copied into every MetricsRecord.
  std::string describe() const;
  double learning_rate_at(std::size_t step, std::size_t total_steps) const;
};

/// Tokenized item; label is -1 for unlabelled text.
struct Example {
  std::vector<int> tokens;
  std::vector<int> segments;
  int label = -1;
};

struct EncodedSet {
  std::string language_id;
  langlab::Split split = langlab::Split::Train;
  std::vector<Example> items;
};

/// Sentence pairs become [CLS] a [SEP] b [SEP]. Pretraining corpora pair
/// consecutive sentences (2i, 2i+1) the same way; a trailing odd sentence
/// stands alone.
EncodedSet encode_corpus(const langlab::Corpus& corpus, const Tokenizer& tokenizer,
                         std::size_t max_len);

struct MetricsRecord {
  std::string experiment_id;
  std::string task;
  std::string language_id;
  std::string policy;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::string split;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;
  double loss = 0.0;
  std::string schedule;
};

/// Thread-safe, append-only. CSV output is sorted by record key, so the file
/// is independent of the order in which concurrent runs append.
class MetricsSink {
 public:
  void append(const MetricsRecord& record);
  void append(std::span<const MetricsRecord> records);
  std::vector<MetricsRecord> records() const;
  std::vector<MetricsRecord> sorted_records() const;
  void write_csv(const std::string& path) const;

  static const std::vector<std::string>& columns();
  static std::string csv_row(const MetricsRecord& r);
  static std::vector<MetricsRecord> read_csv(const std::string& path);

 private:
  mutable std::mutex mutex_;
  std::vector<MetricsRecord> records_;
};

// ---------------------------------------------------------------------------

struct MlmExample {
  std::vector<int> tokens;                // after corruption
  std::vector<std::size_t> positions;     // selected positions
  std::vector<int> targets;               // original ids at those positions
};

/// BERT masking: 15% of the non-special positions (at least one) are
/// selected; 80% become [MASK], 10% a random non-special token, 10% stay.
MlmExample mask_for_mlm(const Example& ex, std::size_t vocab_size, Rng& rng);

struct PretrainResult {
  std::vector<double> losses;  // one per step
};

/// Samples sequences uniformly from the union of `corpora`, so each
/// language contributes in proportion to its corpus size. Throws
/// std::invalid_argument if the tokenizer lacks [MASK] or the corpora are
/// empty.
PretrainResult pretrain_mlm(EncoderModel& model, const std::vector<EncodedSet>& corpora,
                            const Tokenizer& tokenizer, const TrainSchedule& schedule);

struct EvalResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Pure: never mutates the model. Throws std::invalid_argument on an empty
/// set or labels outside [0, n_classes).
EvalResult evaluate(const EncoderModel& model, const HeadMask& mask, const EncodedSet& set,
                    std::size_t batch_size = 64);

/// One result per language, keyed by language id. Throws
/// std::invalid_argument if a language appears twice.
std::map<std::string, EvalResult> evaluate_crosslingual(const EncoderModel& model,
                                                        const HeadMask& mask,
                                                        const std::vector<EncodedSet>& sets,
                                                        std::size_t batch_size = 64);

/// Accuracy of predicting `label` for every item.
EvalResult evaluate_constant(const EncodedSet& set, int label);

struct RunInfo {
  std::string experiment_id;
  std::string policy;
  std::uint64_t seed = 0;
};

struct FinetuneResult {
  std::vector<MetricsRecord> records;  // dev evaluation after each epoch
  std::vector<double> epoch_train_loss;
};

/// Fine-tunes encoder and classifier on `train` with `mask` fixed. Masked
/// heads get exactly zero gradient and fresh optimizer state, so their
/// parameters stay bitwise unchanged. With zero epochs the single record is
/// the evaluation of the input model at epoch 0. Throws
/// std::invalid_argument on an empty training set.
/// `on_epoch`, if set, sees the model after each completed epoch; returning
/// false ends training there, with the learning-rate schedule unchanged.
using EpochHook = std::function<bool(std::size_t epoch, const EncoderModel& model)>;
FinetuneResult finetune(EncoderModel& model, const HeadMask& mask, const EncodedSet& train,
                        const EncodedSet& dev, const TrainSchedule& schedule, const RunInfo& info,
                        const EpochHook& on_epoch = {});

/// acc(epoch e) / acc(final epoch) for each record, in epoch order. Throws
/// std::domain_error if no records or the final accuracy is zero.
std::vector<double> recovery_curve(std::span<const double> accuracies);
std::vector<double> recovery_curve(std::span<const MetricsRecord> records);

struct RepeatSummary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single run
  std::size_t n_runs = 0;
  std::vector<double> finals;
};

/// Throws std::invalid_argument on an empty list.
RepeatSummary summarize_finals(std::span<const double> finals);

/// Runs `run` once per seed; each call returns its final accuracy and the
/// records it produced.
struct RepeatOutput {
  double final_accuracy = 0.0;
  std::vector<MetricsRecord> records;
};
RepeatSummary run_repeats(const std::function<RepeatOutput(std::uint64_t)>& run,
                          std::span<const std::uint64_t> seeds,
                          std::vector<MetricsRecord>* records = nullptr);

}  // namespace headprune
