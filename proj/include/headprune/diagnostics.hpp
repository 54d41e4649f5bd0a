#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "headprune/encoder.hpp"
#include "headprune/langlab.hpp"
#include "headprune/trainer.hpp"

namespace headprune {

/// 100 * (base - pruned) / base. Throws std::domain_error when base <= 0,
/// where the drop is undefined.
double relative_drop(double acc_base, double acc_pruned);

/// A relative drop measured after pruning `n_layers` whole layers.
struct LayerDrop {
  std::size_t n_layers = 0;
  double drop = 0.0;
};

/// bottom.drop - top.drop; positive means the bottom layers matter more.
/// Throws std::invalid_argument unless both prune the same number of layers.
double d_metric(const LayerDrop& bottom, const LayerDrop& top);

enum class Band { Bottom = 0, Middle = 1, Top = 2 };
std::string to_string(Band);

/// Equal thirds of the stack by 0-based layer index; with 12 layers that is
/// 0-3 / 4-7 / 8-11. Throws std::invalid_argument unless n_layers is a
/// positive multiple of 3.
Band band_of_layer(std::size_t layer, std::size_t n_layers);

struct HeadEntropy {
  std::size_t layer = 0;  // 0-based
  std::size_t head = 0;
  double entropy = 0.0;   // nats
};

/// Mean attention entropy of every alive head. Pruned heads have no entry.
struct EntropyReport {
  HeadMask mask;
  std::size_t sentences = 0;
  std::vector<HeadEntropy> heads;         // (layer, head) order
  std::vector<double> layer_means;        // NaN for a fully pruned layer
  std::array<double, 3> band_means{};     // NaN for a fully pruned band

  const HeadEntropy* find(std::size_t layer, std::size_t head) const;
};

/// Accumulates per-sentence entropies from captured attention. For each
/// sentence and alive head, the entropy of every valid query row (over valid
/// key positions only) is averaged over the sentence's tokens; the report
/// then averages those sentence means.
class EntropyAccumulator {
 public:
  explicit EntropyAccumulator(HeadMask mask);

  /// `capture` holds [batch x heads x seq x seq] probabilities per layer.
  void add(const AttentionCapture& capture, const Batch& batch);
  /// Throws std::invalid_argument if no sentence was added.
  EntropyReport report() const;

 private:
  HeadMask mask_;
  std::size_t sentences_ = 0;
  std::vector<double> sums_;  // per (layer, head), sum of sentence means
};

/// Runs the model over the first `max_sentences` items of `set`. Throws
/// std::invalid_argument on an empty set or a zero limit.
EntropyReport attention_entropy(const EncoderModel& model, const HeadMask& mask,
                                const EncodedSet& set, std::size_t max_sentences = 500,
                                std::size_t batch_size = 64);

struct EntropyDelta {
  std::vector<HeadEntropy> heads;  // after - before, alive heads only
  std::array<double, 3> band_means{};
};

/// Throws std::invalid_argument unless both reports share the same mask.
EntropyDelta entropy_delta(const EntropyReport& before, const EntropyReport& after);

struct EmbeddingRow {
  std::string language_id;
  std::string stage;
  std::vector<double> vector;
};

/// First-token final hidden state (pre-pooler) of up to `per_language`
/// items from each set, in set then item order.
std::vector<EmbeddingRow> export_embeddings(const EncoderModel& model, const HeadMask& mask,
                                            const std::vector<EncodedSet>& sets,
                                            const std::string& stage,
                                            std::size_t per_language = 1000,
                                            std::size_t batch_size = 64);

/// TSV: a header "language_id stage v0 .. v{d-1}" then one row per vector,
/// doubles in shortest round-trip form.
void write_embeddings(const std::string& path, const std::vector<EmbeddingRow>& rows);
std::vector<EmbeddingRow> read_embeddings(const std::string& path);

struct DropRow {
  std::string policy;
  std::string group;  // language id, task or aggregate name
  double base = 0.0;
  double pruned = 0.0;
  double drop = 0.0;  // relative_drop(base, pruned)
};

class DropTable {
 public:
  /// Computes the drop; throws std::domain_error on zero base accuracy.
  const DropRow& add(const std::string& policy, const std::string& group, double base,
                     double pruned);
  /// Stores a row as given, for aggregates such as a mean of drops.
  const DropRow& add_row(DropRow row);
  const std::vector<DropRow>& rows() const { return rows_; }
  /// Throws std::out_of_range if absent.
  const DropRow& at(const std::string& policy, const std::string& group) const;
  void write_csv(const std::string& path) const;

 private:
  std::vector<DropRow> rows_;
};

/// Mean of `values` per language family and per resource tier; languages
/// missing from `values` are skipped. Keys are the to_string forms.
struct GroupMeans {
  std::map<std::string, double> by_family;
  std::map<std::string, double> by_tier;
};
GroupMeans group_means(const std::map<std::string, double>& values,
                       const std::vector<langlab::ToyLanguageSpec>& suite);

/// Published full-scale mBERT figures, kept for side-by-side display in
/// reports. None of them is expected to hold at toy scale.
struct ReferenceAnnotations {
  static constexpr double glue_drop_random_50 = 2.0;
  static constexpr double xnli_drop_random_50 = 5.0;
  static constexpr double xnli_drop_random_90_lo = 10.0;
  static constexpr double xnli_drop_random_90_hi = 15.0;
  static constexpr double entropy_delta_top = 0.176;
  static constexpr double entropy_delta_bottom = 0.047;
  static constexpr double entropy_delta_middle = 0.042;
  static constexpr double recovery_after_one_epoch = 0.93;
  static constexpr const char* family_order = "SVO < SOV < VSO < Agglutinative";
  static constexpr const char* tier_order = "High < Medium < Low";
};

}  // namespace headprune
