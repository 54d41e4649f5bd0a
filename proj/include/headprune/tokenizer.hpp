#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "headprune/langlab.hpp"

namespace headprune {

/// Byte-pair style subword model over whitespace-separated words. Words are
/// split into characters with an end-of-word marker on the final one; merges
/// are applied in learned order.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kMask = 4;
  static constexpr std::string_view kEndOfWord = "</w>";

  /// Learns merges until the vocabulary holds `vocab_size` entries or no pair
  /// occurs twice. Ties in pair frequency go to the lexicographically smallest
  /// pair, so training is deterministic. Throws std::invalid_argument when the
  /// texts contain no words or vocab_size cannot hold the base alphabet.
  static Tokenizer train(const std::vector<std::string>& texts, std::size_t vocab_size);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  /// -1 if absent.
  int id(const std::string& token) const;
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

  /// Ids for one word; characters never seen in training map to [UNK].
  std::vector<int> encode_word(std::string_view word) const;
  std::vector<int> encode(std::string_view text) const;
  /// Inverse of encode for in-vocabulary text.
  std::string decode(const std::vector<int>& ids) const;

  /// [CLS] a [SEP] (b [SEP]) with segment ids 0 for the first part and 1 for
  /// the second; truncates each side so the total fits `max_len`.
  std::pair<std::vector<int>, std::vector<int>> encode_pair(std::string_view a, std::string_view b,
                                                            std::size_t max_len) const;

  void save(std::ostream& out) const;
  static Tokenizer load(std::istream& in);
  void save(const std::string& path) const;
  static Tokenizer load(const std::string& path);

  friend bool operator==(const Tokenizer& a, const Tokenizer& b) {
    return a.tokens_ == b.tokens_ && a.merges_ == b.merges_;
  }

 private:
  void index();

  std::vector<std::string> tokens_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::string, int> ids_;
  std::unordered_map<std::uint64_t, int> merge_rank_;  // (left id, right id) -> rank
};

/// Shared vocabulary over every language's pretraining corpus.
/// Throws std::invalid_argument if the corpora hold no sentences.
Tokenizer build_tokenizer(const std::vector<langlab::Corpus>& corpora, std::size_t vocab_size = 2000);

}  // namespace headprune
