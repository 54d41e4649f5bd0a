#include "headprune/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace headprune {

namespace {

constexpr std::uint64_t pair_key(int a, int b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\n')) ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ' && text[j] != '\t' && text[j] != '\n') ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::vector<std::string> characters(std::string_view word) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < word.size(); ++i) out.emplace_back(1, word[i]);
  out.back() += Tokenizer::kEndOfWord;
  return out;
}

}  // namespace

void Tokenizer::index() {
  ids_.clear();
  merge_rank_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw std::invalid_argument("duplicate vocabulary entry '" + tokens_[i] + "'");
  }
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const int a = id(merges_[r].first), b = id(merges_[r].second);
    if (a < 0 || b < 0 || id(merges_[r].first + merges_[r].second) < 0)
      throw std::invalid_argument("merge " + merges_[r].first + " " + merges_[r].second +
                                  " refers to unknown tokens");
    merge_rank_.emplace(pair_key(a, b), static_cast<int>(r));
  }
}

int Tokenizer::id(const std::string& token) const {
  const auto it = ids_.find(token);
  return it == ids_.end() ? -1 : it->second;
}

Tokenizer Tokenizer::train(const std::vector<std::string>& texts, std::size_t vocab_size) {
  std::map<std::string, long> word_counts;
  for (const auto& t : texts)
    for (auto w : split_words(t)) ++word_counts[std::string(w)];
  if (word_counts.empty()) throw std::invalid_argument("tokenizer training text is empty");

  Tokenizer tok;
  tok.tokens_ = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  std::vector<std::string> alphabet;
  for (const auto& [w, n] : word_counts)
    for (auto& c : characters(w)) alphabet.push_back(c);
  std::sort(alphabet.begin(), alphabet.end());
  alphabet.erase(std::unique(alphabet.begin(), alphabet.end()), alphabet.end());
  if (vocab_size < tok.tokens_.size() + alphabet.size())
    throw std::invalid_argument("vocab_size " + std::to_string(vocab_size) +
                                " cannot hold the " + std::to_string(alphabet.size()) +
                                "-symbol alphabet");
  tok.tokens_.insert(tok.tokens_.end(), alphabet.begin(), alphabet.end());
  tok.index();

  struct Word {
    std::vector<int> symbols;
    long count;
  };
  std::vector<Word> words;
  for (const auto& [w, n] : word_counts) {
    Word wd{{}, n};
    for (auto& c : characters(w)) wd.symbols.push_back(tok.id(c));
    words.push_back(std::move(wd));
  }

  std::unordered_map<std::uint64_t, long> counts;
  while (tok.tokens_.size() < vocab_size) {
    counts.clear();
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i)
        counts[pair_key(w.symbols[i], w.symbols[i + 1])] += w.count;
    long best_count = 1;
    std::uint64_t best = 0;
    bool found = false;
    for (const auto& [key, n] : counts) {
      if (n < best_count) continue;
      const auto a = static_cast<int>(key >> 32), b = static_cast<int>(key & 0xffffffffu);
      if (n == best_count && found) {
        const auto ba = static_cast<int>(best >> 32), bb = static_cast<int>(best & 0xffffffffu);
        if (std::tie(tok.tokens_[a], tok.tokens_[b]) >= std::tie(tok.tokens_[ba], tok.tokens_[bb]))
          continue;
      }
      if (n == 1) continue;
      best_count = n;
      best = key;
      found = true;
    }
    if (!found) break;
    const auto a = static_cast<int>(best >> 32), b = static_cast<int>(best & 0xffffffffu);
    const std::string merged = tok.tokens_[a] + tok.tokens_[b];
    int m = tok.id(merged);
    if (m < 0) {
      m = static_cast<int>(tok.tokens_.size());
      tok.tokens_.push_back(merged);
      tok.ids_.emplace(merged, m);
    }
    tok.merges_.emplace_back(tok.tokens_[a], tok.tokens_[b]);
    tok.merge_rank_.emplace(best, static_cast<int>(tok.merges_.size() - 1));
    for (auto& w : words) {
      auto& s = w.symbols;
      std::size_t out = 0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (i + 1 < s.size() && s[i] == a && s[i + 1] == b) {
          s[out++] = m;
          ++i;
        } else {
          s[out++] = s[i];
        }
      }
      s.resize(out);
    }
  }
  return tok;
}

std::vector<int> Tokenizer::encode_word(std::string_view word) const {
  std::vector<int> s;
  if (word.empty()) return s;
  for (auto& c : characters(word)) {
    const int i = id(c);
    s.push_back(i < 0 ? kUnk : i);
  }
  while (s.size() > 1) {
    int best_rank = std::numeric_limits<int>::max();
    std::size_t best_at = 0;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      const auto it = merge_rank_.find(pair_key(s[i], s[i + 1]));
      if (it != merge_rank_.end() && it->second < best_rank) {
        best_rank = it->second;
        best_at = i;
      }
    }
    if (best_rank == std::numeric_limits<int>::max()) break;
    const auto& [l, r] = merges_[static_cast<std::size_t>(best_rank)];
    s[best_at] = id(l + r);
    s.erase(s.begin() + static_cast<long>(best_at) + 1);
  }
  return s;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> out;
  for (auto w : split_words(text)) {
    auto ids = encode_word(w);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int i : ids) {
    std::string t = token(i);
    const bool end = t.size() >= kEndOfWord.size() &&
                     t.compare(t.size() - kEndOfWord.size(), kEndOfWord.size(), kEndOfWord) == 0;
    if (end) t.resize(t.size() - kEndOfWord.size());
    out += t;
    if (end) out += ' ';
  }
  if (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

std::pair<std::vector<int>, std::vector<int>> Tokenizer::encode_pair(std::string_view a,
                                                                     std::string_view b,
                                                                     std::size_t max_len) const {
  auto ta = encode(a), tb = encode(b);
  const std::size_t specials = tb.empty() && b.empty() ? 2 : 3;
  if (max_len <= specials) throw std::invalid_argument("max_len too small for special tokens");
  // Trim the longer side first, one token at a time.
  while (ta.size() + tb.size() + specials > max_len) {
    if (ta.size() >= tb.size()) ta.pop_back();
    else tb.pop_back();
  }
  std::vector<int> ids{kCls}, seg{0};
  ids.insert(ids.end(), ta.begin(), ta.end());
  ids.push_back(kSep);
  seg.resize(ids.size(), 0);
  if (specials == 3) {
    ids.insert(ids.end(), tb.begin(), tb.end());
    ids.push_back(kSep);
    seg.resize(ids.size(), 1);
  }
  return {ids, seg};
}

void Tokenizer::save(std::ostream& out) const {
  out << "headprune-bpe 1\nvocab " << tokens_.size() << '\n';
  for (const auto& t : tokens_) out << t << '\n';
  out << "merges " << merges_.size() << '\n';
  for (const auto& [a, b] : merges_) out << a << ' ' << b << '\n';
}

Tokenizer Tokenizer::load(std::istream& in) {
  std::string magic, word;
  int version = 0;
  std::size_t n = 0;
  if (!(in >> magic >> version) || magic != "headprune-bpe" || version != 1)
    throw std::runtime_error("not a tokenizer file");
  if (!(in >> word >> n) || word != "vocab") throw std::runtime_error("tokenizer: missing vocab");
  Tokenizer tok;
  tok.tokens_.resize(n);
  for (auto& t : tok.tokens_)
    if (!(in >> t)) throw std::runtime_error("tokenizer: truncated vocabulary");
  if (!(in >> word >> n) || word != "merges") throw std::runtime_error("tokenizer: missing merges");
  tok.merges_.resize(n);
  for (auto& [a, b] : tok.merges_)
    if (!(in >> a >> b)) throw std::runtime_error("tokenizer: truncated merges");
  tok.index();
  return tok;
}

void Tokenizer::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  save(out);
}

Tokenizer Tokenizer::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return load(in);
}

Tokenizer build_tokenizer(const std::vector<langlab::Corpus>& corpora, std::size_t vocab_size) {
  std::vector<std::string> texts;
  for (const auto& c : corpora)
    for (const auto& item : c.items) {
      texts.push_back(item.first);
      if (!item.second.empty()) texts.push_back(item.second);
    }
  if (texts.empty()) throw std::invalid_argument("build_tokenizer: corpora are empty");
  return Tokenizer::train(texts, vocab_size);
}

}  // namespace headprune
