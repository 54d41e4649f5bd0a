#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace headprune::langlab {

enum class WordOrder { SVO, SOV, VSO };
enum class ResourceTier { High, Medium, Low };
enum class Family { SVO, SOV, VSO, Agglutinative };
enum class Label { Entailment = 0, Contradiction = 1, Neutral = 2 };
enum class Split { Pretrain, Train, Dev, Test };

std::string to_string(WordOrder);
std::string to_string(ResourceTier);
std::string to_string(Family);
std::string to_string(Label);
std::string to_string(Split);
WordOrder parse_word_order(const std::string&);
ResourceTier parse_tier(const std::string&);
Split parse_split(const std::string&);

// ---------------------------------------------------------------------------
// Concept inventory, shared by every language.

using ConceptId = int;

enum class ConceptKind { Function, Hypernym, Noun, Predicate, Modifier };

/// Fixed inventory: three function concepts (negation and two role markers),
/// noun categories with hyponyms, antonym predicate pairs, and modifiers.
class ConceptInventory {
 public:
  static const ConceptInventory& standard();

  std::size_t size() const { return kinds_.size(); }
  ConceptKind kind(ConceptId c) const { return kinds_.at(static_cast<std::size_t>(c)); }

  ConceptId negation() const { return 0; }
  ConceptId agent_marker() const { return 1; }
  ConceptId patient_marker() const { return 2; }

  const std::vector<ConceptId>& nouns() const { return nouns_; }  // hyponyms only
  const std::vector<ConceptId>& hypernyms() const { return hypernyms_; }
  const std::vector<ConceptId>& predicates() const { return predicates_; }
  const std::vector<ConceptId>& modifiers() const { return modifiers_; }

  /// Category of a hyponym noun; a hypernym is its own category.
  ConceptId hypernym_of(ConceptId noun) const;
  /// True if `general` equals `specific` or is its hypernym.
  bool subsumes(ConceptId general, ConceptId specific) const;
  /// Antonym predicate (complementary within the toy semantics).
  ConceptId antonym(ConceptId predicate) const;
  /// Second member of an antonym pair denotes the negated relation.
  bool is_negative_predicate(ConceptId predicate) const;
  int predicate_pair(ConceptId predicate) const;

 private:
  ConceptInventory();
  std::vector<ConceptKind> kinds_;
  std::vector<ConceptId> nouns_, hypernyms_, predicates_, modifiers_;
  std::vector<ConceptId> category_;  // per concept, -1 if not a noun
};

// ---------------------------------------------------------------------------
// Languages

struct LanguageDecl {
  std::string id;
  WordOrder word_order = WordOrder::SVO;
  bool agglutinative = false;
  ResourceTier tier = ResourceTier::High;
  double anchor_rate = 0.1;
  bool anchor = false;
  friend bool operator==(const LanguageDecl&, const LanguageDecl&) = default;
};

struct ToyLanguageSpec {
  std::string language_id;
  WordOrder word_order = WordOrder::SVO;
  bool agglutinative = false;
  ResourceTier tier = ResourceTier::High;
  double lexical_anchor_rate = 0.1;
  bool is_anchor = false;
  /// Surface stem per concept id; bijective over the inventory.
  std::vector<std::string> lexicon;
  /// Concepts whose stem was copied from the anchor language.
  std::vector<ConceptId> shared_with_anchor;

  Family family() const;
  /// FNV-1a digest of every field, as hex.
  std::string digest() const;
};

/// The eleven-language default: an SVO high-resource anchor ("en") plus ten
/// evaluation targets spanning the four families and three tiers.
std::vector<LanguageDecl> default_language_decls();

/// Builds lexicons deterministically from `seed`. Requires exactly one
/// declaration flagged as anchor, and it must be SVO, non-agglutinative and
/// High tier. Throws std::invalid_argument otherwise.
std::vector<ToyLanguageSpec> build_language_suite(const std::vector<LanguageDecl>& decls,
                                                  std::uint64_t seed);

const ToyLanguageSpec& anchor_of(const std::vector<ToyLanguageSpec>& suite);

// ---------------------------------------------------------------------------
// Logical forms and rendering

struct LogicalForm {
  ConceptId agent = -1;
  ConceptId predicate = -1;
  ConceptId patient = -1;
  bool negated = false;
  std::optional<ConceptId> modifier;  // attaches to the patient

  friend bool operator==(const LogicalForm&, const LogicalForm&) = default;
};

enum class Role { Subject, Verb, Object };

struct Constituent {
  Role role;
  std::size_t begin;  // word index, inclusive
  std::size_t end;    // exclusive
};

struct Rendering {
  std::vector<std::string> words;
  std::vector<Constituent> constituents;  // in surface order

  std::string text() const;
};

/// Renders one clause. Isolating languages emit separate role-marker and
/// negation words; agglutinative languages fuse them onto the noun/verb stem.
/// Throws std::out_of_range for concepts outside the inventory.
Rendering render(const LogicalForm& form, const ToyLanguageSpec& spec);

/// Language-independent entailment relation between two forms.
Label relation(const LogicalForm& premise, const LogicalForm& hypothesis);

struct NliPair {
  LogicalForm premise;
  LogicalForm hypothesis;
  Label label;
};

/// Logical pair number `index` of `split`: depends only on (seed, split,
/// index), so every language renders the same pair with the same label.
/// Labels cycle through the three classes; premises are bucketed by a hash so
/// train/dev/test never share a premise.
NliPair logical_pair(std::uint64_t seed, Split split, std::size_t index);

/// Split bucket of a premise: the split it may appear in.
Split premise_split(const LogicalForm& premise);

LogicalForm random_form(std::uint64_t seed, std::size_t index);

// ---------------------------------------------------------------------------
// Corpora

struct CorpusItem {
  std::string first;
  std::string second;  // empty for single-sentence items
  std::optional<Label> label;
};

struct Corpus {
  std::string language_id;
  Split split = Split::Pretrain;
  std::uint64_t seed = 0;
  std::string spec_digest;
  std::vector<CorpusItem> items;
};

/// `count` labelled pairs rendered in `spec`. Throws std::invalid_argument if
/// count < 3.
Corpus generate_nli(std::size_t count, const ToyLanguageSpec& spec, std::uint64_t seed,
                    Split split = Split::Train);

/// Pretraining sentences for a language: base_size, base_size/4 or
/// base_size/16 sentences for High, Medium and Low tiers.
Corpus generate_pretrain(const ToyLanguageSpec& spec, std::uint64_t seed,
                         std::size_t base_size = 20000);

std::size_t tier_corpus_size(ResourceTier tier, std::size_t base_size);

/// Tab-separated corpus file with a '#' header line carrying language_id,
/// split, seed and spec digest.
void write_corpus(const Corpus& corpus, const std::string& path);
Corpus read_corpus(const std::string& path);

}  // namespace headprune::langlab
