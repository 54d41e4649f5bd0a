#include "headprune/langlab.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "headprune/rng.hpp"

namespace headprune::langlab {

namespace {

constexpr int kCategories = 8;
constexpr int kHyponymsPerCategory = 5;
constexpr int kPredicatePairs = 10;
constexpr int kModifiers = 12;

constexpr ConceptId kFirstHypernym = 3;
constexpr ConceptId kFirstNoun = kFirstHypernym + kCategories;
constexpr ConceptId kFirstPredicate = kFirstNoun + kCategories * kHyponymsPerCategory;
constexpr ConceptId kFirstModifier = kFirstPredicate + 2 * kPredicatePairs;
constexpr ConceptId kConceptCount = kFirstModifier + kModifiers;

// Selectional preferences shared by all languages. They give the pretraining
// text a distributional structure that is isomorphic across languages.
int preferred_patient_category(int pair) { return pair % kCategories; }
int preferred_agent_category(int pair) { return (3 * pair + 1) % kCategories; }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(WordOrder w) {
  switch (w) {
    case WordOrder::SVO: return "SVO";
    case WordOrder::SOV: return "SOV";
    case WordOrder::VSO: return "VSO";
  }
  return "?";
}

std::string to_string(ResourceTier t) {
  switch (t) {
    case ResourceTier::High: return "High";
    case ResourceTier::Medium: return "Medium";
    case ResourceTier::Low: return "Low";
  }
  return "?";
}

std::string to_string(Family f) {
  switch (f) {
    case Family::SVO: return "SVO";
    case Family::SOV: return "SOV";
    case Family::VSO: return "VSO";
    case Family::Agglutinative: return "Agglutinative";
  }
  return "?";
}

std::string to_string(Label l) {
  switch (l) {
    case Label::Entailment: return "entailment";
    case Label::Contradiction: return "contradiction";
    case Label::Neutral: return "neutral";
  }
  return "?";
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Pretrain: return "pretrain";
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

WordOrder parse_word_order(const std::string& s) {
  if (s == "SVO") return WordOrder::SVO;
  if (s == "SOV") return WordOrder::SOV;
  if (s == "VSO") return WordOrder::VSO;
  throw std::invalid_argument("unknown word order '" + s + "'");
}

ResourceTier parse_tier(const std::string& s) {
  if (s == "High") return ResourceTier::High;
  if (s == "Medium") return ResourceTier::Medium;
  if (s == "Low") return ResourceTier::Low;
  throw std::invalid_argument("unknown resource tier '" + s + "'");
}

Split parse_split(const std::string& s) {
  if (s == "pretrain") return Split::Pretrain;
  if (s == "train") return Split::Train;
  if (s == "dev") return Split::Dev;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + s + "'");
}

static Label parse_label(const std::string& s) {
  if (s == "entailment") return Label::Entailment;
  if (s == "contradiction") return Label::Contradiction;
  if (s == "neutral") return Label::Neutral;
  throw std::invalid_argument("unknown label '" + s + "'");
}

// ---------------------------------------------------------------------------

ConceptInventory::ConceptInventory() {
  kinds_.assign(kConceptCount, ConceptKind::Function);
  category_.assign(kConceptCount, -1);
  for (int c = 0; c < kCategories; ++c) {
    const ConceptId h = kFirstHypernym + c;
    kinds_[h] = ConceptKind::Hypernym;
    category_[h] = h;
    hypernyms_.push_back(h);
    for (int i = 0; i < kHyponymsPerCategory; ++i) {
      const ConceptId n = kFirstNoun + c * kHyponymsPerCategory + i;
      kinds_[n] = ConceptKind::Noun;
      category_[n] = h;
      nouns_.push_back(n);
    }
  }
  for (ConceptId p = kFirstPredicate; p < kFirstModifier; ++p) {
    kinds_[p] = ConceptKind::Predicate;
    predicates_.push_back(p);
  }
  for (ConceptId m = kFirstModifier; m < kConceptCount; ++m) {
    kinds_[m] = ConceptKind::Modifier;
    modifiers_.push_back(m);
  }
}

const ConceptInventory& ConceptInventory::standard() {
  static const ConceptInventory inventory;
  return inventory;
}

ConceptId ConceptInventory::hypernym_of(ConceptId noun) const {
  const ConceptId h = category_.at(static_cast<std::size_t>(noun));
  if (h < 0) throw std::invalid_argument("concept " + std::to_string(noun) + " is not a noun");
  return h;
}

bool ConceptInventory::subsumes(ConceptId general, ConceptId specific) const {
  return general == specific ||
         (kind(general) == ConceptKind::Hypernym && hypernym_of(specific) == general);
}

int ConceptInventory::predicate_pair(ConceptId p) const {
  if (kind(p) != ConceptKind::Predicate)
    throw std::invalid_argument("concept " + std::to_string(p) + " is not a predicate");
  return (p - kFirstPredicate) / 2;
}

ConceptId ConceptInventory::antonym(ConceptId p) const {
  predicate_pair(p);
  return ((p - kFirstPredicate) % 2 == 0) ? p + 1 : p - 1;
}

bool ConceptInventory::is_negative_predicate(ConceptId p) const {
  predicate_pair(p);
  return (p - kFirstPredicate) % 2 == 1;
}

// ---------------------------------------------------------------------------

Family ToyLanguageSpec::family() const {
  if (agglutinative) return Family::Agglutinative;
  switch (word_order) {
    case WordOrder::SVO: return Family::SVO;
    case WordOrder::SOV: return Family::SOV;
    case WordOrder::VSO: return Family::VSO;
  }
  return Family::SVO;
}

std::string ToyLanguageSpec::digest() const {
  std::ostringstream s;
  s << language_id << '|' << to_string(word_order) << '|' << agglutinative << '|'
    << to_string(tier) << '|' << hex64(static_cast<std::uint64_t>(lexical_anchor_rate * 1e9))
    << '|' << is_anchor;
  for (const auto& stem : lexicon) s << '|' << stem;
  s << "|shared";
  for (ConceptId c : shared_with_anchor) s << '|' << c;
  return hex64(hash_tag(s.str()));
}

std::vector<LanguageDecl> default_language_decls() {
  using W = WordOrder;
  using T = ResourceTier;
  return {
      {"en", W::SVO, false, T::High, 0.1, true},
      {"es", W::SVO, false, T::High, 0.1, false},
      {"de", W::SVO, false, T::High, 0.1, false},
      {"vi", W::SVO, false, T::Medium, 0.1, false},
      {"zh", W::SVO, false, T::Medium, 0.1, false},
      {"hi", W::SOV, false, T::Low, 0.1, false},
      {"el", W::SOV, false, T::Low, 0.1, false},
      {"ur", W::SOV, false, T::Low, 0.1, false},
      {"ar", W::VSO, false, T::Medium, 0.1, false},
      {"tr", W::SOV, true, T::Medium, 0.0, false},
      {"sw", W::SVO, true, T::Low, 0.0, false},
  };
}

namespace {

struct Phonology {
  std::string consonants;
  std::string vowels;
};

Phonology random_phonology(Rng& rng) {
  std::string cons = "bcdfghjklmnpqrstvwxyz";
  std::string vows = "aeiou";
  std::vector<char> c(cons.begin(), cons.end()), v(vows.begin(), vows.end());
  rng.shuffle(c);
  rng.shuffle(v);
  Phonology p;
  p.consonants.assign(c.begin(), c.begin() + 9 + static_cast<long>(rng.below(4)));
  p.vowels.assign(v.begin(), v.begin() + 3 + static_cast<long>(rng.below(3)));
  return p;
}

std::string random_stem(Rng& rng, const Phonology& p, int syllables) {
  std::string s;
  for (int i = 0; i < syllables; ++i) {
    s += p.consonants[rng.below(p.consonants.size())];
    s += p.vowels[rng.below(p.vowels.size())];
  }
  if (rng.bernoulli(0.3)) s += p.consonants[rng.below(p.consonants.size())];
  return s;
}

int syllables_for(ConceptKind kind, Rng& rng) {
  if (kind == ConceptKind::Function) return 1;
  return 2 + static_cast<int>(rng.below(2));
}

// Occurrence counts of each concept over a fixed sample of forms, plus one.
const std::vector<double>& concept_weights() {
  static const std::vector<double> weights = [] {
    const auto& inv = ConceptInventory::standard();
    std::vector<double> w(inv.size(), 1.0);
    for (std::size_t i = 0; i < 4000; ++i) {
      const LogicalForm f = random_form(0x5eed, i);
      w[static_cast<std::size_t>(f.agent)] += 1;
      w[static_cast<std::size_t>(f.patient)] += 1;
      w[static_cast<std::size_t>(f.predicate)] += 1;
      w[static_cast<std::size_t>(inv.agent_marker())] += 1;
      w[static_cast<std::size_t>(inv.patient_marker())] += 1;
      if (f.negated) w[static_cast<std::size_t>(inv.negation())] += 1;
      if (f.modifier) w[static_cast<std::size_t>(*f.modifier)] += 1;
    }
    return w;
  }();
  return weights;
}

}  // namespace

std::vector<ToyLanguageSpec> build_language_suite(const std::vector<LanguageDecl>& decls,
                                                  std::uint64_t seed) {
  const auto& inv = ConceptInventory::standard();
  const LanguageDecl* anchor = nullptr;
  std::set<std::string> ids;
  for (const auto& d : decls) {
    if (d.id.empty()) throw std::invalid_argument("language id must be nonempty");
    if (!ids.insert(d.id).second) throw std::invalid_argument("duplicate language id '" + d.id + "'");
    if (d.anchor_rate < 0.0 || d.anchor_rate > 1.0)
      throw std::invalid_argument("anchor rate of '" + d.id + "' outside [0, 1]");
    if (!d.anchor) continue;
    if (anchor) throw std::invalid_argument("more than one anchor language declared");
    anchor = &d;
  }
  if (!anchor) throw std::invalid_argument("no anchor language declared");
  if (anchor->word_order != WordOrder::SVO || anchor->agglutinative ||
      anchor->tier != ResourceTier::High)
    throw std::invalid_argument("anchor language must be SVO, isolating and High tier");

  auto make_lexicon = [&](const LanguageDecl& d, const ToyLanguageSpec* anchor_spec) {
    ToyLanguageSpec spec;
    spec.language_id = d.id;
    spec.word_order = d.word_order;
    spec.agglutinative = d.agglutinative;
    spec.tier = d.tier;
    spec.lexical_anchor_rate = d.anchor_rate;
    spec.is_anchor = d.anchor;
    spec.lexicon.assign(inv.size(), "");

    Rng rng(derive_seed(seed, "language", hash_tag(d.id)));
    const Phonology phon = random_phonology(rng);
    std::set<std::string> used;
    if (anchor_spec) {
      const auto n = inv.size();
      const auto shared = static_cast<std::size_t>(d.anchor_rate * static_cast<double>(n) + 0.5);
      // Weighted sampling without replacement (keys u^(1/w)), weights being
      // concept frequencies: high-frequency items dominate shared surface
      // material, as punctuation and function words do in real corpora.
      const auto& weight = concept_weights();
      std::vector<std::pair<double, ConceptId>> keyed(n);
      for (std::size_t i = 0; i < n; ++i)
        keyed[i] = {std::log(rng.uniform()) / weight[i], static_cast<ConceptId>(i)};
      std::stable_sort(keyed.begin(), keyed.end(),
                       [](const auto& a, const auto& b) { return a.first > b.first; });
      std::vector<ConceptId> order;
      for (std::size_t i = 0; i < shared; ++i) order.push_back(keyed[i].second);
      std::sort(order.begin(), order.end());
      for (ConceptId c : order) {
        spec.lexicon[static_cast<std::size_t>(c)] = anchor_spec->lexicon[static_cast<std::size_t>(c)];
        used.insert(spec.lexicon[static_cast<std::size_t>(c)]);
      }
      spec.shared_with_anchor = order;
    }
    for (std::size_t c = 0; c < inv.size(); ++c) {
      if (!spec.lexicon[c].empty()) continue;
      // Stems never collide with another concept, nor with an anchor stem,
      // so sharing happens only where it was drawn.
      std::string stem;
      int attempts = 0;
      do {
        int syl = syllables_for(inv.kind(static_cast<ConceptId>(c)), rng) + attempts / 50;
        stem = random_stem(rng, phon, syl);
        ++attempts;
      } while (used.count(stem) ||
               (anchor_spec && std::find(anchor_spec->lexicon.begin(), anchor_spec->lexicon.end(),
                                         stem) != anchor_spec->lexicon.end()));
      used.insert(stem);
      spec.lexicon[c] = stem;
    }
    return spec;
  };

  std::vector<ToyLanguageSpec> suite;
  suite.reserve(decls.size());
  const ToyLanguageSpec anchor_spec = make_lexicon(*anchor, nullptr);
  for (const auto& d : decls) suite.push_back(d.anchor ? anchor_spec : make_lexicon(d, &anchor_spec));
  return suite;
}

const ToyLanguageSpec& anchor_of(const std::vector<ToyLanguageSpec>& suite) {
  for (const auto& s : suite)
    if (s.is_anchor) return s;
  throw std::invalid_argument("suite has no anchor language");
}

// ---------------------------------------------------------------------------

std::string Rendering::text() const {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

namespace {

const std::string& stem_of(const ToyLanguageSpec& spec, ConceptId c) {
  if (c < 0 || static_cast<std::size_t>(c) >= spec.lexicon.size())
    throw std::out_of_range("concept " + std::to_string(c) + " not in lexicon of '" +
                            spec.language_id + "'");
  return spec.lexicon[static_cast<std::size_t>(c)];
}

void check_kind(const LogicalForm& f) {
  const auto& inv = ConceptInventory::standard();
  auto in_range = [&](ConceptId c) { return c >= 0 && static_cast<std::size_t>(c) < inv.size(); };
  auto is_noun = [&](ConceptId c) {
    return in_range(c) && (inv.kind(c) == ConceptKind::Noun || inv.kind(c) == ConceptKind::Hypernym);
  };
  if (!is_noun(f.agent) || !is_noun(f.patient))
    throw std::out_of_range("logical form agent/patient must be noun concepts");
  if (!in_range(f.predicate) || inv.kind(f.predicate) != ConceptKind::Predicate)
    throw std::out_of_range("logical form predicate must be a predicate concept");
  if (f.modifier && (!in_range(*f.modifier) || inv.kind(*f.modifier) != ConceptKind::Modifier))
    throw std::out_of_range("logical form modifier must be a modifier concept");
}

}  // namespace

Rendering render(const LogicalForm& form, const ToyLanguageSpec& spec) {
  check_kind(form);
  const auto& inv = ConceptInventory::standard();
  const std::string& neg = stem_of(spec, inv.negation());
  const std::string& agent_mark = stem_of(spec, inv.agent_marker());
  const std::string& patient_mark = stem_of(spec, inv.patient_marker());

  std::vector<std::string> subject, verb, object;
  if (spec.agglutinative) {
    subject = {stem_of(spec, form.agent) + agent_mark};
    verb = {form.negated ? stem_of(spec, form.predicate) + neg : stem_of(spec, form.predicate)};
    if (form.modifier) object.push_back(stem_of(spec, *form.modifier));
    object.push_back(stem_of(spec, form.patient) + patient_mark);
  } else {
    subject = {stem_of(spec, form.agent), agent_mark};
    if (form.negated) verb.push_back(neg);
    verb.push_back(stem_of(spec, form.predicate));
    if (form.modifier) object.push_back(stem_of(spec, *form.modifier));
    object.push_back(stem_of(spec, form.patient));
    object.push_back(patient_mark);
  }

  std::array<Role, 3> order{};
  switch (spec.word_order) {
    case WordOrder::SVO: order = {Role::Subject, Role::Verb, Role::Object}; break;
    case WordOrder::SOV: order = {Role::Subject, Role::Object, Role::Verb}; break;
    case WordOrder::VSO: order = {Role::Verb, Role::Subject, Role::Object}; break;
  }
  Rendering out;
  for (Role r : order) {
    const auto& part = r == Role::Subject ? subject : r == Role::Verb ? verb : object;
    const std::size_t begin = out.words.size();
    out.words.insert(out.words.end(), part.begin(), part.end());
    out.constituents.push_back({r, begin, out.words.size()});
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

bool truth(const LogicalForm& f) {
  return f.negated == ConceptInventory::standard().is_negative_predicate(f.predicate);
}

bool modifier_covers(const std::optional<ConceptId>& general, const std::optional<ConceptId>& specific) {
  return !general || general == specific;
}

}  // namespace

// Positive claims are existential and license generalization; negative claims
// are universal and license specialization. Antonym predicates are
// complementary, so each form reduces to (frame, truth).
Label relation(const LogicalForm& p, const LogicalForm& h) {
  check_kind(p);
  check_kind(h);
  const auto& inv = ConceptInventory::standard();
  if (inv.predicate_pair(p.predicate) != inv.predicate_pair(h.predicate)) return Label::Neutral;
  const bool tp = truth(p), th = truth(h);
  auto covers = [&](const LogicalForm& general, const LogicalForm& specific) {
    return inv.subsumes(general.agent, specific.agent) &&
           inv.subsumes(general.patient, specific.patient) &&
           modifier_covers(general.modifier, specific.modifier);
  };
  if (tp && th) return covers(h, p) ? Label::Entailment : Label::Neutral;
  if (!tp && !th) return covers(p, h) ? Label::Entailment : Label::Neutral;
  const LogicalForm& pos = tp ? p : h;
  const LogicalForm& neg = tp ? h : p;
  return covers(neg, pos) ? Label::Contradiction : Label::Neutral;
}

namespace {

ConceptId category_index(ConceptId noun) {
  return ConceptInventory::standard().hypernym_of(noun) - kFirstHypernym;
}

std::size_t pick_weighted(Rng& rng, const std::vector<double>& cumulative) {
  const double u = rng.uniform() * cumulative.back();
  return static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) -
                                  cumulative.begin());
}

// Concept-level selectional preferences, identical in every language. Each
// predicate ranks the nouns of its preferred categories differently, and each
// noun has its own favourite modifiers, so every concept has a distinct
// co-occurrence profile.
struct World {
  static constexpr int kPredicates = 2 * kPredicatePairs;
  static constexpr int kNouns = kCategories * kHyponymsPerCategory;
  std::vector<double> predicate_cdf;
  std::array<std::vector<double>, kPredicates> agent_cdf, patient_cdf;
  std::array<std::array<ConceptId, 2>, kNouns> modifiers{};

  static const World& standard() {
    static const World w = build();
    return w;
  }

 private:
  static std::vector<double> cumulate(std::vector<double> w) {
    for (std::size_t i = 1; i < w.size(); ++i) w[i] += w[i - 1];
    return w;
  }

  static std::vector<double> noun_weights(Rng& rng, int preferred_category) {
    std::vector<double> w(kNouns);
    for (int c = 0; c < kCategories; ++c) {
      std::vector<int> rank(kHyponymsPerCategory);
      for (int j = 0; j < kHyponymsPerCategory; ++j) rank[j] = j;
      rng.shuffle(rank);
      const double scale = c == preferred_category ? 4.0 * (kCategories - 1) : 1.0;
      for (int j = 0; j < kHyponymsPerCategory; ++j)
        w[c * kHyponymsPerCategory + j] = scale / (1.0 + rank[j]);
    }
    return w;
  }

  static World build() {
    World w;
    Rng rng(0x3a11d);
    std::vector<int> order(kPredicates);
    for (int i = 0; i < kPredicates; ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<double> pw(kPredicates);
    for (int i = 0; i < kPredicates; ++i) pw[order[i]] = 1.0 / std::pow(1.0 + i, 0.7);
    w.predicate_cdf = cumulate(pw);
    for (int p = 0; p < kPredicates; ++p) {
      w.agent_cdf[p] = cumulate(noun_weights(rng, preferred_agent_category(p / 2)));
      w.patient_cdf[p] = cumulate(noun_weights(rng, preferred_patient_category(p / 2)));
    }
    for (int n = 0; n < kNouns; ++n) {
      const ConceptId a = kFirstModifier + static_cast<int>(rng.below(kModifiers));
      ConceptId b;
      do b = kFirstModifier + static_cast<int>(rng.below(kModifiers));
      while (b == a);
      w.modifiers[n] = {a, b};
    }
    return w;
  }
};

ConceptId pick_noun(Rng& rng, const std::vector<double>& cdf, double hypernym_rate) {
  const auto n = static_cast<ConceptId>(pick_weighted(rng, cdf));
  if (rng.bernoulli(hypernym_rate)) return kFirstHypernym + n / kHyponymsPerCategory;
  return kFirstNoun + n;
}

ConceptId pick_modifier(Rng& rng, ConceptId patient) {
  if (rng.bernoulli(0.8)) {
    const auto& inv = ConceptInventory::standard();
    // A hypernym patient borrows the profile of a random member.
    const ConceptId noun = inv.kind(patient) == ConceptKind::Hypernym
                               ? kFirstNoun + (patient - kFirstHypernym) * kHyponymsPerCategory +
                                     static_cast<int>(rng.below(kHyponymsPerCategory))
                               : patient;
    return World::standard().modifiers[noun - kFirstNoun][rng.below(2)];
  }
  return kFirstModifier + static_cast<int>(rng.below(kModifiers));
}

LogicalForm sample_form(Rng& rng, double hypernym_rate, double negation_rate, double modifier_rate) {
  const World& w = World::standard();
  LogicalForm f;
  const auto p = static_cast<int>(pick_weighted(rng, w.predicate_cdf));
  f.predicate = kFirstPredicate + p;
  f.agent = pick_noun(rng, w.agent_cdf[p], hypernym_rate);
  f.patient = pick_noun(rng, w.patient_cdf[p], hypernym_rate);
  f.negated = rng.bernoulli(negation_rate);
  if (rng.bernoulli(modifier_rate)) f.modifier = pick_modifier(rng, f.patient);
  return f;
}

std::uint64_t form_hash(const LogicalForm& f) {
  std::uint64_t h = mix64(static_cast<std::uint64_t>(f.agent));
  h = mix64(h ^ static_cast<std::uint64_t>(f.predicate));
  h = mix64(h ^ static_cast<std::uint64_t>(f.patient));
  h = mix64(h ^ (f.negated ? 1u : 0u));
  h = mix64(h ^ static_cast<std::uint64_t>(f.modifier ? *f.modifier + 1 : 0));
  return h;
}

// Same content, opposite surface polarity: "not P" == antonym(P).
LogicalForm equivalent_rewrite(LogicalForm f) {
  f.negated = !f.negated;
  f.predicate = ConceptInventory::standard().antonym(f.predicate);
  return f;
}

ConceptId other_noun(Rng& rng, ConceptId noun) {
  ConceptId n;
  do {
    n = rng.bernoulli(0.5)
            ? kFirstNoun + category_index(noun) * kHyponymsPerCategory +
                  static_cast<int>(rng.below(kHyponymsPerCategory))
            : kFirstNoun + static_cast<int>(rng.below(kCategories * kHyponymsPerCategory));
  } while (n == noun);
  return n;
}

ConceptId other_modifier(Rng& rng, std::optional<ConceptId> m) {
  ConceptId r;
  do r = kFirstModifier + static_cast<int>(rng.below(kModifiers));
  while (m && r == *m);
  return r;
}

LogicalForm make_hypothesis(Rng& rng, const LogicalForm& p, Label label) {
  const auto& inv = ConceptInventory::standard();
  LogicalForm h = p;
  const bool positive = truth(p);
  switch (label) {
    case Label::Entailment: {
      if (positive) {
        bool changed = false;
        while (!changed) {
          if (p.modifier && rng.bernoulli(0.5)) { h.modifier.reset(); changed = true; }
          if (rng.bernoulli(0.5)) { h.agent = inv.hypernym_of(p.agent); changed = true; }
          if (rng.bernoulli(0.5)) { h.patient = inv.hypernym_of(p.patient); changed = true; }
        }
        if (rng.bernoulli(0.3)) h = equivalent_rewrite(h);
      } else {
        if (!p.modifier && rng.bernoulli(0.6)) {
          h.modifier = pick_modifier(rng, p.patient);
          if (rng.bernoulli(0.3)) h = equivalent_rewrite(h);
        } else {
          h = equivalent_rewrite(h);
        }
      }
      break;
    }
    case Label::Contradiction: {
      h = rng.bernoulli(0.5) ? LogicalForm{p.agent, p.predicate, p.patient, !p.negated, p.modifier}
                             : LogicalForm{p.agent, inv.antonym(p.predicate), p.patient, p.negated,
                                           p.modifier};
      if (rng.bernoulli(0.4)) {
        if (positive) {
          if (p.modifier && rng.bernoulli(0.5)) h.modifier.reset();
          else if (rng.bernoulli(0.5)) h.agent = inv.hypernym_of(p.agent);
          else h.patient = inv.hypernym_of(p.patient);
        } else if (!p.modifier) {
          h.modifier = pick_modifier(rng, p.patient);
        }
      }
      break;
    }
    case Label::Neutral: {
      const int kind = static_cast<int>(rng.below(4));
      if (kind == 0) {
        h.agent = other_noun(rng, p.agent);
      } else if (kind == 1) {
        h.patient = other_noun(rng, p.patient);
      } else if (kind == 2) {
        int pair;
        do pair = static_cast<int>(rng.below(kPredicatePairs));
        while (pair == inv.predicate_pair(p.predicate));
        h.predicate = kFirstPredicate + 2 * pair + static_cast<int>(rng.below(2));
      } else {
        // Unverifiable modifier: the hypothesis claims more than the premise.
        if (positive) h.modifier = other_modifier(rng, p.modifier);
        else if (p.modifier) h.modifier = rng.bernoulli(0.5) ? std::optional<ConceptId>{}
                                                             : other_modifier(rng, p.modifier);
        else h.agent = other_noun(rng, p.agent);
      }
      if (rng.bernoulli(0.3)) h = equivalent_rewrite(h);
      if (rng.bernoulli(0.2)) h.negated = !h.negated;
      break;
    }
  }
  return h;
}

}  // namespace

Split premise_split(const LogicalForm& premise) {
  const std::uint64_t bucket = form_hash(premise) % 10;
  if (bucket < 8) return Split::Train;
  return bucket == 8 ? Split::Dev : Split::Test;
}

LogicalForm random_form(std::uint64_t seed, std::size_t index) {
  Rng rng(derive_seed(seed, "form", index));
  return sample_form(rng, 0.2, 0.3, 0.4);
}

NliPair logical_pair(std::uint64_t seed, Split split, std::size_t index) {
  if (split == Split::Pretrain) throw std::invalid_argument("pretrain split has no labelled pairs");
  const Label label = static_cast<Label>(index % 3);
  const std::uint64_t base = derive_seed(seed, "nli." + to_string(split), index);
  for (std::uint64_t attempt = 0; attempt < 10000; ++attempt) {
    Rng rng(mix64(base + attempt));
    LogicalForm p = sample_form(rng, 0.0, 0.0, 0.5);
    if (premise_split(p) != split) continue;
    LogicalForm h = make_hypothesis(rng, p, label);
    if (h == p || relation(p, h) != label) continue;
    return {p, h, label};
  }
  throw std::logic_error("could not generate a pair for index " + std::to_string(index));
}

// ---------------------------------------------------------------------------

std::size_t tier_corpus_size(ResourceTier tier, std::size_t base_size) {
  switch (tier) {
    case ResourceTier::High: return base_size;
    case ResourceTier::Medium: return base_size / 4;
    case ResourceTier::Low: return base_size / 16;
  }
  return 0;
}

Corpus generate_nli(std::size_t count, const ToyLanguageSpec& spec, std::uint64_t seed, Split split) {
  if (count < 3) throw std::invalid_argument("generate_nli needs at least 3 pairs");
  Corpus c{spec.language_id, split, seed, spec.digest(), {}};
  c.items.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const NliPair pair = logical_pair(seed, split, i);
    c.items.push_back({render(pair.premise, spec).text(), render(pair.hypothesis, spec).text(), pair.label});
  }
  return c;
}

Corpus generate_pretrain(const ToyLanguageSpec& spec, std::uint64_t seed, std::size_t base_size) {
  const std::size_t n = tier_corpus_size(spec.tier, base_size);
  if (n == 0) throw std::invalid_argument("pretraining corpus for '" + spec.language_id + "' is empty");
  Corpus c{spec.language_id, Split::Pretrain, seed, spec.digest(), {}};
  c.items.reserve(n);
  const std::uint64_t lang_seed = derive_seed(seed, "pretrain", hash_tag(spec.language_id));
  LogicalForm previous;
  for (std::size_t i = 0; i < n; ++i) {
    LogicalForm f = random_form(lang_seed, i);
    // Sentences come in two-sentence "documents". Half of the second
    // sentences restate, generalize or contrast the first; the rest continue
    // it, tending to mention the same entities.
    if (i % 2 == 1) {
      Rng rng(derive_seed(lang_seed, "discourse", i));
      if (rng.bernoulli(0.5)) {
        f = make_hypothesis(rng, previous, static_cast<Label>(rng.below(3)));
      } else {
        if (rng.bernoulli(0.5)) f.agent = previous.agent;
        if (rng.bernoulli(0.5)) f.patient = previous.patient;
      }
    }
    c.items.push_back({render(f, spec).text(), "", {}});
    previous = f;
  }
  return c;
}

void write_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write corpus file " + path);
  out << "# headprune-corpus language_id=" << corpus.language_id << " split=" << to_string(corpus.split)
      << " seed=" << corpus.seed << " digest=" << corpus.spec_digest << " items=" << corpus.items.size()
      << '\n';
  for (const auto& item : corpus.items) {
    out << item.first;
    if (!item.second.empty() || item.label) out << '\t' << item.second;
    if (item.label) out << '\t' << to_string(*item.label);
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed writing corpus file " + path);
}

Corpus read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read corpus file " + path);
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string hash, magic;
  hs >> hash >> magic;
  if (hash != "#" || magic != "headprune-corpus") throw std::runtime_error(path + ": not a corpus file");
  Corpus c;
  std::size_t expected = 0;
  std::string field;
  while (hs >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw std::runtime_error(path + ": malformed header field " + field);
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "language_id") c.language_id = value;
    else if (key == "split") c.split = parse_split(value);
    else if (key == "seed") c.seed = std::stoull(value);
    else if (key == "digest") c.spec_digest = value;
    else if (key == "items") expected = std::stoull(value);
    else throw std::runtime_error(path + ": unknown header field " + key);
  }
  std::string line;
  while (std::getline(in, line)) {
    CorpusItem item;
    const auto t1 = line.find('\t');
    item.first = line.substr(0, t1);
    if (t1 != std::string::npos) {
      const auto t2 = line.find('\t', t1 + 1);
      item.second = line.substr(t1 + 1, t2 == std::string::npos ? std::string::npos : t2 - t1 - 1);
      if (t2 != std::string::npos) item.label = parse_label(line.substr(t2 + 1));
    }
    c.items.push_back(std::move(item));
  }
  if (c.items.size() != expected)
    throw std::runtime_error(path + ": expected " + std::to_string(expected) + " items, found " +
                             std::to_string(c.items.size()));
  return c;
}

}  // namespace headprune::langlab
