#include "headprune/experiment.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "headprune/numfmt.hpp"
#include "headprune/rng.hpp"
#include "io_util.hpp"
#include "json.hpp"

namespace headprune {

namespace fs = std::filesystem;
using io::read_file;
using io::require_file;
using io::write_file_atomic;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config validation and JSON form

namespace {

bool csv_safe(const std::string& s) { return s.find_first_of(",\n\r/\\") == std::string::npos; }

// Reads typed fields out of one JSON object, collecting every problem.
class Reader {
 public:
  Reader(const ojson& obj, std::string path, std::vector<std::string>& problems)
      : obj_(obj), path_(std::move(path)), problems_(problems) {
    if (!obj_.is_object()) problems_.push_back(path_ + ": expected an object");
  }

  // True when the key was present and well-typed.
  template <typename T>
  bool get(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_.is_object() || !obj_.contains(key)) return false;
    const ojson& v = obj_.at(key);
    if (!type_ok<T>(v)) {
      problems_.push_back(at(key) + ": wrong type");
      return false;
    }
    out = v.get<T>();
    return true;
  }

  const ojson* child(const char* key) {
    seen_.insert(key);
    if (!obj_.is_object() || !obj_.contains(key)) return nullptr;
    return &obj_.at(key);
  }

  std::string at(const std::string& key) const { return path_ + "." + key; }

  void finish() {
    if (!obj_.is_object()) return;
    for (const auto& [k, v] : obj_.items())
      if (!seen_.count(k)) problems_.push_back(at(k) + ": unknown key");
  }

 private:
  template <typename T>
  static bool type_ok(const ojson& v) {
    if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
    else if constexpr (std::is_same_v<T, std::string>) return v.is_string();
    else if constexpr (std::is_floating_point_v<T>) return v.is_number();
    else if constexpr (std::is_unsigned_v<T>) return v.is_number_unsigned();
    else if constexpr (std::is_integral_v<T>) return v.is_number_integer();
    else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      if (!v.is_array()) return false;
      return std::all_of(v.begin(), v.end(), [](const ojson& e) { return e.is_string(); });
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v.is_array()) return false;
      return std::all_of(v.begin(), v.end(), [](const ojson& e) { return e.is_number(); });
    } else if constexpr (std::is_same_v<T, std::vector<std::size_t>> ||
                         std::is_same_v<T, std::vector<std::uint64_t>>) {
      if (!v.is_array()) return false;
      return std::all_of(v.begin(), v.end(), [](const ojson& e) { return e.is_number_unsigned(); });
    } else {
      static_assert(sizeof(T) == 0, "unsupported config field type");
    }
  }

  const ojson& obj_;
  std::string path_;
  std::vector<std::string>& problems_;
  std::set<std::string> seen_;
};

template <typename E, typename ParseFn>
void get_enum(Reader& r, const char* key, E& out, ParseFn parse, std::vector<std::string>& problems) {
  std::string text;
  if (!r.get(key, text)) return;
  try {
    out = parse(text);
  } catch (const std::exception&) {
    problems.push_back(r.at(key) + ": unknown value '" + text + "'");
  }
}

}  // namespace

ConfigValidationError::ConfigValidationError(std::vector<std::string> problems)
    : std::invalid_argument([&] {
        std::string m = "invalid experiment config:";
        for (const auto& p : problems) m += "\n  - " + p;
        return m;
      }()),
      problems_(std::move(problems)) {}

std::vector<std::string> ExperimentConfig::violations() const {
  std::vector<std::string> v;
  if (experiment_id.empty() || !csv_safe(experiment_id))
    v.push_back("experiment_id must be nonempty without commas, slashes or newlines");
  try {
    langlab::build_language_suite(languages, seed_root);
  } catch (const std::exception& e) {
    v.push_back(std::string("languages: ") + e.what());
  }
  for (const auto& d : languages)
    if (!csv_safe(d.id) || d.id.find_first_of(" \t") != std::string::npos)
      v.push_back("languages: id '" + d.id + "' must not contain separators or whitespace");
  if (tokenizer_vocab <= Tokenizer::kMask + 1) v.push_back("tokenizer_vocab is too small");
  {
    ModelConfig m = model;
    m.vocab_size = std::max<std::size_t>(tokenizer_vocab, 1);
    try {
      m.validate();
    } catch (const std::exception& e) {
      v.push_back(std::string("model: ") + e.what());
    }
  }
  if (pretrain.batch_size == 0) v.push_back("pretrain.batch_size must be positive");
  if (!(pretrain.learning_rate > 0)) v.push_back("pretrain.learning_rate must be positive");
  if (pretrain.warmup_fraction < 0 || pretrain.warmup_fraction > 1)
    v.push_back("pretrain.warmup_fraction must lie in [0, 1]");
  if (pretrain.corpus_base_size < 16) v.push_back("pretrain.corpus_base_size must be at least 16");
  if (finetune.train_size < 3) v.push_back("finetune.train_size must be at least 3");
  if (finetune.dev_size < 3) v.push_back("finetune.dev_size must be at least 3");
  if (finetune.batch_size == 0) v.push_back("finetune.batch_size must be positive");
  if (!(finetune.learning_rate > 0)) v.push_back("finetune.learning_rate must be positive");
  if (finetune.max_grad_norm < 0) v.push_back("finetune.max_grad_norm must be nonnegative");
  if (policies.empty()) v.push_back("policies must not be empty");
  std::set<std::string> seen_policies;
  for (const auto& p : policies) {
    try {
      const PruningPolicy policy = PruningPolicy::parse(p);
      policy.validate(model);
      if (!seen_policies.insert(policy.to_string()).second)
        v.push_back("policies: duplicate '" + p + "'");
    } catch (const std::exception& e) {
      v.push_back("policies: '" + p + "': " + e.what());
    }
  }
  if (seeds.empty()) v.push_back("seeds must not be empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    v.push_back("seeds must be distinct");
  auto check_policy = [&](const std::string& where, const std::string& p) {
    try {
      PruningPolicy::parse(p).validate(model);
    } catch (const std::exception& e) {
      v.push_back(where + ": '" + p + "': " + e.what());
    }
  };
  if (entropy.enabled) {
    check_policy("entropy.policy", entropy.policy);
    if (entropy.sentences == 0) v.push_back("entropy.sentences must be positive");
    if (!entropy.language.empty() &&
        std::none_of(languages.begin(), languages.end(),
                     [&](const auto& d) { return d.id == entropy.language; }))
      v.push_back("entropy.language '" + entropy.language + "' is not in the suite");
    if (model.n_layers % 3 != 0) v.push_back("entropy bands need a layer count divisible by 3");
  }
  if (embeddings.enabled) {
    check_policy("embeddings.policy", embeddings.policy);
    if (embeddings.per_language == 0) v.push_back("embeddings.per_language must be positive");
  }
  if (sweep.learning_rates.empty() || sweep.batch_sizes.empty())
    v.push_back("sweep grid must not be empty");
  for (double lr : sweep.learning_rates)
    if (!(lr > 0)) v.push_back("sweep.learning_rates must be positive");
  for (std::size_t b : sweep.batch_sizes)
    if (b == 0) v.push_back("sweep.batch_sizes must be positive");
  if (output_dir.empty()) v.push_back("output_dir must not be empty");
  return v;
}

void ExperimentConfig::validate() const {
  auto v = violations();
  if (!v.empty()) throw ConfigValidationError(std::move(v));
}

std::string config_to_json(const ExperimentConfig& c) {
  ojson j;
  j["schema_version"] = kConfigSchemaVersion;
  j["experiment_id"] = c.experiment_id;
  j["seed_root"] = c.seed_root;
  j["languages"] = ojson::array();
  for (const auto& d : c.languages)
    j["languages"].push_back({{"id", d.id},
                              {"word_order", langlab::to_string(d.word_order)},
                              {"agglutinative", d.agglutinative},
                              {"tier", langlab::to_string(d.tier)},
                              {"anchor_rate", d.anchor_rate},
                              {"anchor", d.anchor}});
  j["tokenizer_vocab"] = c.tokenizer_vocab;
  j["model"] = {{"n_layers", c.model.n_layers},       {"n_heads", c.model.n_heads},
                {"d_model", c.model.d_model},         {"d_ff", c.model.d_ff},
                {"max_seq_len", c.model.max_seq_len}, {"n_classes", c.model.n_classes}};
  j["pretrain"] = {{"corpus_base_size", c.pretrain.corpus_base_size},
                   {"steps", c.pretrain.steps},
                   {"batch_size", c.pretrain.batch_size},
                   {"learning_rate", c.pretrain.learning_rate},
                   {"warmup_fraction", c.pretrain.warmup_fraction}};
  j["finetune"] = {{"train_size", c.finetune.train_size},
                   {"dev_size", c.finetune.dev_size},
                   {"epochs", c.finetune.epochs},
                   {"batch_size", c.finetune.batch_size},
                   {"learning_rate", c.finetune.learning_rate},
                   {"lr_schedule", to_string(c.finetune.lr_schedule)},
                   {"max_grad_norm", c.finetune.max_grad_norm}};
  j["policies"] = c.policies;
  j["seeds"] = c.seeds;
  j["entropy"] = {{"enabled", c.entropy.enabled},
                  {"policy", c.entropy.policy},
                  {"language", c.entropy.language},
                  {"sentences", c.entropy.sentences}};
  j["embeddings"] = {{"enabled", c.embeddings.enabled},
                     {"policy", c.embeddings.policy},
                     {"per_language", c.embeddings.per_language}};
  j["sweep"] = {{"learning_rates", c.sweep.learning_rates}, {"batch_sizes", c.sweep.batch_sizes}};
  j["output_dir"] = c.output_dir;
  return j.dump(2) + "\n";
}

ExperimentConfig config_from_json(const std::string& text) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const std::exception& e) {
    throw ConfigValidationError({std::string("not valid JSON: ") + e.what()});
  }
  std::vector<std::string> problems;
  ExperimentConfig c;
  Reader r(j, "config", problems);
  int version = -1;
  r.get("schema_version", version);
  if (version != kConfigSchemaVersion)
    problems.push_back("config.schema_version must be " + std::to_string(kConfigSchemaVersion));
  r.get("experiment_id", c.experiment_id);
  r.get("seed_root", c.seed_root);
  if (const ojson* langs = r.child("languages")) {
    if (!langs->is_array()) {
      problems.push_back("config.languages: expected an array");
    } else {
      c.languages.clear();
      for (std::size_t i = 0; i < langs->size(); ++i) {
        langlab::LanguageDecl d;
        Reader lr((*langs)[i], "config.languages[" + std::to_string(i) + "]", problems);
        lr.get("id", d.id);
        get_enum(lr, "word_order", d.word_order, langlab::parse_word_order, problems);
        lr.get("agglutinative", d.agglutinative);
        get_enum(lr, "tier", d.tier, langlab::parse_tier, problems);
        lr.get("anchor_rate", d.anchor_rate);
        lr.get("anchor", d.anchor);
        lr.finish();
        c.languages.push_back(d);
      }
    }
  }
  r.get("tokenizer_vocab", c.tokenizer_vocab);
  if (const ojson* m = r.child("model")) {
    Reader mr(*m, "config.model", problems);
    mr.get("n_layers", c.model.n_layers);
    mr.get("n_heads", c.model.n_heads);
    mr.get("d_model", c.model.d_model);
    mr.get("d_ff", c.model.d_ff);
    mr.get("max_seq_len", c.model.max_seq_len);
    mr.get("n_classes", c.model.n_classes);
    mr.finish();
  }
  if (const ojson* p = r.child("pretrain")) {
    Reader pr(*p, "config.pretrain", problems);
    pr.get("corpus_base_size", c.pretrain.corpus_base_size);
    pr.get("steps", c.pretrain.steps);
    pr.get("batch_size", c.pretrain.batch_size);
    pr.get("learning_rate", c.pretrain.learning_rate);
    pr.get("warmup_fraction", c.pretrain.warmup_fraction);
    pr.finish();
  }
  if (const ojson* f = r.child("finetune")) {
    Reader fr(*f, "config.finetune", problems);
    fr.get("train_size", c.finetune.train_size);
    fr.get("dev_size", c.finetune.dev_size);
    fr.get("epochs", c.finetune.epochs);
    fr.get("batch_size", c.finetune.batch_size);
    fr.get("learning_rate", c.finetune.learning_rate);
    get_enum(fr, "lr_schedule", c.finetune.lr_schedule, parse_lr_schedule, problems);
    fr.get("max_grad_norm", c.finetune.max_grad_norm);
    fr.finish();
  }
  r.get("policies", c.policies);
  r.get("seeds", c.seeds);
  if (const ojson* e = r.child("entropy")) {
    Reader er(*e, "config.entropy", problems);
    er.get("enabled", c.entropy.enabled);
    er.get("policy", c.entropy.policy);
    er.get("language", c.entropy.language);
    er.get("sentences", c.entropy.sentences);
    er.finish();
  }
  if (const ojson* e = r.child("embeddings")) {
    Reader er(*e, "config.embeddings", problems);
    er.get("enabled", c.embeddings.enabled);
    er.get("policy", c.embeddings.policy);
    er.get("per_language", c.embeddings.per_language);
    er.finish();
  }
  if (const ojson* s = r.child("sweep")) {
    Reader sr(*s, "config.sweep", problems);
    sr.get("learning_rates", c.sweep.learning_rates);
    sr.get("batch_sizes", c.sweep.batch_sizes);
    sr.finish();
  }
  r.get("output_dir", c.output_dir);
  r.finish();
  if (problems.empty())
    for (auto& v : c.violations()) problems.push_back(std::move(v));
  if (!problems.empty()) throw ConfigValidationError(std::move(problems));
  return c;
}

ExperimentConfig load_config(const fs::path& path) { return config_from_json(read_file(path)); }

void save_config(const ExperimentConfig& config, const fs::path& path) {
  write_file_atomic(path, config_to_json(config));
}

// ---------------------------------------------------------------------------
// Cells, seeds, layout

std::string Cell::id() const { return policy.to_string() + "@s" + std::to_string(seed); }

std::vector<Cell> enumerate_cells(const ExperimentConfig& config) {
  std::vector<Cell> cells;
  for (const auto& p : config.policies)
    for (std::uint64_t s : config.seeds) cells.push_back({PruningPolicy::parse(p), s});
  return cells;
}

bool cell_matches(const Cell& cell, const std::string& filter) {
  if (filter.empty()) return true;
  std::stringstream ss(filter);
  std::string pattern;
  const std::string id = cell.id();
  while (std::getline(ss, pattern, ','))
    if (!pattern.empty() && fnmatch(pattern.c_str(), id.c_str(), 0) == 0) return true;
  return false;
}

SeedPlan SeedPlan::from_root(std::uint64_t root) {
  SeedPlan p;
  p.root = root;
  p.suite = derive_seed(root, "suite");
  p.corpus = derive_seed(root, "corpus");
  p.nli = derive_seed(root, "nli");
  p.model_init = derive_seed(root, "model.init");
  p.pretrain = derive_seed(root, "pretrain");
  return p;
}

std::uint64_t SeedPlan::mask(std::uint64_t s) const { return derive_seed(root, "mask", s); }
std::uint64_t SeedPlan::classifier(std::uint64_t s) const { return derive_seed(root, "classifier", s); }
std::uint64_t SeedPlan::finetune(std::uint64_t s) const { return derive_seed(root, "finetune", s); }

fs::path RunLayout::corpus(const std::string& lang, langlab::Split split) const {
  return root / "langs" / (lang + "." + langlab::to_string(split) + ".tsv");
}

fs::path RunLayout::cell_dir(const std::string& cell_id) const {
  std::string safe = cell_id;
  std::replace(safe.begin(), safe.end(), ':', '_');
  return root / "cells" / safe;
}

// ---------------------------------------------------------------------------
// Stages

namespace {

// Embedding sentences come from the held-out test split so they never
// overlap the fine-tuning or dev data.
constexpr langlab::Split kEmbeddingSplit = langlab::Split::Test;

std::vector<langlab::ToyLanguageSpec> build_suite(const ExperimentConfig& config) {
  return langlab::build_language_suite(config.languages, SeedPlan::from_root(config.seed_root).suite);
}

const langlab::ToyLanguageSpec& anchor_spec(const std::vector<langlab::ToyLanguageSpec>& suite) {
  for (const auto& s : suite)
    if (s.is_anchor) return s;
  throw std::logic_error("suite without anchor");
}

std::string suite_json(const std::vector<langlab::ToyLanguageSpec>& suite) {
  ojson j = ojson::array();
  for (const auto& s : suite) {
    ojson lex = ojson::array();
    for (const auto& w : s.lexicon) lex.push_back(w);
    j.push_back({{"language_id", s.language_id},
                 {"word_order", langlab::to_string(s.word_order)},
                 {"agglutinative", s.agglutinative},
                 {"tier", langlab::to_string(s.tier)},
                 {"family", langlab::to_string(s.family())},
                 {"lexical_anchor_rate", s.lexical_anchor_rate},
                 {"is_anchor", s.is_anchor},
                 {"digest", s.digest()},
                 {"shared_with_anchor", s.shared_with_anchor},
                 {"lexicon", lex}});
  }
  return j.dump(2) + "\n";
}

langlab::Corpus read_checked(const fs::path& path, const langlab::ToyLanguageSpec& spec) {
  require_file(path, "gen-langs");
  langlab::Corpus c = langlab::read_corpus(path.string());
  if (c.spec_digest != spec.digest())
    throw std::runtime_error(path.string() + " was generated for a different language suite");
  return c;
}

TrainSchedule finetune_schedule(const ExperimentConfig& config, std::uint64_t seed) {
  TrainSchedule s = TrainSchedule::finetune(config.finetune.epochs, seed);
  s.batch_size = config.finetune.batch_size;
  s.learning_rate = config.finetune.learning_rate;
  s.lr_schedule = config.finetune.lr_schedule;
  s.max_grad_norm = config.finetune.max_grad_norm;
  return s;
}

std::string cell_file_stem(const Cell& cell) {
  std::string s = cell.id();
  std::replace(s.begin(), s.end(), ':', '_');
  return s;
}

void write_entropy_csv(const fs::path& path, const std::vector<HeadEntropy>& heads,
                       std::size_t n_layers) {
  std::ostringstream out;
  out << "layer,head,band,entropy\n";
  for (const auto& h : heads)
    out << h.layer + 1 << ',' << h.head << ',' << to_string(band_of_layer(h.layer, n_layers)) << ','
        << format_double(h.entropy) << '\n';
  write_file_atomic(path, out.str());
}

bool matches_policy(const Cell& cell, const std::string& policy_text, std::uint64_t first_seed) {
  return cell.seed == first_seed && cell.policy == PruningPolicy::parse(policy_text);
}

// Shared by the full run and the standalone stages so their outputs match.
struct CellDiagnostics {
  const ExperimentConfig& config;
  const RunLayout& layout;
  const Lab& lab;
  const Cell& cell;
  const HeadMask& mask;
  bool entropy = false;
  bool embeddings = false;
  std::optional<EntropyReport> before = {};
  std::optional<EntropyDelta> delta = {};

  const EncodedSet& entropy_set() const {
    return lab.dev_for(config.entropy.language.empty() ? lab.anchor().language_id
                                                       : config.entropy.language);
  }

  std::vector<EncodedSet> embedding_sets() const {
    std::vector<EncodedSet> sets;
    for (const auto& spec : lab.suite) {
      const langlab::Corpus c =
          read_checked(layout.corpus(spec.language_id, kEmbeddingSplit), spec);
      sets.push_back(encode_corpus(c, lab.tokenizer, lab.model_config.max_seq_len));
    }
    return sets;
  }

  void start(const EncoderModel& model) {
    if (entropy) {
      before = attention_entropy(model, mask, entropy_set(), config.entropy.sentences);
      write_entropy_csv(layout.entropy() / (cell_file_stem(cell) + "_before.csv"), before->heads,
                        mask.n_layers());
    }
    if (embeddings) export_stage(model, "before");
  }

  void after_first_epoch(const EncoderModel& model) {
    if (entropy) {
      const EntropyReport after = attention_entropy(model, mask, entropy_set(), config.entropy.sentences);
      write_entropy_csv(layout.entropy() / (cell_file_stem(cell) + "_after.csv"), after.heads,
                        mask.n_layers());
      delta = entropy_delta(*before, after);
      write_entropy_csv(layout.entropy() / (cell_file_stem(cell) + "_delta.csv"), delta->heads,
                        mask.n_layers());
    }
    if (embeddings) export_stage(model, "after_epoch1");
  }

  void export_stage(const EncoderModel& model, const std::string& stage) {
    const auto rows =
        export_embeddings(model, mask, embedding_sets(), stage, config.embeddings.per_language);
    fs::create_directories(layout.embeddings());
    const fs::path path = layout.embeddings() / (cell_file_stem(cell) + "_" + stage + ".tsv");
    write_embeddings(path.string() + ".partial", rows);
    fs::rename(path.string() + ".partial", path);
  }
};

}  // namespace

const langlab::ToyLanguageSpec& Lab::anchor() const { return anchor_spec(suite); }

const EncodedSet& Lab::dev_for(const std::string& language_id) const {
  for (const auto& d : dev)
    if (d.language_id == language_id) return d;
  throw std::out_of_range("no dev set for language '" + language_id + "'");
}

void generate_languages(const ExperimentConfig& config, const RunLayout& layout) {
  config.validate();
  const SeedPlan seeds = SeedPlan::from_root(config.seed_root);
  const auto suite = build_suite(config);
  write_file_atomic(layout.suite(), suite_json(suite));
  auto write = [&](const langlab::Corpus& c, const langlab::ToyLanguageSpec& spec,
                   langlab::Split split) {
    const fs::path path = layout.corpus(spec.language_id, split);
    langlab::write_corpus(c, path.string() + ".partial");
    fs::rename(path.string() + ".partial", path);
  };
  for (const auto& spec : suite) {
    write(langlab::generate_pretrain(spec, seeds.corpus, config.pretrain.corpus_base_size), spec,
          langlab::Split::Pretrain);
    if (spec.is_anchor)
      write(langlab::generate_nli(config.finetune.train_size, spec, seeds.nli, langlab::Split::Train),
            spec, langlab::Split::Train);
    write(langlab::generate_nli(config.finetune.dev_size, spec, seeds.nli, langlab::Split::Dev), spec,
          langlab::Split::Dev);
    if (config.embeddings.enabled)
      write(langlab::generate_nli(std::max<std::size_t>(config.embeddings.per_language, 3), spec,
                                  seeds.nli, kEmbeddingSplit),
            spec, kEmbeddingSplit);
  }
}

void pretrain_stage(const ExperimentConfig& config, const RunLayout& layout,
                    const ProgressFn& progress) {
  config.validate();
  const SeedPlan seeds = SeedPlan::from_root(config.seed_root);
  const auto suite = build_suite(config);
  std::vector<langlab::Corpus> corpora;
  for (const auto& spec : suite)
    corpora.push_back(read_checked(layout.corpus(spec.language_id, langlab::Split::Pretrain), spec));
  const Tokenizer tokenizer = build_tokenizer(corpora, config.tokenizer_vocab);
  fs::create_directories(layout.tokenizer().parent_path());
  {
    std::ostringstream out;
    tokenizer.save(out);
    write_file_atomic(layout.tokenizer(), out.str());
  }
  ModelConfig mc = config.model;
  mc.vocab_size = tokenizer.size();
  EncoderModel model(mc, seeds.model_init);
  std::vector<EncodedSet> encoded;
  for (const auto& c : corpora) encoded.push_back(encode_corpus(c, tokenizer, mc.max_seq_len));
  TrainSchedule schedule = TrainSchedule::pretrain(config.pretrain.steps, seeds.pretrain);
  schedule.batch_size = config.pretrain.batch_size;
  schedule.learning_rate = config.pretrain.learning_rate;
  schedule.warmup_steps = static_cast<std::size_t>(
      std::llround(config.pretrain.warmup_fraction * static_cast<double>(config.pretrain.steps)));
  if (progress)
    progress("pretraining " + std::to_string(config.pretrain.steps) + " steps, vocab " +
             std::to_string(tokenizer.size()));
  const PretrainResult res = pretrain_mlm(model, encoded, tokenizer, schedule);
  std::ostringstream loss;
  loss << "step,loss\n";
  for (std::size_t i = 0; i < res.losses.size(); ++i)
    loss << i << ',' << format_double(res.losses[i]) << '\n';
  write_file_atomic(layout.pretrain_loss(), loss.str());
  std::ostringstream ckpt;
  model.save(ckpt);
  write_file_atomic(layout.pretrained(), ckpt.str());
}

Lab load_lab(const ExperimentConfig& config, const RunLayout& layout) {
  Lab lab;
  lab.suite = build_suite(config);
  require_file(layout.tokenizer(), "pretrain");
  {
    std::istringstream in(read_file(layout.tokenizer()));
    lab.tokenizer = Tokenizer::load(in);
  }
  lab.model_config = config.model;
  lab.model_config.vocab_size = lab.tokenizer.size();
  const std::size_t len = lab.model_config.max_seq_len;
  const auto& anchor = anchor_spec(lab.suite);
  lab.anchor_train = encode_corpus(
      read_checked(layout.corpus(anchor.language_id, langlab::Split::Train), anchor), lab.tokenizer, len);
  for (const auto& spec : lab.suite)
    lab.dev.push_back(encode_corpus(
        read_checked(layout.corpus(spec.language_id, langlab::Split::Dev), spec), lab.tokenizer, len));
  return lab;
}

EncoderModel load_pretrained(const RunLayout& layout) {
  require_file(layout.pretrained(), "pretrain");
  return EncoderModel::load(layout.pretrained().string());
}

HeadMask cell_mask(const ExperimentConfig& config, const Lab& lab, const Cell& cell) {
  return cell.policy.mask(lab.model_config, SeedPlan::from_root(config.seed_root).mask(cell.seed));
}

CellOutput finetune_cell(const ExperimentConfig& config, const RunLayout& layout, const Lab& lab,
                         const EncoderModel& pretrained, const Cell& cell, bool keep_model,
                         bool diagnostics) {
  const SeedPlan seeds = SeedPlan::from_root(config.seed_root);
  if (!(pretrained.config() == lab.model_config))
    throw std::runtime_error("pretrained checkpoint does not match the configured model");
  EncoderModel model = pretrained;
  model.reinitialize_classifier(seeds.classifier(cell.seed));
  const HeadMask mask = cell_mask(config, lab, cell);
  const std::uint64_t first_seed = config.seeds.front();
  CellDiagnostics diag{config, layout, lab, cell, mask};
  diag.entropy = diagnostics && config.entropy.enabled &&
                 matches_policy(cell, config.entropy.policy, first_seed);
  diag.embeddings = diagnostics && config.embeddings.enabled &&
                    matches_policy(cell, config.embeddings.policy, first_seed);
  diag.start(model);
  const RunInfo info{config.experiment_id, cell.policy.to_string(), cell.seed};
  const FinetuneResult ft = finetune(
      model, mask, lab.anchor_train, lab.dev_for(lab.anchor().language_id),
      finetune_schedule(config, seeds.finetune(cell.seed)), info,
      [&](std::size_t epoch, const EncoderModel& m) {
        if (epoch == 1) diag.after_first_epoch(m);
        return true;
      });
  CellOutput out;
  out.records = ft.records;
  if (keep_model) out.model = std::move(model);
  return out;
}

std::vector<MetricsRecord> evaluate_cell(const ExperimentConfig& config, const Lab& lab,
                                         const EncoderModel& finetuned, const Cell& cell) {
  const HeadMask mask = cell_mask(config, lab, cell);
  const auto results = evaluate_crosslingual(finetuned, mask, lab.dev);
  const std::string schedule =
      finetune_schedule(config, SeedPlan::from_root(config.seed_root).finetune(cell.seed)).describe();
  std::vector<MetricsRecord> records;
  for (const auto& [lang, r] : results)
    records.push_back({config.experiment_id, "xnli", lang, cell.policy.to_string(), cell.seed,
                       config.finetune.epochs, langlab::to_string(langlab::Split::Dev), r.correct,
                       r.total, r.accuracy, r.loss, schedule});
  return records;
}

void write_cell_records(const RunLayout& layout, const std::string& cell_id,
                        const std::vector<MetricsRecord>& records, const std::string& name) {
  MetricsSink sink;
  sink.append(records);
  const fs::path dir = layout.cell_dir(cell_id);
  fs::create_directories(dir);
  const fs::path path = dir / (name + ".csv");
  sink.write_csv(path.string() + ".partial");
  fs::rename(path.string() + ".partial", path);
}

void merge_metrics(const RunLayout& layout) {
  MetricsSink sink;
  const fs::path cells = layout.root / "cells";
  if (fs::exists(cells)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(cells))
      if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) sink.append(MetricsSink::read_csv(f.string()));
  }
  sink.write_csv(layout.metrics().string() + ".partial");
  fs::rename(layout.metrics().string() + ".partial", layout.metrics());
}

EntropyDelta entropy_stage(const ExperimentConfig& config, const RunLayout& layout, const Lab& lab,
                           const EncoderModel& pretrained, const Cell& cell) {
  const SeedPlan seeds = SeedPlan::from_root(config.seed_root);
  EncoderModel model = pretrained;
  model.reinitialize_classifier(seeds.classifier(cell.seed));
  const HeadMask mask = cell_mask(config, lab, cell);
  CellDiagnostics diag{config, layout, lab, cell, mask};
  diag.entropy = true;
  diag.start(model);
  const RunInfo info{config.experiment_id, cell.policy.to_string(), cell.seed};
  TrainSchedule schedule = finetune_schedule(config, seeds.finetune(cell.seed));
  schedule.eval_every_epoch = false;
  if (schedule.epochs == 0) throw std::invalid_argument("entropy needs at least one fine-tuning epoch");
  finetune(model, mask, lab.anchor_train, lab.dev_for(lab.anchor().language_id), schedule, info,
           [&](std::size_t, const EncoderModel& m) {
             diag.after_first_epoch(m);
             return false;
           });
  return *diag.delta;
}

void embeddings_stage(const ExperimentConfig& config, const RunLayout& layout, const Lab& lab,
                      const EncoderModel& pretrained, const Cell& cell) {
  const SeedPlan seeds = SeedPlan::from_root(config.seed_root);
  EncoderModel model = pretrained;
  model.reinitialize_classifier(seeds.classifier(cell.seed));
  const HeadMask mask = cell_mask(config, lab, cell);
  CellDiagnostics diag{config, layout, lab, cell, mask};
  diag.embeddings = true;
  diag.start(model);
  const RunInfo info{config.experiment_id, cell.policy.to_string(), cell.seed};
  TrainSchedule schedule = finetune_schedule(config, seeds.finetune(cell.seed));
  schedule.eval_every_epoch = false;
  if (schedule.epochs == 0) throw std::invalid_argument("embeddings need at least one fine-tuning epoch");
  finetune(model, mask, lab.anchor_train, lab.dev_for(lab.anchor().language_id), schedule, info,
           [&](std::size_t, const EncoderModel& m) {
             diag.after_first_epoch(m);
             return false;
           });
}

// ---------------------------------------------------------------------------
// Full run

namespace {

template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w)
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  for (auto& t : threads) t.join();
}

}  // namespace

bool run_experiment(const ExperimentConfig& config, const RunLayout& layout,
                    const RunOptions& options) {
  config.validate();
  auto say = [&](const std::string& m) {
    if (options.progress) options.progress(m);
  };
  fs::create_directories(layout.root);
  write_file_atomic(layout.incomplete_marker(), "run started; not finished\n");
  save_config(config, layout.config());

  say("generating languages");
  generate_languages(config, layout);
  pretrain_stage(config, layout, options.progress);
  const Lab lab = load_lab(config, layout);
  const EncoderModel pretrained = load_pretrained(layout);

  std::vector<Cell> cells;
  for (const auto& c : enumerate_cells(config))
    if (cell_matches(c, options.only)) cells.push_back(c);
  say("running " + std::to_string(cells.size()) + " cells on " + std::to_string(options.workers) +
      " workers");

  std::mutex failures_mutex;
  std::vector<std::string> failures;
  std::atomic<std::size_t> done{0};
  parallel_for(cells.size(), options.workers, [&](std::size_t i) {
    const Cell& cell = cells[i];
    try {
      CellOutput out = finetune_cell(config, layout, lab, pretrained, cell, true, true);
      write_cell_records(layout, cell.id(), out.records, "finetune");
      write_cell_records(layout, cell.id(), evaluate_cell(config, lab, *out.model, cell), "eval");
      say("cell " + cell.id() + " done (" + std::to_string(++done) + "/" +
          std::to_string(cells.size()) + ")");
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(failures_mutex);
      failures.push_back(cell.id() + ": " + e.what());
    }
  });
  for (const auto& f : failures) say("FAILED " + f);

  merge_metrics(layout);
  build_report(config, layout);
  const bool complete = failures.empty() && options.only.empty();
  if (complete) fs::remove(layout.incomplete_marker());
  return failures.empty();
}

// ---------------------------------------------------------------------------
// Sweep

std::vector<SweepCell> enumerate_sweep(const ExperimentConfig& config) {
  std::vector<SweepCell> cells;
  for (double lr : config.sweep.learning_rates)
    for (std::size_t b : config.sweep.batch_sizes) cells.push_back({lr, b});
  return cells;
}

std::vector<std::pair<SweepCell, double>> run_sweep(const ExperimentConfig& config,
                                                    const RunLayout& layout,
                                                    const RunOptions& options) {
  config.validate();
  const Lab lab = load_lab(config, layout);
  const EncoderModel pretrained = load_pretrained(layout);
  const SeedPlan seeds = SeedPlan::from_root(config.seed_root);
  const auto cells = enumerate_sweep(config);
  const std::uint64_t seed = config.seeds.front();
  std::vector<std::pair<SweepCell, double>> results(cells.size());
  parallel_for(cells.size(), options.workers, [&](std::size_t i) {
    EncoderModel model = pretrained;
    model.reinitialize_classifier(seeds.classifier(seed));
    TrainSchedule s = finetune_schedule(config, seeds.finetune(seed));
    s.learning_rate = cells[i].learning_rate;
    s.batch_size = cells[i].batch_size;
    s.eval_every_epoch = false;
    const auto ft = finetune(model, HeadMask::all_alive(lab.model_config), lab.anchor_train,
                             lab.dev_for(lab.anchor().language_id), s,
                             {config.experiment_id, "random:0", seed});
    results[i] = {cells[i], ft.records.back().accuracy};
    if (options.progress)
      options.progress("sweep lr=" + format_double(cells[i].learning_rate) +
                       " batch=" + std::to_string(cells[i].batch_size) + " accuracy " +
                       format_double(results[i].second));
  });
  std::ostringstream out;
  out << "learning_rate,batch_size,dev_accuracy\n";
  for (const auto& [c, acc] : results)
    out << format_double(c.learning_rate) << ',' << c.batch_size << ',' << format_double(acc) << '\n';
  write_file_atomic(layout.root / "sweep.csv", out.str());
  return results;
}

}  // namespace headprune
