#include "headprune/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "headprune/adam.hpp"
#include "headprune/numfmt.hpp"

namespace headprune {

std::string to_string(Phase p) { return p == Phase::Pretrain ? "pretrain" : "finetune"; }

std::string to_string(LrSchedule s) { return s == LrSchedule::Constant ? "constant" : "linear"; }

LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::Constant;
  if (s == "linear") return LrSchedule::LinearDecay;
  throw std::invalid_argument("unknown learning-rate schedule '" + s + "'");
}

TrainSchedule TrainSchedule::pretrain(std::size_t steps, std::uint64_t seed) {
  TrainSchedule s;
  s.phase = Phase::Pretrain;
  s.steps = steps;
  s.epochs = 0;
  s.seed = seed;
  s.learning_rate = 5e-4;
  s.warmup_steps = steps / 10;
  s.lr_schedule = LrSchedule::LinearDecay;
  return s;
}

TrainSchedule TrainSchedule::finetune(std::size_t epochs, std::uint64_t seed) {
  TrainSchedule s;
  s.phase = Phase::Finetune;
  s.epochs = epochs;
  s.seed = seed;
  return s;
}

void TrainSchedule::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("learning rate must be positive and finite");
  if (!(max_grad_norm >= 0.0)) throw std::invalid_argument("max_grad_norm must be nonnegative");
}

std::string TrainSchedule::describe() const {
  std::ostringstream s;
  s << to_string(phase);
  if (phase == Phase::Pretrain) s << ";steps=" << steps;
  else s << ";epochs=" << epochs;
  s << ";batch=" << batch_size << ";lr=" << learning_rate
    << ";sched=" << to_string(lr_schedule) << ";warmup=" << warmup_steps
    << ";clip=" << max_grad_norm << ";eval_every_epoch=" << (eval_every_epoch ? 1 : 0);
  return s.str();
}

double TrainSchedule::learning_rate_at(std::size_t step, std::size_t total_steps) const {
  if (step < warmup_steps)
    return learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  if (lr_schedule == LrSchedule::Constant || total_steps <= warmup_steps) return learning_rate;
  const double remaining = static_cast<double>(total_steps - step);
  return learning_rate * remaining / static_cast<double>(total_steps - warmup_steps);
}

// ---------------------------------------------------------------------------

EncodedSet encode_corpus(const langlab::Corpus& corpus, const Tokenizer& tokenizer, std::size_t max_len) {
  EncodedSet set{corpus.language_id, corpus.split, {}};
  auto push = [&](const std::string& a, const std::string& b, int label) {
    auto [ids, seg] = tokenizer.encode_pair(a, b, max_len);
    set.items.push_back({std::move(ids), std::move(seg), label});
  };
  if (corpus.split == langlab::Split::Pretrain) {
    for (std::size_t i = 0; i < corpus.items.size(); i += 2)
      push(corpus.items[i].first, i + 1 < corpus.items.size() ? corpus.items[i + 1].first : "", -1);
  } else {
    for (const auto& it : corpus.items)
      push(it.first, it.second, it.label ? static_cast<int>(*it.label) : -1);
  }
  return set;
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& MetricsSink::columns() {
  static const std::vector<std::string> cols{"experiment_id", "task",    "language_id", "policy",
                                             "seed",          "epoch",   "split",       "correct",
                                             "total",         "accuracy", "loss",       "schedule"};
  return cols;
}

std::string MetricsSink::csv_row(const MetricsRecord& r) {
  std::ostringstream s;
  s << r.experiment_id << ',' << r.task << ',' << r.language_id << ',' << r.policy << ',' << r.seed
    << ',' << r.epoch << ',' << r.split << ',' << r.correct << ',' << r.total << ','
    << format_double(r.accuracy) << ',' << format_double(r.loss) << ',' << r.schedule;
  return s.str();
}

void MetricsSink::append(const MetricsRecord& record) {
  for (const std::string* f : {&record.experiment_id, &record.task, &record.language_id, &record.policy,
                               &record.split, &record.schedule})
    if (f->find_first_of(",\n") != std::string::npos)
      throw std::invalid_argument("metrics field contains a separator: " + *f);
  std::lock_guard lock(mutex_);
  records_.push_back(record);
}

void MetricsSink::append(std::span<const MetricsRecord> records) {
  for (const auto& r : records) append(r);
}

std::vector<MetricsRecord> MetricsSink::records() const {
  std::lock_guard lock(mutex_);
  return records_;
}

std::vector<MetricsRecord> MetricsSink::sorted_records() const {
  auto out = records();
  std::stable_sort(out.begin(), out.end(), [](const MetricsRecord& a, const MetricsRecord& b) {
    return std::tie(a.experiment_id, a.policy, a.seed, a.task, a.language_id, a.split, a.epoch) <
           std::tie(b.experiment_id, b.policy, b.seed, b.task, b.language_id, b.split, b.epoch);
  });
  return out;
}

void MetricsSink::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  const auto& cols = columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : sorted_records()) out << csv_row(r) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path);
}

std::vector<MetricsRecord> MetricsSink::read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(in, line);
  std::string expected;
  for (std::size_t i = 0; i < columns().size(); ++i) expected += (i ? "," : "") + columns()[i];
  if (line != expected) throw std::runtime_error(path + ": unexpected metrics header");
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != columns().size()) throw std::runtime_error(path + ": malformed row: " + line);
    MetricsRecord r;
    r.experiment_id = f[0];
    r.task = f[1];
    r.language_id = f[2];
    r.policy = f[3];
    r.seed = std::stoull(f[4]);
    r.epoch = std::stoull(f[5]);
    r.split = f[6];
    r.correct = std::stoull(f[7]);
    r.total = std::stoull(f[8]);
    r.accuracy = parse_double(f[9]);
    r.loss = parse_double(f[10]);
    r.schedule = f[11];
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr int kFirstOrdinaryToken = Tokenizer::kMask + 1;

Batch make_batch(std::span<const Example* const> items) {
  std::vector<std::vector<int>> toks, segs;
  toks.reserve(items.size());
  segs.reserve(items.size());
  for (const Example* e : items) {
    toks.push_back(e->tokens);
    segs.push_back(e->segments);
  }
  return Batch::from_sequences(toks, segs, Tokenizer::kPad);
}

void clip_gradients(std::vector<Tensor>& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g.values()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double scale = max_norm / norm;
  for (auto& g : grads)
    for (double& v : g.values()) v *= scale;
}

void apply_update(EncoderModel& model, std::vector<Tensor>& grads, AdamState& state,
                  const TrainSchedule& schedule, std::size_t step, std::size_t total_steps) {
  clip_gradients(grads, schedule.max_grad_norm);
  std::vector<Tensor*> params;
  for (auto& p : model.parameters()) params.push_back(p.tensor);
  AdamConfig cfg;
  cfg.lr = schedule.learning_rate_at(step, total_steps);
  adam_step(params, grads, state, cfg);
}

}  // namespace

MlmExample mask_for_mlm(const Example& ex, std::size_t vocab_size, Rng& rng) {
  if (vocab_size <= static_cast<std::size_t>(kFirstOrdinaryToken))
    throw std::invalid_argument("vocabulary has no ordinary tokens");
  MlmExample out{ex.tokens, {}, {}};
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < ex.tokens.size(); ++i)
    if (ex.tokens[i] >= kFirstOrdinaryToken) candidates.push_back(i);
  if (candidates.empty()) return out;
  const auto n = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::round(0.15 * static_cast<double>(candidates.size()))));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(candidates.size() - i));
    std::swap(candidates[i], candidates[j]);
  }
  candidates.resize(n);
  std::sort(candidates.begin(), candidates.end());
  for (std::size_t pos : candidates) {
    out.positions.push_back(pos);
    out.targets.push_back(ex.tokens[pos]);
    const double u = rng.uniform();
    if (u < 0.8)
      out.tokens[pos] = Tokenizer::kMask;
    else if (u < 0.9)
      out.tokens[pos] = kFirstOrdinaryToken +
                        static_cast<int>(rng.below(vocab_size - static_cast<std::size_t>(kFirstOrdinaryToken)));
  }
  return out;
}

PretrainResult pretrain_mlm(EncoderModel& model, const std::vector<EncodedSet>& corpora,
                            const Tokenizer& tokenizer, const TrainSchedule& schedule) {
  schedule.validate();
  if (tokenizer.size() <= static_cast<std::size_t>(Tokenizer::kMask) ||
      tokenizer.token(Tokenizer::kMask) != "[MASK]")
    throw std::invalid_argument("tokenizer has no [MASK] token");
  const std::size_t vocab = tokenizer.size();
  if (vocab > model.config().vocab_size)
    throw std::invalid_argument("tokenizer vocabulary exceeds the model's embedding table");
  std::vector<const Example*> pool;
  for (const auto& c : corpora)
    for (const auto& e : c.items) pool.push_back(&e);
  if (pool.empty()) throw std::invalid_argument("pretraining corpora are empty");

  const HeadMask mask = HeadMask::all_alive(model.config());
  PretrainResult result;
  AdamState state;
  Rng rng(derive_seed(schedule.seed, "pretrain.sample"));
  for (std::size_t step = 0; step < schedule.steps; ++step) {
    std::vector<MlmExample> masked;
    std::vector<const Example*> views;
    std::vector<Example> corrupted;
    corrupted.reserve(schedule.batch_size);
    for (std::size_t b = 0; b < schedule.batch_size; ++b) {
      const Example* src = pool[static_cast<std::size_t>(rng.below(pool.size()))];
      masked.push_back(mask_for_mlm(*src, vocab, rng));
      corrupted.push_back({masked.back().tokens, src->segments, -1});
    }
    for (const auto& e : corrupted) views.push_back(&e);
    const Batch batch = make_batch(views);
    std::vector<std::size_t> positions;
    std::vector<int> targets;
    for (std::size_t b = 0; b < masked.size(); ++b)
      for (std::size_t k = 0; k < masked[b].positions.size(); ++k) {
        positions.push_back(b * batch.seq + masked[b].positions[k]);
        targets.push_back(masked[b].targets[k]);
      }
    std::vector<Tensor> grads;
    {
      ModelPass pass(model);
      const Var loss = mlm_loss(pass, batch, mask, positions, targets);
      result.losses.push_back(pass.tape().value(loss)[0]);
      grads = backward_masked(pass, loss, mask);
    }
    apply_update(model, grads, state, schedule, step, schedule.steps);
  }
  return result;
}

// ---------------------------------------------------------------------------

EvalResult evaluate(const EncoderModel& model, const HeadMask& mask, const EncodedSet& set,
                    std::size_t batch_size) {
  if (set.items.empty()) throw std::invalid_argument("cannot evaluate an empty set");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  const auto classes = static_cast<int>(model.config().n_classes);
  for (const auto& e : set.items)
    if (e.label < 0 || e.label >= classes)
      throw std::invalid_argument("label " + std::to_string(e.label) + " outside the classifier's " +
                                  std::to_string(classes) + " classes");
  EvalResult r;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < set.items.size(); start += batch_size) {
    const std::size_t end = std::min(set.items.size(), start + batch_size);
    std::vector<const Example*> views;
    for (std::size_t i = start; i < end; ++i) views.push_back(&set.items[i]);
    const Batch batch = make_batch(views);
    ModelPass pass(model, false);
    const Tensor& logits = pass.tape().value(classify(pass, batch, mask));
    for (std::size_t i = 0; i < views.size(); ++i) {
      const auto row = logits.row(i);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      const double mx = row[static_cast<std::size_t>(best)];
      double z = 0.0;
      for (double v : row) z += std::exp(v - mx);
      loss_sum += -(row[static_cast<std::size_t>(views[i]->label)] - mx - std::log(z));
      if (best == views[i]->label) ++r.correct;
    }
  }
  r.total = set.items.size();
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  r.loss = loss_sum / static_cast<double>(r.total);
  return r;
}

std::map<std::string, EvalResult> evaluate_crosslingual(const EncoderModel& model, const HeadMask& mask,
                                                        const std::vector<EncodedSet>& sets,
                                                        std::size_t batch_size) {
  std::map<std::string, EvalResult> out;
  for (const auto& s : sets)
    if (!out.emplace(s.language_id, EvalResult{}).second)
      throw std::invalid_argument("language '" + s.language_id + "' evaluated twice");
  for (const auto& s : sets) out[s.language_id] = evaluate(model, mask, s, batch_size);
  return out;
}

EvalResult evaluate_constant(const EncodedSet& set, int label) {
  if (set.items.empty()) throw std::invalid_argument("cannot evaluate an empty set");
  EvalResult r;
  for (const auto& e : set.items) r.correct += e.label == label ? 1 : 0;
  r.total = set.items.size();
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  r.loss = std::log(3.0);
  return r;
}

// ---------------------------------------------------------------------------

FinetuneResult finetune(EncoderModel& model, const HeadMask& mask, const EncodedSet& train,
                        const EncodedSet& dev, const TrainSchedule& schedule, const RunInfo& info,
                        const EpochHook& on_epoch) {
  schedule.validate();
  if (train.items.empty()) throw std::invalid_argument("fine-tuning set is empty");
  mask.check_matches(model.config());
  const auto classes = static_cast<int>(model.config().n_classes);
  for (const auto& e : train.items)
    if (e.label < 0 || e.label >= classes)
      throw std::invalid_argument("training label outside the classifier's classes");

  FinetuneResult result;
  auto record = [&](std::size_t epoch) {
    const EvalResult ev = evaluate(model, mask, dev);
    result.records.push_back({info.experiment_id, "nli", dev.language_id, info.policy, info.seed, epoch,
                              langlab::to_string(dev.split), ev.correct, ev.total, ev.accuracy, ev.loss,
                              schedule.describe()});
  };
  if (schedule.epochs == 0) {
    record(0);
    return result;
  }

  const std::size_t n = train.items.size();
  const std::size_t per_epoch = (n + schedule.batch_size - 1) / schedule.batch_size;
  const std::size_t total_steps = per_epoch * schedule.epochs;
  AdamState state;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= schedule.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(schedule.seed, "finetune.order", epoch));
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += schedule.batch_size, ++step) {
      const std::size_t end = std::min(n, start + schedule.batch_size);
      std::vector<const Example*> views;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        views.push_back(&train.items[order[i]]);
        labels.push_back(views.back()->label);
      }
      const Batch batch = make_batch(views);
      std::vector<Tensor> grads;
      {
        ModelPass pass(model);
        const Var loss = ops::cross_entropy(pass.tape(), classify(pass, batch, mask), labels);
        loss_sum += pass.tape().value(loss)[0] * static_cast<double>(views.size());
        grads = backward_masked(pass, loss, mask);
      }
      apply_update(model, grads, state, schedule, step, total_steps);
    }
    result.epoch_train_loss.push_back(loss_sum / static_cast<double>(n));
    if (schedule.eval_every_epoch || epoch == schedule.epochs) record(epoch);
    if (on_epoch && !on_epoch(epoch, model)) break;
  }
  return result;
}

// ---------------------------------------------------------------------------

std::vector<double> recovery_curve(std::span<const double> accuracies) {
  if (accuracies.empty()) throw std::domain_error("recovery curve needs at least one epoch");
  const double final_acc = accuracies.back();
  if (!(final_acc > 0.0)) throw std::domain_error("final accuracy is zero; recovery ratio undefined");
  std::vector<double> r;
  for (double a : accuracies) r.push_back(a / final_acc);
  r.back() = 1.0;
  return r;
}

std::vector<double> recovery_curve(std::span<const MetricsRecord> records) {
  std::vector<const MetricsRecord*> sorted;
  for (const auto& r : records)
    if (r.epoch > 0) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->epoch < b->epoch; });
  std::vector<double> acc;
  for (auto* r : sorted) acc.push_back(r->accuracy);
  return recovery_curve(acc);
}

RepeatSummary summarize_finals(std::span<const double> finals) {
  if (finals.empty()) throw std::invalid_argument("no runs to summarize");
  RepeatSummary s;
  s.n_runs = finals.size();
  s.finals.assign(finals.begin(), finals.end());
  // Sorted summation keeps the mean bitwise independent of seed order.
  std::vector<double> sorted = s.finals;
  std::sort(sorted.begin(), sorted.end());
  double sum = 0.0;
  for (double v : sorted) sum += v;
  s.mean = sum / static_cast<double>(s.n_runs);
  if (s.n_runs > 1) {
    double sq = 0.0;
    for (double v : sorted) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(s.n_runs - 1));
  }
  return s;
}

RepeatSummary run_repeats(const std::function<RepeatOutput(std::uint64_t)>& run,
                          std::span<const std::uint64_t> seeds, std::vector<MetricsRecord>* records) {
  if (seeds.empty()) throw std::invalid_argument("run_repeats needs at least one seed");
  std::vector<double> finals;
  for (std::uint64_t s : seeds) {
    RepeatOutput out = run(s);
    finals.push_back(out.final_accuracy);
    if (records) records->insert(records->end(), out.records.begin(), out.records.end());
  }
  return summarize_finals(finals);
}

}  // namespace headprune
