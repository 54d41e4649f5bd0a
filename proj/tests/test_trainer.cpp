#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "headprune/pruning.hpp"
#include "headprune/trainer.hpp"

using namespace headprune;
using namespace headprune::langlab;

namespace {

struct Lab {
  std::vector<ToyLanguageSpec> suite;
  std::vector<Corpus> pretrain;
  Tokenizer tokenizer;
  ModelConfig config;

  Lab() {
    suite = build_language_suite(default_language_decls(), 42);
    for (const auto& s : suite) pretrain.push_back(generate_pretrain(s, 42, 320));
    tokenizer = build_tokenizer(pretrain, 2000);
    config.n_layers = 2;
    config.n_heads = 4;
    config.d_model = 16;
    config.d_ff = 24;
    config.vocab_size = tokenizer.size();
  }

  EncodedSet nli(std::size_t n, std::size_t lang, Split split, std::uint64_t seed = 5) const {
    return encode_corpus(generate_nli(n, suite[lang], seed, split), tokenizer, 32);
  }
};

const Lab& lab() {
  static const Lab instance;
  return instance;
}

}  // namespace

TEST_CASE("schedule validation, description and learning-rate shape") {
  TrainSchedule s = TrainSchedule::finetune(10, 1);
  CHECK_NOTHROW(s.validate());
  CHECK(s.describe() == "finetune;epochs=10;batch=32;lr=0.0003;sched=constant;warmup=0;clip=1;eval_every_epoch=1");
  s.batch_size = 0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = TrainSchedule::finetune(1, 1);
  s.learning_rate = 0.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);

  TrainSchedule p = TrainSchedule::pretrain(100, 1);
  CHECK(p.warmup_steps == 10);
  CHECK(p.learning_rate_at(0, 100) == doctest::Approx(p.learning_rate / 10));
  CHECK(p.learning_rate_at(9, 100) == doctest::Approx(p.learning_rate));
  CHECK(p.learning_rate_at(10, 100) == doctest::Approx(p.learning_rate));
  CHECK(p.learning_rate_at(55, 100) == doctest::Approx(p.learning_rate * 0.5));
  CHECK(p.learning_rate_at(99, 100) > 0.0);
  CHECK(parse_lr_schedule(to_string(LrSchedule::LinearDecay)) == LrSchedule::LinearDecay);
}

TEST_CASE("encode_corpus pairs sentences with segment ids") {
  const auto& L = lab();
  const EncodedSet pre = encode_corpus(L.pretrain[0], L.tokenizer, 32);
  CHECK(pre.items.size() == (L.pretrain[0].items.size() + 1) / 2);
  const auto& ex = pre.items[0];
  CHECK(ex.tokens.front() == Tokenizer::kCls);
  CHECK(std::count(ex.tokens.begin(), ex.tokens.end(), Tokenizer::kSep) == 2);
  CHECK(ex.label == -1);
  const EncodedSet dev = L.nli(30, 0, Split::Dev);
  for (std::size_t i = 0; i < dev.items.size(); ++i) CHECK(dev.items[i].label == static_cast<int>(i % 3));
}

TEST_CASE("MLM corruption follows the 15% / 80-10-10 recipe") {
  const auto& L = lab();
  const EncodedSet pre = encode_corpus(L.pretrain[1], L.tokenizer, 32);
  Rng rng(99);
  std::size_t selected = 0, masked = 0, randomized = 0, kept = 0, candidates = 0;
  for (int rep = 0; rep < 20; ++rep)
    for (const auto& ex : pre.items) {
      const MlmExample m = mask_for_mlm(ex, L.tokenizer.size(), rng);
      std::size_t ordinary = 0;
      for (int t : ex.tokens) ordinary += t > Tokenizer::kMask ? 1 : 0;
      candidates += ordinary;
      CHECK(m.positions.size() == std::max<std::size_t>(1, static_cast<std::size_t>(std::round(0.15 * ordinary))));
      for (std::size_t k = 0; k < m.positions.size(); ++k) {
        const std::size_t p = m.positions[k];
        REQUIRE(ex.tokens[p] > Tokenizer::kMask);
        CHECK(m.targets[k] == ex.tokens[p]);
        ++selected;
        if (m.tokens[p] == Tokenizer::kMask) ++masked;
        else if (m.tokens[p] == ex.tokens[p]) ++kept;  // includes random draws of the same id
        else ++randomized;
      }
      for (std::size_t i = 0; i < ex.tokens.size(); ++i)
        if (std::find(m.positions.begin(), m.positions.end(), i) == m.positions.end())
          CHECK(m.tokens[i] == ex.tokens[i]);
    }
  CHECK(selected / static_cast<double>(candidates) == doctest::Approx(0.15).epsilon(0.2));
  CHECK(masked / static_cast<double>(selected) == doctest::Approx(0.8).epsilon(0.03));
  CHECK(randomized / static_cast<double>(selected) == doctest::Approx(0.1).epsilon(0.15));
  CHECK(kept / static_cast<double>(selected) == doctest::Approx(0.1).epsilon(0.15));
}

TEST_CASE("pretraining: initial loss near ln(V), zero steps leave the model unchanged") {
  const auto& L = lab();
  std::vector<EncodedSet> enc;
  for (const auto& c : L.pretrain) enc.push_back(encode_corpus(c, L.tokenizer, 32));
  ModelConfig c = ModelConfig{};
  c.vocab_size = L.tokenizer.size();
  EncoderModel model(c, 3);
  const EncoderModel before = model;
  TrainSchedule s = TrainSchedule::pretrain(0, 1);
  CHECK(pretrain_mlm(model, enc, L.tokenizer, s).losses.empty());
  CHECK(model == before);
  s.steps = 1;
  const double init = pretrain_mlm(model, enc, L.tokenizer, s).losses[0];
  CHECK(std::abs(init - std::log(static_cast<double>(L.tokenizer.size()))) <=
        0.1 * std::log(static_cast<double>(L.tokenizer.size())));
  CHECK_FALSE(model == before);
}

TEST_CASE("pretraining errors") {
  const auto& L = lab();
  EncoderModel model(L.config, 3);
  std::istringstream no_mask("headprune-bpe 1\nvocab 3\n[PAD]\n[UNK]\na</w>\nmerges 0\n");
  const Tokenizer bad = Tokenizer::load(no_mask);
  std::vector<EncodedSet> enc{encode_corpus(L.pretrain[0], L.tokenizer, 32)};
  CHECK_THROWS_AS(pretrain_mlm(model, enc, bad, TrainSchedule::pretrain(1, 1)), std::invalid_argument);
  CHECK_THROWS_AS(pretrain_mlm(model, {}, L.tokenizer, TrainSchedule::pretrain(1, 1)), std::invalid_argument);
}

TEST_CASE("MLM loss decreases over the first 200 steps (3 seeds, default architecture)") {
  const auto& L = lab();
  std::vector<EncodedSet> enc;
  for (const auto& c : L.pretrain) enc.push_back(encode_corpus(c, L.tokenizer, 32));
  ModelConfig c;
  c.vocab_size = L.tokenizer.size();
  std::vector<double> mean(200, 0.0);
  for (std::uint64_t seed : {1, 2, 3}) {
    EncoderModel model(c, seed);
    TrainSchedule s = TrainSchedule::pretrain(200, seed);
    s.batch_size = 16;
    const auto losses = pretrain_mlm(model, enc, L.tokenizer, s).losses;
    for (std::size_t i = 0; i < 200; ++i) mean[i] += losses[i] / 3.0;
  }
  // Windowed means over 40-step blocks must strictly decrease.
  double previous = 1e300;
  for (std::size_t w = 0; w < 5; ++w) {
    double m = 0.0;
    for (std::size_t i = 40 * w; i < 40 * (w + 1); ++i) m += mean[i] / 40.0;
    CAPTURE(w);
    CHECK(m < previous);
    previous = m;
  }
}

TEST_CASE("evaluate: constant predictor, purity, errors, crosslingual keys") {
  const auto& L = lab();
  const EncodedSet dev = L.nli(99, 0, Split::Dev);
  for (int label = 0; label < 3; ++label) CHECK(evaluate_constant(dev, label).accuracy == 1.0 / 3.0);

  EncoderModel model(L.config, 4);
  const EncoderModel before = model;
  const HeadMask mask = HeadMask::all_alive(L.config);
  const EvalResult r1 = evaluate(model, mask, dev), r2 = evaluate(model, mask, dev, 7);
  CHECK(model == before);
  CHECK(r1.correct == r2.correct);
  CHECK(r1.accuracy == static_cast<double>(r1.correct) / 99.0);
  CHECK(r1.loss == doctest::Approx(r2.loss).epsilon(1e-12));

  EncodedSet bad = dev;
  bad.items[3].label = 3;
  CHECK_THROWS_AS(evaluate(model, mask, bad), std::invalid_argument);
  CHECK_THROWS_AS(evaluate(model, mask, EncodedSet{}), std::invalid_argument);

  std::vector<EncodedSet> sets;
  for (std::size_t i = 0; i < L.suite.size(); ++i) sets.push_back(L.nli(9, i, Split::Dev));
  const auto per_lang = evaluate_crosslingual(model, mask, sets);
  CHECK(per_lang.size() == L.suite.size());
  for (const auto& s : L.suite) CHECK(per_lang.count(s.language_id) == 1);
  sets.push_back(sets[0]);
  CHECK_THROWS_AS(evaluate_crosslingual(model, mask, sets), std::invalid_argument);
}

TEST_CASE("fine-tuning memorizes a tiny training set") {
  const auto& L = lab();
  const EncodedSet tiny = L.nli(6, 0, Split::Train);
  EncoderModel model(L.config, 8);
  TrainSchedule s = TrainSchedule::finetune(60, 2);
  s.batch_size = 6;
  s.learning_rate = 3e-3;
  s.eval_every_epoch = false;
  const auto res = finetune(model, HeadMask::all_alive(L.config), tiny, tiny, s, {"t", "none", 2});
  REQUIRE(res.records.size() == 1);
  CHECK(res.records[0].epoch == 60);
  CHECK(evaluate(model, HeadMask::all_alive(L.config), tiny).accuracy == 1.0);
  CHECK(res.epoch_train_loss.back() < res.epoch_train_loss.front());
}

TEST_CASE("fine-tuning: zero epochs, masked-head freeze, determinism") {
  const auto& L = lab();
  const EncodedSet train = L.nli(48, 0, Split::Train), dev = L.nli(30, 0, Split::Dev);
  const EncoderModel base(L.config, 9);
  const HeadMask mask = random_prune(L.config, 0.5, 77);

  EncoderModel zero = base;
  const auto z = finetune(zero, mask, train, dev, TrainSchedule::finetune(0, 1), {"t", "p", 1});
  REQUIRE(z.records.size() == 1);
  CHECK(z.records[0].epoch == 0);
  CHECK(z.records[0].accuracy == evaluate(base, mask, dev).accuracy);
  CHECK(zero == base);

  TrainSchedule s = TrainSchedule::finetune(3, 5);
  s.batch_size = 8;
  s.learning_rate = 1e-3;
  EncoderModel a = base, b = base;
  const auto ra = finetune(a, mask, train, dev, s, {"t", "p", 5});
  const auto rb = finetune(b, mask, train, dev, s, {"t", "p", 5});
  CHECK(a == b);
  REQUIRE(ra.records.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(ra.records[i].epoch == i + 1);
    CHECK(ra.records[i].accuracy == rb.records[i].accuracy);
    CHECK(ra.records[i].loss == rb.records[i].loss);
    CHECK(ra.records[i].schedule == s.describe());
    CHECK(ra.records[i].split == "dev");
  }
  CHECK_FALSE(a == base);
  for (std::size_t l = 0; l < L.config.n_layers; ++l)
    for (std::size_t h = 0; h < L.config.n_heads; ++h) {
      const bool same = head_parameters(a, l, h) == head_parameters(base, l, h);
      CHECK(same == !mask.alive(l, h));
    }
  CHECK_THROWS_AS(finetune(a, mask, EncodedSet{}, dev, s, {}), std::invalid_argument);
}

TEST_CASE("recovery curve") {
  const std::vector<double> acc{0.40, 0.55, 0.60};
  const auto r = recovery_curve(acc);
  CHECK(r[0] == doctest::Approx(0.6667).epsilon(1e-3));
  CHECK(r.back() == 1.0);
  const std::vector<double> one{0.37};
  CHECK(recovery_curve(one) == std::vector<double>{1.0});
  const std::vector<double> zero{0.3, 0.0};
  CHECK_THROWS_AS(recovery_curve(zero), std::domain_error);
  CHECK_THROWS_AS(recovery_curve(std::span<const double>{}), std::domain_error);
  std::vector<MetricsRecord> recs(3);
  for (std::size_t i = 0; i < 3; ++i) {
    recs[i].epoch = 3 - i;
    recs[i].accuracy = acc[2 - i];
  }
  CHECK(recovery_curve(recs) == r);
}

TEST_CASE("repeat summaries") {
  const std::vector<std::uint64_t> dup{4, 4, 4};
  auto run = [](std::uint64_t seed) {
    return RepeatOutput{0.5 + 0.01 * static_cast<double>(seed % 7), {}};
  };
  CHECK(run_repeats(run, dup).stddev == 0.0);
  const std::vector<double> finals{0.61, 0.64, 0.70};
  const auto s = summarize_finals(finals);
  const double mean = (0.61 + 0.64 + 0.70) / 3.0;
  const double sd = std::sqrt(((0.61 - mean) * (0.61 - mean) + (0.64 - mean) * (0.64 - mean) +
                               (0.70 - mean) * (0.70 - mean)) / 2.0);
  CHECK(s.mean == doctest::Approx(mean).epsilon(1e-14));
  CHECK(s.stddev == doctest::Approx(sd).epsilon(1e-12));
  CHECK(s.n_runs == 3);
  const std::vector<double> permuted{0.70, 0.61, 0.64};
  CHECK(summarize_finals(permuted).mean == s.mean);
  const std::vector<double> single{0.5};
  CHECK(summarize_finals(single).stddev == 0.0);
  CHECK_THROWS_AS(summarize_finals(std::span<const double>{}), std::invalid_argument);
}

TEST_CASE("metrics sink: sorted CSV independent of append order") {
  auto make = [](std::string policy, std::uint64_t seed, std::size_t epoch) {
    MetricsRecord r;
    r.experiment_id = "exp";
    r.task = "nli";
    r.language_id = "en";
    r.policy = std::move(policy);
    r.seed = seed;
    r.epoch = epoch;
    r.split = "dev";
    r.correct = 2;
    r.total = 3;
    r.accuracy = 2.0 / 3.0;
    r.loss = 0.1;
    r.schedule = "s";
    return r;
  };
  std::vector<MetricsRecord> recs;
  for (std::uint64_t s = 0; s < 4; ++s)
    for (std::size_t e = 1; e <= 5; ++e) recs.push_back(make(s % 2 ? "top:6" : "random:0.5", s, e));

  MetricsSink forward, threaded;
  forward.append(recs);
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < 4; ++t)
    threads.emplace_back([&, t] {
      for (std::size_t i = recs.size(); i-- > 0;)
        if (i % 4 == t) threaded.append(recs[i]);
    });
  for (auto& th : threads) th.join();

  const auto dir = std::filesystem::temp_directory_path() / "headprune_test_trainer";
  std::filesystem::create_directories(dir);
  const auto p1 = (dir / "a.csv").string(), p2 = (dir / "b.csv").string();
  forward.write_csv(p1);
  threaded.write_csv(p2);
  auto slurp = [](const std::string& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(p1) == slurp(p2));
  CHECK(slurp(p1).rfind("experiment_id,task,language_id,policy,seed,epoch,split,correct,total,accuracy,loss,schedule\n", 0) == 0);
  const auto back = MetricsSink::read_csv(p1);
  REQUIRE(back.size() == recs.size());
  CHECK(back[0].accuracy == 2.0 / 3.0);
  MetricsRecord bad = make("a,b", 1, 1);
  CHECK_THROWS_AS(forward.append(bad), std::invalid_argument);
  std::filesystem::remove_all(dir);
}
