#include "headprune/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "headprune/numfmt.hpp"

namespace headprune {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Batch make_batch(const EncodedSet& set, std::size_t start, std::size_t end) {
  std::vector<std::vector<int>> toks, segs;
  for (std::size_t i = start; i < end; ++i) {
    toks.push_back(set.items[i].tokens);
    segs.push_back(set.items[i].segments);
  }
  return Batch::from_sequences(toks, segs, Tokenizer::kPad);
}

std::array<double, 3> band_means_of(const std::vector<HeadEntropy>& heads, std::size_t n_layers) {
  std::array<double, 3> sum{}, count{};
  for (const auto& h : heads) {
    const auto b = static_cast<std::size_t>(band_of_layer(h.layer, n_layers));
    sum[b] += h.entropy;
    count[b] += 1.0;
  }
  std::array<double, 3> out{};
  for (std::size_t b = 0; b < 3; ++b) out[b] = count[b] > 0 ? sum[b] / count[b] : kNaN;
  return out;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, '\t')) out.push_back(field);
  return out;
}

}  // namespace

double relative_drop(double acc_base, double acc_pruned) {
  if (!(acc_base > 0.0)) throw std::domain_error("relative drop is undefined for zero base accuracy");
  return 100.0 * (acc_base - acc_pruned) / acc_base;
}

double d_metric(const LayerDrop& bottom, const LayerDrop& top) {
  if (bottom.n_layers != top.n_layers)
    throw std::invalid_argument("d compares equal layer counts, got bottom " +
                                std::to_string(bottom.n_layers) + " vs top " +
                                std::to_string(top.n_layers));
  return bottom.drop - top.drop;
}

std::string to_string(Band b) {
  switch (b) {
    case Band::Bottom: return "bottom";
    case Band::Middle: return "middle";
    case Band::Top: return "top";
  }
  return "?";
}

Band band_of_layer(std::size_t layer, std::size_t n_layers) {
  if (n_layers == 0 || n_layers % 3 != 0)
    throw std::invalid_argument("bands need a positive multiple of 3 layers");
  if (layer >= n_layers) throw std::out_of_range("layer index out of range");
  return static_cast<Band>(layer / (n_layers / 3));
}

const HeadEntropy* EntropyReport::find(std::size_t layer, std::size_t head) const {
  for (const auto& h : heads)
    if (h.layer == layer && h.head == head) return &h;
  return nullptr;
}

EntropyAccumulator::EntropyAccumulator(HeadMask mask)
    : mask_(std::move(mask)), sums_(mask_.n_layers() * mask_.n_heads(), 0.0) {}

void EntropyAccumulator::add(const AttentionCapture& capture, const Batch& batch) {
  const std::size_t L = mask_.n_layers(), H = mask_.n_heads(), S = batch.seq;
  if (capture.layers.size() != L) throw std::invalid_argument("capture has the wrong layer count");
  for (std::size_t l = 0; l < L; ++l) {
    const Tensor& p = capture.layers[l];
    if (p.size() != batch.size * H * S * S) throw std::invalid_argument("capture shape mismatch");
    for (std::size_t b = 0; b < batch.size; ++b) {
      const std::uint8_t* valid = batch.valid.data() + b * S;
      std::size_t n_valid = 0;
      for (std::size_t s = 0; s < S; ++s) n_valid += valid[s] ? 1 : 0;
      if (n_valid == 0) throw std::invalid_argument("sentence without valid tokens");
      for (std::size_t h = 0; h < H; ++h) {
        if (!mask_.alive(l, h)) continue;
        const double* base = p.data() + ((b * H + h) * S) * S;
        double sentence = 0.0;
        for (std::size_t q = 0; q < S; ++q) {
          if (!valid[q]) continue;
          const double* row = base + q * S;
          // Renormalize over valid keys; padding already gets ~0 mass.
          double z = 0.0;
          for (std::size_t k = 0; k < S; ++k)
            if (valid[k]) z += row[k];
          double e = 0.0;
          for (std::size_t k = 0; k < S; ++k) {
            if (!valid[k]) continue;
            const double a = row[k] / z;
            if (a > 0.0) e -= a * std::log(a);
          }
          sentence += e;
        }
        sums_[l * H + h] += sentence / static_cast<double>(n_valid);
      }
    }
  }
  sentences_ += batch.size;
}

EntropyReport EntropyAccumulator::report() const {
  if (sentences_ == 0) throw std::invalid_argument("entropy needs at least one sentence");
  EntropyReport r;
  r.mask = mask_;
  r.sentences = sentences_;
  const std::size_t L = mask_.n_layers(), H = mask_.n_heads();
  r.layer_means.assign(L, kNaN);
  for (std::size_t l = 0; l < L; ++l) {
    double layer_sum = 0.0;
    std::size_t alive = 0;
    for (std::size_t h = 0; h < H; ++h) {
      if (!mask_.alive(l, h)) continue;
      const double e = sums_[l * H + h] / static_cast<double>(sentences_);
      r.heads.push_back({l, h, e});
      layer_sum += e;
      ++alive;
    }
    if (alive > 0) r.layer_means[l] = layer_sum / static_cast<double>(alive);
  }
  if (L % 3 == 0) r.band_means = band_means_of(r.heads, L);
  else r.band_means = {kNaN, kNaN, kNaN};
  return r;
}

EntropyReport attention_entropy(const EncoderModel& model, const HeadMask& mask,
                                const EncodedSet& set, std::size_t max_sentences,
                                std::size_t batch_size) {
  if (set.items.empty() || max_sentences == 0)
    throw std::invalid_argument("entropy needs at least one sentence");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  mask.check_matches(model.config());
  EntropyAccumulator acc(mask);
  const std::size_t n = std::min(max_sentences, set.items.size());
  for (std::size_t start = 0; start < n; start += batch_size) {
    const Batch batch = make_batch(set, start, std::min(n, start + batch_size));
    ModelPass pass(model, false);
    AttentionCapture capture;
    forward(pass, batch, mask, &capture);
    acc.add(capture, batch);
  }
  return acc.report();
}

EntropyDelta entropy_delta(const EntropyReport& before, const EntropyReport& after) {
  if (!(before.mask == after.mask))
    throw std::invalid_argument("entropy reports come from different head masks");
  EntropyDelta d;
  for (std::size_t i = 0; i < before.heads.size(); ++i) {
    const auto& b = before.heads[i];
    const auto& a = after.heads[i];
    d.heads.push_back({b.layer, b.head, a.entropy - b.entropy});
  }
  const std::size_t L = before.mask.n_layers();
  if (L % 3 == 0) d.band_means = band_means_of(d.heads, L);
  else d.band_means = {kNaN, kNaN, kNaN};
  return d;
}

std::vector<EmbeddingRow> export_embeddings(const EncoderModel& model, const HeadMask& mask,
                                            const std::vector<EncodedSet>& sets,
                                            const std::string& stage, std::size_t per_language,
                                            std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  mask.check_matches(model.config());
  const std::size_t d = model.config().d_model;
  std::vector<EmbeddingRow> rows;
  for (const auto& set : sets) {
    const std::size_t n = std::min(per_language, set.items.size());
    for (std::size_t start = 0; start < n; start += batch_size) {
      const Batch batch = make_batch(set, start, std::min(n, start + batch_size));
      ModelPass pass(model, false);
      const Tensor& hidden = pass.tape().value(forward(pass, batch, mask));
      for (std::size_t b = 0; b < batch.size; ++b) {
        const auto row = hidden.row(b * batch.seq);
        rows.push_back({set.language_id, stage, std::vector<double>(row.begin(), row.begin() + d)});
      }
    }
  }
  return rows;
}

void write_embeddings(const std::string& path, const std::vector<EmbeddingRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  const std::size_t d = rows.empty() ? 0 : rows.front().vector.size();
  out << "language_id\tstage";
  for (std::size_t i = 0; i < d; ++i) out << "\tv" << i;
  out << '\n';
  for (const auto& r : rows) {
    if (r.vector.size() != d) throw std::invalid_argument("embedding rows differ in dimension");
    out << r.language_id << '\t' << r.stage;
    for (double v : r.vector) out << '\t' << format_double(v);
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path);
}

std::vector<EmbeddingRow> read_embeddings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": missing header");
  const std::size_t d = split_tabs(line).size() - 2;
  std::vector<EmbeddingRow> rows;
  while (std::getline(in, line)) {
    const auto f = split_tabs(line);
    if (f.size() != d + 2) throw std::runtime_error(path + ": malformed row");
    EmbeddingRow r{f[0], f[1], {}};
    for (std::size_t i = 2; i < f.size(); ++i) r.vector.push_back(parse_double(f[i]));
    rows.push_back(std::move(r));
  }
  return rows;
}

const DropRow& DropTable::add(const std::string& policy, const std::string& group, double base,
                              double pruned) {
  rows_.push_back({policy, group, base, pruned, relative_drop(base, pruned)});
  return rows_.back();
}

const DropRow& DropTable::add_row(DropRow row) {
  rows_.push_back(std::move(row));
  return rows_.back();
}

const DropRow& DropTable::at(const std::string& policy, const std::string& group) const {
  for (const auto& r : rows_)
    if (r.policy == policy && r.group == group) return r;
  throw std::out_of_range("no drop recorded for " + policy + " / " + group);
}

void DropTable::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "policy,group,base_accuracy,pruned_accuracy,relative_drop_pct\n";
  for (const auto& r : rows_)
    out << r.policy << ',' << r.group << ',' << format_double(r.base) << ','
        << format_double(r.pruned) << ',' << format_double(r.drop) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path);
}

GroupMeans group_means(const std::map<std::string, double>& values,
                       const std::vector<langlab::ToyLanguageSpec>& suite) {
  std::map<std::string, std::pair<double, std::size_t>> fam, tier;
  for (const auto& spec : suite) {
    const auto it = values.find(spec.language_id);
    if (it == values.end()) continue;
    auto& f = fam[langlab::to_string(spec.family())];
    f.first += it->second;
    ++f.second;
    auto& t = tier[langlab::to_string(spec.tier)];
    t.first += it->second;
    ++t.second;
  }
  GroupMeans g;
  for (const auto& [k, v] : fam) g.by_family[k] = v.first / static_cast<double>(v.second);
  for (const auto& [k, v] : tier) g.by_tier[k] = v.first / static_cast<double>(v.second);
  return g;
}

}  // namespace headprune
