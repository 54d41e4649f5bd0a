#include "headprune/encoder.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "headprune/rng.hpp"

namespace headprune {

namespace {

constexpr double kInitStd = 0.02;
constexpr std::size_t kEmbeddingParams = 5;
constexpr std::size_t kLayerParams = 16;

// Offsets inside a layer's parameter block, matching LayerWeights order.
enum LayerSlot : std::size_t {
  kQueryW, kQueryB, kKeyW, kKeyB, kValueW, kValueB, kOutputW, kOutputB,
  kAttnNormGain, kAttnNormBias, kFfInW, kFfInB, kFfOutW, kFfOutB, kFfNormGain, kFfNormBias,
};

std::size_t layer_param(std::size_t layer, LayerSlot slot) {
  return kEmbeddingParams + layer * kLayerParams + slot;
}

std::size_t head_param(const ModelConfig& c, std::size_t slot) {
  return kEmbeddingParams + c.n_layers * kLayerParams + slot;
}

enum HeadSlot : std::size_t { kPoolerW, kPoolerB, kMlmBias, kClassifierW, kClassifierB };

template <typename Weights, typename Named>
std::vector<Named> list_parameters(Weights& w) {
  std::vector<Named> out;
  out.push_back({"embeddings.token", &w.token_embedding});
  out.push_back({"embeddings.position", &w.position_embedding});
  out.push_back({"embeddings.segment", &w.segment_embedding});
  out.push_back({"embeddings.norm.gain", &w.embed_norm_gain});
  out.push_back({"embeddings.norm.bias", &w.embed_norm_bias});
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layer." + std::to_string(l + 1) + ".";
    out.push_back({p + "attention.query.weight", &L.query_w});
    out.push_back({p + "attention.query.bias", &L.query_b});
    out.push_back({p + "attention.key.weight", &L.key_w});
    out.push_back({p + "attention.key.bias", &L.key_b});
    out.push_back({p + "attention.value.weight", &L.value_w});
    out.push_back({p + "attention.value.bias", &L.value_b});
    out.push_back({p + "attention.output.weight", &L.output_w});
    out.push_back({p + "attention.output.bias", &L.output_b});
    out.push_back({p + "attention.norm.gain", &L.attn_norm_gain});
    out.push_back({p + "attention.norm.bias", &L.attn_norm_bias});
    out.push_back({p + "ffn.in.weight", &L.ff_in_w});
    out.push_back({p + "ffn.in.bias", &L.ff_in_b});
    out.push_back({p + "ffn.out.weight", &L.ff_out_w});
    out.push_back({p + "ffn.out.bias", &L.ff_out_b});
    out.push_back({p + "ffn.norm.gain", &L.ff_norm_gain});
    out.push_back({p + "ffn.norm.bias", &L.ff_norm_bias});
  }
  out.push_back({"pooler.weight", &w.pooler_w});
  out.push_back({"pooler.bias", &w.pooler_b});
  out.push_back({"mlm.bias", &w.mlm_bias});
  out.push_back({"classifier.weight", &w.classifier_w});
  out.push_back({"classifier.bias", &w.classifier_b});
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelConfig / HeadMask

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("n_layers must be at least 1");
  if (n_heads < 1) throw ConfigError("n_heads must be at least 1");
  if (d_model == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (d_ff == 0) throw ConfigError("d_ff must be positive");
  if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
  if (max_seq_len == 0) throw ConfigError("max_seq_len must be positive");
  if (n_classes < 2) throw ConfigError("n_classes must be at least 2");
  if (type_vocab_size != 2) throw ConfigError("type_vocab_size must be 2");
}

HeadMask::HeadMask(std::size_t n_layers, std::size_t n_heads, bool alive)
    : n_layers_(n_layers),
      n_heads_(n_heads),
      pruned_(alive ? 0 : n_layers * n_heads),
      scale_(n_layers * n_heads, alive ? 1.0 : 0.0) {}

bool HeadMask::alive(std::size_t layer, std::size_t head) const {
  if (layer >= n_layers_ || head >= n_heads_) throw std::out_of_range("HeadMask index out of range");
  return scale_[layer * n_heads_ + head] != 0.0;
}

void HeadMask::set(std::size_t layer, std::size_t head, bool alive) {
  if (layer >= n_layers_ || head >= n_heads_) throw std::out_of_range("HeadMask index out of range");
  double& s = scale_[layer * n_heads_ + head];
  const bool was_alive = s != 0.0;
  if (was_alive == alive) return;
  s = alive ? 1.0 : 0.0;
  if (alive) {
    --pruned_;
  } else {
    ++pruned_;
  }
}

void HeadMask::prune_layer(std::size_t layer) {
  for (std::size_t h = 0; h < n_heads_; ++h) set(layer, h, false);
}

std::size_t HeadMask::alive_in_layer(std::size_t layer) const {
  const auto s = layer_scale(layer);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), 1.0));
}

std::span<const double> HeadMask::layer_scale(std::size_t layer) const {
  if (layer >= n_layers_) throw std::out_of_range("HeadMask layer out of range");
  return {scale_.data() + layer * n_heads_, n_heads_};
}

void HeadMask::check_matches(const ModelConfig& config) const {
  if (n_layers_ != config.n_layers || n_heads_ != config.n_heads) {
    throw ConfigError("head mask is " + std::to_string(n_layers_) + "x" + std::to_string(n_heads_) +
                      " but the model has " + std::to_string(config.n_layers) + " layers x " +
                      std::to_string(config.n_heads) + " heads");
  }
}

std::string HeadMask::to_string() const {
  std::string out;
  for (std::size_t l = 0; l < n_layers_; ++l) {
    if (l) out += '/';
    for (std::size_t h = 0; h < n_heads_; ++h) out += alive(l, h) ? '1' : '0';
  }
  return out;
}

HeadMask HeadMask::parse(const std::string& text) {
  std::vector<std::string> rows;
  std::stringstream ss(text);
  std::string row;
  while (std::getline(ss, row, '/')) rows.push_back(row);
  if (rows.empty() || rows[0].empty()) throw ConfigError("empty head mask");
  HeadMask mask(rows.size(), rows[0].size());
  for (std::size_t l = 0; l < rows.size(); ++l) {
    if (rows[l].size() != mask.n_heads_) throw ConfigError("ragged head mask: " + text);
    for (std::size_t h = 0; h < rows[l].size(); ++h) {
      const char c = rows[l][h];
      if (c != '0' && c != '1') throw ConfigError("head mask characters must be 0/1: " + text);
      mask.set(l, h, c == '1');
    }
  }
  return mask;
}

// ---------------------------------------------------------------------------
// EncoderModel

EncoderModel::EncoderModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config.d_model;
  auto normal = [&](Shape s) { return Tensor::randn(std::move(s), rng, kInitStd); };
  auto& w = weights_;
  w.token_embedding = normal({config.vocab_size, d});
  w.position_embedding = normal({config.max_seq_len, d});
  w.segment_embedding = normal({config.type_vocab_size, d});
  w.embed_norm_gain = Tensor({d}, 1.0);
  w.embed_norm_bias = Tensor({d});
  w.layers.resize(config.n_layers);
  for (auto& L : w.layers) {
    L.query_w = normal({d, d});
    L.query_b = Tensor({d});
    L.key_w = normal({d, d});
    L.key_b = Tensor({d});
    L.value_w = normal({d, d});
    L.value_b = Tensor({d});
    L.output_w = normal({d, d});
    L.output_b = Tensor({d});
    L.attn_norm_gain = Tensor({d}, 1.0);
    L.attn_norm_bias = Tensor({d});
    L.ff_in_w = normal({d, config.d_ff});
    L.ff_in_b = Tensor({config.d_ff});
    L.ff_out_w = normal({config.d_ff, d});
    L.ff_out_b = Tensor({d});
    L.ff_norm_gain = Tensor({d}, 1.0);
    L.ff_norm_bias = Tensor({d});
  }
  w.pooler_w = normal({d, d});
  w.pooler_b = Tensor({d});
  w.mlm_bias = Tensor({config.vocab_size});
  reinitialize_classifier(derive_seed(seed, "classifier"));
}

void EncoderModel::reinitialize_classifier(std::uint64_t seed) {
  Rng rng(seed);
  weights_.classifier_w = Tensor::randn({config_.d_model, config_.n_classes}, rng, kInitStd);
  weights_.classifier_b = Tensor({config_.n_classes});
}

std::vector<NamedTensor> EncoderModel::parameters() {
  return list_parameters<EncoderWeights, NamedTensor>(weights_);
}

std::vector<ConstNamedTensor> EncoderModel::parameters() const {
  return list_parameters<const EncoderWeights, ConstNamedTensor>(weights_);
}

std::size_t EncoderModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor->size();
  return n;
}

std::size_t EncoderModel::parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t per_layer = 4 * (d * d + d) + 2 * 2 * d + (d * c.d_ff + c.d_ff) + (c.d_ff * d + d);
  return (c.vocab_size + c.max_seq_len + c.type_vocab_size) * d + 2 * d + c.n_layers * per_layer +
         (d * d + d) + c.vocab_size + (d * c.n_classes + c.n_classes);
}

bool operator==(const EncoderModel& a, const EncoderModel& b) {
  if (!(a.config_ == b.config_)) return false;
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const Tensor& x = *pa[i].tensor;
    const Tensor& y = *pb[i].tensor;
    if (x.shape() != y.shape()) return false;
    // Bitwise, so -0.0 != 0.0 and NaN payloads count.
    if (std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

// Checkpoint layout:
//   line 1: "headprune-checkpoint 1"
//   config lines "key value" for every ModelConfig field, then "parameters N"
//   per parameter: "name rank d0 d1 ...\n" followed by prod(dims) IEEE-754
//   binary64 values, little-endian.
namespace {

constexpr const char* kCheckpointMagic = "headprune-checkpoint";
constexpr int kCheckpointVersion = 1;

void write_le_doubles(std::ostream& out, const Tensor& t) {
  static_assert(sizeof(double) == 8);
  std::vector<unsigned char> buf(t.size() * 8);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(t[i]);
    for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void read_le_doubles(std::istream& in, Tensor& t) {
  std::vector<unsigned char> buf(t.size() * 8);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw std::runtime_error("checkpoint truncated");
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[i * 8 + b]) << (8 * b);
    t[i] = std::bit_cast<double>(bits);
  }
}

std::size_t read_field(std::istream& in, const char* key) {
  std::string k;
  std::size_t v = 0;
  if (!(in >> k >> v) || k != key) {
    throw std::runtime_error(std::string("checkpoint: expected field '") + key + "'");
  }
  return v;
}

}  // namespace

void EncoderModel::save(std::ostream& out) const {
  const auto& c = config_;
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n'
      << "n_layers " << c.n_layers << '\n'
      << "n_heads " << c.n_heads << '\n'
      << "d_model " << c.d_model << '\n'
      << "d_ff " << c.d_ff << '\n'
      << "vocab_size " << c.vocab_size << '\n'
      << "max_seq_len " << c.max_seq_len << '\n'
      << "n_classes " << c.n_classes << '\n'
      << "type_vocab_size " << c.type_vocab_size << '\n';
  const auto params = parameters();
  out << "parameters " << params.size() << '\n';
  for (const auto& p : params) {
    out << p.name << ' ' << p.tensor->rank();
    for (auto dim : p.tensor->shape()) out << ' ' << dim;
    out << '\n';
    write_le_doubles(out, *p.tensor);
  }
  if (!out) throw std::runtime_error("checkpoint write failed");
}

EncoderModel EncoderModel::load(std::istream& in) {
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != kCheckpointMagic) {
    throw std::runtime_error("not a headprune checkpoint");
  }
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig c;
  c.n_layers = read_field(in, "n_layers");
  c.n_heads = read_field(in, "n_heads");
  c.d_model = read_field(in, "d_model");
  c.d_ff = read_field(in, "d_ff");
  c.vocab_size = read_field(in, "vocab_size");
  c.max_seq_len = read_field(in, "max_seq_len");
  c.n_classes = read_field(in, "n_classes");
  c.type_vocab_size = read_field(in, "type_vocab_size");
  c.validate();
  const std::size_t count = read_field(in, "parameters");

  EncoderModel model(c, 0);
  auto params = model.parameters();
  if (count != params.size()) throw std::runtime_error("checkpoint parameter count mismatch");
  for (auto& p : params) {
    std::string name;
    std::size_t rank = 0;
    in >> name >> rank;
    Shape shape(rank);
    for (auto& dim : shape) in >> dim;
    if (!in || name != p.name || shape != p.tensor->shape()) {
      throw std::runtime_error("checkpoint: unexpected parameter block '" + name + "'");
    }
    if (in.get() != '\n') throw std::runtime_error("checkpoint: malformed block header");
    read_le_doubles(in, *p.tensor);
  }
  return model;
}

void EncoderModel::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  save(out);
}

EncoderModel EncoderModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path);
  return load(in);
}

// ---------------------------------------------------------------------------
// Batches and passes

Batch Batch::from_sequences(std::span<const std::vector<int>> sequences,
                            std::span<const std::vector<int>> segments, int pad_id) {
  if (sequences.empty()) throw ShapeError("empty batch");
  if (segments.size() != sequences.size()) throw ShapeError("segments/sequences count mismatch");
  Batch b;
  b.size = sequences.size();
  for (const auto& s : sequences) b.seq = std::max(b.seq, s.size());
  if (b.seq == 0) throw ShapeError("batch of empty sequences");
  b.tokens.assign(b.size * b.seq, pad_id);
  b.segments.assign(b.size * b.seq, 0);
  b.valid.assign(b.size * b.seq, 0);
  for (std::size_t i = 0; i < b.size; ++i) {
    if (segments[i].size() != sequences[i].size()) throw ShapeError("segment ids length mismatch");
    for (std::size_t j = 0; j < sequences[i].size(); ++j) {
      b.tokens[i * b.seq + j] = sequences[i][j];
      b.segments[i * b.seq + j] = segments[i][j];
      b.valid[i * b.seq + j] = 1;
    }
  }
  return b;
}

ModelPass::ModelPass(const EncoderModel& model, bool record_gradients)
    : model_(model), tape_(record_gradients) {
  for (const auto& p : model.parameters()) params_.push_back(tape_.parameter(*p.tensor));
}

std::vector<Tensor> ModelPass::gradients() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (Var v : params_) {
    const Tensor* g = tape_.grad(v);
    out.push_back(g ? *g : Tensor(tape_.value(v).shape()));
  }
  return out;
}

Var forward(ModelPass& pass, const Batch& batch, const HeadMask& mask, AttentionCapture* capture) {
  const ModelConfig& c = pass.model().config();
  mask.check_matches(c);
  if (batch.seq > c.max_seq_len) {
    throw ShapeError("sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                     std::to_string(c.max_seq_len));
  }
  const std::size_t n = batch.size * batch.seq;
  if (batch.tokens.size() != n || batch.segments.size() != n || batch.valid.size() != n) {
    throw ShapeError("batch arrays do not match size x seq");
  }
  std::vector<std::size_t> tok(n), pos(n), seg(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (batch.tokens[i] < 0 || static_cast<std::size_t>(batch.tokens[i]) >= c.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(batch.tokens[i]) + " outside vocabulary");
    }
    if (batch.segments[i] < 0 || static_cast<std::size_t>(batch.segments[i]) >= c.type_vocab_size) {
      throw std::out_of_range("segment id outside [0, 2)");
    }
    tok[i] = static_cast<std::size_t>(batch.tokens[i]);
    pos[i] = i % batch.seq;
    seg[i] = static_cast<std::size_t>(batch.segments[i]);
  }

  Tape& t = pass.tape();
  Var h = ops::add(t, ops::gather_rows(t, pass.param(0), tok), ops::gather_rows(t, pass.param(1), pos));
  h = ops::add(t, h, ops::gather_rows(t, pass.param(2), seg));
  h = ops::layer_norm(t, h, pass.param(3), pass.param(4));

  if (capture) capture->layers.assign(c.n_layers, Tensor());
  const ops::AttentionShape shape{batch.size, batch.seq, c.n_heads};
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    auto P = [&](LayerSlot s) { return pass.param(layer_param(l, s)); };
    Var q = ops::linear(t, h, P(kQueryW), P(kQueryB));
    Var k = ops::linear(t, h, P(kKeyW), P(kKeyB));
    Var v = ops::linear(t, h, P(kValueW), P(kValueB));
    Var ctx = ops::multi_head_attention(t, q, k, v, shape, batch.valid, mask.layer_scale(l),
                                        capture ? &capture->layers[l] : nullptr);
    Var attn = ops::linear(t, ctx, P(kOutputW), P(kOutputB));
    h = ops::layer_norm(t, ops::add(t, h, attn), P(kAttnNormGain), P(kAttnNormBias));
    Var ff = ops::gelu(t, ops::linear(t, h, P(kFfInW), P(kFfInB)));
    ff = ops::linear(t, ff, P(kFfOutW), P(kFfOutB));
    h = ops::layer_norm(t, ops::add(t, h, ff), P(kFfNormGain), P(kFfNormBias));
  }
  return h;
}

Var pooled(ModelPass& pass, Var hidden, const Batch& batch) {
  const ModelConfig& c = pass.model().config();
  Tape& t = pass.tape();
  std::vector<std::size_t> first(batch.size);
  for (std::size_t b = 0; b < batch.size; ++b) first[b] = b * batch.seq;
  Var cls = ops::gather_rows(t, hidden, first);
  return ops::tanh(t, ops::linear(t, cls, pass.param(head_param(c, kPoolerW)),
                                  pass.param(head_param(c, kPoolerB))));
}

Var classify(ModelPass& pass, const Batch& batch, const HeadMask& mask) {
  const ModelConfig& c = pass.model().config();
  Var h = forward(pass, batch, mask);
  Var p = pooled(pass, h, batch);
  return ops::linear(pass.tape(), p, pass.param(head_param(c, kClassifierW)),
                     pass.param(head_param(c, kClassifierB)));
}

Var mlm_logits(ModelPass& pass, const Batch& batch, const HeadMask& mask,
               std::span<const std::size_t> positions) {
  const ModelConfig& c = pass.model().config();
  Tape& t = pass.tape();
  Var h = forward(pass, batch, mask);
  if (!positions.empty()) h = ops::gather_rows(t, h, positions);
  Var logits = ops::matmul_nt(t, h, pass.param(0));
  return ops::add_row(t, logits, pass.param(head_param(c, kMlmBias)));
}

Var mlm_loss(ModelPass& pass, const Batch& batch, const HeadMask& mask,
             std::span<const std::size_t> positions, std::span<const int> targets) {
  if (positions.size() != targets.size()) throw ShapeError("mlm_loss: positions/targets mismatch");
  if (positions.empty()) return pass.tape().constant(Tensor({1}, 0.0));
  Var logits = mlm_logits(pass, batch, mask, positions);
  return ops::cross_entropy(pass.tape(), logits, targets);
}

bool head_gradient_is_zero(const EncoderModel& model, std::span<const Tensor> grads,
                           std::size_t layer, std::size_t head) {
  const ModelConfig& c = model.config();
  const std::size_t d = c.d_model;
  const std::size_t dh = c.head_dim();
  const std::size_t lo = head * dh;
  for (LayerSlot slot : {kQueryW, kKeyW, kValueW}) {
    const Tensor& g = grads[layer_param(layer, slot)];
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t col = lo; col < lo + dh; ++col)
        if (g.at(r, col) != 0.0) return false;
  }
  for (LayerSlot slot : {kQueryB, kKeyB, kValueB}) {
    const Tensor& g = grads[layer_param(layer, slot)];
    for (std::size_t col = lo; col < lo + dh; ++col)
      if (g[col] != 0.0) return false;
  }
  const Tensor& go = grads[layer_param(layer, kOutputW)];
  for (std::size_t r = lo; r < lo + dh; ++r)
    for (std::size_t col = 0; col < d; ++col)
      if (go.at(r, col) != 0.0) return false;
  return true;
}

std::vector<double> head_parameters(const EncoderModel& model, std::size_t layer, std::size_t head) {
  const ModelConfig& c = model.config();
  const auto& L = model.weights().layers.at(layer);
  const std::size_t dh = c.head_dim();
  const std::size_t lo = head * dh;
  std::vector<double> out;
  for (const Tensor* w : {&L.query_w, &L.key_w, &L.value_w})
    for (std::size_t r = 0; r < c.d_model; ++r)
      for (std::size_t col = lo; col < lo + dh; ++col) out.push_back(w->at(r, col));
  for (const Tensor* b : {&L.query_b, &L.key_b, &L.value_b})
    for (std::size_t col = lo; col < lo + dh; ++col) out.push_back((*b)[col]);
  for (std::size_t r = lo; r < lo + dh; ++r)
    for (std::size_t col = 0; col < c.d_model; ++col) out.push_back(L.output_w.at(r, col));
  return out;
}

std::vector<Tensor> backward_masked(ModelPass& pass, Var loss, const HeadMask& mask) {
  pass.tape().backward(loss);
  auto grads = pass.gradients();
  const ModelConfig& c = pass.model().config();
  for (std::size_t l = 0; l < c.n_layers; ++l)
    for (std::size_t h = 0; h < c.n_heads; ++h)
      if (!mask.alive(l, h) && !head_gradient_is_zero(pass.model(), grads, l, h)) {
        throw std::logic_error("pruned head (" + std::to_string(l + 1) + ", " + std::to_string(h) +
                               ") received a gradient");
      }
  return grads;
}

}  // namespace headprune
