#include "headprune/tape.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

namespace headprune {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

ConstMatrixMap as_matrix(const Tensor& t) {
  return ConstMatrixMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

MatrixMap as_matrix(Tensor& t) {
  return MatrixMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

constexpr double kGeluCoeff = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

}  // namespace

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::parameter(const Tensor& value) {
  Node n;
  n.external = &value;
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.external ? *n.external : n.owned;
}

const Tensor* Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.grad.empty() ? nullptr : &n.grad;
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.empty()) n.grad = Tensor(value(v).shape());
  return n.grad;
}

Var Tape::record(const char* op, Tensor value, bool requires_grad,
                 std::function<void(Var)> backward_fn) {
  require_finite(value, op);
  Node n;
  n.owned = std::move(value);
  n.requires_grad = record_ && requires_grad;
  if (n.requires_grad) n.backward_fn = std::move(backward_fn);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  if (!record_) throw std::logic_error("backward on a non-recording tape");
  if (value(loss).size() != 1) throw ShapeError("backward: loss must be a scalar");
  backward_order_.clear();
  grad_buffer(loss)[0] += 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward_fn || n.grad.empty()) continue;
    backward_order_.push_back(i);
    n.backward_fn(Var{i});
  }
}

void softmax_inplace(std::span<double> row) {
  if (row.empty()) return;
  const double mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : row) v /= sum;
}

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluCoeff * x * x * x)));
}

namespace ops {

static bool any_grad(const Tape& t, std::initializer_list<Var> vars) {
  return std::any_of(vars.begin(), vars.end(), [&](Var v) { return t.requires_grad(v); });
}

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  if (av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_string(av.shape()) + " x " +
                     shape_string(bv.shape()));
  }
  Tensor out({av.dim(0), bv.dim(1)});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  return t.record("matmul", std::move(out), any_grad(t, {a, b}), [&t, a, b](Var self) {
    const auto g = as_matrix(*t.grad(self));
    if (t.requires_grad(a)) as_matrix(t.grad_buffer(a)).noalias() += g * as_matrix(t.value(b)).transpose();
    if (t.requires_grad(b)) as_matrix(t.grad_buffer(b)).noalias() += as_matrix(t.value(a)).transpose() * g;
  });
}

Var matmul_nt(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_matrix(av, "matmul_nt");
  require_matrix(bv, "matmul_nt");
  if (av.dim(1) != bv.dim(1)) {
    throw ShapeError("matmul_nt: inner dimensions disagree " + shape_string(av.shape()) +
                     " x " + shape_string(bv.shape()) + "^T");
  }
  Tensor out({av.dim(0), bv.dim(0)});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv).transpose();
  return t.record("matmul_nt", std::move(out), any_grad(t, {a, b}), [&t, a, b](Var self) {
    const auto g = as_matrix(*t.grad(self));
    if (t.requires_grad(a)) as_matrix(t.grad_buffer(a)).noalias() += g * as_matrix(t.value(b));
    if (t.requires_grad(b)) as_matrix(t.grad_buffer(b)).noalias() += g.transpose() * as_matrix(t.value(a));
  });
}

Var linear(Tape& t, Var x, Var w, Var bias) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const Tensor& bv = t.value(bias);
  require_matrix(wv, "linear");
  if (xv.cols() != wv.dim(0) || bv.size() != wv.dim(1)) {
    throw ShapeError("linear: " + shape_string(xv.shape()) + " x " + shape_string(wv.shape()) +
                     " + " + shape_string(bv.shape()));
  }
  Shape out_shape = xv.shape();
  out_shape.back() = wv.dim(1);
  Tensor out(out_shape);
  auto om = as_matrix(out);
  om.noalias() = as_matrix(xv) * as_matrix(wv);
  om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data(), static_cast<Eigen::Index>(bv.size()));
  return t.record("linear", std::move(out), any_grad(t, {x, w, bias}), [&t, x, w, bias](Var self) {
    const auto g = as_matrix(*t.grad(self));
    if (t.requires_grad(x)) as_matrix(t.grad_buffer(x)).noalias() += g * as_matrix(t.value(w)).transpose();
    if (t.requires_grad(w)) as_matrix(t.grad_buffer(w)).noalias() += as_matrix(t.value(x)).transpose() * g;
    if (t.requires_grad(bias)) {
      Tensor& gb = t.grad_buffer(bias);
      Eigen::Map<Eigen::RowVectorXd>(gb.data(), static_cast<Eigen::Index>(gb.size())) += g.colwise().sum();
    }
  });
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "add");
  Tensor out = av;
  out.add_inplace(bv);
  return t.record("add", std::move(out), any_grad(t, {a, b}), [&t, a, b](Var self) {
    const Tensor& g = *t.grad(self);
    if (t.requires_grad(a)) t.grad_buffer(a).add_inplace(g);
    if (t.requires_grad(b)) t.grad_buffer(b).add_inplace(g);
  });
}

Var add_row(Tape& t, Var x, Var row) {
  const Tensor& xv = t.value(x);
  const Tensor& rv = t.value(row);
  if (rv.size() != xv.cols()) {
    throw ShapeError("add_row: " + shape_string(xv.shape()) + " + " + shape_string(rv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto dst = out.row(r);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += rv[c];
  }
  return t.record("add_row", std::move(out), any_grad(t, {x, row}), [&t, x, row](Var self) {
    const Tensor& g = *t.grad(self);
    if (t.requires_grad(x)) t.grad_buffer(x).add_inplace(g);
    if (t.requires_grad(row)) {
      Tensor& gr = t.grad_buffer(row);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto src = g.row(r);
        for (std::size_t c = 0; c < src.size(); ++c) gr[c] += src[c];
      }
    }
  });
}

Var gelu(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = gelu_value(xv[i]);
  return t.record("gelu", std::move(out), t.requires_grad(x), [&t, x](Var self) {
    const Tensor& g = *t.grad(self);
    const Tensor& xv = t.value(x);
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double z = xv[i];
      const double inner = kSqrt2OverPi * (z + kGeluCoeff * z * z * z);
      const double th = std::tanh(inner);
      const double d_inner = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * z * z);
      gx[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * d_inner);
    }
  });
}

Var tanh(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::tanh(xv[i]);
  return t.record("tanh", std::move(out), t.requires_grad(x), [&t, x](Var self) {
    const Tensor& g = *t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var softmax_rows(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  require_finite(xv, "softmax_rows input");
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
  return t.record("softmax_rows", std::move(out), t.requires_grad(x), [&t, x](Var self) {
    const Tensor& g = *t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = g.row(r);
      auto dst = gx.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * gr[c];
      for (std::size_t c = 0; c < yr.size(); ++c) dst[c] += yr[c] * (gr[c] - dot);
    }
  });
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gain);
  const Tensor& bv = t.value(bias);
  const std::size_t d = xv.cols();
  if (gv.size() != d || bv.size() != d) {
    throw ShapeError("layer_norm: feature size " + std::to_string(d) + " vs gain " +
                     shape_string(gv.shape()) + ", bias " + shape_string(bv.shape()));
  }
  const std::size_t n = xv.rows();
  auto normalized = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(n);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < n; ++r) {
    auto src = xv.row(r);
    double mean = 0.0;
    for (double v : src) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : src) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    auto xhat = normalized->row(r);
    auto dst = out.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[c] = (src[c] - mean) * is;
      dst[c] = gv[c] * xhat[c] + bv[c];
    }
  }
  return t.record("layer_norm", std::move(out), any_grad(t, {x, gain, bias}),
                  [&t, x, gain, bias, normalized, inv_std](Var self) {
                    const Tensor& g = *t.grad(self);
                    const Tensor& gv = t.value(gain);
                    const std::size_t d = g.cols();
                    std::vector<double> dxhat(d);
                    for (std::size_t r = 0; r < g.rows(); ++r) {
                      auto gr = g.row(r);
                      auto xhat = normalized->row(r);
                      if (t.requires_grad(gain)) {
                        Tensor& gg = t.grad_buffer(gain);
                        for (std::size_t c = 0; c < d; ++c) gg[c] += gr[c] * xhat[c];
                      }
                      if (t.requires_grad(bias)) {
                        Tensor& gb = t.grad_buffer(bias);
                        for (std::size_t c = 0; c < d; ++c) gb[c] += gr[c];
                      }
                      if (!t.requires_grad(x)) continue;
                      double mean_d = 0.0;
                      double mean_dx = 0.0;
                      for (std::size_t c = 0; c < d; ++c) {
                        dxhat[c] = gr[c] * gv[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat[c];
                      }
                      mean_d /= static_cast<double>(d);
                      mean_dx /= static_cast<double>(d);
                      auto dst = t.grad_buffer(x).row(r);
                      const double is = (*inv_std)[r];
                      for (std::size_t c = 0; c < d; ++c) {
                        dst[c] += is * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                      }
                    }
                  });
}

Var cross_entropy(Tape& t, Var logits, std::span<const int> labels) {
  const Tensor& lv = t.value(logits);
  require_matrix(lv, "cross_entropy");
  const std::size_t b = lv.dim(0);
  const std::size_t classes = lv.dim(1);
  if (labels.size() != b) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(b) + " rows");
  }
  auto probs = std::make_shared<Tensor>(lv);
  std::vector<int> targets(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    const int y = targets[r];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
    auto src = lv.row(r);
    const double mx = *std::max_element(src.begin(), src.end());
    double sum = 0.0;
    for (double v : src) sum += std::exp(v - mx);
    loss += mx + std::log(sum) - src[static_cast<std::size_t>(y)];
    softmax_inplace(probs->row(r));
  }
  loss /= static_cast<double>(b);
  return t.record("cross_entropy", Tensor({1}, {loss}), t.requires_grad(logits),
                  [&t, logits, probs, targets](Var self) {
                    const double g = (*t.grad(self))[0] / static_cast<double>(targets.size());
                    Tensor& gl = t.grad_buffer(logits);
                    for (std::size_t r = 0; r < targets.size(); ++r) {
                      auto p = probs->row(r);
                      auto dst = gl.row(r);
                      for (std::size_t c = 0; c < p.size(); ++c) dst[c] += g * p[c];
                      dst[static_cast<std::size_t>(targets[r])] -= g;
                    }
                  });
}

Var gather_rows(Tape& t, Var table, std::span<const std::size_t> rows) {
  const Tensor& tv = t.value(table);
  require_matrix(tv, "gather_rows");
  if (rows.empty()) throw ShapeError("gather_rows: no rows requested");
  const std::size_t d = tv.dim(1);
  Tensor out({rows.size(), d});
  std::vector<std::size_t> index(rows.begin(), rows.end());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= tv.dim(0)) {
      throw std::out_of_range("gather_rows: row " + std::to_string(index[i]) + " outside table of " +
                              std::to_string(tv.dim(0)));
    }
    std::copy_n(tv.row(index[i]).data(), d, out.row(i).data());
  }
  return t.record("gather_rows", std::move(out), t.requires_grad(table),
                  [&t, table, index = std::move(index)](Var self) {
                    const Tensor& g = *t.grad(self);
                    Tensor& gt = t.grad_buffer(table);
                    for (std::size_t i = 0; i < index.size(); ++i) {
                      auto src = g.row(i);
                      auto dst = gt.row(index[i]);
                      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                    }
                  });
}

Var weighted_sum(Tape& t, Var x, const Tensor& weights) {
  const Tensor& xv = t.value(x);
  if (xv.size() != weights.size()) throw ShapeError("weighted_sum: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * weights[i];
  return t.record("weighted_sum", Tensor({1}, {s}), t.requires_grad(x), [&t, x, weights](Var self) {
    const double g = (*t.grad(self))[0];
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * weights[i];
  });
}

Var multi_head_attention(Tape& t, Var q, Var k, Var v, const AttentionShape& shape,
                         std::span<const std::uint8_t> key_valid,
                         std::span<const double> head_scale, Tensor* probs_out) {
  const Tensor& qv = t.value(q);
  const Tensor& kv = t.value(k);
  const Tensor& vv = t.value(v);
  require_same_shape(qv, kv, "multi_head_attention");
  require_same_shape(qv, vv, "multi_head_attention");
  const std::size_t B = shape.batch;
  const std::size_t S = shape.seq;
  const std::size_t H = shape.heads;
  const std::size_t d = qv.cols();
  if (qv.rows() != B * S || H == 0 || d % H != 0) {
    throw ShapeError("multi_head_attention: inputs " + shape_string(qv.shape()) +
                     " incompatible with batch " + std::to_string(B) + ", seq " +
                     std::to_string(S) + ", heads " + std::to_string(H));
  }
  if (key_valid.size() != B * S || head_scale.size() != H) {
    throw ShapeError("multi_head_attention: mask sizes do not match batch/heads");
  }
  const std::size_t dh = d / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[b][h][i][j]
  auto probs = std::make_shared<std::vector<double>>(B * H * S * S, 0.0);
  Tensor out({B * S, d});
  std::vector<double> scores(S);
  for (std::size_t b = 0; b < B; ++b) {
    const std::uint8_t* valid = key_valid.data() + b * S;
    for (std::size_t h = 0; h < H; ++h) {
      const double scale = head_scale[h];
      if (scale == 0.0 && probs_out == nullptr) continue;
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < S; ++i) {
        const double* qi = qv.data() + (b * S + i) * d + off;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < S; ++j) {
          if (!valid[j]) continue;
          const double* kj = kv.data() + (b * S + j) * d + off;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        double* p = probs->data() + ((b * H + h) * S + i) * S;
        double sum = 0.0;
        for (std::size_t j = 0; j < S; ++j) {
          if (!valid[j]) continue;
          p[j] = std::exp(scores[j] - mx);
          sum += p[j];
        }
        if (sum == 0.0) continue;  // sequence with no valid keys
        for (std::size_t j = 0; j < S; ++j) p[j] /= sum;
        if (scale == 0.0) continue;
        double* oi = out.data() + (b * S + i) * d + off;
        for (std::size_t j = 0; j < S; ++j) {
          if (p[j] == 0.0) continue;
          const double w = p[j] * scale;
          const double* vj = vv.data() + (b * S + j) * d + off;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
    }
  }
  if (probs_out) *probs_out = Tensor({B, H, S, S}, *probs);

  std::vector<double> scales(head_scale.begin(), head_scale.end());
  return t.record(
      "multi_head_attention", std::move(out), any_grad(t, {q, k, v}),
      [&t, q, k, v, B, S, H, dh, d, inv_sqrt, probs, scales = std::move(scales)](Var self) {
        const Tensor& g = *t.grad(self);
        const Tensor& qv = t.value(q);
        const Tensor& kv = t.value(k);
        const Tensor& vv = t.value(v);
        Tensor& gq = t.grad_buffer(q);
        Tensor& gk = t.grad_buffer(k);
        Tensor& gv = t.grad_buffer(v);
        std::vector<double> dp(S);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            const double scale = scales[h];
            if (scale == 0.0) continue;
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < S; ++i) {
              const double* p = probs->data() + ((b * H + h) * S + i) * S;
              const double* gi = g.data() + (b * S + i) * d + off;
              double dot = 0.0;
              for (std::size_t j = 0; j < S; ++j) {
                dp[j] = 0.0;
                if (p[j] == 0.0) continue;
                const double* vj = vv.data() + (b * S + j) * d + off;
                double* gvj = gv.data() + (b * S + j) * d + off;
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                  acc += gi[c] * vj[c];
                  gvj[c] += p[j] * scale * gi[c];
                }
                dp[j] = acc * scale;
                dot += p[j] * dp[j];
              }
              const double* qi = qv.data() + (b * S + i) * d + off;
              double* gqi = gq.data() + (b * S + i) * d + off;
              for (std::size_t j = 0; j < S; ++j) {
                if (p[j] == 0.0) continue;
                const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                const double* kj = kv.data() + (b * S + j) * d + off;
                double* gkj = gk.data() + (b * S + j) * d + off;
                for (std::size_t c = 0; c < dh; ++c) {
                  gqi[c] += ds * kj[c];
                  gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace ops
}  // namespace headprune
