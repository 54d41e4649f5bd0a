#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "headprune/tensor.hpp"

namespace headprune {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return id != static_cast<std::size_t>(-1); }
};

/// Reverse-mode recorder. A tape belongs to one forward/backward pass and is
/// never shared between threads; parameters are referenced, not copied, so
/// several tapes may read the same model concurrently.
class Tape {
 public:
  /// When `record` is false no backward closures are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor value);
  /// Gradient-tracked input that owns its value.
  Var variable(Tensor value);
  /// Gradient-tracked view of external storage; `value` must outlive the tape.
  Var parameter(const Tensor& value);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Accumulated gradient, or nullptr if none reached this node.
  const Tensor* grad(Var v) const;
  /// Gradient buffer for `v`, allocated as zeros on first use.
  Tensor& grad_buffer(Var v);

  /// Seeds d(loss)/d(loss) = 1 and replays ops in reverse execution order.
  void backward(Var loss);

  /// Records an op result. `backward_fn` reads grad(result) and accumulates
  /// into its inputs' grad buffers.
  /// Non-finite results throw NonFiniteError naming `op`.
  Var record(const char* op, Tensor value, bool requires_grad,
             std::function<void(Var)> backward_fn);

  std::size_t size() const { return nodes_.size(); }

  /// Sequence of node ids visited by the most recent backward().
  const std::vector<std::size_t>& last_backward_order() const { return backward_order_; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Var)> backward_fn;
  };

  bool record_;
  std::deque<Node> nodes_;
  std::vector<std::size_t> backward_order_;
};

namespace ops {

/// [m x k] * [k x n] -> [m x n].
Var matmul(Tape& t, Var a, Var b);
/// a * b^T for a [m x k], b [n x k] -> [m x n].
Var matmul_nt(Tape& t, Var a, Var b);
/// x [N x in] * w [in x out] + bias [out].
Var linear(Tape& t, Var x, Var w, Var bias);
Var add(Tape& t, Var a, Var b);
/// Adds a row vector [n] to every row of x [.. x n].
Var add_row(Tape& t, Var x, Var row);
Var gelu(Tape& t, Var x);
Var tanh(Tape& t, Var x);
Var softmax_rows(Tape& t, Var x);
Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-12);
/// Mean negative log-softmax of the labelled class over rows of logits [b x C].
Var cross_entropy(Tape& t, Var logits, std::span<const int> labels);
/// Gathers rows of `table` [V x d] by index into [n x d]; gradient scatter-adds.
Var gather_rows(Tape& t, Var table, std::span<const std::size_t> rows);
/// Scalar sum(x * weights), weights fixed.
Var weighted_sum(Tape& t, Var x, const Tensor& weights);

struct AttentionShape {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t heads = 0;
};

/// Scaled dot-product attention for all heads at once.
///
/// q, k, v are [batch*seq x d] with head h occupying columns
/// [h*d/heads, (h+1)*d/heads). `key_valid` has batch*seq entries; invalid
/// (padding) keys get zero probability. Each head's context is multiplied by
/// `head_scale[h]` before being written to the output, so a zero scale removes
/// the head and stops all gradient flow into its q/k/v slices.
///
/// If `probs_out` is non-null it receives the attention probabilities as a
/// [batch x heads x seq x seq] tensor (rows of padding queries included).
Var multi_head_attention(Tape& t, Var q, Var k, Var v, const AttentionShape& shape,
                         std::span<const std::uint8_t> key_valid,
                         std::span<const double> head_scale, Tensor* probs_out = nullptr);

}  // namespace ops

/// Row-wise numerically stable softmax (max subtraction) in place.
void softmax_inplace(std::span<double> row);

double gelu_value(double x);

}  // namespace headprune
