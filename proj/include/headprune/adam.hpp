#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "headprune/tensor.hpp"

namespace headprune {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment estimates, one pair per parameter tensor.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;
};

/// Bias-corrected Adam update. Moments are created on the first call.
/// A parameter whose gradient and moments are all zero is left bit-identical.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& config);

}  // namespace headprune
