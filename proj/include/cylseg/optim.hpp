#pragma once

#include <cstdint>

#include "cylseg/common.hpp"

namespace cylseg {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamOptions options;
  TensorMap first_moment;
  TensorMap second_moment;
  int64_t step = 0;
};

// Bias-corrected Adam over every entry of `params`. Moment buffers are
// created lazily with matching shapes; a gradient missing for some parameter
// or mis-shaped throws ShapeError.
void adam_step(TensorMap& params, const TensorMap& grads, AdamState& state);

}  // namespace cylseg
