#pragma once

#include "diet/numerics/rng.hpp"
#include "diet/numerics/tensor.hpp"

namespace diet::num {

/// Normal samples with variance 2 / (fan_in + fan_out).
///
/// A 2-D shape is read as [fan_out, fan_in]. Higher ranks follow the
/// convolution convention [out_channels, in_channels, k...], where each fan is
/// scaled by the receptive-field size prod(k...).
Tensor init_xavier_normal(const Shape& shape, Rng& rng);

}  // namespace diet::num
