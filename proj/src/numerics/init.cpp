#include "diet/numerics/init.hpp"

#include <cmath>

#include "diet/error.hpp"

namespace diet::num {

Tensor init_xavier_normal(const Shape& shape, Rng& rng) {
  if (shape.size() < 2) throw ShapeError("xavier init needs a 2-D or conv-style shape, got " + shape_string(shape));
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeError("xavier init: zero extent in " + shape_string(shape));
  }
  std::size_t receptive = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) receptive *= shape[i];
  const double fan_out = static_cast<double>(shape[0] * receptive);
  const double fan_in = static_cast<double>(shape[1] * receptive);
  const double stddev = std::sqrt(2.0 / (fan_in + fan_out));

  Tensor out(shape);
  for (double& v : out.data()) v = stddev * rng.normal();
  return out;
}

}  // namespace diet::num
