#include "ctgrader/nn/tensor.hpp"

#include <cmath>
#include <sstream>

namespace ctg::nn {

std::string Tensor::shape_str() const {
  std::ostringstream ss;
  ss << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) ss << 'x';
    ss << shape[i];
  }
  ss << ']';
  return ss.str();
}

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) throw ArgumentError("uniform_int needs n > 0");
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<int64_t>(x % un);
}

float Rng::normal() {
  if (have_cached_) {
    have_cached_ = false;
    return cached_;
  }
  // Box-Muller; u1 nudged away from zero so log() stays finite.
  const double u1 = uniform() + 1e-300;
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * M_PI * u2;
  cached_ = static_cast<float>(r * std::sin(a));
  have_cached_ = true;
  return static_cast<float>(r * std::cos(a));
}

}  // namespace ctg::nn
