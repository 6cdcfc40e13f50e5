#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "apaseg/autograd.hpp"

namespace apaseg {

/// Seeded uniform fan-in initializer: values in +-sqrt(1 / fan_in).
/// Uses its own bits-to-double mapping so parameters are identical for a
/// given seed regardless of the standard library's distributions.
class UniformInit {
 public:
  explicit UniformInit(std::uint64_t seed) : engine_(seed) {}

  double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  template <typename T>
  Var<T> param(const Shape& shape, Index fan_in) {
    const double bound = std::sqrt(1.0 / static_cast<double>(std::max<Index>(1, fan_in)));
    Tensor<T> t(shape, T{0});
    for (auto& v : t.data()) v = static_cast<T>((2.0 * unit() - 1.0) * bound);
    return make_param(std::move(t));
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace apaseg
