#include "priorecon/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace priorecon {

std::string to_string(Dims d) { return "(" + std::to_string(d.ny) + ", " + std::to_string(d.nz) + ")"; }

double ImageSlice::max_abs() const {
  double m = 0.0;
  for (double v : values()) m = std::max(m, std::abs(v));
  return m;
}

std::size_t SamplingMask::n_sampled() const {
  return static_cast<std::size_t>(std::count(mask.values().begin(), mask.values().end(), std::uint8_t{1}));
}

double SamplingMask::achieved_acceleration() const {
  const std::size_t n = n_sampled();
  if (n == 0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(mask.size()) / static_cast<double>(n);
}

} // namespace priorecon
