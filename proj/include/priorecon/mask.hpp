#pragma once

#include <cstdint>

#include "priorecon/types.hpp"

namespace priorecon {

struct PoissonMaskOptions {
  // r(d) = base_radius * (1 + radial_slope * d / d_max)
  double radial_slope = 2.0;
  int bisection_steps = 40;
  // After bisection the count is trimmed or topped up into this band around N/R.
  double count_tolerance = 0.02;
};

// Grid center used for the fully sampled disc; coincides with the DC bin.
inline int center_index(int n) { return n / 2; }

bool in_center_disc(int y, int z, Dims dims, int radius);
std::size_t center_disc_count(Dims dims, int radius);

// Variable-density Poisson-disc mask with a fully sampled center disc.
// Deterministic in (dims, target_R, center_radius, seed).
SamplingMask generate_poisson_mask(Dims dims, double target_R, int center_radius, std::uint64_t seed,
                                   const PoissonMaskOptions &options = {});

SamplingMask full_mask(Dims dims);

} // namespace priorecon
