#include "priorecon/mask.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "priorecon/random.hpp"

namespace priorecon {

bool in_center_disc(int y, int z, Dims dims, int radius) {
  const long dy = y - center_index(dims.ny);
  const long dz = z - center_index(dims.nz);
  return dy * dy + dz * dz <= static_cast<long>(radius) * radius;
}

std::size_t center_disc_count(Dims dims, int radius) {
  std::size_t n = 0;
  for (int y = 0; y < dims.ny; ++y)
    for (int z = 0; z < dims.nz; ++z) n += in_center_disc(y, z, dims, radius);
  return n;
}

SamplingMask full_mask(Dims dims) {
  SamplingMask m;
  m.mask = Plane<std::uint8_t>(dims, 1);
  m.target_R = 1.0;
  return m;
}

namespace {

struct DartThrower {
  Dims dims;
  int center_radius;
  double slope;
  double d_max;
  std::vector<int> order; // non-center candidates in visiting order

  double radius_at(int y, int z, double base) const {
    const double d = std::hypot(y - center_index(dims.ny), z - center_index(dims.nz));
    return base * (1.0 + slope * d / d_max);
  }

  Plane<std::uint8_t> center_only() const {
    Plane<std::uint8_t> m(dims, 0);
    for (int y = 0; y < dims.ny; ++y)
      for (int z = 0; z < dims.nz; ++z)
        if (in_center_disc(y, z, dims, center_radius)) m(y, z) = 1;
    return m;
  }

  Plane<std::uint8_t> throw_darts(double base) const {
    Plane<std::uint8_t> m = center_only();
    for (int idx : order) {
      const int y = idx / dims.nz, z = idx % dims.nz;
      const double r = radius_at(y, z, base);
      const int w = static_cast<int>(std::ceil(r));
      const double r2 = r * r;
      bool free = true;
      for (int yy = std::max(0, y - w); free && yy <= std::min(dims.ny - 1, y + w); ++yy) {
        for (int zz = std::max(0, z - w); zz <= std::min(dims.nz - 1, z + w); ++zz) {
          if (!m(yy, zz)) continue;
          const double dy = yy - y, dz = zz - z;
          if (dy * dy + dz * dz < r2) {
            free = false;
            break;
          }
        }
      }
      if (free) m(y, z) = 1;
    }
    return m;
  }
};

std::size_t count_ones(const Plane<std::uint8_t> &m) {
  return static_cast<std::size_t>(std::count(m.values().begin(), m.values().end(), std::uint8_t{1}));
}

} // namespace

SamplingMask generate_poisson_mask(Dims dims, double target_R, int center_radius, std::uint64_t seed,
                                   const PoissonMaskOptions &options) {
  require(dims.ny > 0 && dims.nz > 0, ErrorKind::InvalidInput, "mask dims must be positive");
  require(std::isfinite(target_R) && target_R >= 1.0, ErrorKind::Configuration, "target_R must be >= 1");
  require(center_radius >= 0, ErrorKind::Configuration, "center_radius must be >= 0");

  SamplingMask out;
  out.target_R = target_R;
  out.center_radius = center_radius;
  out.seed = seed;
  if (target_R == 1.0) {
    out.mask = Plane<std::uint8_t>(dims, 1);
    return out;
  }

  const double budget = static_cast<double>(dims.size()) / target_R;
  const std::size_t n_center = center_disc_count(dims, center_radius);
  require(static_cast<double>(n_center) < budget, ErrorKind::Configuration,
          "infeasible mask: center disc of radius " + std::to_string(center_radius) + " holds " +
              std::to_string(n_center) + " points but the budget at R=" + std::to_string(target_R) + " is " +
              std::to_string(budget));

  DartThrower thrower{dims, center_radius, options.radial_slope, 0.0, {}};
  thrower.d_max = std::hypot(std::max(center_index(dims.ny), dims.ny - 1 - center_index(dims.ny)),
                             std::max(center_index(dims.nz), dims.nz - 1 - center_index(dims.nz)));
  thrower.d_max = std::max(thrower.d_max, 1.0);
  for (int y = 0; y < dims.ny; ++y)
    for (int z = 0; z < dims.nz; ++z)
      if (!in_center_disc(y, z, dims, center_radius)) thrower.order.push_back(y * dims.nz + z);
  Rng rng(mix_seed(seed, 0x6d61736b));
  rng.shuffle(thrower.order);

  // The accepted count falls as the base radius grows.
  double lo = 0.0, hi = std::max(dims.ny, dims.nz);
  Plane<std::uint8_t> best = thrower.center_only();
  double best_err = std::abs(static_cast<double>(count_ones(best)) - budget);
  for (int step = 0; step < options.bisection_steps; ++step) {
    const double mid = 0.5 * (lo + hi);
    Plane<std::uint8_t> m = thrower.throw_darts(mid);
    const double count = static_cast<double>(count_ones(m));
    const double err = std::abs(count - budget);
    if (err < best_err) {
      best_err = err;
      best = std::move(m);
    }
    if (count > budget)
      lo = mid;
    else
      hi = mid;
    if (best_err < 0.5) break;
  }

  // Top up (in visiting order) or trim (in reverse order) non-center samples.
  const auto target = static_cast<std::size_t>(std::llround(budget));
  const double tol = options.count_tolerance * budget;
  std::size_t count = count_ones(best);
  if (static_cast<double>(count) < budget - tol) {
    for (int idx : thrower.order) {
      if (count >= target) break;
      if (!best[idx]) {
        best[idx] = 1;
        ++count;
      }
    }
  } else if (static_cast<double>(count) > budget + tol) {
    for (auto it = thrower.order.rbegin(); it != thrower.order.rend() && count > target; ++it) {
      if (best[*it]) {
        best[*it] = 0;
        --count;
      }
    }
  }
  out.mask = std::move(best);
  return out;
}

} // namespace priorecon
