#include <doctest.h>

#include "priorecon/mask.hpp"

using namespace priorecon;

namespace {

// Lattice points (dy, dz) with dy^2 + dz^2 <= r^2, by enumeration.
std::size_t lattice_points(int r) {
  std::size_t n = 0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dz = -r; dz <= r; ++dz) n += (dy * dy + dz * dz <= r * r);
  return n;
}

} // namespace

TEST_CASE("lattice count for the radius-16 center disc") {
  CHECK(lattice_points(16) == 797);
  CHECK(center_disc_count({218, 170}, 16) == 797);
}

TEST_CASE("R = 1 gives an all-ones mask regardless of seed") {
  for (std::uint64_t seed : {0u, 7u, 99u}) {
    auto m = generate_poisson_mask({20, 18}, 1.0, 3, seed);
    CHECK(m.n_sampled() == 20 * 18);
  }
}

TEST_CASE("target acceleration and fully sampled center at (218, 170)") {
  const Dims d{218, 170};
  for (double R : {5.0, 10.0, 15.0, 20.0}) {
    auto m = generate_poisson_mask(d, R, 16, 42);
    const double budget = d.size() / R;
    CHECK(m.n_sampled() >= 0.95 * budget);
    CHECK(m.n_sampled() <= 1.05 * budget);
    CHECK(m.achieved_acceleration() >= 0.95 * R);
    CHECK(m.achieved_acceleration() <= 1.05 * R);
    for (int y = 0; y < d.ny; ++y)
      for (int z = 0; z < d.nz; ++z)
        if (in_center_disc(y, z, d, 16)) REQUIRE(m.mask(y, z) == 1);
  }
}

TEST_CASE("deterministic per seed, different across seeds") {
  auto a = generate_poisson_mask({64, 48}, 6.0, 4, 3);
  auto b = generate_poisson_mask({64, 48}, 6.0, 4, 3);
  auto c = generate_poisson_mask({64, 48}, 6.0, 4, 4);
  CHECK(a.mask == b.mask);
  CHECK_FALSE(a.mask == c.mask);
}

TEST_CASE("density falls off away from the center") {
  const Dims d{128, 128};
  auto m = generate_poisson_mask(d, 6.0, 6, 1);
  std::size_t inner = 0, inner_n = 0, outer = 0, outer_n = 0;
  for (int y = 0; y < d.ny; ++y)
    for (int z = 0; z < d.nz; ++z) {
      const double r = std::hypot(y - 64, z - 64);
      if (r > 10 && r < 30) {
        inner += m.mask(y, z);
        ++inner_n;
      } else if (r > 50 && r < 64) {
        outer += m.mask(y, z);
        ++outer_n;
      }
    }
  CHECK(static_cast<double>(inner) / inner_n > static_cast<double>(outer) / outer_n);
}

TEST_CASE("infeasible targets are configuration errors") {
  try {
    generate_poisson_mask({40, 40}, 20.0, 16, 0);
    FAIL("expected configuration error");
  } catch (const Error &e) {
    CHECK(e.kind() == ErrorKind::Configuration);
  }
  CHECK_THROWS_AS(generate_poisson_mask({40, 40}, 0.5, 2, 0), Error);
}

TEST_CASE("center_radius 0 with R > 1 has at most the DC point forced") {
  auto m = generate_poisson_mask({32, 32}, 4.0, 0, 2);
  CHECK(m.mask(16, 16) == 1);
  CHECK(m.achieved_acceleration() == doctest::Approx(4.0).epsilon(0.05));
}
