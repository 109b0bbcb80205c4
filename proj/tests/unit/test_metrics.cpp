#include <doctest.h>

#include "gradcheck.hpp"
#include "priorecon/ad/mri_ops.hpp"
#include "priorecon/metrics.hpp"
#include "test_helpers.hpp"

using namespace priorecon;
using namespace priorecon::testing;

namespace {

// Direct per-window SSIM: every 7x7 window fully inside the image.
double ssim_window_oracle(const ImageSlice &a, const ImageSlice &b, double L) {
  const int w = 7;
  const double N = w * w;
  const double c1 = (0.01 * L) * (0.01 * L), c2 = (0.03 * L) * (0.03 * L);
  double total = 0.0;
  int count = 0;
  for (int y0 = 0; y0 + w <= a.ny(); ++y0)
    for (int z0 = 0; z0 + w <= a.nz(); ++z0) {
      double ma = 0, mb = 0;
      for (int y = y0; y < y0 + w; ++y)
        for (int z = z0; z < z0 + w; ++z) {
          ma += a(y, z);
          mb += b(y, z);
        }
      ma /= N;
      mb /= N;
      double va = 0, vb = 0, cab = 0;
      for (int y = y0; y < y0 + w; ++y)
        for (int z = z0; z < z0 + w; ++z) {
          va += (a(y, z) - ma) * (a(y, z) - ma);
          vb += (b(y, z) - mb) * (b(y, z) - mb);
          cab += (a(y, z) - ma) * (b(y, z) - mb);
        }
      va /= N - 1;
      vb /= N - 1;
      cab /= N - 1;
      total += ((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / count;
}

ImageSlice checkerboard(Dims d) {
  ImageSlice img(d);
  for (int y = 0; y < d.ny; ++y)
    for (int z = 0; z < d.nz; ++z) img(y, z) = (y + z) % 2;
  return img;
}

} // namespace

TEST_CASE("ssim identity and symmetry") {
  auto x = random_image({16, 12}, 1);
  CHECK(ssim(x, x, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
  auto y = random_image({16, 12}, 2);
  CHECK(ssim(x, y, 1.0) == ssim(y, x, 1.0));
  CHECK(ssim(x, y, 1.0) < 1.0);
}

TEST_CASE("ssim matches the per-window oracle") {
  auto cb = checkerboard({8, 8});
  ImageSlice inv(cb.dims());
  for (std::size_t i = 0; i < cb.size(); ++i) inv[i] = 1.0 - cb[i];
  CHECK(std::abs(ssim(cb, inv, 1.0) - ssim_window_oracle(cb, inv, 1.0)) < 1e-10);
  for (int t = 0; t < 10; ++t) {
    auto a = random_image({8, 8}, 10 + t), b = random_image({8, 8}, 30 + t);
    CHECK(std::abs(ssim(a, b, 1.0) - ssim_window_oracle(a, b, 1.0)) < 1e-10);
  }
  auto a = random_image({23, 17}, 3, 0.0, 5.0), b = random_image({23, 17}, 4, 0.0, 5.0);
  CHECK(std::abs(ssim(a, b, 5.0) - ssim_window_oracle(a, b, 5.0)) < 1e-10);
}

TEST_CASE("ssim errors") {
  CHECK_THROWS_AS(ssim(random_image({8, 8}, 1), random_image({8, 9}, 1), 1.0), Error);
  CHECK_THROWS_AS(ssim(random_image({8, 8}, 1), random_image({8, 8}, 1), 0.0), Error);
  CHECK_THROWS_AS(ssim(random_image({5, 8}, 1), random_image({5, 8}, 1), 1.0), Error);
}

TEST_CASE("ssim_loss bounds, zero at identity, degenerate input") {
  auto x = random_image({12, 12}, 5);
  CHECK(ssim_loss(x, x) == doctest::Approx(0.0).epsilon(1e-12));
  for (int t = 0; t < 20; ++t) {
    const double l = ssim_loss(random_image({10, 10}, 100 + t, -1.0, 1.0), random_image({10, 10}, 200 + t, -1.0, 1.0));
    CHECK(l >= 0.0);
    CHECK(l <= 2.0);
  }
  CHECK_THROWS_AS(ssim_loss(ImageSlice({8, 8}), x.dims() == Dims{8, 8} ? x : random_image({8, 8}, 1)), Error);
}

TEST_CASE("ssim_loss gradient matches central differences on an 8x8 pair") {
  auto a = random_image({8, 8}, 7, 0.1, 1.0), b = random_image({8, 8}, 8, 0.1, 1.0);
  auto r = check_input_gradients(
      [](ad::Graph &, const std::vector<ad::Var> &v) { return ad::ssim_loss(v[0], v[1]); }, {{8, 8}, {8, 8}},
      {a.storage(), b.storage()}, 1e-6, 1e-8);
  CHECK(r.max_abs_error < 1e-6);
  ad::Graph g;
  auto l = ad::ssim_loss(ad::image_to_var(g, a), ad::image_to_var(g, b));
  CHECK(l.item() == doctest::Approx(ssim_loss(a, b)).epsilon(1e-14));
}

TEST_CASE("psnr closed form, homogeneity, sentinel") {
  ImageSlice a({10, 10}), b({10, 10});
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.1; // MSE 0.01
  CHECK(psnr(a, b, 1.0) == doctest::Approx(20.0).epsilon(1e-12));
  auto x = random_image({9, 9}, 1), y = random_image({9, 9}, 2);
  ImageSlice xs = x, ys = y;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xs[i] *= 3.0;
    ys[i] *= 3.0;
  }
  CHECK(psnr(xs, ys, 3.0) == doctest::Approx(psnr(x, y, 1.0)).epsilon(1e-12));
  CHECK(psnr(x, x, 1.0) == kInfinitePsnr);
}

TEST_CASE("nrmse definitional cases") {
  auto a = random_image({7, 7}, 3, 0.1, 1.0);
  CHECK(nrmse(a, a) == 0.0);
  CHECK(nrmse(a, ImageSlice(a.dims())) == doctest::Approx(1.0));
  ImageSlice twice = a;
  for (auto &v : twice.storage()) v *= 2.0;
  CHECK(nrmse(a, twice) == doctest::Approx(1.0));
  CHECK_THROWS_AS(nrmse(ImageSlice(a.dims()), a), Error);
}

TEST_CASE("psnr and nrmse move together against a fixed reference") {
  auto ref = random_image({12, 12}, 40, 0.2, 1.0);
  double prev_nrmse = 1e9, prev_psnr = -1e9;
  for (double eps : {0.5, 0.3, 0.1, 0.05, 0.01}) {
    ImageSlice b = ref;
    auto noise = random_image(ref.dims(), 41, -1.0, 1.0);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += eps * noise[i];
    const double n = nrmse(ref, b), p = psnr(ref, b, 1.0);
    CHECK(n < prev_nrmse);
    CHECK(p > prev_psnr);
    prev_nrmse = n;
    prev_psnr = p;
  }
}

namespace {

// Two-sided p by enumerating all 2^n sign assignments of the midranks.
double enumerate_p(std::vector<double> d) {
  const int n = static_cast<int>(d.size());
  std::vector<double> ranks(n);
  for (int i = 0; i < n; ++i) {
    double less = 0, equal = 0;
    for (int j = 0; j < n; ++j) {
      less += std::abs(d[j]) < std::abs(d[i]);
      equal += std::abs(d[j]) == std::abs(d[i]);
    }
    ranks[i] = less + (equal + 1) / 2.0;
  }
  double wp = 0, total = 0;
  for (int i = 0; i < n; ++i) {
    total += ranks[i];
    if (d[i] > 0) wp += ranks[i];
  }
  const double t = std::min(wp, total - wp);
  double le = 0;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    double s = 0;
    for (int i = 0; i < n; ++i)
      if (mask & (1u << i)) s += ranks[i];
    le += s <= t + 1e-9;
  }
  return std::min(1.0, 2.0 * le / (1u << n));
}

} // namespace

TEST_CASE("wilcoxon exact cases") {
  std::vector<double> pos{1, 2, 3, 4, 5, 6};
  auto r = wilcoxon_signed_rank(pos);
  CHECK(r.exact);
  CHECK(r.p_value == doctest::Approx(0.03125).epsilon(1e-15));
  CHECK(r.p_value == doctest::Approx(enumerate_p(pos)));
  CHECK(r.statistic == 0.0);
  CHECK(r.significant);

  std::vector<double> anti{-1, 1, -2, 2, -3, 3};
  auto s = wilcoxon_signed_rank(anti);
  CHECK(s.statistic == doctest::Approx(10.5));
  CHECK(s.p_value > 0.9);
  CHECK(s.p_value == doctest::Approx(enumerate_p(anti)));
  CHECK_FALSE(s.significant);

  std::vector<double> tied{0.5, -0.5, 1.2, 1.2, 2.0, -0.1, 3.0, 0.0, 2.0};
  CHECK(wilcoxon_signed_rank(tied).p_value == doctest::Approx(enumerate_p({0.5, -0.5, 1.2, 1.2, 2.0, -0.1, 3.0, 2.0})));
}

TEST_CASE("wilcoxon preconditions") {
  std::vector<double> four{1, 2, 3, 4};
  CHECK_THROWS_AS(wilcoxon_signed_rank(four), Error);
  std::vector<double> zeros(8, 0.0);
  try {
    wilcoxon_signed_rank(zeros);
    FAIL("expected undefined test");
  } catch (const Error &e) {
    CHECK(e.kind() == ErrorKind::UndefinedTest);
  }
}

TEST_CASE("wilcoxon exact and normal paths agree at n = 25") {
  for (int t = 0; t < 20; ++t) {
    Rng rng(500 + t);
    std::vector<double> d(25);
    const double shift = 0.1 * (t % 5);
    for (auto &v : d) v = rng.normal() + shift;
    auto e = wilcoxon_signed_rank(d, 0.05, WilcoxonMethod::Exact);
    auto a = wilcoxon_signed_rank(d, 0.05, WilcoxonMethod::Normal);
    CHECK(std::abs(e.p_value - a.p_value) < 0.01);
  }
}
