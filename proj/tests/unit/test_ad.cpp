#include <doctest.h>

#include "gradcheck.hpp"
#include "priorecon/ad/mri_ops.hpp"
#include "priorecon/ad/ops.hpp"
#include "priorecon/kspace.hpp"
#include "test_helpers.hpp"

using namespace priorecon;
using namespace priorecon::testing;
using ad::Graph;
using ad::Var;

namespace {

std::vector<double> randv(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto &x : v) x = rng.uniform(lo, hi);
  return v;
}

// Random projection to a scalar so every output entry carries gradient.
Var project(Var x, std::uint64_t seed) {
  Graph &g = *x.graph();
  return ad::sum(ad::mul(x, g.constant(x.shape(), randv(x.size(), seed))));
}

using Fn = std::function<Var(Graph &, const std::vector<Var> &)>;

void expect_gradients(const Fn &f, std::vector<ad::Shape> shapes, std::uint64_t seed, double tol = 1e-6) {
  std::vector<std::vector<double>> vals;
  for (std::size_t i = 0; i < shapes.size(); ++i) vals.push_back(randv(ad::numel(shapes[i]), seed + i));
  auto r = check_input_gradients(f, shapes, vals);
  CHECK(r.checked > 0);
  CHECK(r.max_rel_error < tol);
}

} // namespace

TEST_CASE("elementwise op gradients") {
  expect_gradients([](Graph &, auto &v) { return project(ad::add(v[0], v[1]), 1); }, {{3, 4}, {3, 4}}, 10);
  expect_gradients([](Graph &, auto &v) { return project(ad::sub(v[0], v[1]), 2); }, {{3, 4}, {3, 4}}, 11);
  expect_gradients([](Graph &, auto &v) { return project(ad::mul(v[0], v[1]), 3); }, {{3, 4}, {3, 4}}, 12);
  expect_gradients([](Graph &, auto &v) { return project(ad::mul(v[0], v[0]), 3); }, {{5}}, 13);
  expect_gradients([](Graph &, auto &v) { return project(ad::mul_scalar(v[0], v[1]), 4); }, {{2, 3}, {1}}, 14);
  expect_gradients([](Graph &, auto &v) { return project(ad::gelu(v[0]), 5); }, {{10}}, 15);
  expect_gradients([](Graph &, auto &v) { return project(ad::silu(v[0]), 6); }, {{10}}, 16);
  expect_gradients([](Graph &, auto &v) { return project(ad::leaky_relu(v[0]), 7); }, {{10}}, 17);
  expect_gradients([](Graph &, auto &v) { return project(ad::sqrt(ad::add_scalar(ad::mul(v[0], v[0]), 0.5)), 8); }, {{6}}, 18);
  expect_gradients([](Graph &, auto &v) { return ad::mean(ad::scale(v[0], 3.0)); }, {{7}}, 19);
}

TEST_CASE("channel op gradients") {
  expect_gradients([](Graph &, auto &v) { return project(ad::channel_mean(v[0]), 1); }, {{3, 4, 5}}, 20);
  expect_gradients([](Graph &, auto &v) { return project(ad::sub_channel(v[0], v[1]), 2); }, {{3, 4, 5}, {3}}, 21);
  expect_gradients([](Graph &, auto &v) { return project(ad::mul_channel(v[0], v[1]), 3); }, {{3, 4, 5}, {3}}, 22);
  expect_gradients(
      [](Graph &, auto &v) { return project(ad::div_channel(v[0], ad::add_scalar(ad::mul(v[1], v[1]), 0.5)), 4); },
      {{3, 4, 5}, {3}}, 23);
}

TEST_CASE("convolution family gradients") {
  expect_gradients([](Graph &, auto &v) { return project(ad::conv2d(v[0], v[1], v[2]), 1); }, {{2, 5, 6}, {3, 2, 3, 3}, {3}}, 30);
  expect_gradients([](Graph &, auto &v) { return project(ad::conv2d(v[0], v[1], v[2]), 2); }, {{2, 4, 4}, {1, 2, 1, 1}, {1}}, 31);
  expect_gradients([](Graph &, auto &v) { return project(ad::avg_pool2(v[0]), 3); }, {{2, 4, 6}}, 32);
  expect_gradients([](Graph &, auto &v) { return project(ad::upsample2(v[0]), 4); }, {{2, 3, 2}}, 33);
  expect_gradients([](Graph &, auto &v) { return project(ad::concat0(v[0], v[1]), 5); }, {{2, 3, 2}, {1, 3, 2}}, 34);
  expect_gradients([](Graph &, auto &v) { return project(ad::pad2d(v[0], 1, 2, 0, 3), 6); }, {{2, 3, 2}}, 35);
  expect_gradients([](Graph &, auto &v) { return project(ad::crop2d(v[0], 1, 2, 2, 3), 7); }, {{2, 4, 6}}, 36);
  expect_gradients(
      [](Graph &, auto &v) {
        std::vector<Var> parts{v[0], v[1]};
        return project(ad::index0(ad::stack0(parts), 1), 8);
      },
      {{2, 3}, {2, 3}}, 37);
}

TEST_CASE("conv2d matches a direct loop") {
  Graph g;
  auto x = g.constant({2, 5, 4}, randv(40, 1));
  auto w = g.constant({3, 2, 3, 3}, randv(54, 2));
  auto b = g.constant({3}, randv(3, 3));
  auto y = ad::conv2d(x, w, b);
  for (int o = 0; o < 3; ++o)
    for (int yy = 0; yy < 5; ++yy)
      for (int zz = 0; zz < 4; ++zz) {
        double acc = b.value()[o];
        for (int c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kz = 0; kz < 3; ++kz) {
              const int sy = yy + ky - 1, sz = zz + kz - 1;
              if (sy < 0 || sy >= 5 || sz < 0 || sz >= 4) continue;
              acc += w.value()[((o * 2 + c) * 3 + ky) * 3 + kz] * x.value()[(c * 5 + sy) * 4 + sz];
            }
        CHECK(y.value()[(o * 5 + yy) * 4 + zz] == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("token op gradients") {
  expect_gradients([](Graph &, auto &v) { return project(ad::linear(v[0], v[1], v[2]), 1); }, {{3, 4}, {5, 4}, {5}}, 40);
  expect_gradients([](Graph &, auto &v) { return project(ad::linear(v[0], v[1], Var{}), 2); }, {{3, 4}, {5, 4}}, 41);
  expect_gradients([](Graph &, auto &v) { return project(ad::layer_norm(v[0]), 3); }, {{3, 6}}, 42);
  expect_gradients([](Graph &, auto &v) { return project(ad::broadcast_rows(v[0], 4), 4); }, {{1, 3}}, 43);
  expect_gradients([](Graph &, auto &v) { return project(ad::slice_cols(v[0], 1, 2), 5); }, {{3, 4}}, 44);
  expect_gradients([](Graph &, auto &v) { return project(ad::attention(v[0], v[1], v[2], 2), 6); }, {{5, 4}, {5, 4}, {5, 4}}, 45);
  expect_gradients([](Graph &, auto &v) { return project(ad::attention(v[0], v[0], v[0], 1), 7); }, {{4, 3}}, 46);
  expect_gradients([](Graph &, auto &v) { return project(ad::patchify(v[0], 2), 8); }, {{4, 6}}, 47);
  expect_gradients([](Graph &, auto &v) { return project(ad::unpatchify(v[0], 2, 2, 3), 9); }, {{6, 4}}, 48);
  expect_gradients([](Graph &, auto &v) { return project(ad::max_normalize(v[0]), 10); }, {{9}}, 49);
}

TEST_CASE("patchify / unpatchify roundtrip is exact") {
  Graph g;
  auto img = g.constant({32, 32}, randv(1024, 5));
  auto t = ad::patchify(img, 8);
  CHECK(t.shape() == ad::Shape{16, 64});
  auto back = ad::unpatchify(t, 8, 4, 4);
  CHECK(std::equal(back.value().begin(), back.value().end(), img.value().begin()));
  auto one = ad::patchify(g.constant({16, 16}, randv(256, 6)), 16);
  CHECK(one.shape()[0] == 1);
  CHECK_THROWS_AS(ad::patchify(img, 0), Error);
}

TEST_CASE("complex MRI op gradients") {
  expect_gradients([](Graph &, auto &v) { return project(ad::fft2c(v[0], true), 1); }, {{2, 3, 4, 2}}, 50);
  expect_gradients([](Graph &, auto &v) { return project(ad::fft2c(v[0], false), 2); }, {{1, 5, 3, 2}}, 51);
  expect_gradients([](Graph &, auto &v) { return project(ad::cexpand(v[0], v[1]), 3); }, {{3, 4, 2}, {2, 3, 4, 2}}, 52);
  expect_gradients([](Graph &, auto &v) { return project(ad::creduce(v[0], v[1]), 4); }, {{2, 3, 4, 2}, {2, 3, 4, 2}}, 53);
  expect_gradients([](Graph &, auto &v) { return project(ad::rss(v[0]), 5); }, {{3, 3, 4, 2}}, 54);
  expect_gradients([](Graph &, auto &v) { return project(ad::normalize_coils(v[0]), 6); }, {{3, 3, 4, 2}}, 55);
  expect_gradients([](Graph &, auto &v) { return project(ad::complex_to_channels(v[0]), 7); }, {{3, 4, 2}}, 56);
  expect_gradients([](Graph &, auto &v) { return project(ad::channels_to_complex(v[0]), 8); }, {{2, 3, 4}}, 57);
  Plane<std::uint8_t> m({3, 4}, 0);
  m(1, 2) = m(0, 0) = 1;
  expect_gradients([m](Graph &, auto &v) { return project(ad::mask_mul(v[0], m), 9); }, {{2, 3, 4, 2}}, 58);
}

TEST_CASE("ad MRI ops agree with the plain k-space algebra") {
  const Dims d{6, 5};
  auto k = random_grid<KSpaceTensor>(3, d, 70);
  auto maps = normalize_maps(random_grid<CoilSensitivityMaps>(3, d, 71));
  Graph g;
  auto kv = ad::to_var(g, k);
  auto mv = ad::to_var(g, maps);
  auto imgs = ad::fft2c(kv, true);
  auto plain = inverse_transform(k);
  CHECK(max_abs_diff(ad::from_var<CoilImages>(imgs).values(), plain.values()) < 1e-14);
  auto r = ad::rss(imgs);
  CHECK(max_abs_diff(r.value(), rss_combine(plain).values()) < 1e-14);
  auto red = ad::creduce(imgs, mv);
  auto plain_red = reduce(plain, maps);
  for (std::size_t i = 0; i < plain_red.size(); ++i) {
    CHECK(red.value()[2 * i] == doctest::Approx(plain_red[i].real()));
    CHECK(red.value()[2 * i + 1] == doctest::Approx(plain_red[i].imag()));
  }
  auto nm = ad::normalize_coils(ad::to_var(g, random_grid<CoilSensitivityMaps>(3, d, 72)));
  auto plain_nm = normalize_maps(random_grid<CoilSensitivityMaps>(3, d, 72));
  CHECK(max_abs_diff(ad::from_var<CoilSensitivityMaps>(nm).values(), plain_nm.values()) < 1e-14);
}

TEST_CASE("parameter binding is shared and gradients accumulate") {
  ad::ParameterSet ps;
  auto &w = ps.add("w", {2}, {1.5, -2.0});
  Graph g;
  auto a = g.param(w);
  auto b = g.param(w);
  CHECK(a.id() == b.id());
  auto loss = ad::sum(ad::mul(a, b));
  g.backward(loss);
  auto gr = g.param_grad(w);
  CHECK(gr[0] == doctest::Approx(3.0));
  CHECK(gr[1] == doctest::Approx(-4.0));
  CHECK_THROWS_AS(ps.add("w", {1}, {0.0}), Error);
}
