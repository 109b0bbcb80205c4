#include <doctest.h>

#include "gradcheck.hpp"
#include "priorecon/ad/mri_ops.hpp"
#include "priorecon/ad/ops.hpp"
#include "priorecon/kspace.hpp"
#include "priorecon/mask.hpp"
#include "priorecon/metrics.hpp"
#include "priorecon/models/varnet.hpp"
#include "test_helpers.hpp"

using namespace priorecon;
using namespace priorecon::testing;

namespace {

VarNetConfig tiny_config(int cascades = 1, int channels = 4) {
  VarNetConfig c;
  c.n_cascades = cascades;
  c.unet_channels = channels;
  c.unet_depth = 2;
  c.sme_channels = 2;
  c.sme_depth = 1;
  c.seed = 3;
  return c;
}

KSpaceTensor phantom_kspace(Dims d, int coils, std::uint64_t seed) {
  auto img = smooth_phantom(d, 0.5, -0.7);
  ComplexImage x(d);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = img[i];
  return forward_transform(expand(x, normalize_maps(smooth_maps(coils, d, seed))));
}

void perturb(ad::ParameterSet &ps, std::uint64_t seed, double sd) {
  Rng rng(seed);
  for (auto &p : ps.items())
    for (auto &v : p.value) v += sd * rng.normal();
}

double rel_diff(const ImageSlice &a, const ImageSlice &b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

} // namespace

TEST_CASE("dc_block algebra") {
  const Dims d{8, 6};
  CascadeState st{random_grid<KSpaceTensor>(3, d, 1), normalize_maps(smooth_maps(3, d, 2)), random_grid<KSpaceTensor>(3, d, 3),
                  full_mask(d)};
  CHECK(dc_block(st, 1.0) == st.k_measured);
  CHECK(dc_block(st, 0.0) == st.k_current);
  st.mask.mask = Plane<std::uint8_t>(d, 0);
  CHECK(dc_block(st, 0.7) == st.k_current);
  st.mask = generate_poisson_mask(d, 2.0, 1, 4);
  auto out = dc_block(st, 0.5);
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < d.size(); ++i) {
      const cplx expect = st.mask.mask[i] ? 0.5 * (st.k_current.coil(c)[i] + st.k_measured.coil(c)[i]) : st.k_current.coil(c)[i];
      CHECK(std::abs(out.coil(c)[i] - expect) < 1e-15);
    }
}

TEST_CASE("differentiable dc matches dc_block") {
  const Dims d{8, 6};
  VarNet net(tiny_config());
  auto mask = generate_poisson_mask(d, 2.0, 1, 4);
  auto k = random_grid<KSpaceTensor>(2, d, 1), ku = undersample(random_grid<KSpaceTensor>(2, d, 2), mask);
  ad::Graph g;
  auto out = ad::from_var<KSpaceTensor>(net.dc(g, 0, ad::to_var(g, k), ad::to_var(g, ku), mask));
  CHECK(max_abs_diff(out.values(), dc_block({k, {}, ku, mask}, 1.0).values()) < 1e-14);
}

TEST_CASE("untrained refinement is zero and keeps shape") {
  for (auto [coils, d] : {std::pair{1, Dims{8, 8}}, std::pair{3, Dims{9, 7}}, std::pair{2, Dims{12, 10}}}) {
    VarNet net(tiny_config(2));
    CascadeState st{random_grid<KSpaceTensor>(coils, d, 5), normalize_maps(smooth_maps(coils, d, 6)), {}, full_mask(d)};
    auto delta = refinement_block(net, 1, st);
    CHECK(delta.same_shape(coils, d));
    for (auto v : delta.values()) CHECK(v == cplx(0.0, 0.0));
    perturb(net.params(), 9, 0.05);
    delta = refinement_block(net, 1, st);
    CHECK(delta.same_shape(coils, d));
    CHECK(l2_norm(delta.values()) > 0.0);
  }
}

TEST_CASE("one-channel depth-1 U-Net matches a direct convolution oracle") {
  ad::ParameterSet ps;
  Rng rng(11);
  nn::UNet unet(ps, "u", {1, 1, 1, 1, false}, rng);
  const auto &w0 = ps.at("u.down0.conv0.weight").value;
  const auto &w1 = ps.at("u.down0.conv1.weight").value;
  const double b0 = 0.1, b1 = -0.05;
  ps.at("u.down0.conv0.bias").value = {b0};
  ps.at("u.down0.conv1.bias").value = {b1};
  ps.at("u.out.weight").value = {1.7};
  ps.at("u.out.bias").value = {0.3};
  auto x = random_image({8, 8}, 12, -1.0, 1.0);
  auto conv3 = [](const ImageSlice &in, const std::vector<double> &w, double b) {
    ImageSlice out(in.dims());
    for (int y = 0; y < 8; ++y)
      for (int z = 0; z < 8; ++z) {
        double acc = b;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dz = -1; dz <= 1; ++dz)
            if (y + dy >= 0 && y + dy < 8 && z + dz >= 0 && z + dz < 8) acc += w[(dy + 1) * 3 + dz + 1] * in(y + dy, z + dz);
        out(y, z) = acc > 0 ? acc : 0.2 * acc;
      }
    return out;
  };
  auto h = conv3(conv3(x, w0, b0), w1, b1);
  ad::Graph g;
  auto y = unet.forward(g, ps, g.constant({1, 8, 8}, x.storage()));
  for (std::size_t i = 0; i < h.size(); ++i) CHECK(y.value()[i] == doctest::Approx(1.7 * h[i] + 0.3).epsilon(1e-13));
}

TEST_CASE("sensitivity estimation") {
  const Dims d{16, 14};
  auto mask = generate_poisson_mask(d, 3.0, 3, 1);
  VarNet net(tiny_config());
  SUBCASE("single coil gives unit magnitude") {
    auto k = undersample(phantom_kspace(d, 1, 2), mask);
    auto maps = estimate_sensitivities(net, k, mask);
    for (auto v : maps.values()) CHECK((std::abs(v) == doctest::Approx(1.0).epsilon(1e-9) || v == cplx(0, 0)));
  }
  SUBCASE("rss audit on multi-coil data with a perturbed network") {
    perturb(net.params(), 4, 0.1);
    auto k = undersample(phantom_kspace(d, 4, 3), mask);
    auto maps = estimate_sensitivities(net, k, mask);
    auto r = rss_combine(CoilImages(maps.n_coils(), maps.dims(), std::vector<cplx>(maps.values().begin(), maps.values().end())));
    for (auto v : r.values()) CHECK((std::abs(v - 1.0) < 1e-5 || v == 0.0));
  }
  SUBCASE("no calibration region") {
    auto k = phantom_kspace(d, 2, 3);
    auto m0 = generate_poisson_mask(d, 3.0, 0, 1);
    CHECK_THROWS_AS(estimate_sensitivities(net, undersample(k, m0), m0), Error);
  }
}

TEST_CASE("untrained varnet: full mask gives the reference, R=5 gives zero-filled") {
  const Dims d{24, 20};
  VarNet net(tiny_config(2, 4));
  auto x = phantom_kspace(d, 4, 7);
  auto ref = rss_combine(inverse_transform(x));
  auto full = full_mask(d);
  full.center_radius = 3;
  CHECK(rel_diff(varnet_forward(net, x, full), ref) < 1e-5);
  auto m5 = generate_poisson_mask(d, 5.0, 3, 8);
  auto xu = undersample(x, m5);
  CHECK(rel_diff(varnet_forward(net, xu, m5), zero_filled(xu)) < 1e-5);
}

TEST_CASE("varnet determinism and shape errors") {
  const Dims d{12, 12};
  VarNet a(tiny_config(2)), b(tiny_config(2));
  CHECK(a.params().flatten() == b.params().flatten());
  perturb(a.params(), 1, 0.05);
  perturb(b.params(), 1, 0.05);
  auto m = generate_poisson_mask(d, 3.0, 2, 2);
  auto xu = undersample(phantom_kspace(d, 2, 1), m);
  CHECK(varnet_forward(a, xu, m) == varnet_forward(b, xu, m));
  CHECK_THROWS_AS(varnet_forward(a, xu, generate_poisson_mask({12, 10}, 3.0, 2, 2)), Error);
  VarNetConfig bad;
  bad.n_cascades = 0;
  CHECK_THROWS_AS(VarNet{bad}, Error);
}

TEST_CASE("ssim loss gradient through a tiny varnet matches finite differences") {
  const Dims d{8, 8};
  VarNet net(tiny_config(1, 4));
  perturb(net.params(), 21, 0.1);
  auto x = phantom_kspace(d, 2, 5);
  auto ref = rss_combine(inverse_transform(x));
  auto m = generate_poisson_mask(d, 2.0, 1, 3);
  auto xu = undersample(x, m);
  auto r = check_parameter_gradients(net.params(), [&](ad::Graph &g) {
    return ad::ssim_loss(net.forward(g, ad::to_var(g, xu), m), ad::image_to_var(g, ref));
  });
  MESSAGE("checked " << r.checked << " max rel " << r.max_rel_error << " at " << r.worst_analytic << " vs " << r.worst_numeric);
  CHECK(r.max_rel_error < 1e-4);
}
