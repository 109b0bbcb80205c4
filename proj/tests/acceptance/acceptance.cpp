// Acceptance checks 1-9. Prints one PASS/FAIL line per criterion; exit status
// is the number of failures. Optional arguments select criteria, e.g. "1 2 7".

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include <unistd.h>

#include "priorecon/ad/mri_ops.hpp"
#include "priorecon/ad/ops.hpp"
#include "priorecon/io.hpp"
#include "priorecon/kspace.hpp"
#include "priorecon/mask.hpp"
#include "priorecon/metrics.hpp"
#include "priorecon/pipeline.hpp"
#include "unit/gradcheck.hpp"
#include "unit/test_helpers.hpp"

using namespace priorecon;
using namespace priorecon::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Pinned tolerances and budgets.
constexpr double kAlgebraTol = 1e-6;
constexpr int kAlgebraInstances = 200;
constexpr double kAlgebraBudget = 60.0;
constexpr double kMaskRTol = 0.05;
constexpr std::size_t kDiscPoints = 797;
constexpr double kMaskBudget = 60.0;
constexpr double kVarnetTol = 1e-5;
constexpr double kGradTol = 1e-4;
constexpr double kGradBudget = 300.0;
constexpr int kIdentityPairs = 50;
constexpr int kRegCases = 40;
constexpr double kRegPass = 0.95;
constexpr double kRegTransTol = 0.5, kRegRotTol = 0.5;
constexpr double kRegBudget = 300.0;
constexpr double kSsimOracleTol = 1e-10;
constexpr double kDeskBudget = 3600.0;
constexpr double kAlpha = 0.05;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(4) << v;
  return s.str();
}

double rel_l2(const ImageSlice &a, const ImageSlice &b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

Outcome fourier_algebra() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_rt = 0, worst_parseval = 0, worst_adj = 0;
  Rng pick(11);
  for (int t = 0; t < kAlgebraInstances; ++t) {
    const Dims d{2 + static_cast<int>(pick.below(39)), 2 + static_cast<int>(pick.below(39))};
    const int coils = 1 + static_cast<int>(pick.below(8));
    auto k = random_grid<KSpaceTensor>(coils, d, 1000 + t);
    auto imgs = inverse_transform(k);
    auto back = forward_transform(imgs);
    worst_rt = std::max(worst_rt, max_abs_diff(back.values(), k.values()) / l2_norm(k.values()));
    worst_parseval = std::max(worst_parseval, std::abs(l2_norm(imgs.values()) - l2_norm(k.values())) / l2_norm(k.values()));

    auto maps = random_grid<CoilSensitivityMaps>(coils, d, 3000 + t);
    auto x = random_complex_image(d, 5000 + t);
    auto y = random_grid<CoilImages>(coils, d, 7000 + t);
    cplx lhs{}, rhs{};
    auto ex = expand(x, maps);
    for (std::size_t i = 0; i < ex.size(); ++i) lhs += std::conj(ex.values()[i]) * y.values()[i];
    auto ry = reduce(y, maps);
    for (std::size_t i = 0; i < x.size(); ++i) rhs += std::conj(x[i]) * ry[i];
    worst_adj = std::max(worst_adj, std::abs(lhs - rhs) / (l2_norm(ex.values()) * l2_norm(y.values())));
  }
  const double secs = seconds_since(t0);
  return {worst_rt < kAlgebraTol && worst_parseval < kAlgebraTol && worst_adj < kAlgebraTol && secs < kAlgebraBudget,
          std::to_string(kAlgebraInstances) + " instances, roundtrip " + fmt(worst_rt) + ", parseval " + fmt(worst_parseval) +
              ", adjoint " + fmt(worst_adj) + ", " + fmt(secs) + " s"};
}

Outcome mask_generator() {
  const auto t0 = std::chrono::steady_clock::now();
  const Dims d{218, 170};
  std::size_t lattice = 0;
  for (int dy = -16; dy <= 16; ++dy)
    for (int dz = -16; dz <= 16; ++dz) lattice += dy * dy + dz * dz <= 256;
  bool ok = lattice == kDiscPoints && center_disc_count(d, 16) == kDiscPoints;
  std::string detail = "disc " + std::to_string(center_disc_count(d, 16));
  for (double R : {5.0, 10.0, 15.0, 20.0}) {
    auto m = generate_poisson_mask(d, R, 16, 42);
    const double achieved = m.achieved_acceleration();
    bool center = true;
    for (int y = 0; y < d.ny; ++y)
      for (int z = 0; z < d.nz; ++z)
        if (in_center_disc(y, z, d, 16) && m.mask(y, z) != 1) center = false;
    const bool same = generate_poisson_mask(d, R, 16, 42).mask == m.mask;
    ok = ok && std::abs(achieved - R) <= kMaskRTol * R && center && same;
    detail += ", R" + fmt(R) + "->" + fmt(achieved);
  }
  const double secs = seconds_since(t0);
  return {ok && secs < kMaskBudget, detail + ", " + fmt(secs) + " s"};
}

VarNetConfig tiny_varnet(int cascades, int channels) {
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

Outcome varnet_wiring() {
  const Dims d{32, 28};
  VarNet net(tiny_varnet(2, 8));
  auto x = phantom_kspace(d, 4, 7);
  auto full = full_mask(d);
  full.center_radius = 3;
  const double e_full = rel_l2(varnet_forward(net, x, full), rss_combine(inverse_transform(x)));
  auto m5 = generate_poisson_mask(d, 5.0, 3, 8);
  auto xu = undersample(x, m5);
  const double e_zf = rel_l2(varnet_forward(net, xu, m5), zero_filled(xu));
  return {e_full < kVarnetTol && e_zf < kVarnetTol, "full mask " + fmt(e_full) + ", R5 vs zero-filled " + fmt(e_zf)};
}

Outcome gradient_checks() {
  const auto t0 = std::chrono::steady_clock::now();
  const Dims d{8, 8};
  VarNet net(tiny_varnet(1, 4));
  perturb(net.params(), 21, 0.1);
  auto x = phantom_kspace(d, 2, 5);
  auto ref = rss_combine(inverse_transform(x));
  auto m = generate_poisson_mask(d, 2.0, 1, 3);
  auto xu = undersample(x, m);
  auto rv = check_parameter_gradients(net.params(), [&](ad::Graph &g) {
    return ad::ssim_loss(net.forward(g, ad::to_var(g, xu), m), ad::image_to_var(g, ref));
  });

  EnhancerConfig ec;
  ec.patch_size = 4;
  ec.embed_dim = 8;
  ec.n_heads = 1;
  ec.n_blocks = 1;
  ec.seed = 2;
  Enhancer en(ec);
  perturb(en.params(), 8, 0.2);
  auto xi = smooth_phantom({16, 16}), p = smooth_phantom({16, 16}, 1.0, -0.5), target = smooth_phantom({16, 16}, 0.3, 0.2);
  auto re = check_parameter_gradients(en.params(), [&](ad::Graph &g) {
    return ad::ssim_loss(en.forward(g, ad::image_to_var(g, xi), ad::image_to_var(g, p)), ad::image_to_var(g, target));
  });
  const double secs = seconds_since(t0);
  return {rv.max_rel_error < kGradTol && re.max_rel_error < kGradTol && secs < kGradBudget,
          "varnet " + std::to_string(rv.checked) + " params max rel " + fmt(rv.max_rel_error) + ", enhancer " +
              std::to_string(re.checked) + " params max rel " + fmt(re.max_rel_error) + ", " + fmt(secs) + " s"};
}

Outcome enhancer_identity() {
  EnhancerConfig c;
  c.patch_size = 8;
  c.embed_dim = 32;
  c.n_heads = 4;
  c.n_blocks = 2;
  c.seed = 5;
  Enhancer net(c);
  int exact = 0;
  for (int t = 0; t < kIdentityPairs; ++t) {
    const Dims d{16 + t % 9, 16 + (5 * t) % 13};
    auto x = random_image(d, 100 + t), p = random_image(d, 200 + t);
    exact += enhance_forward(net, x, &p) == x;
  }
  return {exact == kIdentityPairs, std::to_string(exact) + "/" + std::to_string(kIdentityPairs) + " bit-identical"};
}

Outcome registration_recovery() {
  const auto t0 = std::chrono::steady_clock::now();
  const Dims d{64, 64};
  auto target = blob_phantom(d);
  Rng rng(77);
  int ok = 0;
  double worst_t = 0, worst_r = 0;
  for (int i = 0; i < kRegCases; ++i) {
    const double ty = rng.uniform(-10, 10), tz = rng.uniform(-10, 10), th = rng.uniform(-10, 10);
    auto truth = compose(RegistrationTransform::rotation(th, d), RegistrationTransform::translation(ty, tz));
    auto r = register_prior(warp(target, truth), target);
    auto c = compose(r.transform, truth);
    const double cy = (d.ny - 1) / 2.0, cz = (d.nz - 1) / 2.0;
    auto q = c.apply(cy, cz);
    const double dt = std::hypot(q[0] - cy, q[1] - cz), da = std::abs(c.rotation_degrees());
    worst_t = std::max(worst_t, dt);
    worst_r = std::max(worst_r, da);
    ok += dt < kRegTransTol && da < kRegRotTol;
  }
  const double secs = seconds_since(t0);
  return {ok >= kRegPass * kRegCases && secs < kRegBudget,
          std::to_string(ok) + "/" + std::to_string(kRegCases) + " recovered, worst " + fmt(worst_t) + " px / " + fmt(worst_r) +
              " deg, " + fmt(secs) + " s"};
}

// Direct per-window SSIM over every 7x7 window.
double ssim_window_oracle(const ImageSlice &a, const ImageSlice &b, double L) {
  const int w = 7;
  const double N = w * w, c1 = (0.01 * L) * (0.01 * L), c2 = (0.03 * L) * (0.03 * L);
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

Outcome metric_oracles() {
  double worst = 0;
  for (int t = 0; t < 20; ++t) {
    auto a = random_image({8, 8}, 10 + t), b = random_image({8, 8}, 40 + t);
    worst = std::max(worst, std::abs(ssim(a, b, 1.0) - ssim_window_oracle(a, b, 1.0)));
  }
  const std::vector<double> diffs{1, 2, 3, 4, 5, 6};
  const double p = wilcoxon_signed_rank(diffs).p_value;
  // PSNR cases with exactly representable MSE.
  ImageSlice zero({4, 4}), half({4, 4}), quarter({4, 4});
  for (std::size_t i = 0; i < half.size(); ++i) {
    half[i] = 0.5;
    quarter[i] = 0.25;
  }
  const bool psnr_ok = psnr(zero, half, 1.0) == 10.0 * std::log10(1.0 / 0.25) &&
                       psnr(zero, quarter, 1.0) == 10.0 * std::log10(1.0 / 0.0625) &&
                       psnr(half, half, 1.0) == kInfinitePsnr && psnr(zero, half, 2.0) == 10.0 * std::log10(4.0 / 0.25);
  return {worst < kSsimOracleTol && p == 0.03125 && psnr_ok,
          "ssim oracle max diff " + fmt(worst) + ", wilcoxon p " + fmt(p) + ", psnr " + (psnr_ok ? "exact" : "mismatch")};
}

fs::path acceptance_dir() {
  if (const char *e = std::getenv("PRIORECON_ACCEPTANCE_DIR")) return e;
  return fs::temp_directory_path() / ("priorecon_acceptance_" + std::to_string(::getpid()));
}

ExperimentConfig desk_config() {
  auto cfg = load_experiment(fs::path(PRIORECON_SOURCE_DIR) / "configs" / "desk.json");
  cfg.output_dir = (acceptance_dir() / "desk").string();
  return cfg;
}

double mean_ssim(const json &res, const std::string &method) { return res["methods"][method]["ssim"]["mean"].get<double>(); }

const json *find_comparison(const json &res, const std::string &a, const std::string &b) {
  for (const auto &c : res["comparisons"])
    if (c["metric"] == "ssim" && ((c["a"] == a && c["b"] == b) || (c["a"] == b && c["b"] == a))) return &c;
  return nullptr;
}

Outcome desk_ordering() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = desk_config();
  const auto subjects = load_subjects(cfg);
  const auto n_train = subjects_in(subjects, "train").size(), n_test = subjects_in(subjects, "test").size();
  train_recon_stage(cfg);
  train_enhance_stage(cfg);
  const json summary = evaluate_stage(cfg);
  const double secs = seconds_since(t0);
  bool ok = n_train >= 15 && n_test >= 5 && cfg.varnet.n_cascades == 2 && cfg.enhancer.n_blocks == 2;
  std::string detail = std::to_string(n_train) + " train / " + std::to_string(n_test) + " test subjects";
  const std::string enh = method_name(PriorSource::SubjectPrior), atl = method_name(PriorSource::Atlas);
  for (const auto &res : summary["results"]) {
    const double s_var = mean_ssim(res, "varnet"), s_enh = mean_ssim(res, enh), s_atl = mean_ssim(res, atl);
    const json *c = find_comparison(res, "varnet", enh);
    const bool sig = c && (*c)["defined"].get<bool>() && (*c)["p_value"].get<double>() < kAlpha;
    ok = ok && s_enh > s_var && sig && s_enh >= s_atl;
    detail += "; " + res["label"].get<std::string>() + " ssim varnet " + fmt(s_var) + " enhanced " + fmt(s_enh) + " atlas " +
              fmt(s_atl) + " p " + (c && (*c)["defined"].get<bool>() ? fmt((*c)["p_value"].get<double>()) : "n/a");
  }
  ok = ok && summary["results"].size() == 2;
  return {ok && secs <= kDeskBudget, detail + "; " + fmt(secs) + " s"};
}

Outcome timing_report() {
  auto cfg = desk_config();
  const auto subjects = load_subjects(cfg);
  const auto *s = subjects_in(subjects, "test").front();
  const double R = cfg.acceleration_factors.front();
  const fs::path dir = acceptance_dir() / "timing";
  fs::create_directories(dir);
  const auto samples = acquire(cfg, *s, R);
  KSpaceContainer kc;
  kc.subject_id = s->data.subject_id;
  kc.mask = samples.front().mask;
  for (const auto &x : samples) kc.kspace.push_back(x.kspace_under);
  write_container(dir / "input.h5", kc);
  write_nifti(dir / "prior.nii.gz", *s->data.prior);

  ReconstructRequest req;
  req.container = dir / "input.h5";
  if (fs::exists(varnet_dir(cfg, R) / "best")) req.varnet = varnet_dir(cfg, R);
  const fs::path enh = enhancer_dir(cfg, R, PriorSource::SubjectPrior);
  if (fs::exists(enh / "best")) {
    req.enhancer = enh;
  } else {
    save_enhancer(dir / "enhancer", Enhancer(cfg.enhancer));
    req.enhancer = dir / "enhancer";
  }
  req.prior = dir / "prior.nii.gz";
  req.output = dir / "out.nii.gz";
  req.timing_report = dir / "timing.json";
  reconstruct_volume(cfg, req);
  json t;
  std::ifstream(req.timing_report) >> t;
  bool ok = true;
  for (const char *k : {"registration_seconds", "reconstruction_seconds"})
    ok = ok && t.contains(k) && t[k].is_number() && t[k].get<double>() >= 0.0;
  ok = ok && t["per_slice"].size() == samples.size();
  for (const auto &p : t["per_slice"]) ok = ok && p.contains("registration_seconds") && p.contains("reconstruction_seconds");
  return {ok && fs::exists(req.output), "registration " + fmt(t.value("registration_seconds", -1.0)) + " s, reconstruction " +
                                            fmt(t.value("reconstruction_seconds", -1.0)) + " s, " +
                                            std::to_string(t["per_slice"].size()) + " slices" +
                                            (req.varnet ? "" : " (untrained varnet)")};
}

} // namespace

int main(int argc, char **argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"fourier/coil algebra", fourier_algebra},     {"mask generator", mask_generator},
      {"varnet wiring", varnet_wiring},              {"gradient checks", gradient_checks},
      {"enhancer identity at init", enhancer_identity}, {"registration recovery", registration_recovery},
      {"metric oracles", metric_oracles},            {"desk ordering experiment", desk_ordering},
      {"timing report", timing_report}};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.contains(n)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception &e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << criteria[i].first << "): " << o.detail << std::endl;
  }
  if (!std::getenv("PRIORECON_ACCEPTANCE_DIR")) fs::remove_all(acceptance_dir());
  return failures;
}
