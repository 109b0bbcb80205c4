#include "priorecon/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "priorecon/kspace.hpp"
#include "priorecon/mask.hpp"
#include "priorecon/random.hpp"

namespace priorecon {

void PhantomConfig::validate() const {
  require(n_tissue_classes == 3 || n_tissue_classes == 4, ErrorKind::Configuration, "phantom: n_tissue_classes must be 3 or 4");
  require(n_coils >= 1, ErrorKind::Configuration, "phantom: n_coils must be >= 1");
  require(deformation_magnitude >= 0 && contrast_shift >= 0 && atrophy_factor >= 0 && noise_std >= 0, ErrorKind::Configuration,
          "phantom: magnitudes must be nonnegative");
  require(contrast_shift < 1.0, ErrorKind::Configuration, "phantom: contrast_shift must be < 1");
  require(atrophy_factor > 0, ErrorKind::Configuration, "phantom: atrophy_factor must be positive");
  require(dims.ny >= 8 && dims.nz >= 8 && n_slices >= 1, ErrorKind::Configuration, "phantom: dims must be >= 8 and n_slices >= 1");
}

void to_json(nlohmann::json &j, const PhantomConfig &c) {
  j = {{"n_tissue_classes", c.n_tissue_classes},
       {"n_coils", c.n_coils},
       {"deformation_magnitude", c.deformation_magnitude},
       {"contrast_shift", c.contrast_shift},
       {"atrophy_factor", c.atrophy_factor},
       {"noise_std", c.noise_std},
       {"seed", c.seed},
       {"dims", {c.dims.ny, c.dims.nz}},
       {"n_slices", c.n_slices}};
}

void from_json(const nlohmann::json &j, PhantomConfig &c) {
  PhantomConfig d;
  c.n_tissue_classes = j.value("n_tissue_classes", d.n_tissue_classes);
  c.n_coils = j.value("n_coils", d.n_coils);
  c.deformation_magnitude = j.value("deformation_magnitude", d.deformation_magnitude);
  c.contrast_shift = j.value("contrast_shift", d.contrast_shift);
  c.atrophy_factor = j.value("atrophy_factor", d.atrophy_factor);
  c.noise_std = j.value("noise_std", d.noise_std);
  c.seed = j.value("seed", d.seed);
  if (j.contains("dims")) c.dims = {j.at("dims").at(0).get<int>(), j.at("dims").at(1).get<int>()};
  c.n_slices = j.value("n_slices", d.n_slices);
}

namespace {

struct Ellipsoid {
  std::array<double, 3> center{};
  std::array<double, 3> radii{1, 1, 1};
  double angle = 0.0; // in-plane rotation

  // Soft inside-membership in [0, 1].
  double membership(double u, double v, double w, double softness) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double du = u - center[0], dv = v - center[1], dw = w - center[2];
    const double a = (c * du + s * dv) / radii[0], b = (-s * du + c * dv) / radii[1], e = dw / radii[2];
    const double rho = std::sqrt(a * a + b * b + e * e);
    return 1.0 / (1.0 + std::exp(-(1.0 - rho) / softness));
  }
};

enum Label { kBackground = 0, kCsf = 1, kGray = 2, kWhite = 3 };

struct Anatomy {
  Ellipsoid outer, brain, white;
  std::vector<Ellipsoid> ventricles, nuclei;
  double i_csf = 0.25, i_gray = 0.6, i_white = 0.9;
  std::array<double, 4> modulation{};
  double softness = 0.03;
  bool merge_gray_white = false;

  struct Sample {
    double value;
    int label;
  };

  Sample at(double u, double v, double w) const {
    const double mo = outer.membership(u, v, w, softness);
    const double mb = brain.membership(u, v, w, softness);
    const double mw = white.membership(u, v, w, softness);
    double mv = 0.0, mn = 0.0;
    for (const auto &e : ventricles) mv = std::max(mv, e.membership(u, v, w, softness));
    for (const auto &e : nuclei) mn = std::max(mn, e.membership(u, v, w, softness));
    const double gw = merge_gray_white ? i_gray : i_white;
    const double tissue = i_gray * (1 - mw) + mw * (gw * (1 - mn) + i_gray * mn);
    double val = i_csf * std::max(0.0, mo - mb) + mb * tissue;
    val = val * (1 - mv * mb) + i_csf * mv * mb;
    val *= 1.0 + modulation[0] * std::sin(std::numbers::pi * (modulation[1] * u + modulation[2] * v) + modulation[3]);
    int label = kBackground;
    if (mb > 0.5 && mv > 0.5) label = kCsf;
    else if (mb > 0.5) label = (mw > 0.5 && mn <= 0.5 && !merge_gray_white) ? kWhite : kGray;
    else if (mo > 0.5) label = kCsf;
    return {val, label};
  }
};

Anatomy random_anatomy(Rng &rng, bool merge) {
  Anatomy a;
  a.merge_gray_white = merge;
  auto jit = [&](double x, double rel) { return x * (1.0 + rng.uniform(-rel, rel)); };
  const double tilt = rng.uniform(-0.15, 0.15);
  a.brain = {{rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), 0.0}, {jit(0.74, 0.06), jit(0.6, 0.06), jit(0.9, 0.05)}, tilt};
  a.outer = a.brain;
  for (auto &r : a.outer.radii) r *= 1.08;
  a.white = a.brain;
  for (auto &r : a.white.radii) r *= jit(0.72, 0.05);
  const double vy = rng.uniform(-0.05, 0.05), vsep = jit(0.11, 0.15);
  for (double side : {-1.0, 1.0})
    a.ventricles.push_back({{vy + rng.uniform(-0.02, 0.02), a.brain.center[1] + side * vsep, rng.uniform(-0.05, 0.05)},
                            {jit(0.24, 0.15), jit(0.07, 0.15), jit(0.35, 0.1)},
                            tilt + side * rng.uniform(0.0, 0.2)});
  const int n_nuclei = 2 + static_cast<int>(rng.below(2));
  for (int i = 0; i < n_nuclei; ++i) {
    const double ang = rng.uniform(0, 2 * std::numbers::pi), rad = rng.uniform(0.2, 0.35);
    a.nuclei.push_back({{rad * std::cos(ang), rad * std::sin(ang), rng.uniform(-0.2, 0.2)},
                        {rng.uniform(0.05, 0.1), rng.uniform(0.05, 0.1), rng.uniform(0.2, 0.4)},
                        rng.uniform(0, std::numbers::pi)});
  }
  a.i_csf = jit(0.25, 0.1);
  a.i_gray = jit(0.6, 0.06);
  a.i_white = jit(0.9, 0.05);
  a.modulation = {rng.uniform(0.03, 0.08), rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5), rng.uniform(0, 2 * std::numbers::pi)};
  return a;
}

// Smooth in-plane displacement (pixels) = rigid part + low-frequency sinusoids.
struct Deformation {
  double theta = 0, ty = 0, tz = 0;
  std::array<std::array<double, 4>, 3> waves_y{}, waves_z{}; // amplitude, fy, fz, phase
  double scale = 0.0;

  std::array<double, 2> raw(double y, double z, double cy, double cz, double half) const {
    const double u = (y - cy) / half, v = (z - cz) / half;
    const double c = std::cos(theta), s = std::sin(theta);
    double dy = (c * (y - cy) - s * (z - cz)) + cy - y + ty;
    double dz = (s * (y - cy) + c * (z - cz)) + cz - z + tz;
    for (const auto &w : waves_y) dy += w[0] * std::sin(std::numbers::pi * (w[1] * u + w[2] * v) + w[3]);
    for (const auto &w : waves_z) dz += w[0] * std::sin(std::numbers::pi * (w[1] * u + w[2] * v) + w[3]);
    return {dy, dz};
  }
};

Deformation random_deformation(Rng &rng, const PhantomConfig &cfg) {
  Deformation d;
  d.theta = rng.uniform(-1.0, 1.0) * 0.06;
  d.ty = rng.uniform(-1.0, 1.0);
  d.tz = rng.uniform(-1.0, 1.0);
  for (auto *waves : {&d.waves_y, &d.waves_z})
    for (auto &w : *waves) w = {rng.uniform(-0.5, 0.5), rng.uniform(0.3, 1.2), rng.uniform(0.3, 1.2), rng.uniform(0, 2 * std::numbers::pi)};
  const double cy = (cfg.dims.ny - 1) / 2.0, cz = (cfg.dims.nz - 1) / 2.0, half = std::max(cfg.dims.ny, cfg.dims.nz) / 2.0;
  double mx = 0.0;
  for (int y = 0; y < cfg.dims.ny; ++y)
    for (int z = 0; z < cfg.dims.nz; ++z) {
      auto r = d.raw(y, z, cy, cz, half);
      mx = std::max(mx, std::hypot(r[0], r[1]));
    }
  const double frac = rng.uniform(0.6, 1.0);
  d.scale = mx > 0 ? cfg.deformation_magnitude * frac / mx : 0.0;
  return d;
}

double slice_coordinate(int s, int n) { return n == 1 ? 0.0 : 0.4 * (2.0 * s / (n - 1) - 1.0); }

} // namespace

LongitudinalCase generate_phantom_pair(const PhantomConfig &cfg, const std::string &subject_id) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, 0x7068616e));
  const bool merge = cfg.n_tissue_classes == 3;
  const Anatomy current = random_anatomy(rng, merge);
  Anatomy prior = current;
  for (auto &v : prior.ventricles)
    for (auto &r : v.radii) r *= cfg.atrophy_factor;
  auto shift = [&](double x) {
    if (cfg.contrast_shift == 0.0) return x;
    return x * (1.0 + (rng.uniform() < 0.5 ? -1.0 : 1.0) * cfg.contrast_shift);
  };
  prior.i_csf = shift(prior.i_csf);
  prior.i_gray = shift(prior.i_gray);
  prior.i_white = shift(prior.i_white);
  const Deformation def = random_deformation(rng, cfg);

  const Dims d = cfg.dims;
  const double cy = (d.ny - 1) / 2.0, cz = (d.nz - 1) / 2.0, half = std::max(d.ny, d.nz) / 2.0;
  LongitudinalCase out;
  out.subject_id = subject_id.empty() ? "sub-" + std::to_string(cfg.seed) : subject_id;
  out.provenance = Provenance::Synthetic;
  Volume cur, pri, cur_lab, pri_lab;
  Rng noise(mix_seed(cfg.seed, 0x6e6f6973));
  for (int s = 0; s < cfg.n_slices; ++s) {
    const double w = slice_coordinate(s, cfg.n_slices);
    ImageSlice c(d), p(d), cl(d), pl(d);
    for (int y = 0; y < d.ny; ++y)
      for (int z = 0; z < d.nz; ++z) {
        const auto a = current.at((y - cy) / half, (z - cz) / half, w);
        c(y, z) = a.value;
        cl(y, z) = a.label;
        const auto r = def.raw(y, z, cy, cz, half);
        const double py = y + def.scale * r[0], pz = z + def.scale * r[1];
        const auto b = prior.at((py - cy) / half, (pz - cz) / half, w);
        p(y, z) = cfg.noise_std > 0 ? std::abs(b.value + cfg.noise_std * noise.normal()) : b.value;
        pl(y, z) = b.label;
      }
    cur.slices.push_back(std::move(c));
    pri.slices.push_back(std::move(p));
    cur_lab.slices.push_back(std::move(cl));
    pri_lab.slices.push_back(std::move(pl));
  }
  out.current = std::move(cur);
  out.prior = std::move(pri);
  out.current_labels = std::move(cur_lab);
  out.prior_labels = std::move(pri_lab);
  return out;
}

CoilSensitivityMaps synthesize_sensitivities(int n_coils, Dims dims, std::uint64_t seed) {
  require(n_coils >= 1, ErrorKind::Configuration, "n_coils must be >= 1");
  Rng rng(mix_seed(seed, 0x636f696c));
  CoilSensitivityMaps m(n_coils, dims);
  const double cy = (dims.ny - 1) / 2.0, cz = (dims.nz - 1) / 2.0, half = std::max(dims.ny, dims.nz) / 2.0;
  for (int c = 0; c < n_coils; ++c) {
    const double phi = 2.0 * std::numbers::pi * c / n_coils + rng.uniform(-0.2, 0.2);
    const double a1 = rng.uniform(0.5, 0.7), a2 = rng.uniform(0.1, 0.3);
    const double p0 = rng.uniform(-std::numbers::pi, std::numbers::pi), pu = rng.uniform(-0.5, 0.5), pv = rng.uniform(-0.5, 0.5);
    for (int y = 0; y < dims.ny; ++y)
      for (int z = 0; z < dims.nz; ++z) {
        const double u = (y - cy) / half, v = (z - cz) / half;
        const double t = n_coils == 1 ? 0.0 : u * std::cos(phi) + v * std::sin(phi);
        const double mag = 0.15 + (1.0 + a1 * t) * (1.0 + a1 * t) + a2 * t * t * t;
        m(c, y, z) = std::polar(std::max(mag, 0.05), p0 + pu * u + pv * v);
      }
  }
  return normalize_maps(std::move(m));
}

std::vector<SliceSample> simulate_acquisition(const LongitudinalCase &c, int n_coils, double R, std::uint64_t seed,
                                              const AcquisitionOptions &opts) {
  require(n_coils >= 1, ErrorKind::Configuration, "simulate_acquisition: n_coils must be >= 1");
  require(R >= 1.0, ErrorKind::Configuration, "simulate_acquisition: R must be >= 1");
  require(!c.current.slices.empty(), ErrorKind::InvalidInput, "simulate_acquisition: current volume is empty");
  if (c.prior)
    require(c.prior->n_slices() == c.current.n_slices() && c.prior->dims() == c.current.dims(), ErrorKind::InvalidInput,
            "simulate_acquisition: prior and current volumes differ in shape");
  const Dims d = c.current.dims();
  SamplingMask mask;
  if (R == 1.0) {
    mask = full_mask(d);
    mask.center_radius = opts.center_radius;
    mask.seed = seed;
  } else {
    mask = generate_poisson_mask(d, R, opts.center_radius, mix_seed(seed, 0x6d));
    mask.seed = mix_seed(seed, 0x6d);
  }
  const auto maps = synthesize_sensitivities(n_coils, d, mix_seed(seed, 0x73));
  Rng phase_rng(mix_seed(seed, 0x70));
  const double pa = phase_rng.uniform(-1, 1), pb = phase_rng.uniform(-1, 1), pc = phase_rng.uniform(-0.5, 0.5);
  std::vector<SliceSample> out;
  for (int s = 0; s < c.current.n_slices(); ++s) {
    const ImageSlice &img = c.current.slices[s];
    ComplexImage x(d);
    for (int y = 0; y < d.ny; ++y)
      for (int z = 0; z < d.nz; ++z) {
        const double ph = opts.smooth_phase ? pa * y / d.ny + pb * z / d.nz + pc * (y * z) / (d.ny * d.nz) : 0.0;
        x(y, z) = std::polar(img(y, z), ph);
      }
    KSpaceTensor k = forward_transform(expand(x, maps));
    if (opts.noise_std > 0) {
      Rng nr(mix_seed(seed, 0x6e, s));
      for (auto &v : k.values()) v += cplx(opts.noise_std * nr.normal(), opts.noise_std * nr.normal());
    }
    SliceSample smp;
    smp.reference = rss_combine(inverse_transform(k));
    smp.kspace_under = undersample(k, mask);
    smp.kspace_full = std::move(k);
    smp.mask = mask;
    if (c.prior) smp.prior = c.prior->slices[s];
    smp.subject_id = c.subject_id;
    smp.slice_index = s;
    smp.true_maps = maps;
    smp.image = std::move(x);
    out.push_back(std::move(smp));
  }
  return out;
}

Volume exclude_peripheral(const Volume &v, int n) {
  require(n >= 0, ErrorKind::InvalidInput, "exclude_peripheral: n must be >= 0");
  if (n == 0) return v;
  require(v.n_slices() > 2 * n, ErrorKind::InvalidInput,
          "exclude_peripheral: volume has " + std::to_string(v.n_slices()) + " slices, need more than " + std::to_string(2 * n));
  Volume out;
  out.spacing = v.spacing;
  out.slices.assign(v.slices.begin() + n, v.slices.end() - n);
  return out;
}

ImageSlice normalize(const ImageSlice &img) {
  const double m = img.max_abs();
  require(m > 0.0, ErrorKind::DegenerateInput, "normalize: all-zero image");
  ImageSlice out = img;
  for (auto &v : out.storage()) v /= m;
  out.intensity_max = m;
  return out;
}

AugmentationParams draw_augmentation(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x61756760));
  AugmentationParams p;
  p.rotation_degrees = rng.uniform(-15.0, 15.0);
  p.translate_y = rng.uniform(-0.1, 0.1);
  p.translate_z = rng.uniform(-0.1, 0.1);
  p.scale = rng.uniform(0.9, 1.1);
  return p;
}

RegistrationTransform augmentation_transform(const AugmentationParams &p, Dims dims) {
  if (p.rotation_degrees == 0.0 && p.translate_y == 0.0 && p.translate_z == 0.0 && p.scale == 1.0)
    return RegistrationTransform::identity();
  const double th = p.rotation_degrees * std::numbers::pi / 180.0;
  const double c = std::cos(th) / p.scale, s = std::sin(th) / p.scale;
  const double cy = (dims.ny - 1) / 2.0, cz = (dims.nz - 1) / 2.0;
  const double ty = p.translate_y * dims.ny, tz = p.translate_z * dims.nz;
  // output(x) = input(c + (R/scale)(x - c) - t)
  RegistrationTransform t;
  t.affine = {c, -s, 0, s, c, 0, 0, 0, 1};
  t.affine[2] = cy - c * cy + s * cz - ty;
  t.affine[5] = cz - s * cy - c * cz - tz;
  t.backend = RegistrationBackend::Affine;
  return t;
}

ImageSlice apply_augmentation(const ImageSlice &img, const AugmentationParams &p) {
  return warp(img, augmentation_transform(p, img.dims()));
}

std::pair<ImageSlice, ImageSlice> augment(const ImageSlice &current, const ImageSlice &prior, std::uint64_t seed) {
  require(current.dims() == prior.dims(), ErrorKind::InvalidInput, "augment: current and prior dims differ");
  const auto p = draw_augmentation(seed);
  return {apply_augmentation(current, p), apply_augmentation(prior, p)};
}

SplitIndices split_subjects(std::size_t n, const std::array<double, 3> &f, std::uint64_t seed) {
  for (double x : f) require(x >= 0.0, ErrorKind::Configuration, "split fractions must be nonnegative");
  require(std::abs(f[0] + f[1] + f[2] - 1.0) < 1e-9, ErrorKind::Configuration, "split fractions must sum to 1");
  const int needed = (f[0] > 0) + (f[1] > 0) + (f[2] > 0);
  require(n >= static_cast<std::size_t>(needed), ErrorKind::Configuration,
          "split_subjects: " + std::to_string(n) + " subjects cannot fill " + std::to_string(needed) + " splits");
  std::array<std::size_t, 3> count{};
  for (int i = 0; i < 3; ++i) count[i] = static_cast<std::size_t>(std::llround(f[i] * n));
  for (int i = 0; i < 3; ++i)
    if (f[i] > 0 && count[i] == 0) count[i] = 1;
  // Fix the total by adjusting the largest split.
  while (count[0] + count[1] + count[2] != n) {
    const int big = static_cast<int>(std::max_element(count.begin(), count.end()) - count.begin());
    if (count[0] + count[1] + count[2] > n) --count[big];
    else ++count[big];
  }
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  Rng rng(mix_seed(seed, 0x73706c));
  rng.shuffle(ids);
  SplitIndices out;
  out.train.assign(ids.begin(), ids.begin() + count[0]);
  out.val.assign(ids.begin() + count[0], ids.begin() + count[0] + count[1]);
  out.test.assign(ids.begin() + count[0] + count[1], ids.end());
  for (auto *v : {&out.train, &out.val, &out.test}) std::sort(v->begin(), v->end());
  return out;
}

LongitudinalCase load_case(const std::string &subject_id, const std::filesystem::path &current,
                           const std::optional<std::filesystem::path> &prior) {
  LongitudinalCase c;
  c.subject_id = subject_id;
  c.provenance = Provenance::Ingested;
  c.current = read_nifti(current);
  if (prior) {
    c.prior = read_nifti(*prior);
    require(c.prior->n_slices() == c.current.n_slices() && c.prior->dims() == c.current.dims(), ErrorKind::Data,
            subject_id + ": prior volume shape differs from current volume");
  }
  return c;
}

void write_manifest(const std::filesystem::path &path, const Manifest &m) {
  nlohmann::json j;
  j["subjects"] = nlohmann::json::array();
  for (const auto &e : m.subjects)
    j["subjects"].push_back({{"subject_id", e.subject_id}, {"current", e.current}, {"prior", e.prior}, {"split", e.split}});
  j["generator"] = m.generator;
  std::ofstream out(path);
  require(out.good(), ErrorKind::Data, "cannot write manifest " + path.string());
  out << j.dump(2) << "\n";
}

Manifest read_manifest(const std::filesystem::path &path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Data, "cannot read manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception &e) {
    fail(ErrorKind::Data, "manifest " + path.string() + ": " + e.what());
  }
  require(j.contains("subjects") && j["subjects"].is_array(), ErrorKind::Data, "manifest " + path.string() + ": missing subjects");
  Manifest m;
  for (const auto &s : j["subjects"]) {
    require(s.contains("subject_id") && s.contains("current"), ErrorKind::Data, "manifest entry needs subject_id and current");
    m.subjects.push_back({s["subject_id"].get<std::string>(), s["current"].get<std::string>(), s.value("prior", std::string{}),
                          s.value("split", std::string{"train"})});
  }
  for (std::size_t a = 0; a < m.subjects.size(); ++a)
    for (std::size_t b = a + 1; b < m.subjects.size(); ++b)
      require(m.subjects[a].subject_id != m.subjects[b].subject_id, ErrorKind::Data,
              "manifest: duplicate subject_id " + m.subjects[a].subject_id);
  m.generator = j.value("generator", nlohmann::json::object());
  return m;
}

} // namespace priorecon
