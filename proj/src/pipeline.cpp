#include "priorecon/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "priorecon/ad/mri_ops.hpp"
#include "priorecon/io.hpp"
#include "priorecon/kspace.hpp"
#include "priorecon/metrics.hpp"
#include "priorecon/random.hpp"

namespace priorecon {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void reject_unknown(const json &j, std::initializer_list<const char *> known, const std::string &where) {
  require(j.is_object(), ErrorKind::Configuration, where + " must be a JSON object");
  std::set<std::string> k(known.begin(), known.end());
  for (const auto &[key, _] : j.items())
    require(k.contains(key), ErrorKind::Configuration, where + ": unknown key '" + key + "'");
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

// ---- configuration ----

void to_json(json &j, const RegistrationOptions &o) {
  j = {{"backend", to_string(o.backend)},
       {"levels", o.levels},
       {"iterations_per_level", o.iterations_per_level},
       {"initial_step", o.initial_step},
       {"min_step", o.min_step},
       {"tolerance", o.tolerance},
       {"external",
        {{"command_template", o.external.command_template},
         {"work_dir", o.external.work_dir.string()},
         {"timeout_seconds", o.external.timeout_seconds}}}};
}

void from_json(const json &j, RegistrationOptions &o) {
  reject_unknown(j, {"backend", "levels", "iterations_per_level", "initial_step", "min_step", "tolerance", "external"}, "registration");
  const RegistrationOptions d;
  o.backend = j.contains("backend") ? registration_backend_from_string(j.at("backend").get<std::string>()) : d.backend;
  o.levels = j.value("levels", d.levels);
  o.iterations_per_level = j.value("iterations_per_level", d.iterations_per_level);
  o.initial_step = j.value("initial_step", d.initial_step);
  o.min_step = j.value("min_step", d.min_step);
  o.tolerance = j.value("tolerance", d.tolerance);
  if (j.contains("external")) {
    const auto &e = j.at("external");
    o.external.command_template = e.value("command_template", std::string{});
    o.external.work_dir = e.value("work_dir", std::string{});
    o.external.timeout_seconds = e.value("timeout_seconds", d.external.timeout_seconds);
  }
}

void to_json(json &j, const DatasetSpec &d) {
  j = {{"phantom", d.phantom},         {"n_subjects", d.n_subjects}, {"manifest", d.manifest},
       {"split", d.split},             {"n_coils", d.n_coils},       {"center_radius", d.center_radius},
       {"noise_std", d.noise_std},     {"exclude_peripheral", d.exclude_peripheral}};
}

void from_json(const json &j, DatasetSpec &d) {
  reject_unknown(j, {"phantom", "n_subjects", "manifest", "split", "n_coils", "center_radius", "noise_std", "exclude_peripheral"},
                 "dataset");
  const DatasetSpec def;
  d.phantom = j.value("phantom", def.phantom);
  d.n_subjects = j.value("n_subjects", def.n_subjects);
  d.manifest = j.value("manifest", def.manifest);
  d.split = j.value("split", def.split);
  d.n_coils = j.value("n_coils", j.contains("phantom") ? d.phantom.n_coils : def.n_coils);
  d.center_radius = j.value("center_radius", def.center_radius);
  d.noise_std = j.value("noise_std", def.noise_std);
  d.exclude_peripheral = j.value("exclude_peripheral", def.exclude_peripheral);
}

void ExperimentConfig::validate() const {
  require(!acceleration_factors.empty(), ErrorKind::Configuration, "acceleration_factors must be nonempty");
  for (double R : acceleration_factors) require(R >= 1.0, ErrorKind::Configuration, "acceleration factors must be >= 1");
  require(!output_dir.empty(), ErrorKind::Configuration, "output_dir must be set");
  if (dataset.manifest.empty()) {
    require(dataset.n_subjects > 0, ErrorKind::Configuration, "dataset.n_subjects must be positive");
    dataset.phantom.validate();
  }
  require(dataset.n_coils >= 1, ErrorKind::Configuration, "dataset.n_coils must be >= 1");
  require(dataset.exclude_peripheral >= 0, ErrorKind::Configuration, "dataset.exclude_peripheral must be >= 0");
  require(dataset.noise_std >= 0, ErrorKind::Configuration, "dataset.noise_std must be >= 0");
  varnet.validate();
  enhancer.validate();
  train_recon.validate();
  train_enhance.validate();
  require(!registration.levels.empty() && registration.iterations_per_level > 0, ErrorKind::Configuration,
          "registration needs at least one level and positive iterations");
}

void to_json(json &j, const ExperimentConfig &c) {
  std::vector<std::string> sources;
  for (auto s : c.enhancer_prior_sources) sources.push_back(to_string(s));
  j = {{"output_dir", c.output_dir},
       {"seed", c.seed},
       {"dataset", c.dataset},
       {"acceleration_factors", c.acceleration_factors},
       {"prior_source", to_string(c.prior_source)},
       {"enhancer_prior_sources", sources},
       {"atlas", c.atlas},
       {"registration", c.registration},
       {"varnet", c.varnet},
       {"enhancer", c.enhancer},
       {"train_recon", c.train_recon},
       {"train_enhance", c.train_enhance}};
}

void from_json(const json &j, ExperimentConfig &c) {
  reject_unknown(j,
                 {"output_dir", "seed", "dataset", "acceleration_factors", "prior_source", "enhancer_prior_sources", "atlas",
                  "registration", "varnet", "enhancer", "train_recon", "train_enhance"},
                 "experiment config");
  const ExperimentConfig d;
  try {
    c.output_dir = j.value("output_dir", d.output_dir);
    c.seed = j.value("seed", d.seed);
    c.dataset = j.value("dataset", d.dataset);
    c.acceleration_factors = j.value("acceleration_factors", d.acceleration_factors);
    c.prior_source = j.contains("prior_source") ? prior_source_from_string(j.at("prior_source").get<std::string>()) : d.prior_source;
    if (j.contains("enhancer_prior_sources")) {
      c.enhancer_prior_sources.clear();
      for (const auto &s : j.at("enhancer_prior_sources")) c.enhancer_prior_sources.push_back(prior_source_from_string(s.get<std::string>()));
    }
    c.atlas = j.value("atlas", d.atlas);
    c.registration = j.value("registration", d.registration);
    c.varnet = j.value("varnet", d.varnet);
    c.enhancer = j.value("enhancer", d.enhancer);
    json tr = j.value("train_recon", json::object()), te = j.value("train_enhance", json::object());
    tr["stage"] = "recon";
    te["stage"] = "enhance";
    c.train_recon = tr.get<TrainConfig>();
    c.train_enhance = te.get<TrainConfig>();
  } catch (const json::exception &e) {
    fail(ErrorKind::Configuration, std::string("experiment config: ") + e.what());
  }
}

ExperimentConfig load_experiment(const fs::path &path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Configuration, "cannot read config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception &e) {
    fail(ErrorKind::Configuration, "config " + path.string() + ": " + e.what());
  }
  ExperimentConfig c = j.get<ExperimentConfig>();
  // Relative dataset paths are relative to the config file.
  const fs::path base = path.parent_path();
  if (!c.dataset.manifest.empty() && fs::path(c.dataset.manifest).is_relative())
    c.dataset.manifest = (base / c.dataset.manifest).lexically_normal().string();
  if (!c.atlas.empty() && fs::path(c.atlas).is_relative()) c.atlas = (base / c.atlas).lexically_normal().string();
  return c;
}

fs::path output_root(const ExperimentConfig &cfg) {
  fs::path p = cfg.output_dir;
  if (const char *root = std::getenv("PRIORECON_OUTPUT_ROOT"); root && *root && p.is_relative()) p = fs::path(root) / p;
  return p;
}

void write_resolved_config(const ExperimentConfig &cfg, const std::string &command) {
  const fs::path dir = output_root(cfg) / "resolved";
  fs::create_directories(dir);
  json j = cfg;
  j["command"] = command;
  j["resolved_output_dir"] = output_root(cfg).string();
  std::ofstream out(dir / (command + ".json"));
  require(out.good(), ErrorKind::Data, "cannot write resolved config to " + dir.string());
  out << j.dump(2) << "\n";
}

std::string r_label(double R) {
  std::ostringstream s;
  s << "R" << R;
  return s.str();
}

int default_center_radius(Dims d) {
  return std::max(2, static_cast<int>(std::lround(16.0 * std::min(d.ny, d.nz) / 170.0)));
}

// ---- model artifacts ----

namespace {

fs::path checkpoint_path(const fs::path &dir) {
  if (fs::is_regular_file(dir / "config.json")) return dir;
  if (fs::is_regular_file(dir / "best" / "config.json")) return dir / "best";
  return dir;
}

json model_meta(const std::string &kind, const json &config, const json &extra) {
  json m = {{"kind", "model"}, {"model", {{"kind", kind}, {"config", config}}}};
  if (extra.is_object())
    for (const auto &[k, v] : extra.items()) m[k] = v;
  return m;
}

} // namespace

void save_varnet(const fs::path &dir, const VarNet &net, const json &extra) {
  write_checkpoint(dir, model_meta("varnet", net.config(), extra), parameter_records(net.params()));
}

VarNet load_varnet(const fs::path &dir) {
  auto [meta, records] = read_checkpoint(checkpoint_path(dir));
  require(meta.contains("model") && meta["model"].value("kind", "") == "varnet", ErrorKind::Checkpoint,
          dir.string() + " is not a varnet checkpoint");
  VarNet net(meta["model"]["config"].get<VarNetConfig>());
  assign_parameters(net.params(), records);
  return net;
}

void save_enhancer(const fs::path &dir, const Enhancer &net, const json &extra) {
  write_checkpoint(dir, model_meta("enhancer", net.config(), extra), parameter_records(net.params()));
}

Enhancer load_enhancer(const fs::path &dir) {
  auto [meta, records] = read_checkpoint(checkpoint_path(dir));
  require(meta.contains("model") && meta["model"].value("kind", "") == "enhancer", ErrorKind::Checkpoint,
          dir.string() + " is not an enhancer checkpoint");
  Enhancer net(meta["model"]["config"].get<EnhancerConfig>());
  assign_parameters(net.params(), records);
  return net;
}

fs::path varnet_dir(const ExperimentConfig &cfg, double R) { return output_root(cfg) / "models" / ("varnet_" + r_label(R)); }

fs::path enhancer_dir(const ExperimentConfig &cfg, double R, PriorSource source) {
  return output_root(cfg) / "models" / ("enhancer_" + r_label(R) + "_" + to_string(source));
}

// ---- data ----

namespace {

json generator_json(const ExperimentConfig &cfg) {
  return {{"phantom", cfg.dataset.phantom}, {"n_subjects", cfg.dataset.n_subjects}, {"split", cfg.dataset.split}, {"seed", cfg.seed}};
}

std::string subject_name(int i) {
  std::ostringstream s;
  s << "sub-" << std::setw(3) << std::setfill('0') << i + 1;
  return s.str();
}

} // namespace

Manifest generate_dataset(const ExperimentConfig &cfg) {
  require(cfg.dataset.n_subjects > 0, ErrorKind::Configuration, "phantom-gen: n_subjects must be positive");
  cfg.dataset.phantom.validate();
  const fs::path dir = output_root(cfg) / "data";
  fs::create_directories(dir);
  const auto split = split_subjects(cfg.dataset.n_subjects, cfg.dataset.split, mix_seed(cfg.seed, 0x73706c74));
  std::vector<std::string> split_of(cfg.dataset.n_subjects);
  for (auto i : split.train) split_of[i] = "train";
  for (auto i : split.val) split_of[i] = "val";
  for (auto i : split.test) split_of[i] = "test";
  Manifest m;
  m.generator = generator_json(cfg);
  for (int i = 0; i < cfg.dataset.n_subjects; ++i) {
    PhantomConfig pc = cfg.dataset.phantom;
    pc.seed = mix_seed(cfg.seed, cfg.dataset.phantom.seed, static_cast<std::uint64_t>(i) + 1);
    const std::string id = subject_name(i);
    const auto c = generate_phantom_pair(pc, id);
    fs::create_directories(dir / id);
    write_nifti(dir / id / "current.nii.gz", c.current);
    write_nifti(dir / id / "prior.nii.gz", *c.prior);
    write_nifti(dir / id / "current_labels.nii.gz", *c.current_labels);
    m.subjects.push_back({id, id + "/current.nii.gz", id + "/prior.nii.gz", split_of[i]});
  }
  write_manifest(dir / "manifest.json", m);
  return m;
}

std::vector<Subject> load_subjects(const ExperimentConfig &cfg) {
  fs::path manifest_path;
  if (!cfg.dataset.manifest.empty()) {
    manifest_path = cfg.dataset.manifest;
    require(fs::exists(manifest_path), ErrorKind::Configuration, "manifest " + manifest_path.string() + " does not exist");
  } else {
    manifest_path = output_root(cfg) / "data" / "manifest.json";
    bool fresh = fs::exists(manifest_path);
    if (fresh) fresh = read_manifest(manifest_path).generator == generator_json(cfg);
    if (!fresh) generate_dataset(cfg);
  }
  const Manifest m = read_manifest(manifest_path);
  const fs::path base = manifest_path.parent_path();
  std::vector<Subject> out;
  for (std::size_t i = 0; i < m.subjects.size(); ++i) {
    const auto &e = m.subjects[i];
    require(e.split == "train" || e.split == "val" || e.split == "test", ErrorKind::Data,
            "manifest: subject " + e.subject_id + " has unknown split '" + e.split + "'");
    std::optional<fs::path> prior;
    if (!e.prior.empty()) prior = base / e.prior;
    Subject s{load_case(e.subject_id, base / e.current, prior), e.split, i};
    if (cfg.dataset.exclude_peripheral > 0) {
      s.data.current = exclude_peripheral(s.data.current, cfg.dataset.exclude_peripheral);
      if (s.data.prior) s.data.prior = exclude_peripheral(*s.data.prior, cfg.dataset.exclude_peripheral);
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<const Subject *> subjects_in(const std::vector<Subject> &all, const std::string &split) {
  std::vector<const Subject *> out;
  for (const auto &s : all)
    if (s.split == split) out.push_back(&s);
  return out;
}

const ImageSlice &matching_slice(const Volume &vol, int s, int n) {
  require(!vol.slices.empty(), ErrorKind::InvalidInput, "matching_slice: empty volume");
  if (vol.n_slices() == n || n <= 1) return vol.slices[std::min(s, vol.n_slices() - 1)];
  const double t = static_cast<double>(s) / (n - 1);
  return vol.slices[static_cast<std::size_t>(std::lround(t * (vol.n_slices() - 1)))];
}

Volume build_atlas(const std::vector<const Subject *> &train) {
  require(!train.empty(), ErrorKind::Configuration, "atlas: no training subjects");
  const Volume &first = train.front()->data.current;
  const int n = first.n_slices();
  Volume atlas;
  atlas.spacing = first.spacing;
  for (int s = 0; s < n; ++s) atlas.slices.emplace_back(first.dims());
  for (const auto *sub : train) {
    const Volume &v = sub->data.current;
    require(v.dims() == first.dims(), ErrorKind::Data, "atlas: subject " + sub->data.subject_id + " has different slice dims");
    double mx = 0.0;
    for (const auto &sl : v.slices) mx = std::max(mx, sl.max_abs());
    require(mx > 0.0, ErrorKind::DegenerateInput, "atlas: subject " + sub->data.subject_id + " is all zero");
    for (int s = 0; s < n; ++s) {
      const auto &src = matching_slice(v, s, n);
      for (std::size_t i = 0; i < src.size(); ++i) atlas.slices[s][i] += src[i] / mx / static_cast<double>(train.size());
    }
  }
  return atlas;
}

Volume resolve_atlas(const ExperimentConfig &cfg, const std::vector<Subject> &all) {
  if (!cfg.atlas.empty()) {
    require(fs::exists(cfg.atlas), ErrorKind::Configuration, "atlas " + cfg.atlas + " does not exist");
    return read_nifti(cfg.atlas);
  }
  Volume atlas = build_atlas(subjects_in(all, "train"));
  const fs::path p = output_root(cfg) / "data" / "atlas.nii.gz";
  fs::create_directories(p.parent_path());
  write_nifti(p, atlas);
  return atlas;
}

double normalize_kspace(KSpaceTensor &k) {
  const double m = zero_filled(k).max_abs();
  if (!(m > 0.0)) return 1.0;
  const double f = 1.0 / m;
  for (auto &v : k.values()) v *= f;
  return f;
}

double normalized_ssim(const ImageSlice &img, const ImageSlice &reference) {
  return ssim(unit_max(img), unit_max(reference), 1.0);
}

ImageSlice unit_max(const ImageSlice &img) {
  const double m = img.max_abs();
  if (!(m > 0.0)) return img;
  ImageSlice out = img;
  for (auto &v : out.storage()) v /= m;
  return out;
}

std::vector<SliceSample> acquire(const ExperimentConfig &cfg, const Subject &s, double R) {
  AcquisitionOptions opts;
  opts.center_radius = cfg.dataset.center_radius > 0 ? cfg.dataset.center_radius : default_center_radius(s.data.current.dims());
  opts.noise_std = cfg.dataset.noise_std;
  const std::uint64_t seed = mix_seed(cfg.seed, s.index + 1, static_cast<std::uint64_t>(std::llround(R * 1000)));
  auto samples = simulate_acquisition(s.data, cfg.dataset.n_coils, R, seed, opts);
  for (auto &smp : samples) {
    const double f = normalize_kspace(smp.kspace_under);
    for (auto &v : smp.kspace_full.values()) v *= f;
    for (auto &v : smp.reference.storage()) v *= f;
    for (auto &v : smp.image.values()) v *= f;
  }
  return samples;
}

// ---- objectives ----

ReconObjective::ReconObjective(VarNet &net, std::vector<SliceSample> train, std::vector<SliceSample> val)
    : net_(net), train_(std::move(train)), val_(std::move(val)) {}

ad::Var ReconObjective::loss(ad::Graph &g, std::size_t index, std::uint64_t seed, bool augment) {
  const SliceSample &s = train_.at(index);
  if (!augment) {
    auto y = net_.forward(g, ad::to_var(g, s.kspace_under), s.mask);
    return ad::ssim_loss(y, ad::image_to_var(g, s.reference));
  }
  // Augment the complex image and re-acquire with the same coils and mask.
  const auto p = draw_augmentation(seed);
  const Dims d = s.image.dims();
  ImageSlice re(d), im(d);
  for (std::size_t i = 0; i < d.size(); ++i) {
    re[i] = s.image[i].real();
    im[i] = s.image[i].imag();
  }
  re = apply_augmentation(re, p);
  im = apply_augmentation(im, p);
  ComplexImage x(d);
  ImageSlice target(d);
  for (std::size_t i = 0; i < d.size(); ++i) {
    x[i] = cplx(re[i], im[i]);
    target[i] = std::abs(x[i]);
  }
  const auto ku = undersample(forward_transform(expand(x, s.true_maps)), s.mask);
  auto y = net_.forward(g, ad::to_var(g, ku), s.mask);
  return ad::ssim_loss(y, ad::image_to_var(g, target));
}

double ReconObjective::validate(std::size_t index) {
  const SliceSample &s = val_.at(index);
  return normalized_ssim(varnet_forward(net_, s.kspace_under, s.mask), s.reference);
}

json ReconObjective::describe() const { return {{"kind", "varnet"}, {"config", net_.config()}}; }

EnhanceObjective::EnhanceObjective(Enhancer &net, std::vector<EnhanceSample> train, std::vector<EnhanceSample> val)
    : net_(net), train_(std::move(train)), val_(std::move(val)) {}

ad::Var EnhanceObjective::loss(ad::Graph &g, std::size_t index, std::uint64_t seed, bool augment) {
  const EnhanceSample &s = train_.at(index);
  ImageSlice y = s.y_hat, ref = s.reference;
  std::optional<ImageSlice> prior = s.prior;
  if (augment) {
    const auto p = draw_augmentation(seed);
    y = apply_augmentation(y, p);
    ref = apply_augmentation(ref, p);
    if (prior) prior = apply_augmentation(*prior, p);
  }
  auto out = net_.forward(g, ad::image_to_var(g, y), prior ? ad::image_to_var(g, *prior) : ad::Var{});
  return ad::ssim_loss(out, ad::image_to_var(g, ref));
}

double EnhanceObjective::validate(std::size_t index) {
  const EnhanceSample &s = val_.at(index);
  const auto out = enhance_forward(net_, s.y_hat, s.prior ? &*s.prior : nullptr);
  return normalized_ssim(out, s.reference);
}

json EnhanceObjective::describe() const { return {{"kind", "enhancer"}, {"config", net_.config()}}; }

// ---- registration / enhancement inputs ----

PriorAlignment align_prior(const ImageSlice &prior, const ImageSlice &y_hat, const RegistrationOptions &opts) {
  require(prior.dims() == y_hat.dims(), ErrorKind::Data,
          "prior slice dims " + to_string(prior.dims()) + " differ from reconstruction dims " + to_string(y_hat.dims()));
  PriorAlignment out;
  const auto t0 = std::chrono::steady_clock::now();
  const ImageSlice p = unit_max(prior);
  try {
    auto r = register_prior(p, unit_max(y_hat), opts);
    out.registered = std::move(r.registered);
    out.warning = r.warning;
  } catch (const Error &e) {
    if (e.kind() != ErrorKind::Adapter) throw;
    out.registered = p;
    out.warning = std::string("registration failed, using identity: ") + e.what();
  }
  out.seconds = seconds_since(t0);
  return out;
}

std::vector<InitialSlice> initial_reconstructions(const ExperimentConfig &cfg, const VarNet &net,
                                                  const std::vector<const Subject *> &subjects, double R) {
  std::vector<InitialSlice> out;
  for (const auto *s : subjects)
    for (auto &smp : acquire(cfg, *s, R)) {
      InitialSlice b;
      b.subject = s;
      b.slice = smp.slice_index;
      b.zero_filled = zero_filled(smp.kspace_under);
      b.y_hat = unit_max(varnet_forward(net, smp.kspace_under, smp.mask));
      b.reference = unit_max(smp.reference);
      out.push_back(std::move(b));
    }
  return out;
}

std::vector<EnhanceSample> attach_priors(const std::vector<InitialSlice> &base, PriorSource source, const Volume *atlas,
                                         const RegistrationOptions &opts) {
  std::vector<EnhanceSample> out;
  for (const auto &b : base) {
    EnhanceSample e;
    e.y_hat = b.y_hat;
    e.reference = b.reference;
    e.subject_id = b.subject->data.subject_id;
    e.slice_index = b.slice;
    const int n = b.subject->data.current.n_slices();
    if (source == PriorSource::SubjectPrior) {
      require(b.subject->data.prior.has_value(), ErrorKind::Configuration,
              "prior_source=subject_prior but subject " + e.subject_id + " has no prior scan");
      e.prior = align_prior(b.subject->data.prior->slices.at(b.slice), b.y_hat, opts).registered;
    } else if (source == PriorSource::Atlas) {
      require(atlas != nullptr, ErrorKind::Configuration, "prior_source=atlas needs an atlas volume");
      e.prior = align_prior(matching_slice(*atlas, b.slice, n), b.y_hat, opts).registered;
    }
    out.push_back(std::move(e));
  }
  return out;
}

// ---- stages ----

namespace {

std::function<void(const EpochRecord &)> progress(const std::string &tag) {
  return [tag](const EpochRecord &r) {
    std::cerr << "[" << tag << "] epoch " << r.epoch << " loss " << std::setprecision(5) << r.train_loss << " val_ssim "
              << r.val_ssim << " lr " << r.lr << " (" << std::setprecision(3) << r.wall_seconds << " s)\n";
  };
}

json run_summary(const TrainResult &res) {
  return {{"epochs_run", res.state.epoch},
          {"best_epoch", res.state.best_epoch},
          {"best_val_ssim", res.state.best_val},
          {"stopped_early", res.state.stopped_early},
          {"final_lr", res.state.lr}};
}

} // namespace

StageSummary train_recon_stage(const ExperimentConfig &cfg) {
  cfg.validate();
  const auto all = load_subjects(cfg);
  const auto train_s = subjects_in(all, "train"), val_s = subjects_in(all, "val");
  require(!train_s.empty(), ErrorKind::Configuration, "train-recon: no training subjects");
  require(!val_s.empty(), ErrorKind::Configuration, "train-recon: no validation subjects");
  StageSummary out;
  for (double R : cfg.acceleration_factors) {
    std::vector<SliceSample> tr, va;
    for (const auto *s : train_s)
      for (auto &x : acquire(cfg, *s, R)) tr.push_back(std::move(x));
    double zf = 0.0;
    for (const auto *s : val_s)
      for (auto &x : acquire(cfg, *s, R)) {
        zf += normalized_ssim(zero_filled(x.kspace_under), x.reference);
        va.push_back(std::move(x));
      }
    zf /= static_cast<double>(va.size());
    VarNet net(cfg.varnet);
    ReconObjective obj(net, std::move(tr), std::move(va));
    TrainConfig tc = cfg.train_recon;
    tc.stage = Stage::Recon;
    tc.seed = mix_seed(cfg.seed, tc.seed, static_cast<std::uint64_t>(std::llround(R * 1000)));
    TrainOptions opts;
    opts.run_dir = varnet_dir(cfg, R);
    opts.on_epoch = progress("train-recon " + r_label(R));
    const auto res = train(obj, tc, opts);
    json s = run_summary(res);
    s["R"] = R;
    s["zero_filled_val_ssim"] = zf;
    s["checkpoint"] = (opts.run_dir / "best").string();
    save_varnet(opts.run_dir / "best", net, {{"R", R}, {"summary", s}});
    out.runs.push_back(s);
  }
  return out;
}

namespace {

VarNet require_varnet(const ExperimentConfig &cfg, double R) {
  const fs::path d = varnet_dir(cfg, R);
  require(fs::exists(checkpoint_path(d) / "config.json"), ErrorKind::Configuration,
          "missing checkpoint for stage recon at " + r_label(R) + " (" + d.string() + "); run train-recon first");
  return load_varnet(d);
}

Enhancer require_enhancer(const ExperimentConfig &cfg, double R, PriorSource src) {
  const fs::path d = enhancer_dir(cfg, R, src);
  require(fs::exists(checkpoint_path(d) / "config.json"), ErrorKind::Configuration,
          "missing checkpoint for stage enhance (" + to_string(src) + ") at " + r_label(R) + " (" + d.string() +
              "); run train-enhance first");
  return load_enhancer(d);
}

bool needs_atlas(const std::vector<PriorSource> &s) {
  return std::find(s.begin(), s.end(), PriorSource::Atlas) != s.end();
}

} // namespace

StageSummary train_enhance_stage(const ExperimentConfig &cfg) {
  cfg.validate();
  require(!cfg.enhancer_prior_sources.empty(), ErrorKind::Configuration, "enhancer_prior_sources is empty");
  const auto all = load_subjects(cfg);
  const auto train_s = subjects_in(all, "train"), val_s = subjects_in(all, "val");
  require(!train_s.empty() && !val_s.empty(), ErrorKind::Configuration, "train-enhance: needs training and validation subjects");
  std::optional<Volume> atlas;
  if (needs_atlas(cfg.enhancer_prior_sources)) atlas = resolve_atlas(cfg, all);
  StageSummary out;
  for (double R : cfg.acceleration_factors) {
    const VarNet net = require_varnet(cfg, R); // frozen
    const auto base_tr = initial_reconstructions(cfg, net, train_s, R);
    const auto base_va = initial_reconstructions(cfg, net, val_s, R);
    for (PriorSource src : cfg.enhancer_prior_sources) {
      EnhancerConfig ec = cfg.enhancer;
      ec.prior_source = src;
      Enhancer en(ec);
      auto tr = attach_priors(base_tr, src, atlas ? &*atlas : nullptr, cfg.registration);
      auto va = attach_priors(base_va, src, atlas ? &*atlas : nullptr, cfg.registration);
      double baseline = 0.0;
      for (const auto &v : va) baseline += normalized_ssim(v.y_hat, v.reference);
      baseline /= static_cast<double>(va.size());
      EnhanceObjective obj(en, std::move(tr), std::move(va));
      TrainConfig tc = cfg.train_enhance;
      tc.stage = Stage::Enhance;
      tc.seed = mix_seed(cfg.seed, tc.seed, static_cast<std::uint64_t>(std::llround(R * 1000)));
      TrainOptions opts;
      opts.run_dir = enhancer_dir(cfg, R, src);
      opts.on_epoch = progress("train-enhance " + r_label(R) + " " + to_string(src));
      const auto res = train(obj, tc, opts);
      json s = run_summary(res);
      s["R"] = R;
      s["prior_source"] = to_string(src);
      s["varnet_val_ssim"] = baseline;
      s["checkpoint"] = (opts.run_dir / "best").string();
      save_enhancer(opts.run_dir / "best", en, {{"R", R}, {"summary", s}});
      out.runs.push_back(s);
    }
  }
  return out;
}

// ---- evaluation ----

std::string method_name(PriorSource s) { return "enhanced_" + to_string(s); }

std::vector<MetricRow> evaluate_rows(const ExperimentConfig &cfg) {
  cfg.validate();
  const auto all = load_subjects(cfg);
  const auto test_s = subjects_in(all, "test");
  require(!test_s.empty(), ErrorKind::Configuration, "evaluate: no test subjects");
  // Fail on missing checkpoints before doing any work.
  for (double R : cfg.acceleration_factors) {
    require_varnet(cfg, R);
    for (PriorSource src : cfg.enhancer_prior_sources) require_enhancer(cfg, R, src);
  }
  std::optional<Volume> atlas;
  if (needs_atlas(cfg.enhancer_prior_sources)) atlas = resolve_atlas(cfg, all);
  std::vector<MetricRow> rows;
  auto add = [&](const InitialSlice &b, double R, const std::string &method, const ImageSlice &img) {
    const ImageSlice a = unit_max(img), ref = unit_max(b.reference);
    rows.push_back({b.subject->data.subject_id, b.slice, R, method, ssim(a, ref, 1.0), psnr(a, ref, 1.0), nrmse(ref, a)});
  };
  for (double R : cfg.acceleration_factors) {
    const VarNet net = require_varnet(cfg, R);
    const auto base = initial_reconstructions(cfg, net, test_s, R);
    std::vector<std::vector<ImageSlice>> enhanced;
    for (PriorSource src : cfg.enhancer_prior_sources) {
      const Enhancer en = require_enhancer(cfg, R, src);
      const auto samples = attach_priors(base, src, atlas ? &*atlas : nullptr, cfg.registration);
      std::vector<ImageSlice> outs;
      for (const auto &s : samples) outs.push_back(enhance_forward(en, s.y_hat, s.prior ? &*s.prior : nullptr));
      enhanced.push_back(std::move(outs));
    }
    for (std::size_t i = 0; i < base.size(); ++i) {
      add(base[i], R, "zero_filled", base[i].zero_filled);
      add(base[i], R, "varnet", base[i].y_hat);
      for (std::size_t k = 0; k < enhanced.size(); ++k) add(base[i], R, method_name(cfg.enhancer_prior_sources[k]), enhanced[k][i]);
    }
  }
  return rows;
}

json summarize(const std::vector<MetricRow> &rows, double alpha) {
  std::vector<double> Rs;
  std::vector<std::string> methods;
  for (const auto &r : rows) {
    if (std::find(Rs.begin(), Rs.end(), r.R) == Rs.end()) Rs.push_back(r.R);
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
  }
  const std::vector<std::string> metrics{"ssim", "psnr", "nrmse"};
  auto value = [](const MetricRow &r, const std::string &m) { return m == "ssim" ? r.ssim : m == "psnr" ? r.psnr : r.nrmse; };
  json results = json::array();
  for (double R : Rs) {
    // method -> (subject, slice) -> row
    std::map<std::string, std::map<std::pair<std::string, int>, const MetricRow *>> by;
    for (const auto &r : rows)
      if (r.R == R) by[r.method][{r.subject_id, r.slice}] = &r;
    json ms = json::object();
    for (const auto &m : methods) {
      if (!by.contains(m)) continue;
      json entry = {{"n", by[m].size()}};
      for (const auto &metric : metrics) {
        std::vector<double> v;
        for (const auto &[key, r] : by[m]) v.push_back(value(*r, metric));
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
        entry[metric] = {{"mean", std::isfinite(mean) ? json(mean) : json("inf")}, {"std", std::isfinite(sd) ? json(sd) : json(nullptr)}};
      }
      ms[m] = entry;
    }
    json comps = json::array();
    for (std::size_t a = 0; a < methods.size(); ++a)
      for (std::size_t b = a + 1; b < methods.size(); ++b) {
        if (!by.contains(methods[a]) || !by.contains(methods[b])) continue;
        for (const auto &metric : metrics) {
          std::vector<double> diffs;
          bool finite = true;
          for (const auto &[key, ra] : by[methods[a]]) {
            auto it = by[methods[b]].find(key);
            if (it == by[methods[b]].end()) continue;
            const double d = value(*ra, metric) - value(*it->second, metric);
            if (!std::isfinite(d)) finite = false;
            diffs.push_back(d);
          }
          json c = {{"a", methods[a]}, {"b", methods[b]}, {"metric", metric}, {"n_pairs", diffs.size()}};
          double md = 0.0;
          for (double d : diffs) md += d;
          c["mean_diff"] = finite && !diffs.empty() ? json(md / static_cast<double>(diffs.size())) : json(nullptr);
          if (!finite) {
            c.update({{"defined", false}, {"significant", false}, {"p_value", nullptr}, {"note", "non-finite metric values"}});
          } else {
            try {
              const auto w = wilcoxon_signed_rank(diffs, alpha);
              c.update({{"defined", true},
                        {"statistic", w.statistic},
                        {"w_plus", w.w_plus},
                        {"p_value", w.p_value},
                        {"significant", w.significant},
                        {"n_used", w.n_used},
                        {"exact", w.exact},
                        {"note", ""}});
            } catch (const Error &e) {
              if (e.kind() != ErrorKind::UndefinedTest && e.kind() != ErrorKind::InvalidInput) throw;
              c.update({{"defined", false},
                        {"significant", false},
                        {"p_value", nullptr},
                        {"note", e.kind() == ErrorKind::UndefinedTest ? "no difference" : e.what()}});
            }
          }
          comps.push_back(c);
        }
      }
    results.push_back({{"R", R}, {"label", r_label(R)}, {"methods", ms}, {"comparisons", comps}});
  }
  return {{"alpha", alpha}, {"acceleration_factors", Rs}, {"methods", methods}, {"results", results}};
}

void write_rows_csv(const fs::path &path, const std::vector<MetricRow> &rows) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::Data, "cannot write " + path.string());
  out << "subject_id,slice,R,method,ssim,psnr,nrmse\n";
  out << std::setprecision(17);
  for (const auto &r : rows)
    out << r.subject_id << "," << r.slice << "," << r.R << "," << r.method << "," << r.ssim << "," << r.psnr << "," << r.nrmse << "\n";
}

void write_metric_plot(const fs::path &path, const json &summary, const std::string &metric) {
  const double W = 640, H = 400, L = 70, Rm = 190, T = 30, B = 50;
  std::vector<double> Rs = summary.at("acceleration_factors").get<std::vector<double>>();
  std::vector<std::string> methods = summary.at("methods").get<std::vector<std::string>>();
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  double lo = 1e300, hi = -1e300;
  for (const auto &res : summary.at("results"))
    for (const auto &m : methods) {
      if (!res["methods"].contains(m)) continue;
      const auto &mean = res["methods"][m][metric]["mean"];
      if (!mean.is_number()) continue;
      const double v = mean.get<double>();
      series[m].push_back({res["R"].get<double>(), v});
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  std::sort(Rs.begin(), Rs.end());
  auto xpos = [&](double R) {
    if (Rs.size() == 1) return L + (W - L - Rm) / 2;
    const std::size_t i = std::find(Rs.begin(), Rs.end(), R) - Rs.begin();
    return L + (W - L - Rm) * static_cast<double>(i) / static_cast<double>(Rs.size() - 1);
  };
  auto ypos = [&](double v) { return T + (H - T - B) * (1.0 - (v - lo) / (hi - lo)); };
  static const char *colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ofstream out(path);
  require(out.good(), ErrorKind::Data, "cannot write " + path.string());
  out << std::setprecision(6);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - Rm << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (double R : Rs)
    out << "<text x=\"" << xpos(R) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << r_label(R) << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    std::ostringstream tick;
    tick << std::setprecision(4) << v;
    out << "<text x=\"" << L - 6 << "\" y=\"" << ypos(v) + 4 << "\" text-anchor=\"end\">" << tick.str() << "</text>\n";
    out << "<line x1=\"" << L << "\" y1=\"" << ypos(v) << "\" x2=\"" << W - Rm << "\" y2=\"" << ypos(v) << "\" stroke=\"#ddd\"/>\n";
  }
  out << "<text x=\"" << (L + W - Rm) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">acceleration</text>\n";
  out << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 16 " << (T + H - B) / 2
      << ")\" text-anchor=\"middle\">" << metric << "</text>\n";
  int k = 0;
  for (const auto &m : methods) {
    if (!series.contains(m)) continue;
    auto pts = series[m];
    std::sort(pts.begin(), pts.end());
    const char *c = colors[k % 6];
    out << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
    for (const auto &[R, v] : pts) out << xpos(R) << "," << ypos(v) << " ";
    out << "\"/>\n";
    for (const auto &[R, v] : pts) out << "<circle cx=\"" << xpos(R) << "\" cy=\"" << ypos(v) << "\" r=\"3\" fill=\"" << c << "\"/>\n";
    const double ly = T + 16.0 * k;
    out << "<line x1=\"" << W - Rm + 15 << "\" y1=\"" << ly << "\" x2=\"" << W - Rm + 35 << "\" y2=\"" << ly << "\" stroke=\"" << c
        << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << W - Rm + 40 << "\" y=\"" << ly + 4 << "\">" << m << "</text>\n";
    ++k;
  }
  out << "</svg>\n";
}

json evaluate_stage(const ExperimentConfig &cfg) {
  const auto rows = evaluate_rows(cfg);
  const json summary = summarize(rows);
  const fs::path dir = output_root(cfg) / "evaluation";
  fs::create_directories(dir);
  write_rows_csv(dir / "metrics.csv", rows);
  std::ofstream(dir / "summary.json") << summary.dump(2) << "\n";
  for (const char *m : {"ssim", "psnr", "nrmse"}) write_metric_plot(dir / (std::string(m) + "_vs_R.svg"), summary, m);
  return summary;
}

// ---- reconstruct ----

ReconstructResult reconstruct_volume(const ExperimentConfig &cfg, const ReconstructRequest &req) {
  const KSpaceContainer c = read_container(req.container);
  require(!c.kspace.empty(), ErrorKind::Data, req.container.string() + ": no slices");
  const VarNet net = req.varnet ? load_varnet(*req.varnet) : VarNet(cfg.varnet);
  std::optional<Enhancer> en;
  PriorSource source = req.prior_source;
  if (req.enhancer) {
    en.emplace(load_enhancer(*req.enhancer));
    source = en->config().prior_source;
  }
  std::optional<Volume> prior;
  if (en && source != PriorSource::None) {
    require(req.prior.has_value(), ErrorKind::Configuration,
            "prior_source=" + to_string(source) + " requires a prior volume (--prior)");
    prior = read_nifti(*req.prior);
    require(prior->dims() == c.kspace.front().dims(), ErrorKind::Data,
            "prior volume dims " + to_string(prior->dims()) + " differ from k-space dims " + to_string(c.kspace.front().dims()));
  }
  const int n = static_cast<int>(c.kspace.size());
  Volume vol;
  json per_slice = json::array(), warnings = json::array();
  std::vector<double> reg_t, rec_t;
  for (int s = 0; s < n; ++s) {
    KSpaceTensor k = c.kspace[s];
    const double f = normalize_kspace(k);
    auto t0 = std::chrono::steady_clock::now();
    ImageSlice y = varnet_forward(net, k, c.mask);
    double rec = seconds_since(t0), reg = 0.0;
    if (en) {
      std::optional<ImageSlice> p;
      if (prior) {
        auto a = align_prior(matching_slice(*prior, s, n), y, cfg.registration);
        reg = a.seconds;
        if (!a.warning.empty()) warnings.push_back("slice " + std::to_string(s) + ": " + a.warning);
        p = std::move(a.registered);
      }
      t0 = std::chrono::steady_clock::now();
      const double m = y.max_abs();
      y = enhance_forward(*en, unit_max(y), p ? &*p : nullptr);
      if (m > 0.0)
        for (auto &v : y.storage()) v *= m;
      rec += seconds_since(t0);
    }
    for (auto &v : y.storage()) v /= f;
    vol.slices.push_back(std::move(y));
    reg_t.push_back(reg);
    rec_t.push_back(rec);
    per_slice.push_back({{"slice", s}, {"registration_seconds", reg}, {"reconstruction_seconds", rec}});
  }
  double reg_sum = 0.0, rec_sum = 0.0;
  for (double x : reg_t) reg_sum += x;
  for (double x : rec_t) rec_sum += x;
  json timing = {{"container", req.container.string()},
                 {"subject_id", c.subject_id},
                 {"n_slices", n},
                 {"enhanced", en.has_value()},
                 {"prior_source", en ? to_string(source) : "unused"},
                 {"registration_backend", to_string(cfg.registration.backend)},
                 {"registration_seconds", reg_sum},
                 {"reconstruction_seconds", rec_sum},
                 {"median_registration_seconds_per_slice", median(reg_t)},
                 {"median_reconstruction_seconds_per_slice", median(rec_t)},
                 {"per_slice", per_slice},
                 {"warnings", warnings}};
  if (!req.output.empty()) {
    if (!req.output.parent_path().empty()) fs::create_directories(req.output.parent_path());
    write_nifti(req.output, vol);
  }
  if (!req.timing_report.empty()) {
    if (!req.timing_report.parent_path().empty()) fs::create_directories(req.timing_report.parent_path());
    std::ofstream out(req.timing_report);
    require(out.good(), ErrorKind::Data, "cannot write " + req.timing_report.string());
    out << timing.dump(2) << "\n";
  }
  return {std::move(vol), std::move(timing)};
}

// ---- report ----

std::string render_report(const json &summary) {
  std::ostringstream o;
  o << std::fixed;
  o << "# Evaluation report\n\n";
  const double alpha = summary.value("alpha", 0.05);
  for (const auto &res : summary.at("results")) {
    o << "## " << res.at("label").get<std::string>() << "\n\n";
    o << "| method | n | SSIM | PSNR (dB) | NRMSE |\n|---|---|---|---|---|\n";
    for (const auto &m : summary.at("methods")) {
      const std::string name = m.get<std::string>();
      if (!res["methods"].contains(name)) continue;
      const auto &e = res["methods"][name];
      o << "| " << name << " | " << e["n"].get<int>();
      for (const char *metric : {"ssim", "psnr", "nrmse"}) {
        const auto &mean = e[metric]["mean"];
        const auto &sd = e[metric]["std"];
        o << " | ";
        if (mean.is_number()) o << std::setprecision(4) << mean.get<double>();
        else o << mean.get<std::string>();
        if (sd.is_number()) o << " ± " << std::setprecision(4) << sd.get<double>();
      }
      o << " |\n";
    }
    o << "\nPairwise Wilcoxon signed-rank tests on SSIM (alpha " << std::setprecision(2) << alpha << "):\n\n";
    o << "| a | b | mean diff | p | significant |\n|---|---|---|---|---|\n";
    for (const auto &c : res.at("comparisons")) {
      if (c["metric"] != "ssim") continue;
      o << "| " << c["a"].get<std::string>() << " | " << c["b"].get<std::string>() << " | ";
      if (c["mean_diff"].is_number()) o << std::setprecision(4) << c["mean_diff"].get<double>();
      o << " | ";
      if (c["p_value"].is_number()) o << std::scientific << std::setprecision(2) << c["p_value"].get<double>() << std::fixed;
      else o << c["note"].get<std::string>();
      o << " | " << (c["significant"].get<bool>() ? "yes" : "no") << " |\n";
    }
    o << "\n";
  }
  return o.str();
}

} // namespace priorecon
