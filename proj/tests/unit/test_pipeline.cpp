#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <unistd.h>

#include "priorecon/io.hpp"
#include "priorecon/kspace.hpp"
#include "priorecon/metrics.hpp"
#include "priorecon/pipeline.hpp"

using namespace priorecon;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string &name) {
  auto p = fs::temp_directory_path() / ("priorecon_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ExperimentConfig tiny_experiment(const fs::path &out) {
  ExperimentConfig c;
  c.output_dir = out.string();
  c.seed = 3;
  c.dataset.phantom.dims = {24, 24};
  c.dataset.phantom.n_slices = 2;
  c.dataset.n_subjects = 5;
  c.dataset.split = {0.6, 0.2, 0.2};
  c.dataset.n_coils = 2;
  c.acceleration_factors = {4};
  c.varnet.n_cascades = 1;
  c.varnet.unet_channels = 2;
  c.varnet.unet_depth = 2;
  c.varnet.sme_channels = 2;
  c.varnet.sme_depth = 1;
  c.enhancer.patch_size = 8;
  c.enhancer.embed_dim = 8;
  c.enhancer.n_heads = 2;
  c.enhancer.n_blocks = 1;
  c.enhancer_prior_sources = {PriorSource::SubjectPrior, PriorSource::Atlas, PriorSource::None};
  c.registration.iterations_per_level = 20;
  for (auto *t : {&c.train_recon, &c.train_enhance}) {
    t->epochs = 1;
    t->batch_size = 4;
  }
  return c;
}

MetricRow row(const std::string &method, int slice, double ssim) { return {"s", slice, 5.0, method, ssim, 30.0 + ssim, 1.0 - ssim}; }

} // namespace

TEST_CASE("experiment config json roundtrip and validation") {
  ExperimentConfig c = tiny_experiment("out");
  nlohmann::json j = c;
  auto back = j.get<ExperimentConfig>();
  CHECK(back.acceleration_factors == c.acceleration_factors);
  CHECK(back.enhancer_prior_sources.size() == 3);
  CHECK(back.varnet.unet_channels == 2);
  CHECK(back.train_enhance.stage == Stage::Enhance);
  CHECK(nlohmann::json(back) == j);

  j["acceleration_factor"] = {5};
  CHECK_THROWS_AS(j.get<ExperimentConfig>(), Error);
  auto bad = c;
  bad.acceleration_factors = {};
  CHECK_THROWS_AS(bad.validate(), Error);
  bad.acceleration_factors = {0.5};
  CHECK_THROWS_AS(bad.validate(), Error);
  nlohmann::json src = c;
  src["prior_source"] = "neighbour";
  try {
    src.get<ExperimentConfig>();
    FAIL("expected throw");
  } catch (const Error &e) {
    CHECK(exit_code(e.kind()) == 2);
  }
}

TEST_CASE("load_experiment resolves paths relative to the config file") {
  auto dir = temp_dir("cfg");
  std::ofstream(dir / "c.json") << R"({"dataset": {"manifest": "data/manifest.json"}, "atlas": "atlas.nii"})";
  auto c = load_experiment(dir / "c.json");
  CHECK(fs::path(c.dataset.manifest) == dir / "data" / "manifest.json");
  CHECK(fs::path(c.atlas) == dir / "atlas.nii");
  std::ofstream(dir / "broken.json") << "{ nope";
  CHECK_THROWS_AS(load_experiment(dir / "broken.json"), Error);
  fs::remove_all(dir);
}

TEST_CASE("output root environment override applies to relative paths") {
  ExperimentConfig c;
  c.output_dir = "rel/run";
  ::setenv("PRIORECON_OUTPUT_ROOT", "/tmp/root_x", 1);
  CHECK(output_root(c) == fs::path("/tmp/root_x/rel/run"));
  c.output_dir = "/abs/run";
  CHECK(output_root(c) == fs::path("/abs/run"));
  ::unsetenv("PRIORECON_OUTPUT_ROOT");
  c.output_dir = "rel/run";
  CHECK(output_root(c) == fs::path("rel/run"));
}

TEST_CASE("center radius scales with the image") {
  CHECK(default_center_radius({218, 170}) == 16);
  CHECK(default_center_radius({48, 48}) == 5);
  CHECK(default_center_radius({8, 8}) == 2);
}

TEST_CASE("phantom-gen: 3 subjects, deterministic, N=0 rejected") {
  auto dir = temp_dir("gen");
  auto c = tiny_experiment(dir / "a");
  c.dataset.n_subjects = 3;
  auto m = generate_dataset(c);
  CHECK(m.subjects.size() == 3);
  int dirs = 0;
  for (const auto &e : fs::directory_iterator(dir / "a" / "data"))
    if (e.is_directory()) ++dirs;
  CHECK(dirs == 3);
  CHECK(read_manifest(dir / "a" / "data" / "manifest.json").subjects.size() == 3);
  c.output_dir = (dir / "b").string();
  generate_dataset(c);
  CHECK(slurp(dir / "a" / "data" / "manifest.json") == slurp(dir / "b" / "data" / "manifest.json"));
  CHECK(slurp(dir / "a" / "data" / "sub-002" / "prior.nii.gz") == slurp(dir / "b" / "data" / "sub-002" / "prior.nii.gz"));
  c.dataset.n_subjects = 0;
  try {
    generate_dataset(c);
    FAIL("expected throw");
  } catch (const Error &e) {
    CHECK(e.kind() == ErrorKind::Configuration);
  }
  fs::remove_all(dir);
}

TEST_CASE("acquire: zero-filled maximum is 1 and splits are disjoint") {
  auto dir = temp_dir("acq");
  auto c = tiny_experiment(dir);
  const auto subjects = load_subjects(c);
  REQUIRE(subjects.size() == 5);
  std::set<std::string> ids;
  for (const char *split : {"train", "val", "test"})
    for (const auto *s : subjects_in(subjects, split)) CHECK(ids.insert(s->data.subject_id).second);
  CHECK(ids.size() == 5);
  for (const auto &smp : acquire(c, subjects[0], 4.0)) {
    CHECK(zero_filled(smp.kspace_under).max_abs() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(smp.mask.center_radius == default_center_radius({24, 24}));
  }
  const auto atlas = build_atlas(subjects_in(subjects, "train"));
  CHECK(atlas.n_slices() == 2);
  CHECK(atlas.slices[0].max_abs() <= 1.0 + 1e-12);
  fs::remove_all(dir);
}

TEST_CASE("matching_slice maps by relative position") {
  Volume v;
  for (int i = 0; i < 5; ++i) v.slices.emplace_back(Dims{2, 2}, static_cast<double>(i));
  CHECK(matching_slice(v, 0, 3)(0, 0) == 0.0);
  CHECK(matching_slice(v, 1, 3)(0, 0) == 2.0);
  CHECK(matching_slice(v, 2, 3)(0, 0) == 4.0);
  CHECK(matching_slice(v, 3, 5)(0, 0) == 3.0);
}

TEST_CASE("summary: self comparison is reported as no difference") {
  std::vector<MetricRow> rows;
  for (int i = 0; i < 6; ++i) {
    rows.push_back(row("a", i, 0.5 + 0.01 * i));
    rows.push_back(row("b", i, 0.5 + 0.01 * i));
  }
  auto s = summarize(rows);
  const auto &c = s["results"][0]["comparisons"][0];
  CHECK(c["a"] == "a");
  CHECK(c["defined"] == false);
  CHECK(c["note"] == "no difference");
  CHECK(c["significant"] == false);
}

TEST_CASE("summary: uniform improvements on 6 slices are significant") {
  std::vector<MetricRow> rows;
  for (int i = 0; i < 6; ++i) {
    rows.push_back(row("varnet", i, 0.8 + 0.01 * i));
    rows.push_back(row("enhanced_subject_prior", i, 0.82 + 0.01 * i + 0.001 * i));
  }
  auto s = summarize(rows);
  const auto &res = s["results"][0];
  CHECK(res["methods"]["varnet"]["n"] == 6);
  CHECK(res["methods"]["varnet"]["ssim"]["mean"].get<double>() == doctest::Approx(0.825));
  const auto &c = res["comparisons"][0];
  CHECK(c["metric"] == "ssim");
  CHECK(c["significant"] == true);
  CHECK(c["p_value"].get<double>() == doctest::Approx(0.03125));
  CHECK(c["mean_diff"].get<double>() < 0.0);
}

TEST_CASE("csv and plot writers") {
  auto dir = temp_dir("csv");
  std::vector<MetricRow> rows{row("varnet", 0, 0.9), row("zero_filled", 0, 0.6)};
  rows.push_back({"s", 0, 10.0, "varnet", 0.85, 28.0, 0.1});
  rows.push_back({"s", 0, 10.0, "zero_filled", 0.55, 22.0, 0.2});
  write_rows_csv(dir / "m.csv", rows);
  std::ifstream in(dir / "m.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "subject_id,slice,R,method,ssim,psnr,nrmse");
  auto s = summarize(rows);
  write_metric_plot(dir / "ssim.svg", s, "ssim");
  const auto svg = slurp(dir / "ssim.svg");
  CHECK(svg.find("<svg") == 0);
  CHECK(svg.find("polyline") != std::string::npos);
  CHECK(svg.find("R10") != std::string::npos);
  CHECK(render_report(s).find("| varnet |") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("evaluate names the missing checkpoint") {
  auto dir = temp_dir("missing");
  auto c = tiny_experiment(dir);
  try {
    evaluate_rows(c);
    FAIL("expected throw");
  } catch (const Error &e) {
    CHECK(e.kind() == ErrorKind::Configuration);
    CHECK(std::string(e.what()).find("recon") != std::string::npos);
    CHECK(std::string(e.what()).find("R4") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("model checkpoints roundtrip bit-identically") {
  auto dir = temp_dir("models");
  auto c = tiny_experiment(dir);
  VarNet net(c.varnet);
  for (auto &p : net.params().items())
    for (auto &v : p.value) v += 0.01;
  save_varnet(dir / "v", net);
  VarNet back = load_varnet(dir / "v");
  CHECK(back.params().flatten() == net.params().flatten());
  CHECK_THROWS_AS(load_enhancer(dir / "v"), Error);
  auto cfg2 = c.varnet;
  cfg2.unet_channels = 4;
  VarNet other(cfg2);
  std::vector<TensorRecord> recs = parameter_records(net.params());
  CHECK_THROWS_AS(assign_parameters(other.params(), recs), Error);

  Enhancer en(c.enhancer);
  save_enhancer(dir / "e", en);
  CHECK(load_enhancer(dir / "e").params().flatten() == en.params().flatten());
  fs::remove_all(dir);
}

TEST_CASE("reconstruct: R=1 with untrained models reproduces the reference") {
  auto dir = temp_dir("recon");
  auto c = tiny_experiment(dir);
  const auto subjects = load_subjects(c);
  const auto samples = simulate_acquisition(subjects[0].data, 2, 1.0, 5);
  KSpaceContainer kc;
  kc.subject_id = subjects[0].data.subject_id;
  kc.mask = samples[0].mask;
  for (const auto &s : samples) kc.kspace.push_back(s.kspace_under);
  write_container(dir / "r1.h5", kc);
  Enhancer en(c.enhancer);
  save_enhancer(dir / "enh", en);
  write_nifti(dir / "prior.nii", *subjects[0].data.prior);

  ReconstructRequest req;
  req.container = dir / "r1.h5";
  req.enhancer = dir / "enh";
  req.prior = dir / "prior.nii";
  req.output = dir / "out.nii.gz";
  req.timing_report = dir / "timing.json";
  auto res = reconstruct_volume(c, req);
  REQUIRE(res.volume.n_slices() == 2);
  for (int s = 0; s < 2; ++s) {
    const auto &ref = samples[s].reference;
    double err = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) err = std::max(err, std::abs(res.volume.slices[s][i] - ref[i]));
    CHECK(err / ref.max_abs() < 1e-5);
  }
  CHECK(fs::exists(dir / "out.nii.gz"));
  auto t = nlohmann::json::parse(slurp(dir / "timing.json"));
  for (const char *k : {"registration_seconds", "reconstruction_seconds", "median_registration_seconds_per_slice",
                        "median_reconstruction_seconds_per_slice"}) {
    REQUIRE(t.contains(k));
    CHECK(t[k].get<double>() >= 0.0);
  }
  CHECK(t["per_slice"].size() == 2);

  req.prior.reset();
  try {
    reconstruct_volume(c, req);
    FAIL("expected throw");
  } catch (const Error &e) {
    CHECK(e.kind() == ErrorKind::Configuration);
  }
  req.container = dir / "absent.h5";
  CHECK_THROWS_AS(reconstruct_volume(c, req), Error);
  fs::remove_all(dir);
}

TEST_CASE("registration timeout falls back to the identity with a warning") {
  auto dir = temp_dir("regfallback");
  RegistrationOptions opts;
  opts.backend = RegistrationBackend::External;
  opts.external.command_template = "sleep 5";
  opts.external.work_dir = dir;
  opts.external.timeout_seconds = 0.3;
  ImageSlice prior(Dims{12, 12}), y(Dims{12, 12});
  prior(4, 4) = 2.0;
  y(5, 5) = 1.0;
  auto a = align_prior(prior, y, opts);
  CHECK_FALSE(a.warning.empty());
  CHECK(a.registered(4, 4) == 1.0); // unit-max prior, unmoved
  CHECK(a.seconds >= 0.0);
  fs::remove_all(dir);
}

TEST_CASE("tiny end-to-end run emits one row per slice, method and R") {
  auto dir = temp_dir("e2e");
  auto c = tiny_experiment(dir);
  c.acceleration_factors = {4, 8};
  auto rr = train_recon_stage(c);
  CHECK(rr.runs.size() == 2);
  CHECK(fs::exists(varnet_dir(c, 4) / "best" / "config.json"));
  CHECK(fs::exists(varnet_dir(c, 8) / "train_log.jsonl"));
  auto er = train_enhance_stage(c);
  CHECK(er.runs.size() == 6);
  auto summary = evaluate_stage(c);
  const int test_slices = 2; // one test subject, two slices
  std::ifstream in(output_root(c) / "evaluation" / "metrics.csv");
  std::string line;
  int lines = -1;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == test_slices * 5 * 2);
  CHECK(summary["methods"].size() == 5);
  CHECK(fs::exists(output_root(c) / "evaluation" / "ssim_vs_R.svg"));
  const auto first = slurp(output_root(c) / "evaluation" / "metrics.csv");
  evaluate_stage(c);
  CHECK(slurp(output_root(c) / "evaluation" / "metrics.csv") == first);
  fs::remove_all(dir);
}
