#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "priorecon/io.hpp"
#include "priorecon/mask.hpp"
#include "priorecon/pipeline.hpp"

namespace fs = std::filesystem;
using namespace priorecon;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::string output_dir;
  std::optional<std::uint64_t> seed;
  std::vector<double> R;
  std::vector<std::string> prior_sources;
  std::optional<int> epochs;
};

void add_common(CLI::App *cmd, Common &c, bool training = false) {
  cmd->add_option("-c,--config", c.config, "experiment config (JSON)");
  cmd->add_option("-o,--output-dir", c.output_dir, "override output_dir");
  cmd->add_option("--seed", c.seed, "override seed");
  cmd->add_option("-R,--acceleration", c.R, "override acceleration factors");
  cmd->add_option("--prior-sources", c.prior_sources, "override enhancer prior sources (subject_prior, atlas, none)");
  if (training) cmd->add_option("--epochs", c.epochs, "override epochs");
}

ExperimentConfig resolve(const Common &c, const std::string &command) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment(c.config);
  if (!c.output_dir.empty()) cfg.output_dir = c.output_dir;
  if (c.seed) cfg.seed = *c.seed;
  if (!c.R.empty()) cfg.acceleration_factors = c.R;
  if (!c.prior_sources.empty()) {
    cfg.enhancer_prior_sources.clear();
    for (const auto &s : c.prior_sources) cfg.enhancer_prior_sources.push_back(prior_source_from_string(s));
  }
  if (c.epochs) {
    cfg.train_recon.epochs = *c.epochs;
    cfg.train_enhance.epochs = *c.epochs;
  }
  cfg.validate();
  write_resolved_config(cfg, command);
  return cfg;
}

void print(const json &j) { std::cout << j.dump(2) << std::endl; }

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Prior-informed accelerated MRI reconstruction"};
  app.require_subcommand(1);

  Common gen_c;
  std::optional<int> n_subjects;
  auto *gen = app.add_subcommand("phantom-gen", "generate synthetic longitudinal phantom subjects and a manifest");
  add_common(gen, gen_c);
  gen->add_option("-n,--n-subjects", n_subjects, "number of subjects");

  std::vector<int> mask_dims{218, 170};
  double mask_R = 5.0;
  int mask_radius = 16;
  std::uint64_t mask_seed = 0;
  std::string mask_out = "mask.nii.gz";
  auto *mask = app.add_subcommand("mask-gen", "generate a Poisson-disc undersampling mask");
  mask->add_option("--dims", mask_dims, "ny nz")->expected(2);
  mask->add_option("-R,--acceleration", mask_R, "target acceleration")->required();
  mask->add_option("--center-radius", mask_radius, "fully sampled center disc radius");
  mask->add_option("--seed", mask_seed, "seed");
  mask->add_option("--out", mask_out, "output NIfTI (JSON stats written alongside)");

  Common sim_c;
  std::string sim_split = "test";
  auto *sim = app.add_subcommand("simulate", "write undersampled k-space containers for a split");
  add_common(sim, sim_c);
  sim->add_option("--split", sim_split, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));

  Common tr_c, te_c, ev_c, rep_c, rec_c;
  auto *tr = app.add_subcommand("train-recon", "train one varnet per acceleration factor");
  add_common(tr, tr_c, true);
  auto *te = app.add_subcommand("train-enhance", "train enhancers (frozen varnet) per acceleration and prior source");
  add_common(te, te_c, true);

  ReconstructRequest req;
  std::string rec_input, rec_varnet, rec_enhancer, rec_prior, rec_source = "subject_prior", rec_out, rec_timing;
  auto *rec = app.add_subcommand("reconstruct", "reconstruct a k-space container to a NIfTI volume");
  add_common(rec, rec_c);
  rec->add_option("-i,--input", rec_input, "k-space container (HDF5)")->required();
  rec->add_option("--varnet", rec_varnet, "varnet checkpoint (default: untrained model from the config)");
  rec->add_option("--enhancer", rec_enhancer, "enhancer checkpoint (omit for the non-enhanced reconstruction)");
  rec->add_option("--prior", rec_prior, "prior or atlas volume (NIfTI)");
  rec->add_option("--prior-source", rec_source, "subject_prior, atlas or none");
  rec->add_option("--out", rec_out, "output NIfTI")->required();
  rec->add_option("--timing", rec_timing, "timing report (default: <out>.timing.json)");

  auto *ev = app.add_subcommand("evaluate", "per-slice metrics, aggregates, Wilcoxon tests and plots on the test split");
  add_common(ev, ev_c);

  std::string rep_summary, rep_out;
  auto *rep = app.add_subcommand("report", "render the evaluation summary as Markdown");
  add_common(rep, rep_c);
  rep->add_option("--summary", rep_summary, "evaluation summary.json (default: <output>/evaluation/summary.json)");
  rep->add_option("--out", rep_out, "output Markdown (default: <output>/report.md)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      ExperimentConfig cfg = gen_c.config.empty() ? ExperimentConfig{} : load_experiment(gen_c.config);
      if (n_subjects) cfg.dataset.n_subjects = *n_subjects;
      if (!gen_c.output_dir.empty()) cfg.output_dir = gen_c.output_dir;
      if (gen_c.seed) cfg.seed = *gen_c.seed;
      require(cfg.dataset.n_subjects > 0, ErrorKind::Configuration, "phantom-gen: n_subjects must be positive");
      cfg.validate();
      write_resolved_config(cfg, "phantom-gen");
      const auto m = generate_dataset(cfg);
      print({{"manifest", (output_root(cfg) / "data" / "manifest.json").string()}, {"n_subjects", m.subjects.size()}});
    } else if (*mask) {
      const Dims d{mask_dims.at(0), mask_dims.at(1)};
      const SamplingMask m = mask_R == 1.0 ? full_mask(d) : generate_poisson_mask(d, mask_R, mask_radius, mask_seed);
      Volume v;
      v.slices.emplace_back(d);
      for (std::size_t i = 0; i < d.size(); ++i) v.slices[0][i] = m.mask[i];
      const fs::path out = mask_out;
      if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
      write_nifti(out, v);
      const json stats = {{"dims", {d.ny, d.nz}},
                          {"target_R", mask_R},
                          {"achieved_R", m.achieved_acceleration()},
                          {"n_sampled", m.n_sampled()},
                          {"center_radius", mask_radius},
                          {"seed", mask_seed},
                          {"mask", out.string()}};
      std::ofstream(out.string() + ".json") << stats.dump(2) << "\n";
      print(stats);
    } else if (*sim) {
      const auto cfg = resolve(sim_c, "simulate");
      const auto all = load_subjects(cfg);
      json written = json::array();
      for (double R : cfg.acceleration_factors)
        for (const auto &s : all) {
          if (sim_split != "all" && s.split != sim_split) continue;
          const auto samples = acquire(cfg, s, R);
          KSpaceContainer c;
          c.subject_id = s.data.subject_id;
          c.mask = samples.front().mask;
          for (const auto &x : samples) {
            c.kspace.push_back(x.kspace_under);
            c.sens_maps.push_back(x.true_maps);
            c.reference.push_back(x.reference);
          }
          const fs::path p = output_root(cfg) / "kspace" / r_label(R) / (s.data.subject_id + ".h5");
          fs::create_directories(p.parent_path());
          write_container(p, c);
          written.push_back(p.string());
        }
      print({{"containers", written}});
    } else if (*tr) {
      print(json(train_recon_stage(resolve(tr_c, "train-recon")).runs));
    } else if (*te) {
      print(json(train_enhance_stage(resolve(te_c, "train-enhance")).runs));
    } else if (*rec) {
      const auto cfg = resolve(rec_c, "reconstruct");
      req.container = rec_input;
      if (!rec_varnet.empty()) req.varnet = rec_varnet;
      if (!rec_enhancer.empty()) req.enhancer = rec_enhancer;
      if (!rec_prior.empty()) req.prior = rec_prior;
      req.prior_source = prior_source_from_string(rec_source);
      req.output = rec_out;
      req.timing_report = rec_timing.empty() ? fs::path(rec_out + ".timing.json") : fs::path(rec_timing);
      const auto res = reconstruct_volume(cfg, req);
      json t = res.timing;
      t.erase("per_slice");
      t["output"] = rec_out;
      t["timing_report"] = req.timing_report.string();
      print(t);
    } else if (*ev) {
      const auto cfg = resolve(ev_c, "evaluate");
      const auto summary = evaluate_stage(cfg);
      std::cout << render_report(summary);
    } else if (*rep) {
      const auto cfg = resolve(rep_c, "report");
      const fs::path sp = rep_summary.empty() ? output_root(cfg) / "evaluation" / "summary.json" : fs::path(rep_summary);
      std::ifstream in(sp);
      require(in.good(), ErrorKind::Configuration, "no evaluation summary at " + sp.string() + "; run evaluate first");
      json summary;
      try {
        in >> summary;
      } catch (const json::exception &e) {
        fail(ErrorKind::Data, sp.string() + ": " + e.what());
      }
      const std::string text = render_report(summary);
      const fs::path out = rep_out.empty() ? output_root(cfg) / "report.md" : fs::path(rep_out);
      std::ofstream(out) << text;
      std::cout << text;
    }
  } catch (const Error &e) {
    std::cerr << "error: " << e.what() << std::endl;
    return exit_code(e.kind());
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 4;
  }
  return 0;
}
