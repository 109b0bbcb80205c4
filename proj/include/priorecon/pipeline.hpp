#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "priorecon/datasets.hpp"
#include "priorecon/models/enhancer.hpp"
#include "priorecon/models/varnet.hpp"
#include "priorecon/registration.hpp"
#include "priorecon/training.hpp"

namespace priorecon {

void to_json(nlohmann::json &j, const RegistrationOptions &o);
void from_json(const nlohmann::json &j, RegistrationOptions &o);

struct DatasetSpec {
  // Used when manifest is empty.
  PhantomConfig phantom;
  int n_subjects = 20;
  // Existing manifest of ingested volumes (paths relative to the manifest).
  std::string manifest;
  std::array<double, 3> split{0.6, 0.2, 0.2};
  int n_coils = 4;
  // <= 0: 16 scaled by min(ny, nz) / 170, at least 2.
  int center_radius = -1;
  double noise_std = 0.0;
  int exclude_peripheral = 0;
};

void to_json(nlohmann::json &j, const DatasetSpec &d);
void from_json(const nlohmann::json &j, DatasetSpec &d);

struct ExperimentConfig {
  std::string output_dir = "run";
  std::uint64_t seed = 0;
  DatasetSpec dataset;
  std::vector<double> acceleration_factors{5, 10};
  // Prior used by reconstruct.
  PriorSource prior_source = PriorSource::SubjectPrior;
  // Enhancers trained by train-enhance and compared by evaluate.
  std::vector<PriorSource> enhancer_prior_sources{PriorSource::SubjectPrior, PriorSource::Atlas};
  // Atlas volume; empty: mean of the training subjects' current volumes.
  std::string atlas;
  RegistrationOptions registration;
  VarNetConfig varnet;
  EnhancerConfig enhancer;
  TrainConfig train_recon = TrainConfig::defaults(Stage::Recon);
  TrainConfig train_enhance = TrainConfig::defaults(Stage::Enhance);

  void validate() const;
};

void to_json(nlohmann::json &j, const ExperimentConfig &c);
void from_json(const nlohmann::json &j, ExperimentConfig &c);
ExperimentConfig load_experiment(const std::filesystem::path &path);

// Output directory after applying PRIORECON_OUTPUT_ROOT to relative paths.
std::filesystem::path output_root(const ExperimentConfig &cfg);
// Writes <output>/resolved/<command>.json.
void write_resolved_config(const ExperimentConfig &cfg, const std::string &command);

std::string r_label(double R); // 5 -> "R5", 2.5 -> "R2.5"
int default_center_radius(Dims dims);

// ---- model artifacts ----
void save_varnet(const std::filesystem::path &dir, const VarNet &net, const nlohmann::json &extra = {});
VarNet load_varnet(const std::filesystem::path &dir);
void save_enhancer(const std::filesystem::path &dir, const Enhancer &net, const nlohmann::json &extra = {});
Enhancer load_enhancer(const std::filesystem::path &dir);

std::filesystem::path varnet_dir(const ExperimentConfig &cfg, double R);
std::filesystem::path enhancer_dir(const ExperimentConfig &cfg, double R, PriorSource source);

// ---- data ----
struct Subject {
  LongitudinalCase data;
  std::string split;
  std::size_t index = 0; // position in the manifest, used for seeding
};

// Phantom dataset: volumes + manifest under <output>/data. Deterministic per seed.
Manifest generate_dataset(const ExperimentConfig &cfg);
// Reads the configured manifest (or the generated one, generating it if absent).
std::vector<Subject> load_subjects(const ExperimentConfig &cfg);
std::vector<const Subject *> subjects_in(const std::vector<Subject> &all, const std::string &split);

// Mean of per-volume max-normalized current volumes of the training subjects.
Volume build_atlas(const std::vector<const Subject *> &train);
Volume resolve_atlas(const ExperimentConfig &cfg, const std::vector<Subject> &all);
// Slice of `vol` matching slice `s` of an n-slice target (nearest by relative position).
const ImageSlice &matching_slice(const Volume &vol, int s, int n);

// Acquisition of every slice of a subject at R, rescaled so that the
// zero-filled image has maximum 1 (reference and image scaled alike).
std::vector<SliceSample> acquire(const ExperimentConfig &cfg, const Subject &s, double R);
// Scales k-space by 1 / max(zero-filled); returns the factor.
double normalize_kspace(KSpaceTensor &k);
// img / max (zero image returned unchanged).
ImageSlice unit_max(const ImageSlice &img);
// SSIM of both images max-normalized, data range 1 (the loss convention).
double normalized_ssim(const ImageSlice &img, const ImageSlice &reference);

// ---- training objectives ----
class ReconObjective : public Objective {
public:
  ReconObjective(VarNet &net, std::vector<SliceSample> train, std::vector<SliceSample> val);
  ad::ParameterSet &params() override { return net_.params(); }
  std::size_t train_size() const override { return train_.size(); }
  std::size_t val_size() const override { return val_.size(); }
  ad::Var loss(ad::Graph &g, std::size_t index, std::uint64_t seed, bool augment) override;
  double validate(std::size_t index) override;
  nlohmann::json describe() const override;

private:
  VarNet &net_;
  std::vector<SliceSample> train_, val_;
};

struct EnhanceSample {
  ImageSlice y_hat;
  std::optional<ImageSlice> prior; // registered
  ImageSlice reference;
  std::string subject_id;
  int slice_index = 0;
};

class EnhanceObjective : public Objective {
public:
  EnhanceObjective(Enhancer &net, std::vector<EnhanceSample> train, std::vector<EnhanceSample> val);
  ad::ParameterSet &params() override { return net_.params(); }
  std::size_t train_size() const override { return train_.size(); }
  std::size_t val_size() const override { return val_.size(); }
  ad::Var loss(ad::Graph &g, std::size_t index, std::uint64_t seed, bool augment) override;
  double validate(std::size_t index) override;
  nlohmann::json describe() const override;

private:
  Enhancer &net_;
  std::vector<EnhanceSample> train_, val_;
};

// Registers the prior slice (unit-max) to y_hat. Adapter failures and
// timeouts fall back to the unregistered prior and set `warning`.
struct PriorAlignment {
  ImageSlice registered;
  double seconds = 0.0;
  std::string warning;
};
PriorAlignment align_prior(const ImageSlice &prior, const ImageSlice &y_hat, const RegistrationOptions &opts);

// Zero-filled and varnet images of every slice of the given subjects;
// y_hat and reference are max-normalized.
struct InitialSlice {
  const Subject *subject = nullptr;
  int slice = 0;
  ImageSlice zero_filled, y_hat, reference;
};
std::vector<InitialSlice> initial_reconstructions(const ExperimentConfig &cfg, const VarNet &net,
                                                  const std::vector<const Subject *> &subjects, double R);
// Attaches the aligned prior of `source` (subject prior, atlas slice or none).
std::vector<EnhanceSample> attach_priors(const std::vector<InitialSlice> &base, PriorSource source, const Volume *atlas,
                                         const RegistrationOptions &opts);

// ---- stages ----
struct StageSummary {
  std::vector<nlohmann::json> runs;
};
StageSummary train_recon_stage(const ExperimentConfig &cfg);
StageSummary train_enhance_stage(const ExperimentConfig &cfg);

struct MetricRow {
  std::string subject_id;
  int slice = 0;
  double R = 0.0;
  std::string method;
  double ssim = 0.0, psnr = 0.0, nrmse = 0.0;
};

std::string method_name(PriorSource s); // enhanced_subject_prior, enhanced_atlas, enhanced_none

// Per-slice metrics on the test split for every R and method.
std::vector<MetricRow> evaluate_rows(const ExperimentConfig &cfg);
// Aggregates + pairwise Wilcoxon tests per R and metric.
nlohmann::json summarize(const std::vector<MetricRow> &rows, double alpha = 0.05);
void write_rows_csv(const std::filesystem::path &path, const std::vector<MetricRow> &rows);
// metric vs R per method
void write_metric_plot(const std::filesystem::path &path, const nlohmann::json &summary, const std::string &metric);
nlohmann::json evaluate_stage(const ExperimentConfig &cfg);

struct ReconstructRequest {
  std::filesystem::path container;
  std::optional<std::filesystem::path> varnet; // none: untrained model from the config
  std::optional<std::filesystem::path> enhancer;
  std::optional<std::filesystem::path> prior; // NIfTI
  PriorSource prior_source = PriorSource::SubjectPrior;
  std::filesystem::path output;        // NIfTI
  std::filesystem::path timing_report; // JSON
};

struct ReconstructResult {
  Volume volume;
  nlohmann::json timing;
};
ReconstructResult reconstruct_volume(const ExperimentConfig &cfg, const ReconstructRequest &req);

// Markdown tables from the evaluation summary.
std::string render_report(const nlohmann::json &summary);

} // namespace priorecon
