#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "priorecon/ad/graph.hpp"

namespace priorecon {

enum class Stage { Recon, Enhance };
std::string to_string(Stage s);
Stage stage_from_string(const std::string &s);

struct TrainConfig {
  Stage stage = Stage::Recon;
  int epochs = 200;
  int batch_size = 64;
  double lr_init = 1e-3;
  int plateau_patience = 5;
  double plateau_factor = 0.5;
  double min_lr = 1e-6;
  int early_stop_patience = 10;
  double improvement_tol = 1e-6;
  bool augment = true;
  std::uint64_t seed = 0;

  // Stage defaults: recon 200 epochs / batch 64, enhance 100 / 32.
  static TrainConfig defaults(Stage stage);
  void validate() const;
};

void to_json(nlohmann::json &j, const TrainConfig &c);
void from_json(const nlohmann::json &j, TrainConfig &c);

struct TrainState {
  int epoch = 0; // completed epochs
  double best_val = -std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int since_improvement = 0;
  int since_reduction = 0;
  double lr = 0.0;
  bool stopped_early = false;
};

void to_json(nlohmann::json &j, const TrainState &s);
void from_json(const nlohmann::json &j, TrainState &s);

struct EpochDecision {
  bool improved = false;
  bool lr_reduced = false;
  bool stop = false;
};

// Records one validation score: improvement check, plateau lr reduction,
// early stopping.
EpochDecision advance(TrainState &state, double val_score, const TrainConfig &cfg);

class Adam {
public:
  explicit Adam(const ad::ParameterSet &ps, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(ad::ParameterSet &ps, const std::vector<std::vector<double>> &grads, double lr);

  std::int64_t t = 0;
  std::vector<std::vector<double>> m, v;

private:
  double beta1_, beta2_, eps_;
};

class Objective {
public:
  virtual ~Objective() = default;
  virtual ad::ParameterSet &params() = 0;
  virtual std::size_t train_size() const = 0;
  virtual std::size_t val_size() const = 0;
  // Scalar training loss of one sample; `seed` drives augmentation.
  virtual ad::Var loss(ad::Graph &g, std::size_t index, std::uint64_t seed, bool augment) = 0;
  // Validation SSIM of one sample.
  virtual double validate(std::size_t index) = 0;
  // Stored in checkpoint metadata.
  virtual nlohmann::json describe() const { return nlohmann::json::object(); }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_ssim = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
};

void to_json(nlohmann::json &j, const EpochRecord &r);
void from_json(const nlohmann::json &j, EpochRecord &r);

struct TrainOptions {
  // Receives train_log.jsonl, last/ (resume state) and best/ (model). Empty: nothing written.
  std::filesystem::path run_dir;
  bool resume = false;
  // Return after this many epochs in this call (< 0: no limit).
  int max_epochs_this_call = -1;
  std::function<void(const EpochRecord &)> on_epoch;
};

struct TrainResult {
  TrainState state;
  std::vector<EpochRecord> log;
  bool finished = false; // stopped early or exhausted epochs
};

// Minimizes the objective with Adam; leaves the best-on-validation
// parameters in objective.params().
TrainResult train(Objective &objective, const TrainConfig &cfg, const TrainOptions &opts = {});

// Checkpoint directory: config.json (metadata, tensor table, crc32) and
// tensors.bin (little-endian float64), written to a temp dir then renamed.
struct TensorRecord {
  std::string name;
  ad::Shape shape;
  std::vector<double> data;
};

void write_checkpoint(const std::filesystem::path &dir, const nlohmann::json &meta, const std::vector<TensorRecord> &tensors);
std::pair<nlohmann::json, std::vector<TensorRecord>> read_checkpoint(const std::filesystem::path &dir);

std::vector<TensorRecord> parameter_records(const ad::ParameterSet &ps, const std::string &prefix = "");
// Copies records named prefix + p.name into ps; names and shapes must match exactly.
void assign_parameters(ad::ParameterSet &ps, const std::vector<TensorRecord> &records, const std::string &prefix = "");

} // namespace priorecon
