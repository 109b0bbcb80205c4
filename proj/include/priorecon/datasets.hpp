#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "priorecon/io.hpp"
#include "priorecon/registration.hpp"
#include "priorecon/types.hpp"

namespace priorecon {

enum class Provenance { Synthetic, Ingested };

struct LongitudinalCase {
  std::string subject_id;
  Volume current;
  std::optional<Volume> prior;
  Provenance provenance = Provenance::Synthetic;
  // Hard tissue-class labels (synthetic cases only).
  std::optional<Volume> current_labels;
  std::optional<Volume> prior_labels;
};

struct PhantomConfig {
  int n_tissue_classes = 4; // background, CSF-like, gray-like, white-like
  int n_coils = 4;
  double deformation_magnitude = 2.0; // pixels
  double contrast_shift = 0.05;
  double atrophy_factor = 0.9; // ventricle scale of the prior relative to the current scan
  double noise_std = 0.0;
  std::uint64_t seed = 0;
  Dims dims{48, 48};
  int n_slices = 8;

  void validate() const;
};

void to_json(nlohmann::json &j, const PhantomConfig &c);
void from_json(const nlohmann::json &j, PhantomConfig &c);

// Current scan from randomized smooth ellipsoids; prior = current structure
// under a smooth deformation, contrast change, ventricle scaling and noise.
LongitudinalCase generate_phantom_pair(const PhantomConfig &cfg, const std::string &subject_id = "");

// RSS-normalized low-order complex polynomial coil profiles.
CoilSensitivityMaps synthesize_sensitivities(int n_coils, Dims dims, std::uint64_t seed);

struct SliceSample {
  ImageSlice reference;
  KSpaceTensor kspace_full;
  SamplingMask mask;
  KSpaceTensor kspace_under;
  std::optional<ImageSlice> prior;
  std::string subject_id;
  int slice_index = 0;
  CoilSensitivityMaps true_maps;
  ComplexImage image; // noise-free complex image before coil expansion
};

struct AcquisitionOptions {
  int center_radius = 4;
  double noise_std = 0.0; // complex Gaussian added to k-space
  bool smooth_phase = true;
};

// One mask per volume; per slice expand with synthetic maps, transform,
// add noise, undersample.
std::vector<SliceSample> simulate_acquisition(const LongitudinalCase &c, int n_coils, double R, std::uint64_t seed,
                                              const AcquisitionOptions &opts = {});

Volume exclude_peripheral(const Volume &v, int n = 50);

// img / max|img|; records the divisor in intensity_max.
ImageSlice normalize(const ImageSlice &img);

struct AugmentationParams {
  double rotation_degrees = 0.0;
  double translate_y = 0.0; // fraction of ny
  double translate_z = 0.0; // fraction of nz
  double scale = 1.0;
};
AugmentationParams draw_augmentation(std::uint64_t seed);
RegistrationTransform augmentation_transform(const AugmentationParams &p, Dims dims);
ImageSlice apply_augmentation(const ImageSlice &img, const AugmentationParams &p);
std::pair<ImageSlice, ImageSlice> augment(const ImageSlice &current, const ImageSlice &prior, std::uint64_t seed);

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};
SplitIndices split_subjects(std::size_t n_subjects, const std::array<double, 3> &fractions, std::uint64_t seed);

// Ingests current/prior magnitude volumes (NIfTI).
LongitudinalCase load_case(const std::string &subject_id, const std::filesystem::path &current,
                           const std::optional<std::filesystem::path> &prior);

struct ManifestEntry {
  std::string subject_id;
  std::string current;
  std::string prior; // empty: none
  std::string split; // train | val | test
};

struct Manifest {
  std::vector<ManifestEntry> subjects;
  nlohmann::json generator; // phantom config or ingestion notes
};

void write_manifest(const std::filesystem::path &path, const Manifest &m);
Manifest read_manifest(const std::filesystem::path &path);

} // namespace priorecon
