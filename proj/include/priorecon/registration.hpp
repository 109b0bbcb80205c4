#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "priorecon/types.hpp"

namespace priorecon {

enum class RegistrationBackend { Identity, Affine, External };

std::string to_string(RegistrationBackend b);
RegistrationBackend registration_backend_from_string(const std::string &s);

// Maps fixed-image (row, col) coordinates to moving-image coordinates:
// warp(img, t)(x) = img(A x + d(x)).
struct RegistrationTransform {
  std::array<double, 9> affine{1, 0, 0, 0, 1, 0, 0, 0, 1}; // row-major 3x3 on (y, z, 1)
  std::optional<std::vector<std::array<double, 2>>> displacement_field;
  RegistrationBackend backend = RegistrationBackend::Identity;

  static RegistrationTransform identity();
  static RegistrationTransform translation(double dy, double dz);
  // Rotation by `degrees` about the center of `dims`.
  static RegistrationTransform rotation(double degrees, Dims dims);

  double determinant() const;
  bool is_identity() const;
  RegistrationTransform inverse() const;
  // Rotation angle of the linear part, degrees.
  double rotation_degrees() const;
  // Where the fixed point x lands in moving coordinates.
  std::array<double, 2> apply(double y, double z) const;
};

// (a then b): x -> b(a(x)); warping by the result equals warping by b first, then a.
RegistrationTransform compose(const RegistrationTransform &a, const RegistrationTransform &b);

ImageSlice warp(const ImageSlice &img, const RegistrationTransform &t);

// Normalized cross-correlation; 0 when either image is constant.
double ncc(const ImageSlice &a, const ImageSlice &b);

struct ExternalAdapterOptions {
  // Shell command with {moving}, {fixed} and {out} placeholders.
  std::string command_template;
  std::filesystem::path work_dir;
  double timeout_seconds = 120.0;
};

struct RegistrationOptions {
  RegistrationBackend backend = RegistrationBackend::Affine;
  std::vector<int> levels{4, 2, 1};
  int iterations_per_level = 200;
  // Initial step in full-resolution pixels, multiplied by the level factor.
  double initial_step = 1.0;
  double min_step = 1e-3;
  double tolerance = 1e-6;
  ExternalAdapterOptions external;
};

struct RegistrationResult {
  ImageSlice registered;
  RegistrationTransform transform;
  double similarity_before = 0.0;
  double similarity_after = 0.0;
  double elapsed_seconds = 0.0;
  std::vector<double> level_similarity; // full-resolution NCC after each level
  bool converged = true;
  std::string warning;
};

// Aligns `prior` (moving) to `target` (fixed).
RegistrationResult register_prior(const ImageSlice &prior, const ImageSlice &target, const RegistrationOptions &options = {});

// Runs the external command once; returns the warped moving image.
ImageSlice run_external_registration(const ImageSlice &moving, const ImageSlice &fixed, const ExternalAdapterOptions &options);

} // namespace priorecon
