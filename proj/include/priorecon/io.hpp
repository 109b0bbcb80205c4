#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "priorecon/types.hpp"

namespace priorecon {

// Stack of equally sized 2D slices with voxel spacing (slice, y, z).
struct Volume {
  std::vector<ImageSlice> slices;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  Dims dims() const { return slices.empty() ? Dims{} : slices.front().dims(); }
  int n_slices() const { return static_cast<int>(slices.size()); }
};

// NIfTI-1 single-file volumes (.nii or .nii.gz). Written as float32 with
// i = z (fastest), j = y, k = slice. Reads uint8/int16/int32/float32/float64
// and applies scl_slope/scl_inter.
void write_nifti(const std::filesystem::path &path, const Volume &vol);
Volume read_nifti(const std::filesystem::path &path);

// HDF5 k-space container. `kspace` is complex64 {r, i} with shape
// [slice, coil, ky, kz] (a 3D [coil, ky, kz] dataset reads as one slice).
struct KSpaceContainer {
  std::vector<KSpaceTensor> kspace;
  SamplingMask mask;
  std::vector<CoilSensitivityMaps> sens_maps; // optional
  std::vector<ImageSlice> reference;           // optional
  std::string subject_id;
};

void write_container(const std::filesystem::path &path, const KSpaceContainer &c);
KSpaceContainer read_container(const std::filesystem::path &path);

} // namespace priorecon
