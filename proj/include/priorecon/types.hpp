#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "priorecon/error.hpp"

namespace priorecon {

using cplx = std::complex<double>;

// (N_y, N_z): phase- and slice-encoding counts of one 2D plane.
struct Dims {
  int ny = 0;
  int nz = 0;

  std::size_t size() const { return static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz); }
  bool operator==(const Dims &) const = default;
};

std::string to_string(Dims d);

template <class T> class Plane {
public:
  Plane() = default;
  explicit Plane(Dims dims, T fill = T{}) : dims_(dims), data_(dims.size(), fill) {
    require(dims.ny > 0 && dims.nz > 0, ErrorKind::InvalidInput, "plane dims must be positive");
  }
  Plane(Dims dims, std::vector<T> data) : dims_(dims), data_(std::move(data)) {
    require(dims.ny > 0 && dims.nz > 0, ErrorKind::InvalidInput, "plane dims must be positive");
    require(data_.size() == dims.size(), ErrorKind::InvalidInput, "plane data size does not match dims");
  }

  Dims dims() const { return dims_; }
  int ny() const { return dims_.ny; }
  int nz() const { return dims_.nz; }
  std::size_t size() const { return data_.size(); }

  T &operator()(int y, int z) { return data_[static_cast<std::size_t>(y) * dims_.nz + z]; }
  const T &operator()(int y, int z) const { return data_[static_cast<std::size_t>(y) * dims_.nz + z]; }
  T &operator[](std::size_t i) { return data_[i]; }
  const T &operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T> &storage() { return data_; }
  const std::vector<T> &storage() const { return data_; }

  bool operator==(const Plane &) const = default;

private:
  Dims dims_;
  std::vector<T> data_;
};

// Real-valued 2D image (Y, Ŷ, PS, PS_reg, Ŷ_enh).
class ImageSlice : public Plane<double> {
public:
  using Plane<double>::Plane;
  std::optional<double> intensity_max;

  double max_abs() const;
  bool operator==(const ImageSlice &o) const { return Plane<double>::operator==(o); }
};

using ComplexImage = Plane<cplx>;

// Complex (coil, y, z) grid. The tag keeps k-space, coil images and sensitivity
// maps from being mixed up.
template <class Tag> class CoilGrid {
public:
  CoilGrid() = default;
  CoilGrid(int n_coils, Dims dims) : n_coils_(n_coils), dims_(dims), data_(n_coils * dims.size()) {
    require(n_coils >= 1, ErrorKind::InvalidInput, "coil count must be >= 1");
    require(dims.ny > 0 && dims.nz > 0, ErrorKind::InvalidInput, "grid dims must be positive");
  }
  CoilGrid(int n_coils, Dims dims, std::vector<cplx> data) : n_coils_(n_coils), dims_(dims), data_(std::move(data)) {
    require(n_coils >= 1, ErrorKind::InvalidInput, "coil count must be >= 1");
    require(dims.ny > 0 && dims.nz > 0, ErrorKind::InvalidInput, "grid dims must be positive");
    require(data_.size() == n_coils * dims.size(), ErrorKind::InvalidInput, "grid data size does not match shape");
  }

  int n_coils() const { return n_coils_; }
  Dims dims() const { return dims_; }
  std::size_t plane_size() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }

  cplx &operator()(int c, int y, int z) { return data_[(c * dims_.size()) + static_cast<std::size_t>(y) * dims_.nz + z]; }
  const cplx &operator()(int c, int y, int z) const {
    return data_[(c * dims_.size()) + static_cast<std::size_t>(y) * dims_.nz + z];
  }
  std::span<cplx> coil(int c) { return std::span<cplx>(data_).subspan(c * dims_.size(), dims_.size()); }
  std::span<const cplx> coil(int c) const {
    return std::span<const cplx>(data_).subspan(c * dims_.size(), dims_.size());
  }
  std::span<cplx> values() { return data_; }
  std::span<const cplx> values() const { return data_; }

  bool all_finite() const {
    for (const auto &v : data_)
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) return false;
    return true;
  }
  bool same_shape(int n_coils, Dims dims) const { return n_coils_ == n_coils && dims_ == dims; }

  bool operator==(const CoilGrid &) const = default;

private:
  int n_coils_ = 0;
  Dims dims_;
  std::vector<cplx> data_;
};

struct KSpaceTag {};
struct CoilImageTag {};
struct SensitivityTag {};

using KSpaceTensor = CoilGrid<KSpaceTag>;
using CoilImages = CoilGrid<CoilImageTag>;
using CoilSensitivityMaps = CoilGrid<SensitivityTag>;

// Binary undersampling pattern over (k_y, k_z), broadcast over coils.
struct SamplingMask {
  Plane<std::uint8_t> mask;
  double target_R = 1.0;
  int center_radius = 0;
  std::uint64_t seed = 0;

  Dims dims() const { return mask.dims(); }
  std::size_t n_sampled() const;
  double achieved_acceleration() const;
};

} // namespace priorecon
