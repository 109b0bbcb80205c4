#include "priorecon/kspace.hpp"

#include <cmath>

#include "priorecon/fft.hpp"

namespace priorecon {
namespace {

template <class Grid> void check_finite(const Grid &g, const char *what) {
  require(g.all_finite(), ErrorKind::InvalidInput, std::string(what) + " contains non-finite entries");
}

void check_maps(const CoilSensitivityMaps &maps, int n_coils, Dims dims) {
  require(maps.same_shape(n_coils, dims), ErrorKind::InvalidInput,
          "sensitivity maps shape (" + std::to_string(maps.n_coils()) + ", " + to_string(maps.dims()) +
              ") does not match (" + std::to_string(n_coils) + ", " + to_string(dims) + ")");
}

} // namespace

CoilImages inverse_transform(const KSpaceTensor &k) {
  check_finite(k, "k-space");
  CoilImages out(k.n_coils(), k.dims());
  fft::centered_2d_planes(k.values(), out.values(), k.dims(), k.n_coils(), fft::Direction::Inverse);
  return out;
}

KSpaceTensor forward_transform(const CoilImages &imgs) {
  check_finite(imgs, "coil images");
  KSpaceTensor out(imgs.n_coils(), imgs.dims());
  fft::centered_2d_planes(imgs.values(), out.values(), imgs.dims(), imgs.n_coils(), fft::Direction::Forward);
  return out;
}

ComplexImage inverse_transform(const ComplexImage &k) {
  ComplexImage out(k.dims());
  fft::centered_2d(k.values(), out.values(), k.dims(), fft::Direction::Inverse);
  return out;
}

ComplexImage forward_transform(const ComplexImage &img) {
  ComplexImage out(img.dims());
  fft::centered_2d(img.values(), out.values(), img.dims(), fft::Direction::Forward);
  return out;
}

ImageSlice rss_combine(const CoilImages &imgs) {
  require(imgs.n_coils() >= 1, ErrorKind::InvalidInput, "rss_combine needs at least one coil");
  ImageSlice out(imgs.dims());
  const std::size_t n = imgs.plane_size();
  for (int c = 0; c < imgs.n_coils(); ++c) {
    auto coil = imgs.coil(c);
    for (std::size_t i = 0; i < n; ++i) out[i] += std::norm(coil[i]);
  }
  for (std::size_t i = 0; i < n; ++i) out[i] = std::sqrt(out[i]);
  return out;
}

CoilImages expand(const ComplexImage &img, const CoilSensitivityMaps &maps) {
  check_maps(maps, maps.n_coils(), img.dims());
  CoilImages out(maps.n_coils(), img.dims());
  const std::size_t n = img.size();
  for (int c = 0; c < maps.n_coils(); ++c) {
    auto s = maps.coil(c);
    auto o = out.coil(c);
    for (std::size_t i = 0; i < n; ++i) o[i] = s[i] * img[i];
  }
  return out;
}

ComplexImage reduce(const CoilImages &imgs, const CoilSensitivityMaps &maps) {
  check_maps(maps, imgs.n_coils(), imgs.dims());
  ComplexImage out(imgs.dims());
  const std::size_t n = out.size();
  for (int c = 0; c < imgs.n_coils(); ++c) {
    auto s = maps.coil(c);
    auto x = imgs.coil(c);
    for (std::size_t i = 0; i < n; ++i) out[i] += std::conj(s[i]) * x[i];
  }
  return out;
}

KSpaceTensor undersample(const KSpaceTensor &x, const SamplingMask &mask) {
  require(mask.dims() == x.dims(), ErrorKind::InvalidInput,
          "mask dims " + to_string(mask.dims()) + " do not match k-space dims " + to_string(x.dims()));
  KSpaceTensor out(x.n_coils(), x.dims());
  const std::size_t n = x.plane_size();
  for (int c = 0; c < x.n_coils(); ++c) {
    auto src = x.coil(c);
    auto dst = out.coil(c);
    for (std::size_t i = 0; i < n; ++i) dst[i] = mask.mask[i] ? src[i] : cplx{};
  }
  return out;
}

CoilSensitivityMaps normalize_maps(CoilSensitivityMaps maps, double zero_threshold) {
  const std::size_t n = maps.plane_size();
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (int c = 0; c < maps.n_coils(); ++c) ss += std::norm(maps.coil(c)[i]);
    const double r = std::sqrt(ss);
    for (int c = 0; c < maps.n_coils(); ++c) {
      auto &v = maps.coil(c)[i];
      v = r > zero_threshold ? v / r : cplx{};
    }
  }
  return maps;
}

ImageSlice zero_filled(const KSpaceTensor &x_u) { return rss_combine(inverse_transform(x_u)); }

double l2_norm(std::span<const cplx> v) {
  double s = 0.0;
  for (const auto &x : v) s += std::norm(x);
  return std::sqrt(s);
}

} // namespace priorecon
