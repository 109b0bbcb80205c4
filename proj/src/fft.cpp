#include "priorecon/fft.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <tuple>
#include <vector>

#include <fftw3.h>

namespace priorecon::fft {
namespace {

// FFTW planning is not thread-safe; execution on new arrays is.
class PlanCache {
public:
  ~PlanCache() {
    for (auto &[key, plan] : plans_) fftw_destroy_plan(plan);
  }

  fftw_plan get(Dims dims, Direction dir) {
    std::lock_guard lock(mutex_);
    const auto key = std::make_tuple(dims.ny, dims.nz, dir == Direction::Forward);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    std::vector<fftw_complex> a(dims.size()), b(dims.size());
    fftw_plan plan = fftw_plan_dft_2d(dims.ny, dims.nz, a.data(), b.data(),
                                      dir == Direction::Forward ? FFTW_FORWARD : FFTW_BACKWARD,
                                      FFTW_ESTIMATE | FFTW_UNALIGNED);
    plans_.emplace(key, plan);
    return plan;
  }

private:
  std::mutex mutex_;
  std::map<std::tuple<int, int, bool>, fftw_plan> plans_;
};

PlanCache &cache() {
  static PlanCache c;
  return c;
}

} // namespace

void centered_2d(std::span<const cplx> in, std::span<cplx> out, Dims dims, Direction dir) {
  require(in.size() == dims.size() && out.size() == dims.size(), ErrorKind::InvalidInput,
          "fft plane size does not match dims " + to_string(dims));
  const int ny = dims.ny, nz = dims.nz;
  const int hy = ny / 2, hz = nz / 2;
  std::vector<cplx> buf(dims.size()), res(dims.size());
  // ifftshift: buf[i] = in[(i + n/2) % n]
  for (int y = 0; y < ny; ++y) {
    const int sy = (y + hy) % ny;
    for (int z = 0; z < nz; ++z) buf[static_cast<std::size_t>(y) * nz + z] = in[static_cast<std::size_t>(sy) * nz + (z + hz) % nz];
  }
  fftw_execute_dft(cache().get(dims, dir), reinterpret_cast<fftw_complex *>(buf.data()),
                   reinterpret_cast<fftw_complex *>(res.data()));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dims.size()));
  // fftshift: out[i] = res[(i + n - n/2) % n]
  for (int y = 0; y < ny; ++y) {
    const int sy = (y + ny - hy) % ny;
    for (int z = 0; z < nz; ++z)
      out[static_cast<std::size_t>(y) * nz + z] = res[static_cast<std::size_t>(sy) * nz + (z + nz - hz) % nz] * scale;
  }
}

void centered_2d_planes(std::span<const cplx> in, std::span<cplx> out, Dims dims, int count, Direction dir) {
  const std::size_t n = dims.size();
  require(in.size() == n * count && out.size() == n * count, ErrorKind::InvalidInput, "fft buffer size mismatch");
  for (int c = 0; c < count; ++c) centered_2d(in.subspan(c * n, n), out.subspan(c * n, n), dims, dir);
}

} // namespace priorecon::fft
