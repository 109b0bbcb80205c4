#pragma once

#include <cstdint>

#include "priorecon/ad/graph.hpp"
#include "priorecon/types.hpp"

// Differentiable counterparts of the k-space algebra on interleaved complex
// tensors ([C, H, W, 2] for coil data, [H, W, 2] for a single image).
namespace priorecon::ad {

Var fft2c(Var x, bool inverse);
Var cexpand(Var img, Var maps);
Var creduce(Var coils, Var maps);
Var rss(Var coils);
Var normalize_coils(Var maps, double zero_threshold = 1e-12);
// Multiplies every coil by a fixed binary (or real) plane.
Var mask_mul(Var x, const Plane<std::uint8_t> &mask);
Var complex_to_channels(Var img); // [H, W, 2] -> [2, H, W]
Var channels_to_complex(Var x);   // [2, H, W] -> [H, W, 2]

template <class Tag> Var to_var(Graph &g, const CoilGrid<Tag> &grid, bool track = false) {
  const auto *p = reinterpret_cast<const double *>(grid.values().data());
  std::vector<double> v(p, p + 2 * grid.size());
  Shape s{grid.n_coils(), grid.dims().ny, grid.dims().nz, 2};
  return track ? g.variable(std::move(s), std::move(v)) : g.constant(std::move(s), std::move(v));
}

template <class Grid> Grid from_var(Var v) {
  const auto &s = v.shape();
  require(s.size() == 4 && s[3] == 2, ErrorKind::InvalidInput, "from_var: expected [C, H, W, 2]");
  std::vector<cplx> data(v.size() / 2);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = cplx(v.value()[2 * i], v.value()[2 * i + 1]);
  return Grid(s[0], Dims{s[1], s[2]}, std::move(data));
}

ImageSlice image_from_var(Var v);
Var image_to_var(Graph &g, const ImageSlice &img, bool track = false);

} // namespace priorecon::ad
