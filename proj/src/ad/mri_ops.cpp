#include "priorecon/ad/mri_ops.hpp"

#include <cmath>

#include "priorecon/fft.hpp"

namespace priorecon::ad {
namespace {

template <class F> void with_grad(Graph &g, int id, F &&f) {
  if (g.requires_grad(id)) f(g.grad_buffer(id));
}

std::span<const cplx> as_cplx(std::span<const double> v) {
  return {reinterpret_cast<const cplx *>(v.data()), v.size() / 2};
}
std::span<cplx> as_cplx(std::span<double> v) { return {reinterpret_cast<cplx *>(v.data()), v.size() / 2}; }

Dims plane_dims(const Shape &s, const char *op) {
  require(s.size() >= 3 && s.back() == 2, ErrorKind::InvalidInput,
          std::string(op) + ": expected [..., H, W, 2], got " + shape_string(s));
  return {s[s.size() - 3], s[s.size() - 2]};
}

void check_coils(Var x, const char *op) {
  require(x.shape().size() == 4 && x.shape()[3] == 2, ErrorKind::InvalidInput,
          std::string(op) + ": expected [C, H, W, 2], got " + shape_string(x.shape()));
}

} // namespace

Var fft2c(Var x, bool inverse) {
  const Dims d = plane_dims(x.shape(), "fft2c");
  const int planes = static_cast<int>(x.size() / (2 * d.size()));
  std::vector<double> out(x.size());
  fft::centered_2d_planes(as_cplx(x.value()), as_cplx(std::span<double>(out)), d, planes,
                          inverse ? fft::Direction::Inverse : fft::Direction::Forward);
  const int ix = x.id();
  return x.graph()->make(x.shape(), std::move(out), {x}, [ix, d, planes, inverse](Graph &g, int self) {
    auto gout = as_cplx(g.grad(self));
    with_grad(g, ix, [&](std::span<double> gx) {
      // The adjoint of an orthonormal transform is its inverse.
      std::vector<cplx> tmp(gout.size());
      fft::centered_2d_planes(gout, tmp, d, planes, inverse ? fft::Direction::Forward : fft::Direction::Inverse);
      auto gc = as_cplx(gx);
      for (std::size_t i = 0; i < tmp.size(); ++i) gc[i] += tmp[i];
    });
  });
}

Var cexpand(Var img, Var maps) {
  check_coils(maps, "cexpand");
  const Dims d = plane_dims(img.shape(), "cexpand");
  require(img.shape().size() == 3 && d == Dims{maps.shape()[1], maps.shape()[2]}, ErrorKind::InvalidInput,
          "cexpand: image " + shape_string(img.shape()) + " vs maps " + shape_string(maps.shape()));
  const int C = maps.shape()[0];
  const std::size_t n = d.size();
  auto x = as_cplx(img.value());
  auto s = as_cplx(maps.value());
  std::vector<double> out(maps.size());
  auto o = as_cplx(std::span<double>(out));
  for (int c = 0; c < C; ++c)
    for (std::size_t i = 0; i < n; ++i) o[c * n + i] = s[c * n + i] * x[i];
  const int ii = img.id(), im = maps.id();
  return img.graph()->make(maps.shape(), std::move(out), {img, maps}, [ii, im, C, n](Graph &g, int self) {
    auto go = as_cplx(g.grad(self));
    auto x = as_cplx(g.value(ii));
    auto s = as_cplx(g.value(im));
    with_grad(g, ii, [&](std::span<double> gi) {
      auto gx = as_cplx(gi);
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < n; ++i) gx[i] += std::conj(s[c * n + i]) * go[c * n + i];
    });
    with_grad(g, im, [&](std::span<double> gm) {
      auto gs = as_cplx(gm);
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < n; ++i) gs[c * n + i] += std::conj(x[i]) * go[c * n + i];
    });
  });
}

Var creduce(Var coils, Var maps) {
  check_coils(coils, "creduce");
  require(coils.shape() == maps.shape(), ErrorKind::InvalidInput,
          "creduce: coils " + shape_string(coils.shape()) + " vs maps " + shape_string(maps.shape()));
  const int C = coils.shape()[0], H = coils.shape()[1], W = coils.shape()[2];
  const std::size_t n = static_cast<std::size_t>(H) * W;
  auto x = as_cplx(coils.value());
  auto s = as_cplx(maps.value());
  std::vector<double> out(2 * n, 0.0);
  auto o = as_cplx(std::span<double>(out));
  for (int c = 0; c < C; ++c)
    for (std::size_t i = 0; i < n; ++i) o[i] += std::conj(s[c * n + i]) * x[c * n + i];
  const int ic = coils.id(), im = maps.id();
  return coils.graph()->make({H, W, 2}, std::move(out), {coils, maps}, [ic, im, C, n](Graph &g, int self) {
    auto go = as_cplx(g.grad(self));
    auto x = as_cplx(g.value(ic));
    auto s = as_cplx(g.value(im));
    with_grad(g, ic, [&](std::span<double> gc) {
      auto gx = as_cplx(gc);
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < n; ++i) gx[c * n + i] += s[c * n + i] * go[i];
    });
    with_grad(g, im, [&](std::span<double> gm) {
      auto gs = as_cplx(gm);
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < n; ++i) gs[c * n + i] += x[c * n + i] * std::conj(go[i]);
    });
  });
}

Var rss(Var coils) {
  check_coils(coils, "rss");
  const int C = coils.shape()[0], H = coils.shape()[1], W = coils.shape()[2];
  const std::size_t n = static_cast<std::size_t>(H) * W;
  auto x = as_cplx(coils.value());
  std::vector<double> out(n, 0.0);
  for (int c = 0; c < C; ++c)
    for (std::size_t i = 0; i < n; ++i) out[i] += std::norm(x[c * n + i]);
  for (double &v : out) v = std::sqrt(v);
  const int ic = coils.id();
  return coils.graph()->make({H, W}, std::move(out), {coils}, [ic, C, n](Graph &g, int self) {
    auto go = g.grad(self);
    auto y = g.value(self);
    auto x = as_cplx(g.value(ic));
    with_grad(g, ic, [&](std::span<double> gc) {
      auto gx = as_cplx(gc);
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < n; ++i)
          if (y[i] > 0.0) gx[c * n + i] += x[c * n + i] * (go[i] / y[i]);
    });
  });
}

Var normalize_coils(Var maps, double zero_threshold) {
  check_coils(maps, "normalize_coils");
  const int C = maps.shape()[0];
  const std::size_t n = static_cast<std::size_t>(maps.shape()[1]) * maps.shape()[2];
  auto m = as_cplx(maps.value());
  std::vector<double> out(maps.size(), 0.0);
  auto o = as_cplx(std::span<double>(out));
  std::vector<double> norms(n, 0.0);
  for (int c = 0; c < C; ++c)
    for (std::size_t i = 0; i < n; ++i) norms[i] += std::norm(m[c * n + i]);
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = std::sqrt(norms[i]);
    if (norms[i] > zero_threshold)
      for (int c = 0; c < C; ++c) o[c * n + i] = m[c * n + i] / norms[i];
    else
      norms[i] = 0.0;
  }
  const int im = maps.id();
  return maps.graph()->make(maps.shape(), std::move(out), {maps}, [im, C, n, norms](Graph &g, int self) {
    auto go = as_cplx(g.grad(self));
    auto s = as_cplx(g.value(self));
    with_grad(g, im, [&](std::span<double> gm) {
      auto gx = as_cplx(gm);
      // d(m / |m|): (g - s <s, g>_R) / |m|
      for (std::size_t i = 0; i < n; ++i) {
        if (norms[i] == 0.0) continue;
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += (std::conj(s[c * n + i]) * go[c * n + i]).real();
        for (int c = 0; c < C; ++c) gx[c * n + i] += (go[c * n + i] - s[c * n + i] * dot) / norms[i];
      }
    });
  });
}

Var mask_mul(Var x, const Plane<std::uint8_t> &mask) {
  const Dims d = plane_dims(x.shape(), "mask_mul");
  require(d == mask.dims(), ErrorKind::InvalidInput, "mask_mul: mask dims " + to_string(mask.dims()) + " vs " + to_string(d));
  const std::size_t n = d.size();
  const std::size_t planes = x.size() / (2 * n);
  std::vector<double> keep(n);
  for (std::size_t i = 0; i < n; ++i) keep[i] = mask[i] ? 1.0 : 0.0;
  std::vector<double> out(x.size());
  auto xv = x.value();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = 2 * (p * n + i);
      out[k] = keep[i] ? xv[k] : 0.0;
      out[k + 1] = keep[i] ? xv[k + 1] : 0.0;
    }
  const int ix = x.id();
  return x.graph()->make(x.shape(), std::move(out), {x}, [ix, keep, planes, n](Graph &g, int self) {
    auto go = g.grad(self);
    with_grad(g, ix, [&](std::span<double> gx) {
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < n; ++i)
          if (keep[i]) {
            const std::size_t k = 2 * (p * n + i);
            gx[k] += go[k];
            gx[k + 1] += go[k + 1];
          }
    });
  });
}

Var complex_to_channels(Var img) {
  require(img.shape().size() == 3 && img.shape()[2] == 2, ErrorKind::InvalidInput, "complex_to_channels: expected [H, W, 2]");
  const int H = img.shape()[0], W = img.shape()[1];
  const std::size_t n = static_cast<std::size_t>(H) * W;
  auto v = img.value();
  std::vector<double> out(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = v[2 * i];
    out[n + i] = v[2 * i + 1];
  }
  const int ii = img.id();
  return img.graph()->make({2, H, W}, std::move(out), {img}, [ii, n](Graph &g, int self) {
    auto go = g.grad(self);
    with_grad(g, ii, [&](std::span<double> gi) {
      for (std::size_t i = 0; i < n; ++i) {
        gi[2 * i] += go[i];
        gi[2 * i + 1] += go[n + i];
      }
    });
  });
}

Var channels_to_complex(Var x) {
  require(x.shape().size() == 3 && x.shape()[0] == 2, ErrorKind::InvalidInput, "channels_to_complex: expected [2, H, W]");
  const int H = x.shape()[1], W = x.shape()[2];
  const std::size_t n = static_cast<std::size_t>(H) * W;
  auto v = x.value();
  std::vector<double> out(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    out[2 * i] = v[i];
    out[2 * i + 1] = v[n + i];
  }
  const int ix = x.id();
  return x.graph()->make({H, W, 2}, std::move(out), {x}, [ix, n](Graph &g, int self) {
    auto go = g.grad(self);
    with_grad(g, ix, [&](std::span<double> gx) {
      for (std::size_t i = 0; i < n; ++i) {
        gx[i] += go[2 * i];
        gx[n + i] += go[2 * i + 1];
      }
    });
  });
}

ImageSlice image_from_var(Var v) {
  require(v.shape().size() == 2, ErrorKind::InvalidInput, "image_from_var: expected [H, W]");
  return ImageSlice(Dims{v.shape()[0], v.shape()[1]}, std::vector<double>(v.value().begin(), v.value().end()));
}

Var image_to_var(Graph &g, const ImageSlice &img, bool track) {
  Shape s{img.ny(), img.nz()};
  std::vector<double> v(img.values().begin(), img.values().end());
  return track ? g.variable(std::move(s), std::move(v)) : g.constant(std::move(s), std::move(v));
}

} // namespace priorecon::ad
