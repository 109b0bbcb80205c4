#include "priorecon/ad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

namespace priorecon::ad {
namespace {

void check_same(Var a, Var b, const char *op) {
  require(a.shape() == b.shape(), ErrorKind::InvalidInput,
          std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

// Accumulates into an input's gradient if it needs one.
template <class F> void with_grad(Graph &g, int id, F &&f) {
  if (g.requires_grad(id)) f(g.grad_buffer(id));
}

template <class F> Var unary(Var a, F &&f, std::function<double(double x, double y)> dfdx) {
  Graph &g = *a.graph();
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const int ia = a.id();
  return g.make(a.shape(), std::move(out), {a}, [ia, dfdx](Graph &g, int self) {
    auto gout = g.grad(self);
    auto x = g.value(ia);
    auto y = g.value(self);
    with_grad(g, ia, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i] * dfdx(x[i], y[i]);
    });
  });
}

int channels_of(Var x) {
  require(!x.shape().empty(), ErrorKind::InvalidInput, "channel op on a scalar");
  return x.shape()[0];
}

void check_chw(Var x, const char *op) {
  require(x.shape().size() == 3, ErrorKind::InvalidInput, std::string(op) + ": expected [C, H, W], got " + shape_string(x.shape()));
}

} // namespace

Var add(Var a, Var b) {
  check_same(a, b, "add");
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const int ia = a.id(), ib = b.id();
  return a.graph()->make(a.shape(), std::move(out), {a, b}, [ia, ib](Graph &g, int self) {
    auto gout = g.grad(self);
    with_grad(g, ia, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i];
    });
    with_grad(g, ib, [&](std::span<double> gb) {
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gout[i];
    });
  });
}

Var sub(Var a, Var b) {
  check_same(a, b, "sub");
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const int ia = a.id(), ib = b.id();
  return a.graph()->make(a.shape(), std::move(out), {a, b}, [ia, ib](Graph &g, int self) {
    auto gout = g.grad(self);
    with_grad(g, ia, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i];
    });
    with_grad(g, ib, [&](std::span<double> gb) {
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gout[i];
    });
  });
}

Var mul(Var a, Var b) {
  check_same(a, b, "mul");
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const int ia = a.id(), ib = b.id();
  return a.graph()->make(a.shape(), std::move(out), {a, b}, [ia, ib](Graph &g, int self) {
    auto gout = g.grad(self);
    auto av = g.value(ia), bv = g.value(ib);
    with_grad(g, ia, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i] * bv[i];
    });
    with_grad(g, ib, [&](std::span<double> gb) {
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gout[i] * av[i];
    });
  });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var mul_scalar(Var a, Var s) {
  require(s.size() == 1, ErrorKind::InvalidInput, "mul_scalar: scalar operand must have one element");
  const double sv = s.value()[0];
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * sv;
  const int ia = a.id(), is = s.id();
  return a.graph()->make(a.shape(), std::move(out), {a, s}, [ia, is](Graph &g, int self) {
    auto gout = g.grad(self);
    const double sv = g.value(is)[0];
    auto av = g.value(ia);
    with_grad(g, ia, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i] * sv;
    });
    with_grad(g, is, [&](std::span<double> gs) {
      double acc = 0.0;
      for (std::size_t i = 0; i < av.size(); ++i) acc += gout[i] * av[i];
      gs[0] += acc;
    });
  });
}

Var sqrt(Var a) {
  return unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var leaky_relu(Var a, double slope) {
  return unary(
      a, [slope](double x) { return x > 0.0 ? x : slope * x; }, [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Var gelu(Var a) {
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + x * pdf;
      });
}

Var silu(Var a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value()) s += v;
  const int ia = a.id();
  return a.graph()->make({1}, {s}, {a}, [ia](Graph &g, int self) {
    const double go = g.grad(self)[0];
    with_grad(g, ia, [&](std::span<double> ga) {
      for (double &v : ga) v += go;
    });
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var reshape(Var a, Shape shape) {
  require(numel(shape) == a.size(), ErrorKind::InvalidInput,
          "reshape " + shape_string(a.shape()) + " -> " + shape_string(shape));
  std::vector<double> out(a.value().begin(), a.value().end());
  const int ia = a.id();
  return a.graph()->make(std::move(shape), std::move(out), {a}, [ia](Graph &g, int self) {
    auto gout = g.grad(self);
    with_grad(g, ia, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i];
    });
  });
}

Var channel_mean(Var x) {
  const int c = channels_of(x);
  const std::size_t n = x.size() / c;
  auto xv = x.value();
  std::vector<double> out(c, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += xv[ch * n + i];
    out[ch] = s / static_cast<double>(n);
  }
  const int ix = x.id();
  return x.graph()->make({c}, std::move(out), {x}, [ix, c, n](Graph &g, int self) {
    auto gout = g.grad(self);
    with_grad(g, ix, [&](std::span<double> gx) {
      for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < n; ++i) gx[ch * n + i] += gout[ch] / static_cast<double>(n);
    });
  });
}

namespace {

enum class ChannelOp { Sub, Mul, Div };

Var channel_binary(Var x, Var v, ChannelOp op) {
  const int c = channels_of(x);
  require(v.size() == static_cast<std::size_t>(c), ErrorKind::InvalidInput, "channel op: vector length mismatch");
  const std::size_t n = x.size() / c;
  auto xv = x.value();
  auto vv = v.value();
  std::vector<double> out(x.size());
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < n; ++i) {
      const double a = xv[ch * n + i];
      out[ch * n + i] = op == ChannelOp::Sub ? a - vv[ch] : op == ChannelOp::Mul ? a * vv[ch] : a / vv[ch];
    }
  const int ix = x.id(), iv = v.id();
  return x.graph()->make(x.shape(), std::move(out), {x, v}, [ix, iv, c, n, op](Graph &g, int self) {
    auto gout = g.grad(self);
    auto xv = g.value(ix);
    auto vv = g.value(iv);
    auto yv = g.value(self);
    with_grad(g, ix, [&](std::span<double> gx) {
      for (int ch = 0; ch < c; ++ch) {
        const double d = op == ChannelOp::Sub ? 1.0 : op == ChannelOp::Mul ? vv[ch] : 1.0 / vv[ch];
        for (std::size_t i = 0; i < n; ++i) gx[ch * n + i] += gout[ch * n + i] * d;
      }
    });
    with_grad(g, iv, [&](std::span<double> gv) {
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t k = ch * n + i;
          acc += op == ChannelOp::Sub ? -gout[k] : op == ChannelOp::Mul ? gout[k] * xv[k] : -gout[k] * yv[k] / vv[ch];
        }
        gv[ch] += acc;
      }
    });
  });
}

} // namespace

Var sub_channel(Var x, Var v) { return channel_binary(x, v, ChannelOp::Sub); }
Var mul_channel(Var x, Var v) { return channel_binary(x, v, ChannelOp::Mul); }
Var div_channel(Var x, Var v) { return channel_binary(x, v, ChannelOp::Div); }

Var conv2d(Var x, Var weight, Var bias) {
  check_chw(x, "conv2d");
  const auto &ws = weight.shape();
  require(ws.size() == 4 && ws[1] == x.shape()[0] && ws[2] == ws[3] && ws[2] % 2 == 1, ErrorKind::InvalidInput,
          "conv2d: weight " + shape_string(ws) + " incompatible with input " + shape_string(x.shape()));
  const int O = ws[0], C = ws[1], K = ws[2], P = K / 2;
  const int H = x.shape()[1], W = x.shape()[2];
  require(bias.size() == static_cast<std::size_t>(O), ErrorKind::InvalidInput, "conv2d: bias length mismatch");
  const std::size_t hw = static_cast<std::size_t>(H) * W;

  auto xv = x.value();
  auto wv = weight.value();
  auto bv = bias.value();
  std::vector<double> out(O * hw);
  for (int o = 0; o < O; ++o) {
    double *dst = out.data() + o * hw;
    std::fill(dst, dst + hw, bv[o]);
    for (int c = 0; c < C; ++c) {
      const double *src = xv.data() + c * hw;
      for (int ky = 0; ky < K; ++ky)
        for (int kx = 0; kx < K; ++kx) {
          const double w = wv[((o * C + c) * K + ky) * K + kx];
          const int dy = ky - P, dx = kx - P;
          const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          for (int y = y0; y < y1; ++y) {
            double *drow = dst + static_cast<std::size_t>(y) * W;
            const double *srow = src + static_cast<std::size_t>(y + dy) * W + dx;
            for (int xx = x0; xx < x1; ++xx) drow[xx] += w * srow[xx];
          }
        }
    }
  }
  const int ix = x.id(), iw = weight.id(), ib = bias.id();
  return x.graph()->make({O, H, W}, std::move(out), {x, weight, bias},
                         [=](Graph &g, int self) {
                           auto gout = g.grad(self);
                           auto xv = g.value(ix);
                           auto wv = g.value(iw);
                           with_grad(g, ib, [&](std::span<double> gb) {
                             for (int o = 0; o < O; ++o) {
                               double s = 0.0;
                               for (std::size_t i = 0; i < hw; ++i) s += gout[o * hw + i];
                               gb[o] += s;
                             }
                           });
                           const bool need_x = g.requires_grad(ix), need_w = g.requires_grad(iw);
                           std::span<double> gx = need_x ? g.grad_buffer(ix) : std::span<double>{};
                           std::span<double> gw = need_w ? g.grad_buffer(iw) : std::span<double>{};
                           for (int o = 0; o < O; ++o) {
                             const double *go = gout.data() + o * hw;
                             for (int c = 0; c < C; ++c) {
                               const double *src = xv.data() + c * hw;
                               for (int ky = 0; ky < K; ++ky)
                                 for (int kx = 0; kx < K; ++kx) {
                                   const std::size_t widx = ((o * C + c) * K + ky) * K + kx;
                                   const double w = wv[widx];
                                   const int dy = ky - P, dx = kx - P;
                                   const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
                                   const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                                   double acc = 0.0;
                                   for (int y = y0; y < y1; ++y) {
                                     const double *grow = go + static_cast<std::size_t>(y) * W;
                                     const std::size_t soff = c * hw + static_cast<std::size_t>(y + dy) * W + dx;
                                     if (need_x) {
                                       double *gxrow = gx.data() + soff;
                                       for (int xx = x0; xx < x1; ++xx) gxrow[xx] += w * grow[xx];
                                     }
                                     if (need_w) {
                                       const double *srow = src + static_cast<std::size_t>(y + dy) * W + dx;
                                       for (int xx = x0; xx < x1; ++xx) acc += grow[xx] * srow[xx];
                                     }
                                   }
                                   if (need_w) gw[widx] += acc;
                                 }
                             }
                           }
                         });
}

Var avg_pool2(Var x) {
  check_chw(x, "avg_pool2");
  const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  require(H % 2 == 0 && W % 2 == 0, ErrorKind::InvalidInput, "avg_pool2: dims must be even, got " + shape_string(x.shape()));
  const int h = H / 2, w = W / 2;
  auto xv = x.value();
  std::vector<double> out(static_cast<std::size_t>(C) * h * w);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < h; ++y)
      for (int z = 0; z < w; ++z) {
        const std::size_t b = (static_cast<std::size_t>(c) * H + 2 * y) * W + 2 * z;
        out[(static_cast<std::size_t>(c) * h + y) * w + z] = 0.25 * (xv[b] + xv[b + 1] + xv[b + W] + xv[b + W + 1]);
      }
  const int ix = x.id();
  return x.graph()->make({C, h, w}, std::move(out), {x}, [=](Graph &g, int self) {
    auto gout = g.grad(self);
    with_grad(g, ix, [&](std::span<double> gx) {
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < h; ++y)
          for (int z = 0; z < w; ++z) {
            const double v = 0.25 * gout[(static_cast<std::size_t>(c) * h + y) * w + z];
            const std::size_t b = (static_cast<std::size_t>(c) * H + 2 * y) * W + 2 * z;
            gx[b] += v;
            gx[b + 1] += v;
            gx[b + W] += v;
            gx[b + W + 1] += v;
          }
    });
  });
}

Var upsample2(Var x) {
  check_chw(x, "upsample2");
  const int C = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const int H = 2 * h, W = 2 * w;
  auto xv = x.value();
  std::vector<double> out(static_cast<std::size_t>(C) * H * W);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int z = 0; z < W; ++z)
        out[(static_cast<std::size_t>(c) * H + y) * W + z] = xv[(static_cast<std::size_t>(c) * h + y / 2) * w + z / 2];
  const int ix = x.id();
  return x.graph()->make({C, H, W}, std::move(out), {x}, [=](Graph &g, int self) {
    auto gout = g.grad(self);
    with_grad(g, ix, [&](std::span<double> gx) {
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int z = 0; z < W; ++z)
            gx[(static_cast<std::size_t>(c) * h + y / 2) * w + z / 2] += gout[(static_cast<std::size_t>(c) * H + y) * W + z];
    });
  });
}

Var concat0(Var a, Var b) {
  const auto &sa = a.shape(), &sb = b.shape();
  require(sa.size() == sb.size() && !sa.empty() && std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1),
          ErrorKind::InvalidInput, "concat0: incompatible " + shape_string(sa) + " and " + shape_string(sb));
  Shape s = sa;
  s[0] += sb[0];
  std::vector<double> out(a.value().begin(), a.value().end());
  out.insert(out.end(), b.value().begin(), b.value().end());
  const int ia = a.id(), ib = b.id();
  const std::size_t na = a.size();
  return a.graph()->make(std::move(s), std::move(out), {a, b}, [ia, ib, na](Graph &g, int self) {
    auto gout = g.grad(self);
    with_grad(g, ia, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i];
    });
    with_grad(g, ib, [&](std::span<double> gb) {
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gout[na + i];
    });
  });
}

Var pad2d(Var x, int top, int bottom, int left, int right) {
  check_chw(x, "pad2d");
  require(top >= 0 && bottom >= 0 && left >= 0 && right >= 0, ErrorKind::InvalidInput, "pad2d: negative padding");
  const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const int Ho = H + top + bottom, Wo = W + left + right;
  auto xv = x.value();
  std::vector<double> out(static_cast<std::size_t>(C) * Ho * Wo, 0.0);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int z = 0; z < W; ++z)
        out[(static_cast<std::size_t>(c) * Ho + y + top) * Wo + z + left] = xv[(static_cast<std::size_t>(c) * H + y) * W + z];
  const int ix = x.id();
  return x.graph()->make({C, Ho, Wo}, std::move(out), {x}, [=](Graph &g, int self) {
    auto gout = g.grad(self);
    with_grad(g, ix, [&](std::span<double> gx) {
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int z = 0; z < W; ++z)
            gx[(static_cast<std::size_t>(c) * H + y) * W + z] += gout[(static_cast<std::size_t>(c) * Ho + y + top) * Wo + z + left];
    });
  });
}

Var crop2d(Var x, int top, int left, int height, int width) {
  check_chw(x, "crop2d");
  const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  require(top >= 0 && left >= 0 && height > 0 && width > 0 && top + height <= H && left + width <= W,
          ErrorKind::InvalidInput, "crop2d: window outside " + shape_string(x.shape()));
  auto xv = x.value();
  std::vector<double> out(static_cast<std::size_t>(C) * height * width);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < height; ++y)
      for (int z = 0; z < width; ++z)
        out[(static_cast<std::size_t>(c) * height + y) * width + z] = xv[(static_cast<std::size_t>(c) * H + y + top) * W + z + left];
  const int ix = x.id();
  return x.graph()->make({C, height, width}, std::move(out), {x}, [=](Graph &g, int self) {
    auto gout = g.grad(self);
    with_grad(g, ix, [&](std::span<double> gx) {
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < height; ++y)
          for (int z = 0; z < width; ++z)
            gx[(static_cast<std::size_t>(c) * H + y + top) * W + z + left] += gout[(static_cast<std::size_t>(c) * height + y) * width + z];
    });
  });
}

Var stack0(std::span<const Var> parts) {
  require(!parts.empty(), ErrorKind::InvalidInput, "stack0: no inputs");
  Graph &g = *parts[0].graph();
  const Shape &s0 = parts[0].shape();
  const std::size_t n = parts[0].size();
  std::vector<double> out;
  out.reserve(n * parts.size());
  std::vector<int> ids;
  bool rg = false;
  for (const Var &p : parts) {
    require(p.shape() == s0, ErrorKind::InvalidInput, "stack0: shape mismatch");
    out.insert(out.end(), p.value().begin(), p.value().end());
    ids.push_back(p.id());
    rg = rg || g.requires_grad(p.id());
  }
  Shape s{static_cast<int>(parts.size())};
  s.insert(s.end(), s0.begin(), s0.end());
  // Chain through the first input so `make` sees the graph; gradients are routed by id.
  Var anchor = parts[0];
  for (std::size_t i = 1; i < parts.size() && !g.requires_grad(anchor.id()); ++i)
    if (g.requires_grad(parts[i].id())) anchor = parts[i];
  return g.make(std::move(s), std::move(out), {anchor}, [ids, n](Graph &g, int self) {
    auto gout = g.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k)
      with_grad(g, ids[k], [&](std::span<double> gp) {
        for (std::size_t i = 0; i < n; ++i) gp[i] += gout[k * n + i];
      });
  });
}

Var index0(Var x, int i) {
  require(!x.shape().empty() && i >= 0 && i < x.shape()[0], ErrorKind::InvalidInput, "index0 out of range");
  Shape s(x.shape().begin() + 1, x.shape().end());
  const std::size_t n = x.size() / x.shape()[0];
  std::vector<double> out(x.value().begin() + i * n, x.value().begin() + (i + 1) * n);
  const int ix = x.id();
  return x.graph()->make(std::move(s), std::move(out), {x}, [ix, i, n](Graph &g, int self) {
    auto gout = g.grad(self);
    with_grad(g, ix, [&](std::span<double> gx) {
      for (std::size_t k = 0; k < n; ++k) gx[i * n + k] += gout[k];
    });
  });
}

Var linear(Var x, Var weight, Var bias) {
  require(x.shape().size() == 2 && weight.shape().size() == 2 && weight.shape()[1] == x.shape()[1],
          ErrorKind::InvalidInput, "linear: " + shape_string(x.shape()) + " x " + shape_string(weight.shape()));
  const int N = x.shape()[0], I = x.shape()[1], O = weight.shape()[0];
  const bool has_bias = bias.valid();
  if (has_bias) require(bias.size() == static_cast<std::size_t>(O), ErrorKind::InvalidInput, "linear: bias length");
  auto xv = x.value();
  auto wv = weight.value();
  std::vector<double> out(static_cast<std::size_t>(N) * O);
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o) {
      double acc = has_bias ? bias.value()[o] : 0.0;
      const double *xr = xv.data() + static_cast<std::size_t>(n) * I;
      const double *wr = wv.data() + static_cast<std::size_t>(o) * I;
      for (int i = 0; i < I; ++i) acc += xr[i] * wr[i];
      out[static_cast<std::size_t>(n) * O + o] = acc;
    }
  const int ix = x.id(), iw = weight.id(), ib = has_bias ? bias.id() : -1;
  auto back = [=](Graph &g, int self) {
    auto gout = g.grad(self);
    auto xv = g.value(ix);
    auto wv = g.value(iw);
    with_grad(g, ix, [&](std::span<double> gx) {
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
          const double go = gout[static_cast<std::size_t>(n) * O + o];
          const double *wr = wv.data() + static_cast<std::size_t>(o) * I;
          double *gxr = gx.data() + static_cast<std::size_t>(n) * I;
          for (int i = 0; i < I; ++i) gxr[i] += go * wr[i];
        }
    });
    with_grad(g, iw, [&](std::span<double> gw) {
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
          const double go = gout[static_cast<std::size_t>(n) * O + o];
          const double *xr = xv.data() + static_cast<std::size_t>(n) * I;
          double *gwr = gw.data() + static_cast<std::size_t>(o) * I;
          for (int i = 0; i < I; ++i) gwr[i] += go * xr[i];
        }
    });
    if (ib >= 0)
      with_grad(g, ib, [&](std::span<double> gb) {
        for (int n = 0; n < N; ++n)
          for (int o = 0; o < O; ++o) gb[o] += gout[static_cast<std::size_t>(n) * O + o];
      });
  };
  if (has_bias) return x.graph()->make({N, O}, std::move(out), {x, weight, bias}, back);
  return x.graph()->make({N, O}, std::move(out), {x, weight}, back);
}

Var layer_norm(Var x, double eps) {
  require(x.shape().size() == 2, ErrorKind::InvalidInput, "layer_norm: expected [N, D]");
  const int N = x.shape()[0], D = x.shape()[1];
  auto xv = x.value();
  std::vector<double> out(x.size());
  auto inv_sd = std::make_shared<std::vector<double>>(N);
  for (int n = 0; n < N; ++n) {
    const double *r = xv.data() + static_cast<std::size_t>(n) * D;
    double mu = 0.0;
    for (int d = 0; d < D; ++d) mu += r[d];
    mu /= D;
    double var = 0.0;
    for (int d = 0; d < D; ++d) var += (r[d] - mu) * (r[d] - mu);
    var /= D;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_sd)[n] = is;
    for (int d = 0; d < D; ++d) out[static_cast<std::size_t>(n) * D + d] = (r[d] - mu) * is;
  }
  const int ix = x.id();
  return x.graph()->make(x.shape(), std::move(out), {x}, [ix, N, D, inv_sd](Graph &g, int self) {
    auto gout = g.grad(self);
    auto y = g.value(self);
    with_grad(g, ix, [&](std::span<double> gx) {
      for (int n = 0; n < N; ++n) {
        const std::size_t off = static_cast<std::size_t>(n) * D;
        double mg = 0.0, mgy = 0.0;
        for (int d = 0; d < D; ++d) {
          mg += gout[off + d];
          mgy += gout[off + d] * y[off + d];
        }
        mg /= D;
        mgy /= D;
        for (int d = 0; d < D; ++d) gx[off + d] += (*inv_sd)[n] * (gout[off + d] - mg - y[off + d] * mgy);
      }
    });
  });
}

Var broadcast_rows(Var v, int n) {
  const int D = static_cast<int>(v.size());
  std::vector<double> out(static_cast<std::size_t>(n) * D);
  for (int r = 0; r < n; ++r) std::copy(v.value().begin(), v.value().end(), out.begin() + static_cast<std::size_t>(r) * D);
  const int iv = v.id();
  return v.graph()->make({n, D}, std::move(out), {v}, [iv, n, D](Graph &g, int self) {
    auto gout = g.grad(self);
    with_grad(g, iv, [&](std::span<double> gv) {
      for (int r = 0; r < n; ++r)
        for (int d = 0; d < D; ++d) gv[d] += gout[static_cast<std::size_t>(r) * D + d];
    });
  });
}

Var slice_cols(Var x, int start, int count) {
  require(x.shape().size() == 2 && start >= 0 && count > 0 && start + count <= x.shape()[1], ErrorKind::InvalidInput,
          "slice_cols out of range");
  const int N = x.shape()[0], D = x.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(N) * count);
  auto xv = x.value();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < count; ++c) out[static_cast<std::size_t>(n) * count + c] = xv[static_cast<std::size_t>(n) * D + start + c];
  const int ix = x.id();
  return x.graph()->make({N, count}, std::move(out), {x}, [=](Graph &g, int self) {
    auto gout = g.grad(self);
    with_grad(g, ix, [&](std::span<double> gx) {
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < count; ++c) gx[static_cast<std::size_t>(n) * D + start + c] += gout[static_cast<std::size_t>(n) * count + c];
    });
  });
}

Var attention(Var q, Var k, Var v, int n_heads) {
  check_same(q, k, "attention");
  check_same(q, v, "attention");
  require(q.shape().size() == 2, ErrorKind::InvalidInput, "attention: expected [N, D]");
  const int N = q.shape()[0], D = q.shape()[1];
  require(n_heads > 0 && D % n_heads == 0, ErrorKind::Configuration, "attention: D must be divisible by n_heads");
  const int dh = D / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qv = q.value(), kv = k.value(), vv = v.value();
  // probs[h][i][j]
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n_heads) * N * N);
  std::vector<double> out(static_cast<std::size_t>(N) * D, 0.0);
  for (int h = 0; h < n_heads; ++h) {
    double *P = probs->data() + static_cast<std::size_t>(h) * N * N;
    for (int i = 0; i < N; ++i) {
      double mx = -1e300;
      for (int j = 0; j < N; ++j) {
        double s = 0.0;
        for (int d = 0; d < dh; ++d) s += qv[static_cast<std::size_t>(i) * D + h * dh + d] * kv[static_cast<std::size_t>(j) * D + h * dh + d];
        s *= sc;
        P[static_cast<std::size_t>(i) * N + j] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (int j = 0; j < N; ++j) {
        double &p = P[static_cast<std::size_t>(i) * N + j];
        p = std::exp(p - mx);
        z += p;
      }
      for (int j = 0; j < N; ++j) P[static_cast<std::size_t>(i) * N + j] /= z;
      for (int j = 0; j < N; ++j) {
        const double p = P[static_cast<std::size_t>(i) * N + j];
        for (int d = 0; d < dh; ++d) out[static_cast<std::size_t>(i) * D + h * dh + d] += p * vv[static_cast<std::size_t>(j) * D + h * dh + d];
      }
    }
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return q.graph()->make({N, D}, std::move(out), {q, k, v}, [=](Graph &g, int self) {
    auto gout = g.grad(self);
    auto qv = g.value(iq), kv = g.value(ik), vv = g.value(iv);
    std::vector<double> gq(static_cast<std::size_t>(N) * D, 0.0), gk(gq.size(), 0.0), gvv(gq.size(), 0.0);
    std::vector<double> dP(static_cast<std::size_t>(N) * N);
    for (int h = 0; h < n_heads; ++h) {
      const double *P = probs->data() + static_cast<std::size_t>(h) * N * N;
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j) {
          double s = 0.0;
          for (int d = 0; d < dh; ++d) s += gout[static_cast<std::size_t>(i) * D + h * dh + d] * vv[static_cast<std::size_t>(j) * D + h * dh + d];
          dP[static_cast<std::size_t>(i) * N + j] = s;
          const double p = P[static_cast<std::size_t>(i) * N + j];
          for (int d = 0; d < dh; ++d) gvv[static_cast<std::size_t>(j) * D + h * dh + d] += p * gout[static_cast<std::size_t>(i) * D + h * dh + d];
        }
      for (int i = 0; i < N; ++i) {
        double dot = 0.0;
        for (int j = 0; j < N; ++j) dot += dP[static_cast<std::size_t>(i) * N + j] * P[static_cast<std::size_t>(i) * N + j];
        for (int j = 0; j < N; ++j) {
          const double ds = P[static_cast<std::size_t>(i) * N + j] * (dP[static_cast<std::size_t>(i) * N + j] - dot) * sc;
          for (int d = 0; d < dh; ++d) {
            gq[static_cast<std::size_t>(i) * D + h * dh + d] += ds * kv[static_cast<std::size_t>(j) * D + h * dh + d];
            gk[static_cast<std::size_t>(j) * D + h * dh + d] += ds * qv[static_cast<std::size_t>(i) * D + h * dh + d];
          }
        }
      }
    }
    auto acc = [&](int id, const std::vector<double> &src) {
      with_grad(g, id, [&](std::span<double> dst) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      });
    };
    acc(iq, gq);
    acc(ik, gk);
    acc(iv, gvv);
  });
}

Var patchify(Var img, int patch) {
  require(patch > 0, ErrorKind::Configuration, "patch size must be positive");
  require(img.shape().size() == 2, ErrorKind::InvalidInput, "patchify: expected [H, W]");
  const int H = img.shape()[0], W = img.shape()[1];
  require(H % patch == 0 && W % patch == 0, ErrorKind::InvalidInput, "patchify: dims must be multiples of the patch size");
  const int rows = H / patch, cols = W / patch, pp = patch * patch;
  auto xv = img.value();
  std::vector<double> out(xv.size());
  std::vector<std::size_t> src(xv.size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px) {
          const std::size_t t = (static_cast<std::size_t>(r) * cols + c) * pp + py * patch + px;
          src[t] = static_cast<std::size_t>(r * patch + py) * W + c * patch + px;
          out[t] = xv[src[t]];
        }
  const int ix = img.id();
  auto perm = std::make_shared<std::vector<std::size_t>>(std::move(src));
  return img.graph()->make({rows * cols, pp}, std::move(out), {img}, [ix, perm](Graph &g, int self) {
    auto gout = g.grad(self);
    with_grad(g, ix, [&](std::span<double> gx) {
      for (std::size_t t = 0; t < perm->size(); ++t) gx[(*perm)[t]] += gout[t];
    });
  });
}

Var unpatchify(Var tokens, int patch, int rows, int cols) {
  const int pp = patch * patch;
  require(tokens.shape().size() == 2 && tokens.shape()[0] == rows * cols && tokens.shape()[1] == pp,
          ErrorKind::InvalidInput, "unpatchify: token table " + shape_string(tokens.shape()) + " does not match grid");
  const int W = cols * patch;
  auto tv = tokens.value();
  std::vector<double> out(tv.size());
  std::vector<std::size_t> dst(tv.size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px) {
          const std::size_t t = (static_cast<std::size_t>(r) * cols + c) * pp + py * patch + px;
          dst[t] = static_cast<std::size_t>(r * patch + py) * W + c * patch + px;
          out[dst[t]] = tv[t];
        }
  const int it = tokens.id();
  auto perm = std::make_shared<std::vector<std::size_t>>(std::move(dst));
  return tokens.graph()->make({rows * patch, cols * patch}, std::move(out), {tokens}, [it, perm](Graph &g, int self) {
    auto gout = g.grad(self);
    with_grad(g, it, [&](std::span<double> gt) {
      for (std::size_t t = 0; t < perm->size(); ++t) gt[t] += gout[(*perm)[t]];
    });
  });
}

Var max_normalize(Var x) {
  auto xv = x.value();
  std::size_t arg = 0;
  for (std::size_t i = 1; i < xv.size(); ++i)
    if (std::abs(xv[i]) > std::abs(xv[arg])) arg = i;
  const double m = std::abs(xv[arg]);
  require(m > 0.0, ErrorKind::DegenerateInput, "max_normalize: all-zero input");
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] / m;
  const int ix = x.id();
  const double sgn = xv[arg] >= 0.0 ? 1.0 : -1.0;
  return x.graph()->make(x.shape(), std::move(out), {x}, [ix, arg, m, sgn](Graph &g, int self) {
    auto gout = g.grad(self);
    auto y = g.value(self);
    with_grad(g, ix, [&](std::span<double> gx) {
      double dot = 0.0;
      for (std::size_t i = 0; i < gx.size(); ++i) {
        gx[i] += gout[i] / m;
        dot += gout[i] * y[i];
      }
      gx[arg] -= sgn * dot / m;
    });
  });
}

} // namespace priorecon::ad
