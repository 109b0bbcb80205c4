#include "priorecon/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "priorecon/ad/ops.hpp"

namespace priorecon {
namespace {

// Window sums of a grid over all w x w positions fully inside it.
std::vector<double> window_sums(std::span<const double> v, Dims d, int w) {
  const int ny = d.ny, nz = d.nz;
  std::vector<double> integral(static_cast<std::size_t>(ny + 1) * (nz + 1), 0.0);
  for (int y = 0; y < ny; ++y) {
    double row = 0.0;
    for (int z = 0; z < nz; ++z) {
      row += v[static_cast<std::size_t>(y) * nz + z];
      integral[static_cast<std::size_t>(y + 1) * (nz + 1) + z + 1] = integral[static_cast<std::size_t>(y) * (nz + 1) + z + 1] + row;
    }
  }
  const int oy = ny - w + 1, oz = nz - w + 1;
  std::vector<double> out(static_cast<std::size_t>(oy) * oz);
  auto I = [&](int y, int z) { return integral[static_cast<std::size_t>(y) * (nz + 1) + z]; };
  for (int y = 0; y < oy; ++y)
    for (int z = 0; z < oz; ++z) out[static_cast<std::size_t>(y) * oz + z] = I(y + w, z + w) - I(y, z + w) - I(y + w, z) + I(y, z);
  return out;
}

// Adjoint of window_sums: every pixel collects the coefficients of the
// windows that contain it.
std::vector<double> scatter_windows(const std::vector<double> &coef, Dims d, int w) {
  const int ny = d.ny, nz = d.nz;
  const int oy = ny - w + 1, oz = nz - w + 1;
  std::vector<double> integral(static_cast<std::size_t>(oy + 1) * (oz + 1), 0.0);
  for (int y = 0; y < oy; ++y) {
    double row = 0.0;
    for (int z = 0; z < oz; ++z) {
      row += coef[static_cast<std::size_t>(y) * oz + z];
      integral[static_cast<std::size_t>(y + 1) * (oz + 1) + z + 1] = integral[static_cast<std::size_t>(y) * (oz + 1) + z + 1] + row;
    }
  }
  auto I = [&](int y, int z) { return integral[static_cast<std::size_t>(y) * (oz + 1) + z]; };
  std::vector<double> out(d.size());
  for (int y = 0; y < ny; ++y) {
    const int y0 = std::max(0, y - w + 1), y1 = std::min(oy, y + 1);
    for (int z = 0; z < nz; ++z) {
      const int z0 = std::max(0, z - w + 1), z1 = std::min(oz, z + 1);
      out[static_cast<std::size_t>(y) * nz + z] = I(y1, z1) - I(y0, z1) - I(y1, z0) + I(y0, z0);
    }
  }
  return out;
}

} // namespace

double ssim_with_gradient(std::span<const double> a, std::span<const double> b, Dims d, double data_range,
                          const SsimOptions &opts, std::span<double> grad_a, std::span<double> grad_b) {
  require(a.size() == d.size() && b.size() == d.size(), ErrorKind::InvalidInput, "ssim: image dims mismatch");
  require(data_range > 0.0, ErrorKind::InvalidInput, "ssim: data_range must be positive");
  const int w = opts.window;
  require(w >= 2 && d.ny >= w && d.nz >= w, ErrorKind::InvalidInput,
          "ssim: image " + to_string(d) + " smaller than the " + std::to_string(w) + "x" + std::to_string(w) + " window");

  const std::size_t n = d.size();
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto sa = window_sums(a, d, w), sb = window_sums(b, d, w);
  const auto saa = window_sums(aa, d, w), sbb = window_sums(bb, d, w), sab = window_sums(ab, d, w);

  const double N = static_cast<double>(w) * w;
  const double cov = opts.sample_covariance ? N / (N - 1.0) : 1.0;
  const double c1 = (opts.k1 * data_range) * (opts.k1 * data_range);
  const double c2 = (opts.k2 * data_range) * (opts.k2 * data_range);
  const std::size_t nw = sa.size();
  const bool want = !grad_a.empty() || !grad_b.empty();

  std::vector<double> ca0, ca1, ca2, cb0, cb1, cb2;
  if (want) {
    ca0.resize(nw), ca1.resize(nw), ca2.resize(nw), cb0.resize(nw), cb1.resize(nw), cb2.resize(nw);
  }
  double total = 0.0;
  for (std::size_t k = 0; k < nw; ++k) {
    const double mx = sa[k] / N, my = sb[k] / N;
    const double vx = cov * (saa[k] / N - mx * mx);
    const double vy = cov * (sbb[k] / N - my * my);
    const double vxy = cov * (sab[k] / N - mx * my);
    const double A1 = 2.0 * mx * my + c1, A2 = 2.0 * vxy + c2;
    const double B1 = mx * mx + my * my + c1, B2 = vx + vy + c2;
    const double S = (A1 * A2) / (B1 * B2);
    total += S;
    if (!want) continue;
    const double dS_dmx = 2.0 * my * A2 / (B1 * B2) - S * 2.0 * mx / B1;
    const double dS_dmy = 2.0 * mx * A2 / (B1 * B2) - S * 2.0 * my / B1;
    const double dS_dvx = -S / B2; // == dS/dvy
    const double dS_dvxy = 2.0 * A1 / (B1 * B2);
    // dS/dx_i = c0 + c1 x_i + c2 y_i for pixel i inside the window.
    ca0[k] = dS_dmx / N - dS_dvx * (2.0 * cov / N) * mx - dS_dvxy * (cov / N) * my;
    ca1[k] = dS_dvx * 2.0 * cov / N;
    ca2[k] = dS_dvxy * cov / N;
    cb0[k] = dS_dmy / N - dS_dvx * (2.0 * cov / N) * my - dS_dvxy * (cov / N) * mx;
    cb1[k] = dS_dvx * 2.0 * cov / N;
    cb2[k] = dS_dvxy * cov / N;
  }
  const double inv = 1.0 / static_cast<double>(nw);
  if (!grad_a.empty()) {
    const auto s0 = scatter_windows(ca0, d, w), s1 = scatter_windows(ca1, d, w), s2 = scatter_windows(ca2, d, w);
    for (std::size_t i = 0; i < n; ++i) grad_a[i] = inv * (s0[i] + s1[i] * a[i] + s2[i] * b[i]);
  }
  if (!grad_b.empty()) {
    const auto s0 = scatter_windows(cb0, d, w), s1 = scatter_windows(cb1, d, w), s2 = scatter_windows(cb2, d, w);
    for (std::size_t i = 0; i < n; ++i) grad_b[i] = inv * (s0[i] + s1[i] * b[i] + s2[i] * a[i]);
  }
  return total * inv;
}

double ssim(const ImageSlice &a, const ImageSlice &b, double data_range, const SsimOptions &opts) {
  require(a.dims() == b.dims(), ErrorKind::InvalidInput, "ssim: dims mismatch " + to_string(a.dims()) + " vs " + to_string(b.dims()));
  return ssim_with_gradient(a.values(), b.values(), a.dims(), data_range, opts, {}, {});
}

double ssim_loss(const ImageSlice &y_enh, const ImageSlice &y) {
  require(y_enh.dims() == y.dims(), ErrorKind::InvalidInput, "ssim_loss: dims mismatch");
  const double ma = y_enh.max_abs(), mb = y.max_abs();
  require(ma > 0.0 && mb > 0.0, ErrorKind::DegenerateInput, "ssim_loss: all-zero input");
  ImageSlice a(y_enh.dims()), b(y.dims());
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = y_enh[i] / ma;
    b[i] = y[i] / mb;
  }
  return 1.0 - ssim(a, b, 1.0);
}

double psnr(const ImageSlice &a, const ImageSlice &b, double data_range) {
  require(a.dims() == b.dims(), ErrorKind::InvalidInput, "psnr: dims mismatch");
  require(data_range > 0.0, ErrorKind::InvalidInput, "psnr: data_range must be positive");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  if (se == 0.0) return kInfinitePsnr;
  const double mse = se / static_cast<double>(a.size());
  return 10.0 * std::log10(data_range * data_range / mse);
}

double nrmse(const ImageSlice &reference, const ImageSlice &b) {
  require(reference.dims() == b.dims(), ErrorKind::InvalidInput, "nrmse: dims mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    num += (reference[i] - b[i]) * (reference[i] - b[i]);
    den += reference[i] * reference[i];
  }
  require(den > 0.0, ErrorKind::DegenerateInput, "nrmse: zero reference");
  return std::sqrt(num / den);
}

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

} // namespace

WilcoxonResult wilcoxon_signed_rank(std::span<const double> diffs, double alpha, WilcoxonMethod method) {
  std::vector<double> d;
  for (double v : diffs) {
    require(std::isfinite(v), ErrorKind::InvalidInput, "wilcoxon: non-finite difference");
    if (v != 0.0) d.push_back(v);
  }
  require(!d.empty(), ErrorKind::UndefinedTest, "wilcoxon: all differences are zero");
  const int n = static_cast<int>(d.size());
  require(n >= 5, ErrorKind::InvalidInput, "wilcoxon: need at least 5 nonzero differences, got " + std::to_string(n));

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) { return std::abs(d[i]) < std::abs(d[j]); });
  // Doubled midranks stay integral.
  std::vector<int> rank2(n);
  double tie_term = 0.0;
  for (int i = 0; i < n;) {
    int j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const int r2 = (i + 1) + (j + 1); // 2 * average of ranks i+1..j+1
    for (int k = i; k <= j; ++k) rank2[order[k]] = r2;
    const double t = j - i + 1;
    tie_term += t * t * t - t;
    i = j + 1;
  }

  WilcoxonResult res;
  res.n_used = n;
  int w_plus2 = 0, total2 = 0;
  for (int i = 0; i < n; ++i) {
    total2 += rank2[i];
    if (d[i] > 0) w_plus2 += rank2[i];
  }
  res.w_plus = w_plus2 / 2.0;
  const int t2 = std::min(w_plus2, total2 - w_plus2);
  res.statistic = t2 / 2.0;

  const bool exact = method == WilcoxonMethod::Exact || (method == WilcoxonMethod::Auto && n <= 25);
  res.exact = exact;
  if (exact) {
    require(n <= 40, ErrorKind::InvalidInput, "wilcoxon: exact enumeration limited to n <= 40");
    // counts[s] = number of sign assignments whose doubled W+ equals s.
    std::vector<double> counts(total2 + 1, 0.0);
    counts[0] = 1.0;
    int reach = 0;
    for (int i = 0; i < n; ++i) {
      for (int s = reach; s >= 0; --s)
        if (counts[s] != 0.0) counts[s + rank2[i]] += counts[s];
      reach += rank2[i];
    }
    double le = 0.0;
    for (int s = 0; s <= t2; ++s) le += counts[s];
    res.p_value = std::min(1.0, 2.0 * le / std::ldexp(1.0, n));
  } else {
    const double nn = n;
    const double mean = nn * (nn + 1.0) / 4.0;
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    const double diff = res.statistic - mean;
    const double corr = diff > 0 ? 0.5 : diff < 0 ? -0.5 : 0.0;
    const double z = (diff - corr) / std::sqrt(var);
    res.p_value = std::min(1.0, 2.0 * normal_cdf(-std::abs(z)));
  }
  res.significant = res.p_value < alpha;
  return res;
}

namespace ad {

Var ssim(Var a, Var b, double data_range, const SsimOptions &opts) {
  require(a.shape().size() == 2 && a.shape() == b.shape(), ErrorKind::InvalidInput, "ad::ssim: expected matching [H, W]");
  const Dims d{a.shape()[0], a.shape()[1]};
  Graph &g = *a.graph();
  const bool ga = g.requires_grad(a.id()), gb = g.requires_grad(b.id());
  auto grads = std::make_shared<std::vector<double>>();
  std::span<double> span_a, span_b;
  if (ga || gb) {
    grads->assign(2 * d.size(), 0.0);
    if (ga) span_a = std::span<double>(*grads).first(d.size());
    if (gb) span_b = std::span<double>(*grads).last(d.size());
  }
  const double s = ssim_with_gradient(a.value(), b.value(), d, data_range, opts, span_a, span_b);
  const int ia = a.id(), ib = b.id();
  const std::size_t n = d.size();
  return g.make({1}, {s}, {a, b}, [ia, ib, n, grads](Graph &g, int self) {
    const double go = g.grad(self)[0];
    if (g.requires_grad(ia)) {
      auto gx = g.grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i) gx[i] += go * (*grads)[i];
    }
    if (g.requires_grad(ib)) {
      auto gx = g.grad_buffer(ib);
      for (std::size_t i = 0; i < n; ++i) gx[i] += go * (*grads)[n + i];
    }
  });
}

Var ssim_loss(Var y_enh, Var y) {
  Var s = ssim(max_normalize(y_enh), max_normalize(y), 1.0);
  return add_scalar(scale(s, -1.0), 1.0);
}

} // namespace ad
} // namespace priorecon
