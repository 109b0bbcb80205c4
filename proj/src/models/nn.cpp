#include "priorecon/models/nn.hpp"

#include <cmath>

#include "priorecon/ad/ops.hpp"

namespace priorecon::nn {

std::vector<double> he_normal(std::size_t n, int fan_in, Rng &rng) {
  const double sd = std::sqrt(2.0 / fan_in);
  std::vector<double> v(n);
  for (auto &x : v) x = sd * rng.normal();
  return v;
}

std::vector<double> xavier_uniform(std::size_t n, int fan_in, int fan_out, Rng &rng) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  std::vector<double> v(n);
  for (auto &x : v) x = rng.uniform(-a, a);
  return v;
}

Conv add_conv(ad::ParameterSet &ps, const std::string &name, int in, int out, int kernel, Rng &rng, bool zero) {
  const std::size_t n = static_cast<std::size_t>(out) * in * kernel * kernel;
  Conv c{name + ".weight", name + ".bias"};
  ps.add(c.weight, {out, in, kernel, kernel}, zero ? std::vector<double>(n, 0.0) : he_normal(n, in * kernel * kernel, rng));
  ps.add(c.bias, {out}, std::vector<double>(out, 0.0));
  return c;
}

ad::Var conv(ad::Graph &g, const ad::ParameterSet &ps, const Conv &c, ad::Var x) {
  return ad::conv2d(x, g.param(ps.at(c.weight)), g.param(ps.at(c.bias)));
}

Dense add_dense(ad::ParameterSet &ps, const std::string &name, int in, int out, Rng &rng, bool bias, bool zero) {
  const std::size_t n = static_cast<std::size_t>(out) * in;
  Dense d{name + ".weight", bias ? name + ".bias" : std::string{}};
  ps.add(d.weight, {out, in}, zero ? std::vector<double>(n, 0.0) : xavier_uniform(n, in, out, rng));
  if (bias) ps.add(d.bias, {out}, std::vector<double>(out, 0.0));
  return d;
}

ad::Var dense(ad::Graph &g, const ad::ParameterSet &ps, const Dense &d, ad::Var x) {
  return ad::linear(x, g.param(ps.at(d.weight)), d.bias.empty() ? ad::Var{} : g.param(ps.at(d.bias)));
}

UNet::UNet(ad::ParameterSet &ps, const std::string &prefix, const UNetConfig &cfg, Rng &rng) : cfg_(cfg) {
  require(cfg.depth >= 1 && cfg.base_channels >= 1 && cfg.in_channels >= 1 && cfg.out_channels >= 1,
          ErrorKind::Configuration, "unet: depth and channels must be >= 1");
  int in = cfg.in_channels;
  for (int l = 0; l < cfg.depth; ++l) {
    const int ch = cfg.base_channels << l;
    const std::string p = prefix + ".down" + std::to_string(l);
    Conv a = add_conv(ps, p + ".conv0", in, ch, 3, rng);
    Conv b = add_conv(ps, p + ".conv1", ch, ch, 3, rng);
    down_.emplace_back(a, b);
    in = ch;
  }
  for (int l = cfg.depth - 2; l >= 0; --l) {
    const int ch = cfg.base_channels << l;
    const std::string p = prefix + ".up" + std::to_string(l);
    Conv a = add_conv(ps, p + ".conv0", in + ch, ch, 3, rng);
    Conv b = add_conv(ps, p + ".conv1", ch, ch, 3, rng);
    up_.emplace_back(a, b);
    in = ch;
  }
  out_ = add_conv(ps, prefix + ".out", in, cfg.out_channels, 1, rng, cfg.zero_output);
}

ad::Var UNet::forward(ad::Graph &g, const ad::ParameterSet &ps, ad::Var x) const {
  const auto &s = x.shape();
  require(s.size() == 3 && s[0] == cfg_.in_channels, ErrorKind::InvalidInput,
          "unet: expected [" + std::to_string(cfg_.in_channels) + ", H, W], got " + ad::shape_string(s));
  const int h = s[1], w = s[2];
  const int m = 1 << (cfg_.depth - 1);
  const int ph = (m - h % m) % m, pw = (m - w % m) % m;
  if (ph || pw) x = ad::pad2d(x, ph / 2, ph - ph / 2, pw / 2, pw - pw / 2);

  std::vector<ad::Var> skips;
  for (int l = 0; l < cfg_.depth; ++l) {
    if (l > 0) x = ad::avg_pool2(x);
    x = ad::leaky_relu(conv(g, ps, down_[l].first, x));
    x = ad::leaky_relu(conv(g, ps, down_[l].second, x));
    skips.push_back(x);
  }
  for (std::size_t i = 0; i < up_.size(); ++i) {
    const int l = cfg_.depth - 2 - static_cast<int>(i);
    x = ad::concat0(ad::upsample2(x), skips[l]);
    x = ad::leaky_relu(conv(g, ps, up_[i].first, x));
    x = ad::leaky_relu(conv(g, ps, up_[i].second, x));
  }
  x = conv(g, ps, out_, x);
  if (ph || pw) x = ad::crop2d(x, ph / 2, pw / 2, h, w);
  return x;
}

Standardized standardize(ad::Var x, double eps) {
  ad::Var mean = ad::channel_mean(x);
  ad::Var centered = ad::sub_channel(x, mean);
  ad::Var sd = ad::sqrt(ad::add_scalar(ad::channel_mean(ad::mul(centered, centered)), eps));
  return {ad::div_channel(centered, sd), mean, sd};
}

} // namespace priorecon::nn
