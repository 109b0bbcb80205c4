#include "priorecon/models/varnet.hpp"

#include "priorecon/ad/mri_ops.hpp"
#include "priorecon/ad/ops.hpp"
#include "priorecon/mask.hpp"
#include "priorecon/random.hpp"

namespace priorecon {

void VarNetConfig::validate() const {
  require(n_cascades >= 1, ErrorKind::Configuration, "varnet: n_cascades must be >= 1");
  require(unet_channels >= 1 && unet_depth >= 1 && sme_channels >= 1 && sme_depth >= 1, ErrorKind::Configuration,
          "varnet: channels and depth must be >= 1");
}

void to_json(nlohmann::json &j, const VarNetConfig &c) {
  j = {{"n_cascades", c.n_cascades},       {"unet_channels", c.unet_channels}, {"unet_depth", c.unet_depth},
       {"sme_channels", c.sme_channels},   {"sme_depth", c.sme_depth},         {"dc_weight_init", c.dc_weight_init},
       {"acs_radius", c.acs_radius},       {"seed", c.seed}};
}

void from_json(const nlohmann::json &j, VarNetConfig &c) {
  VarNetConfig d;
  c.n_cascades = j.value("n_cascades", d.n_cascades);
  c.unet_channels = j.value("unet_channels", d.unet_channels);
  c.unet_depth = j.value("unet_depth", d.unet_depth);
  c.sme_channels = j.value("sme_channels", d.sme_channels);
  c.sme_depth = j.value("sme_depth", d.sme_depth);
  c.dc_weight_init = j.value("dc_weight_init", d.dc_weight_init);
  c.acs_radius = j.value("acs_radius", d.acs_radius);
  c.seed = j.value("seed", d.seed);
}

VarNet::VarNet(const VarNetConfig &cfg) : cfg_(cfg) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, 0x7661726e));
  sme_ = nn::UNet(params_, "sme", {2, 2, cfg.sme_channels, cfg.sme_depth, true}, rng);
  for (int t = 0; t < cfg.n_cascades; ++t) {
    const std::string p = "cascade" + std::to_string(t);
    params_.add(p + ".eta", {1}, {cfg.dc_weight_init});
    refine_.emplace_back(params_, p + ".unet", nn::UNetConfig{2, 2, cfg.unet_channels, cfg.unet_depth, true}, rng);
  }
}

int VarNet::acs_radius(const SamplingMask &mask) const { return cfg_.acs_radius > 0 ? cfg_.acs_radius : mask.center_radius; }

ad::Var VarNet::sensitivities(ad::Graph &g, ad::Var k_u, const SamplingMask &mask) const {
  const int radius = acs_radius(mask);
  require(radius > 0, ErrorKind::Configuration, "estimate_sensitivities: no autocalibration region (center_radius 0)");
  const Dims d = mask.dims();
  Plane<std::uint8_t> acs(d, 0);
  for (int y = 0; y < d.ny; ++y)
    for (int z = 0; z < d.nz; ++z) acs(y, z) = in_center_disc(y, z, d, radius) ? 1 : 0;
  ad::Var coils = ad::fft2c(ad::mask_mul(k_u, acs), true);
  const int nc = k_u.shape()[0];
  std::vector<ad::Var> refined;
  for (int c = 0; c < nc; ++c) {
    ad::Var x = ad::complex_to_channels(ad::index0(coils, c));
    auto s = nn::standardize(x);
    ad::Var delta = ad::mul_channel(sme_.forward(g, params_, s.x), s.sd);
    refined.push_back(ad::channels_to_complex(ad::add(x, delta)));
  }
  return ad::normalize_coils(ad::stack0(refined));
}

ad::Var VarNet::dc(ad::Graph &g, int cascade, ad::Var k, ad::Var k_u, const SamplingMask &mask) const {
  ad::Var eta = g.param(params_.at("cascade" + std::to_string(cascade) + ".eta"));
  return ad::sub(k, ad::mul_scalar(ad::mask_mul(ad::sub(k, k_u), mask.mask), eta));
}

ad::Var VarNet::refinement(ad::Graph &g, int cascade, ad::Var k, ad::Var maps) const {
  ad::Var img = ad::complex_to_channels(ad::creduce(ad::fft2c(k, true), maps));
  auto s = nn::standardize(img);
  ad::Var out = ad::mul_channel(refine_[cascade].forward(g, params_, s.x), s.sd);
  return ad::fft2c(ad::cexpand(ad::channels_to_complex(out), maps), false);
}

ad::Var VarNet::cascades(ad::Graph &g, ad::Var k_u, const SamplingMask &mask) const {
  const auto &s = k_u.shape();
  require(s.size() == 4 && s[3] == 2 && Dims{s[1], s[2]} == mask.dims(), ErrorKind::InvalidInput,
          "varnet: k-space shape " + ad::shape_string(s) + " does not match mask dims " + to_string(mask.dims()));
  ad::Var maps = sensitivities(g, k_u, mask);
  ad::Var k = k_u;
  for (int t = 0; t < cfg_.n_cascades; ++t) k = ad::add(dc(g, t, k, k_u, mask), refinement(g, t, k, maps));
  return k;
}

ad::Var VarNet::forward(ad::Graph &g, ad::Var k_u, const SamplingMask &mask) const {
  return ad::rss(ad::fft2c(cascades(g, k_u, mask), true));
}

CoilSensitivityMaps estimate_sensitivities(const VarNet &net, const KSpaceTensor &k_u, const SamplingMask &mask) {
  require(k_u.dims() == mask.dims(), ErrorKind::InvalidInput, "estimate_sensitivities: dims mismatch");
  ad::Graph g;
  return ad::from_var<CoilSensitivityMaps>(net.sensitivities(g, ad::to_var(g, k_u), mask));
}

KSpaceTensor dc_block(const CascadeState &state, double eta) {
  const auto &k = state.k_current;
  require(state.k_measured.same_shape(k.n_coils(), k.dims()) && state.mask.dims() == k.dims(), ErrorKind::InvalidInput,
          "dc_block: inconsistent cascade state");
  KSpaceTensor out = k;
  const std::size_t n = k.plane_size();
  for (int c = 0; c < k.n_coils(); ++c)
    for (std::size_t i = 0; i < n; ++i)
      if (state.mask.mask[i]) out.coil(c)[i] = (1.0 - eta) * k.coil(c)[i] + eta * state.k_measured.coil(c)[i];
  return out;
}

KSpaceTensor refinement_block(const VarNet &net, int cascade, const CascadeState &state) {
  require(cascade >= 0 && cascade < net.config().n_cascades, ErrorKind::InvalidInput, "refinement_block: bad cascade index");
  require(state.maps.same_shape(state.k_current.n_coils(), state.k_current.dims()), ErrorKind::InvalidInput,
          "refinement_block: maps do not match k-space");
  ad::Graph g;
  return ad::from_var<KSpaceTensor>(
      net.refinement(g, cascade, ad::to_var(g, state.k_current), ad::to_var(g, state.maps)));
}

ImageSlice varnet_forward(const VarNet &net, const KSpaceTensor &x_u, const SamplingMask &mask) {
  require(x_u.all_finite(), ErrorKind::InvalidInput, "varnet_forward: non-finite k-space");
  ad::Graph g;
  return ad::image_from_var(net.forward(g, ad::to_var(g, x_u), mask));
}

} // namespace priorecon
