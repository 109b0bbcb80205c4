#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "priorecon/ad/graph.hpp"
#include "priorecon/models/nn.hpp"
#include "priorecon/types.hpp"

namespace priorecon {

struct VarNetConfig {
  int n_cascades = 6;
  int unet_channels = 16;
  int unet_depth = 3;
  int sme_channels = 8;
  int sme_depth = 2;
  double dc_weight_init = 1.0;
  // <= 0: use the mask's center_radius.
  int acs_radius = -1;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json &j, const VarNetConfig &c);
void from_json(const nlohmann::json &j, VarNetConfig &c);

struct CascadeState {
  KSpaceTensor k_current;
  CoilSensitivityMaps maps;
  KSpaceTensor k_measured;
  SamplingMask mask;
};

// Unrolled k-space cascades: SME once, then per cascade
//   k <- k - eta_t * M (k - k_u) + F E UNet_t(R F^-1 k).
class VarNet {
public:
  explicit VarNet(const VarNetConfig &cfg);

  const VarNetConfig &config() const { return cfg_; }
  ad::ParameterSet &params() { return params_; }
  const ad::ParameterSet &params() const { return params_; }

  // [C, H, W, 2] k-space -> [C, H, W, 2] normalized maps.
  ad::Var sensitivities(ad::Graph &g, ad::Var k_u, const SamplingMask &mask) const;
  ad::Var dc(ad::Graph &g, int cascade, ad::Var k, ad::Var k_u, const SamplingMask &mask) const;
  ad::Var refinement(ad::Graph &g, int cascade, ad::Var k, ad::Var maps) const;
  // Final k-space after all cascades.
  ad::Var cascades(ad::Graph &g, ad::Var k_u, const SamplingMask &mask) const;
  // RSS image [H, W].
  ad::Var forward(ad::Graph &g, ad::Var k_u, const SamplingMask &mask) const;

  int acs_radius(const SamplingMask &mask) const;

private:
  VarNetConfig cfg_;
  ad::ParameterSet params_;
  nn::UNet sme_;
  std::vector<nn::UNet> refine_;
};

CoilSensitivityMaps estimate_sensitivities(const VarNet &net, const KSpaceTensor &k_u, const SamplingMask &mask);
KSpaceTensor dc_block(const CascadeState &state, double eta);
KSpaceTensor refinement_block(const VarNet &net, int cascade, const CascadeState &state);
ImageSlice varnet_forward(const VarNet &net, const KSpaceTensor &x_u, const SamplingMask &mask);

} // namespace priorecon
