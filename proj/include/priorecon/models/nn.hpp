#pragma once

#include <string>
#include <vector>

#include "priorecon/ad/graph.hpp"
#include "priorecon/random.hpp"

// Layer building blocks over a ParameterSet. Layers hold parameter names and
// look their tensors up at forward time.
namespace priorecon::nn {

std::vector<double> he_normal(std::size_t n, int fan_in, Rng &rng);
std::vector<double> xavier_uniform(std::size_t n, int fan_in, int fan_out, Rng &rng);

struct Conv {
  std::string weight;
  std::string bias;
};
Conv add_conv(ad::ParameterSet &ps, const std::string &name, int in, int out, int kernel, Rng &rng, bool zero = false);
ad::Var conv(ad::Graph &g, const ad::ParameterSet &ps, const Conv &c, ad::Var x);

struct Dense {
  std::string weight;
  std::string bias; // empty: no bias
};
Dense add_dense(ad::ParameterSet &ps, const std::string &name, int in, int out, Rng &rng, bool bias = true,
                bool zero = false);
ad::Var dense(ad::Graph &g, const ad::ParameterSet &ps, const Dense &d, ad::Var x);

struct UNetConfig {
  int in_channels = 2;
  int out_channels = 2;
  int base_channels = 8;
  int depth = 3;
  // Zero the final 1x1 conv so the untrained network outputs exactly 0.
  bool zero_output = true;
};

// Conv3x3/leaky-ReLU pairs, average-pool down, nearest up, skip concat,
// 1x1 output. Inputs are zero-padded to a multiple of 2^(depth-1) and cropped back.
class UNet {
public:
  UNet() = default;
  UNet(ad::ParameterSet &ps, const std::string &prefix, const UNetConfig &cfg, Rng &rng);

  ad::Var forward(ad::Graph &g, const ad::ParameterSet &ps, ad::Var x) const;
  const UNetConfig &config() const { return cfg_; }

private:
  UNetConfig cfg_;
  std::vector<std::pair<Conv, Conv>> down_;
  std::vector<std::pair<Conv, Conv>> up_;
  Conv out_;
};

// Per-channel (x - mean) / sd on [C, H, W].
struct Standardized {
  ad::Var x;
  ad::Var mean;
  ad::Var sd;
};
Standardized standardize(ad::Var x, double eps = 1e-12);

} // namespace priorecon::nn
