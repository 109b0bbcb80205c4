#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "priorecon/ad/graph.hpp"
#include "priorecon/models/nn.hpp"
#include "priorecon/types.hpp"

namespace priorecon {

enum class PriorSource { SubjectPrior, Atlas, None };

std::string to_string(PriorSource s);
PriorSource prior_source_from_string(const std::string &s);

struct EnhancerConfig {
  int patch_size = 8;
  int embed_dim = 64;
  int n_heads = 4;
  int n_blocks = 6;
  double mlp_ratio = 2.0;
  PriorSource prior_source = PriorSource::SubjectPrior;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json &j, const EnhancerConfig &c);
void from_json(const nlohmann::json &j, EnhancerConfig &c);

// Row-major table of patch tokens over a rows x cols patch grid.
struct TokenGrid {
  std::vector<double> tokens; // n_tokens * dim
  int rows = 0;
  int cols = 0;
  int dim = 0;
  bool positional = false;

  int n_tokens() const { return rows * cols; }
};

// Symmetric zero padding so both dims become multiples of `patch`.
struct Padding {
  int top = 0, bottom = 0, left = 0, right = 0;
};
Padding patch_padding(Dims d, int patch);

// Raw P x P patches (identity projection) of the padded image.
TokenGrid patchify(const ImageSlice &img, int patch);
// Inverse of patchify; crops the padding back off to `dims`.
ImageSlice unpatchify(const TokenGrid &grid, int patch, Dims dims);

// Fixed 2D sinusoidal encoding [rows * cols, dim]; half the channels encode
// the row, half the column. dim must be a multiple of 4.
std::vector<double> positional_encoding(int rows, int cols, int dim);

// Per-block modulation vectors for every token.
struct ConditioningSet {
  struct Block {
    std::vector<double> gamma, beta, alpha; // each n_tokens * dim
  };
  std::vector<Block> blocks;
  int n_tokens = 0;
  int dim = 0;
};

// Transformer enhancer: y_enh = y_hat + decode(blocks(embed(y_hat)) - embed(y_hat)),
// blocks modulated by scale/shift/gate vectors computed from the embedded prior.
class Enhancer {
public:
  explicit Enhancer(const EnhancerConfig &cfg);

  const EnhancerConfig &config() const { return cfg_; }
  ad::ParameterSet &params() { return params_; }
  const ad::ParameterSet &params() const { return params_; }

  // Conditioning embedding [N, D]; `prior` is ignored (may be invalid) when
  // prior_source is none.
  ad::Var prior_embedding(ad::Graph &g, ad::Var prior_padded, int rows, int cols) const;
  // [N, 6D] modulation for one block.
  ad::Var modulation(ad::Graph &g, int block, ad::Var embedding) const;
  // y_hat, prior: [H, W]. Returns [H, W].
  ad::Var forward(ad::Graph &g, ad::Var y_hat, ad::Var prior) const;

private:
  struct BlockLayers {
    nn::Dense mod, q, k, v, o, fc1, fc2;
  };
  EnhancerConfig cfg_;
  ad::ParameterSet params_;
  nn::Dense embed_, prior_embed_, out_;
  std::string null_embedding_;
  std::vector<BlockLayers> blocks_;
};

ConditioningSet embed_prior(const Enhancer &net, const ImageSlice *ps_reg, Dims target);
ImageSlice enhance_forward(const Enhancer &net, const ImageSlice &y_hat, const ImageSlice *ps_reg);

} // namespace priorecon
