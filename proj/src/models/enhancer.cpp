#include "priorecon/models/enhancer.hpp"

#include <cmath>

#include "priorecon/ad/mri_ops.hpp"
#include "priorecon/ad/ops.hpp"
#include "priorecon/random.hpp"

namespace priorecon {

std::string to_string(PriorSource s) {
  switch (s) {
  case PriorSource::SubjectPrior:
    return "subject_prior";
  case PriorSource::Atlas:
    return "atlas";
  case PriorSource::None:
    return "none";
  }
  return "none";
}

PriorSource prior_source_from_string(const std::string &s) {
  if (s == "subject_prior") return PriorSource::SubjectPrior;
  if (s == "atlas") return PriorSource::Atlas;
  if (s == "none") return PriorSource::None;
  fail(ErrorKind::Configuration, "unknown prior_source '" + s + "' (expected subject_prior, atlas or none)");
}

void EnhancerConfig::validate() const {
  require(patch_size > 0, ErrorKind::Configuration, "enhancer: patch_size must be positive");
  require(embed_dim > 0 && embed_dim % 4 == 0, ErrorKind::Configuration, "enhancer: embed_dim must be a positive multiple of 4");
  require(n_heads > 0 && embed_dim % n_heads == 0, ErrorKind::Configuration, "enhancer: embed_dim must be divisible by n_heads");
  require(n_blocks >= 1, ErrorKind::Configuration, "enhancer: n_blocks must be >= 1");
  require(mlp_ratio > 0, ErrorKind::Configuration, "enhancer: mlp_ratio must be positive");
}

void to_json(nlohmann::json &j, const EnhancerConfig &c) {
  j = {{"patch_size", c.patch_size}, {"embed_dim", c.embed_dim}, {"n_heads", c.n_heads},
       {"n_blocks", c.n_blocks},     {"mlp_ratio", c.mlp_ratio},   {"prior_source", to_string(c.prior_source)},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json &j, EnhancerConfig &c) {
  EnhancerConfig d;
  c.patch_size = j.value("patch_size", d.patch_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.n_blocks = j.value("n_blocks", d.n_blocks);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.prior_source = prior_source_from_string(j.value("prior_source", to_string(d.prior_source)));
  c.seed = j.value("seed", d.seed);
}

Padding patch_padding(Dims d, int patch) {
  require(patch > 0, ErrorKind::Configuration, "patch size must be positive");
  const int ph = (patch - d.ny % patch) % patch, pw = (patch - d.nz % patch) % patch;
  return {ph / 2, ph - ph / 2, pw / 2, pw - pw / 2};
}

namespace {

ad::Var pad_image(ad::Var img, const Padding &p) {
  if (p.top + p.bottom + p.left + p.right == 0) return img;
  ad::Var x = ad::reshape(img, {1, img.shape()[0], img.shape()[1]});
  x = ad::pad2d(x, p.top, p.bottom, p.left, p.right);
  return ad::reshape(x, {x.shape()[1], x.shape()[2]});
}

ad::Var crop_image(ad::Var img, const Padding &p, Dims d) {
  if (p.top + p.bottom + p.left + p.right == 0) return img;
  ad::Var x = ad::reshape(img, {1, img.shape()[0], img.shape()[1]});
  x = ad::crop2d(x, p.top, p.left, d.ny, d.nz);
  return ad::reshape(x, {d.ny, d.nz});
}

} // namespace

TokenGrid patchify(const ImageSlice &img, int patch) {
  const Padding p = patch_padding(img.dims(), patch);
  ad::Graph g;
  ad::Var t = ad::patchify(pad_image(ad::image_to_var(g, img), p), patch);
  TokenGrid out;
  out.tokens.assign(t.value().begin(), t.value().end());
  out.rows = (img.ny() + p.top + p.bottom) / patch;
  out.cols = (img.nz() + p.left + p.right) / patch;
  out.dim = patch * patch;
  return out;
}

ImageSlice unpatchify(const TokenGrid &grid, int patch, Dims dims) {
  require(grid.dim == patch * patch, ErrorKind::InvalidInput, "unpatchify: token dim is not patch^2");
  const Padding p = patch_padding(dims, patch);
  require(grid.rows * patch == dims.ny + p.top + p.bottom && grid.cols * patch == dims.nz + p.left + p.right,
          ErrorKind::InvalidInput, "unpatchify: grid does not cover " + to_string(dims));
  ad::Graph g;
  ad::Var t = g.constant({grid.n_tokens(), grid.dim}, grid.tokens);
  return ad::image_from_var(crop_image(ad::unpatchify(t, patch, grid.rows, grid.cols), p, dims));
}

std::vector<double> positional_encoding(int rows, int cols, int dim) {
  require(dim % 4 == 0, ErrorKind::Configuration, "positional encoding dim must be a multiple of 4");
  const int quarter = dim / 4;
  std::vector<double> pe(static_cast<std::size_t>(rows) * cols * dim);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      double *row = pe.data() + (static_cast<std::size_t>(r) * cols + c) * dim;
      for (int i = 0; i < quarter; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / quarter);
        row[i] = std::sin(r * freq);
        row[quarter + i] = std::cos(r * freq);
        row[2 * quarter + i] = std::sin(c * freq);
        row[3 * quarter + i] = std::cos(c * freq);
      }
    }
  return pe;
}

Enhancer::Enhancer(const EnhancerConfig &cfg) : cfg_(cfg) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, 0x656e68));
  const int D = cfg.embed_dim, pp = cfg.patch_size * cfg.patch_size;
  const int hidden = std::max(1, static_cast<int>(std::lround(cfg.mlp_ratio * D)));
  embed_ = nn::add_dense(params_, "embed", pp, D, rng);
  if (cfg.prior_source == PriorSource::None) {
    null_embedding_ = "null_embedding";
    std::vector<double> v(D);
    for (auto &x : v) x = 0.02 * rng.normal();
    params_.add(null_embedding_, {1, D}, std::move(v));
  } else {
    prior_embed_ = nn::add_dense(params_, "prior_embed", pp, D, rng);
  }
  for (int b = 0; b < cfg.n_blocks; ++b) {
    const std::string p = "block" + std::to_string(b);
    BlockLayers l;
    l.mod = nn::add_dense(params_, p + ".mod", D, 6 * D, rng, true, true);
    l.q = nn::add_dense(params_, p + ".q", D, D, rng);
    l.k = nn::add_dense(params_, p + ".k", D, D, rng);
    l.v = nn::add_dense(params_, p + ".v", D, D, rng);
    l.o = nn::add_dense(params_, p + ".o", D, D, rng);
    l.fc1 = nn::add_dense(params_, p + ".fc1", D, hidden, rng);
    l.fc2 = nn::add_dense(params_, p + ".fc2", hidden, D, rng);
    blocks_.push_back(l);
  }
  out_ = nn::add_dense(params_, "out", D, pp, rng, false);
}

ad::Var Enhancer::prior_embedding(ad::Graph &g, ad::Var prior_padded, int rows, int cols) const {
  const int D = cfg_.embed_dim;
  if (cfg_.prior_source == PriorSource::None)
    return ad::silu(ad::broadcast_rows(g.param(params_.at(null_embedding_)), rows * cols));
  ad::Var pe = g.constant({rows * cols, D}, positional_encoding(rows, cols, D));
  ad::Var e = nn::dense(g, params_, prior_embed_, ad::patchify(prior_padded, cfg_.patch_size));
  return ad::silu(ad::add(e, pe));
}

ad::Var Enhancer::modulation(ad::Graph &g, int block, ad::Var embedding) const {
  return nn::dense(g, params_, blocks_[block].mod, embedding);
}

ad::Var Enhancer::forward(ad::Graph &g, ad::Var y_hat, ad::Var prior) const {
  require(y_hat.shape().size() == 2, ErrorKind::InvalidInput, "enhancer: expected [H, W] input");
  const bool use_prior = cfg_.prior_source != PriorSource::None;
  if (use_prior)
    require(prior.valid() && prior.shape() == y_hat.shape(), ErrorKind::InvalidInput,
            "enhancer: prior " + (prior.valid() ? ad::shape_string(prior.shape()) : std::string("absent")) +
                " does not match image " + ad::shape_string(y_hat.shape()));
  const Dims dims{y_hat.shape()[0], y_hat.shape()[1]};
  const int P = cfg_.patch_size, D = cfg_.embed_dim;
  const Padding pad = patch_padding(dims, P);
  const int rows = (dims.ny + pad.top + pad.bottom) / P, cols = (dims.nz + pad.left + pad.right) / P;

  ad::Var pe = g.constant({rows * cols, D}, positional_encoding(rows, cols, D));
  ad::Var x0 = ad::add(nn::dense(g, params_, embed_, ad::patchify(pad_image(y_hat, pad), P)), pe);
  ad::Var cond = prior_embedding(g, use_prior ? pad_image(prior, pad) : ad::Var{}, rows, cols);

  auto modulate = [](ad::Var x, ad::Var h, ad::Var gamma, ad::Var beta, ad::Var alpha) {
    return ad::add(x, ad::mul(alpha, ad::add(ad::add(h, ad::mul(gamma, h)), beta)));
  };
  ad::Var x = x0;
  for (int b = 0; b < cfg_.n_blocks; ++b) {
    const auto &l = blocks_[b];
    ad::Var m = modulation(g, b, cond);
    auto part = [&](int i) { return ad::slice_cols(m, i * D, D); };
    ad::Var h = ad::layer_norm(x);
    ad::Var a = ad::attention(nn::dense(g, params_, l.q, h), nn::dense(g, params_, l.k, h), nn::dense(g, params_, l.v, h),
                              cfg_.n_heads);
    x = modulate(x, nn::dense(g, params_, l.o, a), part(0), part(1), part(2));
    h = ad::layer_norm(x);
    ad::Var f = nn::dense(g, params_, l.fc2, ad::gelu(nn::dense(g, params_, l.fc1, h)));
    x = modulate(x, f, part(3), part(4), part(5));
  }
  ad::Var residual = nn::dense(g, params_, out_, ad::sub(x, x0));
  ad::Var img = crop_image(ad::unpatchify(residual, P, rows, cols), pad, dims);
  return ad::add(y_hat, img);
}

ConditioningSet embed_prior(const Enhancer &net, const ImageSlice *ps_reg, Dims target) {
  const auto &cfg = net.config();
  const bool use_prior = cfg.prior_source != PriorSource::None;
  if (use_prior) {
    require(ps_reg != nullptr, ErrorKind::Configuration, "embed_prior: prior required for prior_source " + to_string(cfg.prior_source));
    require(ps_reg->dims() == target, ErrorKind::InvalidInput,
            "embed_prior: prior dims " + to_string(ps_reg->dims()) + " do not match " + to_string(target));
  }
  const int P = cfg.patch_size, D = cfg.embed_dim;
  const Padding pad = patch_padding(target, P);
  const int rows = (target.ny + pad.top + pad.bottom) / P, cols = (target.nz + pad.left + pad.right) / P;
  ad::Graph g;
  ad::Var prior = use_prior ? pad_image(ad::image_to_var(g, *ps_reg), pad) : ad::Var{};
  ad::Var e = net.prior_embedding(g, prior, rows, cols);
  ConditioningSet out;
  out.n_tokens = rows * cols;
  out.dim = D;
  for (int b = 0; b < cfg.n_blocks; ++b) {
    ad::Var m = net.modulation(g, b, e);
    auto part = [&](int i) {
      ad::Var s = ad::slice_cols(m, i * D, D);
      return std::vector<double>(s.value().begin(), s.value().end());
    };
    ConditioningSet::Block blk;
    blk.gamma = part(0);
    blk.beta = part(1);
    blk.alpha = part(2);
    out.blocks.push_back(std::move(blk));
    ConditioningSet::Block mlp;
    mlp.gamma = part(3);
    mlp.beta = part(4);
    mlp.alpha = part(5);
    out.blocks.push_back(std::move(mlp));
  }
  return out;
}

ImageSlice enhance_forward(const Enhancer &net, const ImageSlice &y_hat, const ImageSlice *ps_reg) {
  const bool use_prior = net.config().prior_source != PriorSource::None;
  if (use_prior) {
    require(ps_reg != nullptr, ErrorKind::Configuration,
            "enhance_forward: prior required for prior_source " + to_string(net.config().prior_source));
    require(ps_reg->dims() == y_hat.dims(), ErrorKind::InvalidInput, "enhance_forward: prior dims do not match image");
  }
  ad::Graph g;
  ad::Var y = ad::image_to_var(g, y_hat);
  ad::Var p = use_prior ? ad::image_to_var(g, *ps_reg) : ad::Var{};
  ImageSlice out = ad::image_from_var(net.forward(g, y, p));
  out.intensity_max = y_hat.intensity_max;
  return out;
}

} // namespace priorecon
