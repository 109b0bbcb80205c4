#pragma once

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "priorecon/ad/graph.hpp"
#include "priorecon/types.hpp"

namespace priorecon {

// Uniform-window SSIM with the scikit-image defaults.
struct SsimOptions {
  int window = 7;
  double k1 = 0.01;
  double k2 = 0.03;
  bool sample_covariance = true;
};

// Mean SSIM over all window positions that lie fully inside the image.
double ssim(const ImageSlice &a, const ImageSlice &b, double data_range, const SsimOptions &opts = {});

// Same value; also writes dSSIM/da and dSSIM/db when the spans are non-empty.
double ssim_with_gradient(std::span<const double> a, std::span<const double> b, Dims dims, double data_range,
                          const SsimOptions &opts, std::span<double> grad_a, std::span<double> grad_b);

// 1 - SSIM of the max-normalized inputs at data_range 1.
double ssim_loss(const ImageSlice &y_enh, const ImageSlice &y);

inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

// 10 log10(range^2 / MSE); identical inputs give kInfinitePsnr.
double psnr(const ImageSlice &a, const ImageSlice &b, double data_range);

// ||a - b|| / ||a|| with `a` the reference.
double nrmse(const ImageSlice &reference, const ImageSlice &b);

enum class WilcoxonMethod { Auto, Exact, Normal };

struct WilcoxonResult {
  double statistic = 0.0; // min(W+, W-)
  double w_plus = 0.0;
  double p_value = 1.0;
  bool significant = false;
  int n_used = 0;
  bool exact = false;
};

// Two-sided signed-rank test. Zero differences are dropped and ties midranked;
// exact null distribution for n <= 25 under Auto, normal approximation with
// continuity and tie correction otherwise.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> diffs, double alpha = 0.05,
                                    WilcoxonMethod method = WilcoxonMethod::Auto);

namespace ad {
class Var;
// Differentiable SSIM (scalar Var) between two [H, W] Vars.
Var ssim(Var a, Var b, double data_range, const SsimOptions &opts = {});
// 1 - SSIM(max_normalize(y_enh), max_normalize(y)) at data_range 1.
Var ssim_loss(Var y_enh, Var y);
} // namespace ad

} // namespace priorecon
