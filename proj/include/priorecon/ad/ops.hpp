#pragma once

#include <cstdint>
#include <span>

#include "priorecon/ad/graph.hpp"

// Differentiable tensor ops. Layout conventions:
//   feature maps  [C, H, W]
//   token tables  [N, D]
//   complex data  [..., H, W, 2] (interleaved re/im)
namespace priorecon::ad {

// Elementwise
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
// a * s for a one-element Var s
Var mul_scalar(Var a, Var s);
Var sqrt(Var a);
Var leaky_relu(Var a, double slope = 0.2);
Var gelu(Var a);
Var silu(Var a);

Var sum(Var a);
Var mean(Var a);
Var reshape(Var a, Shape shape);

// Per-channel reductions and broadcasts over [C, ...]
Var channel_mean(Var x);
Var sub_channel(Var x, Var v);
Var mul_channel(Var x, Var v);
Var div_channel(Var x, Var v);

// Convolution family on [C, H, W]
Var conv2d(Var x, Var weight, Var bias); // weight [O, C, k, k], odd k, zero "same" padding
Var avg_pool2(Var x);
Var upsample2(Var x);
Var concat0(Var a, Var b);
Var pad2d(Var x, int top, int bottom, int left, int right);
Var crop2d(Var x, int top, int left, int height, int width);

// Stack equally shaped Vars along a new leading axis / take one entry of it.
Var stack0(std::span<const Var> parts);
Var index0(Var x, int i);

// Token tables [N, D]
Var linear(Var x, Var weight, Var bias); // weight [O, I]; bias [O] or invalid Var
Var layer_norm(Var x, double eps = 1e-6);
Var broadcast_rows(Var v, int n); // [1, D] or [D] -> [N, D]
Var slice_cols(Var x, int start, int count);
// Multi-head scaled dot-product self-attention on already-projected q, k, v.
Var attention(Var q, Var k, Var v, int n_heads);

// Image <-> non-overlapping P x P patches, row-major patch order and
// row-major pixels inside each patch. H and W must be multiples of P.
Var patchify(Var img, int patch);                  // [H, W] -> [N, P*P]
Var unpatchify(Var tokens, int patch, int rows, int cols); // [N, P*P] -> [rows*P, cols*P]

// Divides by the maximum absolute entry (gradient flows through the argmax).
Var max_normalize(Var x);

} // namespace priorecon::ad
