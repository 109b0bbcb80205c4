#pragma once

#include <span>

#include "priorecon/types.hpp"

namespace priorecon::fft {

enum class Direction { Forward, Inverse };

// Centered (DC at index (ny/2, nz/2)), orthonormal 2D DFT of one plane.
void centered_2d(std::span<const cplx> in, std::span<cplx> out, Dims dims, Direction dir);

// Applies centered_2d to `count` consecutive planes.
void centered_2d_planes(std::span<const cplx> in, std::span<cplx> out, Dims dims, int count, Direction dir);

} // namespace priorecon::fft
