#pragma once

#include "priorecon/types.hpp"

namespace priorecon {

// Per-coil centered orthonormal inverse DFT.
CoilImages inverse_transform(const KSpaceTensor &k);
// Exact inverse (and adjoint) of inverse_transform.
KSpaceTensor forward_transform(const CoilImages &imgs);

ComplexImage inverse_transform(const ComplexImage &k);
ComplexImage forward_transform(const ComplexImage &img);

// Root-sum-of-squares coil combination.
ImageSlice rss_combine(const CoilImages &imgs);

// coil_i = S_i * img
CoilImages expand(const ComplexImage &img, const CoilSensitivityMaps &maps);
// sum_i conj(S_i) * coil_i
ComplexImage reduce(const CoilImages &imgs, const CoilSensitivityMaps &maps);

// X_u[c, y, z] = M[y, z] * X[c, y, z]
KSpaceTensor undersample(const KSpaceTensor &x, const SamplingMask &mask);

// Rescales every pixel so that the coil RSS is 1; pixels whose RSS is below
// `zero_threshold` become zero support (all coils exactly 0).
CoilSensitivityMaps normalize_maps(CoilSensitivityMaps maps, double zero_threshold = 1e-12);

// Zero-filled reconstruction RSS(iDFT(X_u)).
ImageSlice zero_filled(const KSpaceTensor &x_u);

double l2_norm(std::span<const cplx> v);

} // namespace priorecon
