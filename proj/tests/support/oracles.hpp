#pragma once

// Slow, obviously-correct reference implementations used to cross-check the
// gather/GEMM-shaped library code. Everything here is plain nested loops in
// scatter or definitional form, deliberately sharing no code with src/.

#include <cmath>
#include <limits>

#include "segaware/crf.hpp"
#include "segaware/mask_ops.hpp"
#include "segaware/patch.hpp"
#include "segaware/tensor.hpp"

namespace testsupport {

inline segaware::ColMatrix naive_im2col(const segaware::Tensor& input,
                                        const segaware::PatchSpec& spec) {
  using namespace segaware;
  const std::size_t H = input.shape[0], W = input.shape[1], E = input.shape[2];
  const std::size_t K = spec.patch();
  ColMatrix out;
  out.h = H;
  out.w = W;
  out.patch = K;
  out.channels = E;
  out.values = Tensor::zeros({H * W, K * E});
  out.valid.assign(H * W * K, 0);
  const std::ptrdiff_t rh = static_cast<std::ptrdiff_t>(spec.kernel_h / 2);
  const std::ptrdiff_t rw = static_cast<std::ptrdiff_t>(spec.kernel_w / 2);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t ki = 0; ki < spec.kernel_h; ++ki)
        for (std::size_t kj = 0; kj < spec.kernel_w; ++kj) {
          const std::size_t k = ki * spec.kernel_w + kj;
          const std::ptrdiff_t ni =
              static_cast<std::ptrdiff_t>(i) +
              (static_cast<std::ptrdiff_t>(ki) - rh) * static_cast<std::ptrdiff_t>(spec.atrous);
          const std::ptrdiff_t nj =
              static_cast<std::ptrdiff_t>(j) +
              (static_cast<std::ptrdiff_t>(kj) - rw) * static_cast<std::ptrdiff_t>(spec.atrous);
          if (ni < 0 || nj < 0 || ni >= static_cast<std::ptrdiff_t>(H) ||
              nj >= static_cast<std::ptrdiff_t>(W))
            continue;
          out.valid[(i * W + j) * K + k] = 1;
          for (std::size_t c = 0; c < E; ++c) {
            out.values((i * W + j), k * E + c) =
                input(static_cast<std::size_t>(ni), static_cast<std::size_t>(nj), c);
          }
        }
  return out;
}

inline segaware::ColMatrix naive_im2dist(const segaware::Tensor& emb,
                                         const segaware::PatchSpec& spec,
                                         segaware::Norm norm) {
  using namespace segaware;
  const std::size_t H = emb.shape[0], W = emb.shape[1], D = emb.shape[2];
  const std::size_t K = spec.patch();
  ColMatrix out;
  out.h = H;
  out.w = W;
  out.patch = K;
  out.channels = 1;
  out.values = Tensor({H * W, K}, std::numeric_limits<double>::infinity());
  out.valid.assign(H * W * K, 0);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t k = 0; k < K; ++k) {
        const std::ptrdiff_t ni = static_cast<std::ptrdiff_t>(i) + spec.row_offset(k);
        const std::ptrdiff_t nj = static_cast<std::ptrdiff_t>(j) + spec.col_offset(k);
        if (ni < 0 || nj < 0 || ni >= static_cast<std::ptrdiff_t>(H) ||
            nj >= static_cast<std::ptrdiff_t>(W))
          continue;
        out.valid[(i * W + j) * K + k] = 1;
        if (k == spec.center()) {
          out.values(i * W + j, k) = 0.0;
          continue;
        }
        double d = 0.0;
        for (std::size_t c = 0; c < D; ++c) {
          const double diff =
              emb(i, j, c) - emb(static_cast<std::size_t>(ni), static_cast<std::size_t>(nj), c);
          d += (norm == Norm::L1) ? std::abs(diff) : diff * diff;
        }
        out.values(i * W + j, k) = (norm == Norm::L1) ? d : std::sqrt(d);
      }
  return out;
}

// True scatter-add form of the im2col adjoint.
inline segaware::Tensor naive_col2im(const segaware::ColMatrix& grad,
                                     const segaware::PatchSpec& spec) {
  using namespace segaware;
  const std::size_t H = grad.h, W = grad.w, E = grad.channels, K = grad.patch;
  Tensor out = Tensor::zeros({H, W, E});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t k = 0; k < K; ++k) {
        if (!grad.valid[(i * W + j) * K + k]) continue;
        const std::ptrdiff_t ni = static_cast<std::ptrdiff_t>(i) + spec.row_offset(k);
        const std::ptrdiff_t nj = static_cast<std::ptrdiff_t>(j) + spec.col_offset(k);
        for (std::size_t c = 0; c < E; ++c) {
          out(static_cast<std::size_t>(ni), static_cast<std::size_t>(nj), c) +=
              grad.values(i * W + j, k * E + c);
        }
      }
  return out;
}

// Scatter form of the im2dist adjoint.
inline segaware::Tensor naive_dist2im(const segaware::ColMatrix& grad,
                                      const segaware::Tensor& emb,
                                      const segaware::PatchSpec& spec,
                                      segaware::Norm norm) {
  using namespace segaware;
  const std::size_t H = grad.h, W = grad.w, K = grad.patch;
  const std::size_t D = emb.shape[2];
  Tensor out = Tensor::zeros({H, W, D});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t k = 0; k < K; ++k) {
        if (k == spec.center()) continue;
        if (!grad.valid[(i * W + j) * K + k]) continue;
        const std::size_t ni =
            static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + spec.row_offset(k));
        const std::size_t nj =
            static_cast<std::size_t>(static_cast<std::ptrdiff_t>(j) + spec.col_offset(k));
        const double g = grad.values(i * W + j, k);
        if (norm == Norm::L1) {
          for (std::size_t c = 0; c < D; ++c) {
            const double diff = emb(i, j, c) - emb(ni, nj, c);
            const double s = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
            out(i, j, c) += g * s;
            out(ni, nj, c) -= g * s;
          }
        } else {
          double d = 0.0;
          for (std::size_t c = 0; c < D; ++c) {
            const double diff = emb(i, j, c) - emb(ni, nj, c);
            d += diff * diff;
          }
          d = std::sqrt(d);
          if (d == 0.0) continue;
          for (std::size_t c = 0; c < D; ++c) {
            const double diff = emb(i, j, c) - emb(ni, nj, c);
            out(i, j, c) += g * diff / d;
            out(ni, nj, c) -= g * diff / d;
          }
        }
      }
  return out;
}

// Definitional Eq. 4: per pixel and channel, sum x*m over valid neighbors
// and divide by the mask sum at the end.
inline segaware::Tensor naive_bilateral(const segaware::Tensor& x,
                                        const segaware::MaskField& masks) {
  using namespace segaware;
  const std::size_t H = x.shape[0], W = x.shape[1], C = x.shape[2];
  const std::size_t K = masks.spec.patch();
  Tensor y({H, W, C});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t pix = i * W + j;
      double den = 0.0;
      for (std::size_t k = 0; k < K; ++k) den += masks.masks.values(pix, k);
      for (std::size_t c = 0; c < C; ++c) {
        double num = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          if (!masks.masks.is_valid(pix, k)) continue;
          const std::size_t ni = static_cast<std::size_t>(
              static_cast<std::ptrdiff_t>(i) + masks.spec.row_offset(k));
          const std::size_t nj = static_cast<std::size_t>(
              static_cast<std::ptrdiff_t>(j) + masks.spec.col_offset(k));
          num += x(ni, nj, c) * masks.masks.values(pix, k);
        }
        y(i, j, c) = num / den;
      }
    }
  return y;
}

// Definitional Eq. 7: quintuple loop, nothing shared with the GEMM path.
inline segaware::Tensor naive_segaware_conv(const segaware::Tensor& x,
                                            const segaware::MaskField& masks,
                                            const segaware::ConvFilter& filter) {
  using namespace segaware;
  const std::size_t H = x.shape[0], W = x.shape[1], E = x.shape[2];
  const std::size_t K = masks.spec.patch();
  const std::size_t F = filter.weights.shape[1];
  Tensor y({H, W, F});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t pix = i * W + j;
      double den = 0.0;
      for (std::size_t k = 0; k < K; ++k) den += masks.masks.values(pix, k);
      for (std::size_t f = 0; f < F; ++f) {
        double num = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          if (!masks.masks.is_valid(pix, k)) continue;
          const std::size_t ni = static_cast<std::size_t>(
              static_cast<std::ptrdiff_t>(i) + masks.spec.row_offset(k));
          const std::size_t nj = static_cast<std::size_t>(
              static_cast<std::ptrdiff_t>(j) + masks.spec.col_offset(k));
          for (std::size_t c = 0; c < E; ++c) {
            num += x(ni, nj, c) * masks.masks.values(pix, k) * filter.weights(k * E + c, f);
          }
        }
        y(i, j, f) = num / den + (filter.has_bias ? filter.bias.data[f] : 0.0);
      }
    }
  return y;
}

// Plain zero-padding convolution, definitional form.
inline segaware::Tensor naive_conv2d(const segaware::Tensor& x,
                                     const segaware::ConvFilter& filter) {
  using namespace segaware;
  const std::size_t H = x.shape[0], W = x.shape[1], E = x.shape[2];
  const std::size_t K = filter.spec.patch();
  const std::size_t F = filter.weights.shape[1];
  Tensor y({H, W, F});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t f = 0; f < F; ++f) {
        double acc = filter.has_bias ? filter.bias.data[f] : 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          const std::ptrdiff_t ni =
              static_cast<std::ptrdiff_t>(i) + filter.spec.row_offset(k);
          const std::ptrdiff_t nj =
              static_cast<std::ptrdiff_t>(j) + filter.spec.col_offset(k);
          if (ni < 0 || nj < 0 || ni >= static_cast<std::ptrdiff_t>(H) ||
              nj >= static_cast<std::ptrdiff_t>(W))
            continue;
          for (std::size_t c = 0; c < E; ++c) {
            acc += x(static_cast<std::size_t>(ni), static_cast<std::size_t>(nj), c) *
                   filter.weights(k * E + c, f);
          }
        }
        y(i, j, f) = acc;
      }
  return y;
}

// Membership-checked double loop over all unordered pixel pairs; shares no
// traversal logic with the library's j<i gather. Extended-precision
// accumulation, like the library's, so the comparison measures the terms
// rather than the summation order.
inline double brute_force_gibbs(const segaware::LabelMap& labeling,
                                const segaware::Tensor& unary,
                                const segaware::PairwiseKernels& kernels,
                                const segaware::CRFParams& params) {
  using namespace segaware;
  const std::size_t H = unary.shape[0], W = unary.shape[1], L = unary.shape[2];
  Tensor compat = params.compat_for(L);
  long double energy = 0.0L;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      energy += unary(i, j, static_cast<std::size_t>(labeling.at(i, j)));

  auto kernel_value = [&](const ColMatrix& kernel, const PatchSpec& spec, std::size_t pi,
                          std::size_t pj, std::ptrdiff_t di, std::ptrdiff_t dj) -> double {
    const std::ptrdiff_t a = static_cast<std::ptrdiff_t>(spec.atrous);
    if (di % a != 0 || dj % a != 0) return 0.0;
    const std::ptrdiff_t ki = di / a + static_cast<std::ptrdiff_t>(spec.kernel_h / 2);
    const std::ptrdiff_t kj = dj / a + static_cast<std::ptrdiff_t>(spec.kernel_w / 2);
    if (ki < 0 || kj < 0 || ki >= static_cast<std::ptrdiff_t>(spec.kernel_h) ||
        kj >= static_cast<std::ptrdiff_t>(spec.kernel_w))
      return 0.0;
    const std::size_t k = static_cast<std::size_t>(ki) * spec.kernel_w +
                          static_cast<std::size_t>(kj);
    if (k == spec.center()) return 0.0;
    return kernel.values(pi * W + pj, k);
  };

  for (std::size_t p = 0; p < H * W; ++p)
    for (std::size_t q = 0; q < p; ++q) {
      const std::size_t pi = p / W, pj = p % W, qi = q / W, qj = q % W;
      const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(qi) - static_cast<std::ptrdiff_t>(pi);
      const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(qj) - static_cast<std::ptrdiff_t>(pj);
      const double mu = compat(static_cast<std::size_t>(labeling.at(pi, pj)),
                               static_cast<std::size_t>(labeling.at(qi, qj)));
      energy += params.w1 * mu * kernel_value(kernels.appearance, params.bilateral_spec, pi, pj, di, dj);
      energy += params.w2 * mu * kernel_value(kernels.smoothness, params.spatial_spec, pi, pj, di, dj);
    }
  return static_cast<double>(energy);
}

}  // namespace testsupport
