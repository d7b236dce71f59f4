#include "segaware/mask_ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

#include "segaware/errors.hpp"
#include "segaware/parallel.hpp"

namespace segaware {

namespace {

std::atomic<std::size_t> g_negative_lambda_warnings{0};

void check_conv_shapes(const Tensor& x, const ConvFilter& filter) {
  if (x.shape.size() != 3) {
    throw DimensionError("convolution input must be HxWxE, got " + x.shape_str());
  }
  const std::size_t KE = filter.spec.patch() * x.shape[2];
  if (filter.weights.shape.size() != 2 || filter.weights.shape[0] != KE) {
    throw ConfigError("filter weights " + filter.weights.shape_str() +
                      " do not match K*E = " + std::to_string(KE));
  }
  if (filter.has_bias &&
      (filter.bias.shape.size() != 1 || filter.bias.shape[0] != filter.weights.shape[1])) {
    throw ConfigError("filter bias " + filter.bias.shape_str() + " does not match F = " +
                      std::to_string(filter.weights.shape[1]));
  }
}

void check_mask_shapes(const Tensor& x, const MaskField& masks) {
  if (x.shape.size() != 3 || x.shape[0] != masks.masks.h || x.shape[1] != masks.masks.w) {
    throw DimensionError("input " + x.shape_str() + " does not match a " +
                         std::to_string(masks.masks.h) + "x" + std::to_string(masks.masks.w) +
                         " mask field");
  }
}

// Row-normalized masks nm = m / S and the per-pixel mask sums S. S >= 1
// because the center mask is 1, so the division is always safe.
void normalized_masks(const MaskField& masks, Tensor& nm, std::vector<double>& sums) {
  const std::size_t rows = masks.masks.h * masks.masks.w;
  const std::size_t K = masks.masks.patch;
  nm = Tensor({rows, K});
  sums.assign(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += masks.masks.values(i, k);
    sums[i] = s;
    for (std::size_t k = 0; k < K; ++k) nm(i, k) = masks.masks.values(i, k) / s;
  }
}

// colm(i, k*E + c) = col(i, k*E + c) * nm(i, k): the masked, normalized
// column matrix both Eq. 4 and Eq. 7 reduce over. Shared so the all-ones
// filter identity holds bitwise.
Tensor masked_columns(const ColMatrix& col, const Tensor& nm) {
  const std::size_t rows = col.h * col.w, K = col.patch, E = col.channels;
  Tensor colm({rows, K * E});
  parallel_for_rows(rows, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      for (std::size_t k = 0; k < K; ++k) {
        const double w = nm(i, k);
        for (std::size_t c = 0; c < E; ++c) {
          colm(i, k * E + c) = col.values(i, k * E + c) * w;
        }
      }
    }
  });
  return colm;
}

// grad_m from grad_nm for one row of the normalization nm = m / S:
// grad_m_k = (grad_nm_k - sum_j grad_nm_j * nm_j) / S, zero on invalid slots
// (their masks are pinned constants, not functions of lambda).
void normalization_backward(const MaskField& masks, const Tensor& nm,
                            const std::vector<double>& sums, const Tensor& grad_nm,
                            Tensor& grad_m) {
  const std::size_t rows = masks.masks.h * masks.masks.w;
  const std::size_t K = masks.masks.patch;
  grad_m = Tensor::zeros({rows, K});
  for (std::size_t i = 0; i < rows; ++i) {
    double dot = 0.0;
    for (std::size_t k = 0; k < K; ++k) dot += grad_nm(i, k) * nm(i, k);
    for (std::size_t k = 0; k < K; ++k) {
      if (!masks.masks.is_valid(i, k)) continue;
      grad_m(i, k) = (grad_nm(i, k) - dot) / sums[i];
    }
  }
}

// Push grad_m through m = exp(-lambda d): accumulates grad_lambda and
// returns the distance-matrix gradient for dist2im.
double mask_backward(const MaskField& masks, const Tensor& grad_m, ColMatrix& grad_dist) {
  const std::size_t rows = masks.masks.h * masks.masks.w;
  const std::size_t K = masks.masks.patch;
  grad_dist = masks.dist;
  for (auto& v : grad_dist.values.data) v = 0.0;
  double grad_lambda = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      if (!masks.masks.is_valid(i, k)) continue;
      const double m = masks.masks.values(i, k);
      const double d = masks.dist.values(i, k);
      grad_lambda += grad_m(i, k) * (-d * m);
      grad_dist.values(i, k) = grad_m(i, k) * (-masks.lambda * m);
    }
  }
  return grad_lambda;
}

// ---------------------------------------------------------------------------
// Fused row kernels. The forward passes below never materialize the H*W x K*E
// column matrix: each pixel's patch is gathered into a per-worker scratch row
// (same layout and values as one im2col row), optionally scaled by its
// normalized mask, and reduced immediately. Every output still accumulates
// its K*E terms in ascending column order, so results stay bitwise equal
// across worker counts and the all-ones-filter identity with the bilateral
// filter is preserved.
// ---------------------------------------------------------------------------

// One im2col row: x's patch around pixel (i, j), 0 for out-of-frame slots.
inline void gather_patch_row(const Tensor& x, std::size_t i, std::size_t j,
                             const PatchSpec& spec, double* buf) {
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(x.shape[0]);
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(x.shape[1]);
  const std::size_t E = x.shape[2];
  const std::size_t K = spec.patch();
  // Undilated kernels whose column span is in frame copy one contiguous
  // block of kernel_w pixels per kernel row.
  if (spec.atrous == 1) {
    const std::ptrdiff_t j0 =
        static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(spec.kernel_w / 2);
    if (j0 >= 0 && j0 + static_cast<std::ptrdiff_t>(spec.kernel_w) <= W) {
      const std::size_t span = spec.kernel_w * E;
      for (std::size_t kr = 0; kr < spec.kernel_h; ++kr) {
        const std::ptrdiff_t ni = static_cast<std::ptrdiff_t>(i + kr) -
                                  static_cast<std::ptrdiff_t>(spec.kernel_h / 2);
        double* dst = buf + kr * span;
        if (ni >= 0 && ni < H) {
          const double* src =
              x.data.data() +
              (static_cast<std::size_t>(ni) * x.shape[1] + static_cast<std::size_t>(j0)) * E;
          std::memcpy(dst, src, span * sizeof(double));
        } else {
          std::fill(dst, dst + span, 0.0);
        }
      }
      return;
    }
  }
  for (std::size_t k = 0; k < K; ++k) {
    const std::ptrdiff_t ni = static_cast<std::ptrdiff_t>(i) + spec.row_offset(k);
    const std::ptrdiff_t nj = static_cast<std::ptrdiff_t>(j) + spec.col_offset(k);
    double* dst = buf + k * E;
    if (ni >= 0 && nj >= 0 && ni < H && nj < W) {
      const double* src = x.data.data() + (static_cast<std::size_t>(ni) * x.shape[1] +
                                           static_cast<std::size_t>(nj)) *
                                              E;
      for (std::size_t c = 0; c < E; ++c) dst[c] = src[c];
    } else {
      for (std::size_t c = 0; c < E; ++c) dst[c] = 0.0;
    }
  }
}

// Scale slot k of a gathered row by masks(p, k) / row-sum, exactly the
// arithmetic masked_columns applies to a materialized column matrix.
inline void apply_normalized_masks(const MaskField& masks, std::size_t p, std::size_t E,
                                   double* buf) {
  const std::size_t K = masks.masks.patch;
  double s = 0.0;
  for (std::size_t k = 0; k < K; ++k) s += masks.masks.values(p, k);
  for (std::size_t k = 0; k < K; ++k) {
    const double w = masks.masks.values(p, k) / s;
    double* slot = buf + k * E;
    for (std::size_t c = 0; c < E; ++c) slot[c] *= w;
  }
}

// out[f0 .. f0+T) = sum_kk buf[kk] * wts[kk, f0 + t], accumulated in
// ascending kk with the T accumulators held in registers.
template <std::size_t T>
inline void row_tile(const double* __restrict buf, const double* __restrict wts,
                     std::size_t KE, std::size_t F, std::size_t f0,
                     double* __restrict out) {
  double acc[T] = {};
  const double* w = wts + f0;
  for (std::size_t kk = 0; kk < KE; ++kk) {
    const double a = buf[kk];
    const double* wr = w + kk * F;
    for (std::size_t t = 0; t < T; ++t) acc[t] += a * wr[t];
  }
  for (std::size_t t = 0; t < T; ++t) out[f0 + t] = acc[t];
}

// out[f] = sum_kk buf[kk] * wts[kk, f]. Every output accumulates in
// ascending kk regardless of which tile computes it.
inline void row_times_filter(const double* __restrict buf, const double* __restrict wts,
                             std::size_t KE, std::size_t F, double* __restrict out) {
  std::size_t f0 = 0;
  for (; f0 + 16 <= F; f0 += 16) row_tile<16>(buf, wts, KE, F, f0, out);
  for (; f0 + 8 <= F; f0 += 8) row_tile<8>(buf, wts, KE, F, f0, out);
  for (; f0 + 4 <= F; f0 += 4) row_tile<4>(buf, wts, KE, F, f0, out);
  for (; f0 < F; ++f0) {
    double acc = 0.0;
    for (std::size_t kk = 0; kk < KE; ++kk) acc += buf[kk] * wts[kk * F + f0];
    out[f0] = acc;
  }
}

}  // namespace

std::size_t negative_lambda_warnings() { return g_negative_lambda_warnings.load(); }

MaskField compute_masks(const ColMatrix& dist, double lambda, const PatchSpec& spec,
                        Norm norm) {
  spec.validate();
  if (dist.channels != 1 || dist.patch != spec.patch()) {
    throw DimensionError("compute_masks expects an HW x K distance matrix matching the spec");
  }
  if (lambda < 0.0) {
    g_negative_lambda_warnings.fetch_add(1);
    lambda = 0.0;
  }
  MaskField out;
  out.dist = dist;
  out.lambda = lambda;
  out.spec = spec;
  out.norm = norm;
  out.masks.h = dist.h;
  out.masks.w = dist.w;
  out.masks.patch = dist.patch;
  out.masks.channels = dist.channels;
  out.masks.valid = dist.valid;
  out.masks.values = Tensor({dist.values.shape[0], dist.values.shape[1]});
  const std::size_t n = dist.values.data.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double d = dist.values.data[i];
    // Invalid slots carry d = +inf; exp(-lambda*inf) is defined as 0 here
    // even when lambda is 0 (0*inf would otherwise be NaN).
    out.masks.values.data[i] = (dist.valid[i] && std::isfinite(d)) ? std::exp(-lambda * d) : 0.0;
  }
  return out;
}

Tensor bilateral_filter(const Tensor& x, const MaskField& masks) {
  check_mask_shapes(x, masks);
  const std::size_t W = x.shape[1], E = x.shape[2];
  const std::size_t rows = masks.masks.h * masks.masks.w;
  const std::size_t K = masks.spec.patch();
  Tensor y({masks.masks.h, masks.masks.w, E});
  parallel_for_rows(rows, [&](std::size_t r0, std::size_t r1) {
    std::vector<double> buf(K * E);
    for (std::size_t p = r0; p < r1; ++p) {
      gather_patch_row(x, p / W, p % W, masks.spec, buf.data());
      apply_normalized_masks(masks, p, E, buf.data());
      for (std::size_t c = 0; c < E; ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k) acc += buf[k * E + c];
        y.data[p * E + c] = acc;
      }
    }
  });
  return y;
}

Tensor segaware_conv(const Tensor& x, const MaskField& masks, const ConvFilter& filter) {
  check_mask_shapes(x, masks);
  check_conv_shapes(x, filter);
  if (filter.spec.kernel_h != masks.spec.kernel_h ||
      filter.spec.kernel_w != masks.spec.kernel_w || filter.spec.atrous != masks.spec.atrous) {
    throw ConfigError("mask patch spec and filter patch spec differ");
  }
  const std::size_t W = x.shape[1], E = x.shape[2];
  const std::size_t rows = masks.masks.h * masks.masks.w;
  const std::size_t K = masks.spec.patch();
  const std::size_t F = filter.weights.shape[1];
  Tensor y({masks.masks.h, masks.masks.w, F});
  parallel_for_rows(rows, [&](std::size_t r0, std::size_t r1) {
    std::vector<double> buf(K * E);
    for (std::size_t p = r0; p < r1; ++p) {
      gather_patch_row(x, p / W, p % W, masks.spec, buf.data());
      apply_normalized_masks(masks, p, E, buf.data());
      row_times_filter(buf.data(), filter.weights.data.data(), K * E, F,
                       y.data.data() + p * F);
      if (filter.has_bias) {
        for (std::size_t f = 0; f < F; ++f) y.data[p * F + f] += filter.bias.data[f];
      }
    }
  });
  return y;
}

Tensor conv2d(const Tensor& x, const ConvFilter& filter) {
  check_conv_shapes(x, filter);
  const std::size_t W = x.shape[1], E = x.shape[2];
  const std::size_t rows = x.shape[0] * x.shape[1];
  const std::size_t K = filter.spec.patch();
  const std::size_t F = filter.weights.shape[1];
  Tensor y({x.shape[0], x.shape[1], F});
  parallel_for_rows(rows, [&](std::size_t r0, std::size_t r1) {
    std::vector<double> buf(K * E);
    for (std::size_t p = r0; p < r1; ++p) {
      gather_patch_row(x, p / W, p % W, filter.spec, buf.data());
      row_times_filter(buf.data(), filter.weights.data.data(), K * E, F,
                       y.data.data() + p * F);
      if (filter.has_bias) {
        for (std::size_t f = 0; f < F; ++f) y.data[p * F + f] += filter.bias.data[f];
      }
    }
  });
  return y;
}

Tensor segaware_conv_reference(const Tensor& x, const MaskField& masks,
                               const ConvFilter& filter) {
  check_mask_shapes(x, masks);
  check_conv_shapes(x, filter);
  if (filter.spec.kernel_h != masks.spec.kernel_h ||
      filter.spec.kernel_w != masks.spec.kernel_w || filter.spec.atrous != masks.spec.atrous) {
    throw ConfigError("mask patch spec and filter patch spec differ");
  }
  const std::size_t H = x.shape[0], W = x.shape[1], E = x.shape[2];
  const std::size_t K = masks.spec.patch();
  const std::size_t F = filter.weights.shape[1];
  Tensor y({H, W, F});
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t p = i * W + j;
      double sum_m = 0.0;
      for (std::size_t k = 0; k < K; ++k) sum_m += masks.masks.values(p, k);
      for (std::size_t f = 0; f < F; ++f) {
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          if (!masks.masks.is_valid(p, k)) continue;
          const std::ptrdiff_t ni = static_cast<std::ptrdiff_t>(i) + masks.spec.row_offset(k);
          const std::ptrdiff_t nj = static_cast<std::ptrdiff_t>(j) + masks.spec.col_offset(k);
          const double m = masks.masks.values(p, k);
          for (std::size_t c = 0; c < E; ++c) {
            acc += m * x(static_cast<std::size_t>(ni), static_cast<std::size_t>(nj), c) *
                   filter.weights(k * E + c, f);
          }
        }
        y(i, j, f) = acc / sum_m + (filter.has_bias ? filter.bias.data[f] : 0.0);
      }
    }
  }
  return y;
}

SegawareConvGrads segaware_conv_backward(const Tensor& grad_y, const Tensor& x,
                                         const MaskField& masks, const ConvFilter& filter,
                                         const Tensor& emb) {
  check_mask_shapes(x, masks);
  check_conv_shapes(x, filter);
  const std::size_t rows = masks.masks.h * masks.masks.w;
  const std::size_t K = masks.masks.patch;
  const std::size_t E = x.shape[2];
  const std::size_t F = filter.weights.shape[1];
  if (grad_y.shape.size() != 3 || grad_y.shape[0] != x.shape[0] ||
      grad_y.shape[1] != x.shape[1] || grad_y.shape[2] != F) {
    throw DimensionError("segaware_conv_backward grad shape " + grad_y.shape_str() +
                         " does not match the forward output");
  }

  // Recompute the forward intermediates from the saved distances.
  ColMatrix col = im2col(x, masks.spec);
  Tensor nm;
  std::vector<double> sums;
  normalized_masks(masks, nm, sums);
  Tensor colm = masked_columns(col, nm);

  Tensor g2 = grad_y.reshaped({rows, F});

  SegawareConvGrads out;
  out.grad_weights = matmul_tn(colm, g2);  // [KE x F]
  if (filter.has_bias) {
    out.grad_bias = Tensor::zeros({F});
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t f = 0; f < F; ++f) out.grad_bias.data[f] += g2(i, f);
  } else {
    out.grad_bias = Tensor::zeros({F});
  }

  Tensor grad_colm = matmul_nt(g2, filter.weights);  // [HW x KE]

  // grad through colm = col * nm (both factors).
  ColMatrix grad_col = col;
  Tensor grad_nm({rows, K});
  parallel_for_rows(rows, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      for (std::size_t k = 0; k < K; ++k) {
        double acc = 0.0;
        const double w = nm(i, k);
        for (std::size_t c = 0; c < E; ++c) {
          const std::size_t j = k * E + c;
          acc += grad_colm(i, j) * col.values(i, j);
          grad_col.values(i, j) = grad_colm(i, j) * w;
        }
        grad_nm(i, k) = acc;
      }
    }
  });
  out.grad_x = col2im(grad_col, masks.spec);

  Tensor grad_m;
  normalization_backward(masks, nm, sums, grad_nm, grad_m);
  ColMatrix grad_dist;
  out.grad_lambda = mask_backward(masks, grad_m, grad_dist);
  out.grad_emb = dist2im(grad_dist, emb, masks.spec, masks.norm);
  return out;
}

BilateralGrads bilateral_filter_backward(const Tensor& grad_y, const Tensor& x,
                                         const MaskField& masks, const Tensor& emb) {
  check_mask_shapes(x, masks);
  const std::size_t rows = masks.masks.h * masks.masks.w;
  const std::size_t K = masks.masks.patch;
  const std::size_t E = x.shape[2];
  if (!grad_y.same_shape(x)) {
    throw DimensionError("bilateral_filter_backward grad shape " + grad_y.shape_str() +
                         " does not match the input " + x.shape_str());
  }

  ColMatrix col = im2col(x, masks.spec);
  Tensor nm;
  std::vector<double> sums;
  normalized_masks(masks, nm, sums);

  // y(i,c) = sum_k col(i,kE+c) nm(i,k): fan the output grad back over both
  // factors directly.
  ColMatrix grad_col = col;
  Tensor grad_nm({rows, K});
  parallel_for_rows(rows, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      for (std::size_t k = 0; k < K; ++k) {
        const double w = nm(i, k);
        double acc = 0.0;
        for (std::size_t c = 0; c < E; ++c) {
          const double g = grad_y.data[i * E + c];
          acc += g * col.values(i, k * E + c);
          grad_col.values(i, k * E + c) = g * w;
        }
        grad_nm(i, k) = acc;
      }
    }
  });

  BilateralGrads out;
  out.grad_x = col2im(grad_col, masks.spec);
  Tensor grad_m;
  normalization_backward(masks, nm, sums, grad_nm, grad_m);
  ColMatrix grad_dist;
  out.grad_lambda = mask_backward(masks, grad_m, grad_dist);
  out.grad_emb = dist2im(grad_dist, emb, masks.spec, masks.norm);
  return out;
}

Conv2dGrads conv2d_backward(const Tensor& grad_y, const Tensor& x, const ConvFilter& filter) {
  check_conv_shapes(x, filter);
  const std::size_t rows = x.shape[0] * x.shape[1];
  const std::size_t F = filter.weights.shape[1];
  if (grad_y.shape.size() != 3 || grad_y.shape[0] != x.shape[0] ||
      grad_y.shape[1] != x.shape[1] || grad_y.shape[2] != F) {
    throw DimensionError("conv2d_backward grad shape " + grad_y.shape_str() +
                         " does not match the forward output");
  }
  ColMatrix col = im2col(x, filter.spec);
  Tensor g2 = grad_y.reshaped({rows, F});

  Conv2dGrads out;
  out.grad_weights = matmul_tn(col.values, g2);
  out.grad_bias = Tensor::zeros({F});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t f = 0; f < F; ++f) out.grad_bias.data[f] += g2(i, f);

  Tensor grad_colm = matmul_nt(g2, filter.weights);
  ColMatrix grad_col = col;
  grad_col.values = std::move(grad_colm);
  out.grad_x = col2im(grad_col, filter.spec);
  return out;
}

}  // namespace segaware
