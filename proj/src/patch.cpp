#include "segaware/patch.hpp"

#include <cmath>
#include <limits>

#include "segaware/errors.hpp"
#include "segaware/parallel.hpp"

namespace segaware {

namespace {

const double kInf = std::numeric_limits<double>::infinity();

void require_rank3(const Tensor& t, const char* what) {
  if (t.shape.size() != 3) {
    throw DimensionError(std::string(what) + " expects an HxWxC tensor, got " +
                         t.shape_str());
  }
}

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

void PatchSpec::validate() const {
  if (kernel_h == 0 || kernel_w == 0 || kernel_h % 2 == 0 || kernel_w % 2 == 0) {
    throw DimensionError("patch kernel extents must be odd and positive, got " +
                         std::to_string(kernel_h) + "x" + std::to_string(kernel_w));
  }
  if (atrous == 0) throw DimensionError("atrous factor must be >= 1");
}

ColMatrix im2col(const Tensor& input, const PatchSpec& spec) {
  spec.validate();
  require_rank3(input, "im2col");
  const std::size_t H = input.shape[0], W = input.shape[1], E = input.shape[2];
  const std::size_t K = spec.patch();

  ColMatrix out;
  out.h = H;
  out.w = W;
  out.patch = K;
  out.channels = E;
  out.values = Tensor({H * W, K * E});
  out.valid.assign(H * W * K, 0);

  parallel_for_rows(H, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        const std::size_t pix = i * W + j;
        double* row = &out.values.data[pix * K * E];
        for (std::size_t k = 0; k < K; ++k) {
          const std::ptrdiff_t ni = static_cast<std::ptrdiff_t>(i) + spec.row_offset(k);
          const std::ptrdiff_t nj = static_cast<std::ptrdiff_t>(j) + spec.col_offset(k);
          if (ni < 0 || nj < 0 || ni >= static_cast<std::ptrdiff_t>(H) ||
              nj >= static_cast<std::ptrdiff_t>(W)) {
            continue;  // slot stays 0, valid stays false
          }
          out.valid[pix * K + k] = 1;
          const double* src =
              &input.data[(static_cast<std::size_t>(ni) * W + static_cast<std::size_t>(nj)) * E];
          for (std::size_t c = 0; c < E; ++c) row[k * E + c] = src[c];
        }
      }
    }
  });
  return out;
}

ColMatrix im2dist(const Tensor& emb, const PatchSpec& spec, Norm norm) {
  spec.validate();
  require_rank3(emb, "im2dist");
  const std::size_t H = emb.shape[0], W = emb.shape[1], D = emb.shape[2];
  const std::size_t K = spec.patch();

  ColMatrix out;
  out.h = H;
  out.w = W;
  out.patch = K;
  out.channels = 1;
  out.values = Tensor({H * W, K}, kInf);
  out.valid.assign(H * W * K, 0);

  parallel_for_rows(H, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        const std::size_t pix = i * W + j;
        const double* ei = &emb.data[pix * D];
        for (std::size_t k = 0; k < K; ++k) {
          const std::ptrdiff_t ni = static_cast<std::ptrdiff_t>(i) + spec.row_offset(k);
          const std::ptrdiff_t nj = static_cast<std::ptrdiff_t>(j) + spec.col_offset(k);
          if (ni < 0 || nj < 0 || ni >= static_cast<std::ptrdiff_t>(H) ||
              nj >= static_cast<std::ptrdiff_t>(W)) {
            continue;
          }
          out.valid[pix * K + k] = 1;
          if (k == spec.center()) {
            out.values.data[pix * K + k] = 0.0;  // exact, not a summed |e-e|
            continue;
          }
          const double* ej =
              &emb.data[(static_cast<std::size_t>(ni) * W + static_cast<std::size_t>(nj)) * D];
          double d = 0.0;
          if (norm == Norm::L1) {
            for (std::size_t c = 0; c < D; ++c) d += std::abs(ei[c] - ej[c]);
          } else {
            for (std::size_t c = 0; c < D; ++c) {
              const double diff = ei[c] - ej[c];
              d += diff * diff;
            }
            d = std::sqrt(d);
          }
          out.values.data[pix * K + k] = d;
        }
      }
    }
  });
  return out;
}

Tensor col2im(const ColMatrix& grad, const PatchSpec& spec) {
  spec.validate();
  const std::size_t H = grad.h, W = grad.w, E = grad.channels, K = grad.patch;
  if (K != spec.patch()) {
    throw DimensionError("col2im patch size mismatch: matrix has K=" + std::to_string(K) +
                         ", spec has K=" + std::to_string(spec.patch()));
  }
  Tensor out = Tensor::zeros({H, W, E});
  // Gather form of the scatter-add: pixel p receives the k-th slot of the
  // row whose center sits at p - offset_k. Each destination is written by
  // exactly one loop iteration sequence, so results do not depend on the
  // worker count.
  parallel_for_rows(H, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        double* dst = &out.data[(i * W + j) * E];
        for (std::size_t k = 0; k < K; ++k) {
          const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) - spec.row_offset(k);
          const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) - spec.col_offset(k);
          if (si < 0 || sj < 0 || si >= static_cast<std::ptrdiff_t>(H) ||
              sj >= static_cast<std::ptrdiff_t>(W)) {
            continue;
          }
          const std::size_t src = static_cast<std::size_t>(si) * W + static_cast<std::size_t>(sj);
          if (!grad.valid[src * K + k]) continue;
          const double* g = &grad.values.data[src * K * E + k * E];
          for (std::size_t c = 0; c < E; ++c) dst[c] += g[c];
        }
      }
    }
  });
  return out;
}

Tensor dist2im(const ColMatrix& grad, const Tensor& emb, const PatchSpec& spec,
               Norm norm) {
  spec.validate();
  require_rank3(emb, "dist2im");
  const std::size_t H = grad.h, W = grad.w, K = grad.patch;
  const std::size_t D = emb.shape[2];
  if (emb.shape[0] != H || emb.shape[1] != W) {
    throw DimensionError("dist2im embedding extents " + emb.shape_str() +
                         " do not match the distance matrix");
  }
  if (K != spec.patch() || grad.channels != 1) {
    throw DimensionError("dist2im expects a distance-shaped matrix (channels=1)");
  }

  // d(i,k) = ||e_i - e_j||, j = i + offset_k. Pixel p picks up two kinds of
  // terms: rows centered at p (p plays e_i) and rows that reach p as a
  // neighbor (p plays e_j, opposite sign). Both are gathered here so the
  // accumulation order is fixed.
  Tensor out = Tensor::zeros({H, W, D});
  parallel_for_rows(H, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        const std::size_t pix = i * W + j;
        double* dst = &out.data[pix * D];
        const double* ep = &emb.data[pix * D];
        for (std::size_t k = 0; k < K; ++k) {
          if (k == spec.center()) continue;  // d = 0 identically, no gradient
          // p as center of row pix.
          {
            const std::ptrdiff_t ni = static_cast<std::ptrdiff_t>(i) + spec.row_offset(k);
            const std::ptrdiff_t nj = static_cast<std::ptrdiff_t>(j) + spec.col_offset(k);
            if (ni >= 0 && nj >= 0 && ni < static_cast<std::ptrdiff_t>(H) &&
                nj < static_cast<std::ptrdiff_t>(W) && grad.valid[pix * K + k]) {
              const double g = grad.values.data[pix * K + k];
              const double* ej =
                  &emb.data[(static_cast<std::size_t>(ni) * W + static_cast<std::size_t>(nj)) * D];
              if (norm == Norm::L1) {
                for (std::size_t c = 0; c < D; ++c) dst[c] += g * sign_of(ep[c] - ej[c]);
              } else {
                double d = 0.0;
                for (std::size_t c = 0; c < D; ++c) {
                  const double diff = ep[c] - ej[c];
                  d += diff * diff;
                }
                d = std::sqrt(d);
                if (d > 0.0) {
                  for (std::size_t c = 0; c < D; ++c) dst[c] += g * (ep[c] - ej[c]) / d;
                }
              }
            }
          }
          // p as neighbor k of the row centered at p - offset_k.
          {
            const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) - spec.row_offset(k);
            const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) - spec.col_offset(k);
            if (si < 0 || sj < 0 || si >= static_cast<std::ptrdiff_t>(H) ||
                sj >= static_cast<std::ptrdiff_t>(W)) {
              continue;
            }
            const std::size_t src =
                static_cast<std::size_t>(si) * W + static_cast<std::size_t>(sj);
            if (!grad.valid[src * K + k]) continue;
            const double g = grad.values.data[src * K + k];
            const double* ei = &emb.data[src * D];
            if (norm == Norm::L1) {
              for (std::size_t c = 0; c < D; ++c) dst[c] -= g * sign_of(ei[c] - ep[c]);
            } else {
              double d = 0.0;
              for (std::size_t c = 0; c < D; ++c) {
                const double diff = ei[c] - ep[c];
                d += diff * diff;
              }
              d = std::sqrt(d);
              if (d > 0.0) {
                for (std::size_t c = 0; c < D; ++c) dst[c] -= g * (ei[c] - ep[c]) / d;
              }
            }
          }
        }
      }
    }
  });
  return out;
}

}  // namespace segaware
