#pragma once

#include <cstddef>

#include "segaware/patch.hpp"
#include "segaware/tensor.hpp"

namespace segaware {

// Per-pixel neighbor attention masks m = exp(-lambda * dist), with the
// source distances retained so backward can recompute d m / d lambda and
// push gradients into the embeddings. Invalid neighbors have mask exactly 0,
// the center exactly 1.
struct MaskField {
  ColMatrix masks;
  ColMatrix dist;
  double lambda = 0.0;
  PatchSpec spec;
  Norm norm = Norm::L1;
};

// Count of times a negative lambda was projected to 0 (process-wide).
std::size_t negative_lambda_warnings();

// m(i,k) = exp(-lambda * dist(i,k)) on valid entries, 0 elsewhere.
// Negative lambda is projected to 0 and counted as a warning.
MaskField compute_masks(const ColMatrix& dist, double lambda, const PatchSpec& spec,
                        Norm norm);

// Convolution weights in GEMM layout: weights[k*E + c, f]. `bias` is either
// rank-1 [F] or empty (no bias).
struct ConvFilter {
  Tensor weights{std::vector<std::size_t>{1, 1}};
  Tensor bias{std::vector<std::size_t>{1}};
  bool has_bias = false;
  PatchSpec spec;
};

// Segmentation-aware smoothing: y_i = sum_k x_k m_{i,k} / sum_k m_{i,k},
// channel by channel. The denominator is always >= 1 (center mask is 1).
Tensor bilateral_filter(const Tensor& x, const MaskField& masks);

// Segmentation-aware convolution: masked columns are row-normalized by the
// mask sum and pushed through one GEMM with `filter.weights`. With an
// all-ones 1-filter bank and a single channel this reproduces
// bilateral_filter bitwise (identical accumulation order).
Tensor segaware_conv(const Tensor& x, const MaskField& masks, const ConvFilter& filter);

// Standard zero-padding convolution on the same im2col/GEMM path, for the
// baseline network and the all-ones-mask reduction tests.
Tensor conv2d(const Tensor& x, const ConvFilter& filter);

// Direct per-pixel summation of the same masked convolution: no column
// buffer, no GEMM. Kept as the benchmark baseline and as a structurally
// independent implementation for equivalence checks.
Tensor segaware_conv_reference(const Tensor& x, const MaskField& masks,
                               const ConvFilter& filter);

struct SegawareConvGrads {
  Tensor grad_x;
  Tensor grad_weights;
  Tensor grad_bias;  // meaningful only when the filter has a bias
  double grad_lambda = 0.0;
  Tensor grad_emb;
};

// Exact gradients of segaware_conv. `emb` must be the field the mask
// distances were measured on; grad_emb comes back via dist2im under the
// mask field's norm.
SegawareConvGrads segaware_conv_backward(const Tensor& grad_y, const Tensor& x,
                                         const MaskField& masks, const ConvFilter& filter,
                                         const Tensor& emb);

struct BilateralGrads {
  Tensor grad_x;
  double grad_lambda = 0.0;
  Tensor grad_emb;
};

BilateralGrads bilateral_filter_backward(const Tensor& grad_y, const Tensor& x,
                                         const MaskField& masks, const Tensor& emb);

struct Conv2dGrads {
  Tensor grad_x;
  Tensor grad_weights;
  Tensor grad_bias;
};

Conv2dGrads conv2d_backward(const Tensor& grad_y, const Tensor& x,
                            const ConvFilter& filter);

}  // namespace segaware
