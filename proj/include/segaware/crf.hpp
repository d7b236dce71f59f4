#pragma once

#include <cstddef>
#include <vector>

#include "segaware/labels.hpp"
#include "segaware/patch.hpp"
#include "segaware/tensor.hpp"

namespace segaware {

// Sparse CRF over patch-shaped supports. The pairwise kernel combines an
// appearance term (spatial + embedding distance, wide atrous support) and a
// smoothness term (spatial only, tight support); both are exposed as learnable
// mixture weights w1/w2 with fixed bandwidths.
struct CRFParams {
  double w1 = 1.0;
  double w2 = 1.0;
  double theta_alpha = 4.0;  // appearance spatial bandwidth, pixels
  double theta_beta = 1.0;   // appearance embedding bandwidth
  double theta_gamma = 1.5;  // smoothness spatial bandwidth, pixels
  PatchSpec bilateral_spec{13, 13, 9};
  PatchSpec spatial_spec{5, 5, 1};
  std::size_t iterations = 2;
  // Optional L x L label compatibility; empty means Potts (1 off-diagonal).
  Tensor compat{std::vector<std::size_t>{1}};
  bool has_compat = false;

  void validate() const;
  // Resolved compatibility matrix for L labels (stored or Potts default).
  Tensor compat_for(std::size_t num_labels) const;
};

struct Marginals {
  Tensor q;  // H x W x L, rows sum to 1
};

// Eq. 6 kernel values on their supports. Centers are zeroed (no self
// message); invalid slots are zero. The embedding L2 distances that went
// into the appearance term are retained for the backward pass.
struct PairwiseKernels {
  ColMatrix appearance;
  ColMatrix smoothness;
  ColMatrix emb_dist;  // L2 embedding distances on bilateral_spec
};

// appearance(i,j) = exp(-|i-j|^2/(2 theta_alpha^2) - |e_i-e_j|^2/(2 theta_beta^2))
// smoothness(i,j) = exp(-|i-j|^2/(2 theta_gamma^2))
// `zero_center` is exposed so tests can observe the pre-zeroing self term.
PairwiseKernels pairwise_kernel(const Tensor& emb, const CRFParams& params,
                                bool zero_center = true);

// Per-pixel softmax over the channel dimension (numerically stabilized).
Tensor softmax_channels(const Tensor& x);

// One synchronous mean-field update. `q` must hold valid distributions
// (rows sum to 1 within 1e-9); violations raise a numeric error.
Marginals meanfield_step(const Marginals& q, const Tensor& unary,
                         const PairwiseKernels& kernels, const CRFParams& params);

// Q0 = softmax(-unary), then `params.iterations` mean-field steps.
Marginals crf_inference(const Tensor& unary, const Tensor& emb, const CRFParams& params);

// Full forward trace kept for reverse-mode differentiation.
struct CRFForward {
  CRFParams params;
  Tensor unary;
  Tensor emb;
  PairwiseKernels kernels;
  std::vector<Tensor> qs;           // Q0 .. QT
  std::vector<Tensor> app_msgs;     // messages per step (1..T)
  std::vector<Tensor> smooth_msgs;
};

CRFForward crf_forward(const Tensor& unary, const Tensor& emb, const CRFParams& params);

struct CRFGrads {
  Tensor grad_unary;
  Tensor grad_emb;
  double grad_w1 = 0.0;
  double grad_w2 = 0.0;
};

// Exact reverse-mode differentiation through the unrolled iterations.
CRFGrads crf_backward(const Tensor& grad_q_final, const CRFForward& saved);

// Eq. 5 with each unordered pair counted once (j < i in raster order),
// summed independently over both kernel supports.
double gibbs_energy(const LabelMap& labeling, const Tensor& unary,
                    const PairwiseKernels& kernels, const CRFParams& params);

}  // namespace segaware
