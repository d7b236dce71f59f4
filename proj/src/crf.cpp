#include "segaware/crf.hpp"

#include <cmath>

#include "segaware/errors.hpp"
#include "segaware/parallel.hpp"

namespace segaware {

namespace {

void require_hwl(const Tensor& t, const char* what) {
  if (t.shape.size() != 3) {
    throw DimensionError(std::string(what) + " expects an HxWxL tensor, got " + t.shape_str());
  }
}

void check_marginals(const Tensor& q) {
  require_hwl(q, "meanfield_step");
  const std::size_t rows = q.shape[0] * q.shape[1];
  const std::size_t L = q.shape[2];
  for (std::size_t i = 0; i < rows; ++i) {
    double sum = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      const double v = q.data[i * L + l];
      if (v < 0.0) throw NumericError("meanfield input Q has a negative entry");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw NumericError("meanfield input Q row sums to " + std::to_string(sum) +
                         ", not 1 within 1e-9");
    }
  }
}

// msg(i,l) = sum_k kernel(i,k) * colQ(i, k*L + l); the center slot carries
// kernel 0, so the self term never enters.
Tensor kernel_message(const ColMatrix& kernel, const ColMatrix& colq, std::size_t L) {
  const std::size_t rows = kernel.h * kernel.w;
  const std::size_t K = kernel.patch;
  Tensor msg = Tensor::zeros({kernel.h, kernel.w, L});
  parallel_for_rows(rows, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      double* out = &msg.data[i * L];
      for (std::size_t k = 0; k < K; ++k) {
        const double w = kernel.values(i, k);
        const double* src = &colq.values.data[i * K * L + k * L];
        for (std::size_t l = 0; l < L; ++l) out[l] += w * src[l];
      }
    }
  });
  return msg;
}

// Adjoints of kernel_message with respect to both factors.
void kernel_message_backward(const ColMatrix& kernel, const ColMatrix& colq,
                             const Tensor& grad_msg, std::size_t L, ColMatrix& grad_colq,
                             Tensor& grad_kernel) {
  const std::size_t rows = kernel.h * kernel.w;
  const std::size_t K = kernel.patch;
  grad_colq = colq;
  grad_kernel = Tensor::zeros({rows, K});
  parallel_for_rows(rows, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      const double* g = &grad_msg.data[i * L];
      for (std::size_t k = 0; k < K; ++k) {
        const double w = kernel.values(i, k);
        const double* src = &colq.values.data[i * K * L + k * L];
        double* dst = &grad_colq.values.data[i * K * L + k * L];
        double acc = 0.0;
        for (std::size_t l = 0; l < L; ++l) {
          acc += g[l] * src[l];
          dst[l] = g[l] * w;
        }
        grad_kernel(i, k) = acc;
      }
    }
  });
}

// glogit_l = q_l * (gq_l - sum_j gq_j q_j), per pixel.
Tensor softmax_backward(const Tensor& grad_q, const Tensor& q) {
  const std::size_t rows = q.shape[0] * q.shape[1];
  const std::size_t L = q.shape[2];
  Tensor out(q.shape);
  for (std::size_t i = 0; i < rows; ++i) {
    double dot = 0.0;
    for (std::size_t l = 0; l < L; ++l) dot += grad_q.data[i * L + l] * q.data[i * L + l];
    for (std::size_t l = 0; l < L; ++l) {
      out.data[i * L + l] = q.data[i * L + l] * (grad_q.data[i * L + l] - dot);
    }
  }
  return out;
}

}  // namespace

void CRFParams::validate() const {
  if (theta_alpha <= 0.0 || theta_beta <= 0.0 || theta_gamma <= 0.0) {
    throw ConfigError("CRF bandwidths must be positive");
  }
  if (w1 < 0.0 || w2 < 0.0) throw ConfigError("CRF kernel weights must be >= 0");
  bilateral_spec.validate();
  spatial_spec.validate();
}

Tensor CRFParams::compat_for(std::size_t num_labels) const {
  if (has_compat) {
    if (compat.shape.size() != 2 || compat.shape[0] != num_labels ||
        compat.shape[1] != num_labels) {
      throw ConfigError("compatibility matrix " + compat.shape_str() + " does not match L=" +
                        std::to_string(num_labels));
    }
    return compat;
  }
  Tensor potts({num_labels, num_labels}, 1.0);
  for (std::size_t l = 0; l < num_labels; ++l) potts(l, l) = 0.0;
  return potts;
}

PairwiseKernels pairwise_kernel(const Tensor& emb, const CRFParams& params,
                                bool zero_center) {
  params.validate();
  require_hwl(emb, "pairwise_kernel");

  PairwiseKernels out;
  out.emb_dist = im2dist(emb, params.bilateral_spec, Norm::L2);

  // Appearance: spatial Gaussian times embedding Gaussian (squared L2 in
  // both exponents). The spatial factor depends only on the slot index.
  {
    const PatchSpec& spec = params.bilateral_spec;
    const std::size_t K = spec.patch();
    std::vector<double> spatial(K);
    for (std::size_t k = 0; k < K; ++k) {
      const double di = static_cast<double>(spec.row_offset(k));
      const double dj = static_cast<double>(spec.col_offset(k));
      spatial[k] =
          std::exp(-(di * di + dj * dj) / (2.0 * params.theta_alpha * params.theta_alpha));
    }
    out.appearance = out.emb_dist;
    const std::size_t rows = out.appearance.h * out.appearance.w;
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t k = 0; k < K; ++k) {
        if (!out.appearance.is_valid(i, k) || (zero_center && k == spec.center())) {
          out.appearance.values(i, k) = 0.0;
          continue;
        }
        const double ed = out.emb_dist.values(i, k);
        out.appearance.values(i, k) =
            spatial[k] *
            std::exp(-(ed * ed) / (2.0 * params.theta_beta * params.theta_beta));
      }
    }
  }

  // Smoothness: spatial Gaussian only, on its own (tighter) support.
  {
    const PatchSpec& spec = params.spatial_spec;
    const std::size_t K = spec.patch();
    ColMatrix probe = im2dist(emb, spec, Norm::L2);  // for extents + validity
    out.smoothness = probe;
    std::vector<double> spatial(K);
    for (std::size_t k = 0; k < K; ++k) {
      const double di = static_cast<double>(spec.row_offset(k));
      const double dj = static_cast<double>(spec.col_offset(k));
      spatial[k] =
          std::exp(-(di * di + dj * dj) / (2.0 * params.theta_gamma * params.theta_gamma));
    }
    const std::size_t rows = out.smoothness.h * out.smoothness.w;
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t k = 0; k < K; ++k) {
        const bool dead = !out.smoothness.is_valid(i, k) || (zero_center && k == spec.center());
        out.smoothness.values(i, k) = dead ? 0.0 : spatial[k];
      }
    }
  }
  return out;
}

Tensor softmax_channels(const Tensor& x) {
  require_hwl(x, "softmax_channels");
  const std::size_t rows = x.shape[0] * x.shape[1];
  const std::size_t L = x.shape[2];
  Tensor out(x.shape);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* src = &x.data[i * L];
    double* dst = &out.data[i * L];
    double hi = src[0];
    for (std::size_t l = 1; l < L; ++l) hi = std::max(hi, src[l]);
    double sum = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      dst[l] = std::exp(src[l] - hi);
      sum += dst[l];
    }
    for (std::size_t l = 0; l < L; ++l) dst[l] /= sum;
  }
  return out;
}

Marginals meanfield_step(const Marginals& q, const Tensor& unary,
                         const PairwiseKernels& kernels, const CRFParams& params) {
  check_marginals(q.q);
  if (!q.q.same_shape(unary)) {
    throw DimensionError("meanfield unary " + unary.shape_str() + " does not match Q " +
                         q.q.shape_str());
  }
  const std::size_t L = unary.shape[2];
  const Tensor compat = params.compat_for(L);

  ColMatrix colq_app = im2col(q.q, params.bilateral_spec);
  ColMatrix colq_smooth = im2col(q.q, params.spatial_spec);
  Tensor app_msg = kernel_message(kernels.appearance, colq_app, L);
  Tensor smooth_msg = kernel_message(kernels.smoothness, colq_smooth, L);

  const std::size_t rows = unary.shape[0] * unary.shape[1];
  Tensor logits(unary.shape);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t l = 0; l < L; ++l) {
      double pen = 0.0;
      for (std::size_t lp = 0; lp < L; ++lp) {
        pen += compat(l, lp) * (params.w1 * app_msg.data[i * L + lp] +
                                params.w2 * smooth_msg.data[i * L + lp]);
      }
      logits.data[i * L + l] = -unary.data[i * L + l] - pen;
    }
  }
  return Marginals{softmax_channels(logits)};
}

CRFForward crf_forward(const Tensor& unary, const Tensor& emb, const CRFParams& params) {
  params.validate();
  require_hwl(unary, "crf_forward");
  CRFForward fwd;
  fwd.params = params;
  fwd.unary = unary;
  fwd.emb = emb;
  fwd.kernels = pairwise_kernel(emb, params);

  const std::size_t L = unary.shape[2];
  const Tensor compat = params.compat_for(L);
  const std::size_t rows = unary.shape[0] * unary.shape[1];

  Tensor neg = scale(unary, -1.0);
  fwd.qs.push_back(softmax_channels(neg));

  for (std::size_t t = 0; t < params.iterations; ++t) {
    const Tensor& prev = fwd.qs.back();
    ColMatrix colq_app = im2col(prev, params.bilateral_spec);
    ColMatrix colq_smooth = im2col(prev, params.spatial_spec);
    Tensor app_msg = kernel_message(fwd.kernels.appearance, colq_app, L);
    Tensor smooth_msg = kernel_message(fwd.kernels.smoothness, colq_smooth, L);

    Tensor logits(unary.shape);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t l = 0; l < L; ++l) {
        double pen = 0.0;
        for (std::size_t lp = 0; lp < L; ++lp) {
          pen += compat(l, lp) * (params.w1 * app_msg.data[i * L + lp] +
                                  params.w2 * smooth_msg.data[i * L + lp]);
        }
        logits.data[i * L + l] = -unary.data[i * L + l] - pen;
      }
    }
    fwd.app_msgs.push_back(std::move(app_msg));
    fwd.smooth_msgs.push_back(std::move(smooth_msg));
    fwd.qs.push_back(softmax_channels(logits));
  }
  return fwd;
}

Marginals crf_inference(const Tensor& unary, const Tensor& emb, const CRFParams& params) {
  CRFForward fwd = crf_forward(unary, emb, params);
  return Marginals{fwd.qs.back()};
}

CRFGrads crf_backward(const Tensor& grad_q_final, const CRFForward& saved) {
  const Tensor& unary = saved.unary;
  const CRFParams& params = saved.params;
  const std::size_t L = unary.shape[2];
  const std::size_t rows = unary.shape[0] * unary.shape[1];
  const Tensor compat = params.compat_for(L);

  CRFGrads out;
  out.grad_unary = Tensor::zeros(unary.shape);
  out.grad_emb = Tensor::zeros(saved.emb.shape);
  Tensor grad_app_kernel =
      Tensor::zeros({rows, saved.kernels.appearance.patch});

  Tensor gq = grad_q_final;
  for (std::size_t t = saved.params.iterations; t >= 1; --t) {
    Tensor glogits = softmax_backward(gq, saved.qs[t]);
    for (std::size_t i = 0; i < glogits.data.size(); ++i) {
      out.grad_unary.data[i] -= glogits.data[i];
    }
    // gpen = -glogits; gpair_l' = sum_l compat(l,l') gpen_l.
    Tensor gpair(unary.shape);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t lp = 0; lp < L; ++lp) {
        double acc = 0.0;
        for (std::size_t l = 0; l < L; ++l) {
          acc += compat(l, lp) * (-glogits.data[i * L + l]);
        }
        gpair.data[i * L + lp] = acc;
      }
    }

    const Tensor& app_msg = saved.app_msgs[t - 1];
    const Tensor& smooth_msg = saved.smooth_msgs[t - 1];
    for (std::size_t i = 0; i < gpair.data.size(); ++i) {
      out.grad_w1 += gpair.data[i] * app_msg.data[i];
      out.grad_w2 += gpair.data[i] * smooth_msg.data[i];
    }

    Tensor g_app_msg = scale(gpair, params.w1);
    Tensor g_smooth_msg = scale(gpair, params.w2);

    const Tensor& prev = saved.qs[t - 1];
    ColMatrix colq_app = im2col(prev, params.bilateral_spec);
    ColMatrix colq_smooth = im2col(prev, params.spatial_spec);

    ColMatrix g_colq_app, g_colq_smooth;
    Tensor g_ker_app, g_ker_smooth;
    kernel_message_backward(saved.kernels.appearance, colq_app, g_app_msg, L, g_colq_app,
                            g_ker_app);
    kernel_message_backward(saved.kernels.smoothness, colq_smooth, g_smooth_msg, L,
                            g_colq_smooth, g_ker_smooth);
    for (std::size_t i = 0; i < g_ker_app.data.size(); ++i) {
      grad_app_kernel.data[i] += g_ker_app.data[i];
    }
    // The smoothness kernel has no learnable inputs beyond w2, so its
    // kernel-value gradient stops here.

    Tensor gq_prev = col2im(g_colq_app, params.bilateral_spec);
    Tensor gq_prev2 = col2im(g_colq_smooth, params.spatial_spec);
    for (std::size_t i = 0; i < gq_prev.data.size(); ++i) {
      gq_prev.data[i] += gq_prev2.data[i];
    }
    gq = std::move(gq_prev);
  }

  // Q0 = softmax(-unary).
  Tensor glogits0 = softmax_backward(gq, saved.qs[0]);
  for (std::size_t i = 0; i < glogits0.data.size(); ++i) {
    out.grad_unary.data[i] -= glogits0.data[i];
  }

  // Appearance kernel -> embedding distances -> embeddings.
  // k = spatial * exp(-ed^2/(2 theta_beta^2)), so dk/d(ed) = k * (-ed/theta_beta^2).
  const PatchSpec& bspec = params.bilateral_spec;
  ColMatrix g_ed = saved.kernels.emb_dist;
  for (auto& v : g_ed.values.data) v = 0.0;
  const double inv_tb2 = 1.0 / (params.theta_beta * params.theta_beta);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t k = 0; k < bspec.patch(); ++k) {
      if (k == bspec.center() || !saved.kernels.appearance.is_valid(i, k)) continue;
      const double kv = saved.kernels.appearance.values(i, k);
      const double ed = saved.kernels.emb_dist.values(i, k);
      g_ed.values(i, k) = grad_app_kernel(i, k) * kv * (-ed * inv_tb2);
    }
  }
  out.grad_emb = dist2im(g_ed, saved.emb, bspec, Norm::L2);
  return out;
}

double gibbs_energy(const LabelMap& labeling, const Tensor& unary,
                    const PairwiseKernels& kernels, const CRFParams& params) {
  require_hwl(unary, "gibbs_energy");
  const std::size_t H = unary.shape[0], W = unary.shape[1], L = unary.shape[2];
  if (labeling.h != H || labeling.w != W) {
    throw DimensionError("gibbs labeling extents do not match the unary");
  }
  const Tensor compat = params.compat_for(L);

  // Accumulate in extended precision: the energy is a sum of thousands of
  // O(1) terms, and plain double accumulation would make the result depend
  // on traversal order at the 1e-12 level the diagnostics compare at.
  long double energy = 0.0L;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const int l = labeling.at(i, j);
      if (l < 0 || static_cast<std::size_t>(l) >= L) {
        throw DimensionError("gibbs labeling has label " + std::to_string(l) +
                             " outside [0, " + std::to_string(L) + ")");
      }
      energy += unary(i, j, static_cast<std::size_t>(l));
    }

  // Each unordered pair once: count (i, j) with j earlier in raster order.
  auto pair_sum = [&](const ColMatrix& kernel, const PatchSpec& spec, double weight) {
    long double acc = 0.0L;
    if (weight == 0.0) return acc;
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const std::size_t pix = i * W + j;
        for (std::size_t k = 0; k < spec.patch(); ++k) {
          if (k == spec.center() || !kernel.is_valid(pix, k)) continue;
          const std::ptrdiff_t ni = static_cast<std::ptrdiff_t>(i) + spec.row_offset(k);
          const std::ptrdiff_t nj = static_cast<std::ptrdiff_t>(j) + spec.col_offset(k);
          const std::size_t other =
              static_cast<std::size_t>(ni) * W + static_cast<std::size_t>(nj);
          if (other >= pix) continue;  // j < i in raster order
          const int la = labeling.at(i, j);
          const int lb = labeling.at(static_cast<std::size_t>(ni), static_cast<std::size_t>(nj));
          acc += weight * kernel.values(pix, k) *
                 compat(static_cast<std::size_t>(la), static_cast<std::size_t>(lb));
        }
      }
    return acc;
  };
  energy += pair_sum(kernels.appearance, params.bilateral_spec, params.w1);
  energy += pair_sum(kernels.smoothness, params.spatial_spec, params.w2);
  return static_cast<double>(energy);
}

}  // namespace segaware
