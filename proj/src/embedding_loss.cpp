#include "segaware/embedding_loss.hpp"

#include <cmath>

#include "segaware/errors.hpp"

namespace segaware {

void LossConfig::validate() const {
  if (alpha < 0.0 || beta < alpha) {
    throw ConfigError("hinge thresholds need 0 <= alpha <= beta, got alpha=" +
                      std::to_string(alpha) + " beta=" + std::to_string(beta));
  }
  if (neighborhoods.empty()) throw ConfigError("loss needs at least one neighborhood");
  for (const auto& [kernel, atrous] : neighborhoods) {
    if (kernel % 2 == 0 || kernel == 0 || atrous == 0) {
      throw ConfigError("loss neighborhood kernels must be odd with atrous >= 1");
    }
  }
}

double pairwise_hinge(double dist, bool same_label, const LossConfig& cfg) {
  return same_label ? std::max(dist - cfg.alpha, 0.0) : std::max(cfg.beta - dist, 0.0);
}

LossResult embedding_loss(const Tensor& emb, const LabelMap& labels,
                          const LossConfig& cfg) {
  cfg.validate();
  if (emb.shape.size() != 3 || emb.shape[0] != labels.h || emb.shape[1] != labels.w) {
    throw DimensionError("embedding " + emb.shape_str() + " does not match a " +
                         std::to_string(labels.h) + "x" + std::to_string(labels.w) +
                         " label map");
  }
  const std::size_t H = labels.h, W = labels.w;

  LossResult out;
  out.grad = Tensor::zeros(emb.shape);

  for (const auto& [kernel, atrous] : cfg.neighborhoods) {
    PatchSpec spec{kernel, kernel, atrous};
    ColMatrix dist = im2dist(emb, spec, cfg.norm);
    const std::size_t K = spec.patch();

    // d loss / d dist per (pixel, neighbor) slot, then one dist2im pass.
    ColMatrix dgrad = dist;
    for (auto& v : dgrad.values.data) v = 0.0;

    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        const int li = labels.at(i, j);
        if (li == kIgnoreLabel) continue;
        const std::size_t pix = i * W + j;
        for (std::size_t k = 0; k < K; ++k) {
          if (k == spec.center() || !dist.is_valid(pix, k)) continue;
          const std::size_t ni =
              static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + spec.row_offset(k));
          const std::size_t nj =
              static_cast<std::size_t>(static_cast<std::ptrdiff_t>(j) + spec.col_offset(k));
          const int lj = labels.at(ni, nj);
          if (lj == kIgnoreLabel) continue;
          const double d = dist.values(pix, k);
          if (li == lj) {
            if (d > cfg.alpha) {
              out.loss += d - cfg.alpha;
              dgrad.values(pix, k) = 1.0;
            }
          } else {
            if (d < cfg.beta) {
              out.loss += cfg.beta - d;
              dgrad.values(pix, k) = -1.0;
            }
          }
        }
      }
    }

    Tensor g = dist2im(dgrad, emb, spec, cfg.norm);
    for (std::size_t i = 0; i < g.data.size(); ++i) out.grad.data[i] += g.data[i];
  }
  return out;
}

}  // namespace segaware
