#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "segaware/labels.hpp"
#include "segaware/patch.hpp"
#include "segaware/tensor.hpp"

namespace segaware {

// Pairwise hinge thresholds and the neighborhoods the loss is summed over.
// Same-label pairs are pulled inside `alpha`, cross-label pairs pushed
// beyond `beta`.
struct LossConfig {
  double alpha = 0.5;
  double beta = 2.0;
  Norm norm = Norm::L1;
  // (kernel, atrous) pairs; kernels are square and odd.
  std::vector<std::pair<std::size_t, std::size_t>> neighborhoods = {
      {3, 1}, {3, 2}, {3, 5}};

  void validate() const;
};

// Hinge for one pair at embedding distance `dist`:
//   same label      -> max(dist - alpha, 0)
//   different label -> max(beta - dist, 0)
double pairwise_hinge(double dist, bool same_label, const LossConfig& cfg);

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // d loss / d emb, same shape as emb
};

// Sum of pairwise hinges over every configured neighborhood, as an
// unnormalized sum over ordered pairs (i, j in N(i)); the center self-pair
// is excluded. Pairs touching the ignore label contribute nothing. The
// gradient uses subgradient 0 exactly at the hinge kinks.
LossResult embedding_loss(const Tensor& emb, const LabelMap& labels,
                          const LossConfig& cfg);

}  // namespace segaware
