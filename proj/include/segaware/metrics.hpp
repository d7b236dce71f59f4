#pragma once

#include <cstddef>
#include <vector>

#include "segaware/labels.hpp"
#include "segaware/patch.hpp"
#include "segaware/tensor.hpp"

namespace segaware {

// Pixels within Chebyshev distance `halfwidth` of a label boundary. A
// boundary pixel is one whose 4-neighborhood contains a different label;
// ignore-labeled pixels neither seed the band nor appear in it.
std::vector<unsigned char> trimap(const LabelMap& labels, std::size_t halfwidth);

// Per-class intersection-over-union averaged over the classes present in
// `gt`, optionally restricted to pixels where restrict != 0. Ground-truth
// ignore pixels are skipped. Symmetric in pred/gt whenever the two maps
// contain the same set of classes.
double mean_iou(const LabelMap& pred, const LabelMap& gt,
                const std::vector<unsigned char>* restrict_mask = nullptr);

// Average endpoint error between two H x W x 2 flow fields.
double epe(const Tensor& pred, const Tensor& gt);

struct AucResult {
  double value = 0.0;
  bool defined = false;  // false when same- or different-label pairs are absent
};

// Ranking quality of an affinity field: over all valid non-center patch
// slots (pixel, neighbor) with both labels known, scores for same-label
// pairs should exceed scores for different-label pairs. Computed as the
// Mann-Whitney U statistic with average ranks for ties.
AucResult affinity_auc(const ColMatrix& affinity, const PatchSpec& spec,
                       const LabelMap& labels);

// affinity_auc on masks exp(-dist) derived from an embedding field. AUC is
// invariant to monotone transforms, so the mask sharpness lambda is
// irrelevant and fixed at 1.
AucResult mask_auc(const Tensor& emb, const LabelMap& labels, const PatchSpec& spec,
                   Norm norm);

}  // namespace segaware
