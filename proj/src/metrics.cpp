#include "segaware/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>

#include "segaware/errors.hpp"

namespace segaware {

std::vector<unsigned char> trimap(const LabelMap& labels, std::size_t halfwidth) {
  const std::size_t H = labels.h, W = labels.w;
  const std::size_t unreached = H * W + 1;
  std::vector<std::size_t> dist(H * W, unreached);
  std::deque<std::size_t> frontier;

  // Seed with boundary pixels, then expand with 8-connected BFS; each ring of
  // the 8-neighborhood adds exactly one unit of Chebyshev distance.
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      const int l = labels.at(i, j);
      if (l == kIgnoreLabel) continue;
      bool boundary = false;
      if (i > 0 && labels.at(i - 1, j) != l && labels.at(i - 1, j) != kIgnoreLabel)
        boundary = true;
      if (i + 1 < H && labels.at(i + 1, j) != l && labels.at(i + 1, j) != kIgnoreLabel)
        boundary = true;
      if (j > 0 && labels.at(i, j - 1) != l && labels.at(i, j - 1) != kIgnoreLabel)
        boundary = true;
      if (j + 1 < W && labels.at(i, j + 1) != l && labels.at(i, j + 1) != kIgnoreLabel)
        boundary = true;
      if (boundary) {
        dist[i * W + j] = 0;
        frontier.push_back(i * W + j);
      }
    }
  }
  while (!frontier.empty()) {
    const std::size_t p = frontier.front();
    frontier.pop_front();
    const std::size_t i = p / W, j = p % W;
    for (std::ptrdiff_t di = -1; di <= 1; ++di) {
      for (std::ptrdiff_t dj = -1; dj <= 1; ++dj) {
        const std::ptrdiff_t ni = static_cast<std::ptrdiff_t>(i) + di;
        const std::ptrdiff_t nj = static_cast<std::ptrdiff_t>(j) + dj;
        if (ni < 0 || nj < 0 || ni >= static_cast<std::ptrdiff_t>(H) ||
            nj >= static_cast<std::ptrdiff_t>(W))
          continue;
        const std::size_t q = static_cast<std::size_t>(ni) * W + static_cast<std::size_t>(nj);
        if (dist[q] > dist[p] + 1) {
          dist[q] = dist[p] + 1;
          frontier.push_back(q);
        }
      }
    }
  }

  std::vector<unsigned char> band(H * W, 0);
  for (std::size_t p = 0; p < H * W; ++p) {
    band[p] = (dist[p] <= halfwidth && labels.labels[p] != kIgnoreLabel) ? 1 : 0;
  }
  return band;
}

double mean_iou(const LabelMap& pred, const LabelMap& gt,
                const std::vector<unsigned char>* restrict_mask) {
  if (gt.h != pred.h || gt.w != pred.w) {
    throw NumericError("mean_iou label maps differ in shape");
  }
  if (restrict_mask && restrict_mask->size() != gt.h * gt.w) {
    throw NumericError("mean_iou restrict mask size does not match label maps");
  }
  struct ClassCounts {
    std::size_t inter = 0, in_gt = 0, in_pred = 0;
  };
  std::map<int, ClassCounts> counts;
  for (std::size_t p = 0; p < gt.labels.size(); ++p) {
    if (restrict_mask && !(*restrict_mask)[p]) continue;
    const int g = gt.labels[p];
    if (g == kIgnoreLabel) continue;
    const int r = pred.labels[p];
    ++counts[g].in_gt;
    ++counts[r].in_pred;
    if (g == r) ++counts[g].inter;
  }
  // Average over classes present in gt; prediction-only classes still widen
  // the union of the gt classes they collide with, but get no term of their
  // own. Inter/union are symmetric, so swapping pred/gt changes nothing when
  // the two maps share a class set.
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [cls, c] : counts) {
    (void)cls;
    if (c.in_gt == 0) continue;
    sum += static_cast<double>(c.inter) /
           static_cast<double>(c.in_gt + c.in_pred - c.inter);
    ++n;
  }
  if (n == 0) return 1.0;  // empty region: nothing disagrees
  return sum / static_cast<double>(n);
}

double epe(const Tensor& pred, const Tensor& gt) {
  if (!gt.same_shape(pred) || gt.rank() != 3 || gt.extent(2) != 2) {
    throw NumericError("epe expects matching H x W x 2 flow fields");
  }
  const std::size_t n = gt.extent(0) * gt.extent(1);
  double sum = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    const double du = gt.data[p * 2] - pred.data[p * 2];
    const double dv = gt.data[p * 2 + 1] - pred.data[p * 2 + 1];
    sum += std::sqrt(du * du + dv * dv);
  }
  return sum / static_cast<double>(n);
}

AucResult affinity_auc(const ColMatrix& affinity, const PatchSpec& spec,
                       const LabelMap& labels) {
  if (affinity.h != labels.h || affinity.w != labels.w || affinity.channels != 1 ||
      affinity.patch != spec.patch()) {
    throw NumericError("affinity_auc expects a single-channel affinity over the label grid");
  }
  const std::size_t K = spec.patch();
  const std::size_t center = spec.center();

  // (score, is_same_label) for every valid non-center pair.
  std::vector<std::pair<double, unsigned char>> pairs;
  pairs.reserve(affinity.h * affinity.w * (K - 1));
  for (std::size_t p = 0; p < affinity.h * affinity.w; ++p) {
    const std::size_t i = p / affinity.w, j = p % affinity.w;
    const int l = labels.at(i, j);
    if (l == kIgnoreLabel) continue;
    for (std::size_t k = 0; k < K; ++k) {
      if (k == center || !affinity.is_valid(p, k)) continue;
      const std::size_t ni =
          static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + spec.row_offset(k));
      const std::size_t nj =
          static_cast<std::size_t>(static_cast<std::ptrdiff_t>(j) + spec.col_offset(k));
      const int ln = labels.at(ni, nj);
      if (ln == kIgnoreLabel) continue;
      pairs.emplace_back(affinity.values(p, k), ln == l ? 1 : 0);
    }
  }

  std::size_t n_same = 0;
  for (const auto& pr : pairs) n_same += pr.second;
  const std::size_t n_diff = pairs.size() - n_same;
  AucResult out;
  if (n_same == 0 || n_diff == 0) return out;

  // Mann-Whitney U with average ranks over tied scores.
  std::sort(pairs.begin(), pairs.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum_same = 0.0;
  std::size_t idx = 0;
  while (idx < pairs.size()) {
    std::size_t run = idx + 1;
    while (run < pairs.size() && pairs[run].first == pairs[idx].first) ++run;
    const double avg_rank = 0.5 * static_cast<double>(idx + 1 + run);  // 1-based
    for (std::size_t t = idx; t < run; ++t) {
      if (pairs[t].second) rank_sum_same += avg_rank;
    }
    idx = run;
  }
  const double u = rank_sum_same -
                   0.5 * static_cast<double>(n_same) * static_cast<double>(n_same + 1);
  out.value = u / (static_cast<double>(n_same) * static_cast<double>(n_diff));
  out.defined = true;
  return out;
}

AucResult mask_auc(const Tensor& emb, const LabelMap& labels, const PatchSpec& spec,
                   Norm norm) {
  ColMatrix affinity = im2dist(emb, spec, norm);
  const std::size_t K = spec.patch();
  for (std::size_t p = 0; p < affinity.h * affinity.w; ++p) {
    for (std::size_t k = 0; k < K; ++k) {
      if (affinity.is_valid(p, k)) {
        affinity.values(p, k) = std::exp(-affinity.values(p, k));
      }
    }
  }
  return affinity_auc(affinity, spec, labels);
}

}  // namespace segaware
