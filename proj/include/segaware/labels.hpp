#pragma once

#include <cstddef>
#include <vector>

namespace segaware {

// Pixels carrying this label are excluded from every loss pair and metric.
constexpr int kIgnoreLabel = 255;

// Dense H x W integer class labels, row-major.
struct LabelMap {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<int> labels;

  LabelMap() = default;
  LabelMap(std::size_t h_, std::size_t w_, int fill = 0)
      : h(h_), w(w_), labels(h_ * w_, fill) {}

  int at(std::size_t i, std::size_t j) const { return labels[i * w + j]; }
  int& at(std::size_t i, std::size_t j) { return labels[i * w + j]; }
};

}  // namespace segaware
