#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "segaware/labels.hpp"
#include "segaware/rng.hpp"
#include "segaware/tensor.hpp"

namespace segaware {

// One generated scene: RGB image in [0,1], instance labels (0 = background,
// 1..S = shapes, back-to-front), and a per-pixel 2-channel flow target that
// is constant within each labeled region and zero on the background.
struct SyntheticScene {
  Tensor image{std::vector<std::size_t>{1, 1, 3}};
  LabelMap labels;
  Tensor flow{std::vector<std::size_t>{1, 1, 2}};
};

struct DatasetConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 5;
  double noise_sigma = 0.05;
  double texture_amplitude = 0.1;  // background texture strength
  double min_color_separation = 0.2;
  double max_flow = 3.0;  // per-label flow component bound, pixels
  std::size_t train_count = 200;
  std::size_t test_count = 50;
  std::uint64_t seed = 1;

  std::size_t num_labels() const { return max_shapes + 1; }
  void validate() const;
};

// Label appearance, fixed per dataset so label identity is learnable from
// color: palette[l] is the base RGB of label l (0 = background), flow[l] its
// motion vector (zero for the background).
struct DatasetPalette {
  std::vector<double> colors;  // num_labels x 3
  std::vector<double> flows;   // num_labels x 2
};

// Palette and flow table derived from the dataset seed alone. Colors are
// rejection-sampled until all pairs are separated by at least
// min_color_separation in RGB L2.
DatasetPalette make_palette(const DatasetConfig& cfg);

// One scene. All randomness comes from `rng`; degenerate layouts (a shape
// with almost no visible pixels, or a disconnected visible region) are
// resampled from the same stream.
SyntheticScene generate_scene(const DatasetConfig& cfg, const DatasetPalette& palette,
                              Rng& rng);

// Scene `index` of the dataset: seeds an Rng at cfg.seed + 1 + index so
// scenes can be produced independently and in any order.
SyntheticScene scene_at(const DatasetConfig& cfg, const DatasetPalette& palette,
                        std::size_t index);

}  // namespace segaware
