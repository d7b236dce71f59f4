#include "segaware/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "segaware/errors.hpp"

namespace segaware {

namespace {

constexpr double kTau = 6.283185307179586;

// Visible pixels of `label` form one 4-connected component of size >= 16.
bool label_region_ok(const LabelMap& labels, int label) {
  const std::size_t H = labels.h, W = labels.w;
  std::size_t total = 0;
  std::size_t start = H * W;
  for (std::size_t p = 0; p < H * W; ++p) {
    if (labels.labels[p] == label) {
      ++total;
      if (start == H * W) start = p;
    }
  }
  if (total < 16) return false;
  std::vector<unsigned char> seen(H * W, 0);
  std::deque<std::size_t> queue{start};
  seen[start] = 1;
  std::size_t reached = 0;
  while (!queue.empty()) {
    const std::size_t p = queue.front();
    queue.pop_front();
    ++reached;
    const std::size_t i = p / W, j = p % W;
    const std::ptrdiff_t di[4] = {-1, 1, 0, 0};
    const std::ptrdiff_t dj[4] = {0, 0, -1, 1};
    for (int d = 0; d < 4; ++d) {
      const std::ptrdiff_t ni = static_cast<std::ptrdiff_t>(i) + di[d];
      const std::ptrdiff_t nj = static_cast<std::ptrdiff_t>(j) + dj[d];
      if (ni < 0 || nj < 0 || ni >= static_cast<std::ptrdiff_t>(H) ||
          nj >= static_cast<std::ptrdiff_t>(W))
        continue;
      const std::size_t q = static_cast<std::size_t>(ni) * W + static_cast<std::size_t>(nj);
      if (!seen[q] && labels.labels[q] == label) {
        seen[q] = 1;
        queue.push_back(q);
      }
    }
  }
  return reached == total;
}

void paint_shapes(const DatasetConfig& cfg, LabelMap& labels, std::size_t shapes, Rng& rng) {
  const std::size_t H = cfg.height, W = cfg.width;
  const std::size_t lo = std::max<std::size_t>(6, H / 6);
  const std::size_t hi = std::max<std::size_t>(lo + 1, (H * 2) / 5);
  for (std::size_t s = 1; s <= shapes; ++s) {
    if (rng.next_below(2) == 0) {
      const std::size_t sh = lo + rng.next_below(hi - lo);
      const std::size_t sw = lo + rng.next_below(hi - lo);
      const std::size_t top = 1 + rng.next_below(H - sh - 1);
      const std::size_t left = 1 + rng.next_below(W - sw - 1);
      for (std::size_t i = top; i < top + sh; ++i)
        for (std::size_t j = left; j < left + sw; ++j) labels.at(i, j) = static_cast<int>(s);
    } else {
      const std::size_t r =
          lo / 2 + rng.next_below(std::max<std::size_t>(1, hi / 2 - lo / 2));
      const std::size_t ci = r + 1 + rng.next_below(H - 2 * r - 1);
      const std::size_t cj = r + 1 + rng.next_below(W - 2 * r - 1);
      for (std::size_t i = ci - r; i <= ci + r; ++i)
        for (std::size_t j = cj - r; j <= cj + r; ++j) {
          const double di = static_cast<double>(i) - static_cast<double>(ci);
          const double dj = static_cast<double>(j) - static_cast<double>(cj);
          if (di * di + dj * dj <= static_cast<double>(r * r)) {
            labels.at(i, j) = static_cast<int>(s);
          }
        }
    }
  }
}

}  // namespace

void DatasetConfig::validate() const {
  if (height < 16 || width < 16) throw ConfigError("dataset scenes must be at least 16x16");
  if (min_shapes > max_shapes) throw ConfigError("dataset min_shapes exceeds max_shapes");
  if (max_shapes > 250) throw ConfigError("dataset max_shapes must leave labels below 251");
  if (noise_sigma < 0.0 || texture_amplitude < 0.0 || max_flow < 0.0) {
    throw ConfigError("dataset noise, texture and flow bounds must be >= 0");
  }
  if (min_color_separation <= 0.0) throw ConfigError("color separation must be positive");
}

DatasetPalette make_palette(const DatasetConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t n = cfg.num_labels();
  DatasetPalette out;
  out.colors.resize(n * 3);
  out.flows.assign(n * 2, 0.0);
  for (std::size_t l = 0; l < n; ++l) {
    for (int attempt = 0;; ++attempt) {
      double c[3];
      for (double& v : c) v = rng.uniform(0.1, 0.9);
      bool ok = true;
      for (std::size_t m = 0; m < l; ++m) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < 3; ++k) {
          const double diff = c[k] - out.colors[m * 3 + k];
          d2 += diff * diff;
        }
        if (std::sqrt(d2) < cfg.min_color_separation) {
          ok = false;
          break;
        }
      }
      if (ok) {
        for (std::size_t k = 0; k < 3; ++k) out.colors[l * 3 + k] = c[k];
        break;
      }
      if (attempt > 10000) {
        throw ConfigError("could not place " + std::to_string(n) +
                          " colors with separation " + std::to_string(cfg.min_color_separation));
      }
    }
  }
  for (std::size_t l = 1; l < n; ++l) {
    out.flows[l * 2 + 0] = rng.uniform(-cfg.max_flow, cfg.max_flow);
    out.flows[l * 2 + 1] = rng.uniform(-cfg.max_flow, cfg.max_flow);
  }
  return out;
}

SyntheticScene generate_scene(const DatasetConfig& cfg, const DatasetPalette& palette,
                              Rng& rng) {
  cfg.validate();
  const std::size_t H = cfg.height, W = cfg.width;

  SyntheticScene scene;
  scene.labels = LabelMap(H, W, 0);
  const std::size_t span = cfg.max_shapes - cfg.min_shapes + 1;
  for (int attempt = 0;; ++attempt) {
    const std::size_t shapes = cfg.min_shapes + rng.next_below(span);
    LabelMap candidate(H, W, 0);
    paint_shapes(cfg, candidate, shapes, rng);
    bool ok = true;
    for (std::size_t s = 1; s <= shapes; ++s) {
      if (!label_region_ok(candidate, static_cast<int>(s))) {
        ok = false;
        break;
      }
    }
    if (ok) {
      scene.labels = std::move(candidate);
      break;
    }
    if (attempt > 200) {
      throw NumericError("scene layout rejection did not converge; shapes too crowded");
    }
  }

  // Background texture: one low-frequency sinusoid with per-channel phase.
  const double fi = rng.uniform(0.04, 0.12);
  const double fj = rng.uniform(0.04, 0.12);
  double phase[3];
  for (double& p : phase) p = rng.uniform(0.0, kTau);

  scene.image = Tensor({H, W, 3});
  scene.flow = Tensor({H, W, 2});
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      const int l = scene.labels.at(i, j);
      const std::size_t lu = static_cast<std::size_t>(l);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = palette.colors[lu * 3 + c];
        if (l == 0 && cfg.texture_amplitude > 0.0) {
          v += cfg.texture_amplitude *
               std::sin(kTau * (fi * static_cast<double>(i) + fj * static_cast<double>(j)) +
                        phase[c]);
        }
        if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * rng.normal();
        scene.image(i, j, c) = std::min(1.0, std::max(0.0, v));
      }
      scene.flow(i, j, 0) = palette.flows[lu * 2 + 0];
      scene.flow(i, j, 1) = palette.flows[lu * 2 + 1];
    }
  }
  return scene;
}

SyntheticScene scene_at(const DatasetConfig& cfg, const DatasetPalette& palette,
                        std::size_t index) {
  Rng rng(cfg.seed + 1 + index);
  return generate_scene(cfg, palette, rng);
}

}  // namespace segaware
