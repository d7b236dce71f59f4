#include <cmath>

#include "doctest.h"
#include "segaware/mask_ops.hpp"
#include "segaware/rng.hpp"
#include "support/checks.hpp"
#include "support/oracles.hpp"

using namespace segaware;
using testsupport::max_abs_diff;
using testsupport::naive_bilateral;
using testsupport::naive_conv2d;
using testsupport::naive_segaware_conv;
using testsupport::rel_err;

namespace {

Tensor random_field(std::vector<std::size_t> shape, Rng& rng, double bound = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

MaskField masks_from(const Tensor& emb, const PatchSpec& spec, double lambda,
                     Norm norm = Norm::L1) {
  return compute_masks(im2dist(emb, spec, norm), lambda, spec, norm);
}

ConvFilter random_filter(const PatchSpec& spec, std::size_t E, std::size_t F, Rng& rng,
                         bool bias = true) {
  ConvFilter f;
  f.spec = spec;
  f.weights = Tensor({spec.patch() * E, F});
  for (auto& v : f.weights.data) v = rng.uniform(-1.0, 1.0);
  f.has_bias = bias;
  f.bias = Tensor({F});
  if (bias)
    for (auto& v : f.bias.data) v = rng.uniform(-0.5, 0.5);
  return f;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

double min_pair_distance(const Tensor& emb, const PatchSpec& spec, Norm norm) {
  ColMatrix d = im2dist(emb, spec, norm);
  double lo = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < d.h * d.w; ++r)
    for (std::size_t k = 0; k < d.patch; ++k) {
      if (k == spec.center() || !d.is_valid(r, k)) continue;
      lo = std::min(lo, d.values(r, k));
    }
  return lo;
}

}  // namespace

TEST_CASE("compute_masks hand values") {
  PatchSpec spec{3, 3, 1};
  ColMatrix d = im2dist(Tensor::zeros({3, 3, 1}), spec, Norm::L1);
  // Overwrite one valid slot with ln 2 to hit the exp(-ln 2) = 0.5 case.
  d.values(4, 0) = std::log(2.0);
  MaskField m1 = compute_masks(d, 1.0, spec, Norm::L1);
  CHECK(m1.masks.values(4, 0) == doctest::Approx(0.5));
  CHECK(m1.masks.values(4, spec.center()) == 1.0);  // dist 0 -> 1 for any lambda

  MaskField m0 = compute_masks(d, 0.0, spec, Norm::L1);
  for (std::size_t r = 0; r < 9; ++r)
    for (std::size_t k = 0; k < 9; ++k) {
      if (m0.masks.is_valid(r, k)) {
        CHECK(m0.masks.values(r, k) == 1.0);
      } else {
        CHECK(m0.masks.values(r, k) == 0.0);
      }
    }
}

TEST_CASE("negative lambda is projected to zero and counted") {
  PatchSpec spec{3, 3, 1};
  Rng rng(401);
  Tensor emb = random_field({4, 4, 2}, rng);
  ColMatrix d = im2dist(emb, spec, Norm::L1);
  const std::size_t before = negative_lambda_warnings();
  MaskField m = compute_masks(d, -2.0, spec, Norm::L1);
  CHECK(negative_lambda_warnings() == before + 1);
  CHECK(m.lambda == 0.0);
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t k = 0; k < 9; ++k)
      if (m.masks.is_valid(r, k)) CHECK(m.masks.values(r, k) == 1.0);
}

TEST_CASE("masks stay in [0,1] with center exactly 1") {
  Rng rng(403);
  PatchSpec spec{5, 5, 2};
  Tensor emb = random_field({7, 7, 3}, rng, 3.0);
  MaskField m = masks_from(emb, spec, 1.7);
  for (std::size_t r = 0; r < 49; ++r) {
    CHECK(m.masks.values(r, spec.center()) == 1.0);
    for (std::size_t k = 0; k < m.masks.patch; ++k) {
      CHECK(m.masks.values(r, k) >= 0.0);
      CHECK(m.masks.values(r, k) <= 1.0);
    }
  }
}

TEST_CASE("raising lambda never raises a non-center mask") {
  Rng rng(405);
  PatchSpec spec{3, 3, 1};
  Tensor emb = random_field({5, 5, 2}, rng);
  MaskField lo = masks_from(emb, spec, 0.5);
  MaskField hi = masks_from(emb, spec, 2.5);
  for (std::size_t i = 0; i < lo.masks.values.data.size(); ++i) {
    CHECK(hi.masks.values.data[i] <= lo.masks.values.data[i] + 1e-15);
  }
}

TEST_CASE("bilateral filter preserves constant inputs") {
  Rng rng(407);
  PatchSpec spec{3, 3, 1};
  Tensor emb = random_field({5, 5, 2}, rng);
  MaskField m = masks_from(emb, spec, 1.0);
  Tensor x = Tensor::full({5, 5, 3}, 0.73);
  Tensor y = bilateral_filter(x, m);
  for (double v : y.data) CHECK(v == doctest::Approx(0.73).epsilon(1e-12));
}

TEST_CASE("high lambda on a banded embedding averages only the same band") {
  // Rows have embeddings 0/1/2; with lambda large the center pixel's mask
  // keeps only its own row, so the output is that row's mean.
  Tensor emb = Tensor::from({3, 3, 1}, {0, 0, 0, 1, 1, 1, 2, 2, 2});
  PatchSpec spec{3, 3, 1};
  Rng rng(409);
  Tensor x = random_field({3, 3, 1}, rng);
  MaskField m = masks_from(emb, spec, 60.0);
  Tensor y = bilateral_filter(x, m);
  const double want = (x(1, 0, 0) + x(1, 1, 0) + x(1, 2, 0)) / 3.0;
  CHECK(y(1, 1, 0) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("lambda 0 turns the bilateral filter into a box average") {
  Rng rng(411);
  PatchSpec spec{3, 3, 1};
  Tensor emb = random_field({5, 5, 2}, rng);
  MaskField m = masks_from(emb, spec, 0.0);
  Tensor x = random_field({5, 5, 1}, rng);
  Tensor y = bilateral_filter(x, m);
  double box = 0.0;
  for (std::size_t di = 1; di <= 3; ++di)
    for (std::size_t dj = 1; dj <= 3; ++dj) box += x(di, dj, 0);
  box /= 9.0;
  CHECK(y(2, 2, 0) == doctest::Approx(box).epsilon(1e-12));
}

TEST_CASE("bilateral matches the definitional oracle") {
  Rng rng(413);
  PatchSpec spec{3, 3, 2};
  Tensor emb = random_field({6, 7, 3}, rng);
  MaskField m = masks_from(emb, spec, 1.3);
  Tensor x = random_field({6, 7, 4}, rng);
  CHECK(max_abs_diff(bilateral_filter(x, m), naive_bilateral(x, m)) <= 1e-12);
}

TEST_CASE("all-ones single-channel filter reproduces the bilateral filter bitwise") {
  // With one channel and one filter the GEMM reduces over the same masked
  // columns in the same ascending order, so the outputs must be identical
  // bit for bit, not merely close.
  Rng rng(415);
  PatchSpec spec{3, 3, 1};
  Tensor emb = random_field({6, 6, 2}, rng);
  MaskField m = masks_from(emb, spec, 0.9);
  Tensor x = random_field({6, 6, 1}, rng);
  ConvFilter ones;
  ones.spec = spec;
  ones.weights = Tensor::full({9, 1}, 1.0);
  ones.has_bias = false;
  Tensor via_conv = segaware_conv(x, m, ones);
  Tensor via_bf = bilateral_filter(x, m);
  for (std::size_t i = 0; i < via_bf.data.size(); ++i) {
    CHECK(via_conv.data[i] == via_bf.data[i]);
  }
}

TEST_CASE("lambda 0 with a center one-hot filter scales interior pixels by 1/9") {
  Rng rng(417);
  PatchSpec spec{3, 3, 1};
  Tensor emb = random_field({5, 5, 2}, rng);
  MaskField m = masks_from(emb, spec, 0.0);
  Tensor x = random_field({5, 5, 1}, rng);
  ConvFilter onehot;
  onehot.spec = spec;
  onehot.weights = Tensor::zeros({9, 1});
  onehot.weights(spec.center(), 0) = 1.0;
  onehot.has_bias = false;
  Tensor y = segaware_conv(x, m, onehot);
  CHECK(y(2, 2, 0) == doctest::Approx(x(2, 2, 0) / 9.0).epsilon(1e-12));
}

TEST_CASE("segaware_conv matches the quintuple-loop oracle") {
  Rng rng(419);
  PatchSpec spec{3, 3, 1};
  Tensor emb = random_field({6, 6, 3}, rng);
  MaskField m = masks_from(emb, spec, 1.1);
  Tensor x = random_field({6, 6, 3}, rng);
  ConvFilter f = random_filter(spec, 3, 4, rng);
  CHECK(max_abs_diff(segaware_conv(x, m, f), naive_segaware_conv(x, m, f)) <= 1e-12);
}

TEST_CASE("all-ones masks reduce segaware_conv to conv2d over valid count") {
  Rng rng(421);
  PatchSpec spec{3, 3, 1};
  Tensor emb = random_field({6, 5, 2}, rng);
  MaskField m = masks_from(emb, spec, 0.0);  // lambda 0 -> every valid mask 1
  Tensor x = random_field({6, 5, 3}, rng);
  ConvFilter f = random_filter(spec, 3, 2, rng, /*bias=*/false);
  Tensor seg = segaware_conv(x, m, f);
  Tensor plain = conv2d(x, f);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double count = 0.0;
      for (std::size_t k = 0; k < 9; ++k)
        count += m.masks.is_valid(i * 5 + j, k) ? 1.0 : 0.0;
      for (std::size_t ff = 0; ff < 2; ++ff) {
        CHECK(std::abs(seg(i, j, ff) - plain(i, j, ff) / count) <= 1e-12);
      }
    }
}

TEST_CASE("coordinate embeddings under L2 give isotropic monotone masks") {
  const std::size_t H = 9, W = 9;
  Tensor emb({H, W, 2});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      emb(i, j, 0) = static_cast<double>(i);
      emb(i, j, 1) = static_cast<double>(j);
    }
  PatchSpec spec{5, 5, 1};
  MaskField m = masks_from(emb, spec, 0.8, Norm::L2);
  // Interior pixels all see the same kernel...
  const std::size_t K = spec.patch();
  const std::size_t p0 = 4 * W + 4;
  for (std::size_t i = 2; i < H - 2; ++i)
    for (std::size_t j = 2; j < W - 2; ++j)
      for (std::size_t k = 0; k < K; ++k)
        CHECK(m.masks.values(i * W + j, k) == doctest::Approx(m.masks.values(p0, k)).epsilon(1e-14));
  // ...that depends only on the offset radius and decreases with it.
  for (std::size_t ka = 0; ka < K; ++ka)
    for (std::size_t kb = 0; kb < K; ++kb) {
      const double ra = std::hypot(static_cast<double>(spec.row_offset(ka)),
                                   static_cast<double>(spec.col_offset(ka)));
      const double rb = std::hypot(static_cast<double>(spec.row_offset(kb)),
                                   static_cast<double>(spec.col_offset(kb)));
      if (std::abs(ra - rb) < 1e-12) {
        CHECK(m.masks.values(p0, ka) == doctest::Approx(m.masks.values(p0, kb)).epsilon(1e-14));
      } else if (ra < rb) {
        CHECK(m.masks.values(p0, ka) > m.masks.values(p0, kb));
      }
    }
}

TEST_CASE("segaware_conv_backward gradients match finite differences") {
  PatchSpec spec{3, 3, 1};
  const Norm norm = Norm::L2;
  const double h = 1e-5;
  Tensor emb;
  std::uint64_t seed = 423;
  do {
    Rng rng(seed++);
    emb = random_field({5, 5, 2}, rng);
  } while (min_pair_distance(emb, spec, norm) < 1e-3);
  Rng rng(431);
  Tensor x = random_field({5, 5, 2}, rng);
  ConvFilter f = random_filter(spec, 2, 3, rng);
  const double lambda = 0.8;
  Tensor R = random_field({5, 5, 3}, rng);  // random projection: scalar loss <y, R>

  MaskField m = masks_from(emb, spec, lambda, norm);
  SegawareConvGrads g = segaware_conv_backward(R, x, m, f, emb);

  auto loss_at = [&](const Tensor& emb_, const Tensor& x_, const ConvFilter& f_,
                     double lambda_) {
    MaskField mm = masks_from(emb_, spec, lambda_, norm);
    return dot(segaware_conv(x_, mm, f_), R);
  };

  SUBCASE("grad_weights") {
    double worst = 0.0;
    for (std::size_t i = 0; i < f.weights.data.size(); ++i) {
      ConvFilter fp = f, fm = f;
      fp.weights.data[i] += h;
      fm.weights.data[i] -= h;
      const double num = (loss_at(emb, x, fp, lambda) - loss_at(emb, x, fm, lambda)) / (2 * h);
      worst = std::max(worst, rel_err(num, g.grad_weights.data[i]));
    }
    CHECK(worst < 1e-6);
  }
  SUBCASE("grad_bias") {
    double worst = 0.0;
    for (std::size_t i = 0; i < f.bias.data.size(); ++i) {
      ConvFilter fp = f, fm = f;
      fp.bias.data[i] += h;
      fm.bias.data[i] -= h;
      const double num = (loss_at(emb, x, fp, lambda) - loss_at(emb, x, fm, lambda)) / (2 * h);
      worst = std::max(worst, rel_err(num, g.grad_bias.data[i]));
    }
    CHECK(worst < 1e-6);
  }
  SUBCASE("grad_x") {
    double worst = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      Tensor xp = x, xm = x;
      xp.data[i] += h;
      xm.data[i] -= h;
      const double num = (loss_at(emb, xp, f, lambda) - loss_at(emb, xm, f, lambda)) / (2 * h);
      worst = std::max(worst, rel_err(num, g.grad_x.data[i]));
    }
    CHECK(worst < 1e-6);
  }
  SUBCASE("grad_emb") {
    double worst = 0.0;
    for (std::size_t i = 0; i < emb.data.size(); ++i) {
      Tensor ep = emb, em2 = emb;
      ep.data[i] += h;
      em2.data[i] -= h;
      const double num = (loss_at(ep, x, f, lambda) - loss_at(em2, x, f, lambda)) / (2 * h);
      worst = std::max(worst, rel_err(num, g.grad_emb.data[i]));
    }
    CHECK(worst < 1e-6);
  }
  SUBCASE("grad_lambda") {
    const double num =
        (loss_at(emb, x, f, lambda + h) - loss_at(emb, x, f, lambda - h)) / (2 * h);
    CHECK(rel_err(num, g.grad_lambda) < 1e-6);
  }
}

TEST_CASE("grad_lambda is exactly zero for constant embeddings") {
  PatchSpec spec{3, 3, 1};
  Tensor emb = Tensor::full({4, 4, 2}, 0.5);
  MaskField m = masks_from(emb, spec, 0.0);
  Rng rng(433);
  Tensor x = random_field({4, 4, 2}, rng);
  ConvFilter f = random_filter(spec, 2, 2, rng);
  Tensor gy = random_field({4, 4, 2}, rng);
  SegawareConvGrads g = segaware_conv_backward(gy, x, m, f, emb);
  CHECK(g.grad_lambda == 0.0);
  // Numerical cross-check: masks are exp(-lambda*0) = 1 for any lambda.
  MaskField m_hi = masks_from(emb, spec, 0.1);
  CHECK(max_abs_diff(segaware_conv(x, m, f), segaware_conv(x, m_hi, f)) == 0.0);
}

TEST_CASE("bilateral_filter_backward matches finite differences") {
  PatchSpec spec{3, 3, 1};
  const Norm norm = Norm::L2;
  const double h = 1e-5;
  Tensor emb;
  std::uint64_t seed = 437;
  do {
    Rng rng(seed++);
    emb = random_field({5, 4, 2}, rng);
  } while (min_pair_distance(emb, spec, norm) < 1e-3);
  Rng rng(439);
  Tensor x = random_field({5, 4, 3}, rng);
  Tensor R = random_field({5, 4, 3}, rng);
  const double lambda = 1.2;

  MaskField m = masks_from(emb, spec, lambda, norm);
  BilateralGrads g = bilateral_filter_backward(R, x, m, emb);

  auto loss_at = [&](const Tensor& emb_, const Tensor& x_, double lambda_) {
    MaskField mm = masks_from(emb_, spec, lambda_, norm);
    return dot(bilateral_filter(x_, mm), R);
  };

  double worst_x = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    Tensor xp = x, xm = x;
    xp.data[i] += h;
    xm.data[i] -= h;
    worst_x = std::max(worst_x, rel_err((loss_at(emb, xp, lambda) - loss_at(emb, xm, lambda)) / (2 * h),
                                        g.grad_x.data[i]));
  }
  CHECK(worst_x < 1e-6);

  double worst_e = 0.0;
  for (std::size_t i = 0; i < emb.data.size(); ++i) {
    Tensor ep = emb, em2 = emb;
    ep.data[i] += h;
    em2.data[i] -= h;
    worst_e = std::max(worst_e, rel_err((loss_at(ep, x, lambda) - loss_at(em2, x, lambda)) / (2 * h),
                                        g.grad_emb.data[i]));
  }
  CHECK(worst_e < 1e-6);

  const double num = (loss_at(emb, x, lambda + h) - loss_at(emb, x, lambda - h)) / (2 * h);
  CHECK(rel_err(num, g.grad_lambda) < 1e-6);
}

TEST_CASE("conv2d matches its oracle and its backward passes FD") {
  Rng rng(443);
  PatchSpec spec{3, 3, 2};
  Tensor x = random_field({6, 6, 3}, rng);
  ConvFilter f = random_filter(spec, 3, 4, rng);
  CHECK(max_abs_diff(conv2d(x, f), naive_conv2d(x, f)) <= 1e-12);

  Tensor R = random_field({6, 6, 4}, rng);
  Conv2dGrads g = conv2d_backward(R, x, f);
  const double h = 1e-5;
  auto loss_at = [&](const Tensor& x_, const ConvFilter& f_) { return dot(conv2d(x_, f_), R); };
  double worst = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    Tensor xp = x, xm = x;
    xp.data[i] += h;
    xm.data[i] -= h;
    worst = std::max(worst, rel_err((loss_at(xp, f) - loss_at(xm, f)) / (2 * h), g.grad_x.data[i]));
  }
  for (std::size_t i = 0; i < f.weights.data.size(); ++i) {
    ConvFilter fp = f, fm = f;
    fp.weights.data[i] += h;
    fm.weights.data[i] -= h;
    worst = std::max(worst, rel_err((loss_at(x, fp) - loss_at(x, fm)) / (2 * h),
                                    g.grad_weights.data[i]));
  }
  CHECK(worst < 1e-8);  // purely linear op: central differences are near-exact
}

TEST_CASE("spec mismatches are rejected") {
  Rng rng(449);
  Tensor emb = random_field({4, 4, 2}, rng);
  Tensor x = random_field({4, 4, 2}, rng);
  MaskField m = masks_from(emb, PatchSpec{3, 3, 1}, 1.0);
  ConvFilter f = random_filter(PatchSpec{3, 3, 2}, 2, 2, rng);  // different atrous
  CHECK_THROWS_AS(segaware_conv(x, m, f), ConfigError);
  ConvFilter bad = random_filter(PatchSpec{3, 3, 1}, 3, 2, rng);  // wrong channel count
  CHECK_THROWS_AS(segaware_conv(x, m, bad), ConfigError);
}
