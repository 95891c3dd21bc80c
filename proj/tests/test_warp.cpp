#include <gtest/gtest.h>

#include "segis/gradcheck.hpp"
#include "segis/warp.hpp"
#include "test_util.hpp"

using namespace segis;

namespace {

SamplingMap<double> shifted_map(const Dims& d, double sx, double sy, double sz) {
  return compose(AffineTransform::translation(sx, sy, sz), DisplacementField<double>::zeros(d));
}

}  // namespace

TEST(Compose, IdentityAndTranslation) {
  const Dims d{4, 3, 2, 3};
  const auto m = identity_map<double>(d);
  const auto t = shifted_map(d, 1.0, -2.0, 0.5);
  for (int z = 0; z < 2; ++z)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 4; ++x) {
        EXPECT_EQ(m.coords(x, y, z, 0), x);
        EXPECT_EQ(m.coords(x, y, z, 1), y);
        EXPECT_EQ(m.coords(x, y, z, 2), z);
        EXPECT_EQ(t.coords(x, y, z, 0), x + 1.0);
        EXPECT_EQ(t.coords(x, y, z, 1), y - 2.0);
        EXPECT_EQ(t.coords(x, y, z, 2), z + 0.5);
      }
}

TEST(Compose, IdentityAffineAddsDisplacement) {
  Rng rng(1);
  const Dims d{3, 4, 5, 3};
  DisplacementField<double> u(test::random_volume<double>(d, rng, -2, 2));
  const auto m = compose(AffineTransform::identity(), u);
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        EXPECT_DOUBLE_EQ(m.coords(x, y, z, 0), x + u.field(x, y, z, 0));
        EXPECT_DOUBLE_EQ(m.coords(x, y, z, 1), y + u.field(x, y, z, 1));
        EXPECT_DOUBLE_EQ(m.coords(x, y, z, 2), z + u.field(x, y, z, 2));
      }
}

TEST(Warp, IdentityIsExact) {
  Rng rng(2);
  const auto src = test::random_volume<float>(Dims{5, 4, 3, 2}, rng, -3, 3);
  EXPECT_EQ(trilinear_warp(src, identity_map<float>(src.dims())), src);
}

TEST(Warp, IntegerShiftMatchesArrayShift) {
  Rng rng(3);
  const auto src = test::random_volume<double>(Dims{6, 5, 4, 2}, rng);
  const auto out = trilinear_warp(src, shifted_map(src.dims(), 1, 0, 0));
  for (int c = 0; c < 2; ++c)
    for (int z = 0; z < 4; ++z)
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x + 1 < 6; ++x) EXPECT_DOUBLE_EQ(out(x, y, z, c), src(x + 1, y, z, c));
}

TEST(Warp, HalfVoxelOnRamp) {
  Volume<double> ramp(Dims{6, 2, 2, 1});
  for (int z = 0; z < 2; ++z)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 6; ++x) ramp(x, y, z) = x;
  const auto out = trilinear_warp(ramp, shifted_map(ramp.dims(), 0.5, 0, 0));
  for (int x = 0; x + 1 < 6; ++x) EXPECT_NEAR(out(x, 1, 1), x + 0.5, 1e-12);
  EXPECT_EQ(out(5, 0, 0), 5.0);  // clamped at the border
}

TEST(Warp, PreservesProbabilityBounds) {
  Rng rng(4);
  const Dims d{6, 6, 6, 2};
  const auto p = test::random_volume<float>(d, rng);
  DisplacementField<float> u(test::random_volume<float>(d.with_channels(3), rng, -4, 4));
  const auto w = trilinear_warp(p, compose(AffineTransform::identity(), u));
  for (float v : w.voxels()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(WarpGrad, IdentityUpstreamOnes) {
  Rng rng(5);
  const auto src = test::random_volume<double>(Dims{4, 4, 4, 1}, rng);
  const auto map = identity_map<double>(src.dims());
  const auto g = trilinear_warp_grad(src, map, Volume<double>(src.dims(), 1.0));
  for (int z = 1; z < 3; ++z)
    for (int y = 1; y < 3; ++y)
      for (int x = 1; x < 3; ++x) EXPECT_DOUBLE_EQ(g.grad_src(x, y, z), 1.0);
}

TEST(WarpGrad, ConstantSourceHasZeroMapGradient) {
  Rng rng(6);
  const Dims d{5, 5, 5, 1};
  DisplacementField<double> u(test::random_volume<double>(d.with_channels(3), rng, -1, 1));
  const auto map = compose(AffineTransform::identity(), u);
  const auto g = trilinear_warp_grad(Volume<double>(d, 3.0), map, test::random_volume<double>(d, rng));
  for (double v : g.grad_map.voxels()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(WarpGrad, ClampedAxisIsFrozen) {
  Rng rng(7);
  const Dims d{4, 4, 4, 1};
  const auto src = test::random_volume<double>(d, rng);
  const auto map = shifted_map(d, 10.0, 0.25, 0.25);
  const auto g = trilinear_warp_grad(src, map, Volume<double>(d, 1.0));
  for (std::size_t i = 0; i < d.spatial(); ++i) EXPECT_EQ(g.grad_map[i], 0.0);
}

TEST(WarpGrad, RandomCaseMatchesFiniteDifferences) {
  // 6^3, 64-bit, both gradients against central differences.
  Rng rng(8);
  const Dims d{6, 6, 6, 2};
  const auto src = test::random_volume<double>(d, rng, -1, 1);
  DisplacementField<double> u(test::random_volume<double>(d.with_channels(3), rng, -1.3, 1.3));
  const auto map = compose(AffineTransform::identity(), u);
  const auto up = test::random_volume<double>(d, rng, -1, 1);
  const auto g = trilinear_warp_grad(src, map, up);
  const auto loss = [&](const Volume<double>& s, const SamplingMap<double>& m) {
    const auto w = detail::pull(s, m);
    double acc = 0;
    for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * up[i];
    return acc;
  };
  const double h = 1e-5;
  double worst = 0.0;
  for (int t = 0; t < 40; ++t) {
    const std::size_t i = rng.below(src.size());
    auto a = src, b = src;
    a[i] += h;
    b[i] -= h;
    const double fd = (loss(a, map) - loss(b, map)) / (2 * h);
    worst = std::max(worst, std::abs(fd - g.grad_src[i]) / std::max({std::abs(fd), std::abs(g.grad_src[i]), 1e-3}));
    const std::size_t j = rng.below(map.coords.size());
    auto ma = map, mb = map;
    ma.coords[j] += h;
    mb.coords[j] -= h;
    const double fm = (loss(src, ma) - loss(src, mb)) / (2 * h);
    worst = std::max(worst, std::abs(fm - g.grad_map[j]) / std::max({std::abs(fm), std::abs(g.grad_map[j]), 1e-3}));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(AffineAlign, IdentityAndTranslation) {
  Rng rng(9);
  const auto src = test::random_volume<float>(Dims{6, 4, 4, 1}, rng);
  EXPECT_EQ(affine_align(src, AffineTransform::identity()), src);
  const auto t = affine_align(src, AffineTransform::translation(2, 0, 0));
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x + 2 < 6; ++x) EXPECT_EQ(t(x, y, z), src(x + 2, y, z));
}

TEST(AffineAlign, CompositeDiffersFromTwoStepWarp) {
  Rng rng(10);
  const Dims d{8, 8, 8, 1};
  const auto src = test::random_volume<double>(d, rng);
  const AffineTransform a({0.97, 0.1, 0, 0.3, -0.1, 1.02, 0, 0.4, 0, 0, 1, 0.2, 0, 0, 0, 1});
  DisplacementField<double> u(test::random_volume<double>(d.with_channels(3), rng, -0.7, 0.7));
  const auto once = trilinear_warp(src, compose(a, u));
  const auto twice = trilinear_warp(affine_align(src, a), compose(AffineTransform::identity(), u));
  double diff = 0;
  for (std::size_t i = 0; i < once.size(); ++i) diff = std::max(diff, std::abs(once[i] - twice[i]));
  EXPECT_GT(diff, 1e-3);
  const auto zero = DisplacementField<double>::zeros(d);
  EXPECT_EQ(trilinear_warp(src, compose(a, zero)), affine_align(src, a));
}

TEST(Compose, BackwardIsTransposeOfLinearPart) {
  Rng rng(11);
  const Dims d{3, 3, 3, 3};
  const AffineTransform a({1.1, 0.2, -0.1, 0, 0.05, 0.9, 0.3, 0, 0.2, 0, 1.2, 0, 0, 0, 0, 1});
  const auto gm = test::random_volume<double>(d, rng, -1, 1);
  DisplacementField<double> u(test::random_volume<double>(d, rng, -1, 1));
  DisplacementField<double> du(test::random_volume<double>(d, rng, -1, 1));
  // <gm, d map / du . du> == <A^T gm, du>
  const auto m0 = compose(a, u);
  DisplacementField<double> u1 = u;
  for (std::size_t i = 0; i < u1.field.size(); ++i) u1.field[i] += du.field[i];
  const auto m1 = compose(a, u1);
  double lhs = 0, rhs = 0;
  const auto gu = compose_backward(a, gm);
  for (std::size_t i = 0; i < gm.size(); ++i) {
    lhs += gm[i] * (m1.coords[i] - m0.coords[i]);
    rhs += gu.field[i] * du.field[i];
  }
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(WarpCounters, CountsEachCall) {
  warp_counters().reset();
  Rng rng(12);
  const auto src = test::random_volume<float>(Dims{4, 4, 4, 1}, rng);
  trilinear_warp(src, identity_map<float>(src.dims()));
  affine_align(src, AffineTransform::identity());
  EXPECT_EQ(warp_counters().warps.load(), 1u);
  EXPECT_EQ(warp_counters().affine_aligns.load(), 1u);
}
