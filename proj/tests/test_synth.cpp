#include <gtest/gtest.h>

#include <set>

#include "segis/synth.hpp"
#include "test_util.hpp"

using namespace segis;

namespace {

bool bitwise_equal(const Volume<float>& a, const Volume<float>& b) {
  return a.dims() == b.dims() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

SynthConfig quiet_config() {
  SynthConfig c;
  c.max_displacement = 0;
  c.rotation_deg = 0;
  c.translation_vox = 0;
  c.scale_jitter = 0;
  c.noise_std = 0;
  return c;
}

}  // namespace

TEST(Phantom, DeterministicPerSeed) {
  const SynthConfig cfg;
  const auto a = generate_phantom(cfg, 11), b = generate_phantom(cfg, 11), c = generate_phantom(cfg, 12);
  EXPECT_TRUE(bitwise_equal(a.tensor, b.tensor));
  EXPECT_TRUE(bitwise_equal(a.seg.volume(), b.seg.volume()));
  EXPECT_FALSE(bitwise_equal(a.tensor, c.tensor));
}

TEST(Phantom, ShapesAndOverlap) {
  const SynthConfig cfg;
  const auto p = generate_phantom(cfg, 7);
  EXPECT_EQ(p.seg.dims(), (Dims{24, 40, 24, 3}));
  EXPECT_EQ(p.tensor.channels(), 6);
  EXPECT_EQ(p.seg.kind(), SegKind::binary);
  const std::size_t n = p.seg.volume().spatial_size();
  int overlapping_pairs = 0;
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b) {
      std::size_t shared = 0;
      for (std::size_t i = 0; i < n; ++i) shared += p.seg.volume()[i + a * n] * p.seg.volume()[i + b * n] > 0;
      overlapping_pairs += shared > 0;
    }
  EXPECT_GE(overlapping_pairs, 1);
  for (int k = 0; k < 3; ++k) {
    double count = 0;
    for (float v : p.seg.volume().channel(k)) count += v;
    EXPECT_GT(count, 50) << k;
  }
  for (float v : p.fa.voxels()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Phantom, ZeroNoiseRegeneratesExactly) {
  auto cfg = quiet_config();
  const auto a = generate_phantom(cfg, 5), b = generate_phantom(cfg, 5);
  EXPECT_TRUE(bitwise_equal(a.tensor, b.tensor));
  cfg.noise_std = 0.05;
  EXPECT_FALSE(bitwise_equal(generate_phantom(cfg, 5).tensor, a.tensor));
}

TEST(Phantom, RejectsBadConfigs) {
  SynthConfig cfg;
  cfg.dims = Dims{8, 8, 8, 1};
  EXPECT_THROW(generate_phantom(cfg, 1), DataError);
  cfg = SynthConfig{};
  cfg.dims = Dims{26, 40, 24, 1};
  EXPECT_THROW(cfg.validate(), DataError);
  cfg = SynthConfig{};
  cfg.max_displacement = -1;
  EXPECT_THROW(cfg.validate(), DataError);
}

TEST(Deformation, ZeroAmplitudeAndIdentityAffine) {
  const auto d = generate_deformation(quiet_config(), 3);
  for (float v : d.u.field.voxels()) EXPECT_EQ(v, 0.0f);
  const auto id = AffineTransform::identity();
  for (int i = 0; i < 16; ++i) EXPECT_NEAR(d.affine.matrix()[i], id.matrix()[i], 1e-12);
}

TEST(Deformation, AmplitudeIsExactMaximum) {
  Rng rng(4);
  const auto u = smooth_random_field(Dims{24, 40, 24, 3}, 2.0, 3.0, rng);
  const std::size_t n = u.field.spatial_size();
  double mx = 0;
  for (std::size_t i = 0; i < n; ++i)
    mx = std::max(mx, std::hypot(double(u.field[i]), double(u.field[i + n]), double(u.field[i + 2 * n])));
  EXPECT_LE(mx, 3.0 + 1e-5);
  EXPECT_GT(mx, 3.0 - 1e-5);
}

TEST(Deformation, SmoothingReducesGradientEnergy) {
  const Dims g{24, 40, 24, 3};
  for (const double sigma : {2.0, 4.0}) {
    Rng rng(5);
    const auto smooth = smooth_random_field(g, sigma, 3.0, rng);
    // White noise rescaled to the same maximum amplitude.
    Volume<double> white(g);
    for (auto& v : white.voxels()) v = rng.normal();
    const std::size_t n = white.spatial_size();
    double mx = 0;
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, std::hypot(white[i], white[i + n], white[i + 2 * n]));
    for (auto& v : white.voxels()) v *= 3.0 / mx;
    Volume<double> sd(g);
    for (std::size_t i = 0; i < sd.size(); ++i) sd[i] = smooth.field[i];
    const double ratio = smoothness_loss(DisplacementField<double>(white)).value /
                         smoothness_loss(DisplacementField<double>(sd)).value;
    EXPECT_GE(ratio, 5.0) << sigma;
  }
}

TEST(MakePair, QuietConfigGivesIdenticalTimePoints) {
  const auto p = make_pair(quiet_config(), 9);
  EXPECT_TRUE(bitwise_equal(p.source.tensor, p.target.tensor));
  EXPECT_TRUE(bitwise_equal(p.source.seg.volume(), p.target.seg.volume()));
  EXPECT_EQ(p.check_dice, 1.0);
}

TEST(MakePair, ConstructionCheckAndDeterminism) {
  const SynthConfig cfg;
  const auto a = make_pair(cfg, 21), b = make_pair(cfg, 21);
  EXPECT_GE(a.check_dice, 0.95);
  EXPECT_TRUE(bitwise_equal(a.target.tensor, b.target.tensor));
  EXPECT_TRUE(bitwise_equal(a.u_gt.field, b.u_gt.field));
  // Noise is independent across time points: zero field and affine still
  // leave the images different.
  auto noisy = quiet_config();
  noisy.noise_std = 0.01;
  const auto q = make_pair(noisy, 21);
  EXPECT_FALSE(bitwise_equal(q.source.tensor, q.target.tensor));
  EXPECT_TRUE(bitwise_equal(q.source.seg.volume(), q.target.seg.volume()));
}

TEST(MakePair, ReverseSampleSwapsTimePoints) {
  const auto p = make_pair(SynthConfig{}, 2, "007", "subj_007");
  const auto f = to_train_sample(p), r = to_train_sample(p, true);
  EXPECT_EQ(f.id, "007");
  EXPECT_EQ(r.id, "007r");
  EXPECT_EQ(r.subject, f.subject);
  EXPECT_TRUE(bitwise_equal(f.img_s, r.img_t));
  EXPECT_TRUE(bitwise_equal(f.seg_t.volume(), r.seg_s.volume()));
  const auto prod = p.affine.inverse().matrix();
  const auto inv = r.affine.matrix();
  for (int i = 0; i < 16; ++i) EXPECT_DOUBLE_EQ(prod[i], inv[i]);
}

TEST(Dataset, SplitsSeedsAndRoundTrip) {
  DatasetSpec spec;
  spec.pairs = 8;
  spec.synth.dims = Dims{16, 24, 16, 1};
  const auto ds = generate_dataset(spec);
  EXPECT_EQ(ds.train.size() + ds.val.size() + ds.test.size(), 8u);
  EXPECT_EQ(ds.val.size(), 1u);
  EXPECT_EQ(ds.test.size(), 1u);
  std::set<std::uint64_t> seeds;
  for (const auto& p : ds.pairs) seeds.insert(p.seed);
  EXPECT_EQ(seeds.size(), 8u);
  const auto tr = ds.samples(ds.train), va = ds.samples(ds.val), te = ds.samples(ds.test);
  EXPECT_NO_THROW(check_split_hygiene<float>({&tr, &va, &te}));
  EXPECT_EQ(ds.samples(ds.train, true).size(), 2 * tr.size());

  const auto dir = test::scratch_dir("dataset");
  save_dataset(ds, dir);
  const auto back = load_dataset(dir);
  EXPECT_EQ(back.train, ds.train);
  EXPECT_EQ(back.test, ds.test);
  ASSERT_EQ(back.pairs.size(), ds.pairs.size());
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    EXPECT_TRUE(bitwise_equal(back.pairs[i].target.tensor, ds.pairs[i].target.tensor));
    EXPECT_TRUE(bitwise_equal(back.pairs[i].u_gt.field, ds.pairs[i].u_gt.field));
    EXPECT_EQ(back.pairs[i].seed, ds.pairs[i].seed);
  }
  // Re-saving reproduces the manifest byte for byte.
  const auto dir2 = test::scratch_dir("dataset2");
  save_dataset(back, dir2);
  EXPECT_EQ(detail::read_text(dir / "dataset.json"), detail::read_text(dir2 / "dataset.json"));
  EXPECT_THROW(load_dataset(test::scratch_dir("empty_dataset")), DataError);
}
