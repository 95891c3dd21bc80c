#include <gtest/gtest.h>

#include "segis/trainer.hpp"
#include "test_util.hpp"

using namespace segis;

namespace {

// Small self-consistent sample: target is the source shifted by one voxel.
TrainSample<float> toy_sample(std::uint64_t seed, const std::string& subject, const NetworkConfig& cfg, const Dims& g) {
  Rng rng(seed);
  TrainSample<float> s;
  s.id = subject + "_p";
  s.subject = subject;
  s.img_s = normalize_image(test::random_volume<float>(g, rng));
  s.affine = AffineTransform::translation(rng.uniform(-0.5, 0.5), 0, 0);
  s.img_t = trilinear_warp(s.img_s, compose(s.affine, DisplacementField<float>::zeros(g)));
  s.seg_img_s = normalize_image(test::random_volume<float>(g.with_channels(cfg.image_channels), rng));
  Volume<float> seg(g.with_channels(cfg.structures));
  for (int k = 0; k < cfg.structures; ++k)
    for (int z = 2; z < g.z - 2; ++z)
      for (int y = 2; y < g.y - 2; ++y)
        for (int x = 1 + k; x < g.x / 2 + k; ++x) seg(x, y, z, k) = 1.0f;
  s.seg_s = SegmentationSet<float>(seg, SegKind::binary);
  s.seg_t = s.seg_s;
  return s;
}

TrainConfig toy_train_config(TrainMode mode) {
  auto c = TrainConfig::defaults_for(mode);
  c.network = {2, 2, 1, 4};
  c.seed = 3;
  return c;
}

const Dims kGrid{8, 8, 8, 1};

Volume<double> to_double(const Volume<float>& v) {
  Volume<double> out(v.dims());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i];
  return out;
}

}  // namespace

TEST(Adam, ZeroGradientKeepsParameters) {
  std::vector<double> p{1.0, -2.0}, g{0.0, 0.0}, m{0.0, 0.0}, v{0.0, 0.0};
  for (int t = 1; t <= 3; ++t) adam_update<double>(p, g, m, v, t, 1e-3);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], -2.0);
}

TEST(Adam, FirstStepClosedForm) {
  std::vector<double> p{0.0}, g{1.0}, m{0.0}, v{0.0};
  adam_update<double>(p, g, m, v, 1, 1e-3);
  EXPECT_NEAR(p[0], -1e-3 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p[0], -9.99999e-4, 1e-9);
}

TEST(Adam, TwoStepsDifferFromOneDoubledStep) {
  std::vector<double> a{0.0}, g{1.0}, ma{0.0}, va{0.0};
  adam_update<double>(a, g, ma, va, 1, 1e-3);
  g[0] = 1.0 + a[0];
  adam_update<double>(a, g, ma, va, 2, 1e-3);
  std::vector<double> b{0.0}, gb{1.0}, mb{0.0}, vb{0.0};
  adam_update<double>(b, gb, mb, vb, 1, 2e-3);
  EXPECT_NE(a[0], b[0]);
  EXPECT_THROW(adam_update<double>(a, std::vector<double>{1, 2}, ma, va, 3, 1e-3), std::invalid_argument);
}

TEST(LrDecay, PlateauRule) {
  TrainConfig cfg;
  std::vector<double> h{1.0};
  for (int i = 0; i < 10; ++i) h.push_back(2.0);
  EXPECT_DOUBLE_EQ(lr_decay_check(h, 1e-3, cfg), 8e-4);
  std::vector<double> improving{5, 4, 4.5, 4.6, 4.7, 4.8, 4.9, 5, 5.1, 3.9};
  EXPECT_EQ(lr_decay_check(improving, 1e-3, cfg), 1e-3);
  // Second trigger after another ten stagnant epochs.
  double lr = 1e-3;
  std::vector<double> hist{1.0};
  for (int i = 0; i < 20; ++i) {
    hist.push_back(2.0);
    lr = lr_decay_check(hist, lr, cfg);
  }
  EXPECT_DOUBLE_EQ(lr, 0.64e-3);
}

TEST(EarlyStop, RuleTrace) {
  const std::vector<double> h{3, 2, 2.1, 2.2, 2.3, 2.4, 2.5};
  EXPECT_TRUE(should_stop_early(h, 5));
  EXPECT_FALSE(should_stop_early({3, 2, 2.1, 2.2, 2.3, 2.4}, 5));
  EXPECT_EQ(best_epoch(h), 1u);  // the second epoch
  const std::vector<std::string> ck{"e0", "e1", "e2", "e3", "e4", "e5", "e6"};
  EXPECT_EQ(early_stop_and_select(h, ck), "e1");

  const std::vector<double> mono{5, 4, 3, 2, 1};
  EXPECT_FALSE(should_stop_early(mono, 5));
  EXPECT_EQ(best_epoch(mono), 4u);
  EXPECT_EQ(best_epoch({7.0}), 0u);
}

TEST(SplitHygiene, LeakageIsRejected) {
  const NetworkConfig nc{2, 2, 1, 4};
  Dataset<float> a{toy_sample(1, "s1", nc, kGrid)}, b{toy_sample(2, "s2", nc, kGrid)}, c{toy_sample(3, "s1", nc, kGrid)};
  EXPECT_NO_THROW(check_split_hygiene<float>({&a, &b}));
  EXPECT_THROW(check_split_hygiene<float>({&a, &b, &c}), DataError);
  EXPECT_THROW(train(a, c, toy_train_config(TrainMode::joint)), DataError);
}

TEST(TrainEpoch, EmptyDatasetAndConfigErrors) {
  TrainState<float> st(init_network<float>(NetworkConfig{2, 2, 1, 4}, 1));
  EXPECT_THROW(train_epoch(Dataset<float>{}, st, toy_train_config(TrainMode::joint), 0, 1e-3), DataError);
  auto bad = toy_train_config(TrainMode::joint);
  bad.lr0 = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = toy_train_config(TrainMode::joint);
  bad.early_stop_patience = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(TrainEpoch, SingleSampleOverfits) {
  const auto cfg = toy_train_config(TrainMode::joint);
  const Dataset<float> data{toy_sample(4, "s", cfg.network, kGrid)};
  TrainState<float> st(init_network<float>(cfg.network, cfg.seed));
  const double before = validation_loss(data, st.net, cfg).total;
  for (int e = 0; e < 50; ++e) train_epoch(data, st, cfg, e, cfg.lr0);
  EXPECT_LT(validation_loss(data, st.net, cfg).total, before);
}

TEST(ComputeStep, SingleInterpolationPerWarpedOutput) {
  const auto cfg = toy_train_config(TrainMode::joint);
  const auto s = toy_sample(5, "s", cfg.network, kGrid);
  const auto net = init_network<float>(cfg.network, 1);
  warp_counters().reset();
  compute_step(s, net, TrainMode::joint, weights_for(TrainMode::joint, cfg.schedule, 0));
  // Image and predicted segmentation each warped once; one affine pre-alignment.
  EXPECT_EQ(warp_counters().warps.load(), 2u);
  EXPECT_EQ(warp_counters().affine_aligns.load(), 1u);
}

TEST(ComputeStep, CompositeTermReachesBothStreams) {
  const auto cfg = toy_train_config(TrainMode::joint);
  const auto s = toy_sample(6, "s", cfg.network, kGrid);
  const auto net = init_network<float>(cfg.network, 2);
  const auto with = compute_step(s, net, TrainMode::joint, TermWeights{1, 10, 0.1, 1});
  const auto without = compute_step(s, net, TrainMode::joint, TermWeights{1, 10, 0.1, 0});
  const auto differs = [](const Stream<float>::Params& a, const Stream<float>::Params& b) {
    for (std::size_t l = 0; l < a.size(); ++l)
      for (std::size_t i = 0; i < a[l].kernels.size(); ++i)
        if (a[l].kernels[i] != b[l].kernels[i]) return true;
    return false;
  };
  EXPECT_TRUE(differs(with.theta_grads, without.theta_grads));
  EXPECT_TRUE(differs(with.psi_grads, without.psi_grads));
}

TEST(ComputeStep, GammaZeroJointEqualsRegOnly) {
  // Double precision: with gamma = 0 the psi gradients of joint mode are the
  // reg-only gradients.
  NetworkConfig nc{2, 2, 1, 4};
  const auto sf = toy_sample(7, "s", nc, kGrid);
  TrainSample<double> s{sf.id, sf.subject, to_double(sf.img_s), to_double(sf.img_t), to_double(sf.seg_img_s),
                        SegmentationSet<double>(to_double(sf.seg_s.volume()), SegKind::binary),
                        SegmentationSet<double>(to_double(sf.seg_t.volume()), SegKind::binary), sf.affine};
  const auto net = init_network<double>(nc, 9);
  const TermWeights joint{1.0, 10.0, 0.1, 0.0}, reg{0.0, 10.0, 0.1, 0.0};
  const auto a = compute_step(s, net, TrainMode::joint, joint);
  const auto b = compute_step(s, net, TrainMode::reg_only, reg);
  ASSERT_EQ(a.psi_grads.size(), b.psi_grads.size());
  double worst = 0;
  for (std::size_t l = 0; l < a.psi_grads.size(); ++l)
    for (std::size_t i = 0; i < a.psi_grads[l].kernels.size(); ++i)
      worst = std::max(worst, std::abs(a.psi_grads[l].kernels[i] - b.psi_grads[l].kernels[i]));
  EXPECT_LE(worst, 1e-10);
  EXPECT_TRUE(b.theta_grads.empty());
}

TEST(Modes, WeightsPerMode) {
  const WeightSchedule s;
  const auto j = weights_for(TrainMode::joint, s, 2);
  EXPECT_EQ(j.alpha, 18.0);
  EXPECT_EQ(j.gamma, 1.0);
  const auto g = weights_for(TrainMode::seg_only, s, 2);
  EXPECT_EQ(g.alpha + g.beta + g.gamma, 0.0);
  const auto r = weights_for(TrainMode::reg_only, s, 2);
  EXPECT_EQ(r.seg, 0.0);
  EXPECT_EQ(r.gamma, 0.0);
  EXPECT_EQ(TrainConfig::defaults_for(TrainMode::reg_only).lr0, 1e-4);
  EXPECT_EQ(TrainConfig::defaults_for(TrainMode::seg_only).lr0, 1e-3);
  EXPECT_EQ(train_mode_from_string("reg"), TrainMode::reg_only);
  EXPECT_THROW(train_mode_from_string("both"), std::invalid_argument);
}

TEST(Train, DeterministicLogsAndArtifacts) {
  auto cfg = toy_train_config(TrainMode::joint);
  cfg.epochs_max = 3;
  const Dataset<float> tr{toy_sample(10, "a", cfg.network, kGrid), toy_sample(11, "b", cfg.network, kGrid)};
  const Dataset<float> va{toy_sample(12, "c", cfg.network, kGrid)};
  const auto d1 = test::scratch_dir("train1"), d2 = test::scratch_dir("train2");
  const auto r1 = train(tr, va, cfg, d1);
  const auto r2 = train(tr, va, cfg, d2);
  for (const char* f : {"train_log.csv", "val_log.csv", "summary.json"})
    EXPECT_EQ(detail::read_text(d1 / f), detail::read_text(d2 / f)) << f;
  EXPECT_EQ(r1.epochs_run, 3);
  EXPECT_TRUE(std::filesystem::exists(d1 / "checkpoint_best.json"));
  EXPECT_TRUE(std::filesystem::exists(d1 / "checkpoint_last.json"));
  // Logged alpha is the non-decreasing training schedule.
  for (std::size_t i = 1; i < r1.val_log.size(); ++i) EXPECT_GE(r1.val_log[i].alpha, r1.val_log[i - 1].alpha);
  const auto text = detail::read_text(d1 / "train_log.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')), "epoch,sample,l_seg,l_reg,l_def,l_com,alpha,beta,gamma,total");
}

TEST(Train, SamplesPerEpochCapsSteps) {
  auto cfg = toy_train_config(TrainMode::seg_only);
  cfg.samples_per_epoch = 1;
  const Dataset<float> tr{toy_sample(13, "a", cfg.network, kGrid), toy_sample(14, "b", cfg.network, kGrid)};
  TrainState<float> st(init_network<float>(cfg.network, 1));
  std::vector<SampleLog> log;
  train_epoch(tr, st, cfg, 0, cfg.lr0, &log);
  EXPECT_EQ(log.size(), 1u);
}

TEST(Train, SegOnlyAndJointShareThetaInit) {
  const auto a = init_network<float>(toy_train_config(TrainMode::seg_only).network, 3);
  const auto b = init_network<float>(toy_train_config(TrainMode::joint).network, 3);
  EXPECT_EQ(a.theta.params()[0].kernels, b.theta.params()[0].kernels);
}
