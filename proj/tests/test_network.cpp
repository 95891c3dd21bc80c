#include <gtest/gtest.h>

#include "segis/checkpoint.hpp"
#include "segis/gradcheck.hpp"
#include "segis/network.hpp"
#include "test_util.hpp"

using namespace segis;

namespace {

NetworkConfig toy_config() { return {2, 2, 2, 4}; }

double weighted_sum(const Volume<double>& v, const Volume<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * w[i];
  return s;
}

}  // namespace

TEST(Network, SegShapeBoundsAndDeterminism) {
  const NetworkConfig cfg;  // desk-scale default: 6 image channels, K = 3
  const auto net = init_network<float>(cfg, 7);
  Rng rng(1);
  const auto img = test::random_volume<float>(Dims{24, 40, 24, 6}, rng, -2, 2);
  const auto s = seg_forward(net.theta, img);
  EXPECT_EQ(s.dims(), (Dims{24, 40, 24, 3}));
  EXPECT_EQ(s.kind(), SegKind::probabilistic);
  for (float v : s.volume().voxels()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
  const auto again = seg_forward(init_network<float>(cfg, 7).theta, img);
  EXPECT_EQ(std::memcmp(again.volume().data(), s.volume().data(), s.volume().size() * 4), 0);
}

TEST(Network, RegShapeAndZeroHead) {
  const NetworkConfig cfg;
  auto net = init_network<float>(cfg, 7);
  Rng rng(2);
  const auto a = test::random_volume<float>(Dims{24, 40, 24, 1}, rng);
  const auto b = test::random_volume<float>(Dims{24, 40, 24, 1}, rng);
  EXPECT_EQ(reg_forward(net.psi, a, b).dims(), (Dims{24, 40, 24, 3}));
  auto& head = net.psi.mutable_params().back();
  std::fill(head.kernels.begin(), head.kernels.end(), 0.0f);
  std::fill(head.bias.begin(), head.bias.end(), 0.0f);
  const auto zero = reg_forward(net.psi, a, b);
  for (float v : zero.field.voxels()) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(reg_forward(net.psi, a, test::random_volume<float>(Dims{24, 40, 16, 1}, rng)), DataError);
  EXPECT_THROW(seg_forward(net.theta, a), DataError);
}

TEST(Network, ArchitectureContract) {
  const NetworkConfig cfg{6, 3, 2, 8};
  const auto net = init_network<float>(cfg, 1);
  const auto& th = net.theta.params();
  // Encoder starts at base width, bottleneck at base * 2^depth.
  EXPECT_EQ(th[0].out_channels, 8);
  EXPECT_EQ(th[4].out_channels, 32);
  // Decoder units take upsampled + skip channels.
  EXPECT_EQ(th[6].in_channels, 32 + 16);
  EXPECT_EQ(th[8].in_channels, 16 + 8);
  // One (unit, 1^3 sigmoid) sub-branch per structure.
  ASSERT_EQ(th.size(), 10u + 2 * 3);
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(th[11 + 2 * k].ksize, 1);
    EXPECT_EQ(th[11 + 2 * k].out_channels, 1);
    EXPECT_EQ(th[11 + 2 * k].activation, Activation::sigmoid);
  }
  const auto& ps = net.psi.params();
  EXPECT_EQ(ps.front().in_channels, 2);
  EXPECT_EQ(ps.back().out_channels, 3);
  EXPECT_EQ(ps.back().activation, Activation::linear);

  // Bottleneck spatial dims are input / 2^depth.
  StreamTape<float> tape;
  Rng rng(3);
  seg_forward(net.theta, test::random_volume<float>(Dims{16, 8, 8, 6}, rng), &tape);
  EXPECT_EQ(tape.units[4].input.dims(), (Dims{4, 2, 2, 16}));
  EXPECT_THROW(seg_forward(net.theta, test::random_volume<float>(Dims{10, 8, 8, 6}, rng)), DataError);
}

TEST(Network, SeedsAreSharedAcrossModes) {
  const auto a = init_network<float>(NetworkConfig{}, 99);
  const auto b = init_network<float>(NetworkConfig{}, 99);
  EXPECT_EQ(a.theta.params()[3].kernels, b.theta.params()[3].kernels);
  EXPECT_NE(a.theta.params()[0].kernels, init_network<float>(NetworkConfig{}, 98).theta.params()[0].kernels);
}

TEST(Network, ZeroUpstreamGivesZeroGradients) {
  const auto net = init_network<double>(toy_config(), 3);
  Rng rng(4);
  StreamTape<double> tape;
  const auto out = net.theta.forward(test::random_volume<double>(Dims{8, 8, 8, 2}, rng), &tape);
  auto g = net.theta.zero_grads();
  net.theta.backward(tape, Volume<double>(out.dims()), g);
  for (const auto& p : g) p.for_each_buffer([](const std::vector<double>& b) {
      for (double v : b) EXPECT_EQ(v, 0.0);
    });
}

TEST(Network, StaleTapeIsRejected) {
  auto net = init_network<double>(toy_config(), 3);
  Rng rng(5);
  StreamTape<double> tape;
  const auto out = net.psi.forward(test::random_volume<double>(Dims{8, 8, 8, 2}, rng), &tape);
  net.psi.mutable_params();
  auto g = net.psi.zero_grads();
  EXPECT_THROW(net.psi.backward(tape, out, g), std::logic_error);
}

TEST(Network, DirectionalDerivativeMatchesFiniteDifferences) {
  // 8^3 toy, 64-bit, L(p) = <R, F(p)> probed along a random direction.
  for (const bool seg : {true, false}) {
    auto net = init_network<double>(toy_config(), 11);
    Stream<double>& s = seg ? net.theta : net.psi;
    Rng rng(seg ? 6 : 7);
    const auto x = test::random_volume<double>(Dims{8, 8, 8, 2}, rng, -1, 1);
    StreamTape<double> tape;
    const auto out = s.forward(x, &tape);
    const auto R = test::random_volume<double>(out.dims(), rng, -1, 1);
    auto g = s.zero_grads();
    s.backward(tape, R, g);
    const auto p0 = gc::flatten(s.params());
    const auto gflat = gc::flatten(g);
    std::vector<double> d(p0.size());
    double nd = 0;
    for (auto& e : d) nd += (e = rng.normal()) * e;
    double analytic = 0;
    for (std::size_t i = 0; i < d.size(); ++i) analytic += gflat[i] * (d[i] /= std::sqrt(nd));
    const double h = 1e-5;
    auto eval = [&](double sign) {
      auto p = p0;
      for (std::size_t i = 0; i < p.size(); ++i) p[i] += sign * h * d[i];
      gc::set_params(s, p);
      return weighted_sum(s.forward(x), R);
    };
    const double numeric = (eval(1) - eval(-1)) / (2 * h);
    EXPECT_LT(std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-8), 1e-3) << (seg ? "seg" : "reg");
  }
}

TEST(Checkpoint, ReloadIsBitwiseIdentical) {
  const auto dir = test::scratch_dir("ckpt");
  const NetworkConfig cfg{6, 3, 1, 4};
  const auto net = init_network<float>(cfg, 5);
  Checkpoint ck;
  ck.config = cfg;
  ck.theta = net.theta;
  ck.psi = net.psi;
  ck.mode = "joint";
  ck.epoch = 3;
  ck.seed = 5;
  save_checkpoint(ck, dir / "ck");
  const auto back = load_checkpoint(dir / "ck");
  EXPECT_EQ(back.epoch, 3);
  EXPECT_EQ(back.seed, 5u);
  ASSERT_TRUE(back.theta && back.psi);
  Rng rng(8);
  const auto img = test::random_volume<float>(Dims{8, 6, 4, 6}, rng);
  const auto a = seg_forward(net.theta, img).volume();
  const auto b = seg_forward(*back.theta, img).volume();
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * 4), 0);
  for (std::size_t l = 0; l < net.psi.params().size(); ++l)
    EXPECT_EQ(net.psi.params()[l].kernels, back.psi->params()[l].kernels);
}

TEST(Checkpoint, MissingFileIsDataError) { EXPECT_THROW(load_checkpoint("/nonexistent_segis_ck"), DataError); }
