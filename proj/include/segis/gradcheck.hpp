#pragma once

// Central finite-difference verification of every analytic gradient, in
// double precision on small random instances.
//
// Each check builds a scalar f(x) = <R, op(x)> with random upstream weights R
// and compares the analytic gradient against central differences, both along
// random directions and on sampled coordinates. The error of one comparison
// is |a - n| / max(|a|, |n|, 1e-3 * max|g|).

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "layers.hpp"
#include "losses.hpp"
#include "network.hpp"
#include "rng.hpp"
#include "trainer.hpp"
#include "warp.hpp"

namespace segis {

struct GradCheckResult {
  std::string op;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::uint64_t seed = 0;
};

struct GradCheckOptions {
  double op_tolerance = 1e-4;
  double network_tolerance = 1e-3;
  int directions = 3;
  int coordinates = 8;
  double step = 1e-5;
  /// Name of a check whose analytic gradient is deliberately corrupted
  /// (test hook for the failure path). Empty = none.
  std::string inject_fault;
};

namespace gc {

using Vec = std::vector<double>;
using Fn = std::function<double(const Vec&)>;

inline Vec random_vec(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Vec v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline Volume<double> random_volume(const Dims& d, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Volume<double>(d, random_vec(d.count(), rng, lo, hi));
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Worst relative error of `grad` against central differences of `f` at `x`.
inline double compare(const Fn& f, const Vec& x, const Vec& grad, const GradCheckOptions& opt, Rng& rng) {
  double gmax = 0.0;
  for (double g : grad) gmax = std::max(gmax, std::abs(g));
  const double floor = std::max(1e-3 * gmax, 1e-12);
  const auto rel = [&](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}); };
  double worst = 0.0;
  Vec xp = x, xm = x;
  for (int d = 0; d < opt.directions; ++d) {
    Vec v(x.size());
    for (auto& e : v) e = rng.normal();
    const double norm = std::sqrt(dot(v, v));
    for (std::size_t i = 0; i < x.size(); ++i) {
      v[i] /= norm;
      xp[i] = x[i] + opt.step * v[i];
      xm[i] = x[i] - opt.step * v[i];
    }
    const double numeric = (f(xp) - f(xm)) / (2.0 * opt.step);
    const double dnorm = std::sqrt(dot(grad, grad));
    worst = std::max(worst, std::abs(dot(grad, v) - numeric) / std::max({std::abs(numeric), 1e-3 * dnorm, 1e-12}));
  }
  xp = x;
  xm = x;
  for (int c = 0; c < opt.coordinates && !x.empty(); ++c) {
    const std::size_t i = rng.below(x.size());
    xp[i] = x[i] + opt.step;
    xm[i] = x[i] - opt.step;
    const double numeric = (f(xp) - f(xm)) / (2.0 * opt.step);
    xp[i] = xm[i] = x[i];
    worst = std::max(worst, rel(grad[i], numeric));
  }
  return worst;
}

/// Flat view of all parameters of a stream, in buffer order.
inline Vec flatten(const Stream<double>::Params& ps) {
  Vec out;
  for (const auto& p : ps) p.for_each_buffer([&](const std::vector<double>& b) { out.insert(out.end(), b.begin(), b.end()); });
  return out;
}

inline void unflatten(const Vec& flat, Stream<double>::Params& ps) {
  std::size_t o = 0;
  for (auto& p : ps)
    p.for_each_buffer([&](std::vector<double>& b) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(o), b.size(), b.begin());
      o += b.size();
    });
}

inline void set_params(Stream<double>& s, const Vec& flat) { unflatten(flat, s.mutable_params()); }

}  // namespace gc

/// Runs every gradient check once with instances drawn from `seed`.
inline std::vector<GradCheckResult> run_gradchecks(std::uint64_t seed, const GradCheckOptions& opt = {}) {
  using gc::Vec;
  using V = Volume<double>;
  std::vector<GradCheckResult> results;
  Rng rng(seed);
  const auto record = [&](const std::string& name, const gc::Fn& f, const Vec& x, Vec grad, double tol) {
    if (name == opt.inject_fault)
      for (auto& g : grad) g = g * 1.05 + 1e-3;
    Rng cmp_rng(derive_seed(seed, name));
    const double err = gc::compare(f, x, grad, opt, cmp_rng);
    results.push_back({name, err, tol, err < tol, seed});
  };
  const double tol = opt.op_tolerance;

  // Sampling coordinates kept off the integer lattice so the finite
  // differences never straddle a trilinear kink.
  const auto random_map = [&](const Dims& grid, const Dims& src) {
    V m(grid.with_channels(3));
    const int n[3] = {src.x, src.y, src.z};
    for (int c = 0; c < 3; ++c)
      for (auto& v : m.channel(c)) {
        double p = rng.uniform(-0.4, n[c] - 0.6);
        if (std::abs(p - std::round(p)) < 0.05) p += 0.1;
        v = p;
      }
    return m;
  };

  {  // warp w.r.t. source values and sampling map
    const Dims sd{5, 6, 4, 2}, md{4, 5, 3, 1};
    const V src = gc::random_volume(sd, rng);
    const V map = random_map(md, sd);
    const V R = gc::random_volume(md.with_channels(2), rng);
    const WarpGrad<double> g = trilinear_warp_grad(src, SamplingMap<double>(map), R);
    record("warp.src", [&](const Vec& x) { return gc::dot(R.voxels(), detail::pull(V(sd, x), SamplingMap<double>(map)).voxels()); },
           src.storage(), g.grad_src.storage(), tol);
    record("warp.map", [&](const Vec& x) { return gc::dot(R.voxels(), detail::pull(src, SamplingMap<double>(V(map.dims(), x))).voxels()); },
           map.storage(), g.grad_map.storage(), tol);
  }
  {  // compose
    const Dims d{4, 5, 3, 3};
    AffineTransform::Matrix m{};
    for (int i = 0; i < 12; ++i) m[i] = (i % 5 == 0 ? 1.0 : 0.0) + rng.uniform(-0.2, 0.2);
    m[15] = 1.0;
    const AffineTransform A(m);
    const V u = gc::random_volume(d, rng);
    const V R = gc::random_volume(d, rng);
    record("compose", [&](const Vec& x) { return gc::dot(R.voxels(), compose(A, DisplacementField<double>(V(d, x))).coords.voxels()); },
           u.storage(), compose_backward(A, R).field.storage(), tol);
  }
  {  // losses
    const Dims d{4, 5, 3, 2};
    V truth(d);
    for (auto& v : truth.voxels()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    const V pred = gc::random_volume(d, rng, 0.05, 0.95);
    record("loss.soft_dice", [&](const Vec& x) { return soft_dice_loss(V(d, x), truth).value; }, pred.storage(),
           soft_dice_loss(pred, truth).grad.storage(), tol);
    const V target = gc::random_volume(d, rng);
    const V warped = gc::random_volume(d, rng);
    record("loss.mse", [&](const Vec& x) { return mse_loss(target, V(d, x)).value; }, warped.storage(),
           mse_loss(target, warped).grad.storage(), tol);
    const Dims fd = d.with_channels(3);
    const V u = gc::random_volume(fd, rng);
    record("loss.smoothness", [&](const Vec& x) { return smoothness_loss(DisplacementField<double>(V(fd, x))).value; }, u.storage(),
           smoothness_loss(DisplacementField<double>(u)).grad.storage(), tol);

    const Dims sd{5, 6, 4, 2};
    const V pred_s = gc::random_volume(sd, rng, 0.05, 0.95);
    const V map = random_map(d.with_channels(3), sd);
    const auto cd = composite_dice_loss(truth, pred_s, SamplingMap<double>(map));
    record("loss.composite.pred", [&](const Vec& x) { return composite_dice_loss(truth, V(sd, x), SamplingMap<double>(map)).value; },
           pred_s.storage(), cd.grad_pred.storage(), tol);
    record("loss.composite.map", [&](const Vec& x) { return composite_dice_loss(truth, pred_s, SamplingMap<double>(V(map.dims(), x))).value; },
           map.storage(), cd.grad_map.storage(), tol);
  }
  {  // convolutions: input, kernels and bias in one flat vector
    for (int k : {3, 1}) {
      const Dims d{4, 5, 3, 3};
      const int cout = 2;
      auto layer = glorot_init<double>(d.c, cout, k, false, Activation::linear, rng.below(1u << 30));
      for (auto& b : layer.bias) b = rng.uniform(-0.5, 0.5);
      const V in = gc::random_volume(d, rng);
      const V R = gc::random_volume(d.with_channels(cout), rng);
      const auto unpack = [&](const Vec& x, V& vin, ConvLayerParams<double>& l) {
        std::copy_n(x.begin(), vin.size(), vin.data());
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(vin.size()), l.kernels.size(), l.kernels.begin());
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(vin.size() + l.kernels.size()), l.bias.size(), l.bias.begin());
      };
      Vec x0 = in.storage();
      x0.insert(x0.end(), layer.kernels.begin(), layer.kernels.end());
      x0.insert(x0.end(), layer.bias.begin(), layer.bias.end());
      auto grad = layer.zeros_like();
      const V gin = conv3_backward(in, layer, R, grad, true);
      Vec g = gin.storage();
      g.insert(g.end(), grad.kernels.begin(), grad.kernels.end());
      g.insert(g.end(), grad.bias.begin(), grad.bias.end());
      record(k == 3 ? "layer.conv3" : "layer.conv1",
             [&](const Vec& x) {
               V vin = in;
               auto l = layer;
               unpack(x, vin, l);
               return gc::dot(R.voxels(), conv3(vin, l).voxels());
             },
             x0, g, tol);
    }
  }
  {  // instance norm: input, scale, shift
    const Dims d{4, 5, 3, 2};
    const V in = gc::random_volume(d, rng);
    const Vec scale = gc::random_vec(2, rng, 0.5, 1.5), shift = gc::random_vec(2, rng);
    const V R = gc::random_volume(d, rng);
    NormCache<double> cache;
    instance_norm<double>(in, scale, shift, &cache);
    Vec gs(2, 0.0), gb(2, 0.0);
    const V gin = instance_norm_backward<double>(cache, scale, R, gs, gb);
    Vec x0 = in.storage(), g = gin.storage();
    x0.insert(x0.end(), scale.begin(), scale.end());
    x0.insert(x0.end(), shift.begin(), shift.end());
    g.insert(g.end(), gs.begin(), gs.end());
    g.insert(g.end(), gb.begin(), gb.end());
    const std::size_t n = in.size();
    record("layer.instance_norm",
           [&](const Vec& x) {
             const Vec s(x.begin() + static_cast<std::ptrdiff_t>(n), x.begin() + static_cast<std::ptrdiff_t>(n + 2));
             const Vec b(x.begin() + static_cast<std::ptrdiff_t>(n + 2), x.end());
             return gc::dot(R.voxels(), instance_norm<double>(V(d, Vec(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n))), s, b).voxels());
           },
           x0, g, tol);
  }
  for (Activation a : {Activation::leaky_relu, Activation::sigmoid}) {
    const Dims d{4, 3, 3, 2};
    V in = gc::random_volume(d, rng, -3.0, 3.0);
    for (auto& v : in.voxels())
      if (std::abs(v) < 0.05) v += 0.1;
    const V R = gc::random_volume(d, rng);
    V out = in;
    apply_activation(out, a);
    V g = R;
    activation_backward_inplace(out, a, g);
    record("layer." + to_string(a),
           [&](const Vec& x) {
             V o(d, x);
             apply_activation(o, a);
             return gc::dot(R.voxels(), o.voxels());
           },
           in.storage(), g.storage(), tol);
  }
  {  // pooling and upsampling
    const Dims d{4, 6, 2, 2};
    const V in = gc::random_volume(d, rng);
    std::vector<std::size_t> argmax;
    const V pooled = maxpool2(in, &argmax);
    const V R = gc::random_volume(pooled.dims(), rng);
    record("layer.maxpool2", [&](const Vec& x) { return gc::dot(R.voxels(), maxpool2(V(d, x)).voxels()); }, in.storage(),
           maxpool2_backward(d, argmax, R).storage(), tol);
    const Dims ud{3, 2, 4, 2};
    const V uin = gc::random_volume(ud, rng);
    const V UR = gc::random_volume(upsample2(uin).dims(), rng);
    record("layer.upsample2", [&](const Vec& x) { return gc::dot(UR.voxels(), upsample2(V(ud, x)).voxels()); }, uin.storage(),
           upsample2_backward(ud, UR).storage(), tol);
  }

  // Full-network directional probes on an 8^3 grid.
  const NetworkConfig ncfg{2, 2, 2, 4};
  const Dims g8{8, 8, 8, 1};
  {
    Stream<double> seg(ncfg.seg(), derive_seed(seed, "probe-theta"));
    const V img = gc::random_volume(g8.with_channels(ncfg.image_channels), rng);
    const V R = gc::random_volume(g8.with_channels(ncfg.structures), rng);
    StreamTape<double> tape;
    seg.forward(img, &tape);
    auto grads = seg.zero_grads();
    const V gin = seg.backward(tape, R, grads, true);
    const Vec p0 = gc::flatten(seg.params());
    record("network.seg.params",
           [&](const Vec& x) {
             Stream<double> s = seg;
             gc::set_params(s, x);
             return gc::dot(R.voxels(), s.forward(img).voxels());
           },
           p0, gc::flatten(grads), opt.network_tolerance);
    record("network.seg.input", [&](const Vec& x) { return gc::dot(R.voxels(), seg.forward(V(img.dims(), x)).voxels()); },
           img.storage(), gin.storage(), opt.network_tolerance);
  }
  {
    Stream<double> reg(ncfg.reg(), derive_seed(seed, "probe-psi"));
    const V in = gc::random_volume(g8.with_channels(2), rng);
    const V R = gc::random_volume(g8.with_channels(3), rng);
    StreamTape<double> tape;
    reg.forward(in, &tape);
    auto grads = reg.zero_grads();
    reg.backward(tape, R, grads);
    record("network.reg.params",
           [&](const Vec& x) {
             Stream<double> s = reg;
             gc::set_params(s, x);
             return gc::dot(R.voxels(), s.forward(in).voxels());
           },
           gc::flatten(reg.params()), gc::flatten(grads), opt.network_tolerance);
  }
  {  // one joint training step: total loss w.r.t. both streams
    TrainSample<double> s;
    s.id = "probe";
    s.subject = "probe";
    s.img_s = gc::random_volume(g8, rng);
    s.img_t = gc::random_volume(g8, rng);
    s.seg_img_s = gc::random_volume(g8.with_channels(ncfg.image_channels), rng);
    V ss(g8.with_channels(ncfg.structures)), st(g8.with_channels(ncfg.structures));
    for (auto& v : ss.voxels()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
    for (auto& v : st.voxels()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
    s.seg_s = SegmentationSet<double>(ss, SegKind::binary);
    s.seg_t = SegmentationSet<double>(st, SegKind::binary);
    AffineTransform::Matrix m{};
    for (int i = 0; i < 12; ++i) m[i] = (i % 5 == 0 ? 1.0 : 0.0) + rng.uniform(-0.03, 0.03);
    m[3] += 0.37;
    m[7] -= 0.21;
    m[11] += 0.13;
    m[15] = 1.0;
    s.affine = AffineTransform(m);
    const NetworkParams<double> net = init_network<double>(ncfg, derive_seed(seed, "probe-net"));
    const TermWeights w{1.0, 10.0, 0.1, 1.0};
    const auto r = compute_step(s, net, TrainMode::joint, w);
    const Vec t0 = gc::flatten(net.theta.params()), p0 = gc::flatten(net.psi.params());
    Vec x0 = t0, g = gc::flatten(r.theta_grads);
    x0.insert(x0.end(), p0.begin(), p0.end());
    const Vec gp = gc::flatten(r.psi_grads);
    g.insert(g.end(), gp.begin(), gp.end());
    record("trainer.joint_step",
           [&](const Vec& x) {
             NetworkParams<double> n = net;
             gc::set_params(n.theta, Vec(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(t0.size())));
             gc::set_params(n.psi, Vec(x.begin() + static_cast<std::ptrdiff_t>(t0.size()), x.end()));
             return compute_step(s, n, TrainMode::joint, w, false).losses.total;
           },
           x0, g, opt.network_tolerance);
  }
  return results;
}

}  // namespace segis
