#pragma once

// Differentiable layer primitives with explicit forward/backward passes:
// 3D convolution (3^3 or 1^3, zero padded, same size), instance
// normalization, leaky ReLU / sigmoid, 2x max pooling and 2x trilinear
// upsampling.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "rng.hpp"
#include "volume.hpp"

namespace segis {

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kNormEpsilon = 1e-5;

enum class Activation { leaky_relu, sigmoid, linear };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::linear: return "linear";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "leaky_relu") return Activation::leaky_relu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "linear") return Activation::linear;
  throw DataError("unknown activation '" + s + "'");
}

/// One convolution unit: kernels (k,k,k,C_in,C_out) stored x-fastest, i.e.
/// element (kx,ky,kz,ci,co) at kx + k*(ky + k*(kz + k*(ci + C_in*co))).
/// Optional instance norm (scale/shift per output channel) then activation.
template <typename T>
struct ConvLayerParams {
  int in_channels = 0;
  int out_channels = 0;
  int ksize = 3;
  bool has_norm = false;
  Activation activation = Activation::linear;
  std::vector<T> kernels;
  std::vector<T> bias;
  std::vector<T> norm_scale;
  std::vector<T> norm_shift;

  ConvLayerParams() = default;
  ConvLayerParams(int cin, int cout, int k, bool norm, Activation act)
      : in_channels(cin), out_channels(cout), ksize(k), has_norm(norm), activation(act),
        kernels(static_cast<std::size_t>(k * k * k) * cin * cout, T(0)), bias(cout, T(0)),
        norm_scale(norm ? cout : 0, T(1)), norm_shift(norm ? cout : 0, T(0)) {
    if (cin <= 0 || cout <= 0 || (k != 1 && k != 3)) throw DataError("invalid conv layer shape");
  }

  int taps() const noexcept { return ksize * ksize * ksize; }

  T& kernel(int kx, int ky, int kz, int ci, int co) {
    return kernels[kx + ksize * (ky + ksize * (kz + ksize * (ci + static_cast<std::size_t>(in_channels) * co)))];
  }

  /// Zeroed copy with the same shape, used as a gradient accumulator.
  ConvLayerParams zeros_like() const {
    ConvLayerParams g = *this;
    std::fill(g.kernels.begin(), g.kernels.end(), T(0));
    std::fill(g.bias.begin(), g.bias.end(), T(0));
    std::fill(g.norm_scale.begin(), g.norm_scale.end(), T(0));
    std::fill(g.norm_shift.begin(), g.norm_shift.end(), T(0));
    return g;
  }

  std::size_t parameter_count() const noexcept {
    return kernels.size() + bias.size() + norm_scale.size() + norm_shift.size();
  }

  /// Visits every parameter buffer in a fixed order.
  template <typename F>
  void for_each_buffer(F&& f) {
    f(kernels);
    f(bias);
    f(norm_scale);
    f(norm_shift);
  }
  template <typename F>
  void for_each_buffer(F&& f) const {
    f(kernels);
    f(bias);
    f(norm_scale);
    f(norm_shift);
  }
};

/// Glorot uniform kernels in (-L, L), L = sqrt(6 / (fan_in + fan_out)) with
/// fans over k^3 * channels. Bias zero, norm scale one / shift zero.
template <typename T>
ConvLayerParams<T> glorot_init(int cin, int cout, int ksize, bool has_norm, Activation act, std::uint64_t seed) {
  ConvLayerParams<T> p(cin, cout, ksize, has_norm, act);
  const double fan_in = static_cast<double>(p.taps()) * cin;
  const double fan_out = static_cast<double>(p.taps()) * cout;
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  Rng rng(seed);
  for (auto& w : p.kernels) w = static_cast<T>(rng.uniform(-limit, limit));
  return p;
}

namespace detail {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
using TapStride = Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>;

inline constexpr Eigen::Index kRowBlock = 2048;

/// Copy of `v` with a one-voxel zero border, as a (padded voxels x C) matrix.
template <typename T>
Mat<T> pad1(const Volume<T>& v) {
  const int X = v.nx(), Y = v.ny(), Z = v.nz(), Xp = X + 2, Yp = Y + 2;
  Mat<T> p = Mat<T>::Zero(static_cast<Eigen::Index>(Xp) * Yp * (Z + 2), v.channels());
  for (int c = 0; c < v.channels(); ++c)
    for (int z = 0; z < Z; ++z)
      for (int y = 0; y < Y; ++y) {
        const T* s = v.data() + v.index(0, y, z, c);
        std::copy(s, s + X, p.data() + p.rows() * c + 1 + Xp * (y + 1 + static_cast<Eigen::Index>(Yp) * (z + 1)));
      }
  return p;
}

/// Interior of a padded matrix back on the original grid.
template <typename T>
void unpad1(const Mat<T>& p, Volume<T>& v) {
  const int X = v.nx(), Y = v.ny(), Z = v.nz(), Xp = X + 2, Yp = Y + 2;
  for (int c = 0; c < v.channels(); ++c)
    for (int z = 0; z < Z; ++z)
      for (int y = 0; y < Y; ++y) {
        const T* s = p.data() + p.rows() * c + 1 + Xp * (y + 1 + static_cast<Eigen::Index>(Yp) * (z + 1));
        std::copy(s, s + X, v.data() + v.index(0, y, z, c));
      }
}

/// Row offset of tap (kx, ky, kz) in the padded layout.
inline Eigen::Index tap_offset(int kx, int ky, int kz, int X, int Y) {
  return (kx - 1) + static_cast<Eigen::Index>(X + 2) * ((ky - 1) + static_cast<Eigen::Index>(Y + 2) * (kz - 1));
}

/// Rows [first, last) of the padded layout cover every interior voxel.
inline std::pair<Eigen::Index, Eigen::Index> interior_rows(int X, int Y, int Z) {
  const Eigen::Index Xp = X + 2, Yp = Y + 2;
  const Eigen::Index first = Xp * Yp + Xp + 1;
  return {first, Xp * Yp * (Z + 2) - first};
}

}  // namespace detail

/// Cross-correlation plus bias, same spatial size (1-voxel zero padding for
/// 3^3 kernels). No norm or activation. A 3^3 kernel is evaluated as 27
/// row-shifted GEMMs over the zero-padded input.
template <typename T>
Volume<T> conv3(const Volume<T>& in, const ConvLayerParams<T>& layer) {
  if (in.channels() != layer.in_channels)
    throw DataError("conv3: input has " + std::to_string(in.channels()) + " channels, layer expects " +
                    std::to_string(layer.in_channels));
  using M = detail::Mat<T>;
  const Eigen::Index n = static_cast<Eigen::Index>(in.spatial_size());
  const int cin = layer.in_channels, cout = layer.out_channels;
  Volume<T> out(in.dims().with_channels(cout), T(0), in.spacing());
  Eigen::Map<M> O(out.data(), n, cout);
  if (layer.ksize == 1) {
    // Aligned copies keep Eigen's vectorized paths independent of where the
    // volume buffers happen to be allocated.
    const M W = Eigen::Map<const M>(layer.kernels.data(), cin, cout);
    const M I = Eigen::Map<const M>(in.data(), n, cin);
    M R(n, cout);
    R.noalias() = I * W;
    O = R;
  } else {
    const M P = detail::pad1(in);
    M Op = M::Zero(P.rows(), cout);
    const auto [first, last] = detail::interior_rows(in.nx(), in.ny(), in.nz());
    for (Eigen::Index r = first; r < last; r += detail::kRowBlock) {
      const Eigen::Index m = std::min(detail::kRowBlock, last - r);
      for (int t = 0; t < 27; ++t) {
        const Eigen::Index off = detail::tap_offset(t % 3, (t / 3) % 3, t / 9, in.nx(), in.ny());
        Eigen::Map<const M, 0, detail::TapStride> Wt(layer.kernels.data() + t, cin, cout, detail::TapStride(27 * cin, 27));
        Op.middleRows(r, m).noalias() += P.middleRows(r + off, m) * Wt;
      }
    }
    detail::unpad1(Op, out);
  }
  for (int co = 0; co < cout; ++co) O.col(co).array() += layer.bias[co];
  return out;
}

/// Accumulates kernel/bias gradients into `grad`; returns the input gradient
/// when `want_input_grad`, otherwise an empty volume.
template <typename T>
Volume<T> conv3_backward(const Volume<T>& in, const ConvLayerParams<T>& layer, const Volume<T>& grad_out,
                         ConvLayerParams<T>& grad, bool want_input_grad = true) {
  using M = detail::Mat<T>;
  const Eigen::Index n = static_cast<Eigen::Index>(in.spatial_size());
  const int cin = layer.in_channels, cout = layer.out_channels;
  for (int co = 0; co < cout; ++co) {
    T s = T(0);
    for (T g : grad_out.channel(co)) s += g;
    grad.bias[co] += s;
  }
  Volume<T> grad_in;
  if (want_input_grad) grad_in = Volume<T>(in.dims(), T(0), in.spacing());
  if (layer.ksize == 1) {
    const M G = Eigen::Map<const M>(grad_out.data(), n, cout);
    const M W = Eigen::Map<const M>(layer.kernels.data(), cin, cout);
    const M I = Eigen::Map<const M>(in.data(), n, cin);
    M GW(cin, cout);
    GW.noalias() = I.transpose() * G;
    Eigen::Map<M>(grad.kernels.data(), cin, cout) += GW;
    if (want_input_grad) {
      M GI(n, cin);
      GI.noalias() = G * W.transpose();
      Eigen::Map<M>(grad_in.data(), n, cin) = GI;
    }
    return grad_in;
  }
  const M P = detail::pad1(in);
  const M Gp = detail::pad1(grad_out);
  M GIp;
  if (want_input_grad) GIp = M::Zero(P.rows(), cin);
  const auto [first, last] = detail::interior_rows(in.nx(), in.ny(), in.nz());
  std::vector<M> acc(27, M::Zero(cin, cout));
  for (Eigen::Index r = first; r < last; r += detail::kRowBlock) {
    const Eigen::Index m = std::min(detail::kRowBlock, last - r);
    const auto Gb = Gp.middleRows(r, m);
    for (int t = 0; t < 27; ++t) {
      const Eigen::Index off = detail::tap_offset(t % 3, (t / 3) % 3, t / 9, in.nx(), in.ny());
      for (int c = 0; c < cin; ++c) acc[t].row(c).noalias() += P.col(c).segment(r + off, m).transpose() * Gb;
      if (want_input_grad) {
        Eigen::Map<const M, 0, detail::TapStride> Wt(layer.kernels.data() + t, cin, cout, detail::TapStride(27 * cin, 27));
        GIp.middleRows(r + off, m).noalias() += Gb * Wt.transpose();
      }
    }
  }
  for (int t = 0; t < 27; ++t) {
    Eigen::Map<M, 0, detail::TapStride> GWt(grad.kernels.data() + t, cin, cout, detail::TapStride(27 * cin, 27));
    GWt += acc[t];
  }
  if (want_input_grad) detail::unpad1(GIp, grad_in);
  return grad_in;
}

template <typename T>
struct NormCache {
  Volume<T> normalized;         // x_hat
  std::vector<double> inv_std;  // per channel
};

/// Per-sample, per-channel normalization: (x - mean) / sqrt(var + 1e-5),
/// then scale * x_hat + shift.
template <typename T>
Volume<T> instance_norm(const Volume<T>& in, std::span<const T> scale, std::span<const T> shift,
                        NormCache<T>* cache = nullptr) {
  const std::size_t n = in.spatial_size();
  Volume<T> xhat(in.dims(), T(0), in.spacing());
  Volume<T> out(in.dims(), T(0), in.spacing());
  std::vector<double> inv_std(in.channels());
  for (int c = 0; c < in.channels(); ++c) {
    const auto x = in.channel(c);
    double mean = 0.0;
    for (T v : x) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (T v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    inv_std[c] = 1.0 / std::sqrt(var + kNormEpsilon);
    auto xh = xhat.channel(c);
    auto y = out.channel(c);
    for (std::size_t i = 0; i < n; ++i) {
      xh[i] = static_cast<T>((x[i] - mean) * inv_std[c]);
      y[i] = scale[c] * xh[i] + shift[c];
    }
  }
  if (cache) *cache = {std::move(xhat), std::move(inv_std)};
  return out;
}

template <typename T>
Volume<T> instance_norm_backward(const NormCache<T>& cache, std::span<const T> scale, const Volume<T>& grad_out,
                                 std::span<T> grad_scale, std::span<T> grad_shift) {
  const std::size_t n = grad_out.spatial_size();
  Volume<T> grad_in(grad_out.dims(), T(0), grad_out.spacing());
  for (int c = 0; c < grad_out.channels(); ++c) {
    const auto g = grad_out.channel(c);
    const auto xh = cache.normalized.channel(c);
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      sum_g += g[i];
      sum_gx += static_cast<double>(g[i]) * xh[i];
    }
    grad_shift[c] += static_cast<T>(sum_g);
    grad_scale[c] += static_cast<T>(sum_gx);
    const double k = scale[c] * cache.inv_std[c];
    const double mg = sum_g / static_cast<double>(n), mgx = sum_gx / static_cast<double>(n);
    auto gi = grad_in.channel(c);
    for (std::size_t i = 0; i < n; ++i) gi[i] = static_cast<T>(k * (g[i] - mg - xh[i] * mgx));
  }
  return grad_in;
}

template <typename T>
T leaky_relu(T x) {
  return x > T(0) ? x : static_cast<T>(kLeakySlope) * x;
}

template <typename T>
T sigmoid(T x) {
  return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x))));
}

template <typename T>
void apply_activation(Volume<T>& v, Activation a) {
  switch (a) {
    case Activation::leaky_relu:
      for (auto& x : v.voxels()) x = leaky_relu(x);
      break;
    case Activation::sigmoid:
      for (auto& x : v.voxels()) x = sigmoid(x);
      break;
    case Activation::linear:
      break;
  }
}

/// Gradient through an activation given its output (leaky ReLU and sigmoid
/// are both recoverable from the output alone).
template <typename T>
void activation_backward_inplace(const Volume<T>& output, Activation a, Volume<T>& grad) {
  switch (a) {
    case Activation::leaky_relu:
      for (std::size_t i = 0; i < grad.size(); ++i)
        if (!(output[i] > T(0))) grad[i] *= static_cast<T>(kLeakySlope);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= output[i] * (T(1) - output[i]);
      break;
    case Activation::linear:
      break;
  }
}

/// 2x2x2 max pooling; `argmax` (optional) receives the source index per output.
template <typename T>
Volume<T> maxpool2(const Volume<T>& in, std::vector<std::size_t>* argmax = nullptr) {
  if (in.nx() % 2 || in.ny() % 2 || in.nz() % 2) throw DataError("maxpool2 requires even spatial dims, got " + in.dims().str());
  const Dims od{in.nx() / 2, in.ny() / 2, in.nz() / 2, in.channels()};
  Volume<T> out(od, T(0), in.spacing());
  if (argmax) argmax->assign(out.size(), 0);
  std::size_t o = 0;
  for (int c = 0; c < od.c; ++c)
    for (int z = 0; z < od.z; ++z)
      for (int y = 0; y < od.y; ++y)
        for (int x = 0; x < od.x; ++x, ++o) {
          std::size_t best = in.index(2 * x, 2 * y, 2 * z, c);
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const std::size_t i = in.index(2 * x + dx, 2 * y + dy, 2 * z + dz, c);
                if (in[i] > in[best]) best = i;
              }
          out[o] = in[best];
          if (argmax) (*argmax)[o] = best;
        }
  return out;
}

template <typename T>
Volume<T> maxpool2_backward(const Dims& in_dims, const std::vector<std::size_t>& argmax, const Volume<T>& grad_out) {
  Volume<T> g(in_dims, T(0), grad_out.spacing());
  for (std::size_t o = 0; o < grad_out.size(); ++o) g[argmax[o]] += grad_out[o];
  return g;
}

namespace detail {

/// Half-pixel-centred linear weights for doubling an axis of length n:
/// output o samples input coordinate o/2 - 1/4, clamped to [0, n-1].
struct UpTap {
  int i0, i1;
  double w1;
};

inline std::vector<UpTap> upsample_taps(int n) {
  std::vector<UpTap> taps(2 * n);
  for (int o = 0; o < 2 * n; ++o) {
    const double p = std::clamp(0.5 * o - 0.25, 0.0, static_cast<double>(n - 1));
    int i0 = static_cast<int>(std::floor(p));
    i0 = std::min(i0, std::max(n - 2, 0));
    const int i1 = std::min(i0 + 1, n - 1);
    taps[o] = {i0, i1, p - i0};
  }
  return taps;
}

}  // namespace detail

/// Doubles each spatial dim by separable linear interpolation.
template <typename T>
Volume<T> upsample2(const Volume<T>& in) {
  const Dims od{in.nx() * 2, in.ny() * 2, in.nz() * 2, in.channels()};
  const auto tx = detail::upsample_taps(in.nx()), ty = detail::upsample_taps(in.ny()), tz = detail::upsample_taps(in.nz());
  Volume<T> out(od, T(0), in.spacing());
  std::size_t o = 0;
  for (int c = 0; c < od.c; ++c)
    for (int z = 0; z < od.z; ++z)
      for (int y = 0; y < od.y; ++y)
        for (int x = 0; x < od.x; ++x, ++o) {
          const auto &ax = tx[x], &ay = ty[y], &az = tz[z];
          const double wx[2] = {1 - ax.w1, ax.w1}, wy[2] = {1 - ay.w1, ay.w1}, wz[2] = {1 - az.w1, az.w1};
          const int ix[2] = {ax.i0, ax.i1}, iy[2] = {ay.i0, ay.i1}, iz[2] = {az.i0, az.i1};
          double acc = 0.0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e) acc += wx[e] * wy[b] * wz[a] * in(ix[e], iy[b], iz[a], c);
          out[o] = static_cast<T>(acc);
        }
  return out;
}

template <typename T>
Volume<T> upsample2_backward(const Dims& in_dims, const Volume<T>& grad_out) {
  const auto tx = detail::upsample_taps(in_dims.x), ty = detail::upsample_taps(in_dims.y),
             tz = detail::upsample_taps(in_dims.z);
  Volume<T> g(in_dims, T(0), grad_out.spacing());
  std::size_t o = 0;
  for (int c = 0; c < grad_out.channels(); ++c)
    for (int z = 0; z < grad_out.nz(); ++z)
      for (int y = 0; y < grad_out.ny(); ++y)
        for (int x = 0; x < grad_out.nx(); ++x, ++o) {
          const auto &ax = tx[x], &ay = ty[y], &az = tz[z];
          const double wx[2] = {1 - ax.w1, ax.w1}, wy[2] = {1 - ay.w1, ay.w1}, wz[2] = {1 - az.w1, az.w1};
          const int ix[2] = {ax.i0, ax.i1}, iy[2] = {ay.i0, ay.i1}, iz[2] = {az.i0, az.i1};
          const double go = grad_out[o];
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e) g(ix[e], iy[b], iz[a], c) += static_cast<T>(wx[e] * wy[b] * wz[a] * go);
        }
  return g;
}

}  // namespace segis
