#pragma once

// Transform composition and the pull-based trilinear warp layer.
//
// A SamplingMap stores, for each target voxel, the absolute source-grid voxel
// coordinate to sample. Out-of-range coordinates are clamped to the border
// before interpolation; a clamped axis contributes zero map-gradient.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <utility>

#include "volume.hpp"

namespace segis {

/// Local deformation u in target-grid voxels (C = 3: u_x, u_y, u_z).
template <typename T>
struct DisplacementField {
  Volume<T> field;

  DisplacementField() = default;
  explicit DisplacementField(Volume<T> v) : field(std::move(v)) {
    if (field.channels() != 3) throw DataError("displacement field needs 3 channels, got " + field.dims().str());
  }
  static DisplacementField zeros(const Dims& grid) { return DisplacementField(Volume<T>(grid.with_channels(3))); }

  const Dims& dims() const noexcept { return field.dims(); }
};

/// Realized composite mapping: absolute source coordinates per target voxel.
template <typename T>
struct SamplingMap {
  Volume<T> coords;

  SamplingMap() = default;
  explicit SamplingMap(Volume<T> v) : coords(std::move(v)) {
    if (coords.channels() != 3) throw DataError("sampling map needs 3 channels, got " + coords.dims().str());
  }

  const Dims& dims() const noexcept { return coords.dims(); }
};

/// Call accounting for the single-interpolation guarantee.
struct WarpCounters {
  std::atomic<std::uint64_t> warps{0};
  std::atomic<std::uint64_t> affine_aligns{0};

  void reset() {
    warps = 0;
    affine_aligns = 0;
  }
};

inline WarpCounters& warp_counters() {
  static WarpCounters counters;
  return counters;
}

/// map(x) = A * (x + u(x)).
template <typename T>
SamplingMap<T> compose(const AffineTransform& affine, const DisplacementField<T>& u) {
  const Dims d = u.dims();
  Volume<T> coords(d, T(0), u.field.spacing());
  const std::size_t n = d.spatial();
  const auto& m = affine.matrix();
  std::size_t i = 0;
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x, ++i) {
        const double px = x + static_cast<double>(u.field[i]);
        const double py = y + static_cast<double>(u.field[i + n]);
        const double pz = z + static_cast<double>(u.field[i + 2 * n]);
        coords[i] = static_cast<T>(m[0] * px + m[1] * py + m[2] * pz + m[3]);
        coords[i + n] = static_cast<T>(m[4] * px + m[5] * py + m[6] * pz + m[7]);
        coords[i + 2 * n] = static_cast<T>(m[8] * px + m[9] * py + m[10] * pz + m[11]);
      }
  return SamplingMap<T>(std::move(coords));
}

/// Gradient of a scalar loss w.r.t. u given its gradient w.r.t. the map:
/// grad_u = A_lin^T * grad_map.
template <typename T>
DisplacementField<T> compose_backward(const AffineTransform& affine, const Volume<T>& grad_map) {
  const std::size_t n = grad_map.spatial_size();
  Volume<T> g(grad_map.dims(), T(0), grad_map.spacing());
  const auto& m = affine.matrix();
  for (std::size_t i = 0; i < n; ++i) {
    const double a = grad_map[i], b = grad_map[i + n], c = grad_map[i + 2 * n];
    g[i] = static_cast<T>(m[0] * a + m[4] * b + m[8] * c);
    g[i + n] = static_cast<T>(m[1] * a + m[5] * b + m[9] * c);
    g[i + 2 * n] = static_cast<T>(m[2] * a + m[6] * b + m[10] * c);
  }
  return DisplacementField<T>(std::move(g));
}

template <typename T>
SamplingMap<T> identity_map(const Dims& grid) {
  return compose(AffineTransform::identity(), DisplacementField<T>::zeros(grid));
}

namespace detail {

struct AxisSample {
  int i0 = 0, i1 = 0;
  double w1 = 0.0;      // weight of i1; i0 gets 1 - w1
  bool frozen = false;  // clamped or degenerate axis: zero coordinate derivative
};

inline AxisSample axis_sample(double p, int n) {
  AxisSample s;
  if (n == 1) {
    s.frozen = true;
    return s;
  }
  const double hi = static_cast<double>(n - 1);
  if (p < 0.0 || p > hi) s.frozen = true;
  const double q = std::clamp(p, 0.0, hi);
  int i0 = static_cast<int>(std::floor(q));
  if (i0 >= n - 1) i0 = n - 2;
  s.i0 = i0;
  s.i1 = i0 + 1;
  s.w1 = q - i0;
  return s;
}

template <typename T>
void check_warp_dims(const Volume<T>& src, const SamplingMap<T>& map) {
  if (src.empty() || map.coords.empty()) throw DataError("warp: empty input");
}

template <typename T>
Volume<T> pull(const Volume<T>& src, const SamplingMap<T>& map) {
  check_warp_dims(src, map);
  const Dims od = map.dims().with_channels(src.channels());
  Volume<T> out(od, T(0), src.spacing());
  const std::size_t n = od.spatial();
  const std::size_t sn = src.spatial_size();
  const int sx = src.nx(), sy = src.ny(), sz = src.nz();
  for (std::size_t i = 0; i < n; ++i) {
    const AxisSample ax = axis_sample(map.coords[i], sx);
    const AxisSample ay = axis_sample(map.coords[i + n], sy);
    const AxisSample az = axis_sample(map.coords[i + 2 * n], sz);
    const double wx[2] = {1.0 - ax.w1, ax.w1}, wy[2] = {1.0 - ay.w1, ay.w1}, wz[2] = {1.0 - az.w1, az.w1};
    const int ix[2] = {ax.i0, ax.i1}, iy[2] = {ay.i0, ay.i1}, iz[2] = {az.i0, az.i1};
    for (int c = 0; c < src.channels(); ++c) {
      const T* plane = src.data() + c * sn;
      double acc = 0.0;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
          for (int e = 0; e < 2; ++e) {
            const double w = wx[e] * wy[b] * wz[a];
            if (w == 0.0) continue;
            acc += w * static_cast<double>(plane[ix[e] + static_cast<std::size_t>(sx) * (iy[b] + static_cast<std::size_t>(sy) * iz[a])]);
          }
      out[i + c * n] = static_cast<T>(acc);
    }
  }
  return out;
}

}  // namespace detail

/// Trilinear pull warp: out(x) = src(map(x)), output grid = map grid.
template <typename T>
Volume<T> trilinear_warp(const Volume<T>& src, const SamplingMap<T>& map) {
  warp_counters().warps.fetch_add(1, std::memory_order_relaxed);
  return detail::pull(src, map);
}

template <typename T>
struct WarpGrad {
  Volume<T> grad_src;  // source dims
  Volume<T> grad_map;  // map dims, 3 channels
};

/// Adjoint of trilinear_warp for a given upstream gradient.
template <typename T>
WarpGrad<T> trilinear_warp_grad(const Volume<T>& src, const SamplingMap<T>& map, const Volume<T>& upstream) {
  detail::check_warp_dims(src, map);
  if (upstream.dims() != map.dims().with_channels(src.channels()))
    throw DataError("warp grad: upstream dims " + upstream.dims().str() + " do not match warp output");
  WarpGrad<T> g{Volume<T>(src.dims(), T(0), src.spacing()), Volume<T>(map.dims(), T(0), map.coords.spacing())};
  const std::size_t n = map.dims().spatial();
  const std::size_t sn = src.spatial_size();
  const int sx = src.nx(), sy = src.ny(), sz = src.nz();
  for (std::size_t i = 0; i < n; ++i) {
    const detail::AxisSample ax = detail::axis_sample(map.coords[i], sx);
    const detail::AxisSample ay = detail::axis_sample(map.coords[i + n], sy);
    const detail::AxisSample az = detail::axis_sample(map.coords[i + 2 * n], sz);
    const double wx[2] = {1.0 - ax.w1, ax.w1}, wy[2] = {1.0 - ay.w1, ay.w1}, wz[2] = {1.0 - az.w1, az.w1};
    const double dx[2] = {-1.0, 1.0};
    const int ix[2] = {ax.i0, ax.i1}, iy[2] = {ay.i0, ay.i1}, iz[2] = {az.i0, az.i1};
    double gx = 0.0, gy = 0.0, gz = 0.0;
    for (int c = 0; c < src.channels(); ++c) {
      const double up = upstream[i + c * n];
      if (up == 0.0) continue;
      const T* plane = src.data() + c * sn;
      T* gplane = g.grad_src.data() + c * sn;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
          for (int e = 0; e < 2; ++e) {
            const std::size_t idx = ix[e] + static_cast<std::size_t>(sx) * (iy[b] + static_cast<std::size_t>(sy) * iz[a]);
            const double v = plane[idx];
            const double w = wx[e] * wy[b] * wz[a];
            gplane[idx] += static_cast<T>(up * w);
            gx += up * v * dx[e] * wy[b] * wz[a];
            gy += up * v * wx[e] * dx[b] * wz[a];
            gz += up * v * wx[e] * wy[b] * dx[a];
          }
    }
    g.grad_map[i] = ax.frozen ? T(0) : static_cast<T>(gx);
    g.grad_map[i + n] = ay.frozen ? T(0) : static_cast<T>(gy);
    g.grad_map[i + 2 * n] = az.frozen ? T(0) : static_cast<T>(gz);
  }
  return g;
}

/// Resamples src through the affine alone. Builds the registration-stream
/// input only; final warped outputs always go through the composite map.
template <typename T>
Volume<T> affine_align(const Volume<T>& src, const AffineTransform& affine) {
  warp_counters().affine_aligns.fetch_add(1, std::memory_order_relaxed);
  return detail::pull(src, compose(affine, DisplacementField<T>::zeros(src.dims())));
}

}  // namespace segis
