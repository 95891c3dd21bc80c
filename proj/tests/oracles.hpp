#pragma once

// Brute-force voxel-loop reference implementations of the evaluation
// metrics, written independently of the library code.

#include <algorithm>
#include <cmath>
#include <vector>

#include "segis/volume.hpp"
#include "segis/warp.hpp"

namespace segis::oracle {

inline double oracle_dice(const Volume<double>& a, const Volume<double>& b, int k) {
  double inter = 0, sa = 0, sb = 0;
  for (int z = 0; z < a.nz(); ++z)
    for (int y = 0; y < a.ny(); ++y)
      for (int x = 0; x < a.nx(); ++x) {
        inter += a(x, y, z, k) * b(x, y, z, k);
        sa += a(x, y, z, k);
        sb += b(x, y, z, k);
      }
  return sa + sb == 0 ? 1.0 : 2 * inter / (sa + sb);
}

/// Trilinear sample with border clamping, written from scratch.
inline double oracle_sample(const Volume<double>& v, double cx, double cy, double cz) {
  const auto clampc = [](double c, int n) { return std::min(std::max(c, 0.0), double(n - 1)); };
  cx = clampc(cx, v.nx());
  cy = clampc(cy, v.ny());
  cz = clampc(cz, v.nz());
  const int x0 = int(std::floor(cx)), y0 = int(std::floor(cy)), z0 = int(std::floor(cz));
  const int x1 = std::min(x0 + 1, v.nx() - 1), y1 = std::min(y0 + 1, v.ny() - 1), z1 = std::min(z0 + 1, v.nz() - 1);
  const double fx = cx - x0, fy = cy - y0, fz = cz - z0;
  double s = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx)
        s += (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz) *
             v(dx ? x1 : x0, dy ? y1 : y0, dz ? z1 : z0);
  return s;
}

inline Volume<double> oracle_warp_binarize(const Volume<double>& m, const SamplingMap<double>& map) {
  Volume<double> out(m.dims());
  for (int z = 0; z < m.nz(); ++z)
    for (int y = 0; y < m.ny(); ++y)
      for (int x = 0; x < m.nx(); ++x)
        out(x, y, z) = oracle_sample(m, map.coords(x, y, z, 0), map.coords(x, y, z, 1), map.coords(x, y, z, 2)) >= 0.5;
  return out;
}

inline double oracle_kappa(const Volume<double>& a, const Volume<double>& b) {
  double n11 = 0, n10 = 0, n01 = 0, n00 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] && b[i]) ++n11;
    else if (a[i]) ++n10;
    else if (b[i]) ++n01;
    else ++n00;
  }
  const double n = n11 + n10 + n01 + n00;
  const double po = (n11 + n00) / n;
  const double pe = ((n11 + n10) / n) * ((n11 + n01) / n) + ((n00 + n01) / n) * ((n00 + n10) / n);
  return (po - pe) / (1 - pe);
}

/// Pearson correlation from textbook single-pass sums.
inline double oracle_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  const double m = double(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  return (m * sxy - sx * sy) / std::sqrt((m * sxx - sx * sx) * (m * syy - sy * sy));
}

inline double oracle_pooled_variance(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0, ss = 0;
  for (double v : x) s += v, ss += v * v;
  for (double v : y) s += v, ss += v * v;
  const double m = double(x.size() + y.size());
  return (ss - s * s / m) / (m - 1);
}

}  // namespace segis::oracle
