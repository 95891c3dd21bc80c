#pragma once

// Evaluation metrics: overlap, density correlation, spatio-temporal
// consistency, scan-rescan agreement, measurement error and relative sample
// size, plus connected-component post-processing of predictions.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "volume.hpp"
#include "warp.hpp"

namespace segis {

namespace detail {

template <typename T>
void require_binary(const SegmentationSet<T>& s, const char* what) {
  if (s.kind() != SegKind::binary) throw DataError(std::string(what) + ": binary segmentation required");
}

template <typename T>
void require_channel(const SegmentationSet<T>& s, int k, const char* what) {
  if (k < 0 || k >= s.structures()) throw DataError(std::string(what) + ": channel " + std::to_string(k) + " out of range");
}

}  // namespace detail

/// 2|A n B| / (|A| + |B|) on channel k; two empty masks give 1.
template <typename T>
double dice_coefficient(const SegmentationSet<T>& a, const SegmentationSet<T>& b, int k = 0) {
  detail::require_binary(a, "dice");
  detail::require_binary(b, "dice");
  if (!a.dims().same_grid(b.dims())) throw DataError("dice: grid mismatch");
  detail::require_channel(a, k, "dice");
  detail::require_channel(b, k, "dice");
  const auto ca = a.volume().channel(k);
  const auto cb = b.volume().channel(k);
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < ca.size(); ++i) {
    const bool x = ca[i] != T(0), y = cb[i] != T(0);
    inter += x && y;
    na += x;
    nb += y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

enum class ScForm { cosine, literal };

/// Normalized inner product of two density maps. The literal form divides
/// by the product of per-map sums of |J| instead of L2 norms.
template <typename T>
double spatial_correlation(const Volume<T>& j_t, const Volume<T>& j_s, ScForm form = ScForm::cosine) {
  if (j_t.dims() != j_s.dims()) throw DataError("spatial_correlation: dims mismatch");
  double dot = 0.0, nt = 0.0, ns = 0.0;
  for (std::size_t i = 0; i < j_t.size(); ++i) {
    const double a = j_t[i], b = j_s[i];
    if (a < 0.0 || b < 0.0) throw DataError("spatial_correlation: density maps must be non-negative");
    dot += a * b;
    if (form == ScForm::cosine) {
      nt += a * a;
      ns += b * b;
    } else {
      nt += std::sqrt(a * a);
      ns += std::sqrt(b * b);
    }
  }
  if (nt == 0.0 || ns == 0.0) throw DataError("spatial_correlation: zero-norm input");
  return form == ScForm::cosine ? dot / (std::sqrt(nt) * std::sqrt(ns)) : dot / (nt * ns);
}

/// Warp channel k of a binary mask through a sampling map, re-binarized at 0.5.
template <typename T>
SegmentationSet<T> warp_mask(const SegmentationSet<T>& mask, const SamplingMap<T>& map, int k) {
  return binarize(trilinear_warp(mask.volume().channels_slice(k, 1), map));
}

/// Mean of the two directional Dice overlaps: pred_s warped onto pred_t via
/// map_fwd, and pred_t warped onto pred_s via map_rev.
template <typename T>
double stcs(const SegmentationSet<T>& pred_t, const SegmentationSet<T>& pred_s, const SamplingMap<T>& map_fwd,
            const std::optional<SamplingMap<T>>& map_rev, int k = 0) {
  detail::require_binary(pred_t, "stcs");
  detail::require_binary(pred_s, "stcs");
  detail::require_channel(pred_t, k, "stcs");
  detail::require_channel(pred_s, k, "stcs");
  if (!map_rev) throw DataError("stcs: reverse-direction field is required");
  const auto t_only = SegmentationSet<T>(pred_t.volume().channels_slice(k, 1), SegKind::binary);
  const auto s_only = SegmentationSet<T>(pred_s.volume().channels_slice(k, 1), SegKind::binary);
  const double fwd = dice_coefficient(t_only, warp_mask(pred_s, map_fwd, k), 0);
  const double rev = dice_coefficient(s_only, warp_mask(pred_t, *map_rev, k), 0);
  return 0.5 * (fwd + rev);
}

struct KappaResult {
  double kappa = 0.0;
  double p_o = 0.0;
  double p_e = 0.0;
  std::string label;
};

inline std::string kappa_label(double kappa) {
  if (kappa > 0.80) return "almost perfect";
  if (kappa > 0.60) return "substantial";
  if (kappa > 0.40) return "moderate";
  if (kappa > 0.20) return "fair";
  if (kappa > 0.0) return "slight";
  return "poor";
}

/// Cohen's kappa between two single-channel binary masks over the whole grid
/// or over the voxels where `omega` is nonzero.
template <typename T>
KappaResult cohens_kappa(std::span<const T> a, std::span<const T> b, const std::optional<std::span<const T>>& omega = {}) {
  if (a.size() != b.size()) throw DataError("kappa: size mismatch");
  if (omega && omega->size() != a.size()) throw DataError("kappa: mask size mismatch");
  double n = 0, agree = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (omega && (*omega)[i] == T(0)) continue;
    if ((a[i] != T(0) && a[i] != T(1)) || (b[i] != T(0) && b[i] != T(1))) throw DataError("kappa: binary masks required");
    const bool x = a[i] != T(0), y = b[i] != T(0);
    n += 1;
    agree += x == y;
    na += x;
    nb += y;
  }
  if (n == 0) throw DataError("kappa: empty domain");
  KappaResult r;
  r.p_o = agree / n;
  r.p_e = (na * nb + (n - na) * (n - nb)) / (n * n);
  if (r.p_e >= 1.0) throw DataError("kappa: degenerate agreement (p_e = 1)");
  r.kappa = (r.p_o - r.p_e) / (1.0 - r.p_e);
  r.label = kappa_label(r.kappa);
  return r;
}

template <typename T>
KappaResult cohens_kappa(const SegmentationSet<T>& a, const SegmentationSet<T>& b, int k = 0) {
  detail::require_binary(a, "kappa");
  detail::require_binary(b, "kappa");
  if (!a.dims().same_grid(b.dims())) throw DataError("kappa: grid mismatch");
  detail::require_channel(a, k, "kappa");
  detail::require_channel(b, k, "kappa");
  return cohens_kappa<T>(a.volume().channel(k), b.volume().channel(k));
}

/// 2|m_s - m_t| / (m_s + m_t) in percent.
inline double measurement_error(double m_s, double m_t) {
  if (!std::isfinite(m_s) || !std::isfinite(m_t)) throw DataError("measurement_error: non-finite input");
  const double den = m_s + m_t;
  if (den == 0.0) throw DataError("measurement_error: zero denominator");
  return 200.0 * std::abs(m_s - m_t) / den;
}

struct SampleSizeInput {
  double sigma_sq_i = 1.0, sigma_sq_j = 1.0;
  double rho_i = 0.0, rho_j = 0.0;
};

/// Relative sample size of pipeline i versus j, in percent.
inline double sample_size_percentage(const SampleSizeInput& in) {
  if (!(in.sigma_sq_i > 0.0) || !(in.sigma_sq_j > 0.0)) throw DataError("sample size: variances must be > 0");
  if (std::abs(in.rho_i) > 1.0 || std::abs(in.rho_j) > 1.0) throw DataError("sample size: correlation outside [-1, 1]");
  if (in.rho_j >= 1.0) throw DataError("sample size: rho_j = 1 (degenerate)");
  return 100.0 * ((in.sigma_sq_i * (1.0 - in.rho_i)) / (in.sigma_sq_j * (1.0 - in.rho_j)));
}

/// Pearson correlation of paired samples.
inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw DataError("pearson: need at least two paired values");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw DataError("pearson: zero variance");
  return sab / std::sqrt(saa * sbb);
}

/// Unbiased variance of both sessions' measures taken together.
inline double pooled_variance(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> all(a);
  all.insert(all.end(), b.begin(), b.end());
  if (all.size() < 2) throw DataError("pooled_variance: need at least two values");
  const double m = std::accumulate(all.begin(), all.end(), 0.0) / static_cast<double>(all.size());
  double s = 0;
  for (double v : all) s += (v - m) * (v - m);
  return s / static_cast<double>(all.size() - 1);
}

struct TractMeasures {
  double volume_ml = 0.0;
  double median_fa = 0.0;
  double median_md = 0.0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw DataError("median of empty set");
  const std::size_t h = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h), v.end());
  const double hi = v[h];
  if (v.size() % 2) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h)));
}

/// Volume in ml plus medians of nonzero FA and MD under channel k of a mask.
template <typename T>
TractMeasures tract_measures(const SegmentationSet<T>& seg, const Volume<T>& fa, const Volume<T>& md, int k = 0) {
  detail::require_binary(seg, "tract_measures");
  detail::require_channel(seg, k, "tract_measures");
  if (fa.channels() != 1 || md.channels() != 1) throw DataError("tract_measures: FA/MD must be single-channel");
  if (!fa.dims().same_grid(seg.dims()) || !md.dims().same_grid(seg.dims())) throw DataError("tract_measures: grid mismatch");
  const auto m = seg.volume().channel(k);
  std::vector<double> fav, mdv;
  std::size_t count = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] == T(0)) continue;
    ++count;
    if (fa[i] != T(0)) fav.push_back(fa[i]);
    if (md[i] != T(0)) mdv.push_back(md[i]);
  }
  if (count == 0) throw DataError("tract_measures: empty mask");
  if (fav.empty() || mdv.empty()) throw DataError("tract_measures: all-zero values under mask");
  const auto& sp = seg.volume().spacing();
  return {static_cast<double>(count) * sp[0] * sp[1] * sp[2] / 1000.0, median(std::move(fav)), median(std::move(mdv))};
}

enum class SplitAxis { left_right, anterior_posterior };

struct LabeledMask {
  std::string label;  // right/left or posterior/anterior
  std::size_t size = 0;
  std::array<double, 3> centroid{};
  SegmentationSet<float> mask;
};

struct PostprocessResult {
  std::vector<LabeledMask> masks;
  bool warning = false;
};

/// 26-connected components of a single-channel binary span; returns labels
/// (0 = background, 1..n) in order of first appearance.
inline std::vector<int> connected_components(std::span<const float> m, const Dims& d, int* count = nullptr) {
  std::vector<int> lab(m.size(), 0);
  std::vector<std::size_t> stack;
  int next = 0;
  const auto idx = [&](int x, int y, int z) { return std::size_t(x) + std::size_t(d.x) * (std::size_t(y) + std::size_t(d.y) * std::size_t(z)); };
  for (std::size_t s = 0; s < m.size(); ++s) {
    if (m[s] == 0.0f || lab[s]) continue;
    lab[s] = ++next;
    stack.push_back(s);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const int x = static_cast<int>(i % d.x), y = static_cast<int>((i / d.x) % d.y), z = static_cast<int>(i / (std::size_t(d.x) * d.y));
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int X = x + dx, Y = y + dy, Z = z + dz;
            if (X < 0 || Y < 0 || Z < 0 || X >= d.x || Y >= d.y || Z >= d.z) continue;
            const std::size_t j = idx(X, Y, Z);
            if (m[j] == 0.0f || lab[j]) continue;
            lab[j] = next;
            stack.push_back(j);
          }
    }
  }
  if (count) *count = next;
  return lab;
}

/// Binarize channel k at 0.5, keep the two largest 26-connected components
/// and name them by centroid: along x the smaller coordinate is "right",
/// along y the smaller coordinate is "posterior". Masks are returned in
/// that order. Fewer than two components set the warning flag.
inline PostprocessResult postprocess_prediction(const SegmentationSet<float>& prob, int k, SplitAxis axis) {
  detail::require_channel(prob, k, "postprocess");
  const SegmentationSet<float> bin = binarize(prob.volume().channels_slice(k, 1));
  const Dims d = bin.dims();
  int n = 0;
  const auto lab = connected_components(bin.volume().channel(0), d, &n);
  std::vector<std::size_t> size(n + 1, 0);
  std::vector<std::array<double, 3>> sum(n + 1, {0, 0, 0});
  for (std::size_t i = 0; i < lab.size(); ++i) {
    if (!lab[i]) continue;
    ++size[lab[i]];
    sum[lab[i]][0] += static_cast<double>(i % d.x);
    sum[lab[i]][1] += static_cast<double>((i / d.x) % d.y);
    sum[lab[i]][2] += static_cast<double>(i / (std::size_t(d.x) * d.y));
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 1);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return size[a] > size[b]; });
  if (order.size() > 2) order.resize(2);

  PostprocessResult res;
  res.warning = order.size() < 2;
  const int ax = axis == SplitAxis::left_right ? 0 : 1;
  for (int c : order) {
    LabeledMask lm;
    lm.size = size[c];
    for (int a = 0; a < 3; ++a) lm.centroid[a] = sum[c][a] / static_cast<double>(size[c]);
    Volume<float> v(d.with_channels(1), 0.0f, prob.volume().spacing());
    for (std::size_t i = 0; i < lab.size(); ++i)
      if (lab[i] == c) v[i] = 1.0f;
    lm.mask = SegmentationSet<float>(std::move(v), SegKind::binary);
    res.masks.push_back(std::move(lm));
  }
  std::stable_sort(res.masks.begin(), res.masks.end(),
                   [&](const LabeledMask& a, const LabeledMask& b) { return a.centroid[ax] < b.centroid[ax]; });
  const char* lo = axis == SplitAxis::left_right ? "right" : "posterior";
  const char* hi = axis == SplitAxis::left_right ? "left" : "anterior";
  if (res.masks.size() == 2) {
    res.masks[0].label = lo;
    res.masks[1].label = hi;
  } else if (res.masks.size() == 1) {
    const double mid = 0.5 * ((ax == 0 ? d.x : d.y) - 1);
    res.masks[0].label = res.masks[0].centroid[ax] <= mid ? lo : hi;
  }
  return res;
}

/// Mean Euclidean distance between two displacement fields.
template <typename T>
double mean_endpoint_error(const DisplacementField<T>& a, const DisplacementField<T>& b) {
  if (a.dims() != b.dims()) throw DataError("endpoint error: dims mismatch");
  const std::size_t n = a.field.spatial_size();
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double e = 0;
    for (int c = 0; c < 3; ++c) {
      const double d = double(a.field[i + c * n]) - double(b.field[i + c * n]);
      e += d * d;
    }
    s += std::sqrt(e);
  }
  return s / static_cast<double>(n);
}

template <typename T>
double mean_norm(const DisplacementField<T>& u) {
  return mean_endpoint_error(u, DisplacementField<T>::zeros(u.dims()));
}

}  // namespace segis
