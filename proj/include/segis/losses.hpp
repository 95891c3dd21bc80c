#pragma once

// The four loss terms of the joint objective and their weighted sum.
// Every term returns its value together with the analytic gradient.
// Scalar reductions accumulate in double regardless of T.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "volume.hpp"
#include "warp.hpp"

namespace segis {

inline constexpr double kDiceSmoothing = 1e-7;
inline constexpr double kWarpedSegClip = 1e-7;

template <typename T>
struct LossGrad {
  double value = 0.0;
  Volume<T> grad;
};

/// -(2/K) * sum_k <S_k, P_k> / (|S_k|^2 + |P_k|^2 + eps); gradient w.r.t. pred.
template <typename T>
LossGrad<T> soft_dice_loss(const Volume<T>& pred, const Volume<T>& truth) {
  if (pred.dims() != truth.dims())
    throw DataError("soft dice: dims/K mismatch " + pred.dims().str() + " vs " + truth.dims().str());
  const int K = pred.channels();
  const std::size_t n = pred.spatial_size();
  LossGrad<T> out{0.0, Volume<T>(pred.dims(), T(0), pred.spacing())};
  for (int k = 0; k < K; ++k) {
    const T* p = pred.data() + k * n;
    const T* s = truth.data() + k * n;
    double num = 0.0, ss = 0.0, pp = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      num += static_cast<double>(p[i]) * s[i];
      ss += static_cast<double>(s[i]) * s[i];
      pp += static_cast<double>(p[i]) * p[i];
    }
    const double den = ss + pp + kDiceSmoothing;
    out.value -= 2.0 / K * num / den;
    const double a = -2.0 / K / den;
    const double b = 2.0 / K * num / (den * den) * 2.0;
    T* g = out.grad.data() + k * n;
    for (std::size_t i = 0; i < n; ++i) g[i] = static_cast<T>(a * s[i] + b * p[i]);
  }
  return out;
}

template <typename T>
LossGrad<T> soft_dice_loss(const SegmentationSet<T>& pred, const SegmentationSet<T>& truth) {
  return soft_dice_loss(pred.volume(), truth.volume());
}

/// Mean squared error over every voxel and channel; gradient w.r.t. warped.
template <typename T>
LossGrad<T> mse_loss(const Volume<T>& target, const Volume<T>& warped) {
  if (target.dims() != warped.dims())
    throw DataError("mse: dims mismatch " + target.dims().str() + " vs " + warped.dims().str());
  LossGrad<T> out{0.0, Volume<T>(warped.dims(), T(0), warped.spacing())};
  const double inv_n = 1.0 / static_cast<double>(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = static_cast<double>(warped[i]) - target[i];
    out.value += d * d;
    out.grad[i] = static_cast<T>(2.0 * d * inv_n);
  }
  out.value *= inv_n;
  return out;
}

/// (1/|grid|) * sum_x ||grad u(x)||^2 with forward differences; the trailing
/// slice along each axis contributes a zero difference.
template <typename T>
LossGrad<T> smoothness_loss(const DisplacementField<T>& u) {
  const Dims d = u.dims();
  if (d.x < 2 || d.y < 2 || d.z < 2) throw DataError("smoothness: each spatial dim must be >= 2, got " + d.str());
  const Volume<T>& f = u.field;
  LossGrad<T> out{0.0, Volume<T>(d, T(0), f.spacing())};
  const double inv_n = 1.0 / static_cast<double>(d.spatial());
  const std::size_t strides[3] = {1, static_cast<std::size_t>(d.x), static_cast<std::size_t>(d.x) * d.y};
  for (int c = 0; c < 3; ++c) {
    const std::size_t base = c * d.spatial();
    for (int z = 0; z < d.z; ++z)
      for (int y = 0; y < d.y; ++y)
        for (int x = 0; x < d.x; ++x) {
          const std::size_t i = base + f.index(x, y, z);
          const bool has_next[3] = {x + 1 < d.x, y + 1 < d.y, z + 1 < d.z};
          for (int axis = 0; axis < 3; ++axis) {
            if (!has_next[axis]) continue;
            const std::size_t j = i + strides[axis];
            const double diff = static_cast<double>(f[j]) - f[i];
            out.value += diff * diff;
            out.grad[j] += static_cast<T>(2.0 * diff * inv_n);
            out.grad[i] -= static_cast<T>(2.0 * diff * inv_n);
          }
        }
  }
  out.value *= inv_n;
  return out;
}

template <typename T>
struct CompositeDiceResult {
  double value = 0.0;
  Volume<T> grad_pred;  // source space
  Volume<T> grad_map;   // sampling-map gradient
};

/// soft_dice(truth_t, clip(warp(pred_s, map))). Couples the two streams: the
/// gradient reaches both the source prediction and the sampling map.
/// `warped_pred` may supply the already-warped prediction to avoid a second
/// interpolation.
template <typename T>
CompositeDiceResult<T> composite_dice_loss(const Volume<T>& truth_t, const Volume<T>& pred_s, const SamplingMap<T>& map,
                                           const Volume<T>* warped_pred = nullptr) {
  if (truth_t.channels() != pred_s.channels())
    throw DataError("composite dice: K mismatch " + truth_t.dims().str() + " vs " + pred_s.dims().str());
  if (!truth_t.dims().same_grid(map.dims())) throw DataError("composite dice: truth and map grids differ");
  Volume<T> warped = warped_pred ? *warped_pred : trilinear_warp(pred_s, map);
  Volume<T> clipped = warped;
  for (auto& v : clipped.voxels()) v = std::clamp(v, static_cast<T>(kWarpedSegClip), static_cast<T>(1.0 - kWarpedSegClip));
  LossGrad<T> dice = soft_dice_loss(clipped, truth_t);
  // The clamp passes gradient only where it was inactive.
  for (std::size_t i = 0; i < warped.size(); ++i)
    if (warped[i] != clipped[i]) dice.grad[i] = T(0);
  WarpGrad<T> wg = trilinear_warp_grad(pred_s, map, dice.grad);
  return {dice.value, std::move(wg.grad_src), std::move(wg.grad_map)};
}

template <typename T>
CompositeDiceResult<T> composite_dice_loss(const SegmentationSet<T>& truth_t, const SegmentationSet<T>& pred_s,
                                           const SamplingMap<T>& map) {
  return composite_dice_loss(truth_t.volume(), pred_s.volume(), map);
}

/// alpha ramps linearly per epoch up to a cap, beta tracks alpha, gamma fixed.
struct WeightSchedule {
  double alpha0 = 10.0;
  double alpha_step = 4.0;
  double alpha_max = 100.0;
  double beta_ratio = 0.01;
  double gamma = 1.0;

  static WeightSchedule constant(double alpha, double beta_ratio = 0.01, double gamma = 1.0) {
    return {alpha, 0.0, alpha, beta_ratio, gamma};
  }

  double alpha(int epoch) const {
    if (epoch < 0) throw std::invalid_argument("epoch must be non-negative");
    return std::min(alpha0 + alpha_step * epoch, alpha_max);
  }
  double beta(int epoch) const { return beta_ratio * alpha(epoch); }
};

struct LossBreakdown {
  double l_seg = 0.0, l_reg = 0.0, l_def = 0.0, l_com = 0.0;
  double alpha = 0.0, beta = 0.0, gamma = 0.0;
  double total = 0.0;
};

inline LossBreakdown total_loss(double l_seg, double l_reg, double l_def, double l_com, const WeightSchedule& schedule,
                                int epoch) {
  if (epoch < 0) throw std::invalid_argument("total_loss: negative epoch");
  LossBreakdown b{l_seg, l_reg, l_def, l_com, schedule.alpha(epoch), schedule.beta(epoch), schedule.gamma, 0.0};
  b.total = l_seg + b.alpha * l_reg + b.beta * l_def + b.gamma * l_com;
  return b;
}

}  // namespace segis
