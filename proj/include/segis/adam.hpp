#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "network.hpp"

namespace segis {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam update of one flat buffer at 1-based step `t`.
template <typename T>
void adam_update(std::span<T> params, std::span<const T> grads, std::span<T> m, std::span<T> v, std::int64_t t,
                 double lr, const AdamHyper& h = {}) {
  if (params.size() != grads.size() || params.size() != m.size() || params.size() != v.size())
    throw std::invalid_argument("adam: shape mismatch");
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double mi = h.beta1 * m[i] + (1.0 - h.beta1) * g;
    const double vi = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    params[i] = static_cast<T>(params[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + h.epsilon));
  }
}

/// First/second moments shaped like a stream's parameters.
template <typename T>
struct OptimizerState {
  typename Stream<T>::Params m;
  typename Stream<T>::Params v;
  std::int64_t step = 0;
  AdamHyper hyper;

  OptimizerState() = default;
  explicit OptimizerState(const Stream<T>& s) : m(s.zero_grads()), v(s.zero_grads()) {}
};

template <typename T>
void adam_step(Stream<T>& stream, const typename Stream<T>::Params& grads, OptimizerState<T>& state, double lr) {
  auto& params = stream.mutable_params();
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw std::invalid_argument("adam: layer count mismatch");
  ++state.step;
  for (std::size_t l = 0; l < params.size(); ++l) {
    auto upd = [&](std::vector<T>& p, const std::vector<T>& g, std::vector<T>& m, std::vector<T>& v) {
      adam_update<T>(p, g, m, v, state.step, lr, state.hyper);
    };
    upd(params[l].kernels, grads[l].kernels, state.m[l].kernels, state.v[l].kernels);
    upd(params[l].bias, grads[l].bias, state.m[l].bias, state.v[l].bias);
    upd(params[l].norm_scale, grads[l].norm_scale, state.m[l].norm_scale, state.v[l].norm_scale);
    upd(params[l].norm_shift, grads[l].norm_shift, state.m[l].norm_shift, state.v[l].norm_shift);
  }
}

}  // namespace segis
