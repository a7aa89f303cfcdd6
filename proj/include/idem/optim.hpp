#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace idem {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment estimates over a flat parameter vector.
template <typename T>
struct AdamState {
  std::vector<T> m, v;
  std::uint64_t step = 0;

  bool operator==(const AdamState&) const = default;
};

/// One bias-corrected Adam update, in place.
template <typename T>
void adam_update(std::span<T> params, std::span<const T> grads, AdamState<T>& state, double lr, const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam: parameter/gradient size mismatch");
  if (state.m.empty()) {
    state.m.assign(params.size(), T(0));
    state.v.assign(params.size(), T(0));
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam: optimizer state does not match parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T correction1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T correction2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T rate = static_cast<T>(lr), eps = static_cast<T>(cfg.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
    const T m_hat = state.m[i] / correction1;
    const T v_hat = state.v[i] / correction2;
    params[i] -= rate * m_hat / (std::sqrt(v_hat) + eps);
  }
}

}  // namespace idem
