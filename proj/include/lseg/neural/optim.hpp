#pragma once

#include <cmath>

#include "../error.hpp"
#include "params.hpp"

namespace lseg::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-7;
};

/// Raised when a gradient is NaN/inf; training stops with this diagnostic.
class NonFiniteGradient : public Error {
 public:
  using Error::Error;
};

namespace detail {
template <typename T>
void require_finite_grads(const ParamStore<T>& s) {
  for (std::size_t i = 0; i < s.grads.size(); ++i)
    if (!std::isfinite(static_cast<double>(s.grads[i])))
      throw NonFiniteGradient("non-finite gradient at parameter " + std::to_string(i));
}
}  // namespace detail

/// Adam with bias correction.
template <typename T>
void adam_step(ParamStore<T>& s, const AdamConfig& c = {}) {
  detail::require_finite_grads(s);
  ++s.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double g = s.grads[i];
    const double m = c.beta1 * s.m[i] + (1.0 - c.beta1) * g;
    const double v = c.beta2 * s.v[i] + (1.0 - c.beta2) * g * g;
    s.m[i] = static_cast<T>(m);
    s.v[i] = static_cast<T>(v);
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    s.values[i] = static_cast<T>(s.values[i] - c.lr * mhat / (std::sqrt(vhat) + c.eps));
  }
}

/// Adamax: the second moment is replaced by a running infinity norm
/// u = max(beta2 u, |g|); only the first moment is bias-corrected.
template <typename T>
void adamax_step(ParamStore<T>& s, const AdamConfig& c = {}) {
  detail::require_finite_grads(s);
  ++s.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double g = s.grads[i];
    const double m = c.beta1 * s.m[i] + (1.0 - c.beta1) * g;
    const double u = std::max(c.beta2 * s.v[i], std::fabs(g));
    s.m[i] = static_cast<T>(m);
    s.v[i] = static_cast<T>(u);
    s.values[i] = static_cast<T>(s.values[i] - (c.lr / bc1) * m / (u + c.eps));
  }
}

}  // namespace lseg::nn
