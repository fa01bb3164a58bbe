#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "../error.hpp"
#include "tensor.hpp"

namespace lseg::nn {

struct LossConfig {
  double log_eps = 1e-7;      // added inside the log
  double clip = 1e-7;         // BCE clips predictions to [clip, 1 - clip]
  double dice_smooth = 1.0;   // soft Dice numerator/denominator smoothing
};

template <typename T>
struct LossResult {
  double value = 0.0;
  double mean_dice = 0.0;
  double bce = 0.0;
  FeatureMap<T> grad;  // d(value)/d(pred)
};

/// Log-scaled Dice + BCE:
///   L = log((1 - mean_c Dice_c + BCE) / 2 + eps)
/// with soft Dice_c = (2 sum(y p) + s) / (sum y + sum p + s) and BCE the mean
/// binary cross-entropy over all voxels and channels.
template <typename T>
LossResult<T> loss_dice_bce(const FeatureMap<T>& pred, const FeatureMap<T>& target, const LossConfig& cfg = {}) {
  if (!pred.same_shape(target)) throw GeometryError("loss: prediction and target shapes differ");
  const int nc = pred.channels;
  const std::size_t nv = pred.voxels();
  for (std::size_t v = 0; v < nv; ++v) {
    double s = 0.0;
    for (int c = 0; c < nc; ++c) {
      const T y = target.at(c, v);
      if (y != T{0} && y != T{1}) throw ArgumentError("loss: target is not one-hot");
      s += y;
    }
    if (s != 1.0) throw ArgumentError("loss: target is not one-hot");
  }

  const double n_total = static_cast<double>(nv) * nc;
  std::vector<double> syp(nc, 0.0), sy(nc, 0.0), sp(nc, 0.0);
  double bce_sum = 0.0;
  for (int c = 0; c < nc; ++c) {
    const T* p = pred.channel(c);
    const T* y = target.channel(c);
    for (std::size_t v = 0; v < nv; ++v) {
      syp[c] += static_cast<double>(y[v]) * p[v];
      sy[c] += y[v];
      sp[c] += p[v];
      const double q = std::clamp(static_cast<double>(p[v]), cfg.clip, 1.0 - cfg.clip);
      bce_sum += y[v] != T{0} ? std::log(q) : std::log(1.0 - q);
    }
  }
  const double bce = -bce_sum / n_total;
  double dice_sum = 0.0;
  std::vector<double> den(nc), num(nc);
  for (int c = 0; c < nc; ++c) {
    num[c] = 2.0 * syp[c] + cfg.dice_smooth;
    den[c] = sy[c] + sp[c] + cfg.dice_smooth;
    dice_sum += num[c] / den[c];
  }
  const double mean_dice = dice_sum / nc;
  const double arg = (1.0 - mean_dice + bce) / 2.0 + cfg.log_eps;

  LossResult<T> r;
  r.value = std::log(arg);
  r.mean_dice = mean_dice;
  r.bce = bce;
  r.grad = FeatureMap<T>(nc, pred.dims);
  const double outer = 0.5 / arg;
  for (int c = 0; c < nc; ++c) {
    const T* p = pred.channel(c);
    const T* y = target.channel(c);
    T* g = r.grad.channel(c);
    const double inv_den2 = 1.0 / (den[c] * den[c]);
    for (std::size_t v = 0; v < nv; ++v) {
      const double ddice = (2.0 * y[v] * den[c] - num[c]) * inv_den2;
      const double pv = p[v];
      double dbce = 0.0;
      if (pv > cfg.clip && pv < 1.0 - cfg.clip)
        dbce = -(y[v] != T{0} ? 1.0 / pv : -1.0 / (1.0 - pv)) / n_total;
      g[v] = static_cast<T>(outer * (-ddice / nc + dbce));
    }
  }
  return r;
}

}  // namespace lseg::nn
