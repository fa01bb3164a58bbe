#pragma once

// Central finite-difference gradient checks for the double-precision layer
// kernels. Each check builds a scalar probe L = sum(out * g) with a random
// g, so d(L)/d(out) = g, and compares the analytic gradients the backward
// kernel accumulates against (L(x + h) - L(x - h)) / 2h. The reported error
// is ||analytic - numeric|| / (||analytic|| + ||numeric||) over all checked
// entries.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lseg/neural/layers.hpp"
#include "lseg/neural/loss.hpp"
#include "lseg/neural/network.hpp"
#include "lseg/rng.hpp"

namespace gradcheck {

using lseg::Index3;
using lseg::Rng;
using Map = lseg::nn::FeatureMap<double>;

struct ErrorNorm {
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  void add(double analytic, double numeric) {
    diff2 += (analytic - numeric) * (analytic - numeric);
    a2 += analytic * analytic;
    n2 += numeric * numeric;
  }
  double relative() const {
    const double den = std::sqrt(a2) + std::sqrt(n2);
    return den == 0.0 ? 0.0 : std::sqrt(diff2) / den;
  }
};

inline Map random_map(int c, Index3 d, Rng& rng, double away_from_zero = 0.0) {
  Map m(c, d);
  for (auto& v : m.data) {
    double x = rng.normal();
    if (away_from_zero > 0.0 && std::fabs(x) < away_from_zero) x = x < 0 ? x - away_from_zero : x + away_from_zero;
    v = x;
  }
  return m;
}

inline double dot(const Map& a, const Map& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

inline Index3 random_dims(Rng& rng, int max_side, int multiple = 1) {
  Index3 d{};
  for (auto& a : d) a = multiple * (1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_side / multiple))));
  return d;
}

/// Checks every entry of `x` (a vector of doubles that `loss` reads) against
/// the analytic gradient `grad`.
inline void probe(std::vector<double>& x, const std::vector<double>& grad, const std::function<double()>& loss,
                  ErrorNorm& err, double h = 1e-6) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double lp = loss();
    x[i] = keep - h;
    const double lm = loss();
    x[i] = keep;
    err.add(grad[i], (lp - lm) / (2.0 * h));
  }
}

/// conv 3^3 (or 1^3): input, weight and bias gradients.
inline double check_conv(Rng& rng, int k) {
  using namespace lseg::nn;
  const Index3 d = random_dims(rng, 4);
  const int cin = 1 + static_cast<int>(rng.below(3)), cout = 1 + static_cast<int>(rng.below(3));
  Map in = random_map(cin, d, rng);
  std::vector<double> w(static_cast<std::size_t>(cout) * cin * k * k * k), b(cout);
  for (auto& v : w) v = rng.normal();
  for (auto& v : b) v = rng.normal();
  const Map g = random_map(cout, d, rng);
  Map din(cin, d);
  std::vector<double> dw(w.size()), db(b.size());
  conv_backward(in, w.data(), k, g, &din, dw.data(), db.data());
  auto loss = [&] { return dot(conv_forward(in, w, b, cout, k), g); };
  ErrorNorm e;
  probe(in.data, din.data, loss, e);
  probe(w, dw, loss, e);
  probe(b, db, loss, e);
  return e.relative();
}

inline double check_batchnorm(Rng& rng, bool training) {
  using namespace lseg::nn;
  const Index3 d = random_dims(rng, 4);
  const int c = 1 + static_cast<int>(rng.below(3));
  Map in = random_map(c, d, rng);
  // keep at least two distinct values per channel so the variance is not 0
  for (int ch = 0; ch < c; ++ch) in.at(ch, 0) += 3.0;
  std::vector<double> gamma(c), beta(c), rm(c), rv(c);
  for (auto& v : gamma) v = rng.uniform(0.5, 1.5);
  for (auto& v : beta) v = rng.normal();
  for (auto& v : rm) v = rng.normal();
  for (auto& v : rv) v = rng.uniform(0.5, 2.0);
  const Map g = random_map(c, d, rng);
  BatchNormConfig cfg;
  auto run = [&](BatchNormCache<double>* cache) {
    auto m = rm, v = rv;  // running stats are state, not inputs
    return batchnorm_forward(in, gamma.data(), beta.data(), m.data(), v.data(), training, cfg, cache);
  };
  BatchNormCache<double> cache;
  run(&cache);
  Map din(c, d);
  std::vector<double> dg(c), dbt(c);
  batchnorm_backward(cache, gamma.data(), training, g, din, dg.data(), dbt.data());
  auto loss = [&] { return dot(run(nullptr), g); };
  ErrorNorm e;
  probe(in.data, din.data, loss, e);
  probe(gamma, dg, loss, e);
  probe(beta, dbt, loss, e);
  return e.relative();
}

inline double check_relu(Rng& rng) {
  using namespace lseg::nn;
  const Index3 d = random_dims(rng, 4);
  const int c = 1 + static_cast<int>(rng.below(3));
  Map in = random_map(c, d, rng, 1e-3);
  const Map g = random_map(c, d, rng);
  Map din(c, d);
  relu_backward(in, g, din);
  ErrorNorm e;
  probe(in.data, din.data, [&] { return dot(relu_forward(in), g); }, e);
  return e.relative();
}

inline double check_dropout(Rng& rng) {
  using namespace lseg::nn;
  const Index3 d = random_dims(rng, 4);
  const int c = 1 + static_cast<int>(rng.below(3));
  const double rate = rng.uniform(0.0, 0.6);
  const std::uint64_t seed = rng.bits();
  Map in = random_map(c, d, rng);
  const Map g = random_map(c, d, rng);
  std::vector<std::uint8_t> mask;
  dropout_forward(in, rate, true, seed, &mask);
  Map din(c, d);
  dropout_backward(mask, rate, g, din);
  ErrorNorm e;
  probe(in.data, din.data, [&] { return dot(dropout_forward(in, rate, true, seed, nullptr), g); }, e);
  return e.relative();
}

inline double check_softmax(Rng& rng) {
  using namespace lseg::nn;
  const Index3 d = random_dims(rng, 4);
  const int c = 2 + static_cast<int>(rng.below(4));
  Map in = random_map(c, d, rng);
  const Map g = random_map(c, d, rng);
  const Map out = softmax_forward(in);
  Map din(c, d);
  softmax_backward(out, g, din);
  ErrorNorm e;
  probe(in.data, din.data, [&] { return dot(softmax_forward(in), g); }, e);
  return e.relative();
}

inline double check_concat(Rng& rng) {
  using namespace lseg::nn;
  const Index3 d = random_dims(rng, 4);
  const int ca = 1 + static_cast<int>(rng.below(3)), cb = 1 + static_cast<int>(rng.below(3));
  Map a = random_map(ca, d, rng), b = random_map(cb, d, rng);
  const Map g = random_map(ca + cb, d, rng);
  Map da(ca, d), db(cb, d);
  concat_backward(g, {&da, &db});
  auto loss = [&] { return dot(concat_forward<double>({&a, &b}), g); };
  ErrorNorm e;
  probe(a.data, da.data, loss, e);
  probe(b.data, db.data, loss, e);
  return e.relative();
}

inline double check_downsample(Rng& rng) {
  using namespace lseg::nn;
  const int f = rng.below(2) ? 2 : 4;
  const Index3 d = random_dims(rng, 2 * f, f);
  const int c = 1 + static_cast<int>(rng.below(2));
  Map in = random_map(c, d, rng);
  const Map out = downsample_forward(in, f);
  const Map g = random_map(c, out.dims, rng);
  Map din(c, d);
  downsample_backward(g, f, din);
  ErrorNorm e;
  probe(in.data, din.data, [&] { return dot(downsample_forward(in, f), g); }, e);
  return e.relative();
}

inline double check_upsample(Rng& rng) {
  using namespace lseg::nn;
  const int f = rng.below(2) ? 2 : 4;
  const Index3 d = random_dims(rng, 3);
  const int c = 1 + static_cast<int>(rng.below(2));
  Map in = random_map(c, d, rng);
  const Map out = upsample_forward(in, f);
  const Map g = random_map(c, out.dims, rng);
  Map din(c, d);
  upsample_backward(g, f, din);
  ErrorNorm e;
  probe(in.data, din.data, [&] { return dot(upsample_forward(in, f), g); }, e);
  return e.relative();
}

/// Dice + BCE loss gradient with respect to a strictly interior prediction.
inline double check_loss(Rng& rng) {
  using namespace lseg::nn;
  const Index3 d = random_dims(rng, 3);
  const int c = 2 + static_cast<int>(rng.below(3));
  Map pred(c, d);
  for (auto& v : pred.data) v = rng.uniform(0.05, 0.95);
  Map target(c, d);
  for (std::size_t v = 0; v < target.voxels(); ++v) target.at(static_cast<int>(rng.below(c)), v) = 1.0;
  const auto r = loss_dice_bce(pred, target);
  ErrorNorm e;
  probe(pred.data, r.grad.data, [&] { return loss_dice_bce(pred, target).value; }, e);
  return e.relative();
}

/// Whole network (train mode, fixed dropout seed): every parameter.
inline double check_network(Rng& rng, lseg::nn::Architecture kind) {
  using namespace lseg::nn;
  NetworkSpec s;
  s.kind = kind;
  s.in_channels = 2;
  s.out_classes = 3;
  s.dpn_filters = 2;
  s.unet_base_filters = 2;
  s.levels = 2;
  s.dropout_rate = 0.2;
  Network<double> net(s, rng.bits());
  const Index3 d{4, 4, 2};
  const Map x = random_map(2, d, rng);
  Map target(3, d);
  for (std::size_t v = 0; v < target.voxels(); ++v) target.at(static_cast<int>(rng.below(3)), v) = 1.0;
  const std::uint64_t seed = rng.bits();
  auto loss = [&] {
    auto keep = net.params().buffers;
    const double l = loss_dice_bce(net.forward(x, Mode::train, seed), target).value;
    net.params().buffers = keep;
    return l;
  };
  auto keep = net.params().buffers;
  const auto r = loss_dice_bce(net.forward(x, Mode::train, seed), target);
  net.params().buffers = keep;
  net.params().zero_grad();
  net.backward(r.grad);
  std::vector<double> grads = net.params().grads;
  ErrorNorm e;
  probe(net.params().values, grads, loss, e);
  return e.relative();
}

}  // namespace gradcheck
