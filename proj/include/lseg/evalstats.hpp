#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "error.hpp"
#include "taxonomy.hpp"
#include "volgrid.hpp"

namespace lseg {

/// Dice overlap of one label. Both sets empty counts as a perfect match.
inline double dice(const LabelGrid& a, const LabelGrid& b, LabelId label) {
  require_same_lattice(a, b, "dice");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool ia = a[i] == label;
    const bool ib = b[i] == label;
    na += ia;
    nb += ib;
    both += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

/// Dice of the union-of-foreground masks.
inline double whole_dice(const LabelGrid& a, const LabelGrid& b) {
  require_same_lattice(a, b, "whole_dice");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool ia = a[i] != kBackground;
    const bool ib = b[i] != kBackground;
    na += ia;
    nb += ib;
    both += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

struct DiceTable {
  std::array<double, kNumLabels> per_label{};  // index = label id - 1
  double whole = 0.0;
  double mean_structure = 0.0;

  double label(LabelId id) const { return per_label.at(id - 1); }
};

/// Per-label Dice for all 26 structures in a single pass, the union-of-
/// foreground Dice and the unweighted mean over the 26 structures.
inline DiceTable aggregate_dice(const LabelGrid& a, const LabelGrid& b) {
  require_same_lattice(a, b, "aggregate_dice");
  std::array<std::size_t, kNumLabels + 1> ca{}, cb{}, both{};
  std::size_t fa = 0, fb = 0, fboth = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const LabelId la = a[i], lb = b[i];
    if (la > kNumLabels || lb > kNumLabels) throw ArgumentError("aggregate_dice: label id outside taxonomy");
    ++ca[la];
    ++cb[lb];
    if (la == lb) ++both[la];
    fa += la != kBackground;
    fb += lb != kBackground;
    fboth += la != kBackground && lb != kBackground;
  }
  DiceTable t;
  double sum = 0.0;
  for (int l = 1; l <= kNumLabels; ++l) {
    const std::size_t den = ca[l] + cb[l];
    t.per_label[l - 1] = den == 0 ? 1.0 : 2.0 * static_cast<double>(both[l]) / static_cast<double>(den);
    sum += t.per_label[l - 1];
  }
  t.mean_structure = sum / kNumLabels;
  t.whole = fa + fb == 0 ? 1.0 : 2.0 * static_cast<double>(fboth) / static_cast<double>(fa + fb);
  return t;
}

/// Mean Dice over the foreground labels present in either grid; 1.0 when
/// neither grid has foreground.
inline double mean_present_dice(const LabelGrid& a, const LabelGrid& b) {
  require_same_lattice(a, b, "mean_present_dice");
  std::array<bool, kNumLabels + 1> present{};
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] <= kNumLabels) present[a[i]] = true;
    if (b[i] <= kNumLabels) present[b[i]] = true;
  }
  const DiceTable t = aggregate_dice(a, b);
  double sum = 0.0;
  int n = 0;
  for (int l = 1; l <= kNumLabels; ++l)
    if (present[l]) {
      sum += t.per_label[l - 1];
      ++n;
    }
  return n == 0 ? 1.0 : sum / n;
}

/// Mean and sample standard deviation of a set of tables, entry by entry.
struct DiceSummary {
  DiceTable mean;
  DiceTable stddev;
  std::size_t cases = 0;
};

inline DiceSummary summarize(const std::vector<DiceTable>& tables) {
  DiceSummary s;
  s.cases = tables.size();
  if (tables.empty()) return s;
  const double n = static_cast<double>(tables.size());
  auto moments = [&](auto get, double& mean, double& sd) {
    double m = 0.0;
    for (const auto& t : tables) m += get(t);
    m /= n;
    double v = 0.0;
    for (const auto& t : tables) v += (get(t) - m) * (get(t) - m);
    mean = m;
    sd = tables.size() > 1 ? std::sqrt(v / (n - 1.0)) : 0.0;
  };
  for (int l = 0; l < kNumLabels; ++l)
    moments([l](const DiceTable& t) { return t.per_label[l]; }, s.mean.per_label[l], s.stddev.per_label[l]);
  moments([](const DiceTable& t) { return t.whole; }, s.mean.whole, s.stddev.whole);
  moments([](const DiceTable& t) { return t.mean_structure; }, s.mean.mean_structure, s.stddev.mean_structure);
  return s;
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test

namespace detail {

/// Average ranks (1-based) of |d|, ties sharing the mean rank.
inline std::vector<double> average_ranks(const std::vector<double>& absd) {
  const std::size_t n = absd.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return absd[i] < absd[j]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && absd[order[j + 1]] == absd[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

struct WilcoxonResult {
  double statistic = 0.0;  // W+ (sum of ranks of positive differences)
  double p_value = 1.0;
  std::size_t n = 0;       // non-zero differences used
  bool exact = false;
};

inline constexpr std::size_t kWilcoxonExactMax = 12;

enum class WilcoxonMethod { automatic, exact, normal };

/// Two-sided signed-rank test on paired samples (y - x). Zero differences
/// are dropped. Exact null distribution for n <= 12 (ties handled by
/// enumerating sign patterns over the tied ranks), normal approximation
/// with tie and continuity correction above.
inline WilcoxonResult wilcoxon_two_sided(const std::vector<double>& x, const std::vector<double>& y,
                                         WilcoxonMethod method = WilcoxonMethod::automatic) {
  if (x.size() != y.size()) throw ArgumentError("wilcoxon: samples must be paired");
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (y[i] - x[i] != 0.0) d.push_back(y[i] - x[i]);
  if (d.empty()) throw ArgumentError("wilcoxon: all differences are zero");
  if (d.size() < 5) throw ArgumentError("wilcoxon: need at least 5 non-zero differences");
  const std::size_t n = d.size();
  std::vector<double> absd(n);
  for (std::size_t i = 0; i < n; ++i) absd[i] = std::fabs(d[i]);
  const auto ranks = detail::average_ranks(absd);

  WilcoxonResult r;
  r.n = n;
  for (std::size_t i = 0; i < n; ++i)
    if (d[i] > 0) r.statistic += ranks[i];
  const double total = static_cast<double>(n) * (n + 1) / 2.0;
  const double mean = total / 2.0;

  const bool use_exact = method == WilcoxonMethod::exact ||
                         (method == WilcoxonMethod::automatic && n <= kWilcoxonExactMax);
  if (use_exact) {
    // Ranks are multiples of 1/2; work with doubled integer ranks.
    std::vector<int> r2(n);
    int sum2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      r2[i] = static_cast<int>(std::lround(2.0 * ranks[i]));
      sum2 += r2[i];
    }
    std::vector<double> counts(static_cast<std::size_t>(sum2) + 1, 0.0);
    counts[0] = 1.0;
    for (int v : r2)
      for (int s = sum2; s >= v; --s) counts[s] += counts[s - v];
    const double patterns = std::ldexp(1.0, static_cast<int>(n));
    const double dev = std::fabs(r.statistic - mean);
    double tail = 0.0;
    for (int s = 0; s <= sum2; ++s) {
      // Same deviation test in doubled units avoids rounding at the boundary.
      if (std::fabs(s - 2.0 * mean) >= 2.0 * dev - 1e-9) tail += counts[s];
    }
    r.p_value = std::min(1.0, tail / patterns);
    r.exact = true;
    return r;
  }

  // Tie correction: sum over tie groups of (t^3 - t) / 48.
  std::vector<double> sorted = absd;
  std::sort(sorted.begin(), sorted.end());
  double tie = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i + 1);
    tie += (t * t * t - t) / 48.0;
    i = j + 1;
  }
  const double var = static_cast<double>(n) * (n + 1) * (2 * n + 1) / 24.0 - tie;
  // Continuity correction: the statistic moves in steps of at least 1/2.
  const double z = std::max(0.0, std::fabs(r.statistic - mean) - 0.5) / std::sqrt(var);
  r.p_value = std::min(1.0, std::erfc(std::fabs(z) / std::sqrt(2.0)));
  r.exact = false;
  return r;
}

// ---------------------------------------------------------------------------
// Age-volume variability

struct AgeVolumeSample {
  double age = 0.0;
  double volume = 0.0;
};

using AgeVolumeSeries = std::vector<AgeVolumeSample>;

struct PolyFit {
  std::vector<double> coefficients;  // c0 + c1 t + c2 t^2 + ...
  double residual_std = 0.0;

  double evaluate(double t) const {
    double acc = 0.0;
    for (auto it = coefficients.rbegin(); it != coefficients.rend(); ++it) acc = acc * t + *it;
    return acc;
  }
};

/// Least-squares polynomial of the given degree (0..3) through the series,
/// solved by Householder QR. residual_std = sqrt(RSS / (n - degree - 1)).
inline PolyFit fit_variability(const AgeVolumeSeries& series, int degree) {
  if (degree < 0 || degree > 3) throw ArgumentError("fit_variability: degree must be in [0, 3]");
  const std::size_t m = series.size();
  const std::size_t p = static_cast<std::size_t>(degree) + 1;
  if (m <= p) throw ArgumentError("fit_variability: need more samples than degree + 1");
  for (const auto& s : series)
    if (s.age < 0 || s.volume < 0 || !std::isfinite(s.age) || !std::isfinite(s.volume))
      throw ArgumentError("fit_variability: ages and volumes must be finite and >= 0");

  // Column-major design matrix.
  std::vector<double> a(m * p);
  std::vector<double> b(m);
  for (std::size_t i = 0; i < m; ++i) {
    double t = 1.0;
    for (std::size_t j = 0; j < p; ++j) {
      a[j * m + i] = t;
      t *= series[i].age;
    }
    b[i] = series[i].volume;
  }
  std::vector<double> col_norm(p);
  for (std::size_t j = 0; j < p; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < m; ++i) s += a[j * m + i] * a[j * m + i];
    col_norm[j] = std::sqrt(s);
  }
  for (std::size_t k = 0; k < p; ++k) {
    double norm = 0.0;
    for (std::size_t i = k; i < m; ++i) norm += a[k * m + i] * a[k * m + i];
    norm = std::sqrt(norm);
    if (norm <= 1e-12 * std::max(1.0, col_norm[k]))
      throw ArgumentError("fit_variability: rank-deficient design");
    const double alpha = a[k * m + k] > 0 ? -norm : norm;
    std::vector<double> v(m, 0.0);
    v[k] = a[k * m + k] - alpha;
    for (std::size_t i = k + 1; i < m; ++i) v[i] = a[k * m + i];
    double vv = 0.0;
    for (std::size_t i = k; i < m; ++i) vv += v[i] * v[i];
    if (vv == 0.0) continue;
    for (std::size_t j = k; j < p; ++j) {
      double dot = 0.0;
      for (std::size_t i = k; i < m; ++i) dot += v[i] * a[j * m + i];
      const double f = 2.0 * dot / vv;
      for (std::size_t i = k; i < m; ++i) a[j * m + i] -= f * v[i];
    }
    double dot = 0.0;
    for (std::size_t i = k; i < m; ++i) dot += v[i] * b[i];
    const double f = 2.0 * dot / vv;
    for (std::size_t i = k; i < m; ++i) b[i] -= f * v[i];
  }
  for (std::size_t k = 0; k < p; ++k)
    if (std::fabs(a[k * m + k]) <= 1e-10 * std::max(1.0, col_norm[k]))
      throw ArgumentError("fit_variability: rank-deficient design");

  PolyFit fit;
  fit.coefficients.assign(p, 0.0);
  for (std::size_t kk = p; kk-- > 0;) {
    double s = b[kk];
    for (std::size_t j = kk + 1; j < p; ++j) s -= a[j * m + kk] * fit.coefficients[j];
    fit.coefficients[kk] = s / a[kk * m + kk];
  }
  double rss = 0.0;
  for (const auto& s : series) {
    const double r = s.volume - fit.evaluate(s.age);
    rss += r * r;
  }
  fit.residual_std = std::sqrt(rss / static_cast<double>(m - p));
  return fit;
}

}  // namespace lseg
