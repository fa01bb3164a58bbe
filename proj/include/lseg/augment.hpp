#pragma once

// Seeded intensity and geometric perturbations for training augmentation
// and the robustness sweep. Every function is pure given its spec and seed.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "fusion.hpp"
#include "rng.hpp"
#include "volgrid.hpp"

namespace lseg {

enum class PerturbKind { anisotropy, bias_field, blur, elastic, gamma, ghosting, bad_t2 };

inline const char* to_string(PerturbKind k) {
  switch (k) {
    case PerturbKind::anisotropy: return "anisotropy";
    case PerturbKind::bias_field: return "bias_field";
    case PerturbKind::blur: return "blur";
    case PerturbKind::elastic: return "elastic";
    case PerturbKind::gamma: return "gamma";
    case PerturbKind::ghosting: return "ghosting";
    case PerturbKind::bad_t2: return "bad_t2";
  }
  return "?";
}

inline PerturbKind perturb_kind_from_string(const std::string& s) {
  for (auto k : {PerturbKind::anisotropy, PerturbKind::bias_field, PerturbKind::blur, PerturbKind::elastic,
                 PerturbKind::gamma, PerturbKind::ghosting, PerturbKind::bad_t2})
    if (s == to_string(k)) return k;
  throw ArgumentError("unknown perturbation kind '" + s + "'");
}

/// Default magnitude ranges used when perturbations are drawn at random.
struct PerturbRanges {
  double bias_max = 0.4;
  double sigma_min = 0.5, sigma_max = 2.0;
  double gamma_min = 0.7, gamma_max = 1.5;
  int ghost_max = 4;
  double ghost_amplitude_max = 0.3;
  double elastic_max = 3.0;
  double elastic_sigma = 3.0;
};

/// Parameters by kind:
///   bias_field: amplitude (max |log gain|)
///   blur:       sigma (voxels)
///   gamma:      gamma
///   ghosting:   copies k, amplitude, axis
///   anisotropy: factor f, axis
///   elastic:    amplitude (max displacement, voxels), sigma (smoothness)
///   bad_t2:     none (handled at channel level)
struct PerturbSpec {
  PerturbKind kind = PerturbKind::gamma;
  double amplitude = 0.0;
  double sigma = 1.0;
  double gamma = 1.0;
  int factor = 2;
  int copies = 1;
  int axis = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (axis < 0 || axis > 2) throw ArgumentError("perturbation axis must be 0, 1 or 2");
    switch (kind) {
      case PerturbKind::blur:
        if (!(sigma > 0.0)) throw ArgumentError("blur sigma must be > 0");
        break;
      case PerturbKind::gamma:
        if (!(gamma > 0.0)) throw ArgumentError("gamma must be > 0");
        break;
      case PerturbKind::bias_field:
        if (!(amplitude >= 0.0)) throw ArgumentError("bias amplitude must be >= 0");
        break;
      case PerturbKind::ghosting:
        if (copies < 1) throw ArgumentError("ghosting needs at least one copy");
        if (!(amplitude >= 0.0)) throw ArgumentError("ghost amplitude must be >= 0");
        break;
      case PerturbKind::anisotropy:
        if (factor < 2 || !is_power_of_two(factor)) throw ArgumentError("anisotropy factor must be a power of two >= 2");
        break;
      case PerturbKind::elastic:
        if (!(amplitude >= 0.0)) throw ArgumentError("elastic magnitude must be >= 0");
        if (!(sigma > 0.0)) throw ArgumentError("elastic smoothness must be > 0");
        break;
      case PerturbKind::bad_t2:
        break;
    }
  }

  std::string describe() const {
    char buf[96];
    switch (kind) {
      case PerturbKind::blur: std::snprintf(buf, sizeof buf, "blur(sigma=%g)", sigma); break;
      case PerturbKind::gamma: std::snprintf(buf, sizeof buf, "gamma(%g)", gamma); break;
      case PerturbKind::bias_field: std::snprintf(buf, sizeof buf, "bias_field(%g)", amplitude); break;
      case PerturbKind::ghosting:
        std::snprintf(buf, sizeof buf, "ghosting(k=%d,a=%g,axis=%d)", copies, amplitude, axis);
        break;
      case PerturbKind::anisotropy: std::snprintf(buf, sizeof buf, "anisotropy(f=%d,axis=%d)", factor, axis); break;
      case PerturbKind::elastic: std::snprintf(buf, sizeof buf, "elastic(%g,sigma=%g)", amplitude, sigma); break;
      case PerturbKind::bad_t2: std::snprintf(buf, sizeof buf, "bad_t2"); break;
    }
    return buf;
  }
};

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  return k;
}

// One separable pass along `axis` with clamp-to-edge.
inline VoxelGrid convolve_axis(const VoxelGrid& g, const std::vector<double>& k, int axis) {
  const int r = static_cast<int>(k.size() / 2);
  VoxelGrid out(g.geometry());
  const auto d = g.dims();
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        Index3 p{x, y, z};
        const int c = p[axis];
        double acc = 0.0;
        for (int t = -r; t <= r; ++t) {
          p[axis] = std::clamp(c + t, 0, d[axis] - 1);
          acc += k[t + r] * g.at(p[0], p[1], p[2]);
        }
        out.at(x, y, z) = static_cast<float>(acc);
      }
  return out;
}

}  // namespace detail

/// Separable Gaussian blur, sigma in voxels. Below 0.25 voxels the kernel
/// is numerically a delta and the grid is returned unchanged.
inline VoxelGrid gaussian_blur(const VoxelGrid& g, double sigma) {
  if (!(sigma > 0.0)) throw ArgumentError("gaussian_blur: sigma must be > 0");
  if (sigma < 0.25) return g;
  const auto k = detail::gaussian_kernel(sigma);
  VoxelGrid out = g;
  for (int a = 0; a < 3; ++a)
    if (g.dims()[a] > 1) out = detail::convolve_axis(out, k, a);
  return out;
}

/// Smooth random displacement field: Gaussian noise per component, blurred
/// by sigma, scaled so the largest vector has length `magnitude`.
inline DisplacementField smooth_field(const GridGeometry& geo, double magnitude, double sigma, std::uint64_t seed) {
  if (!(sigma > 0.0)) throw ArgumentError("smooth_field: sigma must be > 0");
  if (!(magnitude >= 0.0)) throw ArgumentError("smooth_field: magnitude must be >= 0");
  DisplacementField f(geo);
  if (magnitude == 0.0) return f;
  Rng rng(mix_seed(seed, 0xf1e1d));
  VoxelGrid* comps[3] = {&f.dx, &f.dy, &f.dz};
  for (auto* c : comps) {
    for (auto& v : c->values()) v = static_cast<float>(rng.normal());
    *c = gaussian_blur(*c, sigma);
  }
  const double m = f.max_norm();
  if (m == 0.0) return f;
  const double s = magnitude / m;
  for (auto* c : comps)
    for (auto& v : c->values()) v = static_cast<float>(v * s);
  return f;
}

/// exp of a seeded quadratic polynomial in normalized coordinates, scaled
/// so the largest |exponent| equals `amplitude`.
inline VoxelGrid bias_gain(const GridGeometry& geo, double amplitude, std::uint64_t seed) {
  VoxelGrid gain(geo, 1.f);
  if (amplitude == 0.0) return gain;
  Rng rng(mix_seed(seed, 0xb1a5));
  std::array<double, 10> c{};
  for (auto& v : c) v = rng.uniform(-1.0, 1.0);
  const auto d = geo.dims;
  auto norm = [](int i, int n) { return n > 1 ? 2.0 * i / (n - 1) - 1.0 : 0.0; };
  std::vector<double> e(gain.size());
  double emax = 0.0;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        const double u = norm(x, d[0]), v = norm(y, d[1]), w = norm(z, d[2]);
        const double p = c[0] + c[1] * u + c[2] * v + c[3] * w + c[4] * u * u + c[5] * v * v + c[6] * w * w +
                         c[7] * u * v + c[8] * u * w + c[9] * v * w;
        e[gain.index(x, y, z)] = p;
        emax = std::max(emax, std::fabs(p));
      }
  if (emax == 0.0) return gain;
  for (std::size_t i = 0; i < e.size(); ++i) gain[i] = static_cast<float>(std::exp(amplitude * e[i] / emax));
  return gain;
}

namespace detail {

inline VoxelGrid apply_gamma(const VoxelGrid& g, double gamma) {
  if (gamma == 1.0) return g;
  const auto [lo_it, hi_it] = std::minmax_element(g.values().begin(), g.values().end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi == lo) return g;
  VoxelGrid out(g.geometry());
  for (std::size_t i = 0; i < g.size(); ++i)
    out[i] = static_cast<float>(lo + (hi - lo) * std::pow((g[i] - lo) / (hi - lo), gamma));
  return out;
}

// Image-space ghosting: k copies, wrapped along `axis` at shifts i*n/(k+1),
// each scaled by amplitude / i.
inline VoxelGrid apply_ghosting(const VoxelGrid& g, int copies, double amplitude, int axis) {
  VoxelGrid out = g;
  const auto d = g.dims();
  const int n = d[axis];
  for (int i = 1; i <= copies; ++i) {
    const int shift = std::max(1, i * n / (copies + 1));
    const double a = amplitude / i;
    for (int z = 0; z < d[2]; ++z)
      for (int y = 0; y < d[1]; ++y)
        for (int x = 0; x < d[0]; ++x) {
          Index3 p{x, y, z};
          p[axis] = (p[axis] + shift) % n;
          out.at(x, y, z) += static_cast<float>(a * g.at(p[0], p[1], p[2]));
        }
  }
  return out;
}

// Block-average one axis by f, then linear restore (align-corners off,
// clamped) along the same axis.
inline VoxelGrid apply_anisotropy(const VoxelGrid& g, int f, int axis) {
  const auto d = g.dims();
  if (d[axis] % f != 0) throw GeometryError("anisotropy: axis length not divisible by factor");
  const int m = d[axis] / f;
  VoxelGrid out(g.geometry());
  std::vector<double> line(d[axis]), coarse(m);
  Index3 other{0, 0, 0};
  const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
  for (other[a2] = 0; other[a2] < d[a2]; ++other[a2])
    for (other[a1] = 0; other[a1] < d[a1]; ++other[a1]) {
      Index3 p = other;
      for (int i = 0; i < d[axis]; ++i) {
        p[axis] = i;
        line[i] = g.at(p[0], p[1], p[2]);
      }
      for (int j = 0; j < m; ++j) {
        double s = 0.0;
        for (int t = 0; t < f; ++t) s += line[j * f + t];
        coarse[j] = s / f;
      }
      for (int i = 0; i < d[axis]; ++i) {
        const double src = std::clamp((i + 0.5) / f - 0.5, 0.0, static_cast<double>(m - 1));
        const int i0 = static_cast<int>(std::floor(src));
        const int i1 = std::min(i0 + 1, m - 1);
        const double t = src - i0;
        p[axis] = i;
        out.at(p[0], p[1], p[2]) = static_cast<float>((1.0 - t) * coarse[i0] + t * coarse[i1]);
      }
    }
  return out;
}

}  // namespace detail

/// Applies one intensity or geometric perturbation to a scalar grid.
/// bad_t2 is a channel substitution (see bad_t2()) and leaves a single
/// grid unchanged.
inline VoxelGrid apply_perturbation(const VoxelGrid& g, const PerturbSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case PerturbKind::blur: return gaussian_blur(g, spec.sigma);
    case PerturbKind::gamma: return detail::apply_gamma(g, spec.gamma);
    case PerturbKind::bias_field: {
      if (spec.amplitude == 0.0) return g;
      const auto gain = bias_gain(g.geometry(), spec.amplitude, spec.seed);
      VoxelGrid out(g.geometry());
      for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i] * gain[i];
      return out;
    }
    case PerturbKind::ghosting: return detail::apply_ghosting(g, spec.copies, spec.amplitude, spec.axis);
    case PerturbKind::anisotropy: return detail::apply_anisotropy(g, spec.factor, spec.axis);
    case PerturbKind::elastic: {
      if (spec.amplitude == 0.0) return g;
      const auto f = smooth_field(g.geometry(), spec.amplitude, spec.sigma, spec.seed);
      AtlasTemplate t{0, g, LabelGrid(g.geometry()), {}};
      return warp(t, f).intensity;
    }
    case PerturbKind::bad_t2: return g;
  }
  throw ArgumentError("apply_perturbation: unknown kind");
}

/// Elastic deformation of an (intensity..., labels) case with one shared
/// field: intensities trilinear, labels nearest.
inline void apply_elastic(const std::vector<VoxelGrid*>& intensities, LabelGrid& labels, double magnitude,
                          double sigma, std::uint64_t seed) {
  if (magnitude == 0.0) return;
  const GridGeometry& geo = labels.geometry();
  const auto f = smooth_field(geo, magnitude, sigma, seed);
  for (auto* g : intensities) *g = warp(AtlasTemplate{0, *g, LabelGrid(geo), {}}, f).intensity;
  labels = warp(AtlasTemplate{0, VoxelGrid(geo), labels, {}}, f).labels;
}

/// T1 substituted into the T2 slot.
inline VoxelGrid bad_t2(const VoxelGrid& t1, const VoxelGrid& t2) {
  require_same_lattice(t1, t2, "bad_t2");
  if (t1.geometry() != t2.geometry()) throw GeometryError("bad_t2: geometry differs");
  return t1;
}

/// Draws one intensity perturbation uniformly over kinds and ranges.
inline PerturbSpec random_perturbation(Rng& rng, const PerturbRanges& r = {}) {
  static constexpr PerturbKind kinds[] = {PerturbKind::anisotropy, PerturbKind::bias_field, PerturbKind::blur,
                                          PerturbKind::gamma, PerturbKind::ghosting};
  PerturbSpec s;
  s.kind = kinds[rng.below(std::size(kinds))];
  s.seed = rng.bits();
  s.axis = static_cast<int>(rng.below(3));
  s.amplitude = rng.uniform(0.0, s.kind == PerturbKind::ghosting ? r.ghost_amplitude_max : r.bias_max);
  s.sigma = rng.uniform(r.sigma_min, r.sigma_max);
  s.gamma = std::exp(rng.uniform(std::log(r.gamma_min), std::log(r.gamma_max)));
  s.copies = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(r.ghost_max)));
  s.factor = rng.uniform() < 0.5 ? 2 : 4;
  return s;
}

}  // namespace lseg
