#pragma once

// Procedural cerebellum-like phantoms with exact labels.
//
// Canonical space is [-1, 1]^3. The cerebellum is an ellipsoid split at
// x = 0 into Left (x < 0) and Right hemispheres. In each hemisphere the
// sagittal (y, z) angle around the ellipsoid axis is divided into 12
// unequal sectors, one per lobule class. White matter is a core plus one
// thin fin through the middle of every sector. A pose (scale, rotation,
// translation) maps canonical space to voxels; a mirrored case composes the
// pose with x flips on both sides so labels swap hemispheres.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "augment.hpp"
#include "error.hpp"
#include "fusion.hpp"
#include "rng.hpp"
#include "taxonomy.hpp"
#include "volgrid.hpp"

namespace lseg {

/// Relative angular width of each lobule sector, I-II first.
inline constexpr std::array<double, 12> kSectorWeights = {0.35, 0.7, 0.8, 0.85, 1.2, 1.5,
                                                          1.2,  0.9, 0.9, 0.9,  1.0, 0.6};

struct ContrastTable {
  // index 0: tissue inside the ICV but outside the cerebellum; 1..13: classes
  std::array<float, kNumClasses + 1> t1{};
  std::array<float, kNumClasses + 1> t2{};
};

/// Lobule means alternate around the sector ring so neighbours differ in
/// both modalities; T2 puts WM darkest, T1 brightest.
inline ContrastTable default_contrast() {
  ContrastTable c;
  c.t1 = {0.15f, 0.40f, 0.55f, 0.44f, 0.59f, 0.48f, 0.63f, 0.42f, 0.57f, 0.46f, 0.61f, 0.50f, 0.65f, 0.95f};
  c.t2 = {0.90f, 0.72f, 0.60f, 0.80f, 0.64f, 0.76f, 0.56f, 0.82f, 0.62f, 0.78f, 0.58f, 0.74f, 0.66f, 0.25f};
  return c;
}

struct PhantomSpec {
  Index3 dims{48, 48, 48};
  float spacing_mm = 1.0f;
  std::uint64_t seed = 0;
  double noise_std = 0.02;     // T1
  double t2_noise_std = 0.06;  // T2 is the auxiliary modality, noisier than T1
  double bias_amplitude = 0.05;
  ContrastTable contrast = default_contrast();
  // cerebellum and ICV semi-axes, canonical units
  std::array<double, 3> semi_axes{0.74, 0.60, 0.50};
  std::array<double, 3> icv_axes{0.96, 0.92, 0.90};
  double wm_core = 0.30;        // ellipsoidal radius of the WM core
  double wm_fin_reach = 0.72;   // fins extend to this radius
  double wm_fin_width = 0.06;   // half-width of a fin (normalised sector units)
  double midline_gap = 0.02;    // half-width of the background cleft at x = 0
  double sector_start_deg = -100.0;
  // per-case jitter (uniform, symmetric)
  double translate_vox = 2.0;
  double rotate_deg = 5.0;
  double scale = 0.06;
  double sector_jitter = 0.12;  // relative jitter of each sector weight

  void validate() const {
    for (int d : dims)
      if (d < 8 || d % 8 != 0) throw GeometryError("phantom dims must be positive multiples of 8");
    if (!(spacing_mm > 0.f)) throw ArgumentError("phantom spacing must be > 0");
    if (!(noise_std >= 0.0) || !(t2_noise_std >= 0.0) || !(bias_amplitude >= 0.0)) throw ArgumentError("phantom noise/bias must be >= 0");
    if (!(sector_jitter >= 0.0 && sector_jitter < 0.5)) throw ArgumentError("sector_jitter must be in [0, 0.5)");
  }

  /// Same spec with every per-case random variation disabled.
  PhantomSpec without_jitter() const {
    PhantomSpec s = *this;
    s.translate_vox = s.rotate_deg = s.scale = s.sector_jitter = 0.0;
    s.noise_std = s.t2_noise_std = s.bias_amplitude = 0.0;
    return s;
  }
};

/// Canonical <-> voxel mapping of one case.
struct Pose {
  std::array<double, 9> rot{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
  std::array<double, 3> scale{1, 1, 1};
  std::array<double, 3> shift{0, 0, 0};  // canonical units
  Index3 dims{48, 48, 48};
  bool mirrored = false;

  Vec3 to_voxel(Vec3 u) const {
    if (mirrored) u[0] = -u[0];
    Vec3 p{};
    for (int i = 0; i < 3; ++i) {
      double s = 0.0;
      for (int j = 0; j < 3; ++j) s += rot[3 * i + j] * scale[j] * u[j];
      p[i] = centre(i) + half(i) * (s + shift[i]);
    }
    if (mirrored) p[0] = dims[0] - 1 - p[0];
    return p;
  }

  Vec3 to_canonical(Vec3 p) const {
    if (mirrored) p[0] = dims[0] - 1 - p[0];
    Vec3 q{};
    for (int i = 0; i < 3; ++i) q[i] = (p[i] - centre(i)) / half(i) - shift[i];
    Vec3 u{};
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int i = 0; i < 3; ++i) s += rot[3 * i + j] * q[i];
      u[j] = s / scale[j];
    }
    if (mirrored) u[0] = -u[0];
    return u;
  }

  Pose mirror() const {
    Pose m = *this;
    m.mirrored = !mirrored;
    return m;
  }

 private:
  double centre(int i) const { return 0.5 * (dims[i] - 1); }
  double half(int i) const { return 0.5 * dims[i]; }
};

/// Per-case anatomy: sector boundary angles (13 per hemisphere, radians).
struct PhantomAnatomy {
  std::array<std::array<double, 13>, 2> bounds{};
};

struct PhantomCase {
  int id = 0;
  std::uint64_t seed = 0;
  bool mirrored = false;
  int source_id = 0;  // original case for mirrored copies
  VoxelGrid t1, t2;
  LabelGrid labels, icv;
  Pose pose;
};

namespace detail {

inline std::array<double, 9> rotation_xyz(double ax, double ay, double az) {
  const double cx = std::cos(ax), sx = std::sin(ax), cy = std::cos(ay), sy = std::sin(ay), cz = std::cos(az),
               sz = std::sin(az);
  // Rz * Ry * Rx
  return {cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx,
          sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx,
          -sy,     cy * sx,                cy * cx};
}

inline PhantomAnatomy draw_anatomy(const PhantomSpec& spec, Rng& rng) {
  PhantomAnatomy a;
  const double start = spec.sector_start_deg * std::numbers::pi / 180.0;
  for (int h = 0; h < 2; ++h) {
    std::array<double, 12> w{};
    double total = 0.0;
    for (int k = 0; k < 12; ++k) {
      w[k] = kSectorWeights[k] * (1.0 + spec.sector_jitter * rng.uniform(-1.0, 1.0));
      total += w[k];
    }
    a.bounds[h][0] = start;
    for (int k = 0; k < 12; ++k) a.bounds[h][k + 1] = a.bounds[h][k] + 2.0 * std::numbers::pi * w[k] / total;
  }
  return a;
}

inline double wrap_angle(double a, double start) {
  const double two_pi = 2.0 * std::numbers::pi;
  double r = std::fmod(a - start, two_pi);
  if (r < 0) r += two_pi;
  return start + r;
}

/// Tissue class at canonical point u: -1 outside the ICV, 0 ICV tissue,
/// otherwise the taxonomy label id.
inline int classify(const PhantomSpec& spec, const PhantomAnatomy& an, const Vec3& u, bool fins = true) {
  const auto& ax = spec.semi_axes;
  const double rho = std::sqrt((u[0] / ax[0]) * (u[0] / ax[0]) + (u[1] / ax[1]) * (u[1] / ax[1]) +
                               (u[2] / ax[2]) * (u[2] / ax[2]));
  if (rho > 1.0 || std::fabs(u[0]) < spec.midline_gap) {
    const auto& ic = spec.icv_axes;
    const double ri = (u[0] / ic[0]) * (u[0] / ic[0]) + (u[1] / ic[1]) * (u[1] / ic[1]) + (u[2] / ic[2]) * (u[2] / ic[2]);
    return ri <= 1.0 ? 0 : -1;
  }
  const int h = u[0] < 0.0 ? 0 : 1;
  const auto hemi = h == 0 ? Hemisphere::Left : Hemisphere::Right;
  if (rho < spec.wm_core) return LabelTaxonomy::lookup(hemi, StructureClass::WM);
  const double yy = u[1] / ax[1], zz = u[2] / ax[2];
  const auto& b = an.bounds[h];
  const double theta = wrap_angle(std::atan2(zz, yy), b[0]);
  int sector = 11;
  for (int k = 0; k < 12; ++k)
    if (theta < b[k + 1]) {
      sector = k;
      break;
    }
  if (fins && rho < spec.wm_fin_reach) {
    const double mid = 0.5 * (b[sector] + b[sector + 1]);
    const double r = std::hypot(yy, zz);
    if (r * std::fabs(std::sin(theta - mid)) < spec.wm_fin_width && std::cos(theta - mid) > 0)
      return LabelTaxonomy::lookup(hemi, StructureClass::WM);
  }
  return LabelTaxonomy::lookup(hemi, static_cast<StructureClass>(sector + 1));
}

/// Mask of the largest 6-connected component of `label` (ties: first found).
inline std::vector<char> largest_component(const LabelGrid& g, LabelId label) {
  const Index3 d = g.dims();
  std::vector<int> comp(g.size(), -1);
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < g.size(); ++s) {
    if (g[s] != label || comp[s] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    std::size_t n = 0;
    comp[s] = id;
    stack.push_back(s);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++n;
      const auto [x, y, z] = g.coords(i);
      const int nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
      for (const auto& o : nb) {
        const int a = x + o[0], b = y + o[1], e = z + o[2];
        if (a < 0 || b < 0 || e < 0 || a >= d[0] || b >= d[1] || e >= d[2]) continue;
        const std::size_t j = g.index(a, b, e);
        if (g[j] == label && comp[j] < 0) {
          comp[j] = id;
          stack.push_back(j);
        }
      }
    }
    sizes.push_back(n);
  }
  std::vector<char> keep(g.size(), 0);
  if (sizes.empty()) return keep;
  const int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  for (std::size_t i = 0; i < g.size(); ++i) keep[i] = comp[i] == best;
  return keep;
}

}  // namespace detail

/// Pose and anatomy drawn from the spec's seed (shared by generate and by
/// callers that only need the transform).
inline std::pair<Pose, PhantomAnatomy> draw_case_shape(const PhantomSpec& spec) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, 0x9e05));
  Pose pose;
  pose.dims = spec.dims;
  const double deg = std::numbers::pi / 180.0;
  const double rx = rng.uniform(-1, 1) * spec.rotate_deg * deg;
  const double ry = rng.uniform(-1, 1) * spec.rotate_deg * deg;
  const double rz = rng.uniform(-1, 1) * spec.rotate_deg * deg;
  pose.rot = detail::rotation_xyz(rx, ry, rz);
  for (int i = 0; i < 3; ++i) pose.scale[i] = 1.0 + rng.uniform(-1, 1) * spec.scale;
  for (int i = 0; i < 3; ++i) pose.shift[i] = rng.uniform(-1, 1) * spec.translate_vox / (0.5 * spec.dims[i]);
  const auto anatomy = detail::draw_anatomy(spec, rng);
  return {pose, anatomy};
}

inline PhantomCase generate(const PhantomSpec& spec) {
  const auto [pose, anatomy] = draw_case_shape(spec);
  const GridGeometry geo(spec.dims, {spec.spacing_mm, spec.spacing_mm, spec.spacing_mm});
  PhantomCase c;
  c.id = 0;
  c.seed = spec.seed;
  c.pose = pose;
  c.t1 = VoxelGrid(geo);
  c.t2 = VoxelGrid(geo);
  c.labels = LabelGrid(geo);
  c.icv = LabelGrid(geo);
  for (int z = 0; z < spec.dims[2]; ++z)
    for (int y = 0; y < spec.dims[1]; ++y)
      for (int x = 0; x < spec.dims[0]; ++x) {
        const auto i = c.labels.index(x, y, z);
        const int cls = detail::classify(spec, anatomy, pose.to_canonical({double(x), double(y), double(z)}));
        if (cls < 0) continue;
        c.icv[i] = 1;
        c.labels[i] = static_cast<LabelId>(cls);
      }
  // Fin fragments cut off from the core by voxelisation go back to their lobule.
  for (int h = 1; h <= 2; ++h) {
    const LabelId wm = LabelTaxonomy::lookup(h, kNumClasses);
    const auto keep = detail::largest_component(c.labels, wm);
    for (std::size_t i = 0; i < c.labels.size(); ++i)
      if (c.labels[i] == wm && !keep[i]) {
        const auto [x, y, z] = c.labels.coords(i);
        c.labels[i] = static_cast<LabelId>(
            detail::classify(spec, anatomy, pose.to_canonical({double(x), double(y), double(z)}), false));
      }
  }
  for (std::size_t i = 0; i < c.labels.size(); ++i) {
    if (!c.icv[i]) continue;
    const LabelId l = c.labels[i];
    const int k = l == kBackground ? 0 : static_cast<int>(LabelTaxonomy::class_of(l));
    c.t1[i] = spec.contrast.t1[k];
    c.t2[i] = spec.contrast.t2[k];
  }
  Rng noise(mix_seed(spec.seed, 0x0015e));
  const auto g1 = bias_gain(geo, spec.bias_amplitude, mix_seed(spec.seed, 1));
  const auto g2 = bias_gain(geo, spec.bias_amplitude, mix_seed(spec.seed, 2));
  for (std::size_t i = 0; i < c.t1.size(); ++i) {
    const double n1 = spec.noise_std > 0 ? noise.normal(0.0, spec.noise_std) : 0.0;
    const double n2 = spec.t2_noise_std > 0 ? noise.normal(0.0, spec.t2_noise_std) : 0.0;
    c.t1[i] = static_cast<float>(c.t1[i] * g1[i] + n1);
    c.t2[i] = static_cast<float>(c.t2[i] * g2[i] + n2);
  }
  return c;
}

/// Mirrored copy: both intensities and labels flipped, ids swapped.
inline PhantomCase mirror_case(const PhantomCase& c, int new_id) {
  PhantomCase m;
  m.id = new_id;
  m.seed = c.seed;
  m.mirrored = !c.mirrored;
  m.source_id = c.id;
  auto [t1, labels] = mirror_lr(c.t1, c.labels);
  m.t1 = std::move(t1);
  m.labels = std::move(labels);
  m.t2 = flip_x(c.t2);
  m.icv = flip_x(c.icv);
  m.pose = c.pose.mirror();
  return m;
}

/// Stand-in for nonlinear registration: the dense field taking target voxels
/// to template voxels through the two cases' canonical poses.
inline DisplacementField pose_field(const Pose& tmpl, const Pose& target) {
  const GridGeometry geo(target.dims);
  DisplacementField f(geo);
  for (int z = 0; z < target.dims[2]; ++z)
    for (int y = 0; y < target.dims[1]; ++y)
      for (int x = 0; x < target.dims[0]; ++x) {
        const Vec3 p{double(x), double(y), double(z)};
        const Vec3 q = tmpl.to_voxel(target.to_canonical(p));
        const auto i = f.dx.index(x, y, z);
        f.dx[i] = static_cast<float>(q[0] - p[0]);
        f.dy[i] = static_cast<float>(q[1] - p[1]);
        f.dz[i] = static_cast<float>(q[2] - p[2]);
      }
  return f;
}

enum class Split { train, val, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : s == Split::val ? "val" : "test"; }

struct PhantomLibrary {
  std::vector<PhantomCase> cases;  // originals 0..n-1, then mirrors n..2n-1
  std::vector<Split> split;        // per case

  std::vector<int> ids(Split s) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < cases.size(); ++i)
      if (split[i] == s) out.push_back(static_cast<int>(i));
    return out;
  }

  /// Index of the mirrored partner of case i.
  int partner(int i) const {
    const int n = static_cast<int>(cases.size()) / 2;
    return i < n ? i + n : i - n;
  }
};

/// Pair counts for an 80/10/10 split of n originals (val and test at least 1).
inline std::array<int, 3> split_counts(int n) {
  if (n < 6) throw ArgumentError("make_library: need at least 6 cases");
  const int val = std::max(1, static_cast<int>(std::lround(0.1 * n)));
  const int test = val;
  return {n - val - test, val, test};
}

/// n phantoms with seeds mixed from base_seed, followed by their mirrors.
/// A case and its mirror always land in the same split.
inline PhantomLibrary make_library(int n, std::uint64_t base_seed, const PhantomSpec& base = {}) {
  const auto counts = split_counts(n);
  PhantomLibrary lib;
  lib.cases.resize(2 * static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    PhantomSpec s = base;
    s.seed = mix_seed(base_seed, static_cast<std::uint64_t>(i));
    lib.cases[i] = generate(s);
    lib.cases[i].id = i;
    lib.cases[i].source_id = i;
  }
  for (int i = 0; i < n; ++i) lib.cases[n + i] = mirror_case(lib.cases[i], n + i);
  lib.split.resize(lib.cases.size());
  for (int i = 0; i < n; ++i) {
    const Split s = i < counts[0] ? Split::train : i < counts[0] + counts[1] ? Split::val : Split::test;
    lib.split[i] = lib.split[n + i] = s;
  }
  return lib;
}

/// One line per case: id, seed, mirrored flag, source id, split.
inline std::string library_manifest(const PhantomLibrary& lib) {
  std::ostringstream os;
  os << "id,seed,mirrored,source,split\n";
  for (std::size_t i = 0; i < lib.cases.size(); ++i) {
    const auto& c = lib.cases[i];
    os << c.id << ',' << c.seed << ',' << (c.mirrored ? 1 : 0) << ',' << c.source_id << ',' << to_string(lib.split[i])
       << '\n';
  }
  return os.str();
}

}  // namespace lseg
