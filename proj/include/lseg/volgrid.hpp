#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "taxonomy.hpp"

namespace lseg {

using Index3 = std::array<int, 3>;
using Vec3 = std::array<double, 3>;

/// Voxel lattice: dims, voxel size and world position of voxel (0,0,0).
struct GridGeometry {
  Index3 dims{1, 1, 1};
  std::array<float, 3> spacing_mm{1.f, 1.f, 1.f};
  std::array<float, 3> origin_mm{0.f, 0.f, 0.f};

  GridGeometry() = default;
  explicit GridGeometry(Index3 d, std::array<float, 3> spacing = {1.f, 1.f, 1.f},
                        std::array<float, 3> origin = {0.f, 0.f, 0.f})
      : dims(d), spacing_mm(spacing), origin_mm(origin) {
    validate();
  }

  void validate() const {
    for (int i = 0; i < 3; ++i) {
      if (dims[i] < 1) throw GeometryError("grid dims must be >= 1");
      if (!(spacing_mm[i] > 0.f) || !std::isfinite(spacing_mm[i]))
        throw GeometryError("grid spacing must be positive");
    }
  }

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }

  double voxel_volume_mm3() const {
    return static_cast<double>(spacing_mm[0]) * spacing_mm[1] * spacing_mm[2];
  }

  bool same_lattice(const GridGeometry& o) const { return dims == o.dims; }

  friend bool operator==(const GridGeometry&, const GridGeometry&) = default;
};

/// Dense 3D scalar field, x-fastest.
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  explicit Grid(GridGeometry g, T fill = T{}) : geom_(g), values_(g.voxel_count(), fill) {
    geom_.validate();
  }
  Grid(GridGeometry g, std::vector<T> values) : geom_(g), values_(std::move(values)) {
    geom_.validate();
    if (values_.size() != geom_.voxel_count())
      throw GeometryError("value count does not match grid dims");
  }

  const GridGeometry& geometry() const { return geom_; }
  const Index3& dims() const { return geom_.dims; }
  int nx() const { return geom_.dims[0]; }
  int ny() const { return geom_.dims[1]; }
  int nz() const { return geom_.dims[2]; }
  std::size_t size() const { return values_.size(); }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(geom_.dims[0]) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(geom_.dims[1]) * z);
  }

  Index3 coords(std::size_t i) const {
    const auto nx = static_cast<std::size_t>(geom_.dims[0]), ny = static_cast<std::size_t>(geom_.dims[1]);
    return {static_cast<int>(i % nx), static_cast<int>(i / nx % ny), static_cast<int>(i / nx / ny)};
  }

  T& at(int x, int y, int z) { return values_[index(x, y, z)]; }
  const T& at(int x, int y, int z) const { return values_[index(x, y, z)]; }
  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  std::vector<T>& values() { return values_; }
  const std::vector<T>& values() const { return values_; }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  GridGeometry geom_{};
  std::vector<T> values_{};
};

using VoxelGrid = Grid<float>;
using LabelGrid = Grid<LabelId>;

template <typename A, typename B>
void require_same_lattice(const Grid<A>& a, const Grid<B>& b, const char* what) {
  if (a.dims() != b.dims()) throw GeometryError(std::string(what) + ": grid dims differ");
}

/// Trilinear interpolation at a continuous voxel coordinate.
/// Coordinates outside [0, dims-1] are clamped to the edge.
template <typename T>
double trilinear_sample(const Grid<T>& g, const Vec3& p) {
  int i0[3];
  int i1[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const double hi = g.dims()[a] - 1;
    const double c = std::clamp(p[a], 0.0, hi);
    const double fl = std::floor(c);
    i0[a] = static_cast<int>(fl);
    i1[a] = std::min(i0[a] + 1, g.dims()[a] - 1);
    f[a] = c - fl;
  }
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    const double wz = dz ? f[2] : 1.0 - f[2];
    if (wz == 0.0) continue;
    const int z = dz ? i1[2] : i0[2];
    for (int dy = 0; dy < 2; ++dy) {
      const double wy = dy ? f[1] : 1.0 - f[1];
      if (wy == 0.0) continue;
      const int y = dy ? i1[1] : i0[1];
      for (int dx = 0; dx < 2; ++dx) {
        const double wx = dx ? f[0] : 1.0 - f[0];
        if (wx == 0.0) continue;
        const int x = dx ? i1[0] : i0[0];
        acc += wz * wy * wx * static_cast<double>(g.at(x, y, z));
      }
    }
  }
  return acc;
}

/// Nearest-neighbour lookup with the same clamping rule as trilinear_sample.
template <typename T>
T nearest_sample(const Grid<T>& g, const Vec3& p) {
  int idx[3];
  for (int a = 0; a < 3; ++a) {
    const double c = std::clamp(p[a], 0.0, static_cast<double>(g.dims()[a] - 1));
    idx[a] = static_cast<int>(std::floor(c + 0.5));
    idx[a] = std::min(idx[a], g.dims()[a] - 1);
  }
  return g.at(idx[0], idx[1], idx[2]);
}

enum class ResampleDirection { down, up };

inline bool is_power_of_two(int f) { return f >= 1 && (f & (f - 1)) == 0; }

/// down: factor^3 block average. up: trilinear magnification where output
/// voxel i samples input coordinate (i + 0.5) / factor - 0.5.
/// Spacing and origin are updated so voxel centres keep their world position.
inline VoxelGrid resample_factor(const VoxelGrid& g, int factor, ResampleDirection dir) {
  if (factor < 2 || !is_power_of_two(factor))
    throw ArgumentError("resample factor must be a power of two >= 2");
  const auto& src = g.geometry();
  GridGeometry dst = src;
  if (dir == ResampleDirection::down) {
    for (int a = 0; a < 3; ++a) {
      if (src.dims[a] % factor != 0)
        throw GeometryError("down-resampling requires dims divisible by the factor");
      dst.dims[a] = src.dims[a] / factor;
      dst.spacing_mm[a] = src.spacing_mm[a] * factor;
      dst.origin_mm[a] = src.origin_mm[a] + 0.5f * (factor - 1) * src.spacing_mm[a];
    }
    VoxelGrid out(dst);
    const double inv = 1.0 / (static_cast<double>(factor) * factor * factor);
    for (int z = 0; z < dst.dims[2]; ++z)
      for (int y = 0; y < dst.dims[1]; ++y)
        for (int x = 0; x < dst.dims[0]; ++x) {
          double acc = 0.0;
          for (int k = 0; k < factor; ++k)
            for (int j = 0; j < factor; ++j)
              for (int i = 0; i < factor; ++i)
                acc += g.at(x * factor + i, y * factor + j, z * factor + k);
          out.at(x, y, z) = static_cast<float>(acc * inv);
        }
    return out;
  }
  for (int a = 0; a < 3; ++a) {
    dst.dims[a] = src.dims[a] * factor;
    dst.spacing_mm[a] = src.spacing_mm[a] / factor;
    dst.origin_mm[a] = src.origin_mm[a] - 0.5f * (factor - 1) * dst.spacing_mm[a];
  }
  VoxelGrid out(dst);
  const double inv = 1.0 / factor;
  for (int z = 0; z < dst.dims[2]; ++z)
    for (int y = 0; y < dst.dims[1]; ++y)
      for (int x = 0; x < dst.dims[0]; ++x) {
        const Vec3 p{(x + 0.5) * inv - 0.5, (y + 0.5) * inv - 0.5, (z + 0.5) * inv - 0.5};
        out.at(x, y, z) = static_cast<float>(trilinear_sample(g, p));
      }
  return out;
}

/// Block-majority label downsampling; ties go to the smaller id.
inline LabelGrid downsample_labels(const LabelGrid& g, int factor) {
  if (factor < 2) throw ArgumentError("label downsample factor must be >= 2");
  GridGeometry dst = g.geometry();
  for (int a = 0; a < 3; ++a) {
    if (g.dims()[a] % factor != 0)
      throw GeometryError("label downsampling requires dims divisible by the factor");
    dst.dims[a] /= factor;
    dst.origin_mm[a] += 0.5f * (factor - 1) * dst.spacing_mm[a];
    dst.spacing_mm[a] *= factor;
  }
  LabelGrid out(dst);
  std::array<int, 256> counts{};
  for (int z = 0; z < dst.dims[2]; ++z)
    for (int y = 0; y < dst.dims[1]; ++y)
      for (int x = 0; x < dst.dims[0]; ++x) {
        counts.fill(0);
        for (int k = 0; k < factor; ++k)
          for (int j = 0; j < factor; ++j)
            for (int i = 0; i < factor; ++i)
              ++counts[g.at(x * factor + i, y * factor + j, z * factor + k)];
        int best = 0;
        for (int l = 1; l < 256; ++l)
          if (counts[l] > counts[best]) best = l;
        out.at(x, y, z) = static_cast<LabelId>(best);
      }
  return out;
}

/// Nearest-neighbour label magnification (each voxel becomes a factor^3 block).
inline LabelGrid upsample_labels(const LabelGrid& g, int factor) {
  if (factor < 2) throw ArgumentError("label upsample factor must be >= 2");
  GridGeometry dst = g.geometry();
  for (int a = 0; a < 3; ++a) {
    dst.dims[a] *= factor;
    dst.spacing_mm[a] /= factor;
    dst.origin_mm[a] -= 0.5f * (factor - 1) * dst.spacing_mm[a];
  }
  LabelGrid out(dst);
  for (int z = 0; z < dst.dims[2]; ++z)
    for (int y = 0; y < dst.dims[1]; ++y)
      for (int x = 0; x < dst.dims[0]; ++x) out.at(x, y, z) = g.at(x / factor, y / factor, z / factor);
  return out;
}

/// Mean 0, population variance 1.
inline VoxelGrid zscore_normalize(const VoxelGrid& g) {
  const auto& v = g.values();
  double mean = 0.0;
  for (float x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (float x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  if (!(var > 0.0)) throw ArgumentError("zscore_normalize: grid has zero variance");
  const double inv_sd = 1.0 / std::sqrt(var);
  VoxelGrid out(g.geometry());
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = static_cast<float>((v[i] - mean) * inv_sd);
  return out;
}

template <typename T>
Grid<T> flip_x(const Grid<T>& g) {
  Grid<T> out(g.geometry());
  const int nx = g.nx();
  for (int z = 0; z < g.nz(); ++z)
    for (int y = 0; y < g.ny(); ++y)
      for (int x = 0; x < nx; ++x) out.at(nx - 1 - x, y, z) = g.at(x, y, z);
  return out;
}

inline LabelGrid mirror_labels(const LabelGrid& labels) {
  LabelGrid out = flip_x(labels);
  for (auto& l : out.values()) l = LabelTaxonomy::mirror(l);
  return out;
}

/// Left-right mirror: flips x and swaps hemisphere of every label.
inline std::pair<VoxelGrid, LabelGrid> mirror_lr(const VoxelGrid& intensity, const LabelGrid& labels) {
  require_same_lattice(intensity, labels, "mirror_lr");
  return {flip_x(intensity), mirror_labels(labels)};
}

inline bool labels_valid(const LabelGrid& g) {
  return std::all_of(g.values().begin(), g.values().end(),
                     [](LabelId l) { return LabelTaxonomy::is_valid(l); });
}

}  // namespace lseg
