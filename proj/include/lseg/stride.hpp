#pragma once

#include <array>
#include <string>

#include "error.hpp"
#include "parallel.hpp"
#include "volgrid.hpp"

namespace lseg {

/// The 8 interleaved half-resolution grids of a step-2 stride decomposition.
/// Offsets (a, b, c) are enumerated lexicographically: slot k = 4a + 2b + c
/// holds source voxels (2i + a, 2j + b, 2k + c).
template <typename T>
struct StrideStack {
  static constexpr int kCount = 8;

  GridGeometry source_geometry;
  std::array<Grid<T>, kCount> subvolumes;

  static constexpr Index3 offset(int k) { return {(k >> 2) & 1, (k >> 1) & 1, k & 1}; }
  static constexpr int slot(int a, int b, int c) { return 4 * a + 2 * b + c; }
};

template <typename T>
StrideStack<T> stride_decompose(const Grid<T>& g) {
  for (int d : g.dims())
    if (d % 2 != 0) throw GeometryError("stride_decompose: all dims must be even");
  StrideStack<T> stack;
  stack.source_geometry = g.geometry();
  GridGeometry sub = g.geometry();
  for (int a = 0; a < 3; ++a) {
    sub.dims[a] /= 2;
    sub.spacing_mm[a] *= 2.f;
  }
  parallel_for(StrideStack<T>::kCount, [&](std::size_t b, std::size_t e) {
    for (std::size_t k = b; k < e; ++k) {
      const Index3 off = StrideStack<T>::offset(static_cast<int>(k));
      GridGeometry geo = sub;
      for (int a = 0; a < 3; ++a)
        geo.origin_mm[a] = g.geometry().origin_mm[a] + off[a] * g.geometry().spacing_mm[a];
      Grid<T> out(geo);
      for (int z = 0; z < geo.dims[2]; ++z)
        for (int y = 0; y < geo.dims[1]; ++y)
          for (int x = 0; x < geo.dims[0]; ++x)
            out.at(x, y, z) = g.at(2 * x + off[0], 2 * y + off[1], 2 * z + off[2]);
      stack.subvolumes[k] = std::move(out);
    }
  });
  return stack;
}

template <typename T>
Grid<T> stride_recompose(const StrideStack<T>& stack) {
  const auto& src = stack.source_geometry;
  src.validate();
  for (int a = 0; a < 3; ++a)
    if (src.dims[a] % 2 != 0) throw GeometryError("stride_recompose: source dims must be even");
  const Index3 half{src.dims[0] / 2, src.dims[1] / 2, src.dims[2] / 2};
  for (const auto& s : stack.subvolumes)
    if (s.dims() != half || s.size() != s.geometry().voxel_count())
      throw GeometryError("stride_recompose: inconsistent subvolume dims");
  Grid<T> out(src);
  for (int k = 0; k < StrideStack<T>::kCount; ++k) {
    const Index3 off = StrideStack<T>::offset(k);
    const auto& s = stack.subvolumes[k];
    for (int z = 0; z < half[2]; ++z)
      for (int y = 0; y < half[1]; ++y)
        for (int x = 0; x < half[0]; ++x)
          out.at(2 * x + off[0], 2 * y + off[1], 2 * z + off[2]) = s.at(x, y, z);
  }
  return out;
}

}  // namespace lseg
