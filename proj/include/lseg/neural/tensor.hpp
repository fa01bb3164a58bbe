#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "../error.hpp"
#include "../volgrid.hpp"

namespace lseg::nn {

/// Multi-channel volume, channel-major, each channel x-fastest.
template <typename T>
struct FeatureMap {
  int channels = 0;
  Index3 dims{0, 0, 0};
  std::vector<T> data;

  FeatureMap() = default;
  FeatureMap(int c, Index3 d, T fill = T{}) : channels(c), dims(d), data(static_cast<std::size_t>(c) * voxels_of(d), fill) {
    if (c < 1) throw ArgumentError("FeatureMap: channels must be >= 1");
    for (int a : d)
      if (a < 1) throw ArgumentError("FeatureMap: dims must be >= 1");
  }

  static std::size_t voxels_of(const Index3& d) {
    return static_cast<std::size_t>(d[0]) * d[1] * d[2];
  }
  std::size_t voxels() const { return voxels_of(dims); }
  std::size_t size() const { return data.size(); }

  T* channel(int c) { return data.data() + static_cast<std::size_t>(c) * voxels(); }
  const T* channel(int c) const { return data.data() + static_cast<std::size_t>(c) * voxels(); }

  T& at(int c, std::size_t v) { return data[static_cast<std::size_t>(c) * voxels() + v]; }
  const T& at(int c, std::size_t v) const { return data[static_cast<std::size_t>(c) * voxels() + v]; }

  bool same_shape(const FeatureMap& o) const { return channels == o.channels && dims == o.dims; }

  bool finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

/// Stacks scalar grids into channels.
template <typename T>
FeatureMap<T> stack_channels(const std::vector<const VoxelGrid*>& grids) {
  if (grids.empty()) throw ArgumentError("stack_channels: no channels");
  FeatureMap<T> m(static_cast<int>(grids.size()), grids.front()->dims());
  for (std::size_t c = 0; c < grids.size(); ++c) {
    if (grids[c]->dims() != m.dims) throw GeometryError("stack_channels: channel dims differ");
    T* dst = m.channel(static_cast<int>(c));
    for (std::size_t i = 0; i < m.voxels(); ++i) dst[i] = static_cast<T>((*grids[c])[i]);
  }
  return m;
}

/// One-hot encoding of a class-index grid (values in [0, classes)).
template <typename T>
FeatureMap<T> one_hot(const LabelGrid& cls, int classes) {
  FeatureMap<T> m(classes, cls.dims(), T{0});
  for (std::size_t i = 0; i < cls.size(); ++i) {
    if (cls[i] >= classes) throw ArgumentError("one_hot: class index out of range");
    m.at(cls[i], i) = T{1};
  }
  return m;
}

/// Per-voxel argmax over channels; ties go to the lower channel.
template <typename T>
LabelGrid argmax_channels(const FeatureMap<T>& m, const GridGeometry& geo) {
  if (geo.dims != m.dims) throw GeometryError("argmax_channels: geometry mismatch");
  LabelGrid out(geo);
  for (std::size_t v = 0; v < m.voxels(); ++v) {
    int best = 0;
    for (int c = 1; c < m.channels; ++c)
      if (m.at(c, v) > m.at(best, v)) best = c;
    out[v] = static_cast<LabelId>(best);
  }
  return out;
}

}  // namespace lseg::nn
