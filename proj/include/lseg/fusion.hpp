#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "evalstats.hpp"
#include "parallel.hpp"
#include "volgrid.hpp"

namespace lseg {

/// Dense per-voxel displacement in voxel units. For target voxel p the
/// source is sampled at p + (dx, dy, dz)(p).
struct DisplacementField {
  VoxelGrid dx, dy, dz;

  DisplacementField() = default;
  explicit DisplacementField(const GridGeometry& g) : dx(g), dy(g), dz(g) {}
  DisplacementField(VoxelGrid x, VoxelGrid y, VoxelGrid z) : dx(std::move(x)), dy(std::move(y)), dz(std::move(z)) {
    require_same_lattice(dx, dy, "DisplacementField");
    require_same_lattice(dx, dz, "DisplacementField");
  }

  const GridGeometry& geometry() const { return dx.geometry(); }

  Vec3 at(std::size_t i) const { return {dx[i], dy[i], dz[i]}; }

  bool finite() const {
    for (const auto* g : {&dx, &dy, &dz})
      for (float v : g->values())
        if (!std::isfinite(v)) return false;
    return true;
  }

  double max_norm() const {
    double m = 0.0;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const double n = std::sqrt(double(dx[i]) * dx[i] + double(dy[i]) * dy[i] + double(dz[i]) * dz[i]);
      m = std::max(m, n);
    }
    return m;
  }
};

struct AtlasTemplate {
  int id = 0;
  VoxelGrid intensity;  // z-scored
  LabelGrid labels;
  std::optional<DisplacementField> displacement;
};

using AtlasLibrary = std::vector<AtlasTemplate>;

struct FusionConfig {
  double d = 0.5;
  int n_templates = 20;

  void validate() const {
    if (!(d >= 0.0) || !std::isfinite(d)) throw ArgumentError("fusion: d must be >= 0");
    if (n_templates < 1) throw ArgumentError("fusion: n_templates must be >= 1");
  }
};

inline double l1_distance(const VoxelGrid& a, const VoxelGrid& b) {
  require_same_lattice(a, b, "l1_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(static_cast<double>(a[i]) - b[i]);
  return s;
}

/// The n templates closest to the target in L1 intensity distance, nearest
/// first; equal distances are ordered by template id.
inline std::vector<int> select_similar(const AtlasLibrary& library, const VoxelGrid& target, int n) {
  if (n < 1) throw ArgumentError("select_similar: n must be >= 1");
  if (static_cast<std::size_t>(n) > library.size())
    throw ArgumentError("select_similar: n exceeds library size");
  std::vector<std::pair<double, int>> scored;
  scored.reserve(library.size());
  for (const auto& t : library) scored.emplace_back(l1_distance(t.intensity, target), t.id);
  std::sort(scored.begin(), scored.end());
  std::vector<int> ids;
  for (int i = 0; i < n; ++i) ids.push_back(scored[i].second);
  return ids;
}

/// Resamples a template onto the field's lattice: intensity trilinearly,
/// labels by nearest neighbour, both at p + field(p).
inline AtlasTemplate warp(const AtlasTemplate& tpl, const DisplacementField& field) {
  require_same_lattice(tpl.intensity, tpl.labels, "warp");
  if (!field.finite()) throw ArgumentError("warp: displacement field has non-finite vectors");
  const GridGeometry& geo = field.geometry();
  if (geo.dims != tpl.intensity.dims()) throw GeometryError("warp: field and template dims differ");
  AtlasTemplate out;
  out.id = tpl.id;
  out.intensity = VoxelGrid(geo);
  out.labels = LabelGrid(geo);
  const int nx = geo.dims[0], ny = geo.dims[1];
  parallel_for(static_cast<std::size_t>(geo.dims[2]), [&](std::size_t zb, std::size_t ze) {
    for (int z = static_cast<int>(zb); z < static_cast<int>(ze); ++z)
      for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) {
          const std::size_t i = out.intensity.index(x, y, z);
          const Vec3 d = field.at(i);
          const Vec3 p{x + d[0], y + d[1], z + d[2]};
          out.intensity[i] = static_cast<float>(trilinear_sample(tpl.intensity, p));
          out.labels[i] = nearest_sample(tpl.labels, p);
        }
  });
  return out;
}

/// Vote weight of a template voxel whose intensity differs by |diff|.
inline double fusion_weight(double abs_diff, double d) { return 1.0 / (1.0 + d * std::fabs(abs_diff)); }

/// Intensity-weighted majority vote. Each template j adds
/// 1 / (1 + d |I_p - L_pj|) to the score of its label at p; the best score
/// wins and ties go to the smaller label id. Scores are accumulated in
/// template order, so the result does not depend on the worker count.
inline LabelGrid fuse_weighted_vote(const VoxelGrid& target, const std::vector<AtlasTemplate>& warped,
                                    const FusionConfig& cfg) {
  cfg.validate();
  if (warped.empty()) throw ArgumentError("fuse_weighted_vote: no templates");
  for (const auto& t : warped) {
    require_same_lattice(target, t.intensity, "fuse_weighted_vote");
    require_same_lattice(target, t.labels, "fuse_weighted_vote");
  }
  LabelGrid out(target.geometry());
  const std::size_t nt = warped.size();
  parallel_for(target.size(), [&](std::size_t b, std::size_t e) {
    std::vector<LabelId> labels(nt);
    std::vector<double> score(nt);
    for (std::size_t i = b; i < e; ++i) {
      std::size_t used = 0;
      for (std::size_t j = 0; j < nt; ++j) {
        const LabelId l = warped[j].labels[i];
        const double w = fusion_weight(static_cast<double>(target[i]) - warped[j].intensity[i], cfg.d);
        std::size_t k = 0;
        while (k < used && labels[k] != l) ++k;
        if (k == used) {
          labels[used] = l;
          score[used] = 0.0;
          ++used;
        }
        score[k] += w;
      }
      std::size_t best = 0;
      for (std::size_t k = 1; k < used; ++k)
        if (score[k] > score[best] || (score[k] == score[best] && labels[k] < labels[best])) best = k;
      out[i] = labels[best];
    }
  });
  return out;
}

/// Mean Dice over the foreground labels of a fused atlas and a reference.
inline double atlas_quality(const LabelGrid& fused, const LabelGrid& reference) {
  return mean_present_dice(fused, reference);
}

/// Subject-specific atlas: pick the n most similar templates, warp each onto
/// the target and fuse. field_for(id) returns the template-to-target field,
/// or std::nullopt to use the template unwarped (falling back to a stored
/// AtlasTemplate::displacement when present).
template <typename FieldFn>
LabelGrid build_subject_atlas(const AtlasLibrary& library, const VoxelGrid& target, const FusionConfig& cfg,
                              FieldFn&& field_for) {
  cfg.validate();
  const auto ids = select_similar(library, target, cfg.n_templates);
  std::vector<AtlasTemplate> warped;
  warped.reserve(ids.size());
  for (int id : ids) {
    const auto it = std::find_if(library.begin(), library.end(), [id](const AtlasTemplate& t) { return t.id == id; });
    std::optional<DisplacementField> field = field_for(id);
    if (!field && it->displacement) field = it->displacement;
    warped.push_back(field ? warp(*it, *field) : *it);
  }
  return fuse_weighted_vote(target, warped, cfg);
}

inline LabelGrid build_subject_atlas(const AtlasLibrary& library, const VoxelGrid& target, const FusionConfig& cfg) {
  return build_subject_atlas(library, target, cfg, [](int) { return std::optional<DisplacementField>{}; });
}

}  // namespace lseg
