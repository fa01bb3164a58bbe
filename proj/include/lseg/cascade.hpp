#pragma once

// Two-stage cascade: a hemisphere network (background / left / right), a
// cerebellum mask gating every input channel, and a class network whose
// output is combined with the hemisphere into the 27-label map.

#include <string>
#include <vector>

#include "error.hpp"
#include "neural/network.hpp"
#include "neural/tensor.hpp"
#include "parallel.hpp"
#include "taxonomy.hpp"
#include "volgrid.hpp"

namespace lseg {

inline constexpr int kStage1Classes = 3;
inline constexpr int kStage2Classes = kNumClasses + 1;

using ProbMap = nn::FeatureMap<float>;

struct CascadeModel {
  std::string name;
  nn::Network<float> stage1;
  nn::Network<float> stage2;

  CascadeModel(std::string n, nn::Network<float> s1, nn::Network<float> s2)
      : name(std::move(n)), stage1(std::move(s1)), stage2(std::move(s2)) {
    if (stage1.spec().out_classes != kStage1Classes) throw ArgumentError("cascade: stage 1 must have 3 classes");
    if (stage2.spec().out_classes != kStage2Classes) throw ArgumentError("cascade: stage 2 must have 14 classes");
    if (stage1.spec().in_channels != stage2.spec().in_channels)
      throw ArgumentError("cascade: stages disagree on input channels");
  }

  int in_channels() const { return stage1.spec().in_channels; }
};

struct SegmentationRun {
  ProbMap stage1;
  ProbMap stage2;
  LabelGrid labels;
  std::vector<std::string> models;
  std::string config_hash;
};

/// Cerebellum mask from stage-1 argmax (left or right), multiplied into
/// every channel.
inline std::vector<VoxelGrid> gate_inputs(const std::vector<VoxelGrid>& channels, const ProbMap& stage1) {
  if (stage1.channels != kStage1Classes) throw ArgumentError("gate_inputs: stage 1 map must have 3 channels");
  const auto mask = nn::argmax_channels(stage1, GridGeometry(stage1.dims));
  std::vector<VoxelGrid> out;
  out.reserve(channels.size());
  for (const auto& c : channels) {
    if (c.dims() != stage1.dims) throw GeometryError("gate_inputs: channel and stage-1 dims differ");
    VoxelGrid g = c;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (mask[i] == 0) g[i] = 0.f;
    out.push_back(std::move(g));
  }
  return out;
}

/// h = argmax stage 1, c = argmax stage 2; background if either is, else
/// the taxonomy id of (h, c).
inline LabelGrid compose_labels(const ProbMap& stage1, const ProbMap& stage2, const GridGeometry& geo) {
  if (stage1.channels != kStage1Classes || stage2.channels != kStage2Classes)
    throw ArgumentError("compose_labels: expected 3 and 14 channel maps");
  if (stage1.dims != stage2.dims || stage1.dims != geo.dims) throw GeometryError("compose_labels: dims differ");
  const auto h = nn::argmax_channels(stage1, geo);
  const auto c = nn::argmax_channels(stage2, geo);
  LabelGrid out(geo);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (h[i] == 0 || c[i] == 0) ? kBackground : LabelTaxonomy::lookup(h[i], c[i]);
  return out;
}

inline ProbMap channels_to_map(const std::vector<VoxelGrid>& channels) {
  std::vector<const VoxelGrid*> ptrs;
  for (const auto& c : channels) ptrs.push_back(&c);
  return nn::stack_channels<float>(ptrs);
}

/// Stage-wise probability averaging across models followed by composition.
/// Stage 2 of every model sees the inputs gated by the averaged stage 1.
inline SegmentationRun ensemble_predict(const std::vector<CascadeModel*>& models,
                                        const std::vector<VoxelGrid>& channels) {
  if (models.empty()) throw ArgumentError("ensemble_predict: no models");
  if (channels.empty()) throw ArgumentError("ensemble_predict: no input channels");
  for (const auto* m : models)
    if (m->in_channels() != static_cast<int>(channels.size()))
      throw ArgumentError("ensemble_predict: model '" + m->name + "' expects " + std::to_string(m->in_channels()) +
                          " channels");
  const GridGeometry& geo = channels.front().geometry();
  // Accumulated in double so k identical maps average back bit-exactly.
  auto average = [&](auto&& run_stage) {
    ProbMap out;
    std::vector<double> acc;
    for (std::size_t k = 0; k < models.size(); ++k) {
      const ProbMap& p = run_stage(*models[k]);
      if (k == 0) {
        out = ProbMap(p.channels, p.dims);
        acc.assign(p.size(), 0.0);
      } else if (!out.same_shape(p)) {
        throw ArgumentError("ensemble_predict: class-count mismatch between models");
      }
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p.data[i];
    }
    const double n = static_cast<double>(models.size());
    for (std::size_t i = 0; i < acc.size(); ++i) out.data[i] = static_cast<float>(acc[i] / n);
    return out;
  };

  SegmentationRun run;
  const ProbMap x = channels_to_map(channels);
  run.stage1 = average([&](CascadeModel& m) -> const ProbMap& { return m.stage1.forward(x, nn::Mode::eval); });
  const ProbMap gated = channels_to_map(gate_inputs(channels, run.stage1));
  run.stage2 = average([&](CascadeModel& m) -> const ProbMap& { return m.stage2.forward(gated, nn::Mode::eval); });
  run.labels = compose_labels(run.stage1, run.stage2, geo);
  for (const auto* m : models) run.models.push_back(m->name);
  return run;
}

inline SegmentationRun predict(CascadeModel& model, const std::vector<VoxelGrid>& channels) {
  return ensemble_predict({&model}, channels);
}

}  // namespace lseg
