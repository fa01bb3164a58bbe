#pragma once

// Case preparation, stage targets, region-of-interest handling and the
// two-phase training loop (Adam, then Adamax, then an optional mixed-set
// fine-tune).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "augment.hpp"
#include "cascade.hpp"
#include "error.hpp"
#include "neural/loss.hpp"
#include "neural/network.hpp"
#include "neural/optim.hpp"
#include "neural/sampler.hpp"
#include "rng.hpp"
#include "volgrid.hpp"

namespace lseg {

enum class ChannelMode { t1, t1t2, t1t2_atlas };
enum class Resolution { full, half };

inline const char* to_string(ChannelMode m) {
  return m == ChannelMode::t1 ? "t1" : m == ChannelMode::t1t2 ? "t1t2" : "t1t2_atlas";
}
inline const char* to_string(Resolution r) { return r == Resolution::full ? "full" : "half"; }

inline ChannelMode channel_mode_from_string(const std::string& s) {
  if (s == "t1") return ChannelMode::t1;
  if (s == "t1t2") return ChannelMode::t1t2;
  if (s == "t1t2_atlas") return ChannelMode::t1t2_atlas;
  throw ArgumentError("unknown channel mode '" + s + "' (expected t1, t1t2 or t1t2_atlas)");
}
inline Resolution resolution_from_string(const std::string& s) {
  if (s == "full") return Resolution::full;
  if (s == "half") return Resolution::half;
  throw ArgumentError("unknown resolution '" + s + "' (expected full or half)");
}

inline int channel_count(ChannelMode m) { return m == ChannelMode::t1 ? 1 : m == ChannelMode::t1t2 ? 2 : 3; }
inline bool uses_atlas(ChannelMode m) { return m == ChannelMode::t1t2_atlas; }

/// Raw (un-normalized) inputs of one case. `atlas` may be empty when the
/// channel mode does not use it; `labels` may be empty at inference.
struct Subject {
  VoxelGrid t1, t2;
  LabelGrid atlas;
  LabelGrid labels;
};

/// Atlas channel: label id scaled linearly into [0, 1].
inline VoxelGrid encode_atlas(const LabelGrid& atlas) {
  VoxelGrid g(atlas.geometry());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(atlas[i]) / static_cast<float>(kNumLabels);
  return g;
}

/// z-scored intensities, then the encoded atlas when the mode uses it.
inline std::vector<VoxelGrid> input_channels(const Subject& s, ChannelMode mode) {
  std::vector<VoxelGrid> ch;
  ch.push_back(zscore_normalize(s.t1));
  if (mode != ChannelMode::t1) ch.push_back(zscore_normalize(s.t2));
  if (uses_atlas(mode)) {
    if (s.atlas.size() == 0) throw ArgumentError("channel mode needs an atlas but none was supplied");
    require_same_lattice(s.t1, s.atlas, "input_channels");
    ch.push_back(encode_atlas(s.atlas));
  }
  return ch;
}

/// Half resolution: intensities block-averaged by 2, label maps by majority.
inline Subject at_resolution(const Subject& s, Resolution r) {
  if (r == Resolution::full) return s;
  Subject h;
  h.t1 = resample_factor(s.t1, 2, ResampleDirection::down);
  h.t2 = resample_factor(s.t2, 2, ResampleDirection::down);
  if (s.atlas.size()) h.atlas = downsample_labels(s.atlas, 2);
  if (s.labels.size()) h.labels = downsample_labels(s.labels, 2);
  return h;
}

/// 0 background, 1 left, 2 right.
inline LabelGrid stage1_target(const LabelGrid& labels) {
  LabelGrid t(labels.geometry());
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = labels[i] == kBackground ? 0 : static_cast<LabelId>(LabelTaxonomy::hemisphere_of(labels[i]));
  return t;
}

/// 0 background, otherwise the structure class 1..13.
inline LabelGrid stage2_target(const LabelGrid& labels) {
  LabelGrid t(labels.geometry());
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = labels[i] == kBackground ? 0 : static_cast<LabelId>(LabelTaxonomy::class_of(labels[i]));
  return t;
}

// ---------------------------------------------------------------------------
// Stage-2 region of interest

struct Roi {
  Index3 lo{0, 0, 0};
  Index3 size{0, 0, 0};
  bool empty() const { return size[0] == 0; }
};

/// Bounding box of the nonzero voxels, grown by `margin`, each side rounded
/// up to a multiple of `divisor` and kept inside the grid.
inline Roi mask_roi(const LabelGrid& mask, int margin, int divisor) {
  const auto d = mask.dims();
  Index3 lo = d, hi{-1, -1, -1};
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x)
        if (mask.at(x, y, z)) {
          const Index3 p{x, y, z};
          for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], p[a]);
            hi[a] = std::max(hi[a], p[a]);
          }
        }
  Roi r;
  if (hi[0] < 0) return r;
  for (int a = 0; a < 3; ++a) {
    if (d[a] % divisor != 0) throw GeometryError("mask_roi: grid dims must be multiples of the divisor");
    const int l = std::max(0, lo[a] - margin);
    const int h = std::min(d[a] - 1, hi[a] + margin);
    int size = ((h - l + 1 + divisor - 1) / divisor) * divisor;
    size = std::min(size, d[a]);
    r.size[a] = size;
    r.lo[a] = std::clamp(l - (size - (h - l + 1)) / 2, 0, d[a] - size);
  }
  return r;
}

inline ProbMap crop_map(const ProbMap& m, const Roi& r) {
  ProbMap out(m.channels, r.size);
  for (int c = 0; c < m.channels; ++c) {
    const float* src = m.channel(c);
    float* dst = out.channel(c);
    std::size_t k = 0;
    for (int z = 0; z < r.size[2]; ++z)
      for (int y = 0; y < r.size[1]; ++y) {
        const float* row = src + ((static_cast<std::size_t>(z + r.lo[2]) * m.dims[1]) + (y + r.lo[1])) * m.dims[0] + r.lo[0];
        for (int x = 0; x < r.size[0]; ++x) dst[k++] = row[x];
      }
  }
  return out;
}

template <typename G>
G crop_grid(const G& g, const Roi& r) {
  GridGeometry geo = g.geometry();
  for (int a = 0; a < 3; ++a) geo.origin_mm[a] += static_cast<float>(r.lo[a]) * geo.spacing_mm[a];
  geo.dims = r.size;
  G out(geo);
  for (int z = 0; z < r.size[2]; ++z)
    for (int y = 0; y < r.size[1]; ++y)
      for (int x = 0; x < r.size[0]; ++x) out.at(x, y, z) = g.at(x + r.lo[0], y + r.lo[1], z + r.lo[2]);
  return out;
}

/// Places an ROI probability map into a full-size map whose voxels outside
/// the ROI are certain background.
inline ProbMap paste_background(const ProbMap& roi_map, const Roi& r, const Index3& dims) {
  ProbMap out(roi_map.channels, dims, 0.f);
  std::fill(out.channel(0), out.channel(0) + out.voxels(), 1.f);
  if (r.empty()) return out;
  for (int c = 0; c < roi_map.channels; ++c) {
    const float* src = roi_map.channel(c);
    float* dst = out.channel(c);
    std::size_t k = 0;
    for (int z = 0; z < r.size[2]; ++z)
      for (int y = 0; y < r.size[1]; ++y) {
        float* row = dst + ((static_cast<std::size_t>(z + r.lo[2]) * dims[1]) + (y + r.lo[1])) * dims[0] + r.lo[0];
        for (int x = 0; x < r.size[0]; ++x) row[x] = src[k++];
      }
  }
  return out;
}

inline constexpr int kRoiMargin = 4;

/// Cascade inference with stage 2 restricted to the ROI of the averaged
/// stage-1 mask. Voxels outside the ROI are background in stage 2.
inline SegmentationRun ensemble_predict_roi(const std::vector<CascadeModel*>& models,
                                            const std::vector<VoxelGrid>& channels) {
  if (models.empty()) throw ArgumentError("ensemble_predict: no models");
  if (channels.empty()) throw ArgumentError("ensemble_predict: no input channels");
  const GridGeometry& geo = channels.front().geometry();
  for (const auto* m : models)
    if (m->in_channels() != static_cast<int>(channels.size()))
      throw ArgumentError("ensemble_predict: model '" + m->name + "' expects " + std::to_string(m->in_channels()) +
                          " channels");
  auto average = [&](const ProbMap& x, auto stage) {
    ProbMap out;
    std::vector<double> acc;
    for (std::size_t k = 0; k < models.size(); ++k) {
      const ProbMap& p = (models[k]->*stage).forward(x, nn::Mode::eval);
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
  run.stage1 = average(channels_to_map(channels), &CascadeModel::stage1);
  const auto hemi = nn::argmax_channels(run.stage1, geo);
  int divisor = 1;
  for (const auto* m : models) divisor = std::max(divisor, m->stage2.spec().spatial_divisor());
  const Roi roi = mask_roi(hemi, kRoiMargin, divisor);
  if (roi.empty()) {
    run.stage2 = paste_background(ProbMap(kStage2Classes, {1, 1, 1}), roi, geo.dims);
  } else {
    const ProbMap gated = crop_map(channels_to_map(gate_inputs(channels, run.stage1)), roi);
    run.stage2 = paste_background(average(gated, &CascadeModel::stage2), roi, geo.dims);
  }
  run.labels = compose_labels(run.stage1, run.stage2, geo);
  for (const auto* m : models) run.models.push_back(m->name);
  return run;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int adam_epochs = 200;     // one epoch = one sampled case (batch size 1)
  int adamax_epochs = 100;
  int finetune_epochs = 0;   // mixed primary/extended sampling, Adamax
  double lr = 1e-3;
  double mix_probability = 0.5;
  double augment_probability = 0.5;
  double elastic_probability = 0.3;
  double elastic_magnitude = 2.0;
  double elastic_sigma = 3.0;
  PerturbRanges ranges;
  int roi_jitter = 2;

  void validate() const {
    if (adam_epochs < 0 || adamax_epochs < 0 || finetune_epochs < 0) throw ArgumentError("epochs must be >= 0");
    if (!(mix_probability >= 0.0 && mix_probability <= 1.0)) throw ArgumentError("mix_probability must be in [0, 1]");
    if (!(augment_probability >= 0.0 && augment_probability <= 1.0) ||
        !(elastic_probability >= 0.0 && elastic_probability <= 1.0))
      throw ArgumentError("augmentation probabilities must be in [0, 1]");
    if (!(lr > 0.0)) throw ArgumentError("learning rate must be > 0");
  }
};

enum class Stage { hemisphere = 1, lobule = 2 };

struct LossRecord {
  int step = 0;
  std::string phase;
  int case_index = 0;
  bool primary = true;
  double loss = 0.0;
  double mean_dice = 0.0;
  double bce = 0.0;
};

/// Thrown when the loss or a gradient becomes non-finite. The network has
/// been restored to the last parameters that produced a finite step.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, int step) : Error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

/// One augmented, normalized training example for the given stage.
struct TrainExample {
  ProbMap input;
  ProbMap target;
};

inline TrainExample make_example(const Subject& raw, ChannelMode mode, Stage stage, const TrainConfig& cfg,
                                 int divisor, std::uint64_t seed) {
  Rng rng(seed);
  Subject s = raw;
  if (rng.uniform() < cfg.elastic_probability) {
    const auto f = smooth_field(s.labels.geometry(), rng.uniform(0.0, cfg.elastic_magnitude), cfg.elastic_sigma,
                                rng.bits());
    s.t1 = warp(AtlasTemplate{0, s.t1, LabelGrid(s.t1.geometry()), {}}, f).intensity;
    s.t2 = warp(AtlasTemplate{0, s.t2, LabelGrid(s.t2.geometry()), {}}, f).intensity;
    s.labels = warp(AtlasTemplate{0, VoxelGrid(s.t1.geometry()), s.labels, {}}, f).labels;
    if (s.atlas.size()) s.atlas = warp(AtlasTemplate{0, VoxelGrid(s.t1.geometry()), s.atlas, {}}, f).labels;
  } else {
    (void)rng.bits();
  }
  for (VoxelGrid* g : {&s.t1, &s.t2}) {
    const bool apply = rng.uniform() < cfg.augment_probability;
    const PerturbSpec p = random_perturbation(rng, cfg.ranges);
    if (apply) *g = apply_perturbation(*g, p);
  }
  auto channels = input_channels(s, mode);
  TrainExample ex;
  if (stage == Stage::hemisphere) {
    ex.input = channels_to_map(channels);
    ex.target = nn::one_hot<float>(stage1_target(s.labels), kStage1Classes);
    return ex;
  }
  // Stage 2 sees ground-truth-gated channels inside a jittered ROI.
  for (auto& c : channels)
    for (std::size_t i = 0; i < c.size(); ++i)
      if (s.labels[i] == kBackground) c[i] = 0.f;
  Roi roi = mask_roi(s.labels, kRoiMargin, divisor);
  if (roi.empty()) roi.size = s.labels.dims();
  for (int a = 0; a < 3; ++a) {
    const int j = static_cast<int>(rng.below(2 * cfg.roi_jitter + 1)) - cfg.roi_jitter;
    roi.lo[a] = std::clamp(roi.lo[a] + j, 0, s.labels.dims()[a] - roi.size[a]);
  }
  ex.input = crop_map(channels_to_map(channels), roi);
  ex.target = nn::one_hot<float>(crop_grid(stage2_target(s.labels), roi), kStage2Classes);
  return ex;
}

using TrainLogFn = std::function<void(const LossRecord&)>;

/// Trains `net` in place. `extended` is only sampled during the fine-tune
/// phase. Deterministic given (net initialization, data, cfg, seed).
inline std::vector<LossRecord> train_network(nn::Network<float>& net, const std::vector<Subject>& primary,
                                             const std::vector<Subject>& extended, ChannelMode mode, Stage stage,
                                             const TrainConfig& cfg, std::uint64_t seed, const TrainLogFn& log = {}) {
  cfg.validate();
  if (primary.empty()) throw ArgumentError("train_network: no training cases");
  if (net.spec().in_channels != channel_count(mode)) throw ArgumentError("train_network: channel mode mismatch");
  if (cfg.finetune_epochs > 0 && extended.empty())
    throw ArgumentError("train_network: fine-tuning needs an extended case set");
  const int divisor = net.spec().spatial_divisor();
  std::vector<LossRecord> history;
  Rng pick(mix_seed(seed, 0x7a11));
  std::optional<nn::MixedSampler> mixer;
  if (cfg.finetune_epochs > 0) mixer.emplace(primary.size(), extended.size(), cfg.mix_probability, seed);
  nn::AdamConfig opt;
  opt.lr = cfg.lr;
  const int total = cfg.adam_epochs + cfg.adamax_epochs + cfg.finetune_epochs;
  std::vector<float> good_values = net.params().values;
  std::vector<float> good_buffers = net.params().buffers;
  auto restore = [&] {
    net.params().values = good_values;
    net.params().buffers = good_buffers;
  };
  for (int step = 0; step < total; ++step) {
    const bool finetune = step >= cfg.adam_epochs + cfg.adamax_epochs;
    if (step == cfg.adam_epochs && step > 0) net.params().reset_optimizer_state();
    LossRecord rec;
    rec.step = step;
    rec.phase = step < cfg.adam_epochs ? "adam" : finetune ? "finetune" : "adamax";
    const Subject* subject;
    if (finetune) {
      const auto c = mixer->next();
      rec.primary = c.primary;
      rec.case_index = static_cast<int>(c.index);
      subject = c.primary ? &primary[c.index] : &extended[c.index];
    } else {
      rec.case_index = static_cast<int>(pick.below(primary.size()));
      subject = &primary[rec.case_index];
    }
    const std::uint64_t step_seed = mix_seed(seed, 0x1000000ULL + static_cast<std::uint64_t>(step));
    const auto ex = make_example(*subject, mode, stage, cfg, divisor, step_seed);
    const auto& pred = net.forward(ex.input, nn::Mode::train, step_seed);
    const auto loss = nn::loss_dice_bce(pred, ex.target);
    rec.loss = loss.value;
    rec.mean_dice = loss.mean_dice;
    rec.bce = loss.bce;
    if (!std::isfinite(loss.value)) {
      restore();
      throw TrainingAborted("non-finite loss at step " + std::to_string(step), step);
    }
    net.params().zero_grad();
    net.backward(loss.grad, false);
    try {
      if (step < cfg.adam_epochs)
        nn::adam_step(net.params(), opt);
      else
        nn::adamax_step(net.params(), opt);
    } catch (const nn::NonFiniteGradient& e) {
      restore();
      throw TrainingAborted(std::string(e.what()) + " at step " + std::to_string(step), step);
    }
    good_values = net.params().values;
    good_buffers = net.params().buffers;
    history.push_back(rec);
    if (log) log(rec);
  }
  return history;
}

}  // namespace lseg
