#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "lseg/augment.hpp"
#include "lseg/fusion.hpp"
#include "lseg/rng.hpp"
#include "support/fusion_oracle.hpp"

using namespace lseg;

namespace {

VoxelGrid random_intensity(Index3 d, Rng& rng) {
  VoxelGrid g{GridGeometry(d)};
  for (auto& v : g.values()) v = static_cast<float>(rng.normal());
  return g;
}

LabelGrid random_labels(Index3 d, Rng& rng, int max_label = kNumLabels) {
  LabelGrid g{GridGeometry(d)};
  for (auto& v : g.values()) v = static_cast<LabelId>(rng.below(max_label + 1));
  return g;
}

using fusion_oracle::fuse;

}  // namespace

TEST(Fusion, WeightClosedForm) {
  EXPECT_DOUBLE_EQ(fusion_weight(0.0, 0.5), 1.0);
  EXPECT_DOUBLE_EQ(fusion_weight(2.0, 0.5), 0.5);
  double prev = 2.0;
  for (int k = 0; k < 100; ++k) {
    const double w = fusion_weight(k * 0.1, 0.5);
    EXPECT_GT(w, 0.0);
    EXPECT_LE(w, 1.0);
    EXPECT_LT(w, prev);
    prev = w;
  }
}

TEST(Fusion, L1Distance) {
  VoxelGrid a(GridGeometry({2, 1, 1}), std::vector<float>{0.f, 0.f});
  VoxelGrid b(GridGeometry({2, 1, 1}), std::vector<float>{1.f, 3.f});
  EXPECT_EQ(l1_distance(a, a), 0.0);
  EXPECT_EQ(l1_distance(a, b), 4.0);
  Rng rng(1);
  const auto x = random_intensity({5, 4, 3}, rng), y = random_intensity({5, 4, 3}, rng);
  EXPECT_EQ(l1_distance(x, y), l1_distance(y, x));
  EXPECT_THROW(l1_distance(x, a), GeometryError);
}

TEST(Fusion, SelectSimilarMatchesSortOracle) {
  Rng rng(2);
  AtlasLibrary lib;
  const Index3 d{4, 4, 4};
  for (int i = 0; i < 7; ++i) lib.push_back({10 + i, random_intensity(d, rng), random_labels(d, rng), {}});
  const auto target = random_intensity(d, rng);
  std::vector<std::pair<double, int>> all;
  for (const auto& t : lib) {
    double s = 0;
    for (std::size_t i = 0; i < target.size(); ++i) s += std::abs(double(t.intensity[i]) - target[i]);
    all.emplace_back(s, t.id);
  }
  std::sort(all.begin(), all.end());
  const auto ids = select_similar(lib, target, 3);
  ASSERT_EQ(ids.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(ids[i], all[i].second);

  EXPECT_EQ(select_similar(lib, lib[4].intensity, 1).front(), lib[4].id);
  EXPECT_EQ(select_similar(lib, target, 7).size(), 7u);
  EXPECT_THROW(select_similar(lib, target, 8), ArgumentError);
}

TEST(Fusion, SelectSimilarTiesByIdAscending) {
  const Index3 d{2, 2, 2};
  AtlasLibrary lib;
  lib.push_back({5, VoxelGrid(GridGeometry(d), 1.f), LabelGrid(GridGeometry(d)), {}});
  lib.push_back({2, VoxelGrid(GridGeometry(d), -1.f), LabelGrid(GridGeometry(d)), {}});
  const auto ids = select_similar(lib, VoxelGrid(GridGeometry(d), 0.f), 2);
  EXPECT_EQ(ids, (std::vector<int>{2, 5}));
}

TEST(Fusion, WarpZeroFieldIsIdentity) {
  Rng rng(3);
  const Index3 d{5, 4, 6};
  AtlasTemplate t{1, random_intensity(d, rng), random_labels(d, rng), {}};
  const auto w = warp(t, DisplacementField(GridGeometry(d)));
  EXPECT_EQ(w.intensity, t.intensity);
  EXPECT_EQ(w.labels, t.labels);
}

TEST(Fusion, WarpIntegerShiftClampsAtEdge) {
  Rng rng(4);
  const Index3 d{5, 3, 2};
  AtlasTemplate t{1, random_intensity(d, rng), random_labels(d, rng), {}};
  DisplacementField f{GridGeometry(d)};
  for (auto& v : f.dx.values()) v = 1.f;
  const auto w = warp(t, f);
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        const int sx = std::min(x + 1, d[0] - 1);
        EXPECT_EQ(w.intensity.at(x, y, z), t.intensity.at(sx, y, z));
        EXPECT_EQ(w.labels.at(x, y, z), t.labels.at(sx, y, z));
      }
}

TEST(Fusion, WarpSmoothFieldKeepsLabelSet) {
  Rng rng(5);
  const Index3 d{12, 12, 12};
  AtlasTemplate t{1, random_intensity(d, rng), random_labels(d, rng, 6), {}};
  const auto f = smooth_field(GridGeometry(d), 2.5, 2.0, 99);
  const auto w = warp(t, f);
  const std::set<LabelId> src(t.labels.values().begin(), t.labels.values().end());
  for (auto l : w.labels.values()) EXPECT_TRUE(src.count(l));
  DisplacementField bad{GridGeometry({2, 2, 2})};
  EXPECT_THROW(warp(t, bad), GeometryError);
}

TEST(Fusion, VoteMatchesOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 40; ++trial) {
    const Index3 d{1 + int(rng.below(8)), 1 + int(rng.below(8)), 1 + int(rng.below(8))};
    const int nt = 1 + int(rng.below(5));
    const double dd = std::array<double, 3>{0.0, 0.5, 2.0}[rng.below(3)];
    const auto target = random_intensity(d, rng);
    std::vector<AtlasTemplate> t;
    for (int j = 0; j < nt; ++j) t.push_back({j, random_intensity(d, rng), random_labels(d, rng, 4), {}});
    FusionConfig cfg;
    cfg.d = dd;
    EXPECT_EQ(fuse_weighted_vote(target, t, cfg), fuse(target, t, dd));
  }
}

TEST(Fusion, ThreeTemplatesVotingOneOneTwo) {
  Rng rng(7);
  const Index3 d{2, 2, 2};
  const auto target = random_intensity(d, rng);
  std::vector<AtlasTemplate> t;
  for (LabelId l : {1, 1, 2}) t.push_back({int(t.size()), random_intensity(d, rng), LabelGrid(GridGeometry(d), l), {}});
  EXPECT_EQ(fuse_weighted_vote(target, t, {}), fuse(target, t, 0.5));
}

TEST(Fusion, SingleTemplateAndPermutationInvariance) {
  Rng rng(8);
  const Index3 d{6, 5, 4};
  const auto target = random_intensity(d, rng);
  std::vector<AtlasTemplate> t;
  for (int j = 0; j < 4; ++j) t.push_back({j, random_intensity(d, rng), random_labels(d, rng, 3), {}});
  EXPECT_EQ(fuse_weighted_vote(target, {t[2]}, {}), t[2].labels);
  auto r = t;
  std::reverse(r.begin(), r.end());
  EXPECT_EQ(fuse_weighted_vote(target, t, {}), fuse_weighted_vote(target, r, {}));
  EXPECT_THROW(fuse_weighted_vote(target, {}, {}), ArgumentError);
}

TEST(Fusion, ThreadCountDoesNotChangeResult) {
  Rng rng(9);
  const Index3 d{8, 8, 8};
  const auto target = random_intensity(d, rng);
  std::vector<AtlasTemplate> t;
  for (int j = 0; j < 5; ++j) t.push_back({j, random_intensity(d, rng), random_labels(d, rng), {}});
  set_num_threads(1);
  const auto a = fuse_weighted_vote(target, t, {});
  set_num_threads(4);
  const auto b = fuse_weighted_vote(target, t, {});
  set_num_threads(0);
  EXPECT_EQ(a, b);
}

TEST(Fusion, AtlasQuality) {
  Rng rng(10);
  const auto l = random_labels({4, 4, 4}, rng);
  EXPECT_DOUBLE_EQ(atlas_quality(l, l), 1.0);
  LabelGrid a(GridGeometry({2, 1, 1}), std::vector<LabelId>{1, 0});
  LabelGrid b(GridGeometry({2, 1, 1}), std::vector<LabelId>{0, 2});
  EXPECT_DOUBLE_EQ(atlas_quality(a, b), 0.0);
}
