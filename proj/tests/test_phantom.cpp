#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <functional>
#include <queue>
#include <set>
#include <string_view>

#include "lseg/fusion.hpp"
#include "lseg/phantom.hpp"

using namespace lseg;

namespace {

std::array<std::size_t, kNumLabels + 1> histogram(const LabelGrid& g) {
  std::array<std::size_t, kNumLabels + 1> h{};
  for (std::size_t i = 0; i < g.size(); ++i) ++h[g[i]];
  return h;
}

PhantomSpec seeded(std::uint64_t seed) {
  PhantomSpec s;
  s.seed = seed;
  return s;
}

const PhantomCase& default_case() {
  static const PhantomCase c = generate(seeded(7));
  return c;
}

}  // namespace

TEST(Phantom, SameSeedBitIdentical) {
  const auto a = generate(seeded(3)), b = generate(seeded(3));
  EXPECT_EQ(a.t1, b.t1);
  EXPECT_EQ(a.t2, b.t2);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.icv, b.icv);
}

TEST(Phantom, DifferentSeedsDiffer) {
  EXPECT_NE(generate(seeded(3)).t1, generate(seeded(4)).t1);
}

TEST(Phantom, AllLabelsPresentWithTwentyVoxels) {
  for (std::uint64_t seed : {1u, 2u, 3u, 7u}) {
    const auto h = histogram(generate(seeded(seed)).labels);
    for (LabelId l = 1; l <= kNumLabels; ++l) EXPECT_GE(h[l], 20u) << "seed " << seed << " label " << int(l);
  }
}

TEST(Phantom, NoiselessIntensitiesEqualClassMeans) {
  PhantomSpec s = seeded(5);
  s.noise_std = 0.0;
  s.t2_noise_std = 0.0;
  s.bias_amplitude = 0.0;
  const auto c = generate(s);
  for (std::size_t i = 0; i < c.labels.size(); ++i) {
    if (c.icv[i] == 0) {
      ASSERT_EQ(c.t1[i], 0.f);
      ASSERT_EQ(c.labels[i], kBackground);
      continue;
    }
    const int k = c.labels[i] == kBackground ? 0 : static_cast<int>(LabelTaxonomy::class_of(c.labels[i]));
    ASSERT_EQ(c.t1[i], s.contrast.t1[k]);
    ASSERT_EQ(c.t2[i], s.contrast.t2[k]);
  }
}

TEST(Phantom, ClassMeansRecoveredUnderNoise) {
  const auto& c = default_case();
  const auto contrast = default_contrast();
  std::array<double, kNumClasses + 1> sum{};
  std::array<std::size_t, kNumClasses + 1> n{};
  for (std::size_t i = 0; i < c.labels.size(); ++i) {
    if (c.labels[i] == kBackground) continue;
    const int k = static_cast<int>(LabelTaxonomy::class_of(c.labels[i]));
    sum[k] += c.t1[i];
    ++n[k];
  }
  PhantomSpec s;
  for (int k = 1; k <= kNumClasses; ++k)
    EXPECT_NEAR(sum[k] / n[k], contrast.t1[k], 3 * s.noise_std + s.bias_amplitude * contrast.t1[k]) << k;
}

TEST(Phantom, ContrastInvertsWmOrdering) {
  const auto c = default_contrast();
  const int wm = kNumClasses;
  for (int k = 1; k < wm; ++k) {
    EXPECT_GT(c.t1[wm], c.t1[k]);
    EXPECT_LT(c.t2[wm], c.t2[k]);
  }
  // neighbouring lobules differ in both modalities
  for (int k = 1; k + 1 < wm; ++k) {
    EXPECT_NE(c.t1[k], c.t1[k + 1]);
    EXPECT_NE(c.t2[k], c.t2[k + 1]);
  }
}

TEST(Phantom, LobuleOneTwoIsSmallestStructure) {
  const auto h = histogram(default_case().labels);
  for (int hemi = 1; hemi <= 2; ++hemi) {
    const auto smallest = h[LabelTaxonomy::lookup(hemi, 1)];
    for (int cls = 2; cls <= kNumClasses; ++cls) EXPECT_LT(smallest, h[LabelTaxonomy::lookup(hemi, cls)]) << cls;
  }
}

TEST(Phantom, HemispheresRespectMidline) {
  // Without pose jitter the left hemisphere is x < centre and the right x > centre.
  const auto c = generate(seeded(9).without_jitter());
  const double centre = 0.5 * (c.labels.dims()[0] - 1);
  for (int z = 0; z < c.labels.dims()[2]; ++z)
    for (int y = 0; y < c.labels.dims()[1]; ++y)
      for (int x = 0; x < c.labels.dims()[0]; ++x) {
        const LabelId l = c.labels.at(x, y, z);
        if (l == kBackground) continue;
        if (LabelTaxonomy::hemisphere_of(l) == Hemisphere::Left) ASSERT_LT(x, centre) << x;
        else ASSERT_GT(x, centre) << x;
      }
}

TEST(Phantom, HemispheresWithinJitterOfMidline) {
  const auto& c = default_case();
  const double centre = 0.5 * (c.labels.dims()[0] - 1);
  PhantomSpec s;
  // rotation and translation move the plane; bound the crossing by the jitter budget
  const double half = 0.5 * c.labels.dims()[0];
  const double tol = s.translate_vox + half * std::sin(s.rotate_deg * M_PI / 180.0) * 1.5 + 2.0;
  for (int z = 0; z < c.labels.dims()[2]; ++z)
    for (int y = 0; y < c.labels.dims()[1]; ++y)
      for (int x = 0; x < c.labels.dims()[0]; ++x) {
        const LabelId l = c.labels.at(x, y, z);
        if (l == kBackground) continue;
        if (LabelTaxonomy::hemisphere_of(l) == Hemisphere::Left) ASSERT_LT(x, centre + tol);
        else ASSERT_GT(x, centre - tol);
      }
}

TEST(Phantom, WhiteMatterSixConnectedPerHemisphere) {
  const auto& c = default_case();
  const Index3 d = c.labels.dims();
  for (int hemi = 1; hemi <= 2; ++hemi) {
    const LabelId wm = LabelTaxonomy::lookup(hemi, kNumClasses);
    std::vector<char> seen(c.labels.size(), 0);
    std::size_t total = 0, start = c.labels.size();
    for (std::size_t i = 0; i < c.labels.size(); ++i)
      if (c.labels[i] == wm) {
        ++total;
        if (start == c.labels.size()) start = i;
      }
    ASSERT_GT(total, 0u);
    std::queue<std::size_t> q;
    q.push(start);
    seen[start] = 1;
    std::size_t reached = 0;
    while (!q.empty()) {
      const std::size_t i = q.front();
      q.pop();
      ++reached;
      const int x = static_cast<int>(i % d[0]), y = static_cast<int>(i / d[0] % d[1]), z = static_cast<int>(i / d[0] / d[1]);
      const int nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
      for (const auto& o : nb) {
        const int a = x + o[0], b = y + o[1], e = z + o[2];
        if (a < 0 || b < 0 || e < 0 || a >= d[0] || b >= d[1] || e >= d[2]) continue;
        const std::size_t j = c.labels.index(a, b, e);
        if (!seen[j] && c.labels[j] == wm) {
          seen[j] = 1;
          q.push(j);
        }
      }
    }
    EXPECT_EQ(reached, total) << "hemisphere " << hemi;
  }
}

TEST(Phantom, RejectsBadDims) {
  PhantomSpec s;
  s.dims = {48, 44, 48};
  EXPECT_THROW(generate(s), GeometryError);
}

TEST(Phantom, PoseRoundTrip) {
  const auto& p = default_case().pose;
  for (const Pose& q : {p, p.mirror()}) {
    const Vec3 v{3.5, 20.25, 40.0};
    const Vec3 back = q.to_voxel(q.to_canonical(v));
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(back[i], v[i], 1e-9);
  }
}

TEST(Phantom, MirrorSwapsHistogram) {
  const auto& c = default_case();
  const auto m = mirror_case(c, 1);
  const auto hc = histogram(c.labels), hm = histogram(m.labels);
  for (LabelId l = 0; l <= kNumLabels; ++l) EXPECT_EQ(hm[LabelTaxonomy::mirror(l)], hc[l]);
  EXPECT_TRUE(m.mirrored);
  EXPECT_EQ(m.source_id, c.id);
  EXPECT_EQ(flip_x(m.t2), c.t2);
}

TEST(Phantom, PoseFieldAlignsCases) {
  // warping one case onto another through the pose field beats the unwarped overlap
  const auto a = generate(seeded(11)), b = generate(seeded(12));
  const auto warped = warp(AtlasTemplate{0, a.t1, a.labels, {}}, pose_field(a.pose, b.pose));
  const double before = whole_dice(a.labels, b.labels), after = whole_dice(warped.labels, b.labels);
  EXPECT_GT(after, before);
  EXPECT_GT(after, 0.95);
}

TEST(Phantom, MirrorPoseReflectsCanonicalX) {
  const auto& p = default_case().pose;
  const auto m = p.mirror();
  const Vec3 u{0.3, -0.2, 0.1};
  const Vec3 a = m.to_voxel(u), b = p.to_voxel({-u[0], u[1], u[2]});
  EXPECT_NEAR(a[0], p.dims[0] - 1 - b[0], 1e-9);
  EXPECT_NEAR(a[1], b[1], 1e-9);
  EXPECT_NEAR(a[2], b[2], 1e-9);
}

TEST(Phantom, SelfPoseFieldIsZero) {
  const auto& p = default_case().pose;
  EXPECT_LT(pose_field(p, p).max_norm(), 1e-4);
}

TEST(Library, TenCasesSplitSixteenTwoTwo) {
  PhantomSpec small;
  small.dims = {16, 16, 16};
  const auto lib = make_library(10, 99, small);
  ASSERT_EQ(lib.cases.size(), 20u);
  EXPECT_EQ(lib.ids(Split::train).size(), 16u);
  EXPECT_EQ(lib.ids(Split::val).size(), 2u);
  EXPECT_EQ(lib.ids(Split::test).size(), 2u);
  for (int i = 0; i < 20; ++i) {
    EXPECT_EQ(lib.split[i], lib.split[lib.partner(i)]);
    EXPECT_EQ(lib.partner(lib.partner(i)), i);
    EXPECT_EQ(lib.cases[i].id, i);
  }
}

TEST(Library, DistinctIntensityVolumes) {
  PhantomSpec small;
  small.dims = {16, 16, 16};
  const auto lib = make_library(8, 5, small);
  std::set<std::size_t> hashes;
  for (const auto& c : lib.cases) {
    std::size_t h = 0;
    for (float v : c.t1.values()) h = h * 1000003u ^ std::hash<float>{}(v);
    hashes.insert(h);
  }
  EXPECT_EQ(hashes.size(), lib.cases.size());
}

TEST(Library, TooFewCasesThrows) { EXPECT_THROW(make_library(5, 1), ArgumentError); }

TEST(Library, ManifestListsEveryCase) {
  PhantomSpec small;
  small.dims = {8, 8, 8};
  const auto lib = make_library(6, 2, small);
  const auto m = library_manifest(lib);
  EXPECT_EQ(std::count(m.begin(), m.end(), '\n'), 13);
  EXPECT_EQ(m.rfind("id,seed,mirrored,source,split\n", 0), 0u);
  EXPECT_NE(m.find(",1,5,test\n"), std::string::npos);  // mirror of the last original
}
