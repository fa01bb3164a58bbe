// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
// criterion fails.
//
//   acceptance [--work DIR] [--only 1,4,6]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lseg/fusion.hpp"
#include "lseg/g3d.hpp"
#include "lseg/neural/checkpoint.hpp"
#include "lseg/parallel.hpp"
#include "lseg/pipeline.hpp"
#include "lseg/rng.hpp"
#include "lseg/stride.hpp"
#include "support/fusion_oracle.hpp"
#include "support/gradcheck.hpp"
#include "support/wilcoxon_oracle.hpp"

#ifndef LSEG_CLI
#define LSEG_CLI "lobuleseg"
#endif
#ifndef LSEG_WORK_DIR
#define LSEG_WORK_DIR "acceptance_work"
#endif

using namespace lseg;
namespace fs = std::filesystem;
namespace pl = lseg::pipeline;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Stride round trip

Outcome stride_round_trip() {
  const auto t0 = Clock::now();
  Rng rng(101);
  int ok = 0;
  for (int k = 0; k < 200; ++k) {
    const Index3 d{2 * (1 + int(rng.below(16))), 2 * (1 + int(rng.below(16))), 2 * (1 + int(rng.below(16)))};
    const GridGeometry geo(d, {float(rng.uniform(0.5, 2.0)), 1.f, float(rng.uniform(0.5, 2.0))});
    if (k % 2 == 0) {
      VoxelGrid g(geo);
      for (auto& v : g.values()) v = static_cast<float>(rng.normal(0.0, 100.0));
      ok += stride_recompose(stride_decompose(g)) == g;
    } else {
      LabelGrid g(geo);
      for (auto& v : g.values()) v = static_cast<LabelId>(rng.below(256));
      ok += stride_recompose(stride_decompose(g)) == g;
    }
  }
  const double s = since(t0);
  return {ok == 200 && s < 10.0, fmt("%d/200 grids bit-identical in %.2f s (limit 10 s)", ok, s)};
}

// ---------------------------------------------------------------------------
// 2. Fusion oracle equivalence

Outcome fusion_oracle_equivalence() {
  const auto t0 = Clock::now();
  std::set<int> thread_counts{1, 2, 4, max_threads()};
  Rng rng(202);
  int ok = 0, runs = 0;
  const double ds[] = {0.0, 0.5, 2.0};
  for (int k = 0; k < 100; ++k) {
    const Index3 d{1 + int(rng.below(8)), 1 + int(rng.below(8)), 1 + int(rng.below(8))};
    const int nt = 2 + int(rng.below(4));
    const double dd = ds[k % 3];
    VoxelGrid target{GridGeometry(d)};
    for (auto& v : target.values()) v = static_cast<float>(rng.normal());
    std::vector<AtlasTemplate> t;
    for (int j = 0; j < nt; ++j) {
      AtlasTemplate a{j, VoxelGrid(GridGeometry(d)), LabelGrid(GridGeometry(d)), {}};
      // Coarse intensities and few labels so that exact ties occur.
      for (auto& v : a.intensity.values()) v = static_cast<float>(rng.below(4)) * 0.5f;
      for (auto& v : a.labels.values()) v = static_cast<LabelId>(rng.below(k % 2 ? 4 : kNumLabels + 1));
      t.push_back(std::move(a));
    }
    FusionConfig cfg;
    cfg.d = dd;
    const auto expect = fusion_oracle::fuse(target, t, dd);
    for (int n : thread_counts) {
      set_num_threads(n);
      ok += fuse_weighted_vote(target, t, cfg) == expect;
      ++runs;
    }
  }
  set_num_threads(1);
  const double s = since(t0);
  std::string threads;
  for (int n : thread_counts) threads += (threads.empty() ? "" : ",") + std::to_string(n);
  return {ok == runs && s < 30.0,
          fmt("%d/%d (case, threads) runs match the scalar oracle, threads {%s}, %.2f s (limit 30 s)", ok, runs,
              threads.c_str(), s)};
}

// ---------------------------------------------------------------------------
// 3. Fusion weight closed form

Outcome weight_closed_form() {
  const double w0 = fusion_weight(0.0, 0.5), w2 = fusion_weight(2.0, 0.5);
  bool decreasing = true;
  double prev = fusion_weight(0.0, 0.5);
  for (int k = 1; k < 100; ++k) {
    const double w = fusion_weight(k * 0.05, 0.5);
    decreasing = decreasing && w < prev && w > 0.0;
    prev = w;
  }
  return {w0 == 1.0 && w2 == 0.5 && decreasing,
          fmt("w(0)=%.17g, w(2; d=0.5)=%.17g, strictly decreasing over 100 points: %s", w0, w2,
              decreasing ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 4. Gradient checks

Outcome gradient_checks() {
  const auto t0 = Clock::now();
  struct Check {
    const char* name;
    std::function<double(Rng&)> fn;
  };
  const std::vector<Check> checks = {
      {"conv3", [](Rng& r) { return gradcheck::check_conv(r, 3); }},
      {"conv1", [](Rng& r) { return gradcheck::check_conv(r, 1); }},
      {"batchnorm/train", [](Rng& r) { return gradcheck::check_batchnorm(r, true); }},
      {"batchnorm/eval", [](Rng& r) { return gradcheck::check_batchnorm(r, false); }},
      {"relu", gradcheck::check_relu},
      {"dropout", gradcheck::check_dropout},
      {"softmax", gradcheck::check_softmax},
      {"concat", gradcheck::check_concat},
      {"downsample", gradcheck::check_downsample},
      {"upsample", gradcheck::check_upsample},
      {"loss", gradcheck::check_loss},
      {"dpn", [](Rng& r) { return gradcheck::check_network(r, nn::Architecture::DPN); }},
      {"unet", [](Rng& r) { return gradcheck::check_network(r, nn::Architecture::UNet); }},
  };
  constexpr int kShapes = 20;
  bool pass = true;
  std::string worst_name;
  double worst = 0.0;
  Rng rng(404);
  for (const auto& c : checks)
    for (int k = 0; k < kShapes; ++k) {
      const double e = c.fn(rng);
      if (!(e < 1e-4)) pass = false;
      if (!(e <= worst)) {
        worst = e;
        worst_name = c.name;
      }
    }
  const double s = since(t0);
  return {pass && s < 120.0, fmt("%zu kernels x %d shapes, worst relative error %.2e (%s), %.1f s (limit 1e-4, 120 s)",
                                 checks.size(), kShapes, worst, worst_name.c_str(), s)};
}

// ---------------------------------------------------------------------------
// 5. Parameter economy

Outcome parameter_economy() {
  std::string detail;
  bool pass = true;
  for (int out : {3, 14}) {
    nn::NetworkSpec dpn, unet;
    dpn.kind = nn::Architecture::DPN;
    unet.kind = nn::Architecture::UNet;
    dpn.in_channels = unet.in_channels = 3;
    dpn.out_classes = unet.out_classes = out;
    const auto pd = nn::parameter_count(dpn), pu = nn::parameter_count(unet);
    const double ratio = double(pd) / double(pu);
    pass = pass && ratio <= 0.25;
    detail += fmt("%sout=%d: DPN %zu vs U-Net %zu (ratio %.3f)", detail.empty() ? "" : "; ", out, pd, pu, ratio);
  }
  return {pass, detail + "; reference 696,177 vs 3,433,473 (ratio 0.203)"};
}

// ---------------------------------------------------------------------------
// 6-8. End-to-end learning, ensemble and atlas robustness trends

struct Learning {
  bool ran = false;
  std::string error;
  double pipeline_seconds = 0.0;
  double nonatlas_train_seconds = 0.0;
  double ensemble_mean = 0.0, ensemble_whole = 0.0;
  double dpn_mean = 0.0, unet_mean = 0.0;
  std::vector<pl::RobustnessRow> robustness;
};

pl::Variant variant(nn::Architecture a, ChannelMode m) { return {a, m, Resolution::full}; }

Learning run_learning(const fs::path& work) {
  Learning L;
  pl::RunConfig c;
  c.threads = 0;
  c.paths.library = (work / "library").string();
  c.paths.checkpoints = (work / "checkpoints").string();
  c.paths.outputs = (work / "outputs").string();
  c.complete();  // default atlas pair, both in the ensemble
  c.validate();
  set_num_threads(c.threads);
  auto log = [](const std::string& s) { std::fprintf(stderr, "    %s\n", s.c_str()); };

  try {
    const auto t0 = Clock::now();
    pl::cmd_phantom(c);
    pl::cmd_fuse(c);
    pl::cmd_train(c, log);
    const auto seg = pl::cmd_segment(c);
    L.pipeline_seconds = since(t0);
    const auto s = summarize(seg.dice);
    L.ensemble_mean = s.mean.mean_structure;
    L.ensemble_whole = s.mean.whole;

    pl::Workspace ws(c);
    const auto ids = ws.library().ids(c.eval_split);
    for (const auto& v : c.ensemble) {
      std::vector<CascadeModel> m;
      m.push_back(pl::load_model(c, v));
      const double mean = summarize(pl::evaluate(ws, m, v.mode, v.resolution, ids)).mean.mean_structure;
      (v.arch == nn::Architecture::DPN ? L.dpn_mean : L.unet_mean) = mean;
    }

    // Non-atlas counterparts for the robustness comparison.
    pl::RunConfig n = c;
    n.paths.outputs = (work / "outputs_nonatlas").string();
    n.variants = {variant(nn::Architecture::DPN, ChannelMode::t1t2), variant(nn::Architecture::UNet, ChannelMode::t1t2)};
    const auto t1 = Clock::now();
    pl::cmd_train(n, log);
    L.nonatlas_train_seconds = since(t1);

    pl::RunConfig r = c;
    r.variants.insert(r.variants.end(), n.variants.begin(), n.variants.end());
    L.robustness = pl::cmd_robustness(r);
    L.ran = true;
  } catch (const std::exception& e) {
    L.error = e.what();
  }
  set_num_threads(1);
  return L;
}

Outcome learning_outcome(const Learning& L) {
  if (!L.ran) return {false, "pipeline failed: " + L.error};
  const bool pass = L.ensemble_mean >= 0.80 && L.ensemble_whole >= 0.95 && L.pipeline_seconds <= 3600.0;
  return {pass, fmt("test-split ensemble mean structure Dice %.4f (>= 0.80), whole %.4f (>= 0.95); "
                    "phantom+fuse+train+segment %.1f min on %d thread(s) (limit 60 min)",
                    L.ensemble_mean, L.ensemble_whole, L.pipeline_seconds / 60.0, max_threads())};
}

Outcome ensemble_outcome(const Learning& L) {
  if (!L.ran) return {false, "pipeline failed: " + L.error};
  const double best = std::max(L.dpn_mean, L.unet_mean);
  return {L.ensemble_mean >= best - 0.005,
          fmt("ensemble %.4f vs DPN %.4f, U-Net %.4f (need >= %.4f)", L.ensemble_mean, L.dpn_mean, L.unet_mean,
              best - 0.005)};
}

Outcome robustness_outcome(const Learning& L) {
  if (!L.ran) return {false, "pipeline failed: " + L.error};
  auto drop = [&](nn::Architecture a, ChannelMode m) {
    const std::string name = variant(a, m).name();
    for (const auto& r : L.robustness)
      if (r.variant.name() == name && r.condition == "bad_t2" && r.present) return -r.delta_mean_structure;
    return std::nan("");
  };
  std::string detail;
  bool pass = true;
  for (auto a : {nn::Architecture::DPN, nn::Architecture::UNet}) {
    const double with = drop(a, ChannelMode::t1t2_atlas), without = drop(a, ChannelMode::t1t2);
    pass = pass && with <= without;
    detail += fmt("%s%s drop %.4f with atlas vs %.4f without", detail.empty() ? "" : "; ", nn::to_string(a), with,
                  without);
  }
  return {pass, detail + fmt(" (non-atlas training %.1f min)", L.nonatlas_train_seconds / 60.0)};
}

// ---------------------------------------------------------------------------
// 9. Wilcoxon exact p-values

Outcome wilcoxon_exact() {
  Rng rng(909);
  double worst = 0.0;
  int samples = 0;
  for (std::size_t n = 5; n <= 10; ++n)
    for (int k = 0; k < 50; ++k, ++samples) {
      std::vector<double> x(n), y(n);
      for (std::size_t i = 0; i < n; ++i) {
        x[i] = rng.normal();
        // Every other sample is quantised so tied |differences| occur.
        y[i] = k % 2 ? x[i] + std::round(rng.normal() * 2.0) / 2.0 + (rng.below(2) ? 0.25 : -0.25)
                     : x[i] + rng.normal(0.3, 1.0);
      }
      const double p = wilcoxon_two_sided(x, y, WilcoxonMethod::exact).p_value;
      worst = std::max(worst, std::fabs(p - wilcoxon_oracle::p_value(x, y)));
    }
  std::vector<double> x6{1, 2, 3, 4, 5, 6}, y6 = x6;
  for (auto& v : y6) v += 0.7;
  const double p6 = wilcoxon_two_sided(x6, y6).p_value;
  bool small_rejected = false;
  try {
    wilcoxon_two_sided({1, 2, 3, 4}, {2, 3, 4, 5});
  } catch (const ArgumentError&) {
    small_rejected = true;
  }
  return {worst <= 1e-12 && p6 == 0.03125 && small_rejected,
          fmt("%d samples, n = 5..10 (n < 5 rejected: %s), max |exact - enumeration| %.1e; n=6 all-positive p = %.17g",
              samples, small_rejected ? "yes" : "no", worst, p6)};
}

// ---------------------------------------------------------------------------
// 10. CLI determinism

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + LSEG_CLI + "\" -q " + args + " > \"" + log.string() + "\" 2>&1";
  return std::system(cmd.c_str());
}

std::vector<std::pair<std::string, std::string>> tree_hashes(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> out;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.emplace_back(fs::relative(e.path(), root).string(), pl::hash_file(e.path().string()));
  std::sort(out.begin(), out.end());
  return out;
}

Outcome cli_determinism(const fs::path& work) {
  const auto t0 = Clock::now();
  fs::remove_all(work);
  fs::create_directories(work);
  auto base = pl::parse_config(nlohmann::json::parse(R"({
    "seed": 21,
    "phantom": {"cases": 6, "dims": [32, 32, 32]},
    "fusion": {"n_templates": 4},
    "train": {"adam_epochs": 12, "adamax_epochs": 6},
    "networks": {"dpn": {"filters": 4, "levels": 3}, "unet": {"base_filters": 4, "levels": 3}}
  })"));
  base.paths.library = (work / "library").string();
  const char* runs[] = {"a", "b", "c"};
  const int threads[] = {1, 1, 4};
  for (const char* r : runs) {
    auto c = base;
    c.paths.checkpoints = (work / r / "checkpoints").string();
    c.paths.outputs = (work / r / "outputs").string();
    pl::write_text(work / (std::string(r) + ".json"), pl::to_json(c).dump(2));
  }
  const std::string cfg_a = "--config \"" + (work / "a.json").string() + "\"";
  if (run_cli(cfg_a + " phantom", work / "phantom.log") != 0) return {false, "phantom failed, see " + work.string()};
  std::vector<std::vector<std::pair<std::string, std::string>>> trees;
  for (int k = 0; k < 3; ++k) {
    const std::string cfg = "--config \"" + (work / (std::string(runs[k]) + ".json")).string() + "\" --threads " +
                            std::to_string(threads[k]);
    for (const char* step : {"fuse", "train", "segment"})
      if (run_cli(cfg + " " + step, work / (std::string(runs[k]) + "_" + step + ".log")) != 0)
        return {false, std::string(step) + " failed in run " + runs[k]};
    auto tree = tree_hashes(work / runs[k]);
    // Atlases are rewritten into the shared library by every run.
    for (auto& [name, hash] : tree_hashes(work / "library"))
      if (name.find("atlas") != std::string::npos) tree.emplace_back("library/" + name, hash);
    trees.push_back(std::move(tree));
  }
  std::size_t files = trees[0].size();
  const bool same_runs = trees[0] == trees[1];
  const bool same_threads = trees[0] == trees[2];
  return {files > 0 && same_runs && same_threads,
          fmt("%zu files (atlases, checkpoints, loss curve, labels, reports, manifest): run1 == run2 %s, "
              "--threads 1 == --threads 4 %s, %.1f s",
              files, same_runs ? "yes" : "NO", same_threads ? "yes" : "NO", since(t0))};
}

// ---------------------------------------------------------------------------
// 11. Format fidelity

template <typename Fn>
std::optional<FormatErrc> error_of(Fn&& fn) {
  try {
    fn();
  } catch (const FormatError& e) {
    return e.code();
  }
  return std::nullopt;
}

Outcome format_fidelity(const fs::path& work) {
  fs::create_directories(work);
  Rng rng(1111);
  int round_trips = 0, ok = 0;
  for (int k = 0; k < 20; ++k) {
    const Index3 d{1 + int(rng.below(12)), 1 + int(rng.below(12)), 1 + int(rng.below(12))};
    const GridGeometry geo(d, {float(rng.uniform(0.3, 3.0)), float(rng.uniform(0.3, 3.0)), 1.f},
                           {float(rng.normal()), float(rng.normal()), float(rng.normal())});
    VoxelGrid f(geo);
    for (auto& v : f.values()) v = static_cast<float>(rng.normal(0.0, 1e3));
    LabelGrid l(geo);
    for (auto& v : l.values()) v = static_cast<LabelId>(rng.below(256));
    const auto pf = (work / "f.g3d").string(), pu = (work / "u.g3d").string();
    write_volume(pf, f);
    write_volume(pu, l);
    ok += read_voxel_grid(pf) == f;
    ok += read_label_grid(pu) == l;
    ok += io::read_file_bytes(pf) == io::encode_g3d(read_voxel_grid(pf));
    round_trips += 3;
  }
  for (auto a : {nn::Architecture::DPN, nn::Architecture::UNet}) {
    nn::NetworkSpec s;
    s.kind = a;
    s.dpn_filters = s.unet_base_filters = 3;
    s.levels = 3;
    nn::Network<float> net(s, rng.bits());
    for (auto& b : net.params().buffers) b = static_cast<float>(rng.uniform(0.1, 2.0));
    const auto ck = nn::make_checkpoint(net, {{"variant", "x"}, {"note", "a=b"}});
    const auto path = (work / "net.lfnn").string();
    nn::write_checkpoint(path, ck);
    const auto back = nn::read_checkpoint(path);
    ok += back == ck;
    ok += nn::encode_checkpoint(back) == io::read_file_bytes(path);
    round_trips += 2;
  }

  // Corrupted-header fixtures: each must map to its own error code.
  const auto g3d = io::encode_g3d(VoxelGrid(GridGeometry({3, 2, 2}), 1.f));
  nn::NetworkSpec s;
  s.dpn_filters = 2;
  s.levels = 2;
  const auto lfnn = nn::encode_checkpoint(nn::make_checkpoint(nn::Network<float>(s, 1)));
  auto mutate = [](std::vector<unsigned char> b, auto fn) {
    fn(b);
    return b;
  };
  struct Fixture {
    const char* name;
    FormatErrc expect;
    std::vector<unsigned char> bytes;
    bool checkpoint;
  };
  const std::vector<Fixture> fixtures = {
      {"g3d magic", FormatErrc::bad_magic, mutate(g3d, [](auto& b) { b[0] = 'Q'; }), false},
      {"g3d version", FormatErrc::bad_version, mutate(g3d, [](auto& b) { b[4] = 9; }), false},
      {"g3d dtype", FormatErrc::bad_dtype, mutate(g3d, [](auto& b) { b[44] = 5; }), false},
      {"g3d truncated", FormatErrc::truncated, mutate(g3d, [](auto& b) { b.resize(b.size() - 3); }), false},
      {"g3d trailing", FormatErrc::size_mismatch, mutate(g3d, [](auto& b) { b.push_back(0); }), false},
      {"lfnn magic", FormatErrc::bad_magic, mutate(lfnn, [](auto& b) { b[0] = 'Q'; }), true},
      {"lfnn version", FormatErrc::bad_version, mutate(lfnn, [](auto& b) { b[4] = 9; }), true},
      {"lfnn kind", FormatErrc::bad_dtype, mutate(lfnn, [](auto& b) { b[8] = 7; }), true},
      {"lfnn truncated", FormatErrc::truncated, mutate(lfnn, [](auto& b) { b.resize(b.size() - 3); }), true},
      {"lfnn trailing", FormatErrc::size_mismatch, mutate(lfnn, [](auto& b) { b.push_back(0); }), true},
  };
  int matched = 0;
  std::string wrong;
  for (const auto& f : fixtures) {
    const auto code = error_of([&] {
      if (f.checkpoint)
        nn::decode_checkpoint(f.bytes, f.name);
      else
        io::decode_g3d(f.bytes, f.name);
    });
    if (code == f.expect)
      ++matched;
    else
      wrong += std::string(wrong.empty() ? "" : ", ") + f.name;
  }
  const auto missing = error_of([&] { read_voxel_grid((work / "absent.g3d").string()); });
  const bool io_ok = missing == FormatErrc::io;
  return {ok == round_trips && matched == int(fixtures.size()) && io_ok,
          fmt("%d/%d round trips bit-exact; %d/%zu corrupted fixtures raise their distinct code%s; missing file -> %s",
              ok, round_trips, matched, fixtures.size(), wrong.empty() ? "" : (" (wrong: " + wrong + ")").c_str(),
              missing ? to_string(*missing) : "no error")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-11"};
  std::string work = LSEG_WORK_DIR;
  std::vector<int> only;
  app.add_option("--work", work, "Scratch directory for the end-to-end runs");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const fs::path root = fs::absolute(work);
  set_num_threads(1);

  auto wanted = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };
  std::optional<Learning> learning;
  auto get_learning = [&]() -> const Learning& {
    if (!learning) learning = run_learning(root / "learning");
    return *learning;
  };

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"Stride round trip", stride_round_trip},
      {"Fusion oracle equivalence", fusion_oracle_equivalence},
      {"Fusion weight closed form", weight_closed_form},
      {"Gradient checks", gradient_checks},
      {"Parameter economy", parameter_economy},
      {"End-to-end learning", [&] { return learning_outcome(get_learning()); }},
      {"Ensemble trend", [&] { return ensemble_outcome(get_learning()); }},
      {"Atlas robustness trend", [&] { return robustness_outcome(get_learning()); }},
      {"Wilcoxon exact p-values", wilcoxon_exact},
      {"Determinism (CLI)", [&] { return cli_determinism(root / "determinism"); }},
      {"Format fidelity", [&] { return format_fidelity(root / "formats"); }},
  };
  int failed = 0, ran = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!wanted(id)) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    ++ran;
    failed += !o.pass;
    std::printf("%s  %2d  %-26s %s\n", o.pass ? "PASS" : "FAIL", id, criteria[k].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
