#pragma once

// Config-driven orchestration: phantom library on disk, subject atlases,
// cascade training, ensemble segmentation, ablation and robustness tables,
// and volumetry reports. Every command is a function of (config, files on
// disk) and writes CSV with a header line.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>  // vendored nlohmann/json

#include "augment.hpp"
#include "cascade.hpp"
#include "error.hpp"
#include "evalstats.hpp"
#include "fusion.hpp"
#include "g3d.hpp"
#include "neural/checkpoint.hpp"
#include "parallel.hpp"
#include "phantom.hpp"
#include "report.hpp"
#include "training.hpp"

namespace lseg::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct Variant {
  nn::Architecture arch = nn::Architecture::DPN;
  ChannelMode mode = ChannelMode::t1t2_atlas;
  Resolution resolution = Resolution::full;

  std::string name() const {
    return std::string(nn::to_string(arch)) + "_" + to_string(mode) + "_" + to_string(resolution);
  }
  friend bool operator==(const Variant&, const Variant&) = default;
};

struct Paths {
  std::string library = "run/library";
  std::string checkpoints = "run/checkpoints";
  std::string outputs = "run/outputs";
  std::string fields;  // optional directory of template-to-target displacement fields
};

struct RunConfig {
  std::uint64_t seed = 7;
  int threads = 0;  // 0 = all hardware threads
  Paths paths;

  int cases = 10;           // originals; the library holds these plus their mirrors
  int extended_cases = 0;   // extra phantoms for the fine-tune phase
  PhantomSpec phantom;

  FusionConfig fusion;
  TrainConfig stage1, stage2;
  // Per architecture and stage; channel and class counts are filled in per variant.
  nn::NetworkSpec dpn1, dpn2, unet1, unet2;

  ChannelMode channel_mode = ChannelMode::t1t2_atlas;
  Resolution resolution = Resolution::full;
  std::vector<Variant> variants;  // trained by `train`
  std::vector<Variant> ensemble;  // combined by `segment`
  std::vector<Variant> ablation;  // cells of the ablation table
  std::vector<PerturbSpec> perturbations;
  Split eval_split = Split::test;

  std::optional<double> age;
  std::string population;  // JSON population model for report bounds

  RunConfig() {
    stage1.adam_epochs = 200;
    stage1.adamax_epochs = 100;
    stage2.adam_epochs = 400;
    stage2.adamax_epochs = 200;
    for (auto* s : {&dpn1, &dpn2, &unet1, &unet2}) {
      s->dpn_filters = 8;
      s->unet_base_filters = 8;
      s->levels = 4;
    }
    unet1.kind = unet2.kind = nn::Architecture::UNet;
    perturbations = {
        {PerturbKind::gamma, 0.0, 1.0, 1.0},
        {PerturbKind::gamma, 0.0, 1.0, 1.5},
        {PerturbKind::bias_field, 0.3},
        {PerturbKind::blur, 0.0, 1.0},
        {PerturbKind::ghosting, 0.2, 1.0, 1.0, 2, 2, 1},
        {PerturbKind::anisotropy, 0.0, 1.0, 1.0, 2, 1, 2},
    };
  }

  /// Fills the variant lists left empty by the config file.
  void complete() {
    if (variants.empty())
      variants = {{nn::Architecture::DPN, channel_mode, resolution}, {nn::Architecture::UNet, channel_mode, resolution}};
    if (ensemble.empty())
      for (const auto& v : variants)
        if (v.mode == channel_mode && v.resolution == resolution) ensemble.push_back(v);
    if (ablation.empty()) ablation = variants;
  }

  void validate() const {
    phantom.validate();
    split_counts(cases);
    if (extended_cases < 0) throw ArgumentError("config: extended_cases must be >= 0");
    fusion.validate();
    stage1.validate();
    stage2.validate();
    for (const auto* s : {&dpn1, &dpn2, &unet1, &unet2}) {
      nn::NetworkSpec t = *s;
      t.in_channels = 1;
      t.out_classes = 2;
      t.validate();
      const int div = 2 * t.spatial_divisor();  // half resolution must still divide
      for (int d : phantom.dims)
        if (d % div != 0)
          throw ArgumentError("config: phantom dims must be multiples of " + std::to_string(div) +
                              " for the configured network depth");
    }
    for (const auto& p : perturbations) p.validate();
    if ((stage1.finetune_epochs > 0 || stage2.finetune_epochs > 0) && extended_cases == 0)
      throw ArgumentError("config: fine-tuning needs extended_cases > 0");
  }

  nn::NetworkSpec network_spec(const Variant& v, Stage stage) const {
    nn::NetworkSpec s = v.arch == nn::Architecture::DPN ? (stage == Stage::hemisphere ? dpn1 : dpn2)
                                                        : (stage == Stage::hemisphere ? unet1 : unet2);
    s.kind = v.arch;
    s.in_channels = channel_count(v.mode);
    s.out_classes = stage == Stage::hemisphere ? kStage1Classes : kStage2Classes;
    return s;
  }

  const TrainConfig& train_config(Stage stage) const { return stage == Stage::hemisphere ? stage1 : stage2; }
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ArgumentError("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ArgumentError("config: unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void get(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_train(const json& j, TrainConfig& t, const std::string& where) {
  check_keys(j,
             {"adam_epochs", "adamax_epochs", "finetune_epochs", "lr", "mix_probability", "augment_probability",
              "elastic_probability", "elastic_magnitude", "elastic_sigma", "roi_jitter", "stage1", "stage2"},
             where);
  get(j, "adam_epochs", t.adam_epochs);
  get(j, "adamax_epochs", t.adamax_epochs);
  get(j, "finetune_epochs", t.finetune_epochs);
  get(j, "lr", t.lr);
  get(j, "mix_probability", t.mix_probability);
  get(j, "augment_probability", t.augment_probability);
  get(j, "elastic_probability", t.elastic_probability);
  get(j, "elastic_magnitude", t.elastic_magnitude);
  get(j, "elastic_sigma", t.elastic_sigma);
  get(j, "roi_jitter", t.roi_jitter);
}

inline void read_network(const json& j, nn::NetworkSpec& s, const std::string& where) {
  check_keys(j, {"filters", "base_filters", "levels", "dropout", "stage1", "stage2"}, where);
  get(j, "filters", s.dpn_filters);
  get(j, "base_filters", s.unet_base_filters);
  get(j, "levels", s.levels);
  get(j, "dropout", s.dropout_rate);
}

inline Variant read_variant(const json& j, const RunConfig& c) {
  check_keys(j, {"architecture", "channels", "resolution"}, "variant");
  Variant v{nn::Architecture::DPN, c.channel_mode, c.resolution};
  v.arch = nn::architecture_from_string(j.at("architecture").get<std::string>());
  if (j.contains("channels")) v.mode = channel_mode_from_string(j.at("channels").get<std::string>());
  if (j.contains("resolution")) v.resolution = resolution_from_string(j.at("resolution").get<std::string>());
  return v;
}

inline PerturbSpec read_perturbation(const json& j) {
  check_keys(j, {"kind", "amplitude", "sigma", "gamma", "factor", "copies", "axis", "seed"}, "perturbation");
  PerturbSpec p;
  p.kind = perturb_kind_from_string(j.at("kind").get<std::string>());
  get(j, "amplitude", p.amplitude);
  get(j, "sigma", p.sigma);
  get(j, "gamma", p.gamma);
  get(j, "factor", p.factor);
  get(j, "copies", p.copies);
  get(j, "axis", p.axis);
  get(j, "seed", p.seed);
  return p;
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ArgumentError("config: unknown split '" + s + "'");
}

/// Relative paths in a config file resolve against the file's directory.
inline std::string resolve(const std::string& p, const fs::path& base) {
  if (p.empty() || fs::path(p).is_absolute() || base.empty()) return p;
  return (base / p).lexically_normal().string();
}

}  // namespace detail

/// Parses a JSON config. Unknown keys are errors so typos do not silently
/// fall back to defaults. `base_dir` anchors relative paths.
inline RunConfig parse_config(const json& j, const fs::path& base_dir = {}) {
  using detail::get;
  detail::check_keys(j,
                     {"seed", "threads", "paths", "phantom", "fusion", "train", "networks", "channel_mode",
                      "resolution", "variants", "ensemble", "ablation", "perturbations", "eval_split", "report"},
                     "config");
  RunConfig c;
  try {
    get(j, "seed", c.seed);
    get(j, "threads", c.threads);
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      detail::check_keys(p, {"library", "checkpoints", "outputs", "fields"}, "paths");
      get(p, "library", c.paths.library);
      get(p, "checkpoints", c.paths.checkpoints);
      get(p, "outputs", c.paths.outputs);
      get(p, "fields", c.paths.fields);
    }
    if (j.contains("phantom")) {
      const auto& p = j.at("phantom");
      detail::check_keys(p,
                         {"cases", "extended_cases", "dims", "spacing_mm", "noise_std", "t2_noise_std",
                          "bias_amplitude", "translate_vox", "rotate_deg", "scale", "sector_jitter"},
                         "phantom");
      get(p, "cases", c.cases);
      get(p, "extended_cases", c.extended_cases);
      if (p.contains("dims")) {
        const auto d = p.at("dims").get<std::vector<int>>();
        if (d.size() != 3) throw ArgumentError("config: phantom.dims needs 3 entries");
        c.phantom.dims = {d[0], d[1], d[2]};
      }
      get(p, "spacing_mm", c.phantom.spacing_mm);
      get(p, "noise_std", c.phantom.noise_std);
      get(p, "t2_noise_std", c.phantom.t2_noise_std);
      get(p, "bias_amplitude", c.phantom.bias_amplitude);
      get(p, "translate_vox", c.phantom.translate_vox);
      get(p, "rotate_deg", c.phantom.rotate_deg);
      get(p, "scale", c.phantom.scale);
      get(p, "sector_jitter", c.phantom.sector_jitter);
    }
    if (j.contains("fusion")) {
      const auto& f = j.at("fusion");
      detail::check_keys(f, {"d", "n_templates"}, "fusion");
      get(f, "d", c.fusion.d);
      get(f, "n_templates", c.fusion.n_templates);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      // Shared keys apply to both stages, then per-stage overrides.
      detail::read_train(t, c.stage1, "train");
      detail::read_train(t, c.stage2, "train");
      if (t.contains("stage1")) detail::read_train(t.at("stage1"), c.stage1, "train.stage1");
      if (t.contains("stage2")) detail::read_train(t.at("stage2"), c.stage2, "train.stage2");
    }
    if (j.contains("networks")) {
      const auto& n = j.at("networks");
      detail::check_keys(n, {"dpn", "unet"}, "networks");
      auto read_pair = [&](const char* key, nn::NetworkSpec& s1, nn::NetworkSpec& s2) {
        if (!n.contains(key)) return;
        const auto& a = n.at(key);
        detail::read_network(a, s1, std::string("networks.") + key);
        detail::read_network(a, s2, std::string("networks.") + key);
        if (a.contains("stage1")) detail::read_network(a.at("stage1"), s1, std::string("networks.") + key + ".stage1");
        if (a.contains("stage2")) detail::read_network(a.at("stage2"), s2, std::string("networks.") + key + ".stage2");
      };
      read_pair("dpn", c.dpn1, c.dpn2);
      read_pair("unet", c.unet1, c.unet2);
    }
    if (j.contains("channel_mode")) c.channel_mode = channel_mode_from_string(j.at("channel_mode").get<std::string>());
    if (j.contains("resolution")) c.resolution = resolution_from_string(j.at("resolution").get<std::string>());
    for (const char* key : {"variants", "ensemble", "ablation"}) {
      if (!j.contains(key)) continue;
      std::vector<Variant> vs;
      for (const auto& v : j.at(key)) vs.push_back(detail::read_variant(v, c));
      (std::string(key) == "variants" ? c.variants : std::string(key) == "ensemble" ? c.ensemble : c.ablation) = vs;
    }
    if (j.contains("perturbations")) {
      c.perturbations.clear();
      for (const auto& p : j.at("perturbations")) c.perturbations.push_back(detail::read_perturbation(p));
    }
    if (j.contains("eval_split")) c.eval_split = detail::split_from_string(j.at("eval_split").get<std::string>());
    if (j.contains("report")) {
      const auto& r = j.at("report");
      detail::check_keys(r, {"age", "population"}, "report");
      if (r.contains("age") && !r.at("age").is_null()) c.age = r.at("age").get<double>();
      get(r, "population", c.population);
    }
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("config: ") + e.what());
  }
  c.paths.library = detail::resolve(c.paths.library, base_dir);
  c.paths.checkpoints = detail::resolve(c.paths.checkpoints, base_dir);
  c.paths.outputs = detail::resolve(c.paths.outputs, base_dir);
  c.paths.fields = detail::resolve(c.paths.fields, base_dir);
  c.population = detail::resolve(c.population, base_dir);
  c.complete();
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrc::io, "cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ArgumentError("config " + path + ": " + e.what());
  }
  return parse_config(j, fs::path(path).parent_path());
}

inline json variant_json(const Variant& v) {
  return {{"architecture", nn::to_string(v.arch)}, {"channels", to_string(v.mode)}, {"resolution", to_string(v.resolution)}};
}

/// Serialized form of a config; parse_config(to_json(c)) reproduces c.
inline json to_json(const RunConfig& c) {
  auto train = [](const TrainConfig& t) {
    return json{{"adam_epochs", t.adam_epochs},
                {"adamax_epochs", t.adamax_epochs},
                {"finetune_epochs", t.finetune_epochs},
                {"lr", t.lr},
                {"mix_probability", t.mix_probability},
                {"augment_probability", t.augment_probability},
                {"elastic_probability", t.elastic_probability},
                {"elastic_magnitude", t.elastic_magnitude},
                {"elastic_sigma", t.elastic_sigma},
                {"roi_jitter", t.roi_jitter}};
  };
  auto net = [](const nn::NetworkSpec& s) {
    return json{{"filters", s.dpn_filters},
                {"base_filters", s.unet_base_filters},
                {"levels", s.levels},
                {"dropout", s.dropout_rate}};
  };
  auto variants = [](const std::vector<Variant>& vs) {
    json a = json::array();
    for (const auto& v : vs) a.push_back(variant_json(v));
    return a;
  };
  json perturbations = json::array();
  for (const auto& p : c.perturbations)
    perturbations.push_back({{"kind", to_string(p.kind)},
                             {"amplitude", p.amplitude},
                             {"sigma", p.sigma},
                             {"gamma", p.gamma},
                             {"factor", p.factor},
                             {"copies", p.copies},
                             {"axis", p.axis},
                             {"seed", p.seed}});
  json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["paths"] = {{"library", c.paths.library},
                {"checkpoints", c.paths.checkpoints},
                {"outputs", c.paths.outputs},
                {"fields", c.paths.fields}};
  j["phantom"] = {{"cases", c.cases},
                  {"extended_cases", c.extended_cases},
                  {"dims", std::vector<int>(c.phantom.dims.begin(), c.phantom.dims.end())},
                  {"spacing_mm", c.phantom.spacing_mm},
                  {"noise_std", c.phantom.noise_std},
                  {"t2_noise_std", c.phantom.t2_noise_std},
                  {"bias_amplitude", c.phantom.bias_amplitude},
                  {"translate_vox", c.phantom.translate_vox},
                  {"rotate_deg", c.phantom.rotate_deg},
                  {"scale", c.phantom.scale},
                  {"sector_jitter", c.phantom.sector_jitter}};
  j["fusion"] = {{"d", c.fusion.d}, {"n_templates", c.fusion.n_templates}};
  j["train"] = {{"stage1", train(c.stage1)}, {"stage2", train(c.stage2)}};
  j["networks"] = {{"dpn", {{"stage1", net(c.dpn1)}, {"stage2", net(c.dpn2)}}},
                   {"unet", {{"stage1", net(c.unet1)}, {"stage2", net(c.unet2)}}}};
  j["channel_mode"] = to_string(c.channel_mode);
  j["resolution"] = to_string(c.resolution);
  j["variants"] = variants(c.variants);
  j["ensemble"] = variants(c.ensemble);
  j["ablation"] = variants(c.ablation);
  j["perturbations"] = perturbations;
  j["eval_split"] = to_string(c.eval_split);
  j["report"] = {{"age", c.age ? json(*c.age) : json(nullptr)}, {"population", c.population}};
  return j;
}

// ---------------------------------------------------------------------------
// Hashing and small file helpers

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string hash_string(const std::string& s) { return hex64(fnv1a(s.data(), s.size())); }

inline std::string hash_file(const std::string& path) {
  const auto b = io::read_file_bytes(path);
  return hex64(fnv1a(b.data(), b.size()));
}

/// Hash of the settings that affect results (paths and threads excluded).
inline std::string config_hash(const RunConfig& c) {
  json j = to_json(c);
  j.erase("paths");
  j.erase("threads");
  return hash_string(j.dump());
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw FormatError(FormatErrc::io, "cannot write " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrc::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string num(double v) { return lseg::detail::num(v); }

// ---------------------------------------------------------------------------
// Library on disk
//   manifest.csv                 id,seed,mirrored,source,split
//   poses.json                   canonical pose per case
//   case_NNN_{t1,t2,labels,icv}.g3d
//   case_NNN_atlas.g3d           subject atlas, written by `fuse`
//   extended/                    fine-tune cases, same layout, all "train"

inline std::string case_file(const std::string& dir, int id, const char* what) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "case_%03d_%s.g3d", id, what);
  return (fs::path(dir) / buf).string();
}

inline std::string extended_dir(const RunConfig& c) { return (fs::path(c.paths.library) / "extended").string(); }

inline json pose_json(const Pose& p) {
  return {{"rot", p.rot}, {"scale", p.scale}, {"shift", p.shift}, {"dims", p.dims}, {"mirrored", p.mirrored}};
}

inline Pose pose_from_json(const json& j) {
  Pose p;
  p.rot = j.at("rot").get<std::array<double, 9>>();
  p.scale = j.at("scale").get<std::array<double, 3>>();
  p.shift = j.at("shift").get<std::array<double, 3>>();
  p.dims = j.at("dims").get<Index3>();
  p.mirrored = j.at("mirrored").get<bool>();
  return p;
}

inline void save_library(const PhantomLibrary& lib, const std::string& dir) {
  fs::create_directories(dir);
  json poses = json::array();
  for (const auto& c : lib.cases) {
    write_volume(case_file(dir, c.id, "t1"), c.t1);
    write_volume(case_file(dir, c.id, "t2"), c.t2);
    write_volume(case_file(dir, c.id, "labels"), c.labels);
    write_volume(case_file(dir, c.id, "icv"), c.icv);
    poses.push_back(pose_json(c.pose));
  }
  write_text(fs::path(dir) / "poses.json", poses.dump(1) + "\n");
  write_text(fs::path(dir) / "manifest.csv", library_manifest(lib));
}

inline PhantomLibrary load_library(const std::string& dir) {
  const fs::path manifest = fs::path(dir) / "manifest.csv";
  if (!fs::exists(manifest)) throw FormatError(FormatErrc::io, "no library manifest at " + manifest.string());
  std::istringstream is(read_text(manifest));
  std::string line;
  std::getline(is, line);
  if (line != "id,seed,mirrored,source,split") throw FormatError(FormatErrc::bad_magic, manifest.string() + " header");
  json poses;
  try {
    poses = json::parse(read_text(fs::path(dir) / "poses.json"));
  } catch (const json::exception& e) {
    throw FormatError(FormatErrc::truncated, (fs::path(dir) / "poses.json").string() + ": " + e.what());
  }
  PhantomLibrary lib;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = lseg::detail::split_csv_line(line);
    if (f.size() != 5) throw FormatError(FormatErrc::size_mismatch, manifest.string() + ": bad row '" + line + "'");
    PhantomCase c;
    c.id = std::stoi(f[0]);
    if (c.id != static_cast<int>(lib.cases.size()))
      throw FormatError(FormatErrc::size_mismatch, manifest.string() + ": ids must be 0..n-1 in order");
    c.seed = std::stoull(f[1]);
    c.mirrored = f[2] == "1";
    c.source_id = std::stoi(f[3]);
    c.t1 = read_voxel_grid(case_file(dir, c.id, "t1"));
    c.t2 = read_voxel_grid(case_file(dir, c.id, "t2"));
    c.labels = read_label_grid(case_file(dir, c.id, "labels"));
    c.icv = read_label_grid(case_file(dir, c.id, "icv"));
    if (static_cast<std::size_t>(c.id) >= poses.size())
      throw FormatError(FormatErrc::size_mismatch, "poses.json has fewer entries than the manifest");
    c.pose = pose_from_json(poses.at(c.id));
    lib.cases.push_back(std::move(c));
    lib.split.push_back(detail::split_from_string(f[4]));
  }
  if (lib.cases.empty()) throw FormatError(FormatErrc::truncated, manifest.string() + " lists no cases");
  return lib;
}

/// Cases used only by the fine-tune phase: fresh phantoms, no mirrors.
inline PhantomLibrary make_extended(const RunConfig& c) {
  PhantomLibrary ext;
  for (int i = 0; i < c.extended_cases; ++i) {
    PhantomSpec s = c.phantom;
    s.seed = mix_seed(c.seed ^ 0xe7e7e7e7ULL, static_cast<std::uint64_t>(i));
    PhantomCase pc = generate(s);
    pc.id = pc.source_id = i;
    ext.cases.push_back(std::move(pc));
    ext.split.push_back(Split::train);
  }
  return ext;
}

// ---------------------------------------------------------------------------
// Workspace: library plus atlases, shared by the commands

/// Perturbation applied to a case before inference; kind bad_t2 swaps T1
/// into the T2 slot.
using Condition = std::optional<PerturbSpec>;

inline std::string condition_name(const Condition& c) { return c ? c->describe() : "clean"; }

class Workspace {
 public:
  explicit Workspace(RunConfig cfg) : cfg_(std::move(cfg)), lib_(load_library(cfg_.paths.library)) {
    if (lib_.cases.size() % 2 != 0) throw FormatError(FormatErrc::size_mismatch, "library must hold mirrored pairs");
    if (cfg_.extended_cases > 0 && fs::exists(fs::path(extended_dir(cfg_)) / "manifest.csv"))
      ext_ = load_library(extended_dir(cfg_));
  }

  const RunConfig& config() const { return cfg_; }
  const PhantomLibrary& library() const { return lib_; }
  const PhantomLibrary& extended() const { return ext_; }

  /// Template ids for a library case: every training case except the case
  /// itself and its mirror.
  std::vector<int> template_ids(std::optional<int> target) const {
    std::vector<int> ids;
    for (int id : lib_.ids(Split::train))
      if (!target || (id != *target && id != lib_.partner(*target))) ids.push_back(id);
    return ids;
  }

  /// Template-to-target field: from the fields directory when configured
  /// (library targets only), otherwise through the two canonical poses.
  DisplacementField field(int tmpl, const Pose& target_pose, std::optional<int> target) const {
    if (cfg_.paths.fields.empty() || !target) return pose_field(lib_.cases[tmpl].pose, target_pose);
    char stem[64];
    std::snprintf(stem, sizeof stem, "field_%03d_to_%03d", tmpl, *target);
    const fs::path base = fs::path(cfg_.paths.fields) / stem;
    DisplacementField f;
    f.dx = read_voxel_grid(base.string() + "_dx.g3d");
    f.dy = read_voxel_grid(base.string() + "_dy.g3d");
    f.dz = read_voxel_grid(base.string() + "_dz.g3d");
    if (f.dx.dims() != target_pose.dims || f.dy.dims() != target_pose.dims || f.dz.dims() != target_pose.dims)
      throw GeometryError("field " + base.string() + " does not match the target grid");
    return f;
  }

  /// Subject atlas from (possibly perturbed) target T1.
  LabelGrid build_atlas(const VoxelGrid& t1, const Pose& pose, std::optional<int> target) const {
    const auto ids = template_ids(target);
    if (ids.empty()) throw ArgumentError("fuse: no templates available");
    AtlasLibrary al;
    for (int id : ids) al.push_back({id, zscore_normalize(lib_.cases[id].t1), lib_.cases[id].labels, {}});
    FusionConfig f = cfg_.fusion;
    f.n_templates = std::min<int>(f.n_templates, static_cast<int>(al.size()));
    return build_subject_atlas(al, zscore_normalize(t1), f, [&](int id) {
      return std::optional<DisplacementField>(field(id, pose, target));
    });
  }

  /// Stored atlas written by `fuse`.
  const LabelGrid& atlas(int id, bool extended = false) {
    auto& cache = extended ? ext_atlas_ : atlas_;
    auto it = cache.find(id);
    if (it != cache.end()) return it->second;
    const std::string path = case_file(extended ? extended_dir(cfg_) : cfg_.paths.library, id, "atlas");
    if (!fs::exists(path)) throw FormatError(FormatErrc::io, "missing atlas " + path + " (run `fuse` first)");
    return cache.emplace(id, read_label_grid(path)).first->second;
  }

  /// Inputs of library case `id` under `cond`, at the requested resolution.
  Subject subject(int id, ChannelMode mode, Resolution res, const Condition& cond = {}, bool extended = false) {
    const PhantomCase& c = extended ? ext_.cases.at(id) : lib_.cases.at(id);
    Subject s{c.t1, c.t2, {}, c.labels};
    bool t1_changed = false;
    if (cond && cond->kind == PerturbKind::bad_t2) {
      s.t2 = bad_t2(s.t1, s.t2);
    } else if (cond && cond->kind == PerturbKind::elastic) {
      // Geometry changes, so the reference labels move with the images.
      apply_elastic({&s.t1, &s.t2}, s.labels, cond->amplitude, cond->sigma, mix_seed(cond->seed, id));
      t1_changed = cond->amplitude != 0.0;
    } else if (cond) {
      PerturbSpec p = *cond;
      p.seed = mix_seed(cond->seed, 2 * static_cast<std::uint64_t>(id));
      s.t1 = apply_perturbation(s.t1, p);
      p.seed = mix_seed(cond->seed, 2 * static_cast<std::uint64_t>(id) + 1);
      s.t2 = apply_perturbation(s.t2, p);
      t1_changed = true;
    }
    if (uses_atlas(mode)) {
      const bool same = !t1_changed || s.t1.values() == c.t1.values();
      s.atlas = same ? atlas(id, extended) : build_atlas(s.t1, c.pose, extended ? std::nullopt : std::optional(id));
    }
    return at_resolution(s, res);
  }

  LabelGrid icv(int id, Resolution res) const {
    const LabelGrid& g = lib_.cases.at(id).icv;
    return res == Resolution::full ? g : downsample_labels(g, 2);
  }

 private:
  RunConfig cfg_;
  PhantomLibrary lib_;
  PhantomLibrary ext_;
  std::map<int, LabelGrid> atlas_, ext_atlas_;
};

// ---------------------------------------------------------------------------
// Checkpoints and models

inline std::string checkpoint_path(const RunConfig& c, const Variant& v, Stage stage) {
  return (fs::path(c.paths.checkpoints) / (v.name() + ".stage" + std::to_string(static_cast<int>(stage)) + ".lfnn"))
      .string();
}

inline std::uint64_t variant_seed(const RunConfig& c, const Variant& v, Stage stage) {
  const std::string n = v.name();
  return mix_seed(c.seed, fnv1a(n.data(), n.size()) + static_cast<std::uint64_t>(stage));
}

/// Loads both stages of a variant. Missing files and checkpoints trained for
/// another variant or channel mode are errors.
inline CascadeModel load_model(const RunConfig& c, const Variant& v) {
  auto load = [&](Stage stage) {
    const std::string path = checkpoint_path(c, v, stage);
    if (!fs::exists(path)) throw FormatError(FormatErrc::io, "missing checkpoint " + path + " (run `train` first)");
    const auto ck = nn::read_checkpoint(path);
    if (ck.spec.in_channels != channel_count(v.mode))
      throw ArgumentError(path + ": checkpoint expects " + std::to_string(ck.spec.in_channels) +
                          " input channels but channel mode " + to_string(v.mode) + " supplies " +
                          std::to_string(channel_count(v.mode)));
    const auto it = ck.meta.find("variant");
    if (it != ck.meta.end() && it->second != v.name())
      throw ArgumentError(path + ": checkpoint belongs to variant " + it->second);
    return nn::network_from_checkpoint<float>(ck);
  };
  return CascadeModel(v.name(), load(Stage::hemisphere), load(Stage::lobule));
}

// ---------------------------------------------------------------------------
// phantom, fuse

inline PhantomLibrary cmd_phantom(const RunConfig& c) {
  c.validate();
  auto lib = make_library(c.cases, c.seed, c.phantom);
  save_library(lib, c.paths.library);
  if (c.extended_cases > 0) save_library(make_extended(c), extended_dir(c));
  return lib;
}

struct AtlasQuality {
  int id = 0;
  Split split = Split::train;
  int templates = 0;
  double present_dice = 0.0;  // mean Dice over labels present in either map
  double whole_dice = 0.0;
};

/// Builds and stores the subject atlas of every library (and extended) case;
/// writes <outputs>/fuse/atlas_quality.csv.
inline std::vector<AtlasQuality> cmd_fuse(const RunConfig& c) {
  Workspace ws(c);
  const auto& lib = ws.library();
  std::vector<AtlasQuality> rows;
  std::ostringstream csv;
  csv << "id,split,templates,present_dice,whole_dice\n";
  for (const auto& pc : lib.cases) {
    const auto atlas = ws.build_atlas(pc.t1, pc.pose, pc.id);
    write_volume(case_file(c.paths.library, pc.id, "atlas"), atlas);
    AtlasQuality q;
    q.id = pc.id;
    q.split = lib.split[pc.id];
    q.templates = std::min<int>(c.fusion.n_templates, static_cast<int>(ws.template_ids(pc.id).size()));
    q.present_dice = mean_present_dice(atlas, pc.labels);
    q.whole_dice = whole_dice(atlas, pc.labels);
    rows.push_back(q);
    csv << q.id << ',' << to_string(q.split) << ',' << q.templates << ',' << num(q.present_dice) << ','
        << num(q.whole_dice) << '\n';
  }
  for (const auto& pc : ws.extended().cases)
    write_volume(case_file(extended_dir(c), pc.id, "atlas"), ws.build_atlas(pc.t1, pc.pose, std::nullopt));
  write_text(fs::path(c.paths.outputs) / "fuse" / "atlas_quality.csv", csv.str());
  return rows;
}

// ---------------------------------------------------------------------------
// train

inline constexpr const char* kLossCsvHeader = "variant,stage,step,phase,case,primary,loss,mean_dice,bce";

using ProgressFn = std::function<void(const std::string&)>;

/// Trains both stages of every configured variant. Checkpoints go to
/// <checkpoints>/<variant>.stage{1,2}.lfnn, loss curves to
/// <outputs>/train/loss.csv. A non-finite loss writes the last good
/// parameters (meta status=aborted) and rethrows.
inline void cmd_train(const RunConfig& c, const ProgressFn& progress = {}) {
  Workspace ws(c);
  const auto& lib = ws.library();
  if (c.extended_cases > 0 && ws.extended().cases.empty())
    throw FormatError(FormatErrc::io, "extended cases missing under " + extended_dir(c) + " (run `phantom`)");
  fs::create_directories(c.paths.checkpoints);
  std::ostringstream csv;
  csv << kLossCsvHeader << '\n';
  const fs::path loss_path = fs::path(c.paths.outputs) / "train" / "loss.csv";
  const std::string chash = config_hash(c);

  for (const auto& v : c.variants) {
    std::vector<Subject> primary, extended;
    for (int id : lib.ids(Split::train)) primary.push_back(ws.subject(id, v.mode, v.resolution));
    const bool finetune = c.stage1.finetune_epochs > 0 || c.stage2.finetune_epochs > 0;
    if (finetune)
      for (const auto& pc : ws.extended().cases) extended.push_back(ws.subject(pc.id, v.mode, v.resolution, {}, true));
    for (Stage stage : {Stage::hemisphere, Stage::lobule}) {
      const auto seed = variant_seed(c, v, stage);
      nn::Network<float> net(c.network_spec(v, stage), seed);
      const int sn = static_cast<int>(stage);
      std::map<std::string, std::string> meta{{"variant", v.name()},
                                              {"stage", std::to_string(sn)},
                                              {"seed", std::to_string(c.seed)},
                                              {"config_hash", chash}};
      auto log = [&](const LossRecord& r) {
        csv << v.name() << ',' << sn << ',' << r.step << ',' << r.phase << ',' << r.case_index << ','
            << (r.primary ? 1 : 0) << ',' << num(r.loss) << ',' << num(r.mean_dice) << ',' << num(r.bce) << '\n';
        if (progress && r.step % 50 == 0) {
          char buf[160];
          std::snprintf(buf, sizeof buf, "%s stage %d step %d %s loss %.4f dice %.3f", v.name().c_str(), sn, r.step,
                        r.phase.c_str(), r.loss, r.mean_dice);
          progress(buf);
        }
      };
      try {
        const auto hist = train_network(net, primary, extended, v.mode, stage, c.train_config(stage),
                                        mix_seed(seed, 0x7ea1), log);
        meta["status"] = "complete";
        meta["steps"] = std::to_string(hist.size());
      } catch (const TrainingAborted& e) {
        meta["status"] = "aborted";
        meta["steps"] = std::to_string(e.step());
        nn::write_checkpoint(checkpoint_path(c, v, stage), nn::make_checkpoint(net, meta));
        write_text(loss_path, csv.str());
        throw;
      }
      nn::write_checkpoint(checkpoint_path(c, v, stage), nn::make_checkpoint(net, meta));
    }
  }
  write_text(loss_path, csv.str());
}

// ---------------------------------------------------------------------------
// Evaluation helpers

inline SegmentationRun run_models(std::vector<CascadeModel>& models, const Subject& s, ChannelMode mode) {
  std::vector<CascadeModel*> ptrs;
  for (auto& m : models) ptrs.push_back(&m);
  return ensemble_predict_roi(ptrs, input_channels(s, mode));
}

/// Dice of the ensemble of `models` on each case of `ids`.
inline std::vector<DiceTable> evaluate(Workspace& ws, std::vector<CascadeModel>& models, ChannelMode mode,
                                       Resolution res, const std::vector<int>& ids, const Condition& cond = {}) {
  std::vector<DiceTable> out;
  for (int id : ids) {
    const Subject s = ws.subject(id, mode, res, cond);
    out.push_back(aggregate_dice(run_models(models, s, mode).labels, s.labels));
  }
  return out;
}

inline PopulationModel load_population(const std::string& path) {
  PopulationModel m;
  try {
    const json j = json::parse(read_text(path));
    for (const auto& e : j.at("structures")) {
      PolyFit f;
      f.coefficients = e.at("coefficients").get<std::vector<double>>();
      f.residual_std = e.at("residual_std").get<double>();
      const int label = e.at("label").get<int>();
      if (label < 0 || label > kNumLabels) throw ArgumentError(path + ": label out of range");
      m[static_cast<LabelId>(label)] = f;
    }
  } catch (const json::exception& e) {
    throw ArgumentError("population model " + path + ": " + e.what());
  }
  return m;
}

inline json population_json(const PopulationModel& m) {
  json a = json::array();
  for (const auto& [label, f] : m)
    a.push_back({{"label", int(label)}, {"coefficients", f.coefficients}, {"residual_std", f.residual_std}});
  return {{"structures", a}};
}

// ---------------------------------------------------------------------------
// segment

struct SegmentResult {
  std::vector<int> ids;
  std::vector<LabelGrid> labels;
  std::vector<Report> reports;
  std::vector<DiceTable> dice;
};

inline std::string case_stem(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%03d", id);
  return buf;
}

/// Ensemble segmentation of `ids` (default: the evaluation split). Writes
/// per case labels (.g3d) and report (.csv, .txt), plus summary.csv and
/// manifest.txt under <outputs>/segment.
inline SegmentResult cmd_segment(const RunConfig& c, std::vector<int> ids = {}) {
  if (c.ensemble.empty()) throw ArgumentError("segment: no ensemble variants configured");
  const ChannelMode mode = c.ensemble.front().mode;
  const Resolution res = c.ensemble.front().resolution;
  for (const auto& v : c.ensemble)
    if (v.mode != mode || v.resolution != res)
      throw ArgumentError("segment: ensemble members must share channel mode and resolution");
  Workspace ws(c);
  std::vector<CascadeModel> models;
  for (const auto& v : c.ensemble) models.push_back(load_model(c, v));
  if (ids.empty()) ids = ws.library().ids(c.eval_split);
  std::optional<PopulationModel> population;
  if (!c.population.empty()) population = load_population(c.population);

  const fs::path out = fs::path(c.paths.outputs) / "segment";
  fs::create_directories(out);
  SegmentResult r;
  std::ostringstream summary;
  summary << "case,mean_structure_dice,whole_dice,whole_cm3\n";
  std::ostringstream manifest;
  manifest << "config_hash=" << config_hash(c) << '\n';
  for (const auto& v : c.ensemble)
    for (Stage st : {Stage::hemisphere, Stage::lobule})
      manifest << "checkpoint=" << fs::path(checkpoint_path(c, v, st)).filename().string() << ' '
               << hash_file(checkpoint_path(c, v, st)) << '\n';
  for (int id : ids) {
    if (id < 0 || id >= static_cast<int>(ws.library().cases.size()))
      throw ArgumentError("segment: case " + std::to_string(id) + " not in library");
    const Subject s = ws.subject(id, mode, res);
    auto run = run_models(models, s, mode);
    const LabelGrid icv = ws.icv(id, res);
    ReportInputs in;
    in.labels = &run.labels;
    in.icv = &icv;
    in.reference = &s.labels;
    in.age = c.age;
    in.population = population ? &*population : nullptr;
    Report rep = make_report(in);
    const std::string stem = case_stem(id);
    write_volume((out / (stem + "_labels.g3d")).string(), run.labels);
    write_text(out / (stem + "_report.csv"), report_csv(rep));
    write_text(out / (stem + "_report.txt"), report_text(rep));
    manifest << "output=" << stem << "_labels.g3d " << hash_file((out / (stem + "_labels.g3d")).string()) << '\n';
    const auto d = aggregate_dice(run.labels, s.labels);
    summary << id << ',' << num(d.mean_structure) << ',' << num(d.whole) << ',' << num(rep.whole().volume_cm3) << '\n';
    r.ids.push_back(id);
    r.labels.push_back(std::move(run.labels));
    r.reports.push_back(std::move(rep));
    r.dice.push_back(d);
  }
  write_text(out / "summary.csv", summary.str());
  write_text(out / "manifest.txt", manifest.str());
  return r;
}

// ---------------------------------------------------------------------------
// ablate, robustness

inline constexpr const char* kAblationCsvHeader = "architecture,channels,resolution,metric,mean,std,cases,status";
inline constexpr const char* kAblationMetrics[] = {"mean_structure_dice", "whole_dice"};

struct AblationCell {
  Variant variant;
  bool present = false;
  DiceSummary summary;
};

/// One row per (cell, metric); cells without checkpoints are marked absent.
inline std::vector<AblationCell> cmd_ablate(const RunConfig& c) {
  Workspace ws(c);
  const auto ids = ws.library().ids(c.eval_split);
  std::vector<AblationCell> cells;
  std::ostringstream csv;
  csv << kAblationCsvHeader << '\n';
  for (const auto& v : c.ablation) {
    AblationCell cell{v, false, {}};
    if (fs::exists(checkpoint_path(c, v, Stage::hemisphere)) && fs::exists(checkpoint_path(c, v, Stage::lobule))) {
      std::vector<CascadeModel> m;
      m.push_back(load_model(c, v));
      cell.summary = summarize(evaluate(ws, m, v.mode, v.resolution, ids));
      cell.present = true;
    }
    const double means[] = {cell.summary.mean.mean_structure, cell.summary.mean.whole};
    const double sds[] = {cell.summary.stddev.mean_structure, cell.summary.stddev.whole};
    for (int k = 0; k < 2; ++k) {
      csv << nn::to_string(v.arch) << ',' << to_string(v.mode) << ',' << to_string(v.resolution) << ','
          << kAblationMetrics[k] << ',';
      if (cell.present)
        csv << num(means[k]) << ',' << num(sds[k]) << ',' << cell.summary.cases << ",ok\n";
      else
        csv << ",,0,absent\n";
    }
    cells.push_back(cell);
  }
  write_text(fs::path(c.paths.outputs) / "ablate" / "ablation.csv", csv.str());
  return cells;
}

inline constexpr const char* kRobustnessCsvHeader =
    "variant,condition,mean_structure_dice,whole_dice,delta_mean_structure,delta_whole,status";

struct RobustnessRow {
  Variant variant;
  std::string condition;
  bool present = false;
  double mean_structure = 0.0, whole = 0.0;
  double delta_mean_structure = 0.0, delta_whole = 0.0;  // condition minus clean
};

/// Clean, every configured perturbation and bad_t2 for each trained variant.
inline std::vector<RobustnessRow> cmd_robustness(const RunConfig& c, const ProgressFn& progress = {}) {
  Workspace ws(c);
  const auto ids = ws.library().ids(c.eval_split);
  std::vector<Condition> conds{std::nullopt};
  for (const auto& p : c.perturbations)
    if (p.kind != PerturbKind::bad_t2) conds.push_back(p);
  PerturbSpec bad;
  bad.kind = PerturbKind::bad_t2;
  conds.push_back(bad);

  std::vector<RobustnessRow> rows;
  std::ostringstream csv;
  csv << kRobustnessCsvHeader << '\n';
  for (const auto& v : c.variants) {
    const bool present =
        fs::exists(checkpoint_path(c, v, Stage::hemisphere)) && fs::exists(checkpoint_path(c, v, Stage::lobule));
    std::vector<CascadeModel> m;
    if (present) m.push_back(load_model(c, v));
    RobustnessRow clean;
    for (const auto& cond : conds) {
      RobustnessRow row;
      row.variant = v;
      row.condition = condition_name(cond);
      row.present = present;
      if (present) {
        const auto s = summarize(evaluate(ws, m, v.mode, v.resolution, ids, cond));
        row.mean_structure = s.mean.mean_structure;
        row.whole = s.mean.whole;
        if (!cond) clean = row;
        row.delta_mean_structure = row.mean_structure - clean.mean_structure;
        row.delta_whole = row.whole - clean.whole;
        if (progress) progress(v.name() + " " + row.condition + " mean " + num(row.mean_structure));
      }
      csv << v.name() << ',' << lseg::detail::quote(row.condition) << ',';
      if (present)
        csv << num(row.mean_structure) << ',' << num(row.whole) << ',' << num(row.delta_mean_structure) << ','
            << num(row.delta_whole) << ",ok\n";
      else
        csv << ",,,,absent\n";
      rows.push_back(row);
    }
  }
  write_text(fs::path(c.paths.outputs) / "robustness" / "robustness.csv", csv.str());
  return rows;
}

// ---------------------------------------------------------------------------
// report

struct ReportRequest {
  std::string labels;     // .g3d label map
  std::string icv;        // optional .g3d mask
  std::string reference;  // optional .g3d ground truth
  std::string output;     // path stem; writes <stem>.csv and <stem>.txt
};

/// Volumetry report of an existing segmentation. Age and population model
/// come from the config.
inline Report cmd_report(const RunConfig& c, const ReportRequest& req) {
  const LabelGrid labels = read_label_grid(req.labels);
  std::optional<LabelGrid> icv, ref;
  if (!req.icv.empty()) icv = read_label_grid(req.icv);
  if (!req.reference.empty()) ref = read_label_grid(req.reference);
  std::optional<PopulationModel> population;
  if (!c.population.empty()) population = load_population(c.population);
  ReportInputs in;
  in.labels = &labels;
  in.icv = icv ? &*icv : nullptr;
  in.reference = ref ? &*ref : nullptr;
  in.age = c.age;
  in.population = population ? &*population : nullptr;
  Report r = make_report(in);
  const std::string stem =
      req.output.empty() ? (fs::path(c.paths.outputs) / "report" / fs::path(req.labels).stem()).string() : req.output;
  write_text(stem + ".csv", report_csv(r));
  write_text(stem + ".txt", report_text(r));
  return r;
}

}  // namespace lseg::pipeline
