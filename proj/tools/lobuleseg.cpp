// lobuleseg: command-line front end of the pipeline.
//
//   lobuleseg [--config run.json] [--seed N] [--threads N] <command> [options]
//
// Commands: phantom, fuse, train, segment, ablate, robustness, report.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lseg/pipeline.hpp"

namespace {

using namespace lseg;
using namespace lseg::pipeline;

void print_ablation(const std::vector<AblationCell>& cells) {
  for (const auto& c : cells) {
    if (c.present)
      std::printf("%-28s mean %.4f  whole %.4f  (%zu cases)\n", c.variant.name().c_str(), c.summary.mean.mean_structure,
                  c.summary.mean.whole, c.summary.cases);
    else
      std::printf("%-28s absent\n", c.variant.name().c_str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cerebellum lobule segmentation pipeline on labeled phantoms"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool dump_config = false;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Override the configured seed");
  app.add_option("--threads", threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
  app.add_flag("--dump-config", dump_config, "Print the effective configuration as JSON");

  auto* phantom = app.add_subcommand("phantom", "Generate the phantom library");
  auto* fuse = app.add_subcommand("fuse", "Build subject atlases for every library case");
  auto* train = app.add_subcommand("train", "Train both cascade stages of every configured variant");
  auto* segment = app.add_subcommand("segment", "Ensemble segmentation with per-case reports");
  auto* ablate = app.add_subcommand("ablate", "Architecture x channel x resolution table");
  auto* robustness = app.add_subcommand("robustness", "Dice under perturbations and T2 substitution");
  auto* report = app.add_subcommand("report", "Volumetry report for a label map");

  std::vector<int> case_ids;
  segment->add_option("--case", case_ids, "Library case ids (default: evaluation split)");

  ReportRequest req;
  std::optional<double> age;
  std::string population;
  report->add_option("--labels", req.labels, "Label map (.g3d)")->required()->check(CLI::ExistingFile);
  report->add_option("--icv", req.icv, "Intracranial mask (.g3d)")->check(CLI::ExistingFile);
  report->add_option("--reference", req.reference, "Ground-truth labels for Dice (.g3d)")->check(CLI::ExistingFile);
  report->add_option("--output", req.output, "Output path stem (writes .csv and .txt)");
  report->add_option("--age", age, "Subject age in years");
  report->add_option("--population", population, "Population model JSON")->check(CLI::ExistingFile);

  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg;
    if (!config_path.empty()) {
      cfg = load_config(config_path);
    } else {
      cfg.complete();
    }
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    if (age) cfg.age = *age;
    if (!population.empty()) cfg.population = population;
    cfg.validate();
    set_num_threads(cfg.threads);
    if (dump_config) std::cout << to_json(cfg).dump(2) << '\n';

    ProgressFn progress;
    if (!quiet) progress = [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); };

    if (*phantom) {
      const auto lib = cmd_phantom(cfg);
      std::printf("wrote %zu cases to %s\n", lib.cases.size(), cfg.paths.library.c_str());
    } else if (*fuse) {
      const auto rows = cmd_fuse(cfg);
      double sum = 0.0;
      for (const auto& r : rows) sum += r.present_dice;
      std::printf("built %zu atlases, mean atlas Dice %.4f\n", rows.size(), rows.empty() ? 0.0 : sum / rows.size());
    } else if (*train) {
      cmd_train(cfg, progress);
      std::printf("checkpoints in %s\n", cfg.paths.checkpoints.c_str());
    } else if (*segment) {
      const auto r = cmd_segment(cfg, case_ids);
      for (std::size_t i = 0; i < r.ids.size(); ++i)
        std::printf("case %d  mean %.4f  whole %.4f  %.2f cm3\n", r.ids[i], r.dice[i].mean_structure,
                    r.dice[i].whole, r.reports[i].whole().volume_cm3);
    } else if (*ablate) {
      print_ablation(cmd_ablate(cfg));
    } else if (*robustness) {
      for (const auto& row : cmd_robustness(cfg, progress)) {
        if (row.present)
          std::printf("%-28s %-32s mean %.4f  delta %+.4f\n", row.variant.name().c_str(), row.condition.c_str(),
                      row.mean_structure, row.delta_mean_structure);
        else
          std::printf("%-28s %-32s absent\n", row.variant.name().c_str(), row.condition.c_str());
      }
    } else if (*report) {
      const auto r = cmd_report(cfg, req);
      std::cout << report_text(r);
    }
  } catch (const lseg::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
