#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "osteo/cli/pipeline.hpp"

namespace fs = std::filesystem;
using namespace osteo;
using namespace osteo::app;

namespace {

struct Options {
  std::string run = "run";
  std::string config;
  std::vector<std::uint64_t> seeds{1};
  std::string crop_mode;
  std::string pretrain_mode;
  std::string dump_plan;
  std::string ablate_mode;
  bool quiet = false;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// --config beats the run's own config.json, which beats the defaults.
RunConfig load_config(const Options& o, const RunPaths& run) {
  RunConfig cfg;
  if (!o.config.empty()) {
    cfg = parse_config(slurp(o.config));
  } else if (fs::exists(run.config())) {
    cfg = read_config(run);
  }
  if (!o.crop_mode.empty()) cfg.pretraining.crop_mode = o.crop_mode;
  if (!o.pretrain_mode.empty()) cfg.pretraining.mode = o.pretrain_mode;
  cfg.validate();
  return cfg;
}

LogFn make_log(const Options& o) {
  const auto t0 = std::chrono::steady_clock::now();
  return [t0, quiet = o.quiet](const std::string& line) {
    if (quiet) return;
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "[%7.1fs] %s\n", s, line.c_str());
  };
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

int cmd_evaluate(const Options& o, const RunPaths& run, const RunConfig& cfg, const LogFn& log) {
  std::vector<cls::MetricsReport> reports;
  for (auto s : o.seeds) {
    reports.push_back(stage_evaluate(run, cfg, s, log));
    std::cout << cls::metrics_json(reports.back()) << '\n';
  }
  const std::string summary = summary_json(summarize(reports));
  write_file(run.root / "summary.json", summary);
  std::cout << summary;
  return 0;
}

int cmd_ablate(const Options& o, const RunPaths& run, const RunConfig& cfg, const LogFn& log) {
  // The baseline must already be evaluated for every seed.
  std::vector<cls::MetricsReport> baseline;
  for (auto s : o.seeds) baseline.push_back(read_metrics(run, s));

  const RunConfig ablated = ablated_config(cfg, o.ablate_mode);
  const RunPaths sub{run.root / "ablations" / o.ablate_mode};
  fs::create_directories(sub.root);
  write_config(sub, ablated);
  if (!fs::exists(sub.data())) {
    if (!fs::exists(run.data() / "manifest.json")) throw MissingArtifactError("synth", run.data() / "manifest.json");
    fs::copy(run.data(), sub.data(), fs::copy_options::recursive);
  }
  std::vector<cls::MetricsReport> reports;
  for (auto s : o.seeds) reports.push_back(run_all(sub, ablated, s, log));
  const std::string report = ablation_json(o.ablate_mode, summarize(baseline), summarize(reports));
  write_file(sub.root / "ablation.json", report);
  std::cout << report;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Segmentation-for-classification pipeline on synthetic hand radiographs"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub, bool seeds) {
    sub->add_option("--run", o.run, "run directory")->capture_default_str();
    sub->add_option("--config", o.config, "JSON config; defaults to <run>/config.json");
    sub->add_flag("--quiet", o.quiet, "no progress on stderr");
    if (seeds) sub->add_option("--seeds", o.seeds, "comma separated seeds")->delimiter(',')->capture_default_str();
    sub->add_option("--crop-mode", o.crop_mode, "constrained or conventional")
        ->check(CLI::IsMember({"constrained", "conventional"}));
    sub->add_option("--pretrain", o.pretrain_mode, "contrastive or none")
        ->check(CLI::IsMember({"contrastive", "none"}));
  };

  auto* synth = app.add_subcommand("synth", "write config.json and the synthetic dataset");
  common(synth, false);
  auto* seg_train = app.add_subcommand("segment-train", "train the mixture segmenter");
  common(seg_train, true);
  seg_train->add_option("--dump-plan", o.dump_plan, "write the last step's transport plans (JSON)");
  auto* seg_pred = app.add_subcommand("segment-predict", "predict bone masks");
  common(seg_pred, true);
  auto* extract = app.add_subcommand("extract-patches", "cut bone patches (or raw crops)");
  common(extract, true);
  auto* pretrain = app.add_subcommand("pretrain", "contrastive pretraining of the encoder");
  common(pretrain, true);
  auto* finetune = app.add_subcommand("finetune", "train the classifier head");
  common(finetune, true);
  auto* evaluate = app.add_subcommand("evaluate", "test metrics per seed and their summary");
  common(evaluate, true);
  auto* run_cmd = app.add_subcommand("run", "every stage for each seed");
  common(run_cmd, true);
  auto* ablate = app.add_subcommand("ablate", "rerun with one component removed and compare");
  common(ablate, true);
  ablate->add_option("--mode,--ablate", o.ablate_mode, "ablation")
      ->required()
      ->check(CLI::IsMember({"no-segmentation", "no-pretrain", "conventional-crop"}));

  CLI11_PARSE(app, argc, argv);

  try {
    const RunPaths run{o.run};
    const RunConfig cfg = load_config(o, run);
    const LogFn log = make_log(o);
    auto per_seed = [&](auto&& fn) {
      for (auto s : o.seeds) fn(s);
      return 0;
    };

    if (synth->parsed()) {
      write_config(run, cfg);
      stage_synth(run, cfg, log);
      return 0;
    }
    if (seg_train->parsed()) {
      const fs::path plan = o.dump_plan;
      return per_seed([&](std::uint64_t s) {
        if (cfg.patch_source != "segmentation") {
          log("patch_source is '" + cfg.patch_source + "'; nothing to train");
          return;
        }
        stage_segment_train(run, cfg, s, log, o.dump_plan.empty() ? nullptr : &plan);
      });
    }
    if (seg_pred->parsed()) return per_seed([&](std::uint64_t s) { stage_segment_predict(run, cfg, s, log); });
    if (extract->parsed()) return per_seed([&](std::uint64_t s) { stage_extract_patches(run, cfg, s, log); });
    if (pretrain->parsed()) return per_seed([&](std::uint64_t s) { stage_pretrain(run, cfg, s, log); });
    if (finetune->parsed()) return per_seed([&](std::uint64_t s) { stage_finetune(run, cfg, s, log); });
    if (evaluate->parsed()) return cmd_evaluate(o, run, cfg, log);
    if (run_cmd->parsed()) {
      for (auto s : o.seeds) run_all(run, cfg, s, log);
      return cmd_evaluate(o, run, cfg, log);
    }
    if (ablate->parsed()) return cmd_ablate(o, run, cfg, log);
  } catch (const MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
