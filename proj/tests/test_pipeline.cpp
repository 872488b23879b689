#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "osteo/cli/pipeline.hpp"
#include "osteo/diffcore/errors.hpp"

using namespace osteo;
using namespace osteo::app;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.data.subjects = 40;
  c.data.image_size = 48;
  c.segmentation.steps = 6;
  c.segmentation.batch = 4;
  c.pretraining.epochs = 1;
  c.pretraining.batch = 8;
  c.finetuning.epochs = 4;
  c.finetuning.supervised_epochs = 1;
  return c;
}

struct TempRun {
  RunPaths paths;
  explicit TempRun(const std::string& tag)
      : paths{fs::temp_directory_path() / ("osteo_" + tag + "_" + std::to_string(::getpid()))} {
    fs::remove_all(paths.root);
  }
  ~TempRun() { fs::remove_all(paths.root); }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("config round trip and overlay") {
  RunConfig c;
  c.seed = 9;
  c.segmentation.gamma0 = 0.6;
  c.pretraining.crop_mode = "conventional";
  const RunConfig back = parse_config(config_json(c));
  CHECK(config_json(back) == config_json(c));

  const RunConfig partial = parse_config(R"({"segmentation": {"steps": 17}})");
  CHECK(partial.segmentation.steps == 17);
  CHECK(partial.segmentation.modules == RunConfig{}.segmentation.modules);
}

TEST_CASE("config errors name the key path") {
  CHECK(error_of([] { parse_config(R"({"segmentation": {"gama0": 0.5}})"); })
            .find("segmentation.gama0") != std::string::npos);
  CHECK(error_of([] { parse_config(R"({"data": {"subjects": "many"}})"); }).find("data.subjects") !=
        std::string::npos);
  CHECK(error_of([] { parse_config(R"({"pretraining": {"mode": "byol"}})"); }).find("pretraining.mode") !=
        std::string::npos);
  CHECK_THROWS_AS(parse_config("{not json"), ConfigError);
}

TEST_CASE("ablated configs") {
  const RunConfig base;
  CHECK(ablated_config(base, "no-segmentation").patch_source == "none");
  CHECK(ablated_config(base, "no-pretrain").pretraining.mode == "none");
  const RunConfig conv = ablated_config(base, "conventional-crop");
  CHECK(conv.pretraining.crop_mode == "conventional");
  CHECK(pretrain_config(conv).views.min_nonzero == 0.0);
  CHECK(pretrain_config(base).views.min_nonzero == doctest::Approx(0.10));
  CHECK_THROWS_AS(ablated_config(base, "no-head"), ConfigError);
}

TEST_CASE("seed summaries and ablation deltas") {
  cls::MetricsReport a, b;
  a.auc = 0.8;
  b.auc = 0.6;
  a.f1 = 0.5;
  b.f1 = 0.7;
  const SeedSummary s = summarize({a, b});
  CHECK(s.auc.mean == doctest::Approx(0.7));
  CHECK(s.auc.std == doctest::Approx(0.1));  // population
  CHECK(s.f1.mean == doctest::Approx(0.6));

  cls::MetricsReport c = a;
  c.auc = 0.9;
  const std::string j = ablation_json("no-pretrain", summarize({a}), summarize({c}));
  CHECK(j.find("\"delta\": 0.09999") != std::string::npos);
  CHECK_THROWS_AS(summarize({}), ContractError);
}

TEST_CASE("raw crops stand in for bones") {
  RunConfig c = tiny_config();
  const Cohort cohort = make_cohort(c);
  const auto subjects = subjects_from_raw_crops(c, cohort.hands);
  REQUIRE(subjects.size() == cohort.hands.size());
  for (const auto& s : subjects) {
    CHECK(s.patches.size() == 7);
    for (const auto& p : s.patches) CHECK(p.crop.width == c.raw_crop_size);
  }
  // per-subject streams: order of the cohort does not matter
  std::vector<dataio::HandSample> reversed(cohort.hands.rbegin(), cohort.hands.rend());
  const auto again = subjects_from_raw_crops(c, reversed);
  CHECK(again.back().patches[3].bbox == subjects.front().patches[3].bbox);
}

TEST_CASE("stages demand their inputs") {
  TempRun t("stages");
  const RunConfig c = tiny_config();
  auto stage_of = [](const std::function<void()>& fn) {
    try {
      fn();
    } catch (const MissingArtifactError& e) {
      return e.stage();
    }
    return std::string{};
  };
  CHECK(stage_of([&] { stage_evaluate(t.paths, c, 1); }) == "finetune");
  CHECK(stage_of([&] { stage_segment_train(t.paths, c, 1); }) == "synth");
  stage_synth(t.paths, c);
  CHECK(stage_of([&] { stage_segment_predict(t.paths, c, 1); }) == "segment-train");
  CHECK(stage_of([&] { stage_extract_patches(t.paths, c, 1); }) == "segment-predict");
  CHECK(stage_of([&] { stage_pretrain(t.paths, c, 1); }) == "extract-patches");
  CHECK(stage_of([&] { stage_finetune(t.paths, c, 1); }) == "pretrain");
  CHECK(stage_of([&] { read_metrics(t.paths, 1); }) == "evaluate");
  CHECK(error_of([&] { stage_evaluate(t.paths, c, 1); }).find("'finetune'") != std::string::npos);
}

TEST_CASE("staged run writes every artifact and reproduces") {
  TempRun t("full");
  const RunConfig c = tiny_config();
  write_config(t.paths, c);
  CHECK(config_json(read_config(t.paths)) == config_json(c));
  const fs::path plan = t.paths.root / "plan.json";
  stage_synth(t.paths, c);
  stage_segment_train(t.paths, c, 3, {}, &plan);
  stage_segment_predict(t.paths, c, 3);
  stage_extract_patches(t.paths, c, 3);
  stage_pretrain(t.paths, c, 3);
  stage_finetune(t.paths, c, 3);
  const cls::MetricsReport m = stage_evaluate(t.paths, c, 3);
  CHECK(m.seed == 3);
  CHECK(fs::exists(plan));
  CHECK(fs::exists(t.paths.checkpoints(3) / "head.ckpt"));
  const std::string csv = slurp(t.paths.metrics(3) / "per_bone.csv");
  CHECK(csv.rfind("segment,mean_prob,std\n", 0) == 0);

  const std::string first = slurp(t.paths.metrics(3) / "metrics.json");
  CHECK(first == cls::metrics_json(read_metrics(t.paths, 3)) + "\n");
  // deleting a downstream artifact and rerunning from the upstream ones
  fs::remove_all(t.paths.metrics(3));
  fs::remove_all(t.paths.checkpoints(3) / "head.ckpt");
  stage_finetune(t.paths, c, 3);
  stage_evaluate(t.paths, c, 3);
  CHECK(slurp(t.paths.metrics(3) / "metrics.json") == first);
}

TEST_CASE("no-segmentation run skips the segmenter") {
  TempRun t("noseg");
  const RunConfig c = ablated_config(tiny_config(), "no-segmentation");
  run_all(t.paths, c, 1);
  CHECK_FALSE(fs::exists(t.paths.checkpoints(1) / "segmenter.ckpt"));
  CHECK(fs::exists(t.paths.metrics(1) / "metrics.json"));
}
