#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "osteo/cli/pipeline.hpp"
#include "osteo/diffcore/checkpoint.hpp"
#include "osteo/diffcore/errors.hpp"

namespace osteo::app {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
}

void require(const fs::path& p, const std::string& stage) {
  if (!fs::exists(p)) throw MissingArtifactError(stage, p);
}

fs::path manifest_of(const RunPaths& run) { return run.data() / "manifest.json"; }
fs::path segmenter_ckpt(const RunPaths& run, std::uint64_t s) { return run.checkpoints(s) / "segmenter.ckpt"; }
fs::path masks_dir(const RunPaths& run, std::uint64_t s) { return run.seed_dir(s) / "masks"; }
fs::path patch_index(const RunPaths& run, std::uint64_t s) { return run.patches(s) / "patches.json"; }
fs::path encoder_ckpt(const RunPaths& run, std::uint64_t s) { return run.checkpoints(s) / "encoder.ckpt"; }
fs::path classifier_encoder_ckpt(const RunPaths& run, std::uint64_t s) {
  return run.checkpoints(s) / "classifier_encoder.ckpt";
}
fs::path head_ckpt(const RunPaths& run, std::uint64_t s) { return run.checkpoints(s) / "head.ckpt"; }
fs::path head_stats(const RunPaths& run, std::uint64_t s) { return run.checkpoints(s) / "head.json"; }

// Stage output goes to the caller's log and to logs/<stage>_seed<s>.log.
LogFn tee(const RunPaths& run, const std::string& name, const LogFn& log) {
  fs::create_directories(run.logs());
  auto file = std::make_shared<std::ofstream>(run.logs() / (name + ".log"), std::ios::app);
  return [file, log](const std::string& line) {
    *file << line << '\n';
    file->flush();
    if (log) log(line);
  };
}

std::string seed_tag(const std::string& stage, std::uint64_t seed) { return stage + "_seed" + std::to_string(seed); }

std::vector<dataio::HandSample> load_hands(const RunPaths& run) {
  require(manifest_of(run), "synth");
  std::vector<dataio::HandSample> hands;
  for (auto& r : dataio::read_dataset(run.data())) {
    if (r.annotations.empty() || !r.t_score) throw ContractError("dataset record " + r.id + " is not a hand sample");
    hands.push_back({r.subject_id, std::move(r.image), std::move(r.annotations.front()), *r.t_score});
  }
  return hands;
}

Cohort load_cohort(const RunPaths& run) {
  Cohort c;
  c.hands = load_hands(run);
  c.split = dataio::read_manifest(run.data());
  return c;
}

std::vector<cls::SubjectRecord> load_subjects(const RunPaths& run, std::uint64_t seed) {
  require(patch_index(run, seed), "extract-patches");
  const json index = json::parse(read_text(patch_index(run, seed)));
  std::vector<cls::SubjectRecord> out;
  for (const auto& s : index.at("subjects")) {
    std::vector<dataio::BonePatch> patches;
    for (const auto& p : s.at("patches")) {
      dataio::BonePatch bp;
      const auto seg = dataio::segment_from_name(p.at("segment").get<std::string>());
      if (!seg) throw ContractError("unknown segment in patch index");
      bp.segment = *seg;
      bp.subject_id = s.at("subject_id").get<std::string>();
      const auto& b = p.at("bbox");
      bp.bbox = {b.at(0).get<std::size_t>(), b.at(1).get<std::size_t>(), b.at(2).get<std::size_t>(),
                 b.at(3).get<std::size_t>()};
      bp.crop = dataio::read_pgm_image(run.patches(seed) / p.at("file").get<std::string>());
      patches.push_back(std::move(bp));
    }
    out.push_back(cls::make_subject(s.at("subject_id").get<std::string>(), std::move(patches),
                                    s.at("t_score").get<double>()));
  }
  return out;
}

void save_head(const RunPaths& run, std::uint64_t seed, const cls::LinearHead& head) {
  diffcore::save_checkpoint(head_ckpt(run, seed), head.params);
  json j;
  j["mean"] = head.mean;
  j["inv_std"] = head.inv_std;
  write_text(head_stats(run, seed), j.dump(2) + "\n");
}

cls::LinearHead load_head(const RunPaths& run, std::uint64_t seed, std::size_t rep) {
  require(head_ckpt(run, seed), "finetune");
  require(head_stats(run, seed), "finetune");
  cls::LinearHead head = cls::make_head(rep, seed);
  diffcore::load_checkpoint(head_ckpt(run, seed), head.params);
  const json j = json::parse(read_text(head_stats(run, seed)));
  head.mean = j.at("mean").get<std::vector<double>>();
  head.inv_std = j.at("inv_std").get<std::vector<double>>();
  return head;
}

}  // namespace

void write_config(const RunPaths& run, const RunConfig& cfg) { write_text(run.config(), config_json(cfg)); }

RunConfig read_config(const RunPaths& run) {
  if (!fs::exists(run.config())) throw MissingArtifactError("init", run.config());
  return parse_config(read_text(run.config()));
}

void stage_synth(const RunPaths& run, const RunConfig& cfg, const LogFn& log) {
  const LogFn out = tee(run, "synth", log);
  const Cohort c = make_cohort(cfg);
  std::vector<dataio::DatasetRecord> records;
  for (const auto& h : c.hands) records.push_back(dataio::to_record(h));
  dataio::write_dataset(run.data(), records, c.split);
  out("synth wrote " + std::to_string(records.size()) + " subjects");
}

void stage_segment_train(const RunPaths& run, const RunConfig& cfg, std::uint64_t seed, const LogFn& log,
                         const fs::path* dump_plan) {
  const LogFn out = tee(run, seed_tag("segment-train", seed), log);
  const Cohort cohort = load_cohort(run);
  RunConfig c = cfg;
  c.seed = seed;
  std::vector<ot::CouplingPlan> last_plans;
  std::vector<ot::CostMatrix> last_costs;
  mix::MixtureNet net = train_segmenter(c, cohort, out, [&](const mix::SegLoss& loss) {
    if (!dump_plan) return;
    last_plans = loss.plans;
    last_costs = loss.costs;
  });
  diffcore::save_checkpoint(segmenter_ckpt(run, seed), net.params());
  if (dump_plan) {
    json plans = json::array();
    for (std::size_t i = 0; i < last_plans.size(); ++i) {
      const auto& p = last_plans[i];
      json rows = json::array();
      for (std::size_t r = 0; r < p.rows; ++r) {
        json row = json::array();
        for (std::size_t m = 0; m < p.cols; ++m) row.push_back(p.at(r, m));
        rows.push_back(row);
      }
      plans.push_back({{"plan", rows}, {"transport_cost", p.transport_cost(last_costs[i])}});
    }
    write_text(*dump_plan, plans.dump(2) + "\n");
  }
  out("segmenter saved to " + segmenter_ckpt(run, seed).string());
}

void stage_segment_predict(const RunPaths& run, const RunConfig& cfg, std::uint64_t seed, const LogFn& log) {
  const LogFn out = tee(run, seed_tag("segment-predict", seed), log);
  require(segmenter_ckpt(run, seed), "segment-train");
  const auto hands = load_hands(run);
  RunConfig c = cfg;
  c.seed = seed;
  mix::MixtureNet net(seg_net_config(c), seed);
  diffcore::load_checkpoint(segmenter_ckpt(run, seed), net.params());
  const auto masks = predict_masks(c, net, hands);
  fs::create_directories(masks_dir(run, seed));
  double agree = 0.0;
  for (std::size_t i = 0; i < hands.size(); ++i) {
    dataio::write_pgm(masks_dir(run, seed) / (hands[i].subject_id + ".pgm"), masks[i]);
    agree += 1.0 - ot::pair_cost(masks[i], hands[i].mask);
  }
  out("predicted " + std::to_string(hands.size()) + " masks, mean IoU vs reference " +
      std::to_string(agree / static_cast<double>(hands.size())));
}

void stage_extract_patches(const RunPaths& run, const RunConfig& cfg, std::uint64_t seed, const LogFn& log) {
  const LogFn out = tee(run, seed_tag("extract-patches", seed), log);
  const auto hands = load_hands(run);
  RunConfig c = cfg;
  c.seed = seed;
  std::vector<cls::SubjectRecord> subjects;
  if (cfg.patch_source == "segmentation") {
    std::vector<dataio::LabelMap> masks;
    for (const auto& h : hands) {
      const fs::path p = masks_dir(run, seed) / (h.subject_id + ".pgm");
      require(p, "segment-predict");
      masks.push_back(dataio::read_pgm_labels(p));
    }
    subjects = subjects_from_masks(hands, masks);
  } else {
    subjects = subjects_from_raw_crops(c, hands);
  }
  fs::remove_all(run.patches(seed));
  fs::create_directories(run.patches(seed));
  json index;
  index["source"] = cfg.patch_source;
  json list = json::array();
  std::size_t count = 0;
  for (const auto& s : subjects) {
    json patches = json::array();
    for (const auto& p : s.patches) {
      const std::string file = s.subject_id + "_" + std::string(dataio::segment_name(p.segment)) + ".pgm";
      dataio::write_pgm(run.patches(seed) / file, p.crop);
      patches.push_back({{"segment", dataio::segment_name(p.segment)},
                         {"bbox", {p.bbox.row, p.bbox.col, p.bbox.height, p.bbox.width}},
                         {"file", file}});
      ++count;
    }
    list.push_back({{"subject_id", s.subject_id}, {"t_score", s.t_score}, {"label", s.label}, {"patches", patches}});
  }
  index["subjects"] = list;
  write_text(patch_index(run, seed), index.dump(1) + "\n");
  out("extracted " + std::to_string(count) + " patches from " + std::to_string(subjects.size()) + " subjects");
}

void stage_pretrain(const RunPaths& run, const RunConfig& cfg, std::uint64_t seed, const LogFn& log) {
  const LogFn out = tee(run, seed_tag("pretrain", seed), log);
  const auto split = dataio::read_manifest(run.data());
  const SplitSubjects subjects = split_records(load_subjects(run, seed), split);
  RunConfig c = cfg;
  c.seed = seed;
  const pre::Encoder enc = pretrain_encoder(c, subjects.train, out);
  diffcore::save_checkpoint(encoder_ckpt(run, seed), enc.params());
  out(cfg.pretraining.mode == "none" ? "encoder left at initialisation" : "encoder saved");
}

void stage_finetune(const RunPaths& run, const RunConfig& cfg, std::uint64_t seed, const LogFn& log) {
  const LogFn out = tee(run, seed_tag("finetune", seed), log);
  require(encoder_ckpt(run, seed), "pretrain");
  const auto split = dataio::read_manifest(run.data());
  const SplitSubjects subjects = split_records(load_subjects(run, seed), split);
  RunConfig c = cfg;
  c.seed = seed;
  pre::Encoder enc({}, seed);
  diffcore::load_checkpoint(encoder_ckpt(run, seed), enc.params());
  const cls::FinetuneResult fr = train_classifier(c, enc, subjects, out);
  diffcore::save_checkpoint(classifier_encoder_ckpt(run, seed), enc.params());
  save_head(run, seed, fr.head);
}

cls::MetricsReport stage_evaluate(const RunPaths& run, const RunConfig& cfg, std::uint64_t seed, const LogFn& log) {
  const LogFn out = tee(run, seed_tag("evaluate", seed), log);
  require(classifier_encoder_ckpt(run, seed), "finetune");
  const auto split = dataio::read_manifest(run.data());
  const SplitSubjects subjects = split_records(load_subjects(run, seed), split);
  pre::Encoder enc({}, seed);
  diffcore::load_checkpoint(classifier_encoder_ckpt(run, seed), enc.params());
  const cls::LinearHead head = load_head(run, seed, enc.config().rep);
  RunConfig c = cfg;
  c.seed = seed;
  const ClassifierOutcome res = evaluate_classifier(c, enc, head, subjects.test);
  write_text(run.metrics(seed) / "metrics.json", cls::metrics_json(res.metrics) + "\n");
  write_text(run.metrics(seed) / "per_bone.csv", cls::per_bone_csv(res.predictions));
  out("test AUC " + std::to_string(res.metrics.auc) + " F1 " + std::to_string(res.metrics.f1));
  return res.metrics;
}

cls::MetricsReport run_all(const RunPaths& run, const RunConfig& cfg, std::uint64_t seed, const LogFn& log) {
  if (!fs::exists(run.config())) write_config(run, cfg);
  if (!fs::exists(manifest_of(run))) stage_synth(run, cfg, log);
  if (cfg.patch_source == "segmentation") {
    stage_segment_train(run, cfg, seed, log);
    stage_segment_predict(run, cfg, seed, log);
  }
  stage_extract_patches(run, cfg, seed, log);
  stage_pretrain(run, cfg, seed, log);
  stage_finetune(run, cfg, seed, log);
  return stage_evaluate(run, cfg, seed, log);
}

cls::MetricsReport read_metrics(const RunPaths& run, std::uint64_t seed) {
  const fs::path p = run.metrics(seed) / "metrics.json";
  require(p, "evaluate");
  const json j = json::parse(read_text(p));
  cls::MetricsReport m;
  m.precision = j.at("precision").get<double>();
  m.recall = j.at("recall").get<double>();
  m.f1 = j.at("f1").get<double>();
  m.auc_defined = !j.at("auc").is_null();
  m.auc = m.auc_defined ? j.at("auc").get<double>() : std::nan("");
  m.accuracy = j.at("accuracy").get<double>();
  m.macro_f1 = j.at("macro_f1").get<double>();
  m.seed = j.at("seed").get<std::uint64_t>();
  return m;
}

SeedSummary summarize(const std::vector<cls::MetricsReport>& reports) {
  if (reports.empty()) throw ContractError("summarize: no reports");
  SeedSummary s;
  s.per_seed = reports;
  auto stat = [&](double cls::MetricsReport::*field) {
    MetricSummary m;
    for (const auto& r : reports) m.mean += r.*field;
    m.mean /= static_cast<double>(reports.size());
    for (const auto& r : reports) m.std += (r.*field - m.mean) * (r.*field - m.mean);
    m.std = std::sqrt(m.std / static_cast<double>(reports.size()));
    return m;
  };
  s.f1 = stat(&cls::MetricsReport::f1);
  s.auc = stat(&cls::MetricsReport::auc);
  s.accuracy = stat(&cls::MetricsReport::accuracy);
  s.precision = stat(&cls::MetricsReport::precision);
  s.recall = stat(&cls::MetricsReport::recall);
  s.macro_f1 = stat(&cls::MetricsReport::macro_f1);
  return s;
}

std::string summary_json(const SeedSummary& s) {
  json j;
  auto put = [&](const char* k, const MetricSummary& m) { j[k] = {{"mean", m.mean}, {"std", m.std}}; };
  put("precision", s.precision);
  put("recall", s.recall);
  put("f1", s.f1);
  put("auc", s.auc);
  put("accuracy", s.accuracy);
  put("macro_f1", s.macro_f1);
  json seeds = json::array();
  for (const auto& r : s.per_seed) seeds.push_back(r.seed);
  j["seeds"] = seeds;
  return j.dump(2) + "\n";
}

std::string ablation_json(const std::string& mode, const SeedSummary& baseline, const SeedSummary& ablated) {
  json j;
  j["mode"] = mode;
  auto row = [&](const char* k, const MetricSummary& b, const MetricSummary& a) {
    j[k] = {{"baseline", b.mean}, {"ablated", a.mean}, {"delta", a.mean - b.mean}};
  };
  row("f1", baseline.f1, ablated.f1);
  row("auc", baseline.auc, ablated.auc);
  row("accuracy", baseline.accuracy, ablated.accuracy);
  return j.dump(2) + "\n";
}

RunConfig ablated_config(const RunConfig& base, const std::string& mode) {
  RunConfig c = base;
  if (mode == "no-segmentation") {
    c.patch_source = "none";
  } else if (mode == "no-pretrain") {
    c.pretraining.mode = "none";
  } else if (mode == "conventional-crop") {
    c.pretraining.crop_mode = "conventional";
  } else {
    throw ConfigError("unknown ablation mode '" + mode + "'");
  }
  return c;
}

}  // namespace osteo::app
