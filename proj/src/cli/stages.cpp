#include <algorithm>
#include <cstdio>
#include <random>
#include <unordered_map>

#include "osteo/cli/pipeline.hpp"
#include "osteo/diffcore/errors.hpp"

namespace osteo::app {

namespace {

void emit(const LogFn& log, const std::string& line) {
  if (log) log(line);
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

}  // namespace

std::uint64_t subject_stream(const std::string& subject_id) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char ch : subject_id) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

Cohort make_cohort(const RunConfig& cfg) {
  dataio::HandSynthConfig hs;
  hs.prevalence = cfg.data.prevalence;
  Cohort c;
  c.hands = dataio::synth_hand(cfg.data.subjects, cfg.data.image_size, cfg.data.seed, hs);
  std::vector<std::string> ids;
  for (const auto& h : c.hands) ids.push_back(h.subject_id);
  c.split = dataio::split_subjects(ids, cfg.data.seed);
  return c;
}

mix::NetConfig seg_net_config(const RunConfig& cfg) {
  mix::NetConfig n;
  n.classes = dataio::kHandClasses;
  n.modules = cfg.segmentation.modules;
  n.samples = cfg.segmentation.samples;
  n.latent = cfg.segmentation.latent;
  n.sigma_init = cfg.segmentation.sigma_init;
  return n;
}

mix::SegTrainConfig seg_train_config(const RunConfig& cfg) {
  mix::SegTrainConfig t;
  t.steps = cfg.segmentation.steps;
  t.batch = cfg.segmentation.batch;
  t.lr = cfg.segmentation.lr;
  t.gamma0 = cfg.segmentation.gamma0;
  t.lambda = cfg.segmentation.lambda;
  t.epsilon = cfg.segmentation.epsilon;
  t.seed = cfg.seed;
  return t;
}

pre::PretrainConfig pretrain_config(const RunConfig& cfg) {
  pre::PretrainConfig p;
  p.batch = cfg.pretraining.batch;
  p.epochs = cfg.pretraining.epochs;
  p.temperature = cfg.pretraining.temperature;
  p.base_lr = cfg.pretraining.base_lr;
  p.min_lr = cfg.pretraining.min_lr;
  p.trust_coefficient = cfg.pretraining.trust_coefficient;
  p.canvas = cfg.pretraining.canvas;
  p.augment = cfg.augmentation;
  p.views = cfg.pretraining.views;
  if (cfg.pretraining.crop_mode == "conventional") p.views.min_nonzero = 0.0;
  p.seed = cfg.seed;
  return p;
}

mix::MixtureNet train_segmenter(const RunConfig& cfg, const Cohort& cohort, const LogFn& log,
                                const std::function<void(const mix::SegLoss&)>& on_loss) {
  std::unordered_map<std::string, const dataio::HandSample*> by_id;
  for (const auto& h : cohort.hands) by_id[h.subject_id] = &h;
  std::vector<dataio::AnnotatedImage> data;
  for (const auto& id : cohort.split.train) data.push_back(dataio::to_annotated(dataio::to_record(*by_id.at(id))));

  mix::MixtureNet net(seg_net_config(cfg), cfg.seed);
  const std::size_t every = std::max<std::size_t>(1, cfg.segmentation.steps / 10);
  mix::train_segmentation(net, data, seg_train_config(cfg), [&](const mix::SegStepLog& s, const mix::SegLoss& loss) {
    if (on_loss) on_loss(loss);
    if (s.step % every == 0 || s.step + 1 == cfg.segmentation.steps) {
      emit(log, fmt("segment step %.0f gamma %.3f loss %.5f", static_cast<double>(s.step), s.gamma, s.loss));
    }
  });
  return net;
}

std::vector<dataio::LabelMap> predict_masks(const RunConfig& cfg, const mix::MixtureNet& net,
                                            const std::vector<dataio::HandSample>& hands) {
  std::vector<dataio::LabelMap> out(hands.size());
  const long n = static_cast<long>(hands.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
  for (long i = 0; i < n; ++i) {
    Rng rng = make_stream(cfg.seed ^ 0x3a5c, subject_stream(hands[i].subject_id));
    out[i] = mix::predict_mask(net, hands[i].image, cfg.segmentation.predict_samples, rng).mask;
  }
  return out;
}

std::vector<cls::SubjectRecord> subjects_from_masks(const std::vector<dataio::HandSample>& hands,
                                                    const std::vector<dataio::LabelMap>& masks) {
  if (masks.size() != hands.size()) throw DimensionError("one mask per hand");
  std::vector<cls::SubjectRecord> out;
  for (std::size_t i = 0; i < hands.size(); ++i) {
    auto patches = dataio::extract_patches(hands[i].image, masks[i], hands[i].subject_id);
    // A subject whose bones were all missed keeps one whole-image patch so
    // it is still scored.
    if (patches.empty()) {
      dataio::BonePatch whole;
      whole.crop = hands[i].image;
      whole.bbox = {0, 0, hands[i].image.height, hands[i].image.width};
      whole.subject_id = hands[i].subject_id;
      patches.push_back(std::move(whole));
    }
    out.push_back(cls::make_subject(hands[i].subject_id, std::move(patches), hands[i].t_score));
  }
  return out;
}

std::vector<cls::SubjectRecord> subjects_from_raw_crops(const RunConfig& cfg,
                                                        const std::vector<dataio::HandSample>& hands) {
  std::vector<cls::SubjectRecord> out;
  const std::size_t side = cfg.raw_crop_size;
  for (std::size_t i = 0; i < hands.size(); ++i) {
    const auto& im = hands[i].image;
    if (side > im.height || side > im.width) throw ContractError("raw crop larger than the image");
    Rng rng = make_stream(cfg.seed ^ 0x7a3, subject_stream(hands[i].subject_id));
    std::uniform_int_distribution<std::size_t> row_d(0, im.height - side), col_d(0, im.width - side);
    std::vector<dataio::BonePatch> patches;
    for (dataio::Segment seg : dataio::kAllSegments) {
      dataio::BonePatch p;
      p.segment = seg;  // slot only, no anatomy behind it
      p.bbox = {row_d(rng), col_d(rng), side, side};
      p.subject_id = hands[i].subject_id;
      p.crop = dataio::Image(side, side);
      for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c) p.crop.at(r, c) = im.at(p.bbox.row + r, p.bbox.col + c);
      patches.push_back(std::move(p));
    }
    out.push_back(cls::make_subject(hands[i].subject_id, std::move(patches), hands[i].t_score));
  }
  return out;
}

SplitSubjects split_records(const std::vector<cls::SubjectRecord>& subjects, const dataio::Split& split) {
  std::unordered_map<std::string, const cls::SubjectRecord*> by_id;
  for (const auto& s : subjects) by_id[s.subject_id] = &s;
  auto gather = [&](const std::vector<std::string>& ids) {
    std::vector<cls::SubjectRecord> out;
    for (const auto& id : ids) {
      const auto it = by_id.find(id);
      if (it == by_id.end()) throw ContractError("split names unknown subject " + id);
      out.push_back(*it->second);
    }
    return out;
  };
  return {gather(split.train), gather(split.val), gather(split.test)};
}

pre::Encoder pretrain_encoder(const RunConfig& cfg, const std::vector<cls::SubjectRecord>& train, const LogFn& log) {
  pre::Encoder enc({}, cfg.seed);
  if (cfg.pretraining.mode == "none") return enc;
  std::vector<dataio::BonePatch> patches;
  for (const auto& s : train) patches.insert(patches.end(), s.patches.begin(), s.patches.end());
  const pre::PretrainConfig pc = pretrain_config(cfg);
  const auto canvases = pre::patch_canvases(patches, pc.canvas);
  crop::CropStats stats;
  pre::pretrain(enc, canvases, pc, &stats, [&](std::size_t e, double loss) {
    emit(log, fmt("pretrain epoch %.0f loss %.6f", static_cast<double>(e), loss));
  });
  emit(log, fmt("pretrain crops %.0f fallbacks %.0f", static_cast<double>(stats.crops),
                static_cast<double>(stats.fallbacks)));
  return enc;
}

cls::FinetuneResult train_classifier(const RunConfig& cfg, pre::Encoder& encoder, const SplitSubjects& subjects,
                                     const LogFn& log) {
  cls::FinetuneConfig fc = cfg.finetuning;
  fc.seed = cfg.seed;
  cls::FinetuneResult fr = cfg.pretraining.mode == "none"
                               ? cls::train_supervised(encoder, subjects.train, subjects.val, fc)
                               : cls::finetune(encoder, subjects.train, subjects.val, fc);
  emit(log, fmt("classifier best epoch %.0f val macro-F1 %.4f", static_cast<double>(fr.best_epoch),
                fr.val_macro_f1[fr.best_epoch]));
  return fr;
}

ClassifierOutcome evaluate_classifier(const RunConfig& cfg, const pre::Encoder& encoder, const cls::LinearHead& head,
                                      const std::vector<cls::SubjectRecord>& test) {
  ClassifierOutcome out;
  out.predictions = cls::predict_subjects(encoder, head, test, cfg.finetuning.canvas);
  out.metrics = cls::evaluate(out.predictions, cfg.seed);
  return out;
}

ClassifierOutcome classify(const RunConfig& cfg, pre::Encoder& encoder, const SplitSubjects& subjects,
                           cls::LinearHead* head_out, const LogFn& log) {
  const cls::FinetuneResult fr = train_classifier(cfg, encoder, subjects, log);
  if (head_out) *head_out = fr.head;
  return evaluate_classifier(cfg, encoder, fr.head, subjects.test);
}

}  // namespace osteo::app
