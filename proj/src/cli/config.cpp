#include <nlohmann/json.hpp>

#include "osteo/cli/pipeline.hpp"

namespace osteo::app {

using json = nlohmann::ordered_json;

namespace {

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["patch_source"] = c.patch_source;
  j["raw_crop_size"] = c.raw_crop_size;
  j["data"] = {{"subjects", c.data.subjects},
               {"image_size", c.data.image_size},
               {"prevalence", c.data.prevalence},
               {"seed", c.data.seed}};
  const auto& s = c.segmentation;
  j["segmentation"] = {{"modules", s.modules},   {"samples", s.samples},       {"latent", s.latent},
                       {"lambda", s.lambda},     {"gamma0", s.gamma0},         {"epsilon", s.epsilon},
                       {"steps", s.steps},       {"batch", s.batch},           {"lr", s.lr},
                       {"sigma_init", s.sigma_init}, {"predict_samples", s.predict_samples}};
  const auto& a = c.augmentation;
  j["augmentation"] = {{"rotation_deg", a.rotation_deg},     {"translate_frac", a.translate_frac},
                       {"flip_h_prob", a.flip_h_prob},       {"flip_v_prob", a.flip_v_prob},
                       {"brightness_min", a.brightness_min}, {"brightness_max", a.brightness_max},
                       {"contrast_min", a.contrast_min},     {"contrast_max", a.contrast_max}};
  const auto& p = c.pretraining;
  j["pretraining"] = {{"mode", p.mode},
                      {"crop_mode", p.crop_mode},
                      {"temperature", p.temperature},
                      {"batch", p.batch},
                      {"epochs", p.epochs},
                      {"base_lr", p.base_lr},
                      {"min_lr", p.min_lr},
                      {"trust_coefficient", p.trust_coefficient},
                      {"canvas", p.canvas},
                      {"global_count", p.views.global_count},
                      {"global_size", p.views.global_size},
                      {"local_count", p.views.local_count},
                      {"local_size", p.views.local_size},
                      {"min_nonzero", p.views.min_nonzero},
                      {"max_attempts", p.views.max_attempts}};
  const auto& f = c.finetuning;
  j["finetuning"] = {{"epochs", f.epochs},
                     {"lr", f.lr},
                     {"batch", f.batch},
                     {"canvas", f.canvas},
                     {"supervised_epochs", f.supervised_epochs},
                     {"supervised_lr", f.supervised_lr},
                     {"supervised_batch", f.supervised_batch}};
  return j;
}

// Overlay `in` onto `base`, insisting that every key already exists with a
// compatible type.
void overlay(json& base, const json& in, const std::string& path) {
  if (!in.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + ": expected an object");
  for (auto it = in.begin(); it != in.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    const json& v = it.value();
    if (slot.is_object()) {
      overlay(slot, v, key);
    } else if (slot.is_string()) {
      if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
      slot = v;
    } else if (slot.is_number_float()) {
      if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
      slot = v.get<double>();
    } else if (slot.is_number_integer()) {
      if (!v.is_number_integer()) throw ConfigError("config key '" + key + "' must be an integer");
      if (slot.is_number_unsigned() && v.get<long long>() < 0) {
        throw ConfigError("config key '" + key + "' must be nonnegative");
      }
      slot = v;
    } else {
      throw ConfigError("config key '" + key + "' has an unsupported type");
    }
  }
}

template <class T>
void get(const json& j, const char* key, T& out) {
  out = j.at(key).get<T>();
}

}  // namespace

void RunConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("config key '" + key + "': " + why); };
  if (data.subjects < 10) fail("data.subjects", "need at least 10 subjects");
  if (data.image_size < 48 || data.image_size % 8 != 0) fail("data.image_size", "must be a multiple of 8, >= 48");
  if (!(data.prevalence > 0.0 && data.prevalence < 1.0)) fail("data.prevalence", "must lie in (0,1)");
  if (segmentation.modules == 0) fail("segmentation.modules", "must be positive");
  if (segmentation.samples == 0) fail("segmentation.samples", "must be positive");
  if (segmentation.latent == 0) fail("segmentation.latent", "must be positive");
  if (segmentation.lambda < 0.0) fail("segmentation.lambda", "must be nonnegative");
  if (!(segmentation.gamma0 > 0.0 && segmentation.gamma0 <= 1.0)) fail("segmentation.gamma0", "must lie in (0,1]");
  if (!(segmentation.epsilon > 0.0)) fail("segmentation.epsilon", "must be positive");
  if (segmentation.batch == 0) fail("segmentation.batch", "must be positive");
  if (!(segmentation.sigma_init > 0.0)) fail("segmentation.sigma_init", "must be positive");
  if (segmentation.predict_samples == 0) fail("segmentation.predict_samples", "must be positive");
  try {
    augmentation.validate();
  } catch (const std::exception& e) {
    fail("augmentation", e.what());
  }
  if (pretraining.mode != "contrastive" && pretraining.mode != "none") {
    fail("pretraining.mode", "expected 'contrastive' or 'none'");
  }
  if (pretraining.crop_mode != "constrained" && pretraining.crop_mode != "conventional") {
    fail("pretraining.crop_mode", "expected 'constrained' or 'conventional'");
  }
  if (!(pretraining.temperature > 0.0)) fail("pretraining.temperature", "must be positive");
  if (pretraining.batch < 2) fail("pretraining.batch", "must be at least 2");
  if (pretraining.views.global_size > pretraining.canvas) fail("pretraining.global_size", "exceeds the canvas");
  if (pretraining.views.local_size > pretraining.views.global_size) fail("pretraining.local_size", "exceeds global_size");
  if (pretraining.views.global_size % 8 != 0) fail("pretraining.global_size", "must be a multiple of 8");
  if (pretraining.views.min_nonzero < 0.0 || pretraining.views.min_nonzero > 1.0) {
    fail("pretraining.min_nonzero", "must lie in [0,1]");
  }
  if (pretraining.views.max_attempts < 1) fail("pretraining.max_attempts", "must be positive");
  if (finetuning.batch == 0 || finetuning.supervised_batch == 0) fail("finetuning.batch", "must be positive");
  if (finetuning.canvas % 8 != 0) fail("finetuning.canvas", "must be a multiple of 8");
  if (patch_source != "segmentation" && patch_source != "none") fail("patch_source", "expected 'segmentation' or 'none'");
  if (raw_crop_size == 0 || raw_crop_size > data.image_size) fail("raw_crop_size", "must fit in the image");
}

std::string config_json(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

RunConfig parse_config(const std::string& text) {
  json in;
  try {
    in = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  json merged = to_json(RunConfig{});
  overlay(merged, in, "");

  RunConfig c;
  get(merged, "seed", c.seed);
  get(merged, "patch_source", c.patch_source);
  get(merged, "raw_crop_size", c.raw_crop_size);
  const json& d = merged["data"];
  get(d, "subjects", c.data.subjects);
  get(d, "image_size", c.data.image_size);
  get(d, "prevalence", c.data.prevalence);
  get(d, "seed", c.data.seed);
  const json& s = merged["segmentation"];
  auto& sg = c.segmentation;
  get(s, "modules", sg.modules);
  get(s, "samples", sg.samples);
  get(s, "latent", sg.latent);
  get(s, "lambda", sg.lambda);
  get(s, "gamma0", sg.gamma0);
  get(s, "epsilon", sg.epsilon);
  get(s, "steps", sg.steps);
  get(s, "batch", sg.batch);
  get(s, "lr", sg.lr);
  get(s, "sigma_init", sg.sigma_init);
  get(s, "predict_samples", sg.predict_samples);
  const json& a = merged["augmentation"];
  auto& ag = c.augmentation;
  get(a, "rotation_deg", ag.rotation_deg);
  get(a, "translate_frac", ag.translate_frac);
  get(a, "flip_h_prob", ag.flip_h_prob);
  get(a, "flip_v_prob", ag.flip_v_prob);
  get(a, "brightness_min", ag.brightness_min);
  get(a, "brightness_max", ag.brightness_max);
  get(a, "contrast_min", ag.contrast_min);
  get(a, "contrast_max", ag.contrast_max);
  const json& p = merged["pretraining"];
  auto& pt = c.pretraining;
  get(p, "mode", pt.mode);
  get(p, "crop_mode", pt.crop_mode);
  get(p, "temperature", pt.temperature);
  get(p, "batch", pt.batch);
  get(p, "epochs", pt.epochs);
  get(p, "base_lr", pt.base_lr);
  get(p, "min_lr", pt.min_lr);
  get(p, "trust_coefficient", pt.trust_coefficient);
  get(p, "canvas", pt.canvas);
  get(p, "global_count", pt.views.global_count);
  get(p, "global_size", pt.views.global_size);
  get(p, "local_count", pt.views.local_count);
  get(p, "local_size", pt.views.local_size);
  get(p, "min_nonzero", pt.views.min_nonzero);
  get(p, "max_attempts", pt.views.max_attempts);
  const json& f = merged["finetuning"];
  auto& ft = c.finetuning;
  get(f, "epochs", ft.epochs);
  get(f, "lr", ft.lr);
  get(f, "batch", ft.batch);
  get(f, "canvas", ft.canvas);
  get(f, "supervised_epochs", ft.supervised_epochs);
  get(f, "supervised_lr", ft.supervised_lr);
  get(f, "supervised_batch", ft.supervised_batch);
  c.validate();
  return c;
}

}  // namespace osteo::app
