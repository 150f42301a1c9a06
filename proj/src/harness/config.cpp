#include "cki/config.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

using nlohmann::json;

namespace cki {

void RunConfig::validate() const {
  if (synth.has_value()) {
    synth->validate();
  } else {
    if (source_scene.empty() || target_scene.empty())
      throw ConfigError("config: need source_scene and target_scene headers or a synth spec");
  }
  if (shots_per_class < 1) throw ConfigError("config: shots_per_class must be >= 1");
  if (epochs < warmup_epochs || warmup_epochs < 0)
    throw ConfigError("config: need epochs >= warmup_epochs >= 0");
  if (batch_size < 2) throw ConfigError("config: batch_size must be >= 2");
  if (lr <= 0.0 || weight_decay < 0.0 || lr_step_gamma <= 0.0)
    throw ConfigError("config: bad optimizer settings");
  if (window < 2 || window % 2 != 0) throw ConfigError("config: window must be even");
  if (eval_batch < 1) throw ConfigError("config: eval_batch must be >= 1");
  loss_weights.validate();
}

namespace {

SynthSpec synth_from_json(const json& j) {
  SynthSpec s;
  s.source_bands = j.value("source_bands", s.source_bands);
  s.target_bands = j.value("target_bands", s.target_bands);
  s.shared_classes = j.value("shared_classes", s.shared_classes);
  s.source_private_classes = j.value("source_private_classes", s.source_private_classes);
  s.target_private_classes = j.value("target_private_classes", s.target_private_classes);
  s.pixels_per_class = j.value("pixels_per_class", s.pixels_per_class);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.seed = j.value("seed", s.seed);
  return s;
}

json synth_to_json(const SynthSpec& s) {
  return json{{"source_bands", s.source_bands},
              {"target_bands", s.target_bands},
              {"shared_classes", s.shared_classes},
              {"source_private_classes", s.source_private_classes},
              {"target_private_classes", s.target_private_classes},
              {"pixels_per_class", s.pixels_per_class},
              {"noise_sigma", s.noise_sigma},
              {"seed", s.seed}};
}

AblationFlags flags_from_json(const json& arr) {
  AblationFlags f;
  for (const auto& item : arr) {
    const std::string s = item.get<std::string>();
    if (s == "ASC")
      f.asc = true;
    else if (s == "CKSP")
      f.cksp = true;
    else if (s == "CE")
      f.ce = true;
    else if (s == "DI")
      f.di = true;
    else
      throw ConfigError("config: unknown ablation flag '" + s + "'");
  }
  return f;
}

json flags_to_json(const AblationFlags& f) {
  json arr = json::array();
  if (f.asc) arr.push_back("ASC");
  if (f.cksp) arr.push_back("CKSP");
  if (f.ce) arr.push_back("CE");
  if (f.di) arr.push_back("DI");
  return arr;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  RunConfig c;
  try {
    c.source_scene = j.value("source_scene", "");
    c.target_scene = j.value("target_scene", "");
    if (j.contains("synth")) c.synth = synth_from_json(j.at("synth"));
    c.source_manifest = j.value("source_manifest", "");
    c.target_manifest = j.value("target_manifest", "");
    c.shots_per_class = j.value("shots_per_class", c.shots_per_class);
    c.epochs = j.value("epochs", c.epochs);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lr_step_gamma = j.value("lr_step_gamma", c.lr_step_gamma);
    if (j.contains("loss_weights")) {
      const json& w = j.at("loss_weights");
      c.loss_weights.alpha = w.value("alpha", 1.0);
      c.loss_weights.beta = w.value("beta", 1.0);
      c.loss_weights.gamma = w.value("gamma", 1.0);
      c.loss_weights.tau = w.value("tau", 1.0);
    }
    if (j.contains("patch")) {
      c.patch.p_h = j.at("patch").value("spatial", c.patch.p_h);
      c.patch.p_w = c.patch.p_h;
      c.patch.p_c = j.at("patch").value("spectral", c.patch.p_c);
    }
    c.patch.embed_dim = j.value("embed_dim", c.patch.embed_dim);
    c.patch.depth = j.value("depth", c.patch.depth);
    c.patch.heads = j.value("heads", c.patch.heads);
    if (j.contains("ablation")) c.flags = flags_from_json(j.at("ablation"));
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", "");
    c.window = j.value("window", c.window);
    c.common_channels = j.value("common_channels", c.common_channels);
    c.normalize = j.value("normalize", c.normalize);
    const std::string mode = j.value("mode", "cki");
    if (mode == "cki")
      c.mode = RunMode::cki;
    else if (mode == "target_only")
      c.mode = RunMode::target_only;
    else
      throw ConfigError("config: unknown mode '" + mode + "'");
    c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
    c.eval_batch = j.value("eval_batch", c.eval_batch);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string run_config_to_json(const RunConfig& c) {
  json j;
  if (!c.source_scene.empty()) j["source_scene"] = c.source_scene;
  if (!c.target_scene.empty()) j["target_scene"] = c.target_scene;
  if (c.synth.has_value()) j["synth"] = synth_to_json(*c.synth);
  if (!c.source_manifest.empty()) j["source_manifest"] = c.source_manifest;
  if (!c.target_manifest.empty()) j["target_manifest"] = c.target_manifest;
  j["shots_per_class"] = c.shots_per_class;
  j["epochs"] = c.epochs;
  j["warmup_epochs"] = c.warmup_epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["lr_step_gamma"] = c.lr_step_gamma;
  j["loss_weights"] = {{"alpha", c.loss_weights.alpha},
                       {"beta", c.loss_weights.beta},
                       {"gamma", c.loss_weights.gamma},
                       {"tau", c.loss_weights.tau}};
  j["patch"] = {{"spatial", c.patch.p_h}, {"spectral", c.patch.p_c}};
  j["embed_dim"] = c.patch.embed_dim;
  j["depth"] = c.patch.depth;
  j["heads"] = c.patch.heads;
  j["ablation"] = flags_to_json(c.flags);
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["window"] = c.window;
  j["common_channels"] = c.common_channels;
  j["normalize"] = c.normalize;
  j["mode"] = c.mode == RunMode::cki ? "cki" : "target_only";
  j["steps_per_epoch"] = c.steps_per_epoch;
  j["eval_batch"] = c.eval_batch;
  return j.dump(2);
}

}  // namespace cki
