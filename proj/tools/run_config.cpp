#include "run_config.hpp"

#include <set>

#include "dinocell/binary_io.hpp"
#include "dinocell/errors.hpp"

namespace dinocell::cli {

namespace {

using json = nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

json synth_to_json(const SynthSpec& s) {
  return {{"n_images", s.n_images}, {"height", s.height},   {"width", s.width},
          {"channels", s.channels}, {"classes", s.classes}, {"seed", s.seed},
          {"multi_label_probability", s.multi_label_probability},
          {"noise", s.noise},       {"name", s.name}};
}

// Allowed keys are whatever the serializer of a default object emits.
void reject_unknown_like(const json& j, const json& reference, const std::string& where) {
  std::set<std::string> keys;
  for (const auto& [key, value] : reference.items()) keys.insert(key);
  reject_unknown(j, keys, where);
}

SynthSpec synth_from_json(const json& j) {
  reject_unknown(j, {"n_images", "height", "width", "channels", "classes", "seed",
                     "multi_label_probability", "noise", "name"}, "synth");
  SynthSpec s;
  s.n_images = j.value("n_images", s.n_images);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.channels = j.value("channels", s.channels);
  s.classes = j.value("classes", s.classes);
  s.seed = j.value("seed", s.seed);
  s.multi_label_probability = j.value("multi_label_probability", s.multi_label_probability);
  s.noise = j.value("noise", s.noise);
  s.name = j.value("name", s.name);
  return s;
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  try {
    reject_unknown(j, {"dataset", "synth", "split", "dino", "pretrain", "embed", "head", "crossval"},
                   "run config");
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      reject_unknown(d, {"manifest", "min_grade"}, "dataset");
      c.manifest = d.value("manifest", std::string{});
      c.min_grade = d.value("min_grade", c.min_grade);
    }
    if (j.contains("synth")) c.synth = synth_from_json(j.at("synth"));
    if (j.contains("split")) {
      const auto& s = j.at("split");
      reject_unknown(s, {"seed", "holdout_fraction"}, "split");
      c.split_seed = s.value("seed", c.split_seed);
      c.holdout_fraction = s.value("holdout_fraction", c.holdout_fraction);
    }
    if (j.contains("dino")) {
      const auto& d = j.at("dino");
      reject_unknown_like(d, to_json(DinoConfig{}), "dino");
      if (d.contains("backbone")) reject_unknown_like(d.at("backbone"), to_json(ViTConfig{}), "dino.backbone");
      c.dino = dino_config_from_json(d);
    }
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      reject_unknown(p, {"input_map"}, "pretrain");
      c.pretrain_input_map = p.value("input_map", c.pretrain_input_map);
    }
    if (j.contains("embed")) {
      const auto& e = j.at("embed");
      reject_unknown(e, {"backbone", "weights_label", "model", "adapter", "map", "broadcast_width",
                         "resize_px", "batch_size"}, "embed");
      c.backbone = e.value("backbone", c.backbone);
      c.weights_label = e.value("weights_label", c.weights_label);
      c.model_label = e.value("model", c.model_label);
      c.adapter = e.value("adapter", c.adapter);
      c.adapter_map = e.value("map", c.adapter_map);
      c.broadcast_width = e.value("broadcast_width", c.broadcast_width);
      if (e.contains("resize_px") && !e.at("resize_px").is_null()) c.resize_px = e.at("resize_px").get<std::size_t>();
      c.embed_batch = e.value("batch_size", c.embed_batch);
    }
    if (j.contains("head")) {
      reject_unknown_like(j.at("head"), to_json(HeadConfig{}), "head");
      c.head = head_config_from_json(j.at("head"));
    }
    if (j.contains("crossval")) {
      const auto& x = j.at("crossval");
      reject_unknown(x, {"folds", "seed"}, "crossval");
      c.folds = x.value("folds", c.folds);
      c.fold_seed = x.value("seed", c.fold_seed);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return c;
}

json to_json(const RunConfig& c) {
  return {{"dataset", {{"manifest", c.manifest.string()}, {"min_grade", c.min_grade}}},
          {"synth", synth_to_json(c.synth)},
          {"split", {{"seed", c.split_seed}, {"holdout_fraction", c.holdout_fraction}}},
          {"dino", to_json(c.dino)},
          {"pretrain", {{"input_map", c.pretrain_input_map}}},
          {"embed",
           {{"backbone", c.backbone},
            {"weights_label", c.weights_label},
            {"model", c.model_label},
            {"adapter", c.adapter},
            {"map", c.adapter_map},
            {"broadcast_width", c.broadcast_width},
            {"resize_px", c.resize_px ? json(*c.resize_px) : json(nullptr)},
            {"batch_size", c.embed_batch}}},
          {"head", to_json(c.head)},
          {"crossval", {{"folds", c.folds}, {"seed", c.fold_seed}}}};
}

RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void validate(const RunConfig& c) {
  validate(c.dino);
  validate(c.head);
  if (c.min_grade < 1 || c.min_grade > 3) throw ConfigError("dataset.min_grade must be 1, 2 or 3");
  if (!(c.holdout_fraction > 0.0 && c.holdout_fraction < 1.0)) {
    throw ConfigError("split.holdout_fraction must be in (0, 1)");
  }
  if (c.adapter != "mapping" && c.adapter != "replication") {
    throw ConfigError("embed.adapter must be 'mapping' or 'replication', got '" + c.adapter + "'");
  }
  if (c.embed_batch == 0) throw ConfigError("embed.batch_size must be positive");
  if (c.folds < 2) throw ConfigError("crossval.folds must be at least 2");
}

}  // namespace dinocell::cli
