#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dinocell/dino.hpp"
#include "dinocell/head.hpp"
#include "dinocell/synth.hpp"

namespace dinocell::cli {

// Everything a run needs, loaded from one JSON file and then patched by
// command-line flags. Unknown keys are rejected so typos fail loudly.
struct RunConfig {
  // dataset
  std::filesystem::path manifest;
  int min_grade = 1;

  SynthSpec synth;

  // shared by pretrain, train-head and crossval so the held-out images are
  // never seen by any stage
  std::uint64_t split_seed = 0;
  double holdout_fraction = 0.1;

  DinoConfig dino;
  // "source:slot" entries; empty means identity (channel counts must match)
  std::vector<std::string> pretrain_input_map;

  // "random" or a path to a DINO checkpoint / VITW file
  std::string backbone = "random";
  std::string weights_label;  // empty: derived from the backbone source
  std::string model_label = "vit";
  std::string adapter = "mapping";
  std::vector<std::string> adapter_map;  // mapping only; empty = identity
  std::size_t broadcast_width = 0;
  std::optional<std::size_t> resize_px;
  std::size_t embed_batch = 32;

  HeadConfig head;
  std::size_t folds = 5;
  std::uint64_t fold_seed = 0;
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);

// Static checks that need no files.
void validate(const RunConfig& config);

}  // namespace dinocell::cli
