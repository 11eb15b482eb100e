#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dinocell/dataset.hpp"
#include "dinocell/image.hpp"

namespace dinocell {

// Localization pattern families, in class order. Names follow a
// 17-compartment ontology; a dataset with n classes uses the first n.
const std::vector<std::string>& localization_class_names();

struct SynthSpec {
  std::size_t n_images = 200;
  std::size_t height = 96;
  std::size_t width = 96;
  // 2 -> [protein, nucleus]; 4 -> [protein, microtubules, nucleus, er]
  std::size_t channels = 2;
  std::size_t classes = 17;
  std::uint64_t seed = 0;
  // Chance that an image carries a second localization.
  double multi_label_probability = 0.3;
  double noise = 0.02;
  std::string name = "synthetic";
};

void validate_synth_spec(const SynthSpec& spec);

struct SyntheticDataset {
  DatasetManifest manifest;
  std::vector<RawImage> images;  // parallel to manifest.records
};

// Image i's primary class is i mod classes, so every class appears in at
// least floor(n / classes) images. Records point at images/<id>.mci.
SyntheticDataset generate_synthetic_dataset(const SynthSpec& spec);

// Writes manifest.json and images/ under `dir` (which must not exist yet
// unless `overwrite`); on failure nothing is left behind.
DatasetManifest write_dataset(const std::filesystem::path& dir, const SyntheticDataset& dataset,
                              bool overwrite = false);

// Pearson correlation between two equally sized planes.
double pixel_correlation(std::span<const float> a, std::span<const float> b);

}  // namespace dinocell
