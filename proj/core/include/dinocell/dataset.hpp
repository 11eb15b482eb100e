#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dinocell/image.hpp"

namespace dinocell {

using LabelVector = std::vector<std::uint8_t>;

struct ImageRecord {
  std::string id;
  // Relative to the manifest's directory.
  std::string path;
  // class name -> grade in {1, 2, 3}
  std::map<std::string, int> grades;
};

struct DatasetManifest {
  std::string name;
  std::vector<std::string> channels;
  std::vector<std::string> classes;
  std::vector<ImageRecord> records;
  // Directory that record paths are resolved against.
  std::filesystem::path root;
  nlohmann::json generator;  // provenance of synthetic sets; null otherwise

  std::size_t size() const { return records.size(); }
  std::filesystem::path image_path(std::size_t i) const { return root / records[i].path; }
  std::size_t channel_index(const std::string& name) const;
  std::size_t class_index(const std::string& name) const;

  // Multi-hot labels; a class is positive when its grade >= min_grade.
  LabelVector labels(std::size_t i, int min_grade = 1) const;
  std::vector<LabelVector> all_labels(int min_grade = 1) const;
};

inline constexpr int kManifestVersion = 1;

// Throws ConfigError describing the first violated invariant.
void validate_manifest(const DatasetManifest& manifest);

nlohmann::json manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& root);

// Parses, validates, and checks that every referenced image exists.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

// SHA-256 over the canonical manifest JSON and every image file's bytes.
std::string dataset_hash(const DatasetManifest& manifest);

struct HoldoutSplit {
  std::vector<std::size_t> train;    // ascending
  std::vector<std::size_t> holdout;  // ascending
};

// Seeded random split holding out round(fraction * n) indices (at least one).
// Throws ConfigError when either side would be empty.
HoldoutSplit holdout_split(std::size_t n, double fraction, std::uint64_t seed);

}  // namespace dinocell
