#include "dinocell/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "dinocell/binary_io.hpp"
#include "dinocell/errors.hpp"

namespace dinocell {

std::size_t DatasetManifest::channel_index(const std::string& name) const {
  auto it = std::find(channels.begin(), channels.end(), name);
  if (it == channels.end()) throw ConfigError("dataset has no channel named '" + name + "'");
  return static_cast<std::size_t>(it - channels.begin());
}

std::size_t DatasetManifest::class_index(const std::string& name) const {
  auto it = std::find(classes.begin(), classes.end(), name);
  if (it == classes.end()) throw ConfigError("dataset has no class named '" + name + "'");
  return static_cast<std::size_t>(it - classes.begin());
}

LabelVector DatasetManifest::labels(std::size_t i, int min_grade) const {
  LabelVector out(classes.size(), 0);
  for (const auto& [name, grade] : records.at(i).grades) {
    if (grade >= min_grade) out[class_index(name)] = 1;
  }
  return out;
}

std::vector<LabelVector> DatasetManifest::all_labels(int min_grade) const {
  std::vector<LabelVector> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) out.push_back(labels(i, min_grade));
  return out;
}

void validate_manifest(const DatasetManifest& m) {
  if (m.channels.empty()) throw ConfigError("manifest lists no channels");
  if (m.classes.empty()) throw ConfigError("manifest lists no classes");
  std::set<std::string> seen(m.channels.begin(), m.channels.end());
  if (seen.size() != m.channels.size()) throw ConfigError("manifest channel names are not unique");
  std::set<std::string> classes(m.classes.begin(), m.classes.end());
  if (classes.size() != m.classes.size()) throw ConfigError("manifest class names are not unique");
  std::set<std::string> ids;
  for (const auto& r : m.records) {
    if (r.id.empty()) throw ConfigError("manifest record with empty id");
    if (!ids.insert(r.id).second) throw ConfigError("duplicate image id '" + r.id + "'");
    for (const auto& [name, grade] : r.grades) {
      if (!classes.count(name)) {
        throw ConfigError("record '" + r.id + "' uses unknown class '" + name + "'");
      }
      if (grade < 1 || grade > 3) {
        throw ConfigError("record '" + r.id + "' has grade " + std::to_string(grade) +
                          " for '" + name + "' (grades must be 1..3)");
      }
    }
  }
}

nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : m.records) {
    nlohmann::json grades = nlohmann::json::object();
    for (const auto& [name, grade] : r.grades) grades[name] = grade;
    records.push_back({{"id", r.id}, {"path", r.path}, {"grades", grades}});
  }
  nlohmann::json j{{"format", "dinocell-manifest"},
                   {"version", kManifestVersion},
                   {"name", m.name},
                   {"channels", m.channels},
                   {"classes", m.classes},
                   {"records", records}};
  if (!m.generator.is_null()) j["generator"] = m.generator;
  return j;
}

DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& root) {
  try {
    if (j.value("format", "") != "dinocell-manifest") {
      throw ConfigError("not a dinocell manifest (missing \"format\": \"dinocell-manifest\")");
    }
    if (j.at("version").get<int>() != kManifestVersion) {
      throw ConfigError("unsupported manifest version " + j.at("version").dump());
    }
    DatasetManifest m;
    m.name = j.at("name").get<std::string>();
    m.channels = j.at("channels").get<std::vector<std::string>>();
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.root = root;
    if (j.contains("generator")) m.generator = j.at("generator");
    for (const auto& r : j.at("records")) {
      ImageRecord rec;
      rec.id = r.at("id").get<std::string>();
      rec.path = r.at("path").get<std::string>();
      for (const auto& [name, grade] : r.at("grades").items()) rec.grades[name] = grade.get<int>();
      m.records.push_back(std::move(rec));
    }
    validate_manifest(m);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed manifest: ") + e.what());
  }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("manifest not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  auto m = manifest_from_json(j, path.parent_path());
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!std::filesystem::exists(m.image_path(i))) {
      throw IoError("manifest references missing image " + m.image_path(i).string());
    }
  }
  return m;
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  validate_manifest(manifest);
  io::write_text(path, manifest_to_json(manifest).dump(2) + "\n");
}

std::string dataset_hash(const DatasetManifest& manifest) {
  io::ByteWriter w;
  w.str(manifest_to_json(manifest).dump());
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    auto bytes = io::read_file(manifest.image_path(i));
    w.u64(bytes.size());
    w.bytes(bytes);
  }
  return io::sha256_hex(w.buffer());
}

HoldoutSplit holdout_split(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("holdout fraction must be in (0, 1)");
  const auto n_hold = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
  if (n < 2 || n_hold >= n) {
    throw ConfigError("dataset too small to split: " + std::to_string(n) + " images");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  HoldoutSplit split;
  split.holdout.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
  std::sort(split.holdout.begin(), split.holdout.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

}  // namespace dinocell
