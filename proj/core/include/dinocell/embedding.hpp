#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dinocell/adapters.hpp"
#include "dinocell/dataset.hpp"
#include "dinocell/vit.hpp"

namespace dinocell {

// How source channels reach the backbone.
struct AdapterSpec {
  enum class Kind { mapping, replication };
  Kind kind = Kind::mapping;
  ChannelMapSpec map;               // mapping only
  std::size_t broadcast_width = 0;  // replication only; 0 = backbone in_channels

  static AdapterSpec mapping(ChannelMapSpec spec) { return {Kind::mapping, std::move(spec), 0}; }
  static AdapterSpec replication(std::size_t width = 0) { return {Kind::replication, {}, width}; }
  std::string name() const { return kind == Kind::mapping ? "mapping" : "replication"; }
};

nlohmann::json to_json(const AdapterSpec& spec);
AdapterSpec adapter_from_json(const nlohmann::json& j);

struct EmbeddingMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;  // row-major
  std::vector<std::string> ids;
  // backbone_sha256, adapter, dataset_hash, dataset_name, ids, ...
  nlohmann::json provenance = nlohmann::json::object();

  std::span<const float> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
  // Copy of the selected rows, provenance shared.
  EmbeddingMatrix subset(std::span<const std::size_t> indices) const;
};

struct ExtractOptions {
  std::size_t batch_size = 32;  // throughput only
  // Side the whole image is resized to before embedding; 0 keeps the native
  // size, default is the backbone's image_size.
  std::optional<std::size_t> resize_px;
  std::vector<std::size_t> indices;  // empty = every manifest image, in order
};

// Frozen teacher backbone over the dataset, one row per image.
EmbeddingMatrix extract_embeddings(const DatasetManifest& dataset, const ViTParams& backbone,
                                   const AdapterSpec& adapter, const ExtractOptions& options = {});
// Same over already loaded (normalized) images; ids are "0", "1", ... unless given.
EmbeddingMatrix extract_embeddings(std::span<const MultiChannelImage> images,
                                   const ViTParams& backbone, const AdapterSpec& adapter,
                                   const ExtractOptions& options = {},
                                   std::vector<std::string> ids = {});

// SHA-256 of the backbone's VITW encoding (equals the checkpoint file hash).
std::string backbone_sha256(const ViTParams& backbone);

inline constexpr std::uint32_t kEmbeddingFormatVersion = 1;
std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& m);
EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> bytes);
void save_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& m);
EmbeddingMatrix load_embeddings(const std::filesystem::path& path);

}  // namespace dinocell
