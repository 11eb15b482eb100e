#include "dinocell/embedding.hpp"

#include <algorithm>

#include "dinocell/binary_io.hpp"
#include "dinocell/errors.hpp"

namespace dinocell {

namespace {

MultiChannelImage prepare(const MultiChannelImage& img, const AdapterSpec& adapter,
                          std::size_t resize_px) {
  MultiChannelImage out = adapter.kind == AdapterSpec::Kind::mapping ? map_channels(img, adapter.map) : img;
  if (resize_px != 0 && (out.height != resize_px || out.width != resize_px)) {
    out = resize_crop(out, 0, 0, static_cast<double>(out.height), static_cast<double>(out.width),
                      resize_px, resize_px);
  }
  return out;
}

}  // namespace

nlohmann::json to_json(const AdapterSpec& spec) {
  nlohmann::json j{{"kind", spec.name()}};
  if (spec.kind == AdapterSpec::Kind::mapping) {
    j["map"] = to_json(spec.map);
  } else {
    j["broadcast_width"] = spec.broadcast_width;
  }
  return j;
}

AdapterSpec adapter_from_json(const nlohmann::json& j) {
  try {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "mapping") return AdapterSpec::mapping(channel_map_from_json(j.at("map")));
    if (kind == "replication") return AdapterSpec::replication(j.value("broadcast_width", 0u));
    throw ConfigError("adapter kind must be 'mapping' or 'replication', got '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("adapter: ") + e.what());
  }
}

EmbeddingMatrix EmbeddingMatrix::subset(std::span<const std::size_t> indices) const {
  EmbeddingMatrix out;
  out.rows = indices.size();
  out.cols = cols;
  out.provenance = provenance;
  out.values.reserve(indices.size() * cols);
  for (auto i : indices) {
    if (i >= rows) throw ShapeError("embedding subset index " + std::to_string(i) + " out of range");
    auto r = row(i);
    out.values.insert(out.values.end(), r.begin(), r.end());
    out.ids.push_back(ids[i]);
  }
  out.provenance["ids"] = out.ids;
  return out;
}

std::string backbone_sha256(const ViTParams& backbone) {
  const auto bytes = encode_vit(backbone);
  return io::sha256_hex(bytes);
}

EmbeddingMatrix extract_embeddings(std::span<const MultiChannelImage> images,
                                   const ViTParams& backbone, const AdapterSpec& adapter,
                                   const ExtractOptions& options, std::vector<std::string> ids) {
  const auto& cfg = backbone.config;
  const std::size_t resize = options.resize_px.value_or(cfg.image_size);
  std::vector<std::size_t> order = options.indices;
  if (order.empty()) {
    order.resize(images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  }
  if (order.empty()) throw ConfigError("extract_embeddings: no images");
  if (ids.empty()) {
    for (std::size_t i = 0; i < images.size(); ++i) ids.push_back(std::to_string(i));
  }
  if (ids.size() != images.size()) throw ConfigError("extract_embeddings: id count differs from images");

  std::size_t multiplier = 1;
  if (adapter.kind == AdapterSpec::Kind::mapping) {
    if (adapter.map.dst_channels != cfg.in_channels) {
      throw ShapeError("adapter/backbone mismatch: mapping produces " +
                       std::to_string(adapter.map.dst_channels) + " channels, backbone expects " +
                       std::to_string(cfg.in_channels));
    }
  } else {
    const std::size_t width = adapter.broadcast_width == 0 ? cfg.in_channels : adapter.broadcast_width;
    if (width != cfg.in_channels) {
      throw ShapeError("adapter/backbone mismatch: replication broadcasts into " +
                       std::to_string(width) + " slots, backbone expects " +
                       std::to_string(cfg.in_channels));
    }
    multiplier = images[order.front()].channels;
  }

  EmbeddingMatrix m;
  m.rows = order.size();
  m.cols = cfg.embed_dim * multiplier;
  m.values.reserve(m.rows * m.cols);
  const std::size_t bs = std::max<std::size_t>(options.batch_size, 1);
  NoGradGuard guard;
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t end = std::min(start + bs, order.size());
    std::vector<MultiChannelImage> batch;
    for (std::size_t k = start; k < end; ++k) {
      if (order[k] >= images.size()) throw ShapeError("extract_embeddings: index out of range");
      batch.push_back(prepare(images[order[k]], adapter, resize));
    }
    Tensor out = adapter.kind == AdapterSpec::Kind::mapping
                     ? forward_features(backbone, stack_images(batch))
                     : replicate_embed_batch(batch, backbone, cfg.in_channels);
    if (out.dim(1) != m.cols) throw ShapeError("extract_embeddings: inconsistent channel counts");
    m.values.insert(m.values.end(), out.data().begin(), out.data().end());
  }
  for (auto i : order) m.ids.push_back(ids[i]);
  m.provenance = {{"backbone_sha256", backbone_sha256(backbone)},
                  {"backbone", to_json(cfg)},
                  {"adapter", to_json(adapter)},
                  {"resize_px", resize},
                  {"ids", m.ids}};
  return m;
}

EmbeddingMatrix extract_embeddings(const DatasetManifest& dataset, const ViTParams& backbone,
                                   const AdapterSpec& adapter, const ExtractOptions& options) {
  std::vector<std::size_t> wanted = options.indices;
  if (wanted.empty()) {
    for (std::size_t i = 0; i < dataset.size(); ++i) wanted.push_back(i);
  }
  std::vector<MultiChannelImage> images;
  std::vector<std::string> ids;
  for (auto i : wanted) {
    if (i >= dataset.size()) throw ShapeError("extract_embeddings: index out of range");
    images.push_back(read_image(dataset.image_path(i)));
    ids.push_back(dataset.records[i].id);
  }
  ExtractOptions loaded = options;
  loaded.indices.clear();
  auto m = extract_embeddings(images, backbone, adapter, loaded, ids);
  m.provenance["dataset_name"] = dataset.name;
  m.provenance["dataset_hash"] = dataset_hash(dataset);
  m.provenance["channels"] = dataset.channels;
  return m;
}

std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& m) {
  if (m.values.size() != m.rows * m.cols || m.ids.size() != m.rows) {
    throw ShapeError("embedding matrix is inconsistent with its row/id counts");
  }
  auto prov = m.provenance;
  prov["ids"] = m.ids;
  io::ByteWriter w;
  w.u32(kEmbeddingFormatVersion);
  w.u64(m.rows);
  w.u64(m.cols);
  w.str(prov.dump());
  w.f32s(m.values);
  return io::seal("EMB1", w.buffer());
}

EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(io::unseal(bytes, "EMB1", "embedding file"));
  const auto version = r.u32();
  if (version != kEmbeddingFormatVersion) {
    throw FormatError("embedding file: unsupported version " + std::to_string(version));
  }
  EmbeddingMatrix m;
  m.rows = r.u64();
  m.cols = r.u64();
  try {
    m.provenance = nlohmann::json::parse(r.str());
    m.ids = m.provenance.at("ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("embedding file: bad provenance block: ") + e.what());
  }
  if (m.ids.size() != m.rows) throw FormatError("embedding file: id count differs from N");
  if (m.cols != 0 && m.rows > r.remaining() / 4 / m.cols) {
    throw FormatError("embedding file: N x D exceeds the payload");
  }
  m.values = r.f32s(m.rows * m.cols);
  r.expect_end("embedding file");
  return m;
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& m) {
  io::write_file(path, encode_embeddings(m));
}

EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(io::read_file(path));
}

}  // namespace dinocell
