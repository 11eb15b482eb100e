#include "dinocell/adapters.hpp"

#include <algorithm>
#include <charconv>
#include <optional>
#include <set>

#include "dinocell/errors.hpp"

namespace dinocell {

namespace {

std::optional<std::size_t> parse_index(std::string_view s) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

}  // namespace

void validate(const ChannelMapSpec& spec, std::size_t src_channels) {
  if (spec.dst_channels == 0) throw ConfigError("channel map: dst_channels must be positive");
  std::set<std::size_t> src, dst;
  for (auto [s, d] : spec.assignments) {
    if (s >= src_channels) {
      throw ConfigError("channel map: source index " + std::to_string(s) + " out of range for " +
                        std::to_string(src_channels) + " channels");
    }
    if (d >= spec.dst_channels) {
      throw ConfigError("channel map: destination index " + std::to_string(d) +
                        " out of range for " + std::to_string(spec.dst_channels) + " slots");
    }
    if (!src.insert(s).second) throw ConfigError("channel map: duplicate source " + std::to_string(s));
    if (!dst.insert(d).second) {
      throw ConfigError("channel map: duplicate destination " + std::to_string(d));
    }
  }
}

ChannelMapSpec identity_map(std::size_t channels) {
  ChannelMapSpec spec{channels, {}};
  for (std::size_t c = 0; c < channels; ++c) spec.assignments.emplace_back(c, c);
  return spec;
}

ChannelMapSpec parse_channel_map(std::span<const std::string> entries, std::size_t dst_channels,
                                 std::span<const std::string> channel_names) {
  ChannelMapSpec spec{dst_channels, {}};
  for (const auto& e : entries) {
    const auto colon = e.rfind(':');
    if (colon == std::string::npos) throw ConfigError("channel map entry '" + e + "' is not src:dst");
    const std::string_view name(e.data(), colon);
    const auto dst = parse_index(std::string_view(e).substr(colon + 1));
    if (!dst) throw ConfigError("channel map entry '" + e + "' has a non-numeric slot");
    std::optional<std::size_t> src;
    auto it = std::find(channel_names.begin(), channel_names.end(), name);
    if (it != channel_names.end()) {
      src = static_cast<std::size_t>(it - channel_names.begin());
    } else {
      src = parse_index(name);
    }
    if (!src) throw ConfigError("channel map entry '" + e + "' names an unknown channel");
    spec.assignments.emplace_back(*src, *dst);
  }
  validate(spec, channel_names.empty() ? spec.dst_channels : channel_names.size());
  return spec;
}

nlohmann::json to_json(const ChannelMapSpec& spec) {
  nlohmann::json a = nlohmann::json::array();
  for (auto [s, d] : spec.assignments) a.push_back({s, d});
  return {{"dst_channels", spec.dst_channels}, {"assignments", a}};
}

ChannelMapSpec channel_map_from_json(const nlohmann::json& j) {
  ChannelMapSpec spec;
  try {
    spec.dst_channels = j.at("dst_channels").get<std::size_t>();
    for (const auto& a : j.at("assignments")) {
      spec.assignments.emplace_back(a.at(0).get<std::size_t>(), a.at(1).get<std::size_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("channel map: ") + e.what());
  }
  return spec;
}

MultiChannelImage map_channels(const MultiChannelImage& image, const ChannelMapSpec& spec) {
  validate(spec, image.channels);
  MultiChannelImage out(spec.dst_channels, image.height, image.width);
  out.source_bit_depth = image.source_bit_depth;
  for (auto [s, d] : spec.assignments) {
    auto src = image.channel(s);
    std::copy(src.begin(), src.end(), out.channel(d).begin());
  }
  return out;
}

Tensor replicate_embed_batch(std::span<const MultiChannelImage> images, const ViTParams& backbone,
                             std::size_t broadcast_width) {
  if (images.empty()) throw ShapeError("replicate_embed: empty batch");
  const std::size_t n = images.size();
  const std::size_t c_src = images.front().channels;
  const std::size_t d = backbone.config.embed_dim;
  std::vector<float> out(n * c_src * d);
  NoGradGuard guard;
  for (std::size_t c = 0; c < c_src; ++c) {
    std::vector<MultiChannelImage> broadcast;
    broadcast.reserve(n);
    for (const auto& img : images) {
      if (img.channels != c_src) throw ShapeError("replicate_embed: mixed channel counts in batch");
      MultiChannelImage b(broadcast_width, img.height, img.width);
      auto src = img.channel(c);
      for (std::size_t k = 0; k < broadcast_width; ++k) {
        std::copy(src.begin(), src.end(), b.channel(k).begin());
      }
      broadcast.push_back(std::move(b));
    }
    auto emb = forward_features(backbone, stack_images(broadcast));
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(emb.data().begin() + static_cast<std::ptrdiff_t>(i * d), d,
                  out.begin() + static_cast<std::ptrdiff_t>((i * c_src + c) * d));
    }
  }
  return Tensor::from({n, c_src * d}, std::move(out));
}

std::vector<float> replicate_embed(const MultiChannelImage& image, const ViTParams& backbone,
                                   std::size_t broadcast_width) {
  auto t = replicate_embed_batch(std::span(&image, 1), backbone, broadcast_width);
  return {t.data().begin(), t.data().end()};
}

}  // namespace dinocell
