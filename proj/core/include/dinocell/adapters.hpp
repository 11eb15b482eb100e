#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dinocell/image.hpp"
#include "dinocell/tensor.hpp"
#include "dinocell/vit.hpp"

namespace dinocell {

// Source channel -> backbone slot assignments; slots without a source are
// zero-filled.
struct ChannelMapSpec {
  std::size_t dst_channels = 0;
  std::vector<std::pair<std::size_t, std::size_t>> assignments;  // (src, dst)

  bool operator==(const ChannelMapSpec&) const = default;
};

// HPA slot order: protein, microtubules, nucleus, ER.
inline constexpr std::size_t kHpaProteinSlot = 0;
inline constexpr std::size_t kHpaMicrotubuleSlot = 1;
inline constexpr std::size_t kHpaNucleusSlot = 2;
inline constexpr std::size_t kHpaErSlot = 3;

void validate(const ChannelMapSpec& spec, std::size_t src_channels);
ChannelMapSpec identity_map(std::size_t channels);

// Entries look like "protein:0" or "1:2"; names are resolved against
// channel_names (the manifest's channel list).
ChannelMapSpec parse_channel_map(std::span<const std::string> entries, std::size_t dst_channels,
                                 std::span<const std::string> channel_names);
nlohmann::json to_json(const ChannelMapSpec& spec);
ChannelMapSpec channel_map_from_json(const nlohmann::json& j);

// Expects a normalized image, so a blank slot reads as "no signal".
MultiChannelImage map_channels(const MultiChannelImage& image, const ChannelMapSpec& spec);

// One embedding per source channel (the channel copied into all
// broadcast_width slots), concatenated in channel order: [C_src * embed_dim].
std::vector<float> replicate_embed(const MultiChannelImage& image, const ViTParams& backbone,
                                   std::size_t broadcast_width);

// Batched form over equally sized images: [N x C_src * embed_dim].
Tensor replicate_embed_batch(std::span<const MultiChannelImage> images, const ViTParams& backbone,
                             std::size_t broadcast_width);

}  // namespace dinocell
