#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dinocell/image.hpp"
#include "dinocell/tensor.hpp"

namespace dinocell {

struct ViTConfig {
  // Side of the square view the positional embeddings are laid out for.
  std::size_t image_size = 96;
  std::size_t patch_size = 8;
  std::size_t in_channels = 2;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t num_heads = 4;
  float mlp_ratio = 4.0f;
  std::uint64_t seed = 0;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t mlp_hidden() const;
  bool operator==(const ViTConfig&) const = default;
};

void validate(const ViTConfig& config);
nlohmann::json to_json(const ViTConfig& config);
ViTConfig vit_config_from_json(const nlohmann::json& j);

struct ViTBlock {
  Tensor norm1_gamma, norm1_beta;
  Tensor qkv_weight, qkv_bias;
  Tensor proj_weight, proj_bias;
  Tensor norm2_gamma, norm2_beta;
  Tensor fc1_weight, fc1_bias;
  Tensor fc2_weight, fc2_bias;
};

// Pre-norm Vision Transformer encoder weights. Linear weights are stored
// [in x out]. The positional table has num_patches + 1 rows, CLS first.
struct ViTParams {
  ViTConfig config;
  Tensor patch_weight, patch_bias;
  Tensor cls_token;
  Tensor pos_embed;
  std::vector<ViTBlock> blocks;
  Tensor norm_gamma, norm_beta;

  // Fixed order shared by checkpoints, the optimizer, and EMA updates.
  std::vector<Tensor> parameters() const;
  std::vector<std::string> parameter_names() const;
  // Deep copy with fresh parameter identities.
  ViTParams clone() const;
};

// Weights ~ truncated normal (sigma 0.02, cut at 2 sigma), biases zero,
// layer norms identity; deterministic in config.seed.
ViTParams init_vit(const ViTConfig& config);

// Rearranges [N x C x H x W] into [N x (H/p * W/p) x (C*p*p)] patch rows.
Tensor patchify(const Tensor& batch, std::size_t patch_size);

// 1-D bicubic resampling weights [out x in] (half-pixel centers, A = -0.75,
// border-clamped taps).
std::vector<float> bicubic_matrix(std::size_t in, std::size_t out);

// Positional table for a grid_h x grid_w token grid; the CLS row is passed
// through unchanged and the grid rows are bicubically resampled.
Tensor positional_embedding(const ViTParams& params, std::size_t grid_h, std::size_t grid_w);

// Final-layer-norm CLS embedding per image: [N x C x H x W] -> [N x embed_dim].
Tensor forward_features(const ViTParams& params, const Tensor& batch);

// Stacks images into an [N x C x H x W] tensor; all must share dimensions.
Tensor stack_images(std::span<const MultiChannelImage> images);

// VITW container: "VITW", version u32, config block, u32 tensor count, then
// per tensor (in parameters() order) a u64 element count and its f32 data,
// trailed by the CRC32 of everything after the magic.
inline constexpr std::uint32_t kVitFormatVersion = 1;
std::vector<std::uint8_t> encode_vit(const ViTParams& params);
ViTParams decode_vit(std::span<const std::uint8_t> bytes);
void save_vit(const std::filesystem::path& path, const ViTParams& params);
ViTParams load_vit(const std::filesystem::path& path);

}  // namespace dinocell
