#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

namespace dinocell {

// Planar C x H x W image with intensities normalized to [0, 1].
struct MultiChannelImage {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
  int source_bit_depth = 32;

  MultiChannelImage() = default;
  MultiChannelImage(std::size_t c, std::size_t h, std::size_t w)
      : channels(c), height(h), width(w), pixels(c * h * w, 0.0f) {}

  std::size_t plane() const { return height * width; }
  std::span<float> channel(std::size_t c) { return {pixels.data() + c * plane(), plane()}; }
  std::span<const float> channel(std::size_t c) const {
    return {pixels.data() + c * plane(), plane()};
  }
  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels[(c * height + y) * width + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
};

// Unnormalized 16-bit acquisition, planar C x H x W.
struct RawImage {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint16_t> pixels;
};

using StoredImage = std::variant<RawImage, MultiChannelImage>;

// MCI1 container: "MCI1", version u32, C u16, H u32, W u32, dtype u8
// (0 = u16, 1 = f32), planar little-endian samples, CRC32 of everything
// between the magic and the checksum.
inline constexpr std::uint32_t kImageFormatVersion = 1;

std::vector<std::uint8_t> encode_image(const StoredImage& image);
StoredImage decode_image(std::span<const std::uint8_t> bytes);

void write_image(const std::filesystem::path& path, const StoredImage& image);
StoredImage read_stored_image(const std::filesystem::path& path);
// Reads and normalizes (u16 payloads go through normalize_image).
MultiChannelImage read_image(const std::filesystem::path& path);

// Per-channel percentile normalization: clip to [p1, p99.9], rescale to
// [0, 1]; channels whose percentile range is empty become all zeros.
MultiChannelImage normalize_image(const RawImage& raw);
// Already-normalized images are only clamped to [0, 1].
MultiChannelImage normalize_image(const MultiChannelImage& image);

// Linear-interpolated percentile (q in [0, 100]) of the values.
double percentile(std::span<const float> values, double q);

// Resamples each channel to out_h x out_w with bilinear interpolation
// (half-pixel centers, edge clamped) from the source window
// [y0, y0 + h) x [x0, x0 + w).
MultiChannelImage resize_crop(const MultiChannelImage& image, double y0, double x0, double h,
                              double w, std::size_t out_h, std::size_t out_w);

}  // namespace dinocell
