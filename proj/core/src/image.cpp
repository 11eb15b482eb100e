#include "dinocell/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dinocell/binary_io.hpp"
#include "dinocell/errors.hpp"

namespace dinocell {

namespace {

constexpr std::uint8_t kDtypeU16 = 0;
constexpr std::uint8_t kDtypeF32 = 1;

void check_dims(std::size_t c, std::size_t h, std::size_t w, std::size_t n) {
  if (c == 0 || h == 0 || w == 0) throw ShapeError("image dimensions must be positive");
  if (c > 0xFFFF || h > 0xFFFFFFFFu || w > 0xFFFFFFFFu) throw ShapeError("image too large");
  if (c * h * w != n) throw ShapeError("image pixel count does not match its dimensions");
}

}  // namespace

std::vector<std::uint8_t> encode_image(const StoredImage& image) {
  io::ByteWriter w;
  w.u32(kImageFormatVersion);
  std::visit(
      [&](const auto& img) {
        check_dims(img.channels, img.height, img.width, img.pixels.size());
        w.u16(static_cast<std::uint16_t>(img.channels));
        w.u32(static_cast<std::uint32_t>(img.height));
        w.u32(static_cast<std::uint32_t>(img.width));
        if constexpr (std::is_same_v<std::decay_t<decltype(img)>, RawImage>) {
          w.u8(kDtypeU16);
          for (auto v : img.pixels) w.u16(v);
        } else {
          w.u8(kDtypeF32);
          w.f32s(img.pixels);
        }
      },
      image);
  return io::seal("MCI1", w.buffer());
}

StoredImage decode_image(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(io::unseal(bytes, "MCI1", "MCI1 image"));
  const auto version = r.u32();
  if (version != kImageFormatVersion) {
    throw FormatError("MCI1 image: unsupported version " + std::to_string(version));
  }
  const std::size_t c = r.u16();
  const std::size_t h = r.u32();
  const std::size_t w = r.u32();
  const auto dtype = r.u8();
  if (c == 0 || h == 0 || w == 0) throw FormatError("MCI1 image: zero dimension");
  const std::size_t n = c * h * w;
  if (dtype == kDtypeU16) {
    if (n > r.remaining() / 2) throw FormatError("MCI1 image: payload shorter than header claims");
    RawImage raw{c, h, w, std::vector<std::uint16_t>(n)};
    for (auto& v : raw.pixels) v = r.u16();
    r.expect_end("MCI1 image");
    return raw;
  }
  if (dtype == kDtypeF32) {
    MultiChannelImage img;
    img.channels = c;
    img.height = h;
    img.width = w;
    img.pixels = r.f32s(n);
    r.expect_end("MCI1 image");
    return img;
  }
  throw FormatError("MCI1 image: unknown dtype tag " + std::to_string(dtype));
}

void write_image(const std::filesystem::path& path, const StoredImage& image) {
  io::write_file(path, encode_image(image));
}

StoredImage read_stored_image(const std::filesystem::path& path) {
  return decode_image(io::read_file(path));
}

MultiChannelImage read_image(const std::filesystem::path& path) {
  auto stored = read_stored_image(path);
  return std::visit([](const auto& img) { return normalize_image(img); }, stored);
}

double percentile(std::span<const float> values, double q) {
  if (values.empty()) throw ShapeError("percentile of empty set");
  std::vector<float> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double rank = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return sorted[lo] + frac * (static_cast<double>(sorted[hi]) - sorted[lo]);
}

MultiChannelImage normalize_image(const RawImage& raw) {
  check_dims(raw.channels, raw.height, raw.width, raw.pixels.size());
  MultiChannelImage out(raw.channels, raw.height, raw.width);
  out.source_bit_depth = 16;
  const std::size_t plane = out.plane();
  std::vector<float> values(plane);
  for (std::size_t c = 0; c < raw.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) values[i] = raw.pixels[c * plane + i];
    const double lo = percentile(values, 1.0);
    const double hi = percentile(values, 99.9);
    auto dst = out.channel(c);
    if (!(hi > lo)) continue;  // constant channel stays zero
    const double inv = 1.0 / (hi - lo);
    for (std::size_t i = 0; i < plane; ++i) {
      dst[i] = static_cast<float>(std::clamp((values[i] - lo) * inv, 0.0, 1.0));
    }
  }
  return out;
}

MultiChannelImage normalize_image(const MultiChannelImage& image) {
  check_dims(image.channels, image.height, image.width, image.pixels.size());
  MultiChannelImage out = image;
  for (auto& v : out.pixels) v = std::isfinite(v) ? std::clamp(v, 0.0f, 1.0f) : 0.0f;
  return out;
}

MultiChannelImage resize_crop(const MultiChannelImage& image, double y0, double x0, double h,
                              double w, std::size_t out_h, std::size_t out_w) {
  if (!(h > 0.0) || !(w > 0.0) || out_h == 0 || out_w == 0) {
    throw ShapeError("resize_crop: degenerate crop");
  }
  MultiChannelImage out(image.channels, out_h, out_w);
  out.source_bit_depth = image.source_bit_depth;
  const double sy = h / static_cast<double>(out_h);
  const double sx = w / static_cast<double>(out_w);
  const auto max_y = static_cast<double>(image.height - 1);
  const auto max_x = static_cast<double>(image.width - 1);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double fy = std::clamp(y0 + (static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0, max_y);
    const auto iy = static_cast<std::size_t>(fy);
    const auto iy1 = std::min(iy + 1, image.height - 1);
    const double ty = fy - static_cast<double>(iy);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double fx = std::clamp(x0 + (static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0, max_x);
      const auto ix = static_cast<std::size_t>(fx);
      const auto ix1 = std::min(ix + 1, image.width - 1);
      const double tx = fx - static_cast<double>(ix);
      for (std::size_t c = 0; c < image.channels; ++c) {
        const double top = image.at(c, iy, ix) * (1.0 - tx) + image.at(c, iy, ix1) * tx;
        const double bot = image.at(c, iy1, ix) * (1.0 - tx) + image.at(c, iy1, ix1) * tx;
        out.at(c, oy, ox) = static_cast<float>(top * (1.0 - ty) + bot * ty);
      }
    }
  }
  return out;
}

}  // namespace dinocell
