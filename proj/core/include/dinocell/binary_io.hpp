#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Little-endian byte streams and the sealed-container convention shared by
// every on-disk format: 4-byte ASCII magic, body, CRC32 of the body.
namespace dinocell::io {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f32s(std::span<const float> values);
  void bytes(std::span<const std::uint8_t> data);
  // u32 length prefix followed by the raw UTF-8 bytes.
  void str(std::string_view s);

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

// Reads throw FormatError when the stream runs short.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::vector<float> f32s(std::size_t count);
  std::span<const std::uint8_t> bytes(std::size_t count);
  std::string str();

  std::size_t remaining() const { return data_.size() - pos_; }
  void expect_end(std::string_view what) const;

 private:
  void need(std::size_t n) const;

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32(std::span<const std::uint8_t> data);
std::string sha256_hex(std::span<const std::uint8_t> data);

// magic + body + crc32(body)
std::vector<std::uint8_t> seal(std::string_view magic, std::span<const std::uint8_t> body);
// Checks the magic (FormatError) then the checksum (ChecksumError) and
// returns the body.
std::span<const std::uint8_t> unseal(std::span<const std::uint8_t> file, std::string_view magic,
                                     std::string_view what);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes to a sibling temp file and renames it into place.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

}  // namespace dinocell::io
