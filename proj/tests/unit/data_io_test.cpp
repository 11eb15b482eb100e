#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "dinocell/binary_io.hpp"
#include "dinocell/dataset.hpp"
#include "dinocell/errors.hpp"
#include "dinocell/image.hpp"
#include "dinocell/synth.hpp"
#include "temp_dir.hpp"

namespace dinocell {
namespace {

namespace fs = std::filesystem;

RawImage ramp_image() {
  RawImage raw{2, 4, 5, {}};
  for (std::size_t i = 0; i < 40; ++i) raw.pixels.push_back(static_cast<std::uint16_t>(i * 1000));
  return raw;
}

TEST(ImageFormat, RoundTripBothDtypes) {
  testing::TempDir tmp;
  RawImage raw = ramp_image();
  write_image(tmp.path() / "a.mci", raw);
  auto back = std::get<RawImage>(read_stored_image(tmp.path() / "a.mci"));
  EXPECT_EQ(back.pixels, raw.pixels);
  EXPECT_EQ(back.channels, 2u);
  EXPECT_EQ(back.height, 4u);
  EXPECT_EQ(back.width, 5u);

  MultiChannelImage f(3, 2, 2);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : f.pixels) v = u(rng);
  write_image(tmp.path() / "b.mci", f);
  auto fb = std::get<MultiChannelImage>(read_stored_image(tmp.path() / "b.mci"));
  EXPECT_EQ(fb.pixels, f.pixels);  // bitwise
}

TEST(ImageFormat, ByteLayout) {
  RawImage raw{1, 1, 2, {0x0102, 0xA0B0}};
  auto bytes = encode_image(raw);
  const std::vector<std::uint8_t> head{'M', 'C', 'I', '1', 1, 0, 0, 0, 1, 0, 1, 0, 0, 0,
                                       2, 0, 0, 0, 0, 0x02, 0x01, 0xB0, 0xA0};
  ASSERT_EQ(bytes.size(), head.size() + 4);
  EXPECT_TRUE(std::equal(head.begin(), head.end(), bytes.begin()));
  io::ByteReader crc({bytes.data() + head.size(), 4});
  EXPECT_EQ(crc.u32(), io::crc32({bytes.data() + 4, head.size() - 4}));
}

TEST(ImageFormat, CorruptionIsDetected) {
  auto bytes = encode_image(ramp_image());
  auto truncated = bytes;
  truncated.resize(truncated.size() - 7);
  EXPECT_THROW(decode_image(truncated), ChecksumError);
  auto flipped = bytes;
  flipped[20] ^= 0x40;
  EXPECT_THROW(decode_image(flipped), ChecksumError);
  auto magic = bytes;
  magic[0] = 'X';
  try {
    decode_image(magic);
    FAIL() << "expected FormatError";
  } catch (const ChecksumError&) {
    FAIL() << "bad magic must be reported as a format error, not a checksum error";
  } catch (const FormatError&) {
  }
}

TEST(ImageFormat, VersionMismatch) {
  io::ByteWriter w;
  w.u32(99);
  w.u16(1);
  w.u32(1);
  w.u32(1);
  w.u8(0);
  w.u16(0);
  auto bytes = io::seal("MCI1", w.buffer());
  EXPECT_THROW(decode_image(bytes), FormatError);
}

TEST(Normalize, FullScaleMapsToOne) {
  RawImage raw{1, 2, 2, {0, 65535, 0, 65535}};
  auto img = normalize_image(raw);
  EXPECT_EQ(img.pixels, (std::vector<float>{0.0f, 1.0f, 0.0f, 1.0f}));
  EXPECT_EQ(img.source_bit_depth, 16);
}

TEST(Normalize, ConstantChannelIsZero) {
  RawImage raw{2, 2, 2, {7, 7, 7, 7, 1, 2, 3, 4}};
  auto img = normalize_image(raw);
  for (float v : img.channel(0)) EXPECT_EQ(v, 0.0f);
}

TEST(Normalize, RampIsMonotoneWithinUnitRange) {
  auto img = normalize_image(ramp_image());
  for (std::size_t c = 0; c < 2; ++c) {
    auto ch = img.channel(c);
    for (std::size_t i = 0; i < ch.size(); ++i) {
      EXPECT_GE(ch[i], 0.0f);
      EXPECT_LE(ch[i], 1.0f);
      if (i) EXPECT_GE(ch[i], ch[i - 1]);
    }
  }
}

TEST(Normalize, IdempotentOnNormalizedImages) {
  auto once = normalize_image(ramp_image());
  auto twice = normalize_image(once);
  EXPECT_EQ(once.pixels, twice.pixels);
}

TEST(Percentile, MatchesLinearInterpolation) {
  std::vector<float> v{4, 1, 3, 2};
  EXPECT_DOUBLE_EQ(percentile(v, 0), 1.0);
  EXPECT_DOUBLE_EQ(percentile(v, 100), 4.0);
  EXPECT_DOUBLE_EQ(percentile(v, 50), 2.5);
}

TEST(ResizeCrop, FullWindowSameSizeIsIdentity) {
  auto img = normalize_image(ramp_image());
  auto same = resize_crop(img, 0, 0, 4, 5, 4, 5);
  EXPECT_EQ(same.pixels, img.pixels);
  EXPECT_THROW(resize_crop(img, 0, 0, 0, 5, 4, 5), ShapeError);
}

TEST(Synthetic, DeterministicBytes) {
  SynthSpec spec{.n_images = 6, .height = 32, .width = 32, .classes = 4, .seed = 7};
  auto a = generate_synthetic_dataset(spec);
  auto b = generate_synthetic_dataset(spec);
  ASSERT_EQ(a.images.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(encode_image(a.images[i]), encode_image(b.images[i]));
  EXPECT_EQ(manifest_to_json(a.manifest), manifest_to_json(b.manifest));
  spec.seed = 8;
  auto c = generate_synthetic_dataset(spec);
  EXPECT_NE(encode_image(a.images[0]), encode_image(c.images[0]));
}

TEST(Synthetic, ClassBalance) {
  SynthSpec spec{.n_images = 200, .height = 16, .width = 16, .classes = 4, .seed = 3};
  auto ds = generate_synthetic_dataset(spec);
  std::vector<int> counts(4, 0);
  for (const auto& l : ds.manifest.all_labels()) {
    for (std::size_t c = 0; c < 4; ++c) counts[c] += l[c];
  }
  for (int c : counts) EXPECT_GE(c, 20);
}

TEST(Synthetic, PatternCorrelations) {
  SynthSpec spec{.n_images = 40, .height = 64, .width = 64, .classes = 4, .seed = 11,
                 .multi_label_probability = 0.0};
  auto ds = generate_synthetic_dataset(spec);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    auto img = normalize_image(ds.images[i]);
    const double r = pixel_correlation(img.channel(0), img.channel(1));
    const auto labels = ds.manifest.labels(i);
    if (labels[0]) EXPECT_GT(r, 0.5) << ds.manifest.records[i].id;  // nucleoplasm
    if (labels[1]) EXPECT_LT(r, 0.1) << ds.manifest.records[i].id;  // membrane
  }
}

TEST(Synthetic, InvalidSpec) {
  EXPECT_THROW(generate_synthetic_dataset({.classes = 1}), ConfigError);
  EXPECT_THROW(generate_synthetic_dataset({.classes = 18}), ConfigError);
  EXPECT_THROW(generate_synthetic_dataset({.channels = 3}), ConfigError);
}

TEST(Manifest, WriteLoadComposesToIdentity) {
  testing::TempDir tmp;
  SynthSpec spec{.n_images = 5, .height = 16, .width = 16, .classes = 3, .seed = 2};
  auto ds = generate_synthetic_dataset(spec);
  write_dataset(tmp.path() / "d", ds);
  auto loaded = load_manifest(tmp.path() / "d" / "manifest.json");
  EXPECT_EQ(loaded.size(), 5u);
  EXPECT_EQ(manifest_to_json(loaded), manifest_to_json(ds.manifest));
  for (std::size_t i = 0; i < 5; ++i) {
    auto raw = std::get<RawImage>(read_stored_image(loaded.image_path(i)));
    EXPECT_EQ(raw.pixels, ds.images[i].pixels);
  }
  EXPECT_THROW(write_dataset(tmp.path() / "d", ds), IoError);
  EXPECT_NO_THROW(write_dataset(tmp.path() / "d", ds, true));
}

TEST(Manifest, ValidationErrors) {
  testing::TempDir tmp;
  SynthSpec spec{.n_images = 3, .height = 16, .width = 16, .classes = 3, .seed = 2};
  auto ds = generate_synthetic_dataset(spec);
  write_dataset(tmp.path() / "d", ds);
  const auto path = tmp.path() / "d" / "manifest.json";
  auto j = nlohmann::json::parse(io::read_text(path));

  auto bad_grade = j;
  bad_grade["records"][0]["grades"]["nucleoplasm"] = 4;
  io::write_text(path, bad_grade.dump());
  EXPECT_THROW(load_manifest(path), ConfigError);

  auto dup = j;
  dup["records"][1]["id"] = dup["records"][0]["id"];
  io::write_text(path, dup.dump());
  EXPECT_THROW(load_manifest(path), ConfigError);

  auto unknown = j;
  unknown["records"][0]["grades"]["golgi"] = 1;
  io::write_text(path, unknown.dump());
  EXPECT_THROW(load_manifest(path), ConfigError);

  auto dangling = j;
  dangling["records"][2]["path"] = "images/missing.mci";
  io::write_text(path, dangling.dump());
  try {
    load_manifest(path);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("images/missing.mci"), std::string::npos);
  }
  EXPECT_THROW(load_manifest(tmp.path() / "nope.json"), IoError);
}

TEST(Manifest, GradeThreshold) {
  DatasetManifest m;
  m.channels = {"protein", "nucleus"};
  m.classes = {"a", "b", "c"};
  m.records.push_back({"x", "x.mci", {{"a", 1}, {"c", 3}}});
  EXPECT_EQ(m.labels(0), (LabelVector{1, 0, 1}));
  EXPECT_EQ(m.labels(0, 2), (LabelVector{0, 0, 1}));
}

}  // namespace
}  // namespace dinocell
