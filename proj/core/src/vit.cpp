#include "dinocell/vit.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dinocell/binary_io.hpp"
#include "dinocell/errors.hpp"
#include "dinocell/ops.hpp"

namespace dinocell {

namespace {

constexpr float kInitStd = 0.02f;

Tensor trunc_normal(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, kInitStd);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) {
    do {
      x = dist(rng);
    } while (std::abs(x) > 2.0f * kInitStd);
  }
  return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor zeros_param(Shape shape) {
  return Tensor::parameter(shape, std::vector<float>(shape_numel(shape), 0.0f));
}

Tensor ones_param(Shape shape) {
  return Tensor::parameter(shape, std::vector<float>(shape_numel(shape), 1.0f));
}

void write_config(io::ByteWriter& w, const ViTConfig& c) {
  w.u32(static_cast<std::uint32_t>(c.image_size));
  w.u32(static_cast<std::uint32_t>(c.patch_size));
  w.u32(static_cast<std::uint32_t>(c.in_channels));
  w.u32(static_cast<std::uint32_t>(c.embed_dim));
  w.u32(static_cast<std::uint32_t>(c.depth));
  w.u32(static_cast<std::uint32_t>(c.num_heads));
  w.f32(c.mlp_ratio);
  w.u64(c.seed);
}

ViTConfig read_config(io::ByteReader& r) {
  ViTConfig c;
  c.image_size = r.u32();
  c.patch_size = r.u32();
  c.in_channels = r.u32();
  c.embed_dim = r.u32();
  c.depth = r.u32();
  c.num_heads = r.u32();
  c.mlp_ratio = r.f32();
  c.seed = r.u64();
  return c;
}

double cubic_weight(double x) {
  constexpr double a = -0.75;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

}  // namespace

std::size_t ViTConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::lround(static_cast<double>(embed_dim) * mlp_ratio));
}

void validate(const ViTConfig& c) {
  if (c.patch_size == 0 || c.image_size == 0) throw ConfigError("ViT sizes must be positive");
  if (c.image_size % c.patch_size != 0) {
    throw ConfigError("ViT image_size " + std::to_string(c.image_size) +
                      " is not divisible by patch_size " + std::to_string(c.patch_size));
  }
  if (c.in_channels == 0 || c.embed_dim == 0 || c.depth == 0 || c.num_heads == 0) {
    throw ConfigError("ViT channels, dim, depth and heads must be positive");
  }
  if (c.embed_dim % c.num_heads != 0) {
    throw ConfigError("ViT embed_dim " + std::to_string(c.embed_dim) +
                      " is not divisible by num_heads " + std::to_string(c.num_heads));
  }
  if (!(c.mlp_ratio > 0.0f) || c.mlp_hidden() == 0) throw ConfigError("ViT mlp_ratio must be positive");
}

nlohmann::json to_json(const ViTConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size},
          {"in_channels", c.in_channels}, {"embed_dim", c.embed_dim},
          {"depth", c.depth},           {"num_heads", c.num_heads},
          {"mlp_ratio", c.mlp_ratio},   {"seed", c.seed}};
}

ViTConfig vit_config_from_json(const nlohmann::json& j) {
  ViTConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.depth = j.value("depth", c.depth);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::vector<Tensor> ViTParams::parameters() const {
  std::vector<Tensor> out{patch_weight, patch_bias, cls_token, pos_embed};
  for (const auto& b : blocks) {
    out.insert(out.end(), {b.norm1_gamma, b.norm1_beta, b.qkv_weight, b.qkv_bias, b.proj_weight,
                           b.proj_bias, b.norm2_gamma, b.norm2_beta, b.fc1_weight, b.fc1_bias,
                           b.fc2_weight, b.fc2_bias});
  }
  out.push_back(norm_gamma);
  out.push_back(norm_beta);
  return out;
}

std::vector<std::string> ViTParams::parameter_names() const {
  std::vector<std::string> out{"patch_embed.weight", "patch_embed.bias", "cls_token", "pos_embed"};
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    for (const char* n : {"norm1.gamma", "norm1.beta", "attn.qkv.weight", "attn.qkv.bias",
                          "attn.proj.weight", "attn.proj.bias", "norm2.gamma", "norm2.beta",
                          "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias"}) {
      out.push_back(p + n);
    }
  }
  out.push_back("norm.gamma");
  out.push_back("norm.beta");
  return out;
}

ViTParams ViTParams::clone() const {
  ViTParams out = *this;
  auto copy = [](Tensor& t) { t = t.clone_parameter(); };
  copy(out.patch_weight);
  copy(out.patch_bias);
  copy(out.cls_token);
  copy(out.pos_embed);
  for (auto& b : out.blocks) {
    for (Tensor* t : {&b.norm1_gamma, &b.norm1_beta, &b.qkv_weight, &b.qkv_bias, &b.proj_weight,
                      &b.proj_bias, &b.norm2_gamma, &b.norm2_beta, &b.fc1_weight, &b.fc1_bias,
                      &b.fc2_weight, &b.fc2_bias}) {
      copy(*t);
    }
  }
  copy(out.norm_gamma);
  copy(out.norm_beta);
  return out;
}

ViTParams init_vit(const ViTConfig& config) {
  validate(config);
  std::mt19937_64 rng(config.seed);
  const std::size_t d = config.embed_dim;
  const std::size_t patch_in = config.in_channels * config.patch_size * config.patch_size;
  const std::size_t hidden = config.mlp_hidden();
  ViTParams p;
  p.config = config;
  p.patch_weight = trunc_normal({patch_in, d}, rng);
  p.patch_bias = zeros_param({d});
  p.cls_token = trunc_normal({d}, rng);
  p.pos_embed = trunc_normal({config.num_patches() + 1, d}, rng);
  for (std::size_t i = 0; i < config.depth; ++i) {
    ViTBlock b;
    b.norm1_gamma = ones_param({d});
    b.norm1_beta = zeros_param({d});
    b.qkv_weight = trunc_normal({d, 3 * d}, rng);
    b.qkv_bias = zeros_param({3 * d});
    b.proj_weight = trunc_normal({d, d}, rng);
    b.proj_bias = zeros_param({d});
    b.norm2_gamma = ones_param({d});
    b.norm2_beta = zeros_param({d});
    b.fc1_weight = trunc_normal({d, hidden}, rng);
    b.fc1_bias = zeros_param({hidden});
    b.fc2_weight = trunc_normal({hidden, d}, rng);
    b.fc2_bias = zeros_param({d});
    p.blocks.push_back(std::move(b));
  }
  p.norm_gamma = ones_param({d});
  p.norm_beta = zeros_param({d});
  return p;
}

Tensor patchify(const Tensor& batch, std::size_t patch) {
  if (batch.rank() != 4) {
    throw ShapeError("expected an [N x C x H x W] batch, got " + shape_string(batch.shape()));
  }
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  if (h % patch != 0 || w % patch != 0) {
    throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not divisible into " + std::to_string(patch) + "px patches");
  }
  const std::size_t gh = h / patch, gw = w / patch;
  const std::size_t row = c * patch * patch;
  std::vector<float> out(n * gh * gw * row);
  auto in = batch.data();
  std::size_t o = 0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t py = 0; py < gh; ++py) {
      for (std::size_t px = 0; px < gw; ++px) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t y = 0; y < patch; ++y) {
            const float* src = in.data() + ((b * c + ch) * h + py * patch + y) * w + px * patch;
            std::copy_n(src, patch, out.begin() + static_cast<std::ptrdiff_t>(o));
            o += patch;
          }
        }
      }
    }
  }
  return Tensor::from({n, gh * gw, row}, std::move(out));
}

std::vector<float> bicubic_matrix(std::size_t in, std::size_t out) {
  std::vector<float> m(out * in, 0.0f);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    const double base = std::floor(src);
    const double t = src - base;
    for (int k = -1; k <= 2; ++k) {
      const double wgt = cubic_weight(t - k);
      auto idx = static_cast<long>(base) + k;
      idx = std::clamp(idx, 0L, static_cast<long>(in) - 1);
      m[o * in + static_cast<std::size_t>(idx)] += static_cast<float>(wgt);
    }
  }
  return m;
}

Tensor positional_embedding(const ViTParams& params, std::size_t grid_h, std::size_t grid_w) {
  const std::size_t g = params.config.grid();
  if (grid_h == g && grid_w == g) return params.pos_embed;
  auto ry = bicubic_matrix(g, grid_h);
  auto rx = bicubic_matrix(g, grid_w);
  // kron(ry, rx): row (oy, ox) mixes source cells (iy, ix).
  std::vector<float> k(grid_h * grid_w * g * g);
  for (std::size_t oy = 0; oy < grid_h; ++oy) {
    for (std::size_t ox = 0; ox < grid_w; ++ox) {
      float* row = k.data() + (oy * grid_w + ox) * g * g;
      for (std::size_t iy = 0; iy < g; ++iy) {
        const float wy = ry[oy * g + iy];
        if (wy == 0.0f) continue;
        for (std::size_t ix = 0; ix < g; ++ix) row[iy * g + ix] = wy * rx[ox * g + ix];
      }
    }
  }
  std::vector<std::size_t> cls_row{0};
  std::vector<std::size_t> grid_rows(g * g);
  for (std::size_t i = 0; i < grid_rows.size(); ++i) grid_rows[i] = i + 1;
  auto resample = Tensor::from({grid_h * grid_w, g * g}, std::move(k));
  auto grid = ops::matmul(resample, ops::gather_rows(params.pos_embed, grid_rows));
  return ops::concat_rows({ops::gather_rows(params.pos_embed, cls_row), grid});
}

Tensor forward_features(const ViTParams& params, const Tensor& batch) {
  const auto& cfg = params.config;
  if (batch.rank() != 4) {
    throw ShapeError("expected an [N x C x H x W] batch, got " + shape_string(batch.shape()));
  }
  if (batch.dim(1) != cfg.in_channels) {
    throw ShapeError("channel mismatch: backbone expects " + std::to_string(cfg.in_channels) +
                     " input channels, batch has " + std::to_string(batch.dim(1)) +
                     " (use a channel adapter)");
  }
  const std::size_t gh = batch.dim(2) / cfg.patch_size;
  const std::size_t gw = batch.dim(3) / cfg.patch_size;
  Tensor x = ops::linear(patchify(batch, cfg.patch_size), params.patch_weight, params.patch_bias);
  x = ops::prepend_token(x, params.cls_token);
  x = ops::add_broadcast(x, positional_embedding(params, gh, gw));
  for (const auto& b : params.blocks) {
    Tensor h = ops::layer_norm(x, b.norm1_gamma, b.norm1_beta);
    h = ops::multi_head_attention(ops::linear(h, b.qkv_weight, b.qkv_bias), cfg.num_heads);
    x = ops::add(x, ops::linear(h, b.proj_weight, b.proj_bias));
    h = ops::layer_norm(x, b.norm2_gamma, b.norm2_beta);
    h = ops::gelu(ops::linear(h, b.fc1_weight, b.fc1_bias));
    x = ops::add(x, ops::linear(h, b.fc2_weight, b.fc2_bias));
  }
  x = ops::layer_norm(x, params.norm_gamma, params.norm_beta);
  return ops::select_token(x, 0);
}

Tensor stack_images(std::span<const MultiChannelImage> images) {
  if (images.empty()) throw ShapeError("cannot stack an empty image list");
  const auto& f = images.front();
  std::vector<float> data;
  data.reserve(images.size() * f.pixels.size());
  for (const auto& img : images) {
    if (img.channels != f.channels || img.height != f.height || img.width != f.width) {
      throw ShapeError("cannot stack images of different dimensions");
    }
    data.insert(data.end(), img.pixels.begin(), img.pixels.end());
  }
  return Tensor::from({images.size(), f.channels, f.height, f.width}, std::move(data));
}

std::vector<std::uint8_t> encode_vit(const ViTParams& params) {
  io::ByteWriter w;
  w.u32(kVitFormatVersion);
  write_config(w, params.config);
  const auto tensors = params.parameters();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.u64(t.numel());
    w.f32s(t.data());
  }
  return io::seal("VITW", w.buffer());
}

ViTParams decode_vit(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(io::unseal(bytes, "VITW", "ViT checkpoint"));
  const auto version = r.u32();
  if (version != kVitFormatVersion) {
    throw FormatError("ViT checkpoint: unsupported version " + std::to_string(version));
  }
  ViTConfig cfg = read_config(r);
  try {
    validate(cfg);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("ViT checkpoint: invalid config: ") + e.what());
  }
  ViTParams p = init_vit(cfg);
  auto tensors = p.parameters();
  if (r.u32() != tensors.size()) throw FormatError("ViT checkpoint: tensor count mismatch");
  for (auto& t : tensors) {
    const auto n = r.u64();
    if (n != t.numel()) throw FormatError("ViT checkpoint: tensor size mismatch");
    auto values = r.f32s(n);
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
  r.expect_end("ViT checkpoint");
  return p;
}

void save_vit(const std::filesystem::path& path, const ViTParams& params) {
  io::write_file(path, encode_vit(params));
}

ViTParams load_vit(const std::filesystem::path& path) { return decode_vit(io::read_file(path)); }

}  // namespace dinocell
