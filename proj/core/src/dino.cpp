#include "dinocell/dino.hpp"

#include <algorithm>
#include <array>
#include <memory>
#include <cmath>
#include <numeric>

#include "dinocell/autograd.hpp"
#include "dinocell/binary_io.hpp"
#include "dinocell/errors.hpp"
#include "dinocell/ops.hpp"
#include "dinocell/seeding.hpp"

namespace dinocell {

namespace {

constexpr double kMinRatio = 3.0 / 4.0;
constexpr double kMaxRatio = 4.0 / 3.0;

Tensor trunc_normal(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, 0.02f);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) {
    do {
      x = dist(rng);
    } while (std::abs(x) > 0.04f);
  }
  return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor zeros_param(std::size_t n) { return Tensor::parameter({n}, std::vector<float>(n, 0.0f)); }

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("DINO config: " + what);
}

void flip_h(MultiChannelImage& img) {
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < img.height; ++y) {
      auto row = img.channel(c).subspan(y * img.width, img.width);
      std::reverse(row.begin(), row.end());
    }
  }
}

void flip_v(MultiChannelImage& img) {
  for (std::size_t c = 0; c < img.channels; ++c) {
    auto ch = img.channel(c);
    for (std::size_t y = 0; y < img.height / 2; ++y) {
      std::swap_ranges(ch.begin() + static_cast<std::ptrdiff_t>(y * img.width),
                       ch.begin() + static_cast<std::ptrdiff_t>((y + 1) * img.width),
                       ch.begin() + static_cast<std::ptrdiff_t>((img.height - 1 - y) * img.width));
    }
  }
}

MultiChannelImage augment(const MultiChannelImage& image, std::size_t px, double smin, double smax,
                          const DinoConfig& cfg, std::mt19937_64& rng) {
  auto view = random_resized_crop(image, px, smin, smax, rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) < cfg.flip_probability) flip_h(view);
  if (u(rng) < cfg.flip_probability) flip_v(view);
  if (u(rng) < cfg.protein_rescale_probability) {
    std::uniform_real_distribution<float> f(cfg.protein_rescale_min, cfg.protein_rescale_max);
    const float factor = f(rng);
    for (auto& v : view.channel(cfg.protein_channel)) v *= factor;
  }
  if (cfg.cell_warping) view = elastic_warp(view, cfg.warp_sigma_px, rng);
  return view;
}

void write_tensors(io::ByteWriter& w, const std::vector<Tensor>& ts) {
  w.u32(static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) {
    w.u64(t.numel());
    w.f32s(t.data());
  }
}

void read_tensors(io::ByteReader& r, const std::vector<Tensor>& ts) {
  if (r.u32() != ts.size()) throw FormatError("DINO checkpoint: head tensor count mismatch");
  for (auto t : ts) {
    const auto n = r.u64();
    if (n != t.numel()) throw FormatError("DINO checkpoint: head tensor size mismatch");
    auto v = r.f32s(n);
    std::copy(v.begin(), v.end(), t.mutable_data().begin());
  }
}

void write_floats(io::ByteWriter& w, std::span<const float> v) {
  w.u64(v.size());
  w.f32s(v);
}

std::vector<float> read_floats(io::ByteReader& r) {
  const auto n = r.u64();
  if (n > r.remaining() / 4) throw FormatError("DINO checkpoint: vector length exceeds file");
  return r.f32s(n);
}

void write_indices(io::ByteWriter& w, const std::vector<std::size_t>& v) {
  w.u64(v.size());
  for (auto i : v) w.u64(i);
}

std::vector<std::size_t> read_indices(io::ByteReader& r) {
  const auto n = r.u64();
  if (n > r.remaining() / 8) throw FormatError("DINO checkpoint: index list exceeds file");
  std::vector<std::size_t> v(n);
  for (auto& i : v) i = r.u64();
  return v;
}

void write_blob(io::ByteWriter& w, std::span<const std::uint8_t> blob) {
  w.u64(blob.size());
  w.bytes(blob);
}

std::span<const std::uint8_t> read_blob(io::ByteReader& r) {
  const auto n = r.u64();
  if (n > r.remaining()) throw FormatError("DINO checkpoint: blob length exceeds file");
  return r.bytes(n);
}

}  // namespace

void validate(const DinoConfig& c) {
  validate(c.backbone);
  require(c.tau_teacher > 0.0f && c.tau_student > c.tau_teacher,
          "temperatures must satisfy tau_student > tau_teacher > 0");
  require(c.lambda_start >= 0.0 && c.lambda_start <= c.lambda_end && c.lambda_end <= 1.0,
          "need 0 <= lambda_start <= lambda_end <= 1");
  require(c.center_momentum >= 0.0f && c.center_momentum < 1.0f, "center_momentum must be in [0, 1)");
  require(c.out_dim >= 2 && c.head_hidden > 0 && c.head_bottleneck > 0, "head sizes must be positive");
  auto scale_ok = [](double lo, double hi) { return lo > 0.0 && lo <= hi && hi <= 1.0; };
  require(scale_ok(c.global_scale_min, c.global_scale_max), "global scale range must lie in (0, 1]");
  require(scale_ok(c.local_scale_min, c.local_scale_max), "local scale range must lie in (0, 1]");
  require(c.global_crop_px == c.backbone.image_size,
          "global_crop_px must equal the backbone image_size");
  require(c.local_crop_px > 0 && c.local_crop_px < c.global_crop_px,
          "local crops must be smaller than global crops");
  require(c.local_crop_px % c.backbone.patch_size == 0, "local_crop_px must be a multiple of the patch size");
  auto prob_ok = [](double p) { return p >= 0.0 && p <= 1.0; };
  require(prob_ok(c.flip_probability) && prob_ok(c.protein_rescale_probability),
          "probabilities must lie in [0, 1]");
  require(c.protein_rescale_min > 0.0f && c.protein_rescale_min <= c.protein_rescale_max,
          "protein rescale range must be positive and ordered");
  require(c.protein_channel < c.backbone.in_channels, "protein_channel out of range");
  require(c.warp_sigma_px >= 0.0, "warp_sigma_px must be non-negative");
  require(c.batch_size > 0, "batch_size must be positive");
  require(c.lr > 0.0f && c.min_lr >= 0.0f && c.weight_decay >= 0.0f, "optimizer settings out of range");
}

nlohmann::json to_json(const DinoConfig& c) {
  return {{"backbone", to_json(c.backbone)},
          {"out_dim", c.out_dim},
          {"head_hidden", c.head_hidden},
          {"head_bottleneck", c.head_bottleneck},
          {"tau_student", c.tau_student},
          {"tau_teacher", c.tau_teacher},
          {"lambda_start", c.lambda_start},
          {"lambda_end", c.lambda_end},
          {"center_momentum", c.center_momentum},
          {"centering", c.centering},
          {"n_local_views", c.n_local_views},
          {"global_crop_px", c.global_crop_px},
          {"global_scale", {c.global_scale_min, c.global_scale_max}},
          {"local_crop_px", c.local_crop_px},
          {"local_scale", {c.local_scale_min, c.local_scale_max}},
          {"flip_probability", c.flip_probability},
          {"protein_rescale_probability", c.protein_rescale_probability},
          {"protein_rescale_range", {c.protein_rescale_min, c.protein_rescale_max}},
          {"protein_channel", c.protein_channel},
          {"cell_warping", c.cell_warping},
          {"warp_sigma_px", c.warp_sigma_px},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"warmup_epochs", c.warmup_epochs},
          {"lr", c.lr},
          {"min_lr", c.min_lr},
          {"weight_decay", c.weight_decay},
          {"betas", {c.beta1, c.beta2}},
          {"seed", c.seed}};
}

DinoConfig dino_config_from_json(const nlohmann::json& j) {
  DinoConfig c;
  try {
    if (j.contains("backbone")) c.backbone = vit_config_from_json(j.at("backbone"));
    c.out_dim = j.value("out_dim", c.out_dim);
    c.head_hidden = j.value("head_hidden", c.head_hidden);
    c.head_bottleneck = j.value("head_bottleneck", c.head_bottleneck);
    c.tau_student = j.value("tau_student", c.tau_student);
    c.tau_teacher = j.value("tau_teacher", c.tau_teacher);
    c.lambda_start = j.value("lambda_start", c.lambda_start);
    c.lambda_end = j.value("lambda_end", c.lambda_end);
    c.center_momentum = j.value("center_momentum", c.center_momentum);
    c.centering = j.value("centering", c.centering);
    c.n_local_views = j.value("n_local_views", c.n_local_views);
    c.global_crop_px = j.value("global_crop_px", c.global_crop_px);
    if (j.contains("global_scale")) {
      c.global_scale_min = j.at("global_scale").at(0);
      c.global_scale_max = j.at("global_scale").at(1);
    }
    c.local_crop_px = j.value("local_crop_px", c.local_crop_px);
    if (j.contains("local_scale")) {
      c.local_scale_min = j.at("local_scale").at(0);
      c.local_scale_max = j.at("local_scale").at(1);
    }
    c.flip_probability = j.value("flip_probability", c.flip_probability);
    c.protein_rescale_probability = j.value("protein_rescale_probability", c.protein_rescale_probability);
    if (j.contains("protein_rescale_range")) {
      c.protein_rescale_min = j.at("protein_rescale_range").at(0);
      c.protein_rescale_max = j.at("protein_rescale_range").at(1);
    }
    c.protein_channel = j.value("protein_channel", c.protein_channel);
    c.cell_warping = j.value("cell_warping", c.cell_warping);
    c.warp_sigma_px = j.value("warp_sigma_px", c.warp_sigma_px);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.lr = j.value("lr", c.lr);
    c.min_lr = j.value("min_lr", c.min_lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("betas")) {
      c.beta1 = j.at("betas").at(0);
      c.beta2 = j.at("betas").at(1);
    }
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("DINO config: ") + e.what());
  }
  return c;
}

std::vector<Tensor> DinoHead::parameters() const { return {w1, b1, w2, b2, w3, b3, last}; }

DinoHead DinoHead::clone() const {
  return {w1.clone_parameter(), b1.clone_parameter(), w2.clone_parameter(), b2.clone_parameter(),
          w3.clone_parameter(), b3.clone_parameter(), last.clone_parameter()};
}

DinoHead init_dino_head(std::size_t in_dim, std::size_t hidden, std::size_t bottleneck,
                        std::size_t out_dim, std::mt19937_64& rng) {
  DinoHead h;
  h.w1 = trunc_normal({in_dim, hidden}, rng);
  h.b1 = zeros_param(hidden);
  h.w2 = trunc_normal({hidden, hidden}, rng);
  h.b2 = zeros_param(hidden);
  h.w3 = trunc_normal({hidden, bottleneck}, rng);
  h.b3 = zeros_param(bottleneck);
  h.last = trunc_normal({out_dim, bottleneck}, rng);
  return h;
}

Tensor head_forward(const DinoHead& head, const Tensor& x) {
  Tensor h = ops::gelu(ops::linear(x, head.w1, head.b1));
  h = ops::gelu(ops::linear(h, head.w2, head.b2));
  Tensor z = ops::l2_normalize_rows(ops::linear(h, head.w3, head.b3));
  return ops::matmul_bt(z, ops::l2_normalize_rows(head.last));
}

std::vector<Tensor> DinoState::student_parameters() const {
  auto p = student.parameters();
  auto h = student_head.parameters();
  p.insert(p.end(), h.begin(), h.end());
  return p;
}

std::vector<Tensor> DinoState::teacher_parameters() const {
  auto p = teacher.parameters();
  auto h = teacher_head.parameters();
  p.insert(p.end(), h.begin(), h.end());
  return p;
}

DinoState init_dino(const DinoConfig& config) {
  validate(config);
  DinoState s;
  s.config = config;
  s.student = init_vit(config.backbone);
  std::mt19937_64 rng(derive_seed(config.seed, {0x4EAD}));
  s.student_head = init_dino_head(config.backbone.embed_dim, config.head_hidden,
                                  config.head_bottleneck, config.out_dim, rng);
  s.teacher = s.student.clone();
  s.teacher_head = s.student_head.clone();
  s.center.assign(config.out_dim, 0.0f);
  s.optimizer = AdamWState({config.lr, config.weight_decay, config.beta1, config.beta2, 1e-8f});
  return s;
}

MultiChannelImage random_resized_crop(const MultiChannelImage& image, std::size_t out_px,
                                      double scale_min, double scale_max, std::mt19937_64& rng) {
  const auto H = static_cast<double>(image.height), W = static_cast<double>(image.width);
  if (image.height == 0 || image.width == 0 || out_px == 0) {
    throw ShapeError("degenerate crop: zero-area image or output");
  }
  const double area = H * W;
  std::uniform_real_distribution<double> scale(scale_min, scale_max);
  std::uniform_real_distribution<double> log_ratio(std::log(kMinRatio), std::log(kMaxRatio));
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * scale(rng);
    const double ratio = std::exp(log_ratio(rng));
    const double w = std::round(std::sqrt(target * ratio));
    const double h = std::round(std::sqrt(target / ratio));
    if (w > 0 && w <= W && h > 0 && h <= H) {
      std::uniform_int_distribution<long> ys(0, static_cast<long>(H - h));
      std::uniform_int_distribution<long> xs(0, static_cast<long>(W - w));
      const auto y0 = static_cast<double>(ys(rng));
      const auto x0 = static_cast<double>(xs(rng));
      return resize_crop(image, y0, x0, h, w, out_px, out_px);
    }
  }
  // Fallback: centered crop with the closest allowed aspect ratio.
  double w = W, h = H;
  if (W / H < kMinRatio) {
    h = std::round(W / kMinRatio);
  } else if (W / H > kMaxRatio) {
    w = std::round(H * kMaxRatio);
  }
  return resize_crop(image, std::floor((H - h) / 2), std::floor((W - w) / 2), h, w, out_px, out_px);
}

MultiChannelImage elastic_warp(const MultiChannelImage& image, double sigma_px, std::mt19937_64& rng) {
  constexpr std::size_t kGrid = 4;
  std::normal_distribution<double> n(0.0, sigma_px);
  std::array<double, kGrid * kGrid> dy{}, dx{};
  for (std::size_t i = 0; i < kGrid * kGrid; ++i) {
    dy[i] = n(rng);
    dx[i] = n(rng);
  }
  const std::size_t H = image.height, W = image.width;
  MultiChannelImage out(image.channels, H, W);
  out.source_bit_depth = image.source_bit_depth;
  auto interp = [&](const std::array<double, kGrid * kGrid>& g, double gy, double gx) {
    const auto y0 = std::min<std::size_t>(static_cast<std::size_t>(gy), kGrid - 2);
    const auto x0 = std::min<std::size_t>(static_cast<std::size_t>(gx), kGrid - 2);
    const double ty = gy - static_cast<double>(y0), tx = gx - static_cast<double>(x0);
    return (1 - ty) * ((1 - tx) * g[y0 * kGrid + x0] + tx * g[y0 * kGrid + x0 + 1]) +
           ty * ((1 - tx) * g[(y0 + 1) * kGrid + x0] + tx * g[(y0 + 1) * kGrid + x0 + 1]);
  };
  const double sy = H > 1 ? static_cast<double>(kGrid - 1) / static_cast<double>(H - 1) : 0.0;
  const double sx = W > 1 ? static_cast<double>(kGrid - 1) / static_cast<double>(W - 1) : 0.0;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double gy = static_cast<double>(y) * sy, gx = static_cast<double>(x) * sx;
      const double py = std::clamp(static_cast<double>(y) + interp(dy, gy, gx), 0.0, static_cast<double>(H - 1));
      const double px = std::clamp(static_cast<double>(x) + interp(dx, gy, gx), 0.0, static_cast<double>(W - 1));
      const auto y0 = static_cast<std::size_t>(py), x0 = static_cast<std::size_t>(px);
      const std::size_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
      const double ty = py - static_cast<double>(y0), tx = px - static_cast<double>(x0);
      for (std::size_t c = 0; c < image.channels; ++c) {
        const double v = (1 - ty) * ((1 - tx) * image.at(c, y0, x0) + tx * image.at(c, y0, x1)) +
                         ty * ((1 - tx) * image.at(c, y1, x0) + tx * image.at(c, y1, x1));
        out.channel(c)[y * W + x] = static_cast<float>(v);
      }
    }
  }
  return out;
}

ViewSet make_views(const MultiChannelImage& image, const DinoConfig& cfg, std::mt19937_64& rng) {
  if (image.channels <= cfg.protein_channel) {
    throw ShapeError("make_views: image has no channel " + std::to_string(cfg.protein_channel));
  }
  ViewSet v;
  for (int g = 0; g < 2; ++g) {
    v.global.push_back(augment(image, cfg.global_crop_px, cfg.global_scale_min,
                               cfg.global_scale_max, cfg, rng));
  }
  for (std::size_t l = 0; l < cfg.n_local_views; ++l) {
    v.local.push_back(augment(image, cfg.local_crop_px, cfg.local_scale_min, cfg.local_scale_max,
                              cfg, rng));
  }
  return v;
}

DinoLossOutput dino_loss_from_logits(const Tensor& student_logits,
                                     std::span<const float> teacher_logits, std::size_t batch,
                                     std::span<const float> center, float tau_student,
                                     float tau_teacher) {
  if (batch == 0 || student_logits.rank() != 2 || student_logits.dim(0) == 0) {
    throw ShapeError("dino_loss: empty view set");
  }
  const std::size_t K = student_logits.dim(1);
  const std::size_t rows = student_logits.dim(0);
  if (rows % batch != 0 || rows / batch < 2) {
    throw ShapeError("dino_loss: need at least the two global views per image");
  }
  const std::size_t V = rows / batch;
  if (teacher_logits.size() != 2 * batch * K) throw ShapeError("dino_loss: teacher logits shape");
  if (center.size() != K) throw ShapeError("dino_loss: center length differs from K");

  std::vector<float> centered(teacher_logits.begin(), teacher_logits.end());
  for (std::size_t i = 0; i < centered.size(); ++i) centered[i] -= center[i % K];
  const auto pt = ops::softmax_values(centered, K, tau_teacher);

  DinoLossOutput out;
  out.teacher_logits.assign(teacher_logits.begin(), teacher_logits.end());
  out.teacher_entropy = ops::row_entropy_mean(pt, K);
  out.pair_terms = 2 * (V - 1);

  std::vector<std::size_t> student_rows;
  std::vector<float> teacher_rows;
  student_rows.reserve(out.pair_terms * batch);
  teacher_rows.reserve(out.pair_terms * batch * K);
  for (std::size_t g = 0; g < 2; ++g) {
    for (std::size_t v = 0; v < V; ++v) {
      if (v == g) continue;
      for (std::size_t b = 0; b < batch; ++b) {
        student_rows.push_back(v * batch + b);
        auto src = pt.begin() + static_cast<std::ptrdiff_t>((g * batch + b) * K);
        teacher_rows.insert(teacher_rows.end(), src, src + static_cast<std::ptrdiff_t>(K));
      }
    }
  }
  const Tensor ps = ops::tempered_softmax(student_logits, tau_student);
  const Tensor target = Tensor::from({student_rows.size(), K}, std::move(teacher_rows));
  out.loss = ops::cross_entropy_rows(target, ops::gather_rows(ps, student_rows));
  return out;
}

DinoLossOutput dino_loss(const DinoState& state, std::span<const ViewSet> views) {
  if (views.empty()) throw ShapeError("dino_loss: empty view set");
  const std::size_t B = views.size();
  const std::size_t L = views.front().local.size();
  std::vector<MultiChannelImage> globals, locals;
  for (std::size_t g = 0; g < 2; ++g) {
    for (const auto& v : views) {
      if (v.global.size() != 2 || v.local.size() != L) {
        throw ShapeError("dino_loss: every view set needs 2 global and equal local views");
      }
      globals.push_back(v.global[g]);
    }
  }
  for (std::size_t l = 0; l < L; ++l) {
    for (const auto& v : views) locals.push_back(v.local[l]);
  }
  const Tensor gbatch = stack_images(globals);
  Tensor logits = head_forward(state.student_head, forward_features(state.student, gbatch));
  if (L > 0) {
    Tensor local_logits =
        head_forward(state.student_head, forward_features(state.student, stack_images(locals)));
    logits = ops::concat_rows({logits, local_logits});
  }
  std::vector<float> teacher;
  {
    NoGradGuard guard;
    Tensor t = head_forward(state.teacher_head, forward_features(state.teacher, gbatch));
    teacher.assign(t.data().begin(), t.data().end());
  }
  return dino_loss_from_logits(logits, teacher, B, state.center, state.config.tau_student,
                               state.config.tau_teacher);
}

void ema_update(std::span<const Tensor> teacher, std::span<const Tensor> student, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("ema_update: lambda must be in [0, 1]");
  if (teacher.size() != student.size()) throw ShapeError("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].shape() != student[i].shape()) {
      throw ShapeError("ema_update: shape mismatch " + shape_string(teacher[i].shape()) + " vs " +
                       shape_string(student[i].shape()));
    }
  }
  if (lambda == 1.0) return;
  const double step = 1.0 - lambda;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    Tensor t = teacher[i];
    auto dst = t.mutable_data();
    auto src = student[i].data();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      if (lambda == 0.0) {
        dst[k] = src[k];
      } else if (dst[k] != src[k]) {
        dst[k] = static_cast<float>(dst[k] + step * (static_cast<double>(src[k]) - dst[k]));
      }
    }
  }
}

void ema_update(DinoState& state, double lambda) {
  ema_update(state.teacher_parameters(), state.student_parameters(), lambda);
}

std::vector<float> center_update(std::span<const float> center,
                                 std::span<const float> teacher_logits, float momentum) {
  if (!(momentum >= 0.0f && momentum < 1.0f)) throw ConfigError("center momentum must be in [0, 1)");
  const std::size_t K = center.size();
  if (K == 0 || teacher_logits.empty() || teacher_logits.size() % K != 0) {
    throw ShapeError("center_update: teacher outputs do not have K = " + std::to_string(K) + " columns");
  }
  const std::size_t n = teacher_logits.size() / K;
  std::vector<double> mean(K, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < K; ++k) mean[k] += teacher_logits[r * K + k];
  }
  std::vector<float> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    const double m = mean[k] / static_cast<double>(n);
    out[k] = momentum == 0.0f ? static_cast<float>(m)
                              : static_cast<float>(momentum * static_cast<double>(center[k]) +
                                                   (1.0 - momentum) * m);
  }
  return out;
}

double lambda_at(const DinoConfig& config, std::uint64_t step, std::uint64_t total_steps) {
  const auto total = static_cast<std::int64_t>(std::max<std::uint64_t>(total_steps, 1));
  const auto s = std::min(static_cast<std::int64_t>(step), total);
  return cosine_schedule(s, total, config.lambda_start, config.lambda_end);
}

double lr_at(const DinoConfig& config, std::uint64_t step, std::uint64_t total_steps,
             std::uint64_t steps_per_epoch) {
  const std::uint64_t warmup = std::min(config.warmup_epochs * steps_per_epoch, total_steps);
  if (step < warmup) {
    return config.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  const auto total = static_cast<std::int64_t>(std::max<std::uint64_t>(total_steps - warmup, 1));
  const auto s = std::min(static_cast<std::int64_t>(step - warmup), total);
  return cosine_schedule(s, total, config.lr, config.min_lr);
}

nlohmann::json to_json(const EpochLog& log) {
  return {{"epoch", log.epoch},
          {"mean_loss", log.mean_loss},
          {"teacher_entropy", log.teacher_entropy},
          {"lambda", log.lambda},
          {"lr", log.lr}};
}

PretrainResult pretrain_images(std::span<const MultiChannelImage> images, const DinoConfig& config,
                               PretrainOptions options) {
  validate(config);
  PretrainResult result;
  DinoState& state = result.state;
  if (options.resume) {
    state = std::move(*options.resume);
    const DinoConfig& old = state.config;
    if (!(old.backbone == config.backbone) || old.out_dim != config.out_dim ||
        old.head_hidden != config.head_hidden || old.head_bottleneck != config.head_bottleneck) {
      throw ConfigError("resume: checkpoint architecture differs from the run config");
    }
    state.config = config;
    for (auto i : state.train_indices) {
      if (i >= images.size()) throw ConfigError("resume: checkpoint split does not fit this dataset");
    }
  } else {
    state = init_dino(config);
    auto split = holdout_split(images.size(), options.holdout_fraction, options.split_seed);
    state.train_indices = std::move(split.train);
    state.holdout_indices = std::move(split.holdout);
  }

  std::vector<MultiChannelImage> mapped;
  if (options.input_map) {
    mapped.reserve(images.size());
    for (const auto& img : images) mapped.push_back(map_channels(img, *options.input_map));
    images = mapped;
  }
  for (auto i : state.train_indices) {
    if (images[i].channels != config.backbone.in_channels) {
      throw ShapeError("pretrain: images have " + std::to_string(images[i].channels) +
                       " channels but the backbone expects " +
                       std::to_string(config.backbone.in_channels) + " (set an input channel map)");
    }
  }

  const std::size_t n_train = state.train_indices.size();
  const std::size_t bs = std::min(config.batch_size, n_train);
  const std::uint64_t steps_per_epoch = (n_train + bs - 1) / bs;
  const std::uint64_t total_steps = steps_per_epoch * config.epochs;
  auto params = state.student_parameters();
  const auto teacher_params = state.teacher_parameters();
  std::unique_ptr<bool[]> no_decay(new bool[params.size()]);
  for (std::size_t i = 0; i < params.size(); ++i) no_decay[i] = params[i].rank() == 1;

  const std::size_t last_epoch = std::min(config.epochs, options.stop_after_epoch.value_or(config.epochs));
  for (std::size_t epoch = state.epoch; epoch < last_epoch; ++epoch) {
    std::vector<std::size_t> order = state.train_indices;
    std::mt19937_64 shuffle_rng(derive_seed(config.seed, {0x5EED, epoch}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0, entropy_sum = 0.0;
    double lambda = 0.0, lr = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n_train; start += bs) {
      const std::size_t end = std::min(start + bs, n_train);
      std::vector<ViewSet> views;
      for (std::size_t k = start; k < end; ++k) {
        std::mt19937_64 rng(derive_seed(config.seed, {0x1EE5, epoch, order[k]}));
        views.push_back(make_views(images[order[k]], config, rng));
      }
      lr = lr_at(config, state.step, total_steps, steps_per_epoch);
      lambda = lambda_at(config, state.step, total_steps);
      try {
        DinoLossOutput out = dino_loss(state, views);
        const float loss = out.loss.item();
        GradientRecord grads = backward(out.loss);
        state.optimizer.hyper.lr = static_cast<float>(lr);
        adamw_step(params, grads, state.optimizer, std::span<const bool>(no_decay.get(), params.size()));
        ema_update(teacher_params, params, lambda);
        if (config.centering) {
          state.center = center_update(state.center, out.teacher_logits, config.center_momentum);
        }
        loss_sum += loss;
        entropy_sum += out.teacher_entropy;
      } catch (const NumericError& e) {
        throw NumericError("pretrain aborted at epoch " + std::to_string(epoch + 1) + ", step " +
                           std::to_string(state.step) + ": " + e.what());
      }
      ++state.step;
      ++batches;
    }
    state.epoch = epoch + 1;
    EpochLog entry{state.epoch, loss_sum / static_cast<double>(batches),
                   entropy_sum / static_cast<double>(batches), lambda, lr};
    result.log.push_back(entry);
    if (options.on_epoch) options.on_epoch(entry);
  }
  return result;
}

PretrainResult pretrain(const DatasetManifest& dataset, const DinoConfig& config,
                        PretrainOptions options) {
  if (dataset.records.empty()) throw ConfigError("pretrain: dataset is empty");
  std::vector<MultiChannelImage> images;
  images.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) images.push_back(read_image(dataset.image_path(i)));
  return pretrain_images(images, config, std::move(options));
}

std::vector<std::uint8_t> encode_dino(const DinoState& s) {
  io::ByteWriter w;
  w.u32(kDinoFormatVersion);
  w.str(to_json(s.config).dump());
  write_blob(w, encode_vit(s.student));
  write_blob(w, encode_vit(s.teacher));
  write_tensors(w, s.student_head.parameters());
  write_tensors(w, s.teacher_head.parameters());
  write_floats(w, s.center);
  w.u64(s.epoch);
  w.u64(s.step);
  const auto& h = s.optimizer.hyper;
  for (float v : {h.lr, h.weight_decay, h.beta1, h.beta2, h.epsilon}) w.f32(v);
  w.u64(s.optimizer.step);
  w.u32(static_cast<std::uint32_t>(s.optimizer.first_moment.size()));
  for (const auto& m : s.optimizer.first_moment) write_floats(w, m);
  for (const auto& m : s.optimizer.second_moment) write_floats(w, m);
  write_indices(w, s.train_indices);
  write_indices(w, s.holdout_indices);
  return io::seal("DINO", w.buffer());
}

DinoState decode_dino(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(io::unseal(bytes, "DINO", "DINO checkpoint"));
  const auto version = r.u32();
  if (version != kDinoFormatVersion) {
    throw FormatError("DINO checkpoint: unsupported version " + std::to_string(version));
  }
  DinoConfig cfg;
  try {
    cfg = dino_config_from_json(nlohmann::json::parse(r.str()));
    validate(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("DINO checkpoint: bad config block: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("DINO checkpoint: bad config block: ") + e.what());
  }
  DinoState s = init_dino(cfg);
  s.student = decode_vit(read_blob(r));
  s.teacher = decode_vit(read_blob(r));
  if (!(s.student.config == cfg.backbone) || !(s.teacher.config == cfg.backbone)) {
    throw FormatError("DINO checkpoint: backbone config disagrees with the config block");
  }
  read_tensors(r, s.student_head.parameters());
  read_tensors(r, s.teacher_head.parameters());
  s.center = read_floats(r);
  if (s.center.size() != cfg.out_dim) throw FormatError("DINO checkpoint: center length != K");
  s.epoch = r.u64();
  s.step = r.u64();
  auto& h = s.optimizer.hyper;
  for (float* v : {&h.lr, &h.weight_decay, &h.beta1, &h.beta2, &h.epsilon}) *v = r.f32();
  s.optimizer.step = r.u64();
  const auto moments = r.u32();
  for (std::uint32_t i = 0; i < moments; ++i) s.optimizer.first_moment.push_back(read_floats(r));
  for (std::uint32_t i = 0; i < moments; ++i) s.optimizer.second_moment.push_back(read_floats(r));
  s.train_indices = read_indices(r);
  s.holdout_indices = read_indices(r);
  r.expect_end("DINO checkpoint");
  return s;
}

void save_dino(const std::filesystem::path& path, const DinoState& state) {
  io::write_file(path, encode_dino(state));
}

DinoState load_dino(const std::filesystem::path& path) { return decode_dino(io::read_file(path)); }

}  // namespace dinocell
