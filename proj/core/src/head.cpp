#include "dinocell/head.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <random>

#include "dinocell/autograd.hpp"
#include "dinocell/binary_io.hpp"
#include "dinocell/errors.hpp"
#include "dinocell/metrics.hpp"
#include "dinocell/ops.hpp"
#include "dinocell/optim.hpp"
#include "dinocell/seeding.hpp"

namespace dinocell {

namespace {

std::size_t count_rows(std::span<const float> rows, std::size_t dim) {
  if (dim == 0 || rows.size() % dim != 0) {
    throw ShapeError("row buffer of " + std::to_string(rows.size()) +
                     " values is not a multiple of dim " + std::to_string(dim));
  }
  return rows.size() / dim;
}

}  // namespace

StandardizationStats fit_standardizer(std::span<const float> rows, std::size_t dim, double epsilon) {
  const std::size_t n = count_rows(rows, dim);
  if (n < 2) throw ConfigError("fit_standardizer needs at least 2 training rows");
  StandardizationStats s{std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0), epsilon};
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < dim; ++k) s.mean[k] += rows[r * dim + k];
  }
  for (auto& m : s.mean) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < dim; ++k) {
      const double d = rows[r * dim + k] - s.mean[k];
      s.std[k] += d * d;
    }
  }
  for (auto& v : s.std) v = std::max(std::sqrt(v / static_cast<double>(n)), epsilon);
  return s;
}

std::vector<float> apply_standardizer(const StandardizationStats& s, std::span<const float> rows) {
  const std::size_t n = count_rows(rows, s.dim());
  std::vector<float> out(rows.size());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < s.dim(); ++k) {
      const double v = rows[r * s.dim() + k];
      // values within the epsilon floor of a constant dimension read as 0
      out[r * s.dim() + k] = s.std[k] <= s.epsilon && std::abs(v - s.mean[k]) <= s.epsilon
                                 ? 0.0f
                                 : static_cast<float>((v - s.mean[k]) / s.std[k]);
    }
  }
  return out;
}

std::vector<double> resample_raw_weights(std::span<const LabelVector> labels) {
  if (labels.empty()) throw ConfigError("resample_weights: empty dataset");
  const std::size_t n = labels.front().size();
  std::vector<std::size_t> counts(n, 0);
  for (const auto& l : labels) {
    if (l.size() != n) throw ShapeError("resample_weights: label width mismatch");
    for (std::size_t k = 0; k < n; ++k) counts[k] += l[k] != 0;
  }
  std::vector<double> w(labels.size(), 0.0);
  double min_positive = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t rarest = 0;
    for (std::size_t k = 0; k < n; ++k) {
      if (labels[i][k] && (rarest == 0 || counts[k] < rarest)) rarest = counts[k];
    }
    if (rarest > 0) {
      w[i] = 1.0 / static_cast<double>(rarest);
      min_positive = std::min(min_positive, w[i]);
    }
  }
  if (!std::isfinite(min_positive)) min_positive = 1.0;  // nobody has a label
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (w[i] == 0.0) w[i] = min_positive;
  }
  return w;
}

std::vector<double> resample_weights(std::span<const LabelVector> labels) {
  auto w = resample_raw_weights(labels);
  double total = 0.0;
  for (double v : w) total += v;
  for (double& v : w) v /= total;
  return w;
}

void validate(const HeadConfig& c) {
  if (c.classes == 0) throw ConfigError("head: classes must be positive");
  for (auto h : c.hidden) {
    if (h == 0) throw ConfigError("head: hidden sizes must be positive");
  }
  if (!(c.dropout >= 0.0f && c.dropout < 1.0f)) throw ConfigError("head: dropout must be in [0, 1)");
  if (!(c.lr >= 0.0f) || !(c.min_lr >= 0.0f) || !(c.weight_decay >= 0.0f)) {
    throw ConfigError("head: optimizer settings out of range");
  }
  if (c.batch_size == 0) throw ConfigError("head: batch_size must be positive");
  if (!(c.threshold > 0.0f && c.threshold < 1.0f)) throw ConfigError("head: threshold must be in (0, 1)");
}

nlohmann::json to_json(const HeadConfig& c) {
  return {{"hidden", c.hidden},   {"dropout", c.dropout},       {"classes", c.classes},
          {"lr", c.lr},           {"min_lr", c.min_lr},         {"weight_decay", c.weight_decay},
          {"betas", {c.beta1, c.beta2}}, {"epochs", c.epochs},   {"batch_size", c.batch_size},
          {"threshold", c.threshold},    {"resample", c.resample}, {"seed", c.seed}};
}

HeadConfig head_config_from_json(const nlohmann::json& j) {
  HeadConfig c;
  try {
    c.hidden = j.value("hidden", c.hidden);
    c.dropout = j.value("dropout", c.dropout);
    c.classes = j.value("classes", c.classes);
    c.lr = j.value("lr", c.lr);
    c.min_lr = j.value("min_lr", c.min_lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("betas")) {
      c.beta1 = j.at("betas").at(0);
      c.beta2 = j.at("betas").at(1);
    }
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.threshold = j.value("threshold", c.threshold);
    c.resample = j.value("resample", c.resample);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("head config: ") + e.what());
  }
  return c;
}

std::vector<Tensor> ClassifierHead::parameters() const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.push_back(weights[i]);
    out.push_back(biases[i]);
  }
  return out;
}

ClassifierHead init_head(std::size_t input_dim, const HeadConfig& config) {
  validate(config);
  if (input_dim == 0) throw ShapeError("head: input dim must be positive");
  ClassifierHead h;
  h.config = config;
  h.input_dim = input_dim;
  std::mt19937_64 rng(derive_seed(config.seed, {0x1A7E}));
  std::vector<std::size_t> sizes{input_dim};
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(config.classes);
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(sizes[l]));
    std::uniform_real_distribution<float> u(-bound, bound);
    std::vector<float> w(sizes[l] * sizes[l + 1]), b(sizes[l + 1]);
    for (auto& v : w) v = u(rng);
    for (auto& v : b) v = u(rng);
    h.weights.push_back(Tensor::parameter({sizes[l], sizes[l + 1]}, std::move(w)));
    h.biases.push_back(Tensor::parameter({sizes[l + 1]}, std::move(b)));
  }
  return h;
}

Tensor head_logits(const ClassifierHead& head, const Tensor& rows, std::mt19937_64* dropout_rng) {
  if (rows.rank() != 2 || rows.dim(1) != head.input_dim) {
    throw ShapeError("head expects [n x " + std::to_string(head.input_dim) + "] rows, got " +
                     shape_string(rows.shape()));
  }
  Tensor x = rows;
  for (std::size_t l = 0; l < head.weights.size(); ++l) {
    x = ops::linear(x, head.weights[l], head.biases[l]);
    if (l + 1 < head.weights.size()) {
      x = ops::relu(x);
      if (dropout_rng != nullptr && head.config.dropout > 0.0f) {
        x = ops::dropout(x, head.config.dropout, *dropout_rng);
      }
    }
  }
  return x;
}

nlohmann::json to_json(const HeadEpochLog& log) {
  return {{"epoch", log.epoch},
          {"train_loss", log.train_loss},
          {"val_macro_f1", log.val_macro_f1},
          {"lr", log.lr}};
}

std::vector<LabelVector> threshold_logits(std::span<const float> logits, std::size_t classes,
                                          float threshold) {
  const std::size_t n = count_rows(logits, classes);
  std::vector<LabelVector> out(n, LabelVector(classes, 0));
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < classes; ++k) {
      const double z = logits[r * classes + k];
      const double p = 1.0 / (1.0 + std::exp(-z));
      out[r][k] = p > threshold ? 1 : 0;
    }
  }
  return out;
}

std::vector<LabelVector> predict(const ClassifierHead& head, std::span<const float> rows,
                                 float threshold) {
  count_rows(rows, head.input_dim);
  NoGradGuard guard;
  const Tensor x = Tensor::from({rows.size() / head.input_dim, head.input_dim},
                                std::vector<float>(rows.begin(), rows.end()));
  const Tensor logits = head_logits(head, x);
  return threshold_logits(logits.data(), head.config.classes, threshold);
}

HeadTrainResult train_head(const LabeledRows& train, const LabeledRows& val, std::size_t dim,
                           const HeadConfig& config,
                           const std::function<void(const HeadEpochLog&)>& on_epoch) {
  validate(config);
  const std::size_t n = count_rows(train.rows, dim);
  if (n == 0 || train.labels.size() != n) throw ShapeError("train_head: rows and labels disagree");
  const std::size_t n_val = val.rows.empty() ? 0 : count_rows(val.rows, dim);
  if (val.labels.size() != n_val) throw ShapeError("train_head: validation rows and labels disagree");
  for (const auto& l : train.labels) {
    if (l.size() != config.classes) {
      throw ShapeError("train_head: label width " + std::to_string(l.size()) + " != classes " +
                       std::to_string(config.classes));
    }
  }

  HeadTrainResult result{init_head(dim, config), {}};
  ClassifierHead& head = result.head;
  auto params = head.parameters();
  std::unique_ptr<bool[]> no_decay(new bool[params.size()]);
  for (std::size_t i = 0; i < params.size(); ++i) no_decay[i] = params[i].rank() == 1;
  AdamWState opt({config.lr, config.weight_decay, config.beta1, config.beta2, 1e-8f});

  std::mt19937_64 sample_rng(derive_seed(config.seed, {0x5A3F}));
  std::mt19937_64 dropout_rng(derive_seed(config.seed, {0xD0D0}));
  std::discrete_distribution<std::size_t> draw;
  if (config.resample) {
    const auto weights = resample_weights(train.labels);
    draw = std::discrete_distribution<std::size_t>(weights.begin(), weights.end());
  }

  const std::size_t bs = std::min(config.batch_size, n);
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  const auto total = static_cast<std::int64_t>(std::max<std::size_t>(config.epochs * steps_per_epoch, 1));
  std::int64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    if (config.resample) {
      for (auto& i : order) i = draw(sample_rng);
    } else {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), sample_rng);
    }
    double loss_sum = 0.0;
    double lr = config.lr;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(start + bs, n);
      std::vector<float> x, y;
      x.reserve((end - start) * dim);
      y.reserve((end - start) * config.classes);
      for (std::size_t k = start; k < end; ++k) {
        auto row = train.rows.subspan(order[k] * dim, dim);
        x.insert(x.end(), row.begin(), row.end());
        for (auto v : train.labels[order[k]]) y.push_back(static_cast<float>(v));
      }
      const Tensor xb = Tensor::from({end - start, dim}, std::move(x));
      const Tensor yb = Tensor::from({end - start, config.classes}, std::move(y));
      Tensor loss = ops::bce_with_logits(head_logits(head, xb, &dropout_rng), yb);
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw NumericError("train_head: non-finite loss at epoch " + std::to_string(epoch + 1));
      auto grads = backward(loss);
      lr = cosine_schedule(step, total, config.lr, config.min_lr);
      opt.hyper.lr = static_cast<float>(lr);
      adamw_step(params, grads, opt, std::span<const bool>(no_decay.get(), params.size()));
      loss_sum += lv * static_cast<double>(end - start);
      ++step;
    }
    HeadEpochLog entry{epoch + 1, loss_sum / static_cast<double>(n), 0.0, lr};
    if (n_val > 0) {
      entry.val_macro_f1 = macro_f1(val.labels, predict(head, val.rows, config.threshold));
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return result;
}

std::vector<std::uint8_t> encode_head(const ClassifierHead& h) {
  io::ByteWriter w;
  w.u32(kHeadFormatVersion);
  w.str(to_json(h.config).dump());
  w.u64(h.input_dim);
  w.u64(h.stats.dim());
  for (double v : h.stats.mean) w.u64(std::bit_cast<std::uint64_t>(v));
  for (double v : h.stats.std) w.u64(std::bit_cast<std::uint64_t>(v));
  w.u64(std::bit_cast<std::uint64_t>(h.stats.epsilon));
  const auto params = h.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.u64(p.numel());
    w.f32s(p.data());
  }
  return io::seal("HEAD", w.buffer());
}

ClassifierHead decode_head(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(io::unseal(bytes, "HEAD", "head checkpoint"));
  const auto version = r.u32();
  if (version != kHeadFormatVersion) {
    throw FormatError("head checkpoint: unsupported version " + std::to_string(version));
  }
  HeadConfig cfg;
  try {
    cfg = head_config_from_json(nlohmann::json::parse(r.str()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("head checkpoint: bad config block: ") + e.what());
  }
  const auto input_dim = r.u64();
  const auto stats_dim = r.u64();
  if (stats_dim > r.remaining() / 16) throw FormatError("head checkpoint: stats exceed file");
  ClassifierHead h = init_head(input_dim, cfg);
  h.stats.mean.resize(stats_dim);
  h.stats.std.resize(stats_dim);
  for (auto& v : h.stats.mean) v = std::bit_cast<double>(r.u64());
  for (auto& v : h.stats.std) v = std::bit_cast<double>(r.u64());
  h.stats.epsilon = std::bit_cast<double>(r.u64());
  auto params = h.parameters();
  if (r.u32() != params.size()) throw FormatError("head checkpoint: tensor count mismatch");
  for (auto& p : params) {
    const auto n = r.u64();
    if (n != p.numel()) throw FormatError("head checkpoint: tensor size mismatch");
    auto v = r.f32s(n);
    std::copy(v.begin(), v.end(), p.mutable_data().begin());
  }
  r.expect_end("head checkpoint");
  return h;
}

void save_head(const std::filesystem::path& path, const ClassifierHead& head) {
  io::write_file(path, encode_head(head));
}

ClassifierHead load_head(const std::filesystem::path& path) { return decode_head(io::read_file(path)); }

}  // namespace dinocell
