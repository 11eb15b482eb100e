#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "dinocell/dataset.hpp"
#include "dinocell/tensor.hpp"

namespace dinocell {

inline constexpr double kStdEpsilon = 1e-8;

struct StandardizationStats {
  std::vector<double> mean;
  std::vector<double> std;  // population std, floored at epsilon
  double epsilon = kStdEpsilon;

  std::size_t dim() const { return mean.size(); }
  bool operator==(const StandardizationStats&) const = default;
};

// rows: [n x dim] row-major, n >= 2.
StandardizationStats fit_standardizer(std::span<const float> rows, std::size_t dim,
                                      double epsilon = kStdEpsilon);
std::vector<float> apply_standardizer(const StandardizationStats& stats, std::span<const float> rows);

// Raw weight 1 / (count of the sample's rarest positive label); label-free
// samples get the smallest positive-label weight.
std::vector<double> resample_raw_weights(std::span<const LabelVector> labels);
// Raw weights normalized to sum to 1.
std::vector<double> resample_weights(std::span<const LabelVector> labels);

struct HeadConfig {
  std::vector<std::size_t> hidden{512, 256};
  float dropout = 0.5f;
  std::size_t classes = 17;
  float lr = 1e-4f;
  float min_lr = 0.0f;
  float weight_decay = 0.04f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  std::size_t epochs = 300;
  std::size_t batch_size = 512;
  float threshold = 0.5f;
  bool resample = true;
  std::uint64_t seed = 0;
};

void validate(const HeadConfig& config);
nlohmann::json to_json(const HeadConfig& config);
HeadConfig head_config_from_json(const nlohmann::json& j);

struct ClassifierHead {
  HeadConfig config;
  std::size_t input_dim = 0;
  std::vector<Tensor> weights;  // [in x out] per layer
  std::vector<Tensor> biases;
  StandardizationStats stats;   // applied by callers before predict

  std::vector<Tensor> parameters() const;
};

// PyTorch-style uniform(+-1/sqrt(fan_in)) initialization.
ClassifierHead init_head(std::size_t input_dim, const HeadConfig& config);

// Logits [rows x classes]; dropout only when rng is given.
Tensor head_logits(const ClassifierHead& head, const Tensor& rows, std::mt19937_64* dropout_rng = nullptr);

struct HeadEpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_macro_f1 = 0.0;
  double lr = 0.0;
};
nlohmann::json to_json(const HeadEpochLog& log);

struct LabeledRows {
  std::span<const float> rows;  // standardized, [n x dim]
  std::span<const LabelVector> labels;
};

struct HeadTrainResult {
  ClassifierHead head;
  std::vector<HeadEpochLog> log;
};

HeadTrainResult train_head(const LabeledRows& train, const LabeledRows& val, std::size_t dim,
                           const HeadConfig& config,
                           const std::function<void(const HeadEpochLog&)>& on_epoch = {});

// Label j is set iff sigmoid(logit_j) > threshold.
std::vector<LabelVector> predict(const ClassifierHead& head, std::span<const float> rows,
                                 float threshold);
std::vector<LabelVector> threshold_logits(std::span<const float> logits, std::size_t classes,
                                          float threshold);

inline constexpr std::uint32_t kHeadFormatVersion = 1;
std::vector<std::uint8_t> encode_head(const ClassifierHead& head);
ClassifierHead decode_head(std::span<const std::uint8_t> bytes);
void save_head(const std::filesystem::path& path, const ClassifierHead& head);
ClassifierHead load_head(const std::filesystem::path& path);

}  // namespace dinocell
