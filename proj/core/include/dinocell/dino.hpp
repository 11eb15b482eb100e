#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "dinocell/adapters.hpp"
#include "dinocell/dataset.hpp"
#include "dinocell/image.hpp"
#include "dinocell/optim.hpp"
#include "dinocell/tensor.hpp"
#include "dinocell/vit.hpp"

namespace dinocell {

struct DinoConfig {
  ViTConfig backbone;  // image_size must equal global_crop_px
  std::size_t out_dim = 256;  // K
  std::size_t head_hidden = 256;
  std::size_t head_bottleneck = 64;
  float tau_student = 0.1f;
  float tau_teacher = 0.04f;
  double lambda_start = 0.996;
  double lambda_end = 1.0;
  float center_momentum = 0.9f;
  bool centering = true;

  std::size_t n_local_views = 6;
  std::size_t global_crop_px = 96;
  double global_scale_min = 0.4;
  double global_scale_max = 1.0;
  std::size_t local_crop_px = 48;
  double local_scale_min = 0.05;
  double local_scale_max = 0.4;
  double flip_probability = 0.5;
  double protein_rescale_probability = 0.2;
  float protein_rescale_min = 0.5f;
  float protein_rescale_max = 1.5f;
  std::size_t protein_channel = 0;
  // Experimental elastic deformation, off by default.
  bool cell_warping = false;
  double warp_sigma_px = 2.0;

  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  std::size_t warmup_epochs = 0;
  float lr = 5e-4f;
  float min_lr = 1e-6f;
  float weight_decay = 0.04f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  std::uint64_t seed = 0;
};

void validate(const DinoConfig& config);
nlohmann::json to_json(const DinoConfig& config);
DinoConfig dino_config_from_json(const nlohmann::json& j);

// Projection head: two GELU hidden layers, a linear bottleneck that is
// l2-normalized, then a weight-normalized (row-unit) final layer to K logits.
struct DinoHead {
  Tensor w1, b1, w2, b2, w3, b3;
  Tensor last;  // [K x bottleneck], rows normalized on use

  std::vector<Tensor> parameters() const;
  DinoHead clone() const;
};

DinoHead init_dino_head(std::size_t in_dim, std::size_t hidden, std::size_t bottleneck,
                        std::size_t out_dim, std::mt19937_64& rng);
Tensor head_forward(const DinoHead& head, const Tensor& x);

struct DinoState {
  DinoConfig config;
  ViTParams student, teacher;
  DinoHead student_head, teacher_head;
  std::vector<float> center;
  AdamWState optimizer;
  std::size_t epoch = 0;  // completed epochs
  std::uint64_t step = 0;
  std::vector<std::size_t> train_indices, holdout_indices;

  std::vector<Tensor> student_parameters() const;
  std::vector<Tensor> teacher_parameters() const;
};

// Student initialized from config seeds; the teacher starts as its copy.
DinoState init_dino(const DinoConfig& config);

struct ViewSet {
  std::vector<MultiChannelImage> global;  // always 2
  std::vector<MultiChannelImage> local;

  std::size_t size() const { return global.size() + local.size(); }
};

MultiChannelImage random_resized_crop(const MultiChannelImage& image, std::size_t out_px,
                                      double scale_min, double scale_max, std::mt19937_64& rng);
MultiChannelImage elastic_warp(const MultiChannelImage& image, double sigma_px, std::mt19937_64& rng);
ViewSet make_views(const MultiChannelImage& image, const DinoConfig& config, std::mt19937_64& rng);

struct DinoLossOutput {
  Tensor loss;
  std::vector<float> teacher_logits;  // [2B x K], uncentered
  double teacher_entropy = 0.0;       // mean over teacher rows, nats
  std::size_t pair_terms = 0;         // per image
};

// student_logits: [V*B x K], view-major with the two global views first.
// teacher_logits: [2B x K] for the global views in the same order.
// Averages H(P_t(g), P_s(v)) over g in {0, 1}, v != g and over images.
DinoLossOutput dino_loss_from_logits(const Tensor& student_logits,
                                     std::span<const float> teacher_logits, std::size_t batch,
                                     std::span<const float> center, float tau_student,
                                     float tau_teacher);

// Full forward of a batch of view sets through student and teacher.
DinoLossOutput dino_loss(const DinoState& state, std::span<const ViewSet> views);

// teacher <- lambda * teacher + (1 - lambda) * student, elementwise.
void ema_update(std::span<const Tensor> teacher, std::span<const Tensor> student, double lambda);
void ema_update(DinoState& state, double lambda);

std::vector<float> center_update(std::span<const float> center,
                                 std::span<const float> teacher_logits, float momentum);

double lambda_at(const DinoConfig& config, std::uint64_t step, std::uint64_t total_steps);
double lr_at(const DinoConfig& config, std::uint64_t step, std::uint64_t total_steps,
             std::uint64_t steps_per_epoch);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double teacher_entropy = 0.0;
  double lambda = 0.0;
  double lr = 0.0;
};
nlohmann::json to_json(const EpochLog& log);

struct PretrainOptions {
  std::uint64_t split_seed = 0;
  double holdout_fraction = 0.1;
  // Maps source channels onto the backbone's input slots before cropping.
  std::optional<ChannelMapSpec> input_map;
  std::function<void(const EpochLog&)> on_epoch;
  // Continue from a saved state instead of initializing.
  std::optional<DinoState> resume;
  // Stop early (schedules still span config.epochs), e.g. to checkpoint.
  std::optional<std::size_t> stop_after_epoch;
};

struct PretrainResult {
  DinoState state;
  std::vector<EpochLog> log;
};

// Loads and normalizes the manifest images, holds out a fraction, and trains
// on the rest until config.epochs.
PretrainResult pretrain(const DatasetManifest& dataset, const DinoConfig& config,
                        PretrainOptions options = {});
// Same loop over already normalized images.
PretrainResult pretrain_images(std::span<const MultiChannelImage> images, const DinoConfig& config,
                               PretrainOptions options = {});

inline constexpr std::uint32_t kDinoFormatVersion = 1;
std::vector<std::uint8_t> encode_dino(const DinoState& state);
DinoState decode_dino(std::span<const std::uint8_t> bytes);
void save_dino(const std::filesystem::path& path, const DinoState& state);
DinoState load_dino(const std::filesystem::path& path);

}  // namespace dinocell
