#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dinocell/dataset.hpp"
#include "dinocell/head.hpp"
#include "dinocell/metrics.hpp"

namespace dinocell {

struct Fold {
  std::vector<std::size_t> train;  // ascending
  std::vector<std::size_t> val;    // ascending
};

// Shuffles ids with the seed and deals them into k near-equal validation
// blocks. Throws ConfigError when k < 2 or k > ids.size().
std::vector<Fold> kfold_split(std::span<const std::size_t> ids, std::size_t k, std::uint64_t seed);

// Throws LeakageError if any holdout index appears in a fold, or if the folds
// do not partition the train ids.
void check_folds(std::span<const Fold> folds, std::span<const std::size_t> train_ids,
                 std::span<const std::size_t> holdout);

// Refits on exactly the given rows and throws LeakageError unless the result
// is bitwise equal to stats.
void check_standardizer_source(const StandardizationStats& stats, std::span<const float> embeddings,
                               std::size_t dim, std::span<const std::size_t> fit_rows);

std::vector<float> gather(std::span<const float> embeddings, std::size_t dim,
                          std::span<const std::size_t> rows);

// One row of the comparison table.
struct TableRow {
  std::string weights;   // backbone source, e.g. "pretrained" / "scratch"
  std::string model;     // architecture label
  std::string approach;  // "mapping" / "replication"
  std::size_t epochs = 0;

  bool operator==(const TableRow&) const = default;
};

struct FoldResult {
  std::size_t fold = 0;
  std::size_t train_rows = 0;
  std::size_t val_rows = 0;
  double val_macro_f1 = 0.0;
  double test_macro_f1 = 0.0;
  std::vector<double> test_f1_per_class;

  bool operator==(const FoldResult&) const = default;
};

struct CVReport {
  TableRow row;
  std::vector<FoldResult> folds;
  MeanStd val;
  MeanStd test;
  std::size_t test_rows = 0;
  nlohmann::json provenance;  // embedding hash, head config, seeds

  bool operator==(const CVReport&) const = default;
};

nlohmann::json to_json(const CVReport& report);
CVReport cv_report_from_json(const nlohmann::json& j);

struct CrossvalOptions {
  std::size_t folds = 5;
  std::uint64_t fold_seed = 0;
  TableRow row;
  nlohmann::json provenance = nlohmann::json::object();
  std::function<void(std::size_t fold, const HeadEpochLog&)> on_epoch;
};

// embeddings: [n x dim] raw (unstandardized). Per fold the standardizer is
// fit on the fold's train rows only; the holdout rows score every fold model.
CVReport crossval_run(std::span<const float> embeddings, std::size_t dim,
                      std::span<const LabelVector> labels, const HoldoutSplit& split,
                      const HeadConfig& head_config, const CrossvalOptions& options);

// e.g. "0.7350 (± 0.0123)"
std::string format_mean_std(double mean, double std);

std::string render_table(std::span<const CVReport> reports);
std::string render_fold_table(const CVReport& report);
std::string render_svg(std::span<const CVReport> reports);

}  // namespace dinocell
