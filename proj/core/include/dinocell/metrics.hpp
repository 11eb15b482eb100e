#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dinocell/dataset.hpp"

namespace dinocell {

struct ConfusionCounts {
  std::vector<std::uint64_t> tp, fp, fn;

  std::size_t classes() const { return tp.size(); }
};

ConfusionCounts confusion(std::span<const LabelVector> y_true, std::span<const LabelVector> y_pred);

// Classes with an empty precision or recall denominator (or P + R == 0)
// score 0.
std::vector<double> f1_per_class(const ConfusionCounts& counts);

double macro_f1(std::span<const double> f1s);
double macro_f1(std::span<const LabelVector> y_true, std::span<const LabelVector> y_pred);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample (n - 1); 0 for a single value

  bool operator==(const MeanStd&) const = default;
};
MeanStd mean_std(std::span<const double> values);

}  // namespace dinocell
