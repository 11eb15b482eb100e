#include "dinocell/metrics.hpp"

#include <cmath>

#include "dinocell/errors.hpp"

namespace dinocell {

ConfusionCounts confusion(std::span<const LabelVector> y_true, std::span<const LabelVector> y_pred) {
  if (y_true.size() != y_pred.size()) {
    throw ShapeError("confusion: " + std::to_string(y_true.size()) + " truths vs " +
                     std::to_string(y_pred.size()) + " predictions");
  }
  if (y_true.empty()) throw ShapeError("confusion: no samples");
  const std::size_t n = y_true.front().size();
  ConfusionCounts c{std::vector<std::uint64_t>(n), std::vector<std::uint64_t>(n),
                    std::vector<std::uint64_t>(n)};
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i].size() != n || y_pred[i].size() != n) throw ShapeError("confusion: label width mismatch");
    for (std::size_t k = 0; k < n; ++k) {
      const bool t = y_true[i][k] != 0, p = y_pred[i][k] != 0;
      c.tp[k] += t && p;
      c.fp[k] += !t && p;
      c.fn[k] += t && !p;
    }
  }
  return c;
}

std::vector<double> f1_per_class(const ConfusionCounts& c) {
  std::vector<double> out(c.classes(), 0.0);
  for (std::size_t k = 0; k < c.classes(); ++k) {
    const auto tp = static_cast<double>(c.tp[k]);
    const auto pred = tp + static_cast<double>(c.fp[k]);
    const auto real = tp + static_cast<double>(c.fn[k]);
    if (pred == 0.0 || real == 0.0) continue;
    const double p = tp / pred, r = tp / real;
    if (p + r == 0.0) continue;
    out[k] = 2.0 * p * r / (p + r);
  }
  return out;
}

double macro_f1(std::span<const double> f1s) {
  if (f1s.empty()) throw ShapeError("macro_f1: no classes");
  double s = 0.0;
  for (double f : f1s) s += f;
  return s / static_cast<double>(f1s.size());
}

double macro_f1(std::span<const LabelVector> y_true, std::span<const LabelVector> y_pred) {
  const auto f1 = f1_per_class(confusion(y_true, y_pred));
  return macro_f1(f1);
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw ShapeError("mean_std: no values");
  MeanStd r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return r;
}

}  // namespace dinocell
