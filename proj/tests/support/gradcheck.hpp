#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dinocell/autograd.hpp"
#include "dinocell/ops.hpp"
#include "dinocell/tensor.hpp"

namespace dinocell::testing {

// Central finite differences against the recorded backward pass. Returns the
// worst tensor-wise relative error ||analytic - numeric|| / max(||.||, floor).
inline double gradcheck(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                        float step = 1e-3f, double floor = 1e-6) {
  Tensor loss = loss_fn();
  GradientRecord grads = backward(loss);
  double worst = 0.0;
  for (auto& p : params) {
    Tensor analytic = grads.get(p);
    auto values = p.mutable_data();
    std::vector<double> numeric(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const float saved = values[i];
      NoGradGuard guard;
      values[i] = saved + step;
      const double plus = loss_fn().item();
      values[i] = saved - step;
      const double minus = loss_fn().item();
      values[i] = saved;
      numeric[i] = (plus - minus) / (2.0 * static_cast<double>(step));
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double a = analytic.data()[i];
      diff += (a - numeric[i]) * (a - numeric[i]);
      na += a * a;
      nn += numeric[i] * numeric[i];
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), floor});
    worst = std::max(worst, std::sqrt(diff) / denom);
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f,
                            bool requires_grad = true) {
  std::uniform_real_distribution<float> dist(lo, hi);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Scalar probe sum(y * R) with a fixed random R, so every output element
// contributes a distinct weight to the gradient.
inline Tensor random_projection(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor r = random_tensor(y.shape(), rng, -1.0f, 1.0f, false);
  return ops::sum(ops::mul(y, r));
}

inline std::vector<float> random_stochastic_rows(std::size_t rows, std::size_t cols,
                                                 std::mt19937_64& rng) {
  std::uniform_real_distribution<float> dist(0.05f, 1.0f);
  std::vector<float> v(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (v[r * cols + c] = dist(rng));
    for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] = static_cast<float>(v[r * cols + c] / z);
  }
  return v;
}

}  // namespace dinocell::testing
