#include "dinocell/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "dinocell/errors.hpp"

namespace dinocell {

void adamw_step(std::span<Tensor> params, const GradientRecord& grads, AdamWState& state,
                std::span<const bool> no_decay) {
  const auto& h = state.hyper;
  if (!(h.lr >= 0.0f)) throw ConfigError("AdamW learning rate must be non-negative");
  if (!no_decay.empty() && no_decay.size() != params.size()) {
    throw ShapeError("AdamW: no_decay mask length differs from parameter count");
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0f);
      state.second_moment.emplace_back(p.numel(), 0.0f);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("AdamW: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  // Validate everything before touching any parameter.
  std::vector<Tensor> gs;
  gs.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i].numel()) {
      throw ShapeError("AdamW: moment shape mismatch for parameter " + std::to_string(i));
    }
    Tensor g = grads.get(params[i]);
    if (g.shape() != params[i].shape()) {
      throw ShapeError("AdamW: gradient shape " + shape_string(g.shape()) +
                       " does not match parameter " + shape_string(params[i].shape()));
    }
    detail::check_finite(g.data(), "AdamW gradient");
    gs.push_back(std::move(g));
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(static_cast<double>(h.beta1), t);
  const double bc2 = 1.0 - std::pow(static_cast<double>(h.beta2), t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto g = gs[i].data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const bool decay = no_decay.empty() || !no_decay[i];
    const float decay_factor = decay ? 1.0f - h.lr * h.weight_decay : 1.0f;
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = h.beta1 * m[j] + (1.0f - h.beta1) * g[j];
      v[j] = h.beta2 * v[j] + (1.0f - h.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p[j] *= decay_factor;
      p[j] -= static_cast<float>(h.lr * m_hat / (std::sqrt(v_hat) + h.epsilon));
    }
  }
}

double cosine_schedule(std::int64_t step, std::int64_t total_steps, double start, double end) {
  if (total_steps < 1) throw ConfigError("cosine_schedule: total_steps must be >= 1");
  if (step < 0 || step > total_steps) {
    throw ConfigError("cosine_schedule: step " + std::to_string(step) + " outside [0, " +
                      std::to_string(total_steps) + "]");
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return end + (start - end) * (1.0 + std::cos(std::numbers::pi * frac)) / 2.0;
}

}  // namespace dinocell
