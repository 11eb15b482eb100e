#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "dinocell/tensor.hpp"

// Differentiable operations. Every op validates shapes, rejects non-finite
// results, and records a backward closure when any input requires grad.
namespace dinocell::ops {

// Floor added inside log() by cross_entropy_rows.
inline constexpr float kLogFloor = 1e-12f;

// [m x k] . [k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [m x k] . [n x k]^T
Tensor matmul_bt(const Tensor& a, const Tensor& b);
// x[... x in] . weight[in x out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
// x + y where y's shape equals the trailing dims of x.
Tensor add_broadcast(const Tensor& x, const Tensor& y);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor relu(const Tensor& x);
// Exact (erf) form.
Tensor gelu(const Tensor& x);
// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, float p, std::mt19937_64& rng);

// Normalizes over the last dimension.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-6f);
Tensor l2_normalize_rows(const Tensor& x, float eps = 1e-12f);

// Row-wise softmax of logits / tau over the last dimension.
Tensor tempered_softmax(const Tensor& logits, float tau);
// Mean over rows of -sum_i p_teacher[i] * log(p_student[i] + kLogFloor).
Tensor cross_entropy_rows(const Tensor& p_teacher, const Tensor& p_student);
// Mean over all elements of the numerically stable logistic loss.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// qkv: [N x T x 3*dim] packed as (q | k | v) per token; returns [N x T x dim].
Tensor multi_head_attention(const Tensor& qkv, std::size_t num_heads);

// x: [N x P x d], token: [d] -> [N x (P+1) x d] with token first.
Tensor prepend_token(const Tensor& x, const Tensor& token);
// x: [N x T x d] -> [N x d]
Tensor select_token(const Tensor& x, std::size_t index);
// x: [R x K] -> [indices.size() x K]
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);
// Concatenates along axis 0; trailing dims must agree.
Tensor concat_rows(const std::vector<Tensor>& parts);

// Plain (non-recorded) helpers.
std::vector<float> softmax_values(std::span<const float> logits, std::size_t cols, float tau);
double row_entropy_mean(std::span<const float> probs, std::size_t cols);

}  // namespace dinocell::ops
