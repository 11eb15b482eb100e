#pragma once

#include <cstdint>
#include <unordered_map>

#include "dinocell/tensor.hpp"

namespace dinocell {

// Gradients produced by one backward pass, keyed by leaf tensor id.
class GradientRecord {
 public:
  bool contains(const Tensor& param) const { return grads_.count(param.id()) != 0; }
  // Zeros of the parameter's shape when the parameter did not take part.
  Tensor get(const Tensor& param) const;
  std::size_t size() const { return grads_.size(); }

  void set(std::uint64_t id, Tensor grad) { grads_[id] = std::move(grad); }

 private:
  std::unordered_map<std::uint64_t, Tensor> grads_;
};

// Reverse-mode pass from a scalar loss. The recorded graph is released
// afterwards; a second call on the same loss throws GraphError.
GradientRecord backward(const Tensor& loss);

}  // namespace dinocell
