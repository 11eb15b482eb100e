#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dinocell {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

// One vertex of the recorded computation graph. Leaves hold parameters or
// inputs; interior nodes carry a closure that pushes their gradient into
// their parents.
struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  std::uint64_t id = 0;
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;

  std::vector<float>& ensure_grad();
};

}  // namespace detail

// Whether operations record a graph on the current thread.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Dense row-major float32 array. Copies share storage; results of operations
// are never modified after creation. Leaf tensors that require gradients are
// parameters and may be updated in place by their owning optimizer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value);
  // Leaf with requires_grad = true.
  static Tensor parameter(Shape shape, std::vector<float> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  std::span<const float> data() const;
  float item() const;
  float at(std::size_t flat_index) const { return data()[flat_index]; }

  // Only valid on leaves; throws GraphError otherwise.
  std::span<float> mutable_data();

  bool requires_grad() const;
  bool is_leaf() const;
  std::uint64_t id() const;

  // A new leaf sharing no graph with this tensor (data copied).
  Tensor detach() const;
  Tensor clone_parameter() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds the output of an op. When grad mode is on and any parent requires
// grad, the node is linked to its parents and keeps `backward`.
Tensor make_result(Shape shape, std::vector<float> data,
                   std::vector<Tensor> parents,
                   std::function<void(Node&)> backward,
                   const char* op_name);

void check_finite(std::span<const float> values, const char* op_name);

}  // namespace detail

}  // namespace dinocell
