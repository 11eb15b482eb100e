#include "dinocell/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

#include "dinocell/errors.hpp"

namespace dinocell {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<float> data) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::vector<float>& detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad;
}

bool GradMode::enabled() { return t_grad_enabled; }
void GradMode::set_enabled(bool on) { t_grad_enabled = on; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape) {
  auto n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<float>(n, 0.0f)));
}

Tensor Tensor::full(Shape shape, float value) {
  auto n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<float>(n, value)));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  auto node = new_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value) { return from({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<float> values) {
  return from(std::move(shape), std::move(values), true);
}

const Shape& Tensor::shape() const {
  if (!node_) throw GraphError("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const float> Tensor::data() const {
  if (!node_) throw GraphError("use of undefined tensor");
  return node_->data;
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

std::span<float> Tensor::mutable_data() {
  if (!node_) throw GraphError("use of undefined tensor");
  if (!node_->is_leaf) throw GraphError("only leaf tensors may be modified in place");
  return node_->data;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && node_->is_leaf; }

std::uint64_t Tensor::id() const {
  if (!node_) throw GraphError("use of undefined tensor");
  return node_->id;
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

Tensor Tensor::clone_parameter() const { return from(shape(), node_->data, true); }

void detail::check_finite(std::span<const float> values, const char* op_name) {
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op_name);
    }
  }
}

Tensor detail::make_result(Shape shape, std::vector<float> data, std::vector<Tensor> parents,
                           std::function<void(Node&)> backward, const char* op_name) {
  check_finite(data, op_name);
  auto node = new_node(std::move(shape), std::move(data));
  if (!GradMode::enabled()) return Tensor(std::move(node));
  bool any = false;
  for (const auto& p : parents) {
    if (p.requires_grad()) {
      any = true;
      break;
    }
  }
  if (!any) return Tensor(std::move(node));
  node->requires_grad = true;
  node->is_leaf = false;
  node->parents.reserve(parents.size());
  for (auto& p : parents) node->parents.push_back(p.node());
  node->backward_fn = std::move(backward);
  return Tensor(std::move(node));
}

}  // namespace dinocell
