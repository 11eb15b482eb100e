#include "dinocell/autograd.hpp"

#include <unordered_set>
#include <vector>

#include "dinocell/errors.hpp"

namespace dinocell {

Tensor GradientRecord::get(const Tensor& param) const {
  auto it = grads_.find(param.id());
  if (it == grads_.end()) return Tensor::zeros(param.shape());
  return it->second;
}

GradientRecord backward(const Tensor& loss) {
  if (!loss.defined()) throw GraphError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + shape_string(loss.shape()));
  }
  auto root = loss.node();
  if (root->consumed) throw GraphError("graph already consumed by a previous backward pass");

  GradientRecord record;
  if (!root->requires_grad) {
    root->consumed = true;
    return record;
  }

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    // Interior nodes left over from an earlier, consumed graph act as constants.
    if (node->is_leaf || !node->backward_fn) continue;
    if (node->grad.empty()) node->ensure_grad();
    node->backward_fn(*node);
  }

  for (detail::Node* node : order) {
    if (node->is_leaf) {
      if (!node->grad.empty()) {
        record.set(node->id, Tensor::from(node->shape, std::move(node->grad)));
        node->grad.clear();
      }
      continue;
    }
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->backward_fn = nullptr;
    node->consumed = true;
  }
  // Parents are dropped last so no node is freed while still listed in `order`.
  for (detail::Node* node : order) {
    if (!node->is_leaf) node->parents.clear();
  }
  return record;
}

}  // namespace dinocell
