#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "refill/tensor.hpp"

namespace refill {

// Internal op-node factory. Wires parents and the backward closure only when
// the tape is active and some input needs gradients.
class OpBuilder {
 public:
  static Tensor build(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                      std::function<void(detail::TensorNode&)> backprop) {
    return build(std::move(shape), std::move(value), std::vector<Tensor>(inputs), std::move(backprop));
  }

  static Tensor build(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                      std::function<void(detail::TensorNode&)> backprop) {
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool any_grad = false;
    for (const auto& t : inputs) any_grad |= t.requires_grad();
    if (grad_enabled() && any_grad) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (auto& t : inputs) node->parents.push_back(t.node_);
      node->backprop = std::move(backprop);
    }
    return Tensor(std::move(node));
  }
};

}  // namespace refill
