#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace refill {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until touched by backward / zero_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;  // unset for leaves

  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// While a NoGradScope is alive on this thread, ops compute values only and
/// record no tape. Used for validation / evaluation passes.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;
};

bool grad_enabled();

/// Dense n-dimensional double tensor with reverse-mode gradient support.
/// Value-semantic handle: copies share the underlying node, which is what
/// makes parameter registries and model fields alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t dim() const;
  int64_t size() const;
  double item() const;  // scalar tensors only

  std::span<const double> values() const;
  /// Mutable access to leaf storage (optimizer updates, checkpoint load).
  /// Must not be called on tensors produced by recorded operations.
  std::span<double> values_mut();

  bool requires_grad() const;
  /// Empty span until a backward pass (or zero_grad) allocates the buffer.
  std::span<const double> grad() const;
  void zero_grad();

  friend void backward(const Tensor& loss);
  friend class OpBuilder;

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;
};

// Elementwise and structural primitives. All ops validate shapes and support
// reverse-mode gradients for any input with requires_grad set.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);

/// Batched matrix product. `a` is [..., m, k]; `b` is either [k, n] (shared
/// right operand, gradients summed over the batch) or [..., k, n] with
/// leading dims equal to a's.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<int64_t>& axes);
Tensor reshape(const Tensor& a, Shape target);
Tensor stack_first(const std::vector<Tensor>& parts);
Tensor select_first(const Tensor& a, int64_t index);

/// Max-subtracted softmax along `axis` (negative axes count from the back).
Tensor softmax(const Tensor& a, int64_t axis);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse_loss(const Tensor& pred, const Tensor& truth);

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable tensor with requires_grad until explicitly zeroed.
void backward(const Tensor& loss);

}  // namespace refill
