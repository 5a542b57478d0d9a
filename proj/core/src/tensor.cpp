#include "refill/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "op_builder.hpp"
#include "refill/errors.hpp"

namespace refill {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

namespace detail {

std::vector<double>& TensorNode::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

thread_local int g_no_grad_depth = 0;

void check_shape(const Shape& shape) {
  for (int64_t d : shape) {
    if (d <= 0) throw ValidationError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

std::shared_ptr<detail::TensorNode> new_node(Shape shape, std::vector<double> value) {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  return node;
}

}  // namespace

NoGradScope::NoGradScope() { ++g_no_grad_depth; }
NoGradScope::~NoGradScope() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape(shape);
  auto node = new_node(shape, std::vector<double>(numel(shape), 0.0));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  auto node = new_node(shape, std::vector<double>(numel(shape), value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (static_cast<int64_t>(values.size()) != numel(shape)) {
    throw ValidationError("data length " + std::to_string(values.size()) + " does not match shape " +
                          shape_str(shape));
  }
  auto node = new_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  auto node = new_node(Shape{}, std::vector<double>{value});
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ValidationError("operation on an undefined tensor");
  return node_->shape;
}

int64_t Tensor::dim() const { return static_cast<int64_t>(shape().size()); }

int64_t Tensor::size() const { return static_cast<int64_t>(node_ ? node_->value.size() : 0); }

double Tensor::item() const {
  if (!node_ || node_->value.size() != 1) throw ValidationError("item() requires a scalar tensor");
  return node_->value[0];
}

std::span<const double> Tensor::values() const {
  if (!node_) throw ValidationError("operation on an undefined tensor");
  return node_->value;
}

std::span<double> Tensor::values_mut() {
  if (!node_) throw ValidationError("operation on an undefined tensor");
  return node_->value;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::span<const double> Tensor::grad() const {
  if (!node_) throw ValidationError("operation on an undefined tensor");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_) throw ValidationError("operation on an undefined tensor");
  node_->grad.assign(node_->value.size(), 0.0);
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  }
}

void accumulate(detail::TensorNode& parent, const double* g, int64_t n) {
  auto& buf = parent.grad_buffer();
  for (int64_t i = 0; i < n; ++i) buf[i] += g[i];
}

std::vector<int64_t> strides_of(const Shape& shape) {
  std::vector<int64_t> strides(shape.size());
  int64_t acc = 1;
  for (int64_t i = static_cast<int64_t>(shape.size()) - 1; i >= 0; --i) {
    strides[i] = acc;
    acc *= shape[i];
  }
  return strides;
}

// out[i0,i1,...] = in[index permuted by axes]; shared by forward and backward.
std::vector<double> permute_raw(std::span<const double> in, const Shape& in_shape,
                                const std::vector<int64_t>& axes, Shape& out_shape) {
  const auto dim = static_cast<int64_t>(in_shape.size());
  const auto in_strides = strides_of(in_shape);
  out_shape.assign(dim, 0);
  std::vector<int64_t> step(dim);
  for (int64_t i = 0; i < dim; ++i) {
    out_shape[i] = in_shape[axes[i]];
    step[i] = in_strides[axes[i]];
  }
  const int64_t total = numel(in_shape);
  std::vector<double> out(total);
  std::vector<int64_t> idx(dim, 0);
  int64_t src = 0;
  for (int64_t o = 0; o < total; ++o) {
    out[o] = in[src];
    for (int64_t ax = dim - 1; ax >= 0; --ax) {
      ++idx[ax];
      src += step[ax];
      if (idx[ax] < out_shape[ax]) break;
      src -= step[ax] * out_shape[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return OpBuilder::build(a.shape(), std::move(out), {a, b}, [](detail::TensorNode& self) {
    const int64_t n = static_cast<int64_t>(self.grad.size());
    for (auto& parent : self.parents) {
      if (parent->requires_grad) accumulate(*parent, self.grad.data(), n);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return OpBuilder::build(a.shape(), std::move(out), {a, b}, [](detail::TensorNode& self) {
    const int64_t n = static_cast<int64_t>(self.grad.size());
    if (self.parents[0]->requires_grad) accumulate(*self.parents[0], self.grad.data(), n);
    if (self.parents[1]->requires_grad) {
      auto& buf = self.parents[1]->grad_buffer();
      for (int64_t i = 0; i < n; ++i) buf[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return OpBuilder::build(a.shape(), std::move(out), {a, b}, [](detail::TensorNode& self) {
    const int64_t n = static_cast<int64_t>(self.grad.size());
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      auto& buf = self.parents[0]->grad_buffer();
      for (int64_t i = 0; i < n; ++i) buf[i] += self.grad[i] * bv[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& buf = self.parents[1]->grad_buffer();
      for (int64_t i = 0; i < n; ++i) buf[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return OpBuilder::build(a.shape(), std::move(out), {a}, [factor](detail::TensorNode& self) {
    if (!self.parents[0]->requires_grad) return;
    auto& buf = self.parents[0]->grad_buffer();
    for (size_t i = 0; i < self.grad.size(); ++i) buf[i] += self.grad[i] * factor;
  });
}

Tensor relu(const Tensor& a) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return OpBuilder::build(a.shape(), std::move(out), {a}, [](detail::TensorNode& self) {
    if (!self.parents[0]->requires_grad) return;
    const auto& xv = self.parents[0]->value;
    auto& buf = self.parents[0]->grad_buffer();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (xv[i] > 0.0) buf[i] += self.grad[i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& ash = a.shape();
  const Shape& bsh = b.shape();
  if (ash.size() < 2) throw ValidationError("matmul: left operand must have rank >= 2");
  const bool shared_rhs = bsh.size() == 2 && ash.size() > 2;
  if (!shared_rhs && bsh.size() != ash.size()) {
    throw ValidationError("matmul: rank mismatch " + shape_str(ash) + " vs " + shape_str(bsh));
  }
  const int64_t m = ash[ash.size() - 2];
  const int64_t k = ash[ash.size() - 1];
  const int64_t kb = bsh[bsh.size() - 2];
  const int64_t n = bsh[bsh.size() - 1];
  if (k != kb) {
    throw ValidationError("matmul: inner dimension mismatch " + shape_str(ash) + " vs " + shape_str(bsh));
  }
  if (!shared_rhs) {
    for (size_t i = 0; i + 2 < ash.size(); ++i) {
      if (ash[i] != bsh[i]) {
        throw ValidationError("matmul: batch dimension mismatch " + shape_str(ash) + " vs " + shape_str(bsh));
      }
    }
  }
  Shape out_shape(ash.begin(), ash.end() - 1);
  out_shape.push_back(n);
  const int64_t batch = numel(ash) / (m * k);

  // rank-2 right operands are shared across the batch; gradients sum over it
  const bool rhs_per_batch = bsh.size() != 2;
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(batch * m * n, 0.0);
  for (int64_t q = 0; q < batch; ++q) {
    const double* A = av.data() + q * m * k;
    const double* B = bv.data() + (rhs_per_batch ? q * k * n : 0);
    double* C = out.data() + q * m * n;
    for (int64_t i = 0; i < m; ++i) {
      double* c_row = C + i * n;
      for (int64_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        if (aip == 0.0) continue;
        const double* b_row = B + p * n;
        for (int64_t j = 0; j < n; ++j) c_row[j] += aip * b_row[j];
      }
    }
  }

  return OpBuilder::build(
      std::move(out_shape), std::move(out), {a, b},
      [m, k, n, batch, rhs_per_batch](detail::TensorNode& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        const auto& g = self.grad;
        if (self.parents[0]->requires_grad) {
          auto& da = self.parents[0]->grad_buffer();
          for (int64_t q = 0; q < batch; ++q) {
            const double* G = g.data() + q * m * n;
            const double* B = bv.data() + (rhs_per_batch ? q * k * n : 0);
            double* dA = da.data() + q * m * k;
            for (int64_t i = 0; i < m; ++i) {
              for (int64_t p = 0; p < k; ++p) {
                const double* g_row = G + i * n;
                const double* b_row = B + p * n;
                double s = 0.0;
                for (int64_t j = 0; j < n; ++j) s += g_row[j] * b_row[j];
                dA[i * k + p] += s;
              }
            }
          }
        }
        if (self.parents[1]->requires_grad) {
          auto& db = self.parents[1]->grad_buffer();
          for (int64_t q = 0; q < batch; ++q) {
            const double* G = g.data() + q * m * n;
            const double* A = av.data() + q * m * k;
            double* dB = db.data() + (rhs_per_batch ? q * k * n : 0);
            for (int64_t i = 0; i < m; ++i) {
              for (int64_t p = 0; p < k; ++p) {
                const double aip = A[i * k + p];
                if (aip == 0.0) continue;
                const double* g_row = G + i * n;
                double* db_row = dB + p * n;
                for (int64_t j = 0; j < n; ++j) db_row[j] += aip * g_row[j];
              }
            }
          }
        }
      });
}

Tensor transpose_last2(const Tensor& a) {
  const int64_t d = a.dim();
  if (d < 2) throw ValidationError("transpose_last2 requires rank >= 2");
  std::vector<int64_t> axes(d);
  for (int64_t i = 0; i < d; ++i) axes[i] = i;
  std::swap(axes[d - 2], axes[d - 1]);
  return permute(a, axes);
}

Tensor permute(const Tensor& a, const std::vector<int64_t>& axes) {
  const Shape& in_shape = a.shape();
  const auto dim = static_cast<int64_t>(in_shape.size());
  if (static_cast<int64_t>(axes.size()) != dim) {
    throw ValidationError("permute: axes rank mismatch");
  }
  std::vector<bool> seen(dim, false);
  for (int64_t ax : axes) {
    if (ax < 0 || ax >= dim || seen[ax]) throw ValidationError("permute: invalid axis permutation");
    seen[ax] = true;
  }
  Shape out_shape;
  auto out = permute_raw(a.values(), in_shape, axes, out_shape);
  std::vector<int64_t> inverse(dim);
  for (int64_t i = 0; i < dim; ++i) inverse[axes[i]] = i;
  return OpBuilder::build(std::move(out_shape), std::move(out), {a},
                          [inverse](detail::TensorNode& self) {
                            if (!self.parents[0]->requires_grad) return;
                            Shape back_shape;
                            auto g = permute_raw(self.grad, self.shape, inverse, back_shape);
                            accumulate(*self.parents[0], g.data(), static_cast<int64_t>(g.size()));
                          });
}

Tensor reshape(const Tensor& a, Shape target) {
  check_shape(target);
  if (numel(target) != a.size()) {
    throw ValidationError("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                          shape_str(target));
  }
  const auto av = a.values();
  return OpBuilder::build(std::move(target), std::vector<double>(av.begin(), av.end()), {a},
                          [](detail::TensorNode& self) {
                            if (!self.parents[0]->requires_grad) return;
                            accumulate(*self.parents[0], self.grad.data(),
                                       static_cast<int64_t>(self.grad.size()));
                          });
}

Tensor stack_first(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValidationError("stack_first: no tensors given");
  const Shape& base = parts[0].shape();
  for (const auto& t : parts) {
    if (t.shape() != base) throw ValidationError("stack_first: mismatched part shapes");
  }
  const int64_t block = numel(base);
  Shape out_shape;
  out_shape.push_back(static_cast<int64_t>(parts.size()));
  out_shape.insert(out_shape.end(), base.begin(), base.end());
  std::vector<double> out(block * parts.size());
  for (size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].values();
    std::copy(v.begin(), v.end(), out.begin() + p * block);
  }
  return OpBuilder::build(std::move(out_shape), std::move(out), parts,
                          [block](detail::TensorNode& self) {
                            for (size_t p = 0; p < self.parents.size(); ++p) {
                              if (!self.parents[p]->requires_grad) continue;
                              accumulate(*self.parents[p], self.grad.data() + p * block, block);
                            }
                          });
}

Tensor select_first(const Tensor& a, int64_t index) {
  const Shape& in_shape = a.shape();
  if (in_shape.empty()) throw ValidationError("select_first requires rank >= 1");
  if (index < 0 || index >= in_shape[0]) {
    throw ValidationError("select_first: index " + std::to_string(index) + " out of range");
  }
  Shape out_shape(in_shape.begin() + 1, in_shape.end());
  const int64_t block = numel(out_shape);
  const auto av = a.values();
  std::vector<double> out(av.begin() + index * block, av.begin() + (index + 1) * block);
  return OpBuilder::build(std::move(out_shape), std::move(out), {a},
                          [index, block](detail::TensorNode& self) {
                            if (!self.parents[0]->requires_grad) return;
                            auto& buf = self.parents[0]->grad_buffer();
                            for (int64_t i = 0; i < block; ++i) {
                              buf[index * block + i] += self.grad[i];
                            }
                          });
}

Tensor softmax(const Tensor& a, int64_t axis) {
  const Shape& shape = a.shape();
  const auto dim = static_cast<int64_t>(shape.size());
  if (dim == 0) throw ValidationError("softmax requires rank >= 1");
  if (axis < 0) axis += dim;
  if (axis < 0 || axis >= dim) throw ValidationError("softmax: axis out of range");

  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= shape[i];
  for (int64_t i = axis + 1; i < dim; ++i) inner *= shape[i];
  const int64_t lanes = shape[axis];

  const auto av = a.values();
  std::vector<double> out(av.size());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * lanes * inner + in;
      double max_v = -std::numeric_limits<double>::infinity();
      for (int64_t l = 0; l < lanes; ++l) max_v = std::max(max_v, av[base + l * inner]);
      double denom = 0.0;
      for (int64_t l = 0; l < lanes; ++l) {
        const double e = std::exp(av[base + l * inner] - max_v);
        out[base + l * inner] = e;
        denom += e;
      }
      for (int64_t l = 0; l < lanes; ++l) out[base + l * inner] /= denom;
    }
  }
  return OpBuilder::build(
      shape, std::move(out), {a}, [outer, inner, lanes](detail::TensorNode& self) {
        if (!self.parents[0]->requires_grad) return;
        const auto& s = self.value;
        const auto& g = self.grad;
        auto& buf = self.parents[0]->grad_buffer();
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * lanes * inner + in;
            double dot = 0.0;
            for (int64_t l = 0; l < lanes; ++l) {
              const int64_t idx = base + l * inner;
              dot += g[idx] * s[idx];
            }
            for (int64_t l = 0; l < lanes; ++l) {
              const int64_t idx = base + l * inner;
              buf[idx] += s[idx] * (g[idx] - dot);
            }
          }
        }
      });
}

Tensor sum(const Tensor& a) {
  const auto av = a.values();
  double total = 0.0;
  for (double v : av) total += v;
  return OpBuilder::build(Shape{}, std::vector<double>{total}, {a}, [](detail::TensorNode& self) {
    if (!self.parents[0]->requires_grad) return;
    const double g = self.grad[0];
    auto& buf = self.parents[0]->grad_buffer();
    for (auto& v : buf) v += g;
  });
}

Tensor mean(const Tensor& a) {
  const auto av = a.values();
  double total = 0.0;
  for (double v : av) total += v;
  const double inv = 1.0 / static_cast<double>(av.size());
  return OpBuilder::build(Shape{}, std::vector<double>{total * inv}, {a},
                          [inv](detail::TensorNode& self) {
                            if (!self.parents[0]->requires_grad) return;
                            const double g = self.grad[0] * inv;
                            auto& buf = self.parents[0]->grad_buffer();
                            for (auto& v : buf) v += g;
                          });
}

Tensor mse_loss(const Tensor& pred, const Tensor& truth) {
  require_same_shape(pred, truth, "mse_loss");
  const auto pv = pred.values();
  const auto tv = truth.values();
  double total = 0.0;
  for (size_t i = 0; i < pv.size(); ++i) {
    const double d = pv[i] - tv[i];
    total += d * d;
  }
  const double inv = 1.0 / static_cast<double>(pv.size());
  return OpBuilder::build(
      Shape{}, std::vector<double>{total * inv}, {pred, truth}, [inv](detail::TensorNode& self) {
        const auto& pv = self.parents[0]->value;
        const auto& tv = self.parents[1]->value;
        const double g2 = 2.0 * self.grad[0] * inv;
        if (self.parents[0]->requires_grad) {
          auto& buf = self.parents[0]->grad_buffer();
          for (size_t i = 0; i < pv.size(); ++i) buf[i] += g2 * (pv[i] - tv[i]);
        }
        if (self.parents[1]->requires_grad) {
          auto& buf = self.parents[1]->grad_buffer();
          for (size_t i = 0; i < pv.size(); ++i) buf[i] -= g2 * (pv[i] - tv[i]);
        }
      });
}

void backward(const Tensor& loss) {
  if (!loss.node_ || loss.node_->value.size() != 1) {
    throw ValidationError("backward requires a scalar loss");
  }
  detail::TensorNode* root = loss.node_.get();
  if (!root->requires_grad) return;  // no recorded inputs to reach

  // Postorder DFS over requires_grad ancestry, then run closures root-first.
  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> visited{root};
  struct Frame {
    detail::TensorNode* node;
    size_t next = 0;
  };
  std::vector<Frame> stack{{root}};
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      detail::TensorNode* child = f.node->parents[f.next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.push_back({child});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorNode* node = *it;
    if (node->backprop && !node->grad.empty()) node->backprop(*node);
  }
}

}  // namespace refill
