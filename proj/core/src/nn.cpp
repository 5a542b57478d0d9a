#include "refill/nn.hpp"

#include <cmath>

#include "refill/errors.hpp"

namespace refill {

Tensor uniform_fan_in(Shape shape, int64_t fan_in, std::mt19937_64& rng) {
  if (fan_in < 1) throw ValidationError("uniform_fan_in: fan_in must be >= 1");
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(numel(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(values), /*requires_grad=*/true);
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const Shape& bs = bias.shape();
  if (xs.empty() || ws.size() != 2 || bs.size() != 1) {
    throw ValidationError("linear: expected x [..., in], W [in, out], b [out]");
  }
  const int64_t in = ws[0];
  const int64_t out = ws[1];
  if (xs.back() != in || bs[0] != out) {
    throw ValidationError("linear: dimension mismatch x" + shape_str(xs) + " W" + shape_str(ws) +
                          " b" + shape_str(bs));
  }
  const int64_t rows = x.size() / in;

  const auto xv = x.values();
  const auto wv = weight.values();
  const auto bv = bias.values();
  std::vector<double> y(rows * out);
  for (int64_t r = 0; r < rows; ++r) {
    double* y_row = y.data() + r * out;
    for (int64_t o = 0; o < out; ++o) y_row[o] = bv[o];
    const double* x_row = xv.data() + r * in;
    for (int64_t i = 0; i < in; ++i) {
      const double xi = x_row[i];
      if (xi == 0.0) continue;
      const double* w_row = wv.data() + i * out;
      for (int64_t o = 0; o < out; ++o) y_row[o] += xi * w_row[o];
    }
  }
  Shape out_shape(xs.begin(), xs.end() - 1);
  out_shape.push_back(out);

  return OpBuilder::build(
      std::move(out_shape), std::move(y), {x, weight, bias},
      [rows, in, out](detail::TensorNode& self) {
        const auto& xv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        const auto& g = self.grad;
        if (self.parents[0]->requires_grad) {
          auto& dx = self.parents[0]->grad_buffer();
          for (int64_t r = 0; r < rows; ++r) {
            const double* g_row = g.data() + r * out;
            double* dx_row = dx.data() + r * in;
            for (int64_t i = 0; i < in; ++i) {
              const double* w_row = wv.data() + i * out;
              double s = 0.0;
              for (int64_t o = 0; o < out; ++o) s += g_row[o] * w_row[o];
              dx_row[i] += s;
            }
          }
        }
        if (self.parents[1]->requires_grad) {
          auto& dw = self.parents[1]->grad_buffer();
          for (int64_t r = 0; r < rows; ++r) {
            const double* g_row = g.data() + r * out;
            const double* x_row = xv.data() + r * in;
            for (int64_t i = 0; i < in; ++i) {
              const double xi = x_row[i];
              if (xi == 0.0) continue;
              double* dw_row = dw.data() + i * out;
              for (int64_t o = 0; o < out; ++o) dw_row[o] += xi * g_row[o];
            }
          }
        }
        if (self.parents[2]->requires_grad) {
          auto& db = self.parents[2]->grad_buffer();
          for (int64_t r = 0; r < rows; ++r) {
            const double* g_row = g.data() + r * out;
            for (int64_t o = 0; o < out; ++o) db[o] += g_row[o];
          }
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const Shape& xs = x.shape();
  if (xs.empty()) throw ValidationError("layer_norm requires rank >= 1");
  const int64_t d = xs.back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ValidationError("layer_norm: gain/bias must match the last axis");
  }
  const int64_t rows = x.size() / d;
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();

  if (d == 1) {
    // Degenerate: a single feature has no variance to standardize away.
    std::vector<double> y(rows, bv[0]);
    return OpBuilder::build(xs, std::move(y), {x, gain, bias}, [rows](detail::TensorNode& self) {
      if (!self.parents[2]->requires_grad) return;
      auto& db = self.parents[2]->grad_buffer();
      for (int64_t r = 0; r < rows; ++r) db[0] += self.grad[r];
    });
  }

  std::vector<double> y(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(rows);
  const double inv_d = 1.0 / static_cast<double>(d);
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += row[j];
    mu *= inv_d;
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var *= inv_d;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int64_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      y[r * d + j] = gv[j] * h + bv[j];
    }
  }

  return OpBuilder::build(
      xs, std::move(y), {x, gain, bias},
      [rows, d, inv_d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::TensorNode& self) {
        const auto& gv = self.parents[1]->value;
        const auto& g = self.grad;
        if (self.parents[0]->requires_grad) {
          auto& dx = self.parents[0]->grad_buffer();
          for (int64_t r = 0; r < rows; ++r) {
            const double* g_row = g.data() + r * d;
            const double* h_row = xhat.data() + r * d;
            double mean_gy = 0.0, mean_gyh = 0.0;
            for (int64_t j = 0; j < d; ++j) {
              const double gy = g_row[j] * gv[j];
              mean_gy += gy;
              mean_gyh += gy * h_row[j];
            }
            mean_gy *= inv_d;
            mean_gyh *= inv_d;
            const double is = inv_std[r];
            double* dx_row = dx.data() + r * d;
            for (int64_t j = 0; j < d; ++j) {
              const double gy = g_row[j] * gv[j];
              dx_row[j] += is * (gy - mean_gy - h_row[j] * mean_gyh);
            }
          }
        }
        if (self.parents[1]->requires_grad) {
          auto& dg = self.parents[1]->grad_buffer();
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < d; ++j) dg[j] += g[r * d + j] * xhat[r * d + j];
          }
        }
        if (self.parents[2]->requires_grad) {
          auto& db = self.parents[2]->grad_buffer();
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < d; ++j) db[j] += g[r * d + j];
          }
        }
      });
}

Tensor positional_encoding(int64_t length, int64_t dim) {
  if (length < 1) throw ValidationError("positional_encoding: length must be >= 1");
  if (dim < 2 || dim % 2 != 0) {
    throw ValidationError("positional_encoding: dim must be even, got " + std::to_string(dim));
  }
  std::vector<double> table(length * dim);
  for (int64_t t = 0; t < length; ++t) {
    for (int64_t i = 0; i < dim / 2; ++i) {
      const double omega = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      const double angle = static_cast<double>(t) * omega;
      table[t * dim + 2 * i] = std::sin(angle);
      table[t * dim + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor::from_data({length, dim}, std::move(table));
}

Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value,
                            int64_t heads, const AttentionParams& params, Tensor* attention_out) {
  const bool rank2 = query.dim() == 2;
  if (query.dim() != key.dim() || query.dim() != value.dim() || (query.dim() != 2 && query.dim() != 3)) {
    throw ValidationError("multi_head_attention: inputs must share rank 2 or 3");
  }
  Tensor q_in = rank2 ? reshape(query, {1, query.shape()[0], query.shape()[1]}) : query;
  Tensor k_in = rank2 ? reshape(key, {1, key.shape()[0], key.shape()[1]}) : key;
  Tensor v_in = rank2 ? reshape(value, {1, value.shape()[0], value.shape()[1]}) : value;

  const int64_t batch = q_in.shape()[0];
  const int64_t seq = q_in.shape()[1];
  const int64_t d = q_in.shape()[2];
  if (heads < 1 || d % heads != 0) {
    throw ValidationError("multi_head_attention: model dim " + std::to_string(d) +
                          " not divisible by heads " + std::to_string(heads));
  }
  if (k_in.shape() != v_in.shape() || k_in.shape()[0] != batch || k_in.shape()[2] != d) {
    throw ValidationError("multi_head_attention: key/value shape mismatch");
  }
  const int64_t kv_seq = k_in.shape()[1];
  const int64_t dh = d / heads;

  auto split_heads = [&](const Tensor& t, int64_t s) {
    return permute(reshape(t, {batch, s, heads, dh}), {0, 2, 1, 3});  // [B, h, s, dh]
  };
  Tensor q = split_heads(linear(q_in, params.wq, params.bq), seq);
  Tensor k = split_heads(linear(k_in, params.wk, params.bk), kv_seq);
  Tensor v = split_heads(linear(v_in, params.wv, params.bv), kv_seq);

  Tensor scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = softmax(scores, -1);  // [B, h, seq, kv_seq]
  if (attention_out) *attention_out = attn;

  Tensor context = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {batch, seq, d});
  Tensor out = linear(context, params.wo, params.bo);
  return rank2 ? reshape(out, {seq, d}) : out;
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& params) {
  return linear(relu(linear(x, params.w1, params.b1)), params.w2, params.b2);
}

Adam::Adam(std::vector<Parameter>& params, AdamConfig config)
    : params_(&params), config_(config) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

void Adam::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
  for (size_t p = 0; p < params_->size(); ++p) {
    auto& param = (*params_)[p];
    const auto g = param.tensor.grad();
    if (g.empty()) {
      throw NumericFailure("adam: missing gradient for parameter '" + param.name + "'");
    }
    auto values = param.tensor.values_mut();
    auto& m = m_[p];
    auto& v = v_[p];
    for (size_t i = 0; i < values.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      values[i] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : *params_) p.tensor.zero_grad();
}

}  // namespace refill
