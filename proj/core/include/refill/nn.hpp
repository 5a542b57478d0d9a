#pragma once

#include <random>
#include <string>
#include <vector>

#include "refill/tensor.hpp"

namespace refill {

/// A named trainable tensor. Names are path-like ("block0.content.wq") and
/// unique within a model; the checkpoint format is keyed on them.
struct Parameter {
  std::string name;
  Tensor tensor;
};

/// Weight init: uniform in (-1/sqrt(fan_in), +1/sqrt(fan_in)).
Tensor uniform_fan_in(Shape shape, int64_t fan_in, std::mt19937_64& rng);

/// y = x W + b for x [..., in], W [in, out], b [out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Standardize the last axis then apply the affine gain/bias. A last axis of
/// size 1 is degenerate (no meaningful variance); the output is then the bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Sinusoidal position table [length, dim]; constant, not trainable.
/// dim must be even.
Tensor positional_encoding(int64_t length, int64_t dim);

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Scaled dot-product multi-head attention without causal masking. Inputs are
/// [seq, d] or [batch, seq, d]; the output matches the query shape. When
/// `attention_out` is non-null it receives the post-softmax weights
/// ([batch, heads, seq, seq]) for inspection.
Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value,
                            int64_t heads, const AttentionParams& params,
                            Tensor* attention_out = nullptr);

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

/// linear(d -> d_ff) -> relu -> linear(d_ff -> d).
Tensor feed_forward(const Tensor& x, const FeedForwardParams& params);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a parameter list. Throws NumericFailure if any
/// registered parameter has no gradient buffer when step() runs.
class Adam {
 public:
  explicit Adam(std::vector<Parameter>& params, AdamConfig config = {});

  void step();
  void zero_grad();
  int64_t step_count() const { return step_count_; }
  const AdamConfig& config() const { return config_; }

 private:
  std::vector<Parameter>* params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  int64_t step_count_ = 0;
};

}  // namespace refill
