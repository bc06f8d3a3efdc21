#pragma once

#include <cstdint>
#include <vector>

#include "floodseg/tensor.hpp"

namespace floodseg {

enum class Mode { kTrain, kEval };

/// Hyperparameters shared by conv2d: stride, zero padding and dilation (atrous rate).
struct ConvParams {
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t dilation = 1;
};

/// floor((in + 2p - d(k-1) - 1) / s) + 1; throws ShapeError when < 1.
std::int64_t conv_output_size(std::int64_t in, std::int64_t kernel, const ConvParams& p);

// conv2d: cross-correlation, weight [Cout, Cin, k, k], optional bias [Cout]
// (pass an empty Tensor for no bias).

Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvParams& p);

struct ConvGrads {
  Tensor x;
  Tensor weight;
  Tensor bias;  // empty when the forward had no bias
};

ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& x, const Tensor& weight, bool has_bias,
                          const ConvParams& p);

// conv_transpose2d: weight [Cin, Cout, k, k]; only k == s == 2 is supported.

Tensor conv_transpose2d_forward(const Tensor& x, const Tensor& weight, const Tensor& bias, std::int64_t kernel = 2,
                                std::int64_t stride = 2);

ConvGrads conv_transpose2d_backward(const Tensor& grad_out, const Tensor& x, const Tensor& weight, bool has_bias);

// batchnorm2d: per-channel statistics over N x H x W.

struct BatchNormConfig {
  float momentum = 0.1f;
  float eps = 1e-5f;
};

/// Train mode normalises with biased batch statistics and folds them into the
/// running buffers (running_var receives the unbiased estimate). Eval mode uses
/// the running buffers and leaves them untouched.
Tensor batchnorm2d_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, Mode mode, Tensor& running_mean,
                           Tensor& running_var, const BatchNormConfig& cfg = {});

/// Eval-mode forward as a pure function of its inputs.
Tensor batchnorm2d_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                         const Tensor& running_var, const BatchNormConfig& cfg = {});

struct BatchNormGrads {
  Tensor x;
  Tensor gamma;
  Tensor beta;
};

/// Gradient of the train-mode forward (batch statistics recomputed from x).
BatchNormGrads batchnorm2d_backward(const Tensor& grad_out, const Tensor& x, const Tensor& gamma,
                                    const BatchNormConfig& cfg = {});

// Parameter-free layers.

/// Padded positions never win the maximum.
Tensor maxpool2d_forward(const Tensor& x, std::int64_t kernel = 2, std::int64_t stride = 2, std::int64_t padding = 0);
/// Routes each output gradient to the first maximum in row-major window order.
Tensor maxpool2d_backward(const Tensor& grad_out, const Tensor& x, std::int64_t kernel = 2, std::int64_t stride = 2,
                          std::int64_t padding = 0);

Tensor global_avg_pool_forward(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& grad_out, const Shape& in_shape);

Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Splits along channels at `first_channels`; inverse of concat_channels.
std::pair<Tensor, Tensor> split_channels(const Tensor& x, std::int64_t first_channels);

/// grad * (x > 0)
Tensor relu_backward(const Tensor& grad_out, const Tensor& x);

}  // namespace floodseg
