// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "gmnet/autodiff.hpp"
#include "gmnet/tensor.hpp"

namespace gmnet {

enum class Mode { Train, Eval };

using Rng = std::mt19937_64;

// ---- elementary ops ---------------------------------------------------------

/// Elementwise a + b; shapes must match exactly.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

/// Elementwise product.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

/// Sum of all elements as a shape-[1] scalar.
template <typename T>
Var<T> sum(const Var<T>& x);

/// Joins two (N,C,H,W) tensors along the channel axis, a's channels first.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

// ---- convolution ------------------------------------------------------------

struct ConvGeometry {
  std::size_t groups = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// k*k*(c/g)*(o/g)*g weights, plus o when the layer carries a bias.
std::size_t count_conv_params(std::size_t k, std::size_t c, std::size_t o, std::size_t g, bool with_bias);

/// Output spatial extent; throws when (in + 2*pad - k) is not a multiple of stride.
std::size_t conv_output_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t padding);

/// Grouped 2-D convolution. weight is (o, c/g, k, k); input group j feeds
/// output channels [j*o/g, (j+1)*o/g). Computed as im2col + GEMM per group.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& geo);

// ---- normalization / activation / pooling -----------------------------------

template <typename T>
struct BatchNormState {
  Var<T> gamma;
  Var<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T eps = T(1e-5);
  T stats_momentum = T(0.9);

  explicit BatchNormState(std::size_t channels)
      : gamma(parameter(Tensor<T>::ones({channels}))),
        beta(parameter(Tensor<T>::zeros({channels}))),
        running_mean(Tensor<T>::zeros({channels})),
        running_var(Tensor<T>::ones({channels})) {}

  std::size_t channels() const { return running_mean.numel(); }
};

/// Train mode normalizes with batch statistics and folds them into the
/// running estimates (running = m*running + (1-m)*batch, unbiased variance);
/// eval mode uses the running estimates.
template <typename T>
Var<T> batch_norm(const Var<T>& input, BatchNormState<T>& state, Mode mode);

template <typename T>
Var<T> relu(const Var<T>& x);

/// Mean over k*k windows; trailing partial windows are dropped.
template <typename T>
Var<T> avg_pool2d(const Var<T>& x, std::size_t k, std::size_t stride);

/// (N,C,H,W) -> (N,C)
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);

/// input (N,D), weight (K,D), bias (K) -> input * weight^T + bias
template <typename T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const Var<T>& bias);

/// Inverted dropout: train mode keeps each element with probability keep_prob
/// and rescales survivors by 1/keep_prob; eval mode is the identity.
template <typename T>
Var<T> dropout(const Var<T>& x, double keep_prob, Mode mode, Rng& rng);

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<std::int32_t>& labels);

/// Row-wise softmax of an (N,K) tensor, max-subtracted.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

}  // namespace gmnet
