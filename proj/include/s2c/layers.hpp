#pragma once

#include <span>
#include <vector>

#include "s2c/tensor.hpp"

namespace s2c {

// Convolution without bias: every convolution is followed by batch normalization.
// "Convolution" is cross-correlation with symmetric zero padding.
template <RealScalar Scalar>
struct ConvParams {
  Tensor<Scalar> weights;  // out_channels x in_channels x kh x kw
  Index stride = 1;
  Index padding = 0;

  Index out_channels() const { return weights.dim(0); }
  Index in_channels() const { return weights.dim(1); }
  Index kernel_h() const { return weights.dim(2); }
  Index kernel_w() const { return weights.dim(3); }
  Index fan_in() const { return in_channels() * kernel_h() * kernel_w(); }
  Index output_extent(Index input_extent, Index kernel) const {
    return (input_extent + 2 * padding - kernel) / stride + 1;
  }

  // He-style init: zero-mean normal with stddev sqrt(2 / fan_in).
  static ConvParams he_normal(Index out_channels, Index in_channels, Index kernel, Index stride,
                              Index padding, SeededRng& rng);
};

template <RealScalar Scalar>
struct ConvGrads {
  Tensor<Scalar> input;  // empty when not requested
  Tensor<Scalar> weights;
};

template <RealScalar Scalar>
Tensor<Scalar> conv_forward(const Tensor<Scalar>& input, const ConvParams<Scalar>& p);

template <RealScalar Scalar>
ConvGrads<Scalar> conv_backward(const Tensor<Scalar>& input, const ConvParams<Scalar>& p,
                                const Tensor<Scalar>& upstream, bool want_input_grad = true);

enum class Mode { train, eval };

// Per-channel vectors are stored as rank-1 tensors so gamma and beta can be
// addressed as trainable parameters like any other tensor.
template <RealScalar Scalar>
struct BatchNormParams {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  Scalar epsilon = Scalar(1e-5);
  Scalar ema_decay = Scalar(0.9999);

  Index channels() const { return gamma.size(); }

  // gamma 1, beta 0, running mean 0, running variance 1.
  static BatchNormParams standard(Index channels, Scalar ema_decay = Scalar(0.9999));
  void check() const;
};

template <RealScalar Scalar>
struct BatchNormCache {
  Mode mode = Mode::train;
  Tensor<Scalar> xhat;
  typename Tensor<Scalar>::Vector inv_std;
};

template <RealScalar Scalar>
struct BatchNormGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
};

// Train mode normalizes with the batch moments (biased variance) and folds them
// into the running statistics: running = decay * running + (1 - decay) * batch.
// Eval mode reads the running statistics only and leaves p untouched.
template <RealScalar Scalar>
Tensor<Scalar> batch_norm_forward(const Tensor<Scalar>& input, BatchNormParams<Scalar>& p, Mode mode,
                                  BatchNormCache<Scalar>* cache = nullptr);

template <RealScalar Scalar>
Tensor<Scalar> batch_norm_eval(const Tensor<Scalar>& input, const BatchNormParams<Scalar>& p,
                               BatchNormCache<Scalar>* cache = nullptr);

template <RealScalar Scalar>
BatchNormGrads<Scalar> batch_norm_backward(const BatchNormCache<Scalar>& cache,
                                           const BatchNormParams<Scalar>& p,
                                           const Tensor<Scalar>& upstream);

// Junction nonlinearity. Only relu is wired up; the enum is the extension point.
enum class Activation { relu };

template <RealScalar Scalar>
Tensor<Scalar> relu_forward(const Tensor<Scalar>& input);

// Masks upstream by (input > 0); the derivative at exactly 0 is 0.
template <RealScalar Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& upstream);

template <RealScalar Scalar>
Tensor<Scalar> activation_forward(Activation a, const Tensor<Scalar>& input) {
  switch (a) {
    case Activation::relu: return relu_forward(input);
  }
  return input;
}

template <RealScalar Scalar>
Tensor<Scalar> activation_backward(Activation a, const Tensor<Scalar>& input, const Tensor<Scalar>& upstream) {
  switch (a) {
    case Activation::relu: return relu_backward(input, upstream);
  }
  return upstream;
}

// Elementwise sum in list order.
template <RealScalar Scalar>
Tensor<Scalar> add_junction_forward(std::span<const Tensor<Scalar>* const> inputs);

template <RealScalar Scalar>
std::vector<Tensor<Scalar>> add_junction_backward(std::size_t input_count, const Tensor<Scalar>& upstream);

// Global average pool -> linear -> softmax cross-entropy.
template <RealScalar Scalar>
struct HeadParams {
  Tensor<Scalar> weights;  // classes x features
  Tensor<Scalar> bias;     // classes

  Index classes() const { return weights.dim(0); }
  Index features() const { return weights.dim(1); }

  static HeadParams he_normal(Index classes, Index features, SeededRng& rng);
};

template <RealScalar Scalar>
struct HeadOutput {
  Tensor<Scalar> logits;  // batch x classes
  double loss = 0.0;      // mean cross-entropy; 0 when no labels were given
  double accuracy = 0.0;
  Index correct = 0;
  // backward cache
  Tensor<Scalar> pooled;  // batch x features
  Tensor<Scalar> probs;   // batch x classes
  Shape feature_shape;
};

template <RealScalar Scalar>
struct HeadGrads {
  Tensor<Scalar> features;
  Tensor<Scalar> weights;
  Tensor<Scalar> bias;
};

template <RealScalar Scalar>
HeadOutput<Scalar> head_forward(const Tensor<Scalar>& features, std::span<const int> labels,
                                const HeadParams<Scalar>& p);

template <RealScalar Scalar>
HeadGrads<Scalar> head_backward(const HeadOutput<Scalar>& out, std::span<const int> labels,
                                const HeadParams<Scalar>& p);

}  // namespace s2c
