#pragma once

#include <cstdint>
#include <vector>

#include "cordseg/tensor.hpp"

namespace cordseg::nn {

// Dilated "same" convolution over 2 or 3 spatial axes.
//   input   [N, C, (D,) H, W]
//   weights [F, C, k, k(, k)]  k odd
//   bias    [F]
// Zero padding of dilation*(k-1)/2 per side keeps the spatial extent. Each
// output element is accumulated as bias, then channel-major, then kernel
// taps in row-major order, one multiply and one add per tap.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, int dilation = 1);
template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, int dilation = 1);

template <class T>
struct ConvGrads {
  Tensor<T> input;  // empty unless requested
  Tensor<T> weights;
  Tensor<T> bias;
};

// Gradients of conv2d/conv3d (rank inferred from the weight tensor).
template <class T>
ConvGrads<T> conv_backward(const Tensor<T>& input, const Tensor<T>& weights, int dilation,
                           const Tensor<T>& grad_output, bool need_input_grad);

int receptive_field(int kernel, int dilation);

enum class Mode { train, infer };

struct BatchNormState {
  double momentum = 0.1;
  double eps = 1e-5;
};

template <class T>
struct BatchNormCache {
  Tensor<T> normalized;        // x_hat
  std::vector<double> inv_std;  // per channel
};

// Per-channel batch normalisation. In train mode the batch statistics are
// used and the running statistics are updated in place:
//   running = (1 - momentum) * running + momentum * batch
// (unbiased batch variance for the running estimate).
template <class T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                     Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode, const BatchNormState& cfg,
                     BatchNormCache<T>* cache = nullptr);

template <class T>
struct BatchNormGrads {
  Tensor<T> input, scale, shift;
};

template <class T>
BatchNormGrads<T> batch_norm_backward(const Tensor<T>& scale, const BatchNormCache<T>& cache,
                                      const Tensor<T>& grad_output);

template <class T>
Tensor<T> relu(const Tensor<T>& x);
template <class T>
Tensor<T> relu_backward(const Tensor<T>& output, const Tensor<T>& grad_output);

// Inverted dropout: zeroes each activation with probability p and scales the
// survivors by 1/(1-p). `keep` receives the mask when non-null.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::uint64_t seed, std::vector<std::uint8_t>* keep = nullptr);
template <class T>
Tensor<T> dropout_backward(const Tensor<T>& grad_output, double p, const std::vector<std::uint8_t>& keep);

// Max pooling by `factor` along every spatial axis; spatial extents must divide.
template <class T>
Tensor<T> maxpool(const Tensor<T>& x, int factor, std::vector<std::uint32_t>* argmax = nullptr);
template <class T>
Tensor<T> maxpool_backward(const Shape& input_shape, const Tensor<T>& grad_output,
                           const std::vector<std::uint32_t>& argmax);

// Nearest-neighbour upsampling by repetition.
template <class T>
Tensor<T> upsample(const Tensor<T>& x, int factor);
template <class T>
Tensor<T> upsample_backward(const Shape& input_shape, const Tensor<T>& grad_output, int factor);

// Channel concatenation [a | b].
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
void split_channels(const Tensor<T>& grad, std::size_t channels_a, Tensor<T>& grad_a, Tensor<T>& grad_b);

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <class T>
Tensor<T> sigmoid_backward(const Tensor<T>& output, const Tensor<T>& grad_output);

}  // namespace cordseg::nn
