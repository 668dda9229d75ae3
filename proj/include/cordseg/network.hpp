#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "cordseg/ops.hpp"
#include "cordseg/tensor.hpp"

namespace cordseg::nn {

// Layer descriptors. Each layer consumes the previous layer's output; a
// ConcatSkip additionally reads the output of layer `source`.
struct Conv {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int dilation = 1;
};
struct BatchNorm {
  int channels = 1;
};
struct Relu {};
struct Dropout {
  double rate = 0.0;
};
struct MaxPool {
  int factor = 2;
};
struct Upsample {
  int factor = 2;
};
struct ConcatSkip {
  int source = 0;
};
struct Sigmoid {};

using Layer = std::variant<Conv, BatchNorm, Relu, Dropout, MaxPool, Upsample, ConcatSkip, Sigmoid>;

struct NetworkSpec {
  std::string name;
  int spatial_rank = 2;  // 2 or 3
  int in_channels = 1;
  Shape input_shape;  // spatial extents; empty = any extent divisible by the pooling
  std::vector<Layer> layers;

  // Stable text form; the fingerprint is its 64-bit FNV-1a hash.
  std::string canonical() const;
  std::uint64_t fingerprint() const;
  // Checks skip references, channel flow and the single terminal sigmoid.
  void validate() const;
  std::size_t downsampling_factor() const;
};

struct UNetConfig {
  int spatial_rank = 2;
  int base_channels = 32;
  int levels = 2;
  int contracting_dilation = 1;
  double dropout = 0.0;
  int in_channels = 1;
  Shape input_shape;
};

// Two 3x3 (3x3x3) conv + batch-norm + relu + dropout blocks per level,
// max-pool between levels, nearest upsampling followed by a conv on the way
// up, skip concatenation, then a 1x1 conv and a sigmoid.
NetworkSpec build_unet(const UNetConfig& cfg, const std::string& name = "unet");

// Centerline network: 2D, two levels, dilation 3 on the contracting path,
// dropout 0.2, 96x96 single-channel input.
NetworkSpec build_cnn1(int base_channels = 32, double dropout = 0.2);
// Segmentation network: 3D, two levels, dropout 0.4. patch_shape = (D, H, W),
// each divisible by 4.
NetworkSpec build_cnn2(const Shape& patch_shape, int base_channels = 32, double dropout = 0.4);

template <class T>
struct LayerParams {
  Tensor<T> weight, bias;                                // conv
  Tensor<T> scale, shift, running_mean, running_var;  // batch norm
};

template <class T>
struct ModelParams {
  std::vector<LayerParams<T>> layers;
  std::uint64_t seed = 0;
  std::uint64_t spec_fingerprint = 0;

  // Trainable tensors in a fixed order: per layer weight, bias, scale, shift.
  std::vector<Tensor<T>*> trainable();
  std::vector<const Tensor<T>*> trainable() const;
  std::size_t parameter_count() const;
};

// He-normal (fan-in) conv weights, zero biases, unit scale, zero shift,
// running mean 0 and variance 1.
template <class T>
ModelParams<T> init_params(const NetworkSpec& spec, std::uint64_t seed);

template <class T>
ModelParams<T> zero_like(const ModelParams<T>& p);

template <class T>
struct LayerCache {
  std::vector<std::uint8_t> keep;         // dropout
  std::vector<std::uint32_t> argmax;      // max pool
  BatchNormCache<T> bn;
};

template <class T>
struct ActivationCache {
  std::uint64_t spec_fingerprint = 0;
  Mode mode = Mode::infer;
  Tensor<T> input;
  std::vector<Tensor<T>> outputs;
  std::vector<LayerCache<T>> layers;
};

struct ForwardOptions {
  Mode mode = Mode::infer;
  std::uint64_t seed = 0;  // dropout masks in train mode
  BatchNormState batch_norm;
};

// Runs the network. Train mode updates batch-norm running statistics in
// `params`; infer mode leaves params untouched and disables dropout.
template <class T>
Tensor<T> forward(const NetworkSpec& spec, ModelParams<T>& params, const Tensor<T>& batch,
                  const ForwardOptions& opt, ActivationCache<T>* cache = nullptr);

// Inference-only overload.
template <class T>
Tensor<T> predict(const NetworkSpec& spec, const ModelParams<T>& params, const Tensor<T>& batch);

// Gradients for every trainable tensor, aligned with params.trainable().
template <class T>
ModelParams<T> backward(const NetworkSpec& spec, const ModelParams<T>& params, const ActivationCache<T>& cache,
                        const Tensor<T>& loss_grad);

template <class T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> grad;
};

// Soft Dice loss over the whole tensor:
//   1 - (2 * sum(p * t) + eps) / (sum(p^2) + sum(t^2) + eps)
template <class T>
LossResult<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, double eps = 1.0);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  AdamConfig cfg;
  std::uint64_t t = 0;
  std::vector<Tensor<T>> m, v;
};

template <class T>
AdamState<T> make_adam(const ModelParams<T>& params, const AdamConfig& cfg);

// Bias-corrected Adam update of every trainable tensor.
template <class T>
void adam_step(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state);

// Binary parameter file: "CSEG", version, spec fingerprint, seed, then
// named tensors (dtype, shape, little-endian payload).
template <class T>
void save_params(const ModelParams<T>& params, const NetworkSpec& spec, const std::filesystem::path& path);
template <class T>
ModelParams<T> load_params(const NetworkSpec& spec, const std::filesystem::path& path);

}  // namespace cordseg::nn
