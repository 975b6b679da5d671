#pragma once

// A deliberately small neural-network kernel: a fixed chain of layers with
// hand-written forward/backward passes, plus a two-level U-Net built from
// three chains and one skip connection. Parameters live in the network;
// activations and gradients live in caller-owned Trace/Gradients objects so a
// frozen network can serve concurrent inference.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace lapsim::micronet {

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, T fill = T(0));
  Tensor(std::vector<int> shape, std::vector<T> values);

  const std::vector<int>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  int dim(std::size_t i) const { return shape_.at(i); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // (c, h, w) accessor for rank-3 tensors.
  T& at(int c, int h, int w) { return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w]; }
  const T& at(int c, int h, int w) const {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }

  void reshape(std::vector<int> shape);
  void fill(T v);
  bool all_finite() const;

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

std::size_t shape_size(const std::vector<int>& shape);

enum class Padding { Same, Valid };
enum class LayerKind { Conv2D, MaxPool2D, Upsample2D, Dense, ReLU, Sigmoid, Softmax, Flatten };

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  Padding padding = Padding::Same;
  int units = 0;

  static LayerSpec conv(int out_channels, int kernel, int stride = 1, Padding padding = Padding::Same);
  static LayerSpec max_pool() { return {LayerKind::MaxPool2D}; }
  static LayerSpec upsample() { return {LayerKind::Upsample2D}; }
  static LayerSpec dense(int units);
  static LayerSpec relu() { return {LayerKind::ReLU}; }
  static LayerSpec sigmoid() { return {LayerKind::Sigmoid}; }
  static LayerSpec softmax() { return {LayerKind::Softmax}; }
  static LayerSpec flatten() { return {LayerKind::Flatten}; }
};

struct NetworkSpec {
  std::vector<int> input_shape;  // (c, h, w) or (n)
  std::vector<LayerSpec> layers;
};

template <typename T>
using Gradients = std::vector<Tensor<T>>;

template <typename T>
struct Trace {
  std::vector<Tensor<T>> activations;  // [0] = input, [i + 1] = output of layer i
};

template <typename T>
class Sequential {
 public:
  Sequential() = default;
  // Validates the shape algebra (throws ShapeMismatch) and zero-initializes parameters.
  explicit Sequential(NetworkSpec spec);

  const NetworkSpec& spec() const { return spec_; }
  const std::vector<int>& input_shape() const { return spec_.input_shape; }
  const std::vector<int>& output_shape() const { return shapes_.back(); }

  // Uniform He-style initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)), zero bias.
  void init_he(std::uint64_t seed);

  Tensor<T> forward(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x, Trace<T>& trace) const;
  // Accumulates parameter gradients into `grads` and returns dL/dinput.
  Tensor<T> backward(const Trace<T>& trace, const Tensor<T>& grad_out, Gradients<T>& grads) const;

  std::vector<Tensor<T>>& params() { return params_; }
  const std::vector<Tensor<T>>& params() const { return params_; }
  Gradients<T> zero_gradients() const;
  std::size_t parameter_count() const;

 private:
  Tensor<T> apply(std::size_t layer, const Tensor<T>& x) const;

  NetworkSpec spec_;
  std::vector<std::vector<int>> shapes_;  // shapes_[0] = input, shapes_[i + 1] = after layer i
  std::vector<int> param_index_;          // first parameter tensor of layer i, or -1
  std::vector<Tensor<T>> params_;
};

// Two resolution levels, same padding, single skip connection, sigmoid head.
template <typename T>
class UNet2 {
 public:
  UNet2() = default;
  UNet2(int in_channels, int height, int width, int base_channels = 4);

  void init_he(std::uint64_t seed);
  Tensor<T> forward(const Tensor<T>& x) const;

  struct Cache {
    Trace<T> down, bottom, head;
  };
  Tensor<T> forward(const Tensor<T>& x, Cache& cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& grad_out, Gradients<T>& grads) const;

  // Flattened view over down, bottom and head parameters, in that order.
  std::vector<Tensor<T>*> params();
  std::vector<const Tensor<T>*> params() const;
  Gradients<T> zero_gradients() const;
  std::size_t parameter_count() const;
  const std::vector<int>& input_shape() const { return down_.input_shape(); }

 private:
  Sequential<T> down_, bottom_, head_;
};

// Mean binary cross-entropy. `grad` (optional) receives dL/dpred.
// Throws ShapeMismatch or DomainError (pred outside [0, 1]).
template <typename T>
T loss_bce(const Tensor<T>& pred, const Tensor<T>& target, Tensor<T>* grad = nullptr);

// Mean categorical cross-entropy over a probability vector (softmax output).
template <typename T>
T loss_cross_entropy(const Tensor<T>& probs, const Tensor<T>& target, Tensor<T>* grad = nullptr);

enum class LossKind { Bce, CrossEntropy };

template <typename T>
struct Example {
  Tensor<T> input;
  Tensor<T> target;
};

template <typename T>
struct Sgd {
  T learning_rate = T(0.01);
  T momentum = T(0);
  std::vector<Tensor<T>> velocity;

  // w -= lr * (momentum * v + g). Throws NonFiniteGradient.
  void step(std::vector<Tensor<T>*> params, const Gradients<T>& grads);
};

// Mean loss over the batch, computing gradients and applying one SGD step.
template <typename T>
T train_step(Sequential<T>& net, std::span<const Example<T>> batch, Sgd<T>& opt, LossKind loss);

// Plain SGD step. learning_rate must be >= 0.
template <typename T>
T backward_and_step(Sequential<T>& net, std::span<const Example<T>> batch, T learning_rate,
                    LossKind loss = LossKind::Bce);

// Mean loss only (no update).
template <typename T>
T evaluate_loss(const Sequential<T>& net, std::span<const Example<T>> batch, LossKind loss);

// Binary weight file: magic "MNW1", u32 version, u32 scalar bytes, u32 tensor
// count, then per tensor u32 rank, u32 dims, raw little-endian data.
template <typename T>
void save_weights(const std::string& path, const std::vector<const Tensor<T>*>& tensors);
template <typename T>
std::vector<Tensor<T>> load_weights(const std::string& path);

// Copies `src` into `dst` after checking every shape (ShapeMismatch).
template <typename T>
void assign_params(const std::vector<Tensor<T>*>& dst, std::span<const Tensor<T>> src);

template <typename T>
std::vector<Tensor<T>*> param_ptrs(Sequential<T>& net);
template <typename T>
std::vector<const Tensor<T>*> param_ptrs(const Sequential<T>& net);

}  // namespace lapsim::micronet
