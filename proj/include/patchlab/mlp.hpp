#pragma once

#include <functional>
#include <span>
#include <vector>

#include "patchlab/autodiff.hpp"
#include "patchlab/random.hpp"
#include "patchlab/tensor.hpp"

namespace patchlab {

enum class Activation { relu, none };

struct DenseLayer {
  Parameter weight;  // fan_in x fan_out
  Parameter bias;    // 1 x fan_out
  Activation activation = Activation::none;
};

/// Feedforward classifier: affine layers with optional ReLU, softmax on top.
class MlpModel {
 public:
  MlpModel() = default;
  /// `widths` = {input, hidden..., output}; hidden layers use ReLU, the last
  /// layer is linear (its logits feed the softmax). Glorot-uniform weights,
  /// zero biases.
  MlpModel(std::span<const Index> widths, Rng& rng);
  MlpModel(std::initializer_list<Index> widths, Rng& rng)
      : MlpModel(std::span<const Index>(widths.begin(), widths.size()), rng) {}

  static MlpModel zeros(std::span<const Index> widths);

  Index input_width() const;
  Index output_width() const;
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  ad::Var logits(const ad::Var& input);
  /// Output of the last hidden layer (the input itself for a single layer).
  ad::Var features(const ad::Var& input);
  /// Logits given features from features().
  ad::Var head(const ad::Var& features);

  Matrix evaluate_logits(const Matrix& input) const;
  Matrix evaluate_features(const Matrix& input) const;

  std::vector<Parameter*> parameters();
  void zero_grad();

 private:
  ad::Var apply(const ad::Var& input, std::size_t first, std::size_t last);
  void check_input(Index cols) const;

  std::vector<DenseLayer> layers_;
};

/// Softmax rows of the model's logits. Rows are strictly positive and sum to
/// one up to rounding.
Matrix forward(const MlpModel& model, const Matrix& batch);

Matrix softmax_rows(const Matrix& logits);

struct SgdOptions {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// buffer <- momentum * buffer + grad + weight_decay * value;
/// value  <- value - learning_rate * buffer.
void sgd_step(std::span<Parameter* const> params, const SgdOptions& options);

struct AdamOptions {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias-corrected first and second moments. Keeps its own moment
/// buffers; the parameters' momentum buffers are left alone.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions options);
  void step();
  void set_learning_rate(double rate) { options_.learning_rate = rate; }

 private:
  std::vector<Parameter*> params_;
  AdamOptions options_;
  std::vector<Matrix> first_, second_;
  long steps_ = 0;
};

/// Central differences (f(w+h) - f(w-h)) / 2h for every coordinate of every
/// parameter. Parameters are restored before returning.
std::vector<Matrix> finite_difference_gradient(const std::function<double()>& loss,
                                               std::span<Parameter* const> params, double step);

/// ||a - b|| / max(||a||, ||b||, floor) with all tensors flattened into one
/// vector.
double relative_error(std::span<const Matrix> a, std::span<const Matrix> b, double floor = 1e-12);

}  // namespace patchlab
