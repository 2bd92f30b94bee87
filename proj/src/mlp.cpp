#include "patchlab/mlp.hpp"

#include <cmath>

#include "patchlab/error.hpp"

namespace patchlab {

MlpModel::MlpModel(std::span<const Index> widths, Rng& rng) {
  if (widths.size() < 2) throw ParameterError("MlpModel needs at least input and output widths");
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const Index fan_in = widths[l], fan_out = widths[l + 1];
    if (fan_in <= 0 || fan_out <= 0) throw ParameterError("MlpModel: widths must be positive");
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Matrix w(fan_in, fan_out);
    for (Index i = 0; i < fan_in; ++i)
      for (Index j = 0; j < fan_out; ++j) w(i, j) = rng.uniform(-limit, limit);
    DenseLayer layer;
    layer.weight = Parameter("layer" + std::to_string(l) + ".weight", std::move(w));
    layer.bias = Parameter("layer" + std::to_string(l) + ".bias", Matrix::Zero(1, fan_out));
    layer.activation = (l + 2 < widths.size()) ? Activation::relu : Activation::none;
    layers_.push_back(std::move(layer));
  }
}

MlpModel MlpModel::zeros(std::span<const Index> widths) {
  Rng rng(0);
  MlpModel model(widths, rng);
  for (auto& layer : model.layers_) layer.weight.value.setZero();
  return model;
}

Index MlpModel::input_width() const { return layers_.front().weight.value.rows(); }
Index MlpModel::output_width() const { return layers_.back().weight.value.cols(); }

void MlpModel::check_input(Index cols) const {
  if (layers_.empty()) throw ContractError("MlpModel has no layers");
  if (cols != input_width())
    throw ShapeError("model expects " + std::to_string(input_width()) + " input columns, got " +
                     std::to_string(cols));
}

ad::Var MlpModel::apply(const ad::Var& input, std::size_t first, std::size_t last) {
  ad::Var h = input;
  for (std::size_t l = first; l < last; ++l) {
    auto& layer = layers_[l];
    h = ad::add_row(ad::matmul(h, ad::param(layer.weight)), ad::param(layer.bias));
    if (layer.activation == Activation::relu) h = ad::relu(h);
  }
  return h;
}

ad::Var MlpModel::logits(const ad::Var& input) {
  check_input(input.cols());
  return apply(input, 0, layers_.size());
}

ad::Var MlpModel::features(const ad::Var& input) {
  check_input(input.cols());
  return apply(input, 0, layers_.size() - 1);
}

ad::Var MlpModel::head(const ad::Var& features) { return apply(features, layers_.size() - 1, layers_.size()); }

namespace {
Matrix evaluate_range(const std::vector<DenseLayer>& layers, const Matrix& input, std::size_t last) {
  Matrix h = input;
  for (std::size_t l = 0; l < last; ++l) {
    Matrix next = h * layers[l].weight.value;
    next.rowwise() += layers[l].bias.value.row(0);
    if (layers[l].activation == Activation::relu) next = next.cwiseMax(0.0);
    h = std::move(next);
  }
  return h;
}
}  // namespace

Matrix MlpModel::evaluate_logits(const Matrix& input) const {
  check_input(input.cols());
  return evaluate_range(layers_, input, layers_.size());
}

Matrix MlpModel::evaluate_features(const Matrix& input) const {
  check_input(input.cols());
  return evaluate_range(layers_, input, layers_.size() - 1);
}

std::vector<Parameter*> MlpModel::parameters() {
  std::vector<Parameter*> out;
  for (auto& layer : layers_) {
    out.push_back(&layer.weight);
    out.push_back(&layer.bias);
  }
  return out;
}

void MlpModel::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double peak = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - peak).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

Matrix forward(const MlpModel& model, const Matrix& batch) { return softmax_rows(model.evaluate_logits(batch)); }

void sgd_step(std::span<Parameter* const> params, const SgdOptions& options) {
  if (!(options.learning_rate > 0.0)) throw ParameterError("sgd_step: learning rate must be positive");
  if (options.momentum < 0.0 || options.momentum >= 1.0)
    throw ParameterError("sgd_step: momentum must lie in [0, 1)");
  for (Parameter* p : params)
    if (!p->grad.allFinite()) throw TrainingError("non-finite gradient in parameter '" + p->name + "'");
  for (Parameter* p : params) {
    p->momentum = options.momentum * p->momentum + p->grad + options.weight_decay * p->value;
    p->value -= options.learning_rate * p->momentum;
  }
}

Adam::Adam(std::vector<Parameter*> params, AdamOptions options) : params_(std::move(params)), options_(options) {
  if (!(options.learning_rate > 0.0)) throw ParameterError("adam: learning rate must be positive");
  if (!(options.beta1 >= 0.0 && options.beta1 < 1.0) || !(options.beta2 >= 0.0 && options.beta2 < 1.0))
    throw ParameterError("adam: betas must lie in [0, 1)");
  for (Parameter* p : params_) {
    first_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    second_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step() {
  for (Parameter* p : params_)
    if (!p->grad.allFinite()) throw TrainingError("non-finite gradient in parameter '" + p->name + "'");
  ++steps_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Matrix& g = params_[i]->grad;
    first_[i] = options_.beta1 * first_[i] + (1.0 - options_.beta1) * g;
    second_[i] = options_.beta2 * second_[i] + (1.0 - options_.beta2) * g.cwiseProduct(g);
    params_[i]->value.array() -= options_.learning_rate * (first_[i].array() / c1) /
                                 ((second_[i].array() / c2).sqrt() + options_.epsilon);
  }
}

std::vector<Matrix> finite_difference_gradient(const std::function<double()>& loss,
                                               std::span<Parameter* const> params, double step) {
  if (!(step > 0.0)) throw ParameterError("finite_difference_gradient: step must be positive");
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (Parameter* p : params) {
    Matrix g(p->value.rows(), p->value.cols());
    for (Index i = 0; i < p->value.rows(); ++i) {
      for (Index j = 0; j < p->value.cols(); ++j) {
        const double saved = p->value(i, j);
        p->value(i, j) = saved + step;
        const double up = loss();
        p->value(i, j) = saved - step;
        const double down = loss();
        p->value(i, j) = saved;
        g(i, j) = (up - down) / (2.0 * step);
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

double relative_error(std::span<const Matrix> a, std::span<const Matrix> b, double floor) {
  if (a.size() != b.size()) throw ShapeError("relative_error: list length mismatch");
  double diff = 0.0, norm_a = 0.0, norm_b = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (a[k].rows() != b[k].rows() || a[k].cols() != b[k].cols())
      throw ShapeError("relative_error: shape mismatch");
    diff += (a[k] - b[k]).squaredNorm();
    norm_a += a[k].squaredNorm();
    norm_b += b[k].squaredNorm();
  }
  return std::sqrt(diff) / std::max({std::sqrt(norm_a), std::sqrt(norm_b), floor});
}

}  // namespace patchlab
