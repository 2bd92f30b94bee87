#include "patchlab/translate.hpp"

#include <cmath>

#include "json.hpp"
#include "patchlab/error.hpp"
#include "patchlab/objectives.hpp"

namespace patchlab::translate {

using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

json matrix_to_json(const Matrix& m) {
  json values = json::array();
  for (Index i = 0; i < m.size(); ++i) values.push_back(m.data()[i]);
  return {{"shape", {m.rows(), m.cols()}}, {"values", std::move(values)}};
}

Matrix matrix_from_json(const json& j) {
  const Index rows = j.at("shape").at(0).get<Index>(), cols = j.at("shape").at(1).get<Index>();
  const auto& values = j.at("values");
  if (static_cast<Index>(values.size()) != rows * cols) throw FormatError("translator payload: value count mismatch", 0);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = values[static_cast<std::size_t>(i)].get<double>();
  return m;
}

double mean_abs(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().mean(); }

ad::Var mean_abs(const ad::Var& a, const Matrix& b) { return ad::mean(ad::abs(ad::sub(a, ad::constant(b)))); }

// [log D, log(1 - D)] columns for discriminator logits.
ad::Var log_sigmoid_pair(const ad::Var& logit) {
  Matrix expand(1, 2);
  expand << 1.0, 0.0;
  return ad::log_softmax(ad::matmul(logit, ad::constant(expand)));
}

Matrix sample_rows(const Matrix& data, Index count, Rng& rng) {
  Matrix out(count, data.cols());
  for (Index i = 0; i < count; ++i) out.row(i) = data.row(static_cast<Index>(rng.below(static_cast<std::uint64_t>(data.rows()))));
  return out;
}

}  // namespace

Translator Translator::identity(int subgroup, Index dim) {
  Translator t;
  t.source_ = t.target_ = subgroup;
  t.kind_ = Kind::identity;
  t.dim_ = dim;
  return t;
}

Translator Translator::affine(int source, int target, Matrix linear, RowVector offset) {
  if (linear.rows() != linear.cols() || offset.size() != linear.cols())
    throw ShapeError("affine translator needs a square matrix and matching offset");
  Translator t;
  t.source_ = source;
  t.target_ = target;
  t.kind_ = Kind::affine;
  t.dim_ = linear.rows();
  t.linear_ = std::move(linear);
  t.offset_ = std::move(offset);
  return t;
}

Translator Translator::network(int source, int target, MlpModel net, bool residual) {
  if (net.input_width() != net.output_width()) throw ShapeError("translator network must preserve dimension");
  Translator t;
  t.source_ = source;
  t.target_ = target;
  t.kind_ = Kind::network;
  t.dim_ = net.input_width();
  t.net_ = std::move(net);
  t.residual_ = residual;
  return t;
}

Matrix Translator::apply(const Matrix& x) const {
  if (x.cols() != dim_) throw ShapeError("translator expects " + std::to_string(dim_) + " columns");
  switch (kind_) {
    case Kind::identity:
      return x;
    case Kind::affine: {
      Matrix out = x * linear_;
      out.rowwise() += offset_;
      return out;
    }
    case Kind::network: {
      Matrix out = net_.evaluate_logits(x);
      if (residual_) out += x;
      return out;
    }
  }
  throw ContractError("unknown translator kind");
}

ad::Var Translator::apply(const ad::Var& x) {
  if (kind_ != Kind::network) return ad::constant(apply(x.value()));
  auto out = net_.logits(x);
  return residual_ ? ad::add(out, x) : out;
}

std::string Translator::to_json() const {
  json j{{"format", "patchlab.translator"}, {"version", kFormatVersion}, {"source", source_}, {"target", target_},
         {"dim", dim_}};
  switch (kind_) {
    case Kind::identity:
      j["kind"] = "identity";
      break;
    case Kind::affine:
      j["kind"] = "affine";
      j["linear"] = matrix_to_json(linear_);
      j["offset"] = matrix_to_json(Matrix(offset_));
      break;
    case Kind::network: {
      j["kind"] = "network";
      j["residual"] = residual_;
      json layers = json::array();
      for (const auto& layer : net_.layers())
        layers.push_back({{"weight", matrix_to_json(layer.weight.value)},
                          {"bias", matrix_to_json(layer.bias.value)},
                          {"activation", layer.activation == Activation::relu ? "relu" : "none"}});
      j["layers"] = std::move(layers);
      break;
    }
  }
  return j.dump();
}

Translator Translator::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("translator payload is not JSON: ") + e.what(), e.byte);
  }
  if (j.value("format", "") != "patchlab.translator") throw FormatError("not a translator payload", 0);
  if (j.value("version", 0) != kFormatVersion)
    throw FormatError("unsupported translator payload version " + std::to_string(j.value("version", 0)), 0);
  const int source = j.at("source"), target = j.at("target");
  const std::string kind = j.at("kind");
  if (kind == "identity") return identity(source, j.at("dim").get<Index>());
  if (kind == "affine") return affine(source, target, matrix_from_json(j.at("linear")), matrix_from_json(j.at("offset")).row(0));
  if (kind == "network") {
    std::vector<Index> widths;
    const auto& layers = j.at("layers");
    for (const auto& layer : layers) {
      const Matrix w = matrix_from_json(layer.at("weight"));
      if (widths.empty()) widths.push_back(w.rows());
      widths.push_back(w.cols());
    }
    MlpModel net = MlpModel::zeros(widths);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& dst = net.layers()[l];
      dst.weight.value = matrix_from_json(layers[l].at("weight"));
      dst.bias.value = matrix_from_json(layers[l].at("bias"));
      dst.activation = layers[l].at("activation") == "relu" ? Activation::relu : Activation::none;
    }
    return network(source, target, std::move(net), j.at("residual").get<bool>());
  }
  throw FormatError("unknown translator kind '" + kind + "'", 0);
}

void TranslatorBank::set(int y, Translator t) {
  if (y < 0 || y >= num_classes_ || t.source() < 0 || t.source() >= k_ || t.target() < 0 || t.target() >= k_)
    throw ConfigError("translator (class " + std::to_string(y) + ", " + std::to_string(t.source()) + " -> " +
                      std::to_string(t.target()) + ") is outside the bank");
  maps_.insert_or_assign({y, t.source(), t.target()}, std::move(t));
}

bool TranslatorBank::has(int y, int from, int to) const { return maps_.contains({y, from, to}); }

const Translator& TranslatorBank::get(int y, int from, int to) const {
  const auto it = maps_.find({y, from, to});
  if (it == maps_.end())
    throw ConfigError("missing translator for class " + std::to_string(y) + " from subgroup " + std::to_string(from) +
                      " to subgroup " + std::to_string(to));
  return it->second;
}

TranslatorBank analytic_translators(const data::CoupledWorld& world) {
  TranslatorBank bank(world.num_classes(), world.subgroups_per_class());
  for (int y = 0; y < world.num_classes(); ++y)
    for (int from = 0; from < world.subgroups_per_class(); ++from)
      for (int to = 0; to < world.subgroups_per_class(); ++to) {
        if (from == to) {
          bank.set(y, Translator::identity(from, world.input_dim()));
        } else {
          auto [linear, offset] = world.translation(from, to);
          bank.set(y, Translator::affine(from, to, std::move(linear), std::move(offset)));
        }
      }
  return bank;
}

Matrix augment_coupled(const data::LabeledExample& x, const TranslatorBank& bank) {
  const int k = bank.subgroups_per_class();
  Matrix out(k, x.x.size());
  for (int to = 0; to < k; ++to) {
    if (to == x.z) {
      out.row(to) = x.x;
    } else {
      out.row(to) = bank.get(x.y, x.z, to).apply(Matrix(x.x)).row(0);
    }
  }
  return out;
}

Matrix augment_dataset(const data::Dataset& data, const TranslatorBank& bank) {
  const int k = bank.subgroups_per_class();
  if (k != data.subgroups_per_class) throw ConfigError("translator bank and dataset disagree on subgroup count");
  Matrix out(data.size() * k, data.input_dim());
  // Group rows by (y, z) so each translator runs once on a stacked batch.
  std::map<std::pair<int, int>, std::vector<Index>> cells;
  for (Index i = 0; i < data.size(); ++i) cells[{data.y[static_cast<std::size_t>(i)], data.z[static_cast<std::size_t>(i)]}].push_back(i);
  for (const auto& [cell, rows] : cells) {
    const auto [y, z] = cell;
    Matrix source(static_cast<Index>(rows.size()), data.input_dim());
    for (std::size_t r = 0; r < rows.size(); ++r) source.row(static_cast<Index>(r)) = data.x.row(rows[r]);
    for (int to = 0; to < k; ++to) {
      const Matrix mapped = to == z ? source : bank.get(y, z, to).apply(source);
      for (std::size_t r = 0; r < rows.size(); ++r) out.row(rows[r] * k + to) = mapped.row(static_cast<Index>(r));
    }
  }
  return out;
}

double cyclegan_loss(const TranslatorPair& pair, const Matrix& batch, Domain domain) {
  const Translator& into = domain == Domain::a ? pair.forward : pair.backward;
  const Translator& away = domain == Domain::a ? pair.backward : pair.forward;
  const double cycle = mean_abs(batch, into.apply(away.apply(batch)));
  const double identity = mean_abs(batch, into.apply(batch));
  return pair.cycle_coef * cycle + pair.identity_coef * identity;
}

TrainedTranslators train_translator_pair(const Matrix& data_a, const Matrix& data_b, int subgroup_a,
                                         int subgroup_b, const TranslatorConfig& config) {
  if (data_a.rows() == 0 || data_b.rows() == 0) throw ParameterError("translator training needs data in both domains");
  if (data_a.cols() != data_b.cols()) throw ShapeError("translator domains differ in dimension");
  const Index d = data_a.cols();
  if (d > 64) throw ParameterError("translator training is limited to inputs of dimension <= 64");
  if (config.steps < 1 || config.batch_size < 1) throw ParameterError("translator steps and batch size must be positive");

  // Train on pooled standardized coordinates; the affine maps are folded
  // back into the first and last layers afterwards.
  Matrix pooled(data_a.rows() + data_b.rows(), d);
  pooled << data_a, data_b;
  const RowVector mu = pooled.colwise().mean();
  RowVector sigma = ((pooled.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(pooled.rows())).sqrt();
  for (Index j = 0; j < d; ++j)
    if (!(sigma(j) > 1e-8)) sigma(j) = 1.0;
  const Matrix norm_a = (data_a.rowwise() - mu).array().rowwise() / sigma.array();
  const Matrix norm_b = (data_b.rowwise() - mu).array().rowwise() / sigma.array();

  Rng init(config.seed, 51);
  auto make_generator = [&](int from, int to) {
    if (config.generator == TranslatorConfig::Generator::affine) {
      const std::vector<Index> widths{d, d};
      MlpModel net = config.identity_init ? MlpModel::zeros(widths) : MlpModel(widths, init);
      if (config.identity_init) net.layers()[0].weight.value = Matrix::Identity(d, d);
      return Translator::network(from, to, std::move(net), false);
    }
    MlpModel net({d, config.generator_hidden, d}, init);
    if (config.identity_init) net.layers().back().weight.value *= 0.1;
    return Translator::network(from, to, std::move(net), true);
  };
  TrainedTranslators out;
  TranslatorPair& pair = out.pair;
  pair.forward = make_generator(subgroup_b, subgroup_a);
  pair.backward = make_generator(subgroup_a, subgroup_b);
  pair.discriminator_a = MlpModel({d, config.discriminator_hidden, config.discriminator_hidden, 1}, init);
  pair.discriminator_b = MlpModel({d, config.discriminator_hidden, config.discriminator_hidden, 1}, init);
  pair.cycle_coef = config.cycle_coef;
  pair.identity_coef = config.identity_coef;

  std::vector<Parameter*> gen_params = pair.forward.net().parameters();
  for (auto* p : pair.backward.net().parameters()) gen_params.push_back(p);
  std::vector<Parameter*> disc_params = pair.discriminator_a.parameters();
  for (auto* p : pair.discriminator_b.parameters()) disc_params.push_back(p);
  if (config.discriminator_steps < 1) throw ParameterError("discriminator steps must be positive");
  const AdamOptions gen_options{.learning_rate = config.learning_rate, .beta1 = config.beta1, .beta2 = config.beta2};
  AdamOptions disc_options = gen_options;
  if (config.discriminator_learning_rate > 0.0) disc_options.learning_rate = config.discriminator_learning_rate;
  Adam gen_opt(gen_params, gen_options), disc_opt(disc_params, disc_options);

  const int tail_start = config.steps - static_cast<int>(config.average_tail * config.steps);
  std::vector<Matrix> averaged;
  int averaged_count = 0;

  Rng rng(config.seed, 52);
  const std::vector<int> real(static_cast<std::size_t>(config.batch_size), 0);
  const std::vector<int> fake(static_cast<std::size_t>(config.batch_size), 1);
  const int decay_start = config.steps - static_cast<int>(config.decay_tail * config.steps);
  for (int step = 0; step < config.steps; ++step) {
    if (step >= decay_start) {
      const double factor = static_cast<double>(config.steps - step) / static_cast<double>(config.steps - decay_start + 1);
      gen_opt.set_learning_rate(gen_options.learning_rate * factor);
      disc_opt.set_learning_rate(disc_options.learning_rate * factor);
    }
    TranslatorStep record;
    Matrix a, b;
    // Discriminators: maximize log D(real) + log(1 - D(fake)).
    for (int inner = 0; inner < config.discriminator_steps; ++inner) {
      a = sample_rows(norm_a, config.batch_size, rng);
      b = sample_rows(norm_b, config.batch_size, rng);
      const Matrix fake_a = pair.forward.apply(b), fake_b = pair.backward.apply(a);
      auto term = [&](MlpModel& disc, const Matrix& r, const Matrix& f) {
        return ad::add(ad::mean(ad::pick(log_sigmoid_pair(disc.logits(ad::constant(r))), real)),
                       ad::mean(ad::pick(log_sigmoid_pair(disc.logits(ad::constant(f))), fake)));
      };
      auto loss = ad::scale(ad::add(term(pair.discriminator_a, a, fake_a), term(pair.discriminator_b, b, fake_b)), -1.0);
      for (auto* p : disc_params) p->zero_grad();
      ad::backward(loss);
      record.discriminator_loss = loss.scalar();
      if (!std::isfinite(record.discriminator_loss))
        throw TrainingError("translator training diverged at step " + std::to_string(step));
      disc_opt.step();
    }
    // Generators: non-saturating adversarial + cycle + identity.
    {
      auto va = ad::constant(a), vb = ad::constant(b);
      auto g_a = pair.backward.apply(va);  // in B
      auto f_b = pair.forward.apply(vb);   // in A
      auto adversarial = ad::scale(
          ad::add(ad::mean(ad::pick(log_sigmoid_pair(pair.discriminator_b.logits(g_a)), real)),
                  ad::mean(ad::pick(log_sigmoid_pair(pair.discriminator_a.logits(f_b)), real))),
          -1.0);
      auto cycle = ad::add(mean_abs(pair.forward.apply(g_a), a), mean_abs(pair.backward.apply(f_b), b));
      auto identity = ad::add(mean_abs(pair.forward.apply(va), a), mean_abs(pair.backward.apply(vb), b));
      auto loss = ad::add(adversarial, ad::add(ad::scale(cycle, config.cycle_coef), ad::scale(identity, config.identity_coef)));
      for (auto* p : gen_params) p->zero_grad();
      ad::backward(loss);
      record.adversarial_loss = adversarial.scalar();
      record.cycle_loss = cycle.scalar();
      record.identity_loss = identity.scalar();
      if (!std::isfinite(loss.scalar()) || !std::isfinite(record.discriminator_loss))
        throw TrainingError("translator training diverged at step " + std::to_string(step));
      try {
        gen_opt.step();
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step));
      }
    }
    out.trace.push_back(record);

    if (step >= tail_start) {
      if (averaged.empty())
        for (auto* p : gen_params) averaged.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      for (std::size_t i = 0; i < gen_params.size(); ++i) averaged[i] += gen_params[i]->value;
      ++averaged_count;
    }
  }
  if (averaged_count > 0)
    for (std::size_t i = 0; i < gen_params.size(); ++i) gen_params[i]->value = averaged[i] / averaged_count;

  // x_n = (x - mu) / sigma on the way in, y = y_n * sigma + mu on the way out.
  auto fold_input = [&](DenseLayer& layer) {
    layer.bias.value -= (mu.array() / sigma.array()).matrix() * layer.weight.value;
    layer.weight.value = sigma.cwiseInverse().asDiagonal() * layer.weight.value;
  };
  auto fold_output = [&](DenseLayer& layer, bool residual) {
    layer.weight.value = layer.weight.value * sigma.asDiagonal();
    layer.bias.value = layer.bias.value.cwiseProduct(sigma);
    if (!residual) layer.bias.value += mu;
  };
  for (Translator* t : {&pair.forward, &pair.backward}) {
    auto& layers = t->net().layers();
    const bool residual = config.generator == TranslatorConfig::Generator::mlp;
    fold_input(layers.front());
    fold_output(layers.back(), residual);
  }
  fold_input(pair.discriminator_a.layers().front());
  fold_input(pair.discriminator_b.layers().front());
  return out;
}

TranslatorBank train_translators(const data::Dataset& data, const TranslatorConfig& config) {
  if (data.subgroups_per_class != 2) throw ConfigError("trained translators are pairwise: need two subgroups per class");
  TranslatorBank bank(data.num_classes, 2);
  for (int y = 0; y < data.num_classes; ++y) {
    std::vector<Index> rows_a, rows_b;
    for (Index i = 0; i < data.size(); ++i) {
      if (data.y[static_cast<std::size_t>(i)] != y) continue;
      (data.z[static_cast<std::size_t>(i)] == 0 ? rows_a : rows_b).push_back(i);
    }
    if (rows_a.empty() || rows_b.empty())
      throw ParameterError("class " + std::to_string(y) + " lacks examples in one subgroup for translator training");
    TranslatorConfig per_class = config;
    per_class.seed = config.seed + static_cast<std::uint64_t>(y) * 7919;
    auto trained = train_translator_pair(data.subset(rows_a).x, data.subset(rows_b).x, 0, 1, per_class);
    bank.set(y, Translator::identity(0, data.input_dim()));
    bank.set(y, Translator::identity(1, data.input_dim()));
    bank.set(y, std::move(trained.pair.forward));
    bank.set(y, std::move(trained.pair.backward));
  }
  return bank;
}

}  // namespace patchlab::translate
