#include "patchlab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "patchlab/mnist.hpp"

namespace patchlab::harness {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Config parsing helpers

void allow_keys(const json& object, std::initializer_list<const char*> keys, const std::string& where) {
  if (!object.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : object.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; }))
      throw ConfigError("unknown key '" + where + "." + key + "'");
  }
}

template <typename T>
T read(const json& object, const char* key, const std::string& where, T fallback) {
  if (!object.contains(key)) return fallback;
  try {
    return object.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("'" + where + "." + key + "' has the wrong type");
  }
}

double read_number(const json& object, const char* key, const std::string& where, double fallback) {
  if (!object.contains(key)) return fallback;
  if (!object.at(key).is_number()) throw ConfigError("'" + where + "." + key + "' must be a number");
  return object.at(key).get<double>();
}

Index read_count(const json& object, const char* key, const std::string& where, Index fallback) {
  if (!object.contains(key)) return fallback;
  const auto& v = object.at(key);
  if (!v.is_number_integer()) throw ConfigError("'" + where + "." + key + "' must be an integer");
  return v.get<Index>();
}

bool read_bool(const json& object, const char* key, const std::string& where, bool fallback) {
  if (!object.contains(key)) return fallback;
  if (!object.at(key).is_boolean()) throw ConfigError("'" + where + "." + key + "' must be true or false");
  return object.at(key).get<bool>();
}

std::string consistency_kind_name(objectives::ConsistencyKind kind) {
  switch (kind) {
    case objectives::ConsistencyKind::camel: return "camel";
    case objectives::ConsistencyKind::uda: return "uda";
    case objectives::ConsistencyKind::augmix: return "augmix";
  }
  return "camel";
}

std::string source_name(TranslatorSpec::Source s) {
  switch (s) {
    case TranslatorSpec::Source::none: return "none";
    case TranslatorSpec::Source::analytic: return "analytic";
    case TranslatorSpec::Source::trained: return "trained";
  }
  return "none";
}

bool wants_translators(const RunConfig& c) { return c.train.method == training::Method::camel; }

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex16(std::uint64_t v) {
  char buffer[17];
  std::snprintf(buffer, sizeof buffer, "%016llx", static_cast<unsigned long long>(v));
  return buffer;
}

json dataset_json(const DatasetSpec& d) {
  json j{{"n", d.n}, {"rho", d.rho}};
  if (d.kind == DatasetSpec::Kind::synthetic) {
    j["kind"] = "synthetic";
    const auto& w = d.world;
    j["world"] = {{"latents_per_class", w.latents_per_class}, {"input_dim", w.input_dim},
                  {"class_dims", w.class_dims},               {"class_separation", w.class_separation},
                  {"latent_noise", w.latent_noise},           {"style_dims", w.style_dims},
                  {"subgroup_shift", w.subgroup_shift},       {"permute", w.permute},
                  {"seed", w.seed}};
  } else {
    j["kind"] = "mnist_correlation";
    if (d.mnist_dir) j["mnist_dir"] = *d.mnist_dir;
  }
  return j;
}

json config_json(const RunConfig& c) {
  const auto& t = c.train;
  json j;
  j["name"] = c.name;
  j["dataset"] = dataset_json(c.dataset);
  j["method"] = training::method_name(t.method);
  j["model"] = {{"hidden", t.hidden}};
  j["optimizer"] = {{"learning_rate", t.sgd.learning_rate}, {"momentum", t.sgd.momentum},
                    {"weight_decay", t.sgd.weight_decay},   {"epochs", t.epochs},
                    {"batch_size", t.batch_size}};
  json params = json::object();
  if (training::uses_groups(t.method)) {
    params["group_step"] = t.group_step;
    params["adjustment"] = t.adjustment;
  }
  if (training::uses_consistency(t.method)) {
    params["lambda_target"] = t.consistency.lambda_target;
    params["anneal_rate"] = t.consistency.anneal_rate;
    params["consistency_kind"] = consistency_kind_name(t.consistency_kind);
  }
  if (t.method == training::Method::cdat) {
    params["domain_coef"] = t.domain_coef;
    params["domain_hidden"] = t.domain_hidden;
  }
  if (t.method == training::Method::heuristic_augmentation) {
    params["noise_sigma"] = t.heuristic.noise_sigma;
    params["affine_jitter"] = t.heuristic.affine_jitter;
  }
  j["method_params"] = params;
  if (wants_translators(c)) {
    const auto& tc = c.translators.config;
    json tr{{"source", source_name(c.translators.source)}};
    if (c.translators.source == TranslatorSpec::Source::trained) {
      tr.update({{"cycle_coef", tc.cycle_coef},
                 {"identity_coef", tc.identity_coef},
                 {"learning_rate", tc.learning_rate},
                 {"discriminator_learning_rate", tc.discriminator_learning_rate},
                 {"discriminator_steps", tc.discriminator_steps},
                 {"beta1", tc.beta1},
                 {"beta2", tc.beta2},
                 {"steps", tc.steps},
                 {"batch_size", tc.batch_size},
                 {"generator", tc.generator == translate::TranslatorConfig::Generator::affine ? "affine" : "mlp"},
                 {"generator_hidden", tc.generator_hidden},
                 {"discriminator_hidden", tc.discriminator_hidden},
                 {"decay_tail", tc.decay_tail},
                 {"average_tail", tc.average_tail}});
    }
    j["translators"] = tr;
  }
  j["seeds"] = c.seeds;
  j["estimate_mi"] = t.estimate_mi;
  j["bound_report"] = c.bound_report;
  return j;
}

void warn_if_present(RunConfig& c, const json& object, std::initializer_list<const char*> keys, const std::string& where,
                     bool relevant) {
  if (relevant) return;
  for (const char* key : keys)
    if (object.contains(key))
      c.warnings.push_back("method " + training::method_name(c.train.method) + " ignores " + where + "." + key);
}

// ---------------------------------------------------------------------------
// Records

json report_json(const metrics::EvalReport& r) {
  json cells = json::array();
  for (const auto& row : r.cells.accuracy) {
    json out = json::array();
    for (const auto& cell : row) out.push_back(cell ? json(*cell) : json(nullptr));
    cells.push_back(out);
  }
  json gaps = json::array();
  for (double g : r.gaps) gaps.push_back(std::isnan(g) ? json(nullptr) : json(g));
  return {{"cells", cells}, {"sizes", r.cells.sizes}, {"aggregate", r.aggregate}, {"robust", r.robust}, {"gaps", gaps}};
}

double number_or_nan(const json& v) { return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>(); }

metrics::EvalReport report_from_json(const json& j) {
  metrics::EvalReport r;
  for (const auto& row : j.at("cells")) {
    auto& out = r.cells.accuracy.emplace_back();
    for (const auto& cell : row) out.push_back(cell.is_null() ? std::nullopt : std::optional<double>(cell.get<double>()));
  }
  r.cells.sizes = j.at("sizes").get<std::vector<std::vector<Index>>>();
  r.aggregate = j.at("aggregate").get<double>();
  r.robust = j.at("robust").get<double>();
  for (const auto& g : j.at("gaps")) r.gaps.push_back(number_or_nan(g));
  return r;
}

std::string cell(double v, const char* format = "%.6f") {
  if (std::isnan(v)) return "";
  char buffer[64];
  std::snprintf(buffer, sizeof buffer, format, v);
  return buffer;
}

void append_report(std::ostringstream& row, const metrics::EvalReport& r) {
  row << ',' << cell(r.aggregate) << ',' << cell(r.robust);
  for (const auto& cls : r.cells.accuracy)
    for (const auto& c : cls) row << ',' << (c ? cell(*c) : "");
  for (double g : r.gaps) row << ',' << cell(g);
}

void write_atomically(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out << content;
    if (!out) throw ConfigError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  allow_keys(j, {"name", "dataset", "method", "model", "optimizer", "method_params", "translators", "seed", "seeds",
                 "trials", "estimate_mi", "bound_report"},
             "config");
  RunConfig c;
  c.name = read<std::string>(j, "name", "config", c.name);

  if (!j.contains("method")) throw ConfigError("config needs a 'method'");
  const auto method_text = read<std::string>(j, "method", "config", "");
  const auto method = training::parse_method(method_text);
  if (!method) throw ConfigError("unknown method '" + method_text + "'");
  c.train.method = *method;

  const json dataset = j.value("dataset", json::object());
  allow_keys(dataset, {"kind", "n", "rho", "world", "mnist_dir"}, "dataset");
  const auto kind = read<std::string>(dataset, "kind", "dataset", "synthetic");
  if (kind == "synthetic") {
    c.dataset.kind = DatasetSpec::Kind::synthetic;
  } else if (kind == "mnist_correlation") {
    c.dataset.kind = DatasetSpec::Kind::mnist_correlation;
    c.dataset.n = 40000;
  } else {
    throw ConfigError("unknown dataset kind '" + kind + "'");
  }
  c.dataset.n = read_count(dataset, "n", "dataset", c.dataset.n);
  c.dataset.rho = read_number(dataset, "rho", "dataset", c.dataset.rho);
  if (c.dataset.n < 8) throw ConfigError("dataset.n must be at least 8");
  if (!(c.dataset.rho >= -1.0 && c.dataset.rho <= 1.0)) throw ConfigError("dataset.rho must lie in [-1, 1]");
  auto& w = c.dataset.world;
  w.num_classes = 2;
  w.subgroups_per_class = 2;
  w.latents_per_class = 4000;
  w.input_dim = 16;
  w.class_dims = 2;
  w.class_separation = 1.0;
  w.latent_noise = 1.0;
  w.style_dims = 1;
  w.subgroup_shift = 2.0;
  w.permute = false;
  w.seed = 7;
  if (dataset.contains("world")) {
    if (c.dataset.kind != DatasetSpec::Kind::synthetic) throw ConfigError("dataset.world applies to synthetic datasets only");
    const json& wj = dataset.at("world");
    allow_keys(wj, {"latents_per_class", "input_dim", "class_dims", "class_separation", "latent_noise", "style_dims",
                    "subgroup_shift", "permute", "seed"},
               "dataset.world");
    w.latents_per_class = static_cast<int>(read_count(wj, "latents_per_class", "dataset.world", w.latents_per_class));
    w.input_dim = read_count(wj, "input_dim", "dataset.world", w.input_dim);
    w.class_dims = read_count(wj, "class_dims", "dataset.world", w.class_dims);
    w.class_separation = read_number(wj, "class_separation", "dataset.world", w.class_separation);
    w.latent_noise = read_number(wj, "latent_noise", "dataset.world", w.latent_noise);
    w.style_dims = read_count(wj, "style_dims", "dataset.world", w.style_dims);
    w.subgroup_shift = read_number(wj, "subgroup_shift", "dataset.world", w.subgroup_shift);
    w.permute = read_bool(wj, "permute", "dataset.world", w.permute);
    w.seed = read<std::uint64_t>(wj, "seed", "dataset.world", w.seed);
  }
  if (w.latents_per_class < 3) throw ConfigError("dataset.world.latents_per_class must be at least 3");
  if (w.input_dim < 1) throw ConfigError("dataset.world.input_dim must be positive");
  if (dataset.contains("mnist_dir")) {
    if (c.dataset.kind != DatasetSpec::Kind::mnist_correlation)
      throw ConfigError("dataset.mnist_dir applies to mnist_correlation only");
    c.dataset.mnist_dir = read<std::string>(dataset, "mnist_dir", "dataset", "");
  }

  const json model = j.value("model", json::object());
  allow_keys(model, {"hidden"}, "model");
  c.train.hidden = read<std::vector<Index>>(model, "hidden", "model", c.train.hidden);
  for (Index h : c.train.hidden)
    if (h < 1) throw ConfigError("model.hidden widths must be positive");

  const json opt = j.value("optimizer", json::object());
  allow_keys(opt, {"learning_rate", "momentum", "weight_decay", "epochs", "batch_size"}, "optimizer");
  c.train.sgd.learning_rate = read_number(opt, "learning_rate", "optimizer", c.train.sgd.learning_rate);
  c.train.sgd.momentum = read_number(opt, "momentum", "optimizer", c.train.sgd.momentum);
  c.train.sgd.weight_decay = read_number(opt, "weight_decay", "optimizer", c.train.sgd.weight_decay);
  c.train.epochs = static_cast<int>(read_count(opt, "epochs", "optimizer", c.train.epochs));
  c.train.batch_size = read_count(opt, "batch_size", "optimizer", c.train.batch_size);
  if (!(c.train.sgd.learning_rate > 0.0)) throw ConfigError("optimizer.learning_rate must be positive");
  if (!(c.train.sgd.momentum >= 0.0 && c.train.sgd.momentum < 1.0)) throw ConfigError("optimizer.momentum must lie in [0, 1)");
  if (c.train.sgd.weight_decay < 0.0) throw ConfigError("optimizer.weight_decay must be non-negative");
  if (c.train.epochs < 1) throw ConfigError("optimizer.epochs must be positive");
  if (c.train.batch_size < 4) throw ConfigError("optimizer.batch_size must be at least 4");

  const json params = j.value("method_params", json::object());
  allow_keys(params, {"lambda_target", "anneal_rate", "consistency_kind", "group_step", "adjustment", "domain_coef",
                      "domain_hidden", "noise_sigma", "affine_jitter"},
             "method_params");
  const auto m = c.train.method;
  warn_if_present(c, params, {"lambda_target", "anneal_rate", "consistency_kind"}, "method_params",
                  training::uses_consistency(m));
  warn_if_present(c, params, {"group_step", "adjustment"}, "method_params", training::uses_groups(m));
  warn_if_present(c, params, {"domain_coef", "domain_hidden"}, "method_params", m == training::Method::cdat);
  warn_if_present(c, params, {"noise_sigma", "affine_jitter"}, "method_params", m == training::Method::heuristic_augmentation);
  c.train.consistency.lambda_target = read_number(params, "lambda_target", "method_params", 10.0);
  c.train.consistency.anneal_rate = read_number(params, "anneal_rate", "method_params", 0.0);
  const auto ck = read<std::string>(params, "consistency_kind", "method_params", "camel");
  if (ck == "camel") {
    c.train.consistency_kind = objectives::ConsistencyKind::camel;
  } else if (ck == "uda") {
    c.train.consistency_kind = objectives::ConsistencyKind::uda;
  } else if (ck == "augmix") {
    c.train.consistency_kind = objectives::ConsistencyKind::augmix;
  } else {
    throw ConfigError("unknown consistency_kind '" + ck + "'");
  }
  c.train.group_step = read_number(params, "group_step", "method_params", c.train.group_step);
  c.train.adjustment = read_number(params, "adjustment", "method_params", c.train.adjustment);
  c.train.domain_coef = read_number(params, "domain_coef", "method_params", c.train.domain_coef);
  c.train.domain_hidden = read_count(params, "domain_hidden", "method_params", c.train.domain_hidden);
  c.train.heuristic.noise_sigma = read_number(params, "noise_sigma", "method_params", c.train.heuristic.noise_sigma);
  c.train.heuristic.affine_jitter = read_number(params, "affine_jitter", "method_params", c.train.heuristic.affine_jitter);
  if (c.train.consistency.lambda_target < 0.0 || c.train.consistency.anneal_rate < 0.0)
    throw ConfigError("lambda_target and anneal_rate must be non-negative");
  if (!(c.train.group_step >= 0.0)) throw ConfigError("method_params.group_step must be non-negative");
  if (c.train.adjustment < 0.0) throw ConfigError("method_params.adjustment must be non-negative");
  if (c.train.domain_hidden < 0) throw ConfigError("method_params.domain_hidden must be non-negative");
  if (c.train.heuristic.noise_sigma < 0.0 || c.train.heuristic.affine_jitter < 0.0)
    throw ConfigError("heuristic augmentation magnitudes must be non-negative");

  const json tr = j.value("translators", json::object());
  allow_keys(tr, {"source", "cycle_coef", "identity_coef", "learning_rate", "discriminator_learning_rate",
                  "discriminator_steps", "beta1", "beta2", "steps", "batch_size", "generator", "generator_hidden",
                  "discriminator_hidden", "decay_tail", "average_tail"},
             "translators");
  const auto source = read<std::string>(tr, "source", "translators", "none");
  if (source == "none") {
    c.translators.source = TranslatorSpec::Source::none;
  } else if (source == "analytic") {
    c.translators.source = TranslatorSpec::Source::analytic;
  } else if (source == "trained") {
    c.translators.source = TranslatorSpec::Source::trained;
  } else {
    throw ConfigError("unknown translators.source '" + source + "'");
  }
  if (!wants_translators(c) && c.translators.source != TranslatorSpec::Source::none)
    c.warnings.push_back("method " + training::method_name(m) + " ignores translators");
  auto& tc = c.translators.config;
  tc.cycle_coef = read_number(tr, "cycle_coef", "translators", tc.cycle_coef);
  tc.identity_coef = read_number(tr, "identity_coef", "translators", tc.identity_coef);
  tc.learning_rate = read_number(tr, "learning_rate", "translators", tc.learning_rate);
  tc.discriminator_learning_rate = read_number(tr, "discriminator_learning_rate", "translators", tc.discriminator_learning_rate);
  tc.discriminator_steps = static_cast<int>(read_count(tr, "discriminator_steps", "translators", tc.discriminator_steps));
  tc.beta1 = read_number(tr, "beta1", "translators", tc.beta1);
  tc.beta2 = read_number(tr, "beta2", "translators", tc.beta2);
  tc.steps = static_cast<int>(read_count(tr, "steps", "translators", tc.steps));
  tc.batch_size = read_count(tr, "batch_size", "translators", tc.batch_size);
  const auto generator = read<std::string>(tr, "generator", "translators", "affine");
  if (generator == "affine") {
    tc.generator = translate::TranslatorConfig::Generator::affine;
  } else if (generator == "mlp") {
    tc.generator = translate::TranslatorConfig::Generator::mlp;
  } else {
    throw ConfigError("unknown translators.generator '" + generator + "'");
  }
  tc.generator_hidden = read_count(tr, "generator_hidden", "translators", tc.generator_hidden);
  tc.discriminator_hidden = read_count(tr, "discriminator_hidden", "translators", tc.discriminator_hidden);
  tc.decay_tail = read_number(tr, "decay_tail", "translators", tc.decay_tail);
  tc.average_tail = read_number(tr, "average_tail", "translators", tc.average_tail);
  if (!(tc.learning_rate > 0.0) || tc.steps < 1 || tc.batch_size < 1 || tc.discriminator_steps < 1 ||
      !(tc.beta1 >= 0.0 && tc.beta1 < 1.0) || !(tc.beta2 >= 0.0 && tc.beta2 < 1.0) || !(tc.average_tail >= 0.0 && tc.average_tail <= 1.0) ||
      !(tc.decay_tail >= 0.0 && tc.decay_tail <= 1.0))
    throw ConfigError("invalid translator training parameters");

  if (wants_translators(c)) {
    if (c.translators.source == TranslatorSpec::Source::none)
      throw ConfigError("method camel needs translators: set translators.source to analytic or trained");
    if (c.dataset.kind == DatasetSpec::Kind::mnist_correlation) {
      if (c.translators.source == TranslatorSpec::Source::analytic)
        throw ConfigError("analytic translators exist only for synthetic worlds");
      throw ConfigError("trained translators are limited to inputs of dimension <= 64; MNIST images have 784");
    }
    if (c.translators.source == TranslatorSpec::Source::trained && c.dataset.world.input_dim > 64)
      throw ConfigError("trained translators are limited to inputs of dimension <= 64");
  }

  if (j.contains("seeds") && (j.contains("seed") || j.contains("trials")))
    throw ConfigError("give either 'seeds' or 'seed'/'trials', not both");
  if (j.contains("seeds")) {
    c.seeds = read<std::vector<std::uint64_t>>(j, "seeds", "config", {});
    if (c.seeds.empty()) throw ConfigError("'seeds' must not be empty");
    std::set<std::uint64_t> unique(c.seeds.begin(), c.seeds.end());
    if (unique.size() != c.seeds.size()) throw ConfigError("'seeds' must be distinct");
  } else {
    const auto first = read<std::uint64_t>(j, "seed", "config", 0);
    const Index trials = read_count(j, "trials", "config", 1);
    if (trials < 1) throw ConfigError("'trials' must be positive");
    c.seeds.clear();
    for (Index t = 0; t < trials; ++t) c.seeds.push_back(first + static_cast<std::uint64_t>(t));
  }
  c.train.estimate_mi = read_bool(j, "estimate_mi", "config", true);
  c.bound_report = read_bool(j, "bound_report", "config", false);
  if (c.bound_report && c.dataset.kind != DatasetSpec::Kind::synthetic)
    throw ConfigError("bound_report needs an enumerable synthetic world");
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string canonical_config(const RunConfig& config) { return config_json(config).dump(); }
std::string canonical_dataset(const DatasetSpec& spec) { return dataset_json(spec).dump(); }
std::string config_hash(const RunConfig& config) { return hex16(fnv1a(canonical_config(config))); }

// ---------------------------------------------------------------------------
// Records

std::string record_to_json(const RunRecord& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs)
    epochs.push_back({{"epoch", e.epoch},
                      {"validation", report_json(e.validation)},
                      {"test", report_json(e.test)},
                      {"lambda", e.lambda},
                      {"domain_mi", e.domain_mi},
                      {"wall_ms", e.wall_ms}});
  json j{{"format", "patchlab.run_record"},
         {"version", 1},
         {"run_id", r.run_id},
         {"config_hash", r.config_hash},
         {"method", r.method},
         {"seed", r.seed},
         {"dataset", json::parse(r.dataset)},
         {"num_classes", r.num_classes},
         {"subgroups_per_class", r.subgroups_per_class},
         {"epochs", epochs},
         {"best_epoch", r.best_epoch},
         {"test", report_json(r.test)},
         {"mi_estimate", std::isnan(r.mi_estimate) ? json(nullptr) : json(r.mi_estimate)},
         {"wall_ms", r.wall_ms},
         {"warnings", r.warnings}};
  if (r.bound) j["bound"] = json::parse(r.bound->to_json());
  json meta = json::object();
  for (const auto& [k, v] : r.metadata) meta[k] = v;
  j["metadata"] = meta;
  return j.dump(2);
}

RunRecord record_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.value("format", "") != "patchlab.run_record") throw ComparisonError("not a run record");
    RunRecord r;
    r.run_id = j.at("run_id");
    r.config_hash = j.at("config_hash");
    r.method = j.at("method");
    r.seed = j.at("seed");
    r.dataset = j.at("dataset").dump();
    r.num_classes = j.at("num_classes");
    r.subgroups_per_class = j.at("subgroups_per_class");
    for (const auto& e : j.at("epochs")) {
      training::EpochRecord rec;
      rec.epoch = e.at("epoch");
      rec.validation = report_from_json(e.at("validation"));
      rec.test = report_from_json(e.at("test"));
      rec.lambda = e.at("lambda");
      rec.domain_mi = number_or_nan(e.at("domain_mi"));
      rec.wall_ms = e.at("wall_ms");
      r.epochs.push_back(std::move(rec));
    }
    r.best_epoch = j.at("best_epoch");
    r.test = report_from_json(j.at("test"));
    r.mi_estimate = number_or_nan(j.at("mi_estimate"));
    r.wall_ms = j.at("wall_ms");
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    if (j.contains("bound")) {
      const auto& b = j.at("bound");
      invariance::BoundReport br;
      br.lhs = b.at("lhs");
      br.rhs = b.at("rhs");
      br.slack = b.at("slack");
      br.mean_self_consistency = b.at("mean_self_consistency");
      br.mean_translation_gap = b.at("mean_translation_gap").get<std::vector<double>>();
      br.examples = b.at("examples");
      br.seed = b.at("seed");
      r.bound = br;
    }
    for (const auto& [k, v] : j.at("metadata").items()) r.metadata.emplace_back(k, v.get<std::string>());
    return r;
  } catch (const json::exception& e) {
    throw ComparisonError(std::string("malformed run record: ") + e.what());
  }
}

std::vector<std::string> csv_header(int num_classes, int subgroups_per_class) {
  std::vector<std::string> h{"run_id", "method", "seed", "epoch", "split", "agg_acc", "robust_acc"};
  for (int y = 0; y < num_classes; ++y)
    for (int z = 0; z < subgroups_per_class; ++z) h.push_back("acc_" + std::to_string(y) + "_" + std::to_string(z));
  for (int y = 0; y < num_classes; ++y) h.push_back("gap_" + std::to_string(y));
  for (const char* tail : {"mi_estimate", "lambda_current", "wall_ms"}) h.emplace_back(tail);
  return h;
}

std::vector<std::string> csv_rows(const RunRecord& r) {
  std::vector<std::string> rows;
  const bool cdat = r.method == training::method_name(training::Method::cdat);
  const auto method = training::parse_method(r.method);
  const bool consistency = method && training::uses_consistency(*method);
  auto lambda_cell = [&](double v) { return consistency ? cell(v) : std::string(); };
  auto prefix = [&](int epoch, const char* split) {
    std::ostringstream row;
    row << r.run_id << ',' << r.method << ',' << r.seed << ',' << epoch << ',' << split;
    return row;
  };
  for (const auto& e : r.epochs) {
    for (const char* split : {"validation", "test"}) {
      auto row = prefix(e.epoch, split);
      const bool validation = std::string(split) == "validation";
      append_report(row, validation ? e.validation : e.test);
      row << ',' << (cdat && validation ? cell(e.domain_mi) : "") << ',' << lambda_cell(e.lambda) << ','
          << cell(e.wall_ms, "%.1f");
      rows.push_back(row.str());
    }
  }
  auto row = prefix(r.best_epoch, "selected_test");
  append_report(row, r.test);
  const double lambda = r.best_epoch >= 1 && r.best_epoch <= static_cast<int>(r.epochs.size())
                            ? r.epochs[static_cast<std::size_t>(r.best_epoch - 1)].lambda
                            : 0.0;
  row << ',' << cell(r.mi_estimate) << ',' << lambda_cell(lambda) << ',' << cell(r.wall_ms, "%.1f");
  rows.push_back(row.str());
  return rows;
}

// ---------------------------------------------------------------------------
// Running

int threads_from_env() {
  const char* value = std::getenv("PATCHLAB_THREADS");
  if (value == nullptr || *value == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(value, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) throw ConfigError(std::string("PATCHLAB_THREADS must be a positive integer, got '") + value + "'");
  return static_cast<int>(n);
}

std::vector<RunRecord> run(const RunConfig& config, int threads) {
  const std::string hash = config_hash(config);
  const std::string dataset = canonical_dataset(config.dataset);
  const bool synthetic = config.dataset.kind == DatasetSpec::Kind::synthetic;
  std::optional<data::CoupledWorld> world;
  std::optional<data::MnistSources> sources;
  if (synthetic) {
    world.emplace(config.dataset.world);
  } else {
    std::optional<fs::path> dir;
    if (config.dataset.mnist_dir) dir = fs::path(*config.dataset.mnist_dir);
    sources = data::load_mnist_sources(dir, config.dataset.world.seed);
  }

  std::vector<RunRecord> records(config.seeds.size());
  std::vector<std::exception_ptr> errors(config.seeds.size());
  auto trial = [&](std::size_t index) {
    const auto started = std::chrono::steady_clock::now();
    const std::uint64_t seed = config.seeds[index];
    const auto split = synthetic ? data::sample_dataset(*world, config.dataset.n, config.dataset.rho, seed)
                                 : data::mnist_correlation(*sources, config.dataset.n, config.dataset.rho, seed);
    std::optional<translate::TranslatorBank> bank;
    if (wants_translators(config)) {
      if (config.translators.source == TranslatorSpec::Source::analytic) {
        bank = translate::analytic_translators(*world);
      } else {
        auto tc = config.translators.config;
        tc.seed = seed;
        bank = translate::train_translators(split.train, tc);
      }
    }
    auto tcfg = config.train;
    tcfg.seed = seed;
    auto result = training::train(split, tcfg, bank ? &*bank : nullptr);

    RunRecord& r = records[index];
    r.run_id = training::method_name(config.train.method) + "-" + hash.substr(0, 8) + "-s" + std::to_string(seed);
    r.config_hash = hash;
    r.method = training::method_name(config.train.method);
    r.seed = seed;
    r.dataset = dataset;
    r.num_classes = split.train.num_classes;
    r.subgroups_per_class = split.train.subgroups_per_class;
    r.epochs = std::move(result.history);
    r.best_epoch = result.best_epoch;
    r.test = result.test;
    r.mi_estimate = result.mi_estimate;
    r.warnings = config.warnings;
    r.metadata = split.metadata;
    if (config.bound_report) {
      const auto translator = bank ? invariance::deterministic(*bank)
                                   : invariance::deterministic(translate::analytic_translators(*world));
      auto report = invariance::verify_theorem1(invariance::predictor(result.model), *world, translator);
      report.seed = seed;
      r.bound = report;
    }
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  };

  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), config.seeds.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < config.seeds.size(); ++i) {
      try {
        trial(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < config.seeds.size(); i = next++) {
          try {
            trial(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return records;
}

void write_outputs(const RunConfig& config, const std::vector<RunRecord>& records, const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out / "records", ec);
  if (ec) throw ConfigError("cannot create output directory " + out.string() + ": " + ec.message());
  for (const auto& r : records) write_atomically(out / "records" / (r.run_id + ".json"), record_to_json(r));

  std::ostringstream csv;
  if (!records.empty()) {
    const auto header = csv_header(records.front().num_classes, records.front().subgroups_per_class);
    for (std::size_t i = 0; i < header.size(); ++i) csv << (i ? "," : "") << header[i];
    csv << '\n';
    for (const auto& r : records)
      for (const auto& row : csv_rows(r)) csv << row << '\n';
  }
  write_atomically(out / "metrics.csv", csv.str());

  json summary = json::parse(canonical_config(config));
  summary["config_hash"] = config_hash(config);
  summary["warnings"] = config.warnings;
  write_atomically(out / "config.json", summary.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Comparison

std::vector<RunRecord> load_records(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ComparisonError("no such run directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".json" && entry.path().parent_path().filename() == "records")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> records;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    std::ostringstream text;
    text << in.rdbuf();
    records.push_back(record_from_json(text.str()));
  }
  if (records.empty()) throw ComparisonError("no run records under " + dir.string());
  return records;
}

std::vector<ComparisonRow> compare(const std::vector<RunRecord>& records) {
  if (records.empty()) throw ComparisonError("nothing to compare");
  for (const auto& r : records)
    if (r.dataset != records.front().dataset)
      throw ComparisonError("records use different dataset specs: " + records.front().run_id + " vs " + r.run_id);
  // One row per method; a method run under several configs gets one row per
  // config, labelled method@hash.
  std::map<std::string, std::set<std::string>> hashes;
  for (const auto& r : records) hashes[r.method].insert(r.config_hash);
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunRecord*>> by_method;
  for (const auto& r : records) {
    const std::string key = hashes[r.method].size() > 1 ? r.method + "@" + r.config_hash.substr(0, 8) : r.method;
    if (!by_method.contains(key)) order.push_back(key);
    by_method[key].push_back(&r);
  }
  std::vector<ComparisonRow> rows;
  for (const auto& method : order) {
    const auto& group = by_method[method];
    ComparisonRow row;
    row.method = method;
    row.trials = group.size();
    std::vector<double> agg, robust, mi;
    for (const auto* r : group) {
      agg.push_back(r->test.aggregate);
      robust.push_back(r->test.robust);
      if (!std::isnan(r->mi_estimate)) mi.push_back(r->mi_estimate);
    }
    row.aggregate = metrics::summarize(agg);
    row.robust = metrics::summarize(robust);
    row.mi = metrics::summarize(mi);
    if (mi.empty()) row.mi.mean = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t y = 0; y < group.front()->test.gaps.size(); ++y) {
      std::vector<double> gaps;
      for (const auto* r : group) gaps.push_back(r->test.gaps[y]);
      row.gaps.push_back(metrics::summarize(gaps));
    }
    rows.push_back(std::move(row));
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].robust.mean > rows[best].robust.mean) best = i;
  rows[best].best_robust = true;
  return rows;
}

std::string format_comparison(const std::vector<ComparisonRow>& rows) {
  auto pct = [](const metrics::Summary& s) { return metrics::percent(s.mean) + " (" + metrics::percent(s.stddev) + ")"; };
  std::ostringstream out;
  out << "method                    trials  aggregate        robust           ";
  const std::size_t classes = rows.empty() ? 0 : rows.front().gaps.size();
  for (std::size_t y = 0; y < classes; ++y) out << "gap_" << y << "            ";
  out << "mi (nats)         best\n";
  char buffer[64];
  for (const auto& r : rows) {
    std::snprintf(buffer, sizeof buffer, "%-25s %6zu  ", r.method.c_str(), r.trials);
    out << buffer;
    std::snprintf(buffer, sizeof buffer, "%-17s%-17s", pct(r.aggregate).c_str(), pct(r.robust).c_str());
    out << buffer;
    for (const auto& g : r.gaps) {
      std::snprintf(buffer, sizeof buffer, "%-17s", pct(g).c_str());
      out << buffer;
    }
    if (std::isnan(r.mi.mean)) {
      std::snprintf(buffer, sizeof buffer, "%-18s", "-");
    } else {
      std::snprintf(buffer, sizeof buffer, "%.4f (%.4f)   ", r.mi.mean, r.mi.stddev);
    }
    out << buffer << (r.best_robust ? "*" : "") << '\n';
  }
  return out.str();
}

}  // namespace patchlab::harness
