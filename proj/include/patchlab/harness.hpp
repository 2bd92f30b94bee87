#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "patchlab/coupled_data.hpp"
#include "patchlab/error.hpp"
#include "patchlab/invariance.hpp"
#include "patchlab/metrics.hpp"
#include "patchlab/training.hpp"
#include "patchlab/translate.hpp"

namespace patchlab::harness {

class ComparisonError : public Error {
 public:
  using Error::Error;
};

struct DatasetSpec {
  enum class Kind { synthetic, mnist_correlation } kind = Kind::synthetic;
  Index n = 8000;
  double rho = 0.98;
  data::WorldOptions world;
  std::optional<std::string> mnist_dir;
};

struct TranslatorSpec {
  enum class Source { none, analytic, trained } source = Source::none;
  translate::TranslatorConfig config;
};

struct RunConfig {
  std::string name = "run";
  DatasetSpec dataset;
  /// Seed fields inside are replaced per trial.
  training::TrainConfig train;
  TranslatorSpec translators;
  std::vector<std::uint64_t> seeds{0};
  /// Audit the coupled-set bound on the selected model (synthetic worlds).
  bool bound_report = false;
  /// Parameters present in the document but irrelevant to the method.
  std::vector<std::string> warnings;
};

/// Parses one JSON document; unknown keys, bad types, and invalid
/// method/parameter combinations raise ConfigError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical JSON of every effective setting (defaults filled in).
std::string canonical_config(const RunConfig& config);
std::string canonical_dataset(const DatasetSpec& spec);
/// FNV-1a of canonical_config, as 16 hex digits.
std::string config_hash(const RunConfig& config);

struct RunRecord {
  std::string run_id;
  std::string config_hash;
  std::string method;
  std::uint64_t seed = 0;
  std::string dataset;  // canonical dataset JSON
  int num_classes = 0;
  int subgroups_per_class = 0;
  std::vector<training::EpochRecord> epochs;
  int best_epoch = 0;
  metrics::EvalReport test;
  double mi_estimate = 0.0;  // NaN when not estimated
  std::optional<invariance::BoundReport> bound;
  double wall_ms = 0.0;
  std::vector<std::string> warnings;
  std::vector<std::pair<std::string, std::string>> metadata;
};

std::string record_to_json(const RunRecord& record);
RunRecord record_from_json(const std::string& text);

std::vector<std::string> csv_header(int num_classes, int subgroups_per_class);
/// One row per (epoch, split) plus a final "selected" test row.
std::vector<std::string> csv_rows(const RunRecord& record);

/// PATCHLAB_THREADS, default 1; invalid values raise ConfigError.
int threads_from_env();

/// One record per seed, in seed order. Trials run on up to `threads` threads.
std::vector<RunRecord> run(const RunConfig& config, int threads = 1);
/// Writes records/<run_id>.json (each via a temporary file and rename),
/// metrics.csv and config.json into `out`.
void write_outputs(const RunConfig& config, const std::vector<RunRecord>& records, const std::filesystem::path& out);

struct VerifyReport {
  std::string suite;
  int checks = 0;
  int failures = 0;
  std::vector<std::string> lines;

  bool ok() const { return failures == 0; }
};

std::vector<std::string> verify_suites();

/// Discrete feature W (one-hot), label Y and subgroup Z with a random joint;
/// the exact I(W; Z | Y) is computed from the table.
struct KnownMiProblem {
  Matrix features;
  std::vector<int> y;
  std::vector<int> z;
  int num_classes = 0;
  int subgroups_per_class = 0;
  double mutual_information = 0.0;
};
KnownMiProblem known_mi_problem(std::uint64_t seed, Index samples = 40000);

/// Unknown suites raise ConfigError.
VerifyReport verify(const std::string& suite);

struct ComparisonRow {
  std::string method;
  std::size_t trials = 0;
  metrics::Summary aggregate;
  metrics::Summary robust;
  std::vector<metrics::Summary> gaps;  // per class
  metrics::Summary mi;
  bool best_robust = false;
};

/// Records under `dir` (any depth) named records/*.json.
std::vector<RunRecord> load_records(const std::filesystem::path& dir);
/// Rows per method in first-seen order (per method@hash8 when a method ran
/// under several configs); mixed dataset specs raise ComparisonError.
std::vector<ComparisonRow> compare(const std::vector<RunRecord>& records);
std::string format_comparison(const std::vector<ComparisonRow>& rows);

}  // namespace patchlab::harness
