// patchlab: run experiments, verification suites and run comparisons.
//
//   patchlab run --config <path> --out <dir>
//   patchlab verify --suite {divergences,bound,mi,generator}
//   patchlab compare --runs <dir>
//
// Exit codes: 0 ok, 1 config error, 2 verification failure, 3 training
// divergence.

#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "patchlab/harness.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kVerificationFailure = 2;
constexpr int kTrainingDivergence = 3;

int run_command(const std::string& config_path, const std::string& out) {
  using namespace patchlab::harness;
  const RunConfig config = load_config(config_path);
  for (const auto& w : config.warnings) std::cerr << "warning: " << w << '\n';
  const int threads = threads_from_env();
  const auto records = run(config, threads);
  write_outputs(config, records, out);
  for (const auto& r : records) {
    std::printf("%s  best epoch %d  aggregate %s%%  robust %s%%", r.run_id.c_str(), r.best_epoch,
                patchlab::metrics::percent(r.test.aggregate).c_str(), patchlab::metrics::percent(r.test.robust).c_str());
    if (!std::isnan(r.mi_estimate)) std::printf("  mi %.4f", r.mi_estimate);
    if (r.bound) std::printf("  bound slack %.3g", r.bound->slack);
    std::printf("\n");
  }
  std::printf("wrote %zu record(s) to %s\n", records.size(), out.c_str());
  return kOk;
}

int verify_command(const std::string& suite) {
  const auto report = patchlab::harness::verify(suite);
  for (const auto& line : report.lines) std::printf("%s\n", line.c_str());
  return report.ok() ? kOk : kVerificationFailure;
}

int compare_command(const std::string& dir) {
  using namespace patchlab::harness;
  const auto rows = compare(load_records(dir));
  std::printf("%s", format_comparison(rows).c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"patchlab: subgroup-robust training with model patching"};
  app.require_subcommand(1);

  std::string config_path, out_dir, suite, runs_dir;
  auto* run = app.add_subcommand("run", "train every seed of a config and write records");
  run->add_option("--config", config_path, "JSON run config")->required();
  run->add_option("--out", out_dir, "output directory")->required();

  auto* verify = app.add_subcommand("verify", "run a property suite");
  verify->add_option("--suite", suite, "suite name")
      ->required()
      ->check(CLI::IsMember(patchlab::harness::verify_suites()));

  auto* compare = app.add_subcommand("compare", "tabulate run records by method");
  compare->add_option("--runs", runs_dir, "directory holding run outputs")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return run_command(config_path, out_dir);
    if (*verify) return verify_command(suite);
    if (*compare) return compare_command(runs_dir);
  } catch (const patchlab::TrainingError& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return kTrainingDivergence;
  } catch (const patchlab::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  return kConfigError;
}
