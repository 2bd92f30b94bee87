#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "patchlab/error.hpp"
#include "patchlab/harness.hpp"

using namespace patchlab;
using namespace patchlab::harness;
namespace fs = std::filesystem;

namespace {

std::string small(const std::string& method, const std::string& extra = "") {
  return R"({"method": ")" + method +
         R"(", "dataset": {"n": 2000, "world": {"latents_per_class": 500}}, "optimizer": {"epochs": 3})" + extra + "}";
}

std::string strip_wall(const std::string& row) {
  return row.substr(0, row.rfind(','));
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("patchlab_test_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("config parsing rejects unknown keys and bad combinations") {
  CHECK_NOTHROW(parse_config(small("erm")));
  CHECK_THROWS_AS(parse_config(R"({"method": "erm", "bogus": 1})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"method": "erm", "optimizer": {"lr": 0.1}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"method": "nope"})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"method": "erm", "optimizer": {"epochs": "three"}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"method": "erm", "dataset": {"rho": 1.5}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"method": "camel"})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"method": "erm", "seeds": [1], "seed": 2, "trials": 3})"), ConfigError);
  CHECK_THROWS_AS(parse_config("{not json"), ConfigError);

  const auto warned = parse_config(small("erm", R"(, "method_params": {"lambda_target": 5})"));
  REQUIRE(warned.warnings.size() == 1);
  CHECK(warned.warnings[0].find("lambda_target") != std::string::npos);

  const auto trials = parse_config(R"({"method": "erm", "seed": 4, "trials": 3})");
  CHECK(trials.seeds == std::vector<std::uint64_t>{4, 5, 6});
}

TEST_CASE("canonical config is stable and ignores irrelevant settings") {
  const auto a = parse_config(small("erm"));
  const auto b = parse_config(small("erm", R"(, "method_params": {"lambda_target": 5})"));
  const auto c = parse_config(small("gdro"));
  CHECK(canonical_config(a) == canonical_config(b));
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a) != config_hash(c));
  CHECK(config_hash(a).size() == 16);
  const auto reparsed = parse_config(canonical_config(c));
  CHECK(canonical_config(reparsed) == canonical_config(c));
}

TEST_CASE("run records survive a JSON round trip") {
  auto config = parse_config(small("camel", R"(, "translators": {"source": "analytic"}, "bound_report": true)"));
  const auto records = run(config);
  REQUIRE(records.size() == 1);
  const auto& r = records[0];
  CHECK(r.run_id == "camel-" + config_hash(config).substr(0, 8) + "-s0");
  REQUIRE(r.bound);
  CHECK(std::abs(r.bound->slack) < 1e-10);
  const auto back = record_from_json(record_to_json(r));
  CHECK(record_to_json(back) == record_to_json(r));
  CHECK(back.epochs.size() == 3);
  CHECK(back.test.robust == r.test.robust);
  CHECK_THROWS_AS(record_from_json(R"({"format": "other"})"), ComparisonError);
}

TEST_CASE("same config and seed give the same metrics") {
  const auto config = parse_config(small("sgdro", R"(, "seeds": [0, 1])"));
  const auto a = run(config, 1), b = run(config, 2);
  REQUIRE(a.size() == 2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto ra = csv_rows(a[i]), rb = csv_rows(b[i]);
    REQUIRE(ra.size() == rb.size());
    for (std::size_t j = 0; j < ra.size(); ++j) CHECK(strip_wall(ra[j]) == strip_wall(rb[j]));
  }
  CHECK(a[0].test.robust != a[1].test.robust);
}

TEST_CASE("camel with a zero consistency weight reduces to sgdro") {
  const auto camel = run(parse_config(
      small("camel", R"(, "translators": {"source": "analytic"}, "method_params": {"lambda_target": 0})")));
  const auto sgdro = run(parse_config(small("sgdro")));
  REQUIRE(camel[0].epochs.size() == sgdro[0].epochs.size());
  for (std::size_t e = 0; e < camel[0].epochs.size(); ++e) {
    CHECK(camel[0].epochs[e].validation.robust == sgdro[0].epochs[e].validation.robust);
    CHECK(camel[0].epochs[e].test.aggregate == sgdro[0].epochs[e].test.aggregate);
  }
}

TEST_CASE("outputs on disk and comparison") {
  const auto dir = scratch_dir("outputs");
  const auto erm = parse_config(small("erm", R"(, "seeds": [0, 1])"));
  const auto gdro = parse_config(small("gdro"));
  write_outputs(erm, run(erm), dir / "erm");
  write_outputs(gdro, run(gdro), dir / "gdro");
  CHECK(fs::exists(dir / "erm" / "config.json"));
  CHECK(fs::exists(dir / "erm" / "metrics.csv"));

  std::ifstream csv(dir / "erm" / "metrics.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header ==
        "run_id,method,seed,epoch,split,agg_acc,robust_acc,acc_0_0,acc_0_1,acc_1_0,acc_1_1,gap_0,gap_1,"
        "mi_estimate,lambda_current,wall_ms");
  int lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  CHECK(lines == 2 * (3 * 2 + 1));

  const auto saved = nlohmann::json::parse(std::ifstream(dir / "erm" / "config.json"));
  CHECK(saved.at("config_hash").get<std::string>() == config_hash(erm));

  const auto records = load_records(dir);
  CHECK(records.size() == 3);
  const auto rows = compare(records);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].trials + rows[1].trials == 3);
  CHECK((rows[0].best_robust != rows[1].best_robust));
  CHECK(format_comparison(rows).find("erm") != std::string::npos);

  auto twin = records;
  twin.resize(1);
  twin.push_back(twin[0]);
  const auto same = compare(twin);
  REQUIRE(same.size() == 1);
  CHECK(same[0].robust.stddev == 0.0);
  CHECK(same[0].best_robust);

  auto variants = twin;
  variants[1].config_hash = "ffffffffffffffff";
  const auto split = compare(variants);
  REQUIRE(split.size() == 2);
  CHECK(split[0].method == "erm@" + variants[0].config_hash.substr(0, 8));
  CHECK(split[1].method == "erm@ffffffff");

  auto mixed = twin;
  mixed[1].dataset = "{\"other\":1}";
  CHECK_THROWS_AS(compare(mixed), ComparisonError);
  fs::remove_all(dir);
}

TEST_CASE("thread count from the environment") {
  ::unsetenv("PATCHLAB_THREADS");
  CHECK(threads_from_env() == 1);
  ::setenv("PATCHLAB_THREADS", "4", 1);
  CHECK(threads_from_env() == 4);
  ::setenv("PATCHLAB_THREADS", "zero", 1);
  CHECK_THROWS_AS(threads_from_env(), ConfigError);
  ::setenv("PATCHLAB_THREADS", "0", 1);
  CHECK_THROWS_AS(threads_from_env(), ConfigError);
  ::unsetenv("PATCHLAB_THREADS");
}

TEST_CASE("verify dispatch") {
  CHECK(verify_suites() == std::vector<std::string>{"divergences", "bound", "mi", "generator"});
  CHECK_THROWS_AS(verify("nope"), ConfigError);
  const auto report = verify("divergences");
  CHECK(report.ok());
  CHECK(report.checks > 0);
}
