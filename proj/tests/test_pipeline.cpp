#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "fedspike/pipeline.hpp"
#include "test_util.hpp"

using namespace fedspike;
using fedspike::test::error_kind_of;
using fedspike::test::error_text_of;
namespace fs = std::filesystem;

namespace {

nlohmann::json small_config(const std::string& out) {
  return {{"data", {{"synth", {{"panel", {{"length", 60}}}, {"per_class", 20}, {"noise_rate", 0.01}, {"seed", 3}}}}},
          {"embedding", {{"method", "ohe"}}},
          {"local", {{"kind", "logreg"}}},
          {"global", {{"epochs", 15}}},
          {"runs", 2},
          {"seed", 11},
          {"out", out},
          {"curves", {{"folds", 3}}}};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("fedspike_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) n += !line.empty();
  return n;
}

}  // namespace

TEST_CASE("config errors name the offending field") {
  auto j = small_config("x");
  j["local"] = nlohmann::json::array({{{"kind", "logreg"}}, {{"kind", "boost"}}, {{"kind", "tree"}}});
  const auto text = error_text_of([&] { RunConfig::from_json(j); });
  CHECK(text.find("local[1]") != std::string::npos);
  CHECK(error_kind_of([&] { RunConfig::from_json(j); }) == ErrorKind::kConfig);

  auto k = small_config("x");
  k["embedding"]["method"] = "word2vec";
  const auto emb = error_text_of([&] { RunConfig::from_json(k); });
  CHECK(emb.find("embedding") != std::string::npos);
  CHECK(emb.find("spike2vec") != std::string::npos);

  auto none = small_config("x");
  none["data"] = nlohmann::json::object();
  CHECK(error_kind_of([&] { RunConfig::from_json(none); }) == ErrorKind::kConfig);
  auto runs = small_config("x");
  runs["runs"] = 0;
  CHECK(error_text_of([&] { RunConfig::from_json(runs); }).find("runs") != std::string::npos);
}

TEST_CASE("config round trips and falls back to FEDSPIKE_SEED") {
  auto c = RunConfig::from_json(small_config("o"));
  CHECK(c.seed == 11);
  CHECK(c.runs == 2);
  CHECK(c.global.epochs == 15);
  CHECK(c.local[2].kind == LearnerKind::kLogReg);
  CHECK(RunConfig::from_json(c.to_json()).to_json() == c.to_json());

  auto j = small_config("o");
  j.erase("seed");
  ::setenv("FEDSPIKE_SEED", "77", 1);
  CHECK(RunConfig::from_json(j).seed == 77);
  ::unsetenv("FEDSPIKE_SEED");
  CHECK(RunConfig::from_json(j).seed == 0);
}

TEST_CASE("strip_timing removes nested timing members only") {
  nlohmann::json j{{"a", 1}, {"timing", 2}, {"b", {{"timing", 3}, {"c", 4}}}, {"d", {{{"timing", 5}}}}};
  CHECK(strip_timing(j) == nlohmann::json{{"a", 1}, {"b", {{"c", 4}}}, {"d", {nlohmann::json::object()}}});
}

TEST_CASE("fl command persists run directories and is deterministic") {
  const auto dir = scratch("fl");
  auto config = RunConfig::from_json(small_config((dir / "a").string()));
  config.audit = true;
  const auto data = load_dataset(config);
  auto result = cmd_fl(config, data);
  REQUIRE(result.run_dirs.size() == 2);
  CHECK(result.audit_passed);
  CHECK(result.summary.runs == 2);
  CHECK(line_count(dir / "a" / "summary.csv") == 1 + 7);

  const fs::path run = result.run_dirs[0];
  CHECK(run.filename() == "run_11");
  for (const char* f : {"plan.json", "messages.log", "metrics.json", "confusion.csv", "predictions.csv", "trace.csv",
                        "config.json", "audit.json", "models/node1.json", "models/node2.json", "models/node3.json",
                        "models/global.json"}) {
    CAPTURE(f);
    CHECK(fs::exists(run / f));
  }
  CHECK(line_count(run / "trace.csv") == 1 + 15);
  auto doc = nlohmann::json::parse(read_text_file((run / "metrics.json").string()));
  CHECK(doc.at("std_convention").get<std::string>().find("population") != std::string::npos);
  CHECK(doc.at("embedding").at("dim") == 21 * 60);

  auto recomputed = evaluate_run_directory(run.string());
  CHECK(recomputed.confusion == result.reports[0].confusion);
  CHECK(recomputed.accuracy == result.reports[0].accuracy);

  config.out = (dir / "b").string();
  auto second = cmd_fl(config, load_dataset(config));
  for (std::size_t r = 0; r < 2; ++r) {
    auto a = nlohmann::json::parse(read_text_file((fs::path(result.run_dirs[r]) / "metrics.json").string()));
    auto b = nlohmann::json::parse(read_text_file((fs::path(second.run_dirs[r]) / "metrics.json").string()));
    CHECK(strip_timing(a).dump(2) == strip_timing(b).dump(2));
  }

  // A persisted config re-executes to the same results.
  auto persisted = RunConfig::from_json(nlohmann::json::parse(read_text_file((run / "config.json").string())));
  persisted.runs = 1;
  persisted.out = (dir / "c").string();
  auto third = cmd_fl(persisted, load_dataset(persisted));
  CHECK(third.reports[0].confusion == result.reports[0].confusion);
  fs::remove_all(dir);
}

TEST_CASE("baseline command records the embedding dimension") {
  const auto dir = scratch("baseline");
  auto j = small_config(dir.string());
  j["embedding"]["method"] = "spike2vec";
  j["runs"] = 1;
  auto config = RunConfig::from_json(j);
  const auto data = load_dataset(config);
  auto result = cmd_baseline(config, data);
  REQUIRE(result.run_dirs.size() == 1);
  auto doc = nlohmann::json::parse(read_text_file((fs::path(result.run_dirs[0]) / "metrics.json").string()));
  CHECK(doc.at("embedding").at("dim") == 9261);
  CHECK(doc.at("mode") == "centralized");
  CHECK(fs::exists(dir / "summary.csv"));
  fs::remove_all(dir);
}

TEST_CASE("curves command writes one row per fraction and per epoch") {
  const auto dir = scratch("curves");
  auto j = small_config(dir.string());
  j["curves"]["fractions"] = {0.6, 0.7, 0.8, 0.9, 1.0};
  auto config = RunConfig::from_json(j);
  auto files = cmd_curves(config, load_dataset(config));
  REQUIRE(files.size() == 4);
  for (int n = 1; n <= 3; ++n) {
    CHECK(line_count(dir / "curves" / ("learning_curve_node" + std::to_string(n) + ".csv")) == 1 + 5);
  }
  CHECK(line_count(dir / "curves" / "global_trace.csv") == 1 + 15);
  fs::remove_all(dir);
}
