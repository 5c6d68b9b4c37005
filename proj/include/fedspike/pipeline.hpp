#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedspike/embeddings.hpp"
#include "fedspike/federation.hpp"
#include "fedspike/learners.hpp"
#include "fedspike/metrics.hpp"
#include "fedspike/mlp.hpp"

namespace fedspike {

struct DataSource {
  std::string fasta;       // FASTA input, or
  std::string labels_csv;  // optional sidecar for fasta
  std::string embedded;    // a pre-embedded CSV, or
  std::optional<nlohmann::json> synth;  // generator config
};

struct RunConfig {
  DataSource data;
  EmbedOptions embedding;
  std::array<LearnerConfig, kNumNodes> local{LearnerConfig::defaults(LearnerKind::kLogReg),
                                             LearnerConfig::defaults(LearnerKind::kLogReg),
                                             LearnerConfig::defaults(LearnerKind::kLogReg)};
  LearnerConfig baseline = LearnerConfig::defaults(LearnerKind::kLogReg);
  TrainConfig global;
  int runs = 1;
  std::uint64_t seed = 0;
  bool stratified = true;
  std::string out = "fedspike_out";
  bool audit = false;
  std::vector<double> curve_fractions{0.2, 0.4, 0.6, 0.8, 1.0};
  int curve_folds = 5;
  std::string base_dir;  // resolves relative paths in the config

  // Throws kConfig naming the offending field path.
  static RunConfig from_json(const nlohmann::json& j, const std::string& base_dir = "");
  static RunConfig load(const std::string& path);
  nlohmann::json to_json() const;
};

EmbeddedDataset load_dataset(const RunConfig& config);

// Seeds used by run r: split and node/global training streams.
std::uint64_t run_seed(const RunConfig& config, int run);
CoordinatorOptions coordinator_options(const RunConfig& config, std::uint64_t seed);

struct CommandResult {
  std::vector<MetricsReport> reports;
  RunSummary summary;
  std::vector<std::string> run_dirs;
  bool audit_passed = true;
  std::vector<AuditReport> audits;
};

// Centralised training on the full 70% split of each run.
CommandResult cmd_baseline(const RunConfig& config, const EmbeddedDataset& data);
CommandResult cmd_fl(const RunConfig& config, const EmbeddedDataset& data);

// Writes learning_curve_node{i}.csv per local model and global_trace.csv.
std::vector<std::string> cmd_curves(const RunConfig& config, const EmbeddedDataset& data);

// Persists one federated run: plan.json, messages.log, models/, metrics.json,
// confusion.csv, predictions.csv, trace.csv.
void write_run_directory(const std::string& dir, const FederationRun& run, const RunConfig& config,
                         const EmbeddingDescriptor& descriptor, std::uint64_t seed);

// metrics.json body; timing fields sit under "timing" keys.
nlohmann::json metrics_document(const MetricsReport& report, const std::string& mode, std::uint64_t seed,
                                const EmbeddingDescriptor& descriptor, const std::vector<std::string>& labels);

// Drops every "timing" member, recursively.
nlohmann::json strip_timing(nlohmann::json j);

// Recomputes metrics from a run directory's predictions.csv.
MetricsReport evaluate_run_directory(const std::string& dir);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace fedspike
