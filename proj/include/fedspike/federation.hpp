#pragma once

#include <array>
#include <cstdint>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedspike/embeddings.hpp"
#include "fedspike/learners.hpp"
#include "fedspike/metrics.hpp"
#include "fedspike/mlp.hpp"

namespace fedspike {

inline constexpr int kProtocolVersion = 1;
inline constexpr int kNumNodes = 3;

// Test set plus four training shards; shard 4 belongs to the coordinator.
struct SplitPlan {
  std::vector<std::size_t> test;
  std::array<std::vector<std::size_t>, 4> shards;
  std::uint64_t seed = 0;
  bool stratified = true;

  // Throws kData unless the five sets partition [0, n).
  void validate(std::size_t n) const;
  nlohmann::json to_json() const;
  static SplitPlan from_json(const nlohmann::json& j);
};

// 30% test (rounded), remaining rows dealt into four shards whose sizes differ
// by at most one. Stratified mode splits every class proportionally.
SplitPlan make_split(std::size_t n, std::uint64_t seed, bool stratified, const std::vector<int>& labels);

enum class MessageType { kHello, kTrainDone, kProbaBatch, kGlobalReady, kPredictReq, kPredictResp, kMetrics, kError };
enum class PayloadKind { kControl, kProbabilities, kMetrics };

std::string to_string(MessageType type);
MessageType parse_message_type(std::string_view name);
PayloadKind payload_kind(MessageType type);

// One newline-delimited JSON frame: {"v","type","node","seq","payload"}.
// `node` names the sender; coordinator frames use "coordinator".
struct FederationMessage {
  MessageType type = MessageType::kHello;
  std::string node;
  std::int64_t seq = 0;
  nlohmann::json payload = nlohmann::json::object();

  std::string encode() const;  // no trailing newline
  // Throws kMalformedFrame, or kVersionMismatch when "v" is not ours.
  static FederationMessage decode(std::string_view line);
};

// Rounds to 12 significant digits, the precision probabilities travel with.
double wire_round(double v);
nlohmann::json proba_rows_to_json(const ProbaMatrix& p);
ProbaMatrix proba_rows_from_json(const nlohmann::json& rows, int num_classes);

struct QuerySet {
  std::vector<std::string> ids;
  Matrix x;
};

// Everything one node may hold: its private shard and the unlabeled query
// sets it is asked to score.
struct NodeData {
  std::string node_id;
  LabeledMatrix shard;
  std::map<std::string, QuerySet> queries;

  void save(const std::string& path) const;
  static NodeData load(const std::string& path);
};

// What the coordinator holds: labels for its own shard and the test set.
struct CoordinatorData {
  std::vector<std::string> train_ids;  // shard 4
  std::vector<int> train_labels;
  std::vector<std::string> test_ids;
  std::vector<int> test_labels;
  std::vector<std::string> label_vocab;
  int num_classes = 0;
  SplitPlan plan;

  void save(const std::string& path) const;
  static CoordinatorData load(const std::string& path);
};

struct FederationPartition {
  SplitPlan plan;
  std::array<NodeData, kNumNodes> nodes;
  CoordinatorData coordinator;
};

// Node i (1-based) receives shard i; queries "tr4" and "test" carry the
// coordinator-shard and test features without labels.
FederationPartition partition_dataset(const EmbeddedDataset& data, const SplitPlan& plan);

// Protocol state machine of one node. Trains lazily on the first prediction
// request so that a failed handshake elsewhere never triggers training.
class NodeSession {
 public:
  explicit NodeSession(NodeData data);

  std::vector<FederationMessage> handle(const FederationMessage& in);
  bool finished() const { return finished_; }
  const std::optional<LocalModel>& model() const { return model_; }
  const std::string& node_id() const { return data_.node_id; }
  void add_query(const std::string& name, QuerySet query) { data_.queries[name] = std::move(query); }

 private:
  FederationMessage make(MessageType type, nlohmann::json payload);
  FederationMessage error(const std::string& code, const std::string& message);

  NodeData data_;
  std::optional<LearnerConfig> config_;
  std::optional<LocalModel> model_;
  int num_classes_ = 0;
  std::int64_t seq_ = 0;
  bool finished_ = false;
};

// A duplex channel from the coordinator to one node.
class NodeLink {
 public:
  virtual ~NodeLink() = default;
  virtual void send(const std::string& frame) = 0;
  // Throws kTimeout or kMalformedFrame on failure.
  virtual std::string receive() = 0;
  virtual void close() {}
};

// Runs a NodeSession in the caller's process; frames still go through the
// wire encoding so results match the networked mode bit for bit.
class InProcessLink : public NodeLink {
 public:
  explicit InProcessLink(NodeSession& session) : session_(session) {}
  void send(const std::string& frame) override;
  std::string receive() override;

 private:
  NodeSession& session_;
  std::future<std::vector<std::string>> pending_;
  std::vector<std::string> inbox_;
};

struct FederationRun {
  SplitPlan plan;
  std::vector<nlohmann::json> node_descriptors;  // from TRAIN_DONE
  MlpModel global;
  TrainTrace trace;
  std::vector<std::string> message_log;  // JSONL records
  MetricsReport metrics;
  std::vector<std::string> label_vocab;
  std::vector<std::string> test_ids;
  std::vector<int> test_labels;
  std::vector<int> test_predictions;
  ProbaMatrix test_proba;
  // Populated only by the in-process driver, which hosts the nodes.
  std::vector<LocalModel> local_models;
};

struct CoordinatorOptions {
  std::array<LearnerConfig, kNumNodes> node_configs;
  TrainConfig global;
};

// The coordinator side of one federation round over already-open links,
// ordered node1..node3.
FederationRun run_coordinator(std::vector<std::unique_ptr<NodeLink>>& links, const CoordinatorData& data,
                              const CoordinatorOptions& options);

// Concatenates per-node probability blocks in node order.
Matrix assemble_global_input(const std::vector<ProbaMatrix>& batches);

// Split, partition and run all three nodes in this process.
FederationRun run_federated_training(const EmbeddedDataset& data, const std::array<LearnerConfig, kNumNodes>& node_configs,
                                     const TrainConfig& global_cfg, std::uint64_t seed, bool stratified = true);

// Scores x with the run's local models and the global network.
std::pair<ProbaMatrix, std::vector<int>> predict_ensemble(const FederationRun& run, const Matrix& x);

struct AuditReport {
  bool passed = true;
  std::size_t frames = 0;
  std::size_t rows_scanned = 0;
  std::vector<std::string> violations;

  nlohmann::json to_json() const;
};

// Checks payload kinds, per-type payload keys, probability-row shape, and
// scans the serialized log for any private feature row.
AuditReport audit_message_log(const std::vector<std::string>& log, const std::vector<const Matrix*>& private_features,
                              int num_classes);

}  // namespace fedspike
