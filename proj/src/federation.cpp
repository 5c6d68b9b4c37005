#include "fedspike/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>

namespace fedspike {

// ---------------------------------------------------------------------------
// Split plan

void SplitPlan::validate(std::size_t n) const {
  std::vector<int> seen(n, 0);
  auto mark = [&](const std::vector<std::size_t>& set, const char* name) {
    for (std::size_t i : set) {
      if (i >= n) fail(ErrorKind::kData, std::string(name) + " index " + std::to_string(i) + " out of range");
      if (seen[i]++) fail(ErrorKind::kData, "index " + std::to_string(i) + " assigned twice");
    }
  };
  mark(test, "test");
  for (const auto& s : shards) mark(s, "shard");
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) fail(ErrorKind::kData, "split plan leaves rows unassigned");
}

nlohmann::json SplitPlan::to_json() const {
  return {{"seed", seed},           {"stratified", stratified}, {"test", test},
          {"tr1", shards[0]},       {"tr2", shards[1]},         {"tr3", shards[2]},
          {"tr4", shards[3]}};
}

SplitPlan SplitPlan::from_json(const nlohmann::json& j) {
  try {
    SplitPlan p;
    p.seed = j.at("seed").get<std::uint64_t>();
    p.stratified = j.at("stratified").get<bool>();
    p.test = j.at("test").get<std::vector<std::size_t>>();
    for (int s = 0; s < 4; ++s) p.shards[static_cast<std::size_t>(s)] = j.at("tr" + std::to_string(s + 1)).get<std::vector<std::size_t>>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, std::string("split plan: ") + e.what());
  }
}

SplitPlan make_split(std::size_t n, std::uint64_t seed, bool stratified, const std::vector<int>& labels) {
  if (n < 10) fail(ErrorKind::kData, "need at least 10 samples to split, got " + std::to_string(n));
  const auto n_test = static_cast<std::size_t>(std::lround(0.3 * static_cast<double>(n)));
  Rng rng(seed);
  SplitPlan plan;
  plan.seed = seed;
  plan.stratified = stratified;
  std::vector<std::size_t> train;

  if (!stratified) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    plan.test.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  } else {
    if (labels.size() != n) fail(ErrorKind::kData, "stratified split needs one label per row");
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);
    // Largest-remainder allocation keeps the test total at round(0.3 n).
    std::vector<std::pair<int, std::vector<std::size_t>*>> classes;
    std::vector<std::size_t> quota;
    std::vector<double> remainder;
    std::size_t allocated = 0;
    for (auto& [label, members] : by_class) {
      if (members.size() < 5) {
        fail(ErrorKind::kData, "class " + std::to_string(label) + " has " + std::to_string(members.size()) +
                                   " members; stratification needs at least 5");
      }
      rng.shuffle(members);
      const double exact = 0.3 * static_cast<double>(members.size());
      classes.emplace_back(label, &members);
      quota.push_back(static_cast<std::size_t>(std::floor(exact)));
      remainder.push_back(exact - std::floor(exact));
      allocated += quota.back();
    }
    std::vector<std::size_t> order(classes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
    for (std::size_t i = 0; allocated < n_test; ++i, ++allocated) ++quota[order[i % order.size()]];
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const auto& members = *classes[c].second;
      plan.test.insert(plan.test.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(quota[c]));
      train.insert(train.end(), members.begin() + static_cast<std::ptrdiff_t>(quota[c]), members.end());
    }
  }
  // Dealing round-robin keeps shard sizes within one of each other.
  for (std::size_t i = 0; i < train.size(); ++i) plan.shards[i % 4].push_back(train[i]);
  std::sort(plan.test.begin(), plan.test.end());
  for (auto& s : plan.shards) std::sort(s.begin(), s.end());
  plan.validate(n);
  return plan;
}

// ---------------------------------------------------------------------------
// Frames

namespace {

constexpr std::array<std::pair<MessageType, const char*>, 8> kTypeNames = {{
    {MessageType::kHello, "HELLO"},
    {MessageType::kTrainDone, "TRAIN_DONE"},
    {MessageType::kProbaBatch, "PROBA_BATCH"},
    {MessageType::kGlobalReady, "GLOBAL_READY"},
    {MessageType::kPredictReq, "PREDICT_REQ"},
    {MessageType::kPredictResp, "PREDICT_RESP"},
    {MessageType::kMetrics, "METRICS"},
    {MessageType::kError, "ERROR"},
}};

}  // namespace

std::string to_string(MessageType type) {
  for (auto [t, name] : kTypeNames) {
    if (t == type) return name;
  }
  return "?";
}

MessageType parse_message_type(std::string_view name) {
  for (auto [t, n] : kTypeNames) {
    if (name == n) return t;
  }
  fail(ErrorKind::kMalformedFrame, "unknown message type '" + std::string(name) + "'");
}

PayloadKind payload_kind(MessageType type) {
  switch (type) {
    case MessageType::kProbaBatch:
    case MessageType::kPredictResp:
      return PayloadKind::kProbabilities;
    case MessageType::kMetrics:
      return PayloadKind::kMetrics;
    default:
      return PayloadKind::kControl;
  }
}

std::string FederationMessage::encode() const {
  nlohmann::ordered_json j;
  j["v"] = kProtocolVersion;
  j["type"] = to_string(type);
  j["node"] = node;
  j["seq"] = seq;
  j["payload"] = payload;
  return j.dump();
}

FederationMessage FederationMessage::decode(std::string_view line) {
  nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) fail(ErrorKind::kMalformedFrame, "frame is not a JSON object");
  for (const char* key : {"v", "type", "node", "seq", "payload"}) {
    if (!j.contains(key)) fail(ErrorKind::kMalformedFrame, std::string("frame lacks '") + key + "'");
  }
  if (!j["type"].is_string() || !j["node"].is_string() || !j["seq"].is_number_integer() || !j["v"].is_number_integer()) {
    fail(ErrorKind::kMalformedFrame, "frame fields have the wrong types");
  }
  if (j["v"].get<std::int64_t>() != kProtocolVersion) {
    fail(ErrorKind::kVersionMismatch, "frame version " + std::to_string(j["v"].get<std::int64_t>()) +
                                          ", expected " + std::to_string(kProtocolVersion));
  }
  FederationMessage m;
  m.type = parse_message_type(j["type"].get<std::string>());
  m.node = j["node"].get<std::string>();
  m.seq = j["seq"].get<std::int64_t>();
  m.payload = std::move(j["payload"]);
  return m;
}

double wire_round(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return std::strtod(buf, nullptr);
}

nlohmann::json proba_rows_to_json(const ProbaMatrix& p) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(p.cols()));
    for (Eigen::Index j = 0; j < p.cols(); ++j) row[static_cast<std::size_t>(j)] = wire_round(p(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

ProbaMatrix proba_rows_from_json(const nlohmann::json& rows, int num_classes) {
  if (!rows.is_array()) fail(ErrorKind::kMalformedFrame, "probability rows must be an array");
  ProbaMatrix p(static_cast<Eigen::Index>(rows.size()), num_classes);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (!row.is_array() || row.size() != static_cast<std::size_t>(num_classes)) {
      fail(ErrorKind::kMalformedFrame, "probability row " + std::to_string(i) + " has the wrong length");
    }
    for (int c = 0; c < num_classes; ++c) p(static_cast<Eigen::Index>(i), c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return p;
}

// ---------------------------------------------------------------------------
// Partitioning and bundles

namespace {

nlohmann::json matrix_rows(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(std::vector<double>(m.row(i).data(), m.row(i).data() + m.cols()));
  return rows;
}

Matrix matrix_from_rows(const nlohmann::json& rows, std::size_t cols) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != cols) fail(ErrorKind::kData, "bundle row " + std::to_string(i) + " has the wrong width");
    for (std::size_t j = 0; j < cols; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j].get<double>();
  }
  return m;
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kData, "cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, path + ": " + e.what());
  }
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kData, "cannot write " + path);
  out << j.dump() << '\n';
}

}  // namespace

void NodeData::save(const std::string& path) const {
  nlohmann::json queries_json = nlohmann::json::object();
  for (const auto& [name, q] : queries) queries_json[name] = {{"ids", q.ids}, {"x", matrix_rows(q.x)}};
  write_json_file(path, {{"node", node_id},
                         {"dim", shard.cols()},
                         {"num_classes", shard.num_classes},
                         {"labels", shard.label_vocab},
                         {"shard", {{"x", matrix_rows(shard.x)}, {"y", shard.y}}},
                         {"queries", queries_json}});
}

NodeData NodeData::load(const std::string& path) {
  auto j = read_json_file(path);
  try {
    NodeData d;
    d.node_id = j.at("node").get<std::string>();
    const auto dim = j.at("dim").get<std::size_t>();
    d.shard.num_classes = j.at("num_classes").get<int>();
    d.shard.label_vocab = j.at("labels").get<std::vector<std::string>>();
    d.shard.x = matrix_from_rows(j.at("shard").at("x"), dim);
    d.shard.y = j.at("shard").at("y").get<std::vector<int>>();
    for (const auto& [name, q] : j.at("queries").items()) {
      d.queries[name] = {q.at("ids").get<std::vector<std::string>>(), matrix_from_rows(q.at("x"), dim)};
    }
    return d;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, path + ": " + e.what());
  }
}

void CoordinatorData::save(const std::string& path) const {
  write_json_file(path, {{"train_ids", train_ids}, {"train_labels", train_labels}, {"test_ids", test_ids},
                         {"test_labels", test_labels}, {"labels", label_vocab}, {"num_classes", num_classes},
                         {"plan", plan.to_json()}});
}

CoordinatorData CoordinatorData::load(const std::string& path) {
  auto j = read_json_file(path);
  try {
    CoordinatorData d;
    d.train_ids = j.at("train_ids").get<std::vector<std::string>>();
    d.train_labels = j.at("train_labels").get<std::vector<int>>();
    d.test_ids = j.at("test_ids").get<std::vector<std::string>>();
    d.test_labels = j.at("test_labels").get<std::vector<int>>();
    d.label_vocab = j.at("labels").get<std::vector<std::string>>();
    d.num_classes = j.at("num_classes").get<int>();
    d.plan = SplitPlan::from_json(j.at("plan"));
    return d;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, path + ": " + e.what());
  }
}

FederationPartition partition_dataset(const EmbeddedDataset& data, const SplitPlan& plan) {
  plan.validate(data.size());
  const int num_classes = static_cast<int>(data.label_vocab.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.y[i] < 0) fail(ErrorKind::kData, "row '" + data.ids[i] + "' is unlabeled");
  }
  auto pick_x = [&](const std::vector<std::size_t>& idx) {
    Matrix m(static_cast<Eigen::Index>(idx.size()), data.x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = data.x.row(static_cast<Eigen::Index>(idx[i]));
    return m;
  };
  auto pick = [&](const std::vector<std::size_t>& idx, auto field) {
    std::vector<std::decay_t<decltype(field(0))>> out;
    for (std::size_t i : idx) out.push_back(field(i));
    return out;
  };
  auto id_of = [&](std::size_t i) { return data.ids[i]; };
  auto label_of = [&](std::size_t i) { return data.y[i]; };

  FederationPartition part;
  part.plan = plan;
  const QuerySet tr4{pick(plan.shards[3], id_of), pick_x(plan.shards[3])};
  const QuerySet test{pick(plan.test, id_of), pick_x(plan.test)};
  for (int n = 0; n < kNumNodes; ++n) {
    auto& node = part.nodes[static_cast<std::size_t>(n)];
    const auto& idx = plan.shards[static_cast<std::size_t>(n)];
    node.node_id = "node" + std::to_string(n + 1);
    node.shard = {pick_x(idx), pick(idx, label_of), num_classes, data.label_vocab};
    node.queries["tr4"] = tr4;
    node.queries["test"] = test;
  }
  auto& c = part.coordinator;
  c.train_ids = tr4.ids;
  c.train_labels = pick(plan.shards[3], label_of);
  c.test_ids = test.ids;
  c.test_labels = pick(plan.test, label_of);
  c.label_vocab = data.label_vocab;
  c.num_classes = num_classes;
  c.plan = plan;
  return part;
}

// ---------------------------------------------------------------------------
// Node

NodeSession::NodeSession(NodeData data) : data_(std::move(data)) {}

FederationMessage NodeSession::make(MessageType type, nlohmann::json payload) {
  return {type, data_.node_id, ++seq_, std::move(payload)};
}

FederationMessage NodeSession::error(const std::string& code, const std::string& message) {
  finished_ = true;
  return make(MessageType::kError, {{"code", code}, {"message", message}});
}

std::vector<FederationMessage> NodeSession::handle(const FederationMessage& in) {
  switch (in.type) {
    case MessageType::kHello: {
      const int protocol = in.payload.value("protocol", -1);
      if (protocol != kProtocolVersion) {
        return {error("version-mismatch", "node speaks protocol " + std::to_string(kProtocolVersion) +
                                              ", coordinator sent " + std::to_string(protocol))};
      }
      try {
        config_ = LearnerConfig::from_json(in.payload.at("learner"));
        num_classes_ = in.payload.at("num_classes").get<int>();
      } catch (const std::exception& e) {
        return {error("config", e.what())};
      }
      return {make(MessageType::kHello, {{"protocol", kProtocolVersion}, {"role", "node"}})};
    }
    case MessageType::kPredictReq: {
      if (!config_) return {error("protocol", "prediction requested before HELLO")};
      std::vector<FederationMessage> out;
      if (!model_) {
        try {
          if (data_.shard.num_classes != num_classes_) {
            fail(ErrorKind::kData, "shard has " + std::to_string(data_.shard.num_classes) +
                                       " classes, coordinator expects " + std::to_string(num_classes_));
          }
          const auto start = std::chrono::steady_clock::now();
          model_ = train_local(data_.shard, *config_);
          const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
          out.push_back(make(MessageType::kTrainDone, {{"kind", to_string(config_->kind)},
                                                       {"hyperparameters", config_->to_json()},
                                                       {"dim", model_->dim()},
                                                       {"train_time_seconds", seconds}}));
        } catch (const std::exception& e) {
          out.push_back(error("training", e.what()));
          return out;
        }
      }
      const std::string query = in.payload.value("query", "");
      auto it = data_.queries.find(query);
      if (it == data_.queries.end()) {
        out.push_back(error("query", "unknown query set '" + query + "'"));
        return out;
      }
      const auto proba = model_->predict_proba(it->second.x);
      out.push_back(make(query == "tr4" ? MessageType::kProbaBatch : MessageType::kPredictResp,
                         {{"query", query}, {"ids", it->second.ids}, {"rows", proba_rows_to_json(proba)}}));
      return out;
    }
    case MessageType::kGlobalReady:
      return {};
    case MessageType::kMetrics:
    case MessageType::kError:
      finished_ = true;
      return {};
    default:
      return {error("protocol", "unexpected " + to_string(in.type) + " at a node")};
  }
}

void InProcessLink::send(const std::string& frame) {
  if (pending_.valid()) {
    auto done = pending_.get();
    inbox_.insert(inbox_.end(), done.begin(), done.end());
  }
  pending_ = std::async(std::launch::async, [this, frame] {
    std::vector<std::string> replies;
    for (const auto& m : session_.handle(FederationMessage::decode(frame))) replies.push_back(m.encode());
    return replies;
  });
}

std::string InProcessLink::receive() {
  if (inbox_.empty() && pending_.valid()) inbox_ = pending_.get();
  if (inbox_.empty()) fail(ErrorKind::kTimeout, "in-process node produced no frame");
  std::string front = std::move(inbox_.front());
  inbox_.erase(inbox_.begin());
  return front;
}

// ---------------------------------------------------------------------------
// Coordinator

Matrix assemble_global_input(const std::vector<ProbaMatrix>& batches) {
  if (batches.empty()) fail(ErrorKind::kData, "no probability batches to assemble");
  const Eigen::Index rows = batches.front().rows();
  Eigen::Index cols = 0;
  for (const auto& b : batches) {
    if (b.rows() != rows) fail(ErrorKind::kData, "probability batches disagree on row count");
    cols += b.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  for (const auto& b : batches) {
    out.middleCols(offset, b.cols()) = b;
    offset += b.cols();
  }
  return out;
}

namespace {

class CoordinatorSession {
 public:
  CoordinatorSession(std::vector<std::unique_ptr<NodeLink>>& links, std::vector<std::string>& log)
      : links_(links), log_(log), last_seq_(links.size(), 0) {}

  void send(std::size_t node, MessageType type, nlohmann::json payload) {
    FederationMessage m{type, "coordinator", ++seq_, std::move(payload)};
    const std::string frame = m.encode();
    record("send", node, frame);
    links_[node]->send(frame);
  }

  FederationMessage receive(std::size_t node) {
    const std::string frame = links_[node]->receive();
    record("recv", node, frame);
    auto m = FederationMessage::decode(frame);
    if (m.node != peer(node)) fail(ErrorKind::kMalformedFrame, "frame from '" + m.node + "' on link of " + peer(node));
    if (m.seq <= last_seq_[node]) fail(ErrorKind::kMalformedFrame, peer(node) + " sequence numbers not increasing");
    last_seq_[node] = m.seq;
    return m;
  }

  FederationMessage expect(std::size_t node, MessageType type) {
    auto m = receive(node);
    if (m.type == MessageType::kError) {
      const std::string code = m.payload.value("code", "");
      const std::string text = peer(node) + ": " + m.payload.value("message", code);
      if (code == "version-mismatch") fail(ErrorKind::kVersionMismatch, text);
      if (code == "malformed-frame") fail(ErrorKind::kMalformedFrame, text);
      fail(ErrorKind::kTraining, text);
    }
    if (m.type != type) {
      fail(ErrorKind::kMalformedFrame, peer(node) + " sent " + to_string(m.type) + ", expected " + to_string(type));
    }
    return m;
  }

  static std::string peer(std::size_t node) { return "node" + std::to_string(node + 1); }

 private:
  void record(const char* dir, std::size_t node, const std::string& frame) {
    log_.push_back(std::string("{\"dir\":\"") + dir + "\",\"peer\":\"" + peer(node) + "\",\"frame\":" + frame + "}");
  }

  std::vector<std::unique_ptr<NodeLink>>& links_;
  std::vector<std::string>& log_;
  std::vector<std::int64_t> last_seq_;
  std::int64_t seq_ = 0;
};

ProbaMatrix read_batch(const FederationMessage& m, const std::vector<std::string>& expected_ids, int num_classes) {
  if (m.payload.value("ids", std::vector<std::string>{}) != expected_ids) {
    fail(ErrorKind::kData, m.node + " returned rows in an unexpected order");
  }
  auto p = proba_rows_from_json(m.payload.at("rows"), num_classes);
  check_proba_rows(p, 1e-9);
  return p;
}

}  // namespace

FederationRun run_coordinator(std::vector<std::unique_ptr<NodeLink>>& links, const CoordinatorData& data,
                              const CoordinatorOptions& options) {
  if (links.size() != kNumNodes) {
    fail(ErrorKind::kInsufficientNodes, "federation needs " + std::to_string(kNumNodes) + " nodes, have " +
                                            std::to_string(links.size()));
  }
  options.global.validate();
  FederationRun run;
  run.plan = data.plan;
  run.label_vocab = data.label_vocab;
  run.test_ids = data.test_ids;
  run.test_labels = data.test_labels;
  CoordinatorSession session(links, run.message_log);
  const auto nodes = static_cast<std::size_t>(kNumNodes);

  for (std::size_t n = 0; n < nodes; ++n) {
    session.send(n, MessageType::kHello, {{"protocol", kProtocolVersion},
                                          {"role", "coordinator"},
                                          {"node", CoordinatorSession::peer(n)},
                                          {"num_classes", data.num_classes},
                                          {"learner", options.node_configs[n].to_json()}});
  }
  for (std::size_t n = 0; n < nodes; ++n) session.expect(n, MessageType::kHello);

  // Nodes train concurrently once every handshake has succeeded.
  for (std::size_t n = 0; n < nodes; ++n) session.send(n, MessageType::kPredictReq, {{"query", "tr4"}});
  std::vector<ProbaMatrix> lambdas;
  double slowest_node = 0.0;
  for (std::size_t n = 0; n < nodes; ++n) {
    auto done = session.expect(n, MessageType::kTrainDone);
    slowest_node = std::max(slowest_node, done.payload.value("train_time_seconds", 0.0));
    done.payload.erase("train_time_seconds");
    run.node_descriptors.push_back(done.payload);
    lambdas.push_back(read_batch(session.expect(n, MessageType::kProbaBatch), data.train_ids, data.num_classes));
  }

  LabeledMatrix global_train{assemble_global_input(lambdas), data.train_labels, data.num_classes, data.label_vocab};
  const auto start = std::chrono::steady_clock::now();
  auto arch = MlpArchitecture::stacking(data.num_classes, kNumNodes);
  auto [model, trace] = train_mlp(init_mlp(arch, options.global.seed), global_train, options.global);
  const double global_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  run.global = std::move(model);
  run.trace = std::move(trace);

  for (std::size_t n = 0; n < nodes; ++n) {
    session.send(n, MessageType::kGlobalReady, {{"epochs", options.global.epochs},
                                                {"final_loss", wire_round(run.trace.loss.back())},
                                                {"final_accuracy", wire_round(run.trace.accuracy.back())}});
  }
  for (std::size_t n = 0; n < nodes; ++n) session.send(n, MessageType::kPredictReq, {{"query", "test"}});
  std::vector<ProbaMatrix> test_blocks;
  for (std::size_t n = 0; n < nodes; ++n) {
    test_blocks.push_back(read_batch(session.expect(n, MessageType::kPredictResp), data.test_ids, data.num_classes));
  }
  run.test_proba = forward(run.global, assemble_global_input(test_blocks));
  run.test_predictions = argmax_rows(run.test_proba);
  run.metrics = classification_metrics(data.test_labels, run.test_predictions, run.test_proba, data.num_classes);
  run.metrics.train_time_seconds = slowest_node + global_seconds;

  nlohmann::json scalars;
  for (const auto& name : metric_names()) scalars[name] = wire_round(metric_value(run.metrics, name));
  for (std::size_t n = 0; n < nodes; ++n) session.send(n, MessageType::kMetrics, scalars);
  for (auto& link : links) link->close();
  return run;
}

FederationRun run_federated_training(const EmbeddedDataset& data, const std::array<LearnerConfig, kNumNodes>& node_configs,
                                     const TrainConfig& global_cfg, std::uint64_t seed, bool stratified) {
  auto plan = make_split(data.size(), seed, stratified, data.y);
  auto part = partition_dataset(data, plan);
  std::vector<std::unique_ptr<NodeSession>> sessions;
  std::vector<std::unique_ptr<NodeLink>> links;
  for (auto& node : part.nodes) {
    sessions.push_back(std::make_unique<NodeSession>(std::move(node)));
    links.push_back(std::make_unique<InProcessLink>(*sessions.back()));
  }
  auto run = run_coordinator(links, part.coordinator, {node_configs, global_cfg});
  for (const auto& s : sessions) {
    if (!s->model()) fail(ErrorKind::kTraining, s->node_id() + " finished without a model");
    run.local_models.push_back(*s->model());
  }
  return run;
}

std::pair<ProbaMatrix, std::vector<int>> predict_ensemble(const FederationRun& run, const Matrix& x) {
  if (run.local_models.size() != kNumNodes) {
    fail(ErrorKind::kConfig, "predict_ensemble needs the local models of an in-process run");
  }
  std::vector<ProbaMatrix> blocks;
  for (const auto& m : run.local_models) {
    const int c = m.num_classes();
    blocks.push_back(proba_rows_from_json(proba_rows_to_json(m.predict_proba(x)), c));
  }
  ProbaMatrix p = forward(run.global, assemble_global_input(blocks));
  auto labels = argmax_rows(p);
  return {std::move(p), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Audit

nlohmann::json AuditReport::to_json() const {
  return {{"passed", passed}, {"frames", frames}, {"rows_scanned", rows_scanned}, {"violations", violations}};
}

namespace {

const std::map<MessageType, std::set<std::string>>& allowed_keys() {
  static const std::map<MessageType, std::set<std::string>> keys = {
      {MessageType::kHello, {"protocol", "role", "node", "num_classes", "learner"}},
      {MessageType::kTrainDone, {"kind", "hyperparameters", "dim", "train_time_seconds"}},
      {MessageType::kProbaBatch, {"query", "ids", "rows"}},
      {MessageType::kPredictResp, {"query", "ids", "rows"}},
      {MessageType::kPredictReq, {"query"}},
      {MessageType::kGlobalReady, {"epochs", "final_loss", "final_accuracy"}},
      {MessageType::kMetrics, {"accuracy", "precision_weighted", "recall_weighted", "f1_weighted", "f1_macro", "roc_auc_ovr"}},
      {MessageType::kError, {"code", "message"}},
  };
  return keys;
}

std::vector<std::string> row_encodings(const double* row, Eigen::Index cols) {
  std::vector<double> values(row, row + cols);
  std::string as_json = nlohmann::json(values).dump();
  std::string as_text;
  char buf[32];
  for (Eigen::Index j = 0; j < cols; ++j) {
    std::snprintf(buf, sizeof buf, "%.12g", row[j]);
    if (j) as_text += ',';
    as_text += buf;
  }
  std::string as_bytes(reinterpret_cast<const char*>(row), static_cast<std::size_t>(cols) * sizeof(double));
  return {as_json.substr(1, as_json.size() - 2), as_text, as_bytes};
}

}  // namespace

AuditReport audit_message_log(const std::vector<std::string>& log, const std::vector<const Matrix*>& private_features,
                              int num_classes) {
  AuditReport report;
  std::string all_bytes;
  for (const auto& line : log) {
    all_bytes += line;
    all_bytes += '\n';
    ++report.frames;
    auto record = nlohmann::json::parse(line, nullptr, false);
    if (record.is_discarded() || !record.contains("frame")) {
      report.violations.push_back("unparseable log record: " + line.substr(0, 80));
      continue;
    }
    FederationMessage m;
    try {
      m = FederationMessage::decode(record["frame"].dump());
    } catch (const Error& e) {
      report.violations.push_back(std::string("bad frame: ") + e.what());
      continue;
    }
    const auto& keys = allowed_keys().at(m.type);
    if (!m.payload.is_object()) {
      report.violations.push_back(to_string(m.type) + " payload is not an object");
      continue;
    }
    for (const auto& [key, value] : m.payload.items()) {
      if (!keys.count(key)) report.violations.push_back(to_string(m.type) + " carries unexpected field '" + key + "'");
    }
    if (payload_kind(m.type) == PayloadKind::kProbabilities) {
      try {
        check_proba_rows(proba_rows_from_json(m.payload.at("rows"), num_classes), 1e-9);
      } catch (const std::exception& e) {
        report.violations.push_back(to_string(m.type) + " from " + m.node + ": " + e.what());
      }
    }
  }
  for (const Matrix* features : private_features) {
    for (Eigen::Index i = 0; i < features->rows(); ++i) {
      ++report.rows_scanned;
      for (const auto& needle : row_encodings(features->row(i).data(), features->cols())) {
        auto it = std::search(all_bytes.begin(), all_bytes.end(),
                              std::boyer_moore_horspool_searcher(needle.begin(), needle.end()));
        if (it != all_bytes.end()) {
          report.violations.push_back("private feature row " + std::to_string(i) + " found in message log");
          break;
        }
      }
    }
  }
  report.passed = report.violations.empty();
  return report;
}

}  // namespace fedspike
