#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>
#include <thread>

#include "fedspike/federation.hpp"
#include "fedspike/net.hpp"
#include "test_util.hpp"

using namespace fedspike;
using fedspike::test::error_kind_of;

namespace {

EmbeddedDataset small_dataset(std::uint64_t seed = 1, int per_class = 20) {
  auto panel = lineage_panel(60, seed, false);
  auto corpus = synth_lineages(panel.reference, panel.signatures, per_class, 0.01, seed);
  return embed_corpus(corpus, EmbedOptions{});
}

std::array<LearnerConfig, kNumNodes> logreg_nodes() {
  std::array<LearnerConfig, kNumNodes> cfgs;
  for (int i = 0; i < kNumNodes; ++i) {
    cfgs[static_cast<std::size_t>(i)] = LearnerConfig::defaults(LearnerKind::kLogReg);
    cfgs[static_cast<std::size_t>(i)].seed = static_cast<std::uint64_t>(i + 1);
  }
  return cfgs;
}

TrainConfig quick_global(int epochs = 20) {
  TrainConfig g;
  g.epochs = epochs;
  g.seed = 5;
  return g;
}

void check_partition(const SplitPlan& plan, std::size_t n) {
  std::vector<int> seen(n, 0);
  for (auto i : plan.test) ++seen[i];
  for (const auto& s : plan.shards) {
    for (auto i : s) ++seen[i];
  }
  for (int v : seen) CHECK(v == 1);
  std::size_t lo = n, hi = 0;
  for (const auto& s : plan.shards) {
    lo = std::min(lo, s.size());
    hi = std::max(hi, s.size());
  }
  CHECK(hi - lo <= 1);
}

}  // namespace

TEST_CASE("split sizes") {
  std::vector<int> labels(9000);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 9);
  auto plan = make_split(9000, 1, true, labels);
  CHECK(plan.test.size() == 2700);
  for (const auto& s : plan.shards) CHECK(s.size() == 1575);

  auto small = make_split(10, 1, false, std::vector<int>(10, 0));
  CHECK(small.test.size() == 3);
  std::multiset<std::size_t> sizes;
  for (const auto& s : small.shards) sizes.insert(s.size());
  CHECK(sizes == std::multiset<std::size_t>{1, 2, 2, 2});

  auto again = make_split(9000, 1, true, labels);
  CHECK(again.test == plan.test);
  CHECK(again.shards == plan.shards);
  CHECK(SplitPlan::from_json(plan.to_json()).shards == plan.shards);
}

TEST_CASE("split property: partition of all indices, balanced shards, stratified test share") {
  Rng rng(2);
  for (int t = 0; t < 40; ++t) {
    const int c = 1 + static_cast<int>(rng.below(6));
    const std::size_t n = std::max<std::size_t>(10, 5 * static_cast<std::size_t>(c)) + rng.below(400);
    std::vector<int> labels;
    for (std::size_t i = 0; i < n; ++i) {
      labels.push_back(i < 5 * static_cast<std::size_t>(c) ? static_cast<int>(i) % c
                                                            : static_cast<int>(rng.below(static_cast<std::uint64_t>(c))));
    }
    for (bool stratified : {true, false}) {
      auto plan = make_split(n, rng.next(), stratified, labels);
      CHECK(plan.test.size() == static_cast<std::size_t>(std::lround(0.3 * static_cast<double>(n))));
      check_partition(plan, n);
      plan.validate(n);
      if (stratified) {
        for (int k = 0; k < c; ++k) {
          const double total = static_cast<double>(std::count(labels.begin(), labels.end(), k));
          double in_test = 0;
          for (auto i : plan.test) in_test += labels[i] == k;
          CHECK(std::abs(in_test - 0.3 * total) <= 1.0 + 1e-9);
        }
      }
    }
  }
}

TEST_CASE("frames round trip and malformed input is rejected") {
  FederationMessage m{MessageType::kProbaBatch, "node2", 7, {{"query", "tr4"}, {"rows", {{0.5, 0.5}}}}};
  const auto line = m.encode();
  CHECK(line.rfind("{\"v\":1,\"type\":\"PROBA_BATCH\",\"node\":\"node2\",\"seq\":7,\"payload\":", 0) == 0);
  auto back = FederationMessage::decode(line);
  CHECK(back.type == m.type);
  CHECK(back.node == m.node);
  CHECK(back.seq == m.seq);
  CHECK(back.payload == m.payload);

  for (const char* bad : {"not json", "[1,2]", "{\"v\":1,\"type\":\"HELLO\",\"node\":\"n\",\"seq\":1}",
                          "{\"v\":1,\"type\":\"SHOUT\",\"node\":\"n\",\"seq\":1,\"payload\":{}}",
                          "{\"v\":1,\"type\":\"HELLO\",\"node\":3,\"seq\":1,\"payload\":{}}"}) {
    CAPTURE(bad);
    CHECK(error_kind_of([&] { FederationMessage::decode(bad); }) == ErrorKind::kMalformedFrame);
  }
  CHECK(error_kind_of([] {
          FederationMessage::decode("{\"v\":2,\"type\":\"HELLO\",\"node\":\"n\",\"seq\":1,\"payload\":{}}");
        }) == ErrorKind::kVersionMismatch);
  CHECK(payload_kind(MessageType::kProbaBatch) == PayloadKind::kProbabilities);
  CHECK(payload_kind(MessageType::kMetrics) == PayloadKind::kMetrics);
  CHECK(payload_kind(MessageType::kHello) == PayloadKind::kControl);
}

TEST_CASE("wire rounding keeps 12 significant digits") {
  CHECK(wire_round(0.123456789012345) == 0.123456789012);
  CHECK(wire_round(1.0 / 3.0) == 0.333333333333);
  CHECK(wire_round(wire_round(0.7777777777777)) == wire_round(0.7777777777777));
  Matrix p(1, 3);
  p << 0.1, 0.2, 0.7;
  CHECK(proba_rows_from_json(proba_rows_to_json(p), 3) == p);
  CHECK(error_kind_of([&] { proba_rows_from_json(proba_rows_to_json(p), 4); }) == ErrorKind::kMalformedFrame);
}

TEST_CASE("global input assembly") {
  Matrix a = Matrix::Constant(4, 9, 1.0 / 9.0);
  auto g = assemble_global_input({a, a, a});
  CHECK(g.rows() == 4);
  CHECK(g.cols() == 27);
  for (Eigen::Index i = 0; i < g.size(); ++i) CHECK(g.data()[i] == 1.0 / 9.0);

  Rng rng(3);
  std::vector<ProbaMatrix> blocks;
  for (int b = 0; b < 3; ++b) blocks.push_back(fedspike::test::random_matrix(rng, 5, 9, 0, 1));
  auto forward_order = assemble_global_input(blocks);
  auto swapped = assemble_global_input({blocks[2], blocks[0], blocks[1]});
  auto checksum = [](const Matrix& m, int block) { return m.middleCols(block * 9, 9).sum(); };
  CHECK(checksum(swapped, 0) == checksum(forward_order, 2));
  CHECK(checksum(swapped, 1) == checksum(forward_order, 0));
  CHECK(checksum(swapped, 2) == checksum(forward_order, 1));
  CHECK(error_kind_of([&] { assemble_global_input({a, Matrix::Zero(3, 9)}); }) == ErrorKind::kData);
}

TEST_CASE("node session protocol") {
  auto data = small_dataset();
  auto part = partition_dataset(data, make_split(data.size(), 3, true, data.y));
  NodeSession session(part.nodes[0]);

  FederationMessage early{MessageType::kPredictReq, "coordinator", 1, {{"query", "tr4"}}};
  auto r0 = NodeSession(part.nodes[0]).handle(early);
  REQUIRE(r0.size() == 1);
  CHECK(r0[0].type == MessageType::kError);

  FederationMessage wrong{MessageType::kHello, "coordinator", 1, {{"protocol", 99}}};
  auto r1 = NodeSession(part.nodes[0]).handle(wrong);
  REQUIRE(r1.size() == 1);
  CHECK(r1[0].type == MessageType::kError);
  CHECK(r1[0].payload.at("code") == "version-mismatch");

  FederationMessage hello{MessageType::kHello, "coordinator", 1,
                          {{"protocol", kProtocolVersion}, {"num_classes", 9},
                           {"learner", LearnerConfig::defaults(LearnerKind::kLogReg).to_json()}}};
  CHECK(session.handle(hello).at(0).type == MessageType::kHello);
  CHECK_FALSE(session.model().has_value());
  auto replies = session.handle(early);
  REQUIRE(replies.size() == 2);
  CHECK(replies[0].type == MessageType::kTrainDone);
  CHECK(replies[1].type == MessageType::kProbaBatch);
  CHECK(replies[0].seq < replies[1].seq);
  for (const auto& row : replies[1].payload.at("rows")) CHECK(row.size() == 9);

  NodeSession twin(part.nodes[0]);
  twin.handle(hello);
  CHECK(twin.handle(early)[1].payload == replies[1].payload);
}

TEST_CASE("in-process federation: privacy, ordering, ensemble scoring") {
  auto data = small_dataset(2, 30);
  auto run = run_federated_training(data, logreg_nodes(), quick_global(), 4, true);
  CHECK(run.trace.loss.size() == 20);
  CHECK(run.local_models.size() == 3);
  CHECK(run.metrics.accuracy > 0.5);
  CHECK(run.node_descriptors.size() == 3);

  std::map<std::string, std::int64_t> last;
  for (const auto& line : run.message_log) {
    auto rec = nlohmann::json::parse(line);
    auto m = FederationMessage::decode(rec["frame"].dump());
    if (m.node == "coordinator") continue;
    CHECK(m.seq > last[m.node]);
    last[m.node] = m.seq;
  }

  std::vector<Matrix> shards;
  LabeledMatrix all{data.x, data.y, 9, data.label_vocab};
  for (int n = 0; n < 3; ++n) shards.push_back(all.subset(run.plan.shards[static_cast<std::size_t>(n)]).x);
  std::vector<const Matrix*> ptrs{&shards[0], &shards[1], &shards[2]};
  auto audit = audit_message_log(run.message_log, ptrs, 9);
  CHECK(audit.passed);
  CHECK(audit.rows_scanned == shards[0].rows() + shards[1].rows() + shards[2].rows());

  auto test_x = all.subset(run.plan.test).x;
  auto [proba, labels] = predict_ensemble(run, test_x);
  CHECK(labels == run.test_predictions);
  CHECK(proba == run.test_proba);
  check_proba_rows(proba);

  auto again = run_federated_training(data, logreg_nodes(), quick_global(), 4, true);
  CHECK(again.test_proba == run.test_proba);
  CHECK(again.message_log.size() == run.message_log.size());
}

TEST_CASE("audit flags leaked features and foreign payload fields") {
  Matrix secret(1, 3);
  secret << 0.25, 1.5, 3.0;
  FederationMessage leak{MessageType::kPredictReq, "coordinator", 1, {{"query", "tr4"}, {"x", {0.25, 1.5, 3.0}}}};
  std::vector<std::string> log{"{\"dir\":\"send\",\"peer\":\"node1\",\"frame\":" + leak.encode() + "}"};
  auto report = audit_message_log(log, {&secret}, 2);
  CHECK_FALSE(report.passed);
  CHECK(report.violations.size() == 2);

  FederationMessage bad_rows{MessageType::kProbaBatch, "node1", 1, {{"query", "tr4"}, {"ids", {"a"}}, {"rows", {{0.9, 0.9}}}}};
  std::vector<std::string> log2{"{\"dir\":\"recv\",\"peer\":\"node1\",\"frame\":" + bad_rows.encode() + "}"};
  CHECK_FALSE(audit_message_log(log2, {}, 2).passed);
}

TEST_CASE("node bundles round trip") {
  auto data = small_dataset();
  auto part = partition_dataset(data, make_split(data.size(), 3, true, data.y));
  const auto dir = std::filesystem::temp_directory_path() / "fedspike_bundle_test";
  std::filesystem::create_directories(dir);
  part.nodes[1].save((dir / "node2.json").string());
  part.coordinator.save((dir / "coordinator.json").string());
  auto node = NodeData::load((dir / "node2.json").string());
  CHECK(node.node_id == "node2");
  CHECK(node.shard.x == part.nodes[1].shard.x);
  CHECK(node.shard.y == part.nodes[1].shard.y);
  CHECK(node.queries.at("test").x == part.nodes[1].queries.at("test").x);
  CHECK_FALSE(node.queries.at("tr4").ids.empty());
  auto coord = CoordinatorData::load((dir / "coordinator.json").string());
  CHECK(coord.test_labels == part.coordinator.test_labels);
  CHECK(coord.plan.shards == part.coordinator.plan.shards);
  std::filesystem::remove_all(dir);
}

TEST_CASE("networked federation equals in-process federation") {
  auto data = small_dataset(3, 25);
  const std::uint64_t seed = 6;
  auto local = run_federated_training(data, logreg_nodes(), quick_global(), seed, true);

  auto part = partition_dataset(data, make_split(data.size(), seed, true, data.y));
  std::vector<std::unique_ptr<Listener>> listeners;
  std::vector<Endpoint> endpoints;
  std::vector<std::thread> threads;
  for (int n = 0; n < 3; ++n) {
    listeners.push_back(std::make_unique<Listener>(Endpoint::parse("127.0.0.1:0")));
    endpoints.push_back(Endpoint::parse("127.0.0.1:" + std::to_string(listeners.back()->port())));
    threads.emplace_back([&, n] { serve_node(*listeners[static_cast<std::size_t>(n)], part.nodes[static_cast<std::size_t>(n)], 1, {}); });
  }
  auto remote = serve_coordinator(endpoints, part.coordinator, {logreg_nodes(), quick_global()});
  for (auto& t : threads) t.join();

  CHECK(remote.metrics.confusion == local.metrics.confusion);
  CHECK(remote.test_proba == local.test_proba);
  auto strip = [](nlohmann::json j) {
    j.erase("timing");
    return j;
  };
  CHECK(strip(remote.metrics.to_json()) == strip(local.metrics.to_json()));
  CHECK(remote.message_log.size() == local.message_log.size());
}

TEST_CASE("coordinator refuses to start with an unreachable node") {
  auto data = small_dataset();
  auto part = partition_dataset(data, make_split(data.size(), 1, true, data.y));
  std::vector<std::unique_ptr<Listener>> listeners;
  std::vector<Endpoint> endpoints;
  for (int n = 0; n < 2; ++n) {
    listeners.push_back(std::make_unique<Listener>(Endpoint::parse("127.0.0.1:0")));
    endpoints.push_back(Endpoint::parse("127.0.0.1:" + std::to_string(listeners.back()->port())));
  }
  // Bind and release a port so nothing listens on it.
  std::uint16_t dead_port;
  {
    Listener tmp(Endpoint::parse("127.0.0.1:0"));
    dead_port = tmp.port();
  }
  endpoints.push_back(Endpoint::parse("127.0.0.1:" + std::to_string(dead_port)));
  NetOptions net;
  net.connect_timeout_ms = 300;
  CHECK(error_kind_of([&] { serve_coordinator(endpoints, part.coordinator, {logreg_nodes(), quick_global()}, net); }) ==
        ErrorKind::kInsufficientNodes);
  CHECK(error_kind_of([&] {
          serve_coordinator({endpoints[0], endpoints[1]}, part.coordinator, {logreg_nodes(), quick_global()}, net);
        }) == ErrorKind::kInsufficientNodes);
}

TEST_CASE("node rejects a wrong protocol version and malformed frames, then closes") {
  auto data = small_dataset();
  auto part = partition_dataset(data, make_split(data.size(), 1, true, data.y));
  Listener listener(Endpoint::parse("127.0.0.1:0"));
  std::thread node([&] { serve_node(listener, part.nodes[0], 2, {}); });
  const Endpoint ep = Endpoint::parse("127.0.0.1:" + std::to_string(listener.port()));

  {
    auto sock = LineSocket::connect(ep, 2000);
    FederationMessage hello{MessageType::kHello, "coordinator", 1, {{"protocol", 2}}};
    sock.send_line(hello.encode());
    auto reply = FederationMessage::decode(sock.receive_line(2000));
    CHECK(reply.type == MessageType::kError);
    CHECK(reply.payload.at("code") == "version-mismatch");
    CHECK(error_kind_of([&] { sock.receive_line(2000); }) == ErrorKind::kMalformedFrame);
  }
  {
    auto sock = LineSocket::connect(ep, 2000);
    sock.send_line("this is not a frame");
    auto reply = FederationMessage::decode(sock.receive_line(2000));
    CHECK(reply.type == MessageType::kError);
    CHECK(reply.payload.at("code") == "malformed-frame");
    CHECK(error_kind_of([&] { sock.receive_line(2000); }) == ErrorKind::kMalformedFrame);
  }
  node.join();
}

TEST_CASE("endpoint parsing") {
  auto e = Endpoint::parse("10.0.0.2:7000");
  CHECK(e.host == "10.0.0.2");
  CHECK(e.port == 7000);
  CHECK(Endpoint::parse("7001").host == "127.0.0.1");
  CHECK(error_kind_of([] { Endpoint::parse("host:notaport"); }) == ErrorKind::kConfig);
}
