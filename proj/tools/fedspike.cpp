#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "fedspike/net.hpp"
#include "fedspike/pipeline.hpp"

namespace fs = std::filesystem;
using namespace fedspike;

namespace {

struct Overrides {
  std::string config;
  std::string out;
  std::string fasta;
  std::string labels;
  std::string embedded;
  std::string method;
  int k = -1;
  int mismatch = -1;
  std::string local;
  std::string baseline;
  int runs = 0;
  std::int64_t seed = -1;
  bool audit = false;
  bool unstratified = false;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON run config");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--fasta", o.fasta, "FASTA input (label after '|' in headers)");
  cmd->add_option("--labels", o.labels, "id,label CSV applied to --fasta");
  cmd->add_option("--embedded", o.embedded, "Pre-embedded CSV");
  cmd->add_option("--method", o.method, "ohe|spike2vec|pwm2vec|stringkernel");
  cmd->add_option("--k", o.k, "k-mer length");
  cmd->add_option("--mismatch", o.mismatch, "String kernel mismatch budget");
  cmd->add_option("--local", o.local, "Local learner: logreg|forest|gbt");
  cmd->add_option("--runs", o.runs, "Number of seeds");
  cmd->add_option("--seed", o.seed, "Base seed (default FEDSPIKE_SEED or 0)");
  cmd->add_flag("--audit", o.audit, "Run the privacy audit over the message log");
  cmd->add_flag("--unstratified", o.unstratified, "Uniform random split");
}

RunConfig build_config(const Overrides& o) {
  RunConfig c;
  if (!o.config.empty()) {
    c = RunConfig::load(o.config);
  } else if (!o.fasta.empty() || !o.embedded.empty()) {
    nlohmann::json j{{"data", nlohmann::json::object()}};
    if (!o.fasta.empty()) j["data"]["fasta"] = o.fasta;
    if (!o.embedded.empty()) j["data"]["embedded"] = o.embedded;
    c = RunConfig::from_json(j);
  } else {
    fail(ErrorKind::kConfig, "need --config, --fasta or --embedded");
  }
  if (!o.fasta.empty()) {
    c.data = {};
    c.data.fasta = fs::absolute(o.fasta).string();
  }
  if (!o.labels.empty()) c.data.labels_csv = fs::absolute(o.labels).string();
  if (!o.embedded.empty()) {
    c.data = {};
    c.data.embedded = fs::absolute(o.embedded).string();
  }
  if (!o.method.empty()) c.embedding.method = parse_embedding_method(o.method);
  if (o.k >= 0) c.embedding.k = o.k;
  if (o.mismatch >= 0) c.embedding.max_mismatch = o.mismatch;
  if (!o.local.empty()) {
    auto cfg = LearnerConfig::defaults(parse_learner_kind(o.local));
    c.local.fill(cfg);
    c.baseline = cfg;
  }
  if (o.runs > 0) c.runs = o.runs;
  if (o.seed >= 0) c.seed = static_cast<std::uint64_t>(o.seed);
  if (o.audit) c.audit = true;
  if (o.unstratified) c.stratified = false;
  if (!o.out.empty()) c.out = o.out;
  return c;
}

void print_summary(const CommandResult& r) {
  std::printf("%-20s %10s %10s\n", "metric", "mean", "std");
  for (const auto& m : r.summary.metrics) std::printf("%-20s %10.4f %10.4f\n", m.name.c_str(), m.mean, m.std);
  for (const auto& dir : r.run_dirs) std::printf("run: %s\n", dir.c_str());
}

int run_synth(const std::string& config, std::size_t length, int per_class, double noise, bool twins,
              std::uint64_t seed, const std::string& out) {
  Corpus corpus;
  if (!config.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text_file(config));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kConfig, config + ": " + e.what());
    }
    corpus = synth_from_config(j, fs::path(config).parent_path().string());
  } else {
    nlohmann::json j{{"panel", {{"length", length}, {"twins", twins}, {"seed", seed}}},
                     {"per_class", per_class},
                     {"noise_rate", noise},
                     {"seed", seed}};
    corpus = synth_from_config(j);
  }
  write_fasta_file(out, corpus);
  const auto stats = corpus_stats(corpus);
  std::printf("%zu sequences, %zu lineages, length min %zu max %zu\n", corpus.size(), corpus.label_vocab().size(),
              stats.overall.min_len, stats.overall.max_len);
  return 0;
}

int run_partition(const RunConfig& config) {
  const auto data = load_dataset(config);
  const auto plan = make_split(data.size(), run_seed(config, 0), config.stratified, data.y);
  const auto part = partition_dataset(data, plan);
  fs::create_directories(config.out);
  for (const auto& node : part.nodes) node.save((fs::path(config.out) / (node.node_id + ".json")).string());
  part.coordinator.save((fs::path(config.out) / "coordinator.json").string());
  write_text_file((fs::path(config.out) / "config.json").string(), config.to_json().dump(2) + "\n");
  std::printf("partitioned %zu rows into %s\n", data.size(), config.out.c_str());
  return 0;
}

std::vector<Endpoint> parse_nodes(const std::string& text) {
  std::vector<Endpoint> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(Endpoint::parse(item));
  }
  if (out.size() != static_cast<std::size_t>(kNumNodes)) {
    fail(ErrorKind::kInsufficientNodes, "need exactly 3 node addresses, got " + std::to_string(out.size()));
  }
  return out;
}

int run_coordinate(const std::string& nodes, const std::string& data_dir, const RunConfig& config, int timeout_ms) {
  const auto coordinator = CoordinatorData::load((fs::path(data_dir) / "coordinator.json").string());
  const auto seed = coordinator.plan.seed;
  NetOptions net;
  net.connect_timeout_ms = timeout_ms;
  auto run = serve_coordinator(parse_nodes(nodes), coordinator, coordinator_options(config, seed), net);
  const auto dir = (fs::path(config.out) / ("run_" + std::to_string(seed))).string();
  EmbeddingDescriptor descriptor;
  try {
    const auto saved = RunConfig::load((fs::path(data_dir) / "config.json").string());
    descriptor = load_dataset(saved).descriptor;
  } catch (const Error&) {
    descriptor = load_dataset(config).descriptor;
  }
  write_run_directory(dir, run, config, descriptor, seed);
  std::vector<MetricsReport> reports{run.metrics};
  write_text_file((fs::path(config.out) / "summary.csv").string(), aggregate_runs(reports).to_csv());
  std::printf("accuracy %.4f  f1_weighted %.4f  run: %s\n", run.metrics.accuracy, run.metrics.f1_weighted,
              dir.c_str());
  if (config.audit) {
    std::vector<Matrix> shards;
    for (int n = 1; n <= kNumNodes; ++n) {
      shards.push_back(NodeData::load((fs::path(data_dir) / ("node" + std::to_string(n) + ".json")).string()).shard.x);
    }
    std::vector<const Matrix*> ptrs;
    for (const auto& s : shards) ptrs.push_back(&s);
    const auto audit = audit_message_log(run.message_log, ptrs, coordinator.num_classes);
    write_text_file((fs::path(dir) / "audit.json").string(), audit.to_json().dump(2) + "\n");
    std::printf("audit: %s (%zu frames, %zu private rows scanned)\n", audit.passed ? "PASS" : "FAIL", audit.frames,
                audit.rows_scanned);
    if (!audit.passed) return static_cast<int>(ErrorKind::kAudit);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated spike-protein lineage classification"};
  app.require_subcommand(1);

  std::string synth_config, synth_out = "synthetic.fasta";
  std::size_t synth_length = 1273;
  int synth_per_class = 100;
  double synth_noise = 0.01;
  bool synth_twins = false;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic labelled FASTA corpus");
  synth->add_option("--config", synth_config, "Generator JSON (reference + signatures)");
  synth->add_option("--length", synth_length, "Panel sequence length");
  synth->add_option("--per-class", synth_per_class, "Sequences per lineage");
  synth->add_option("--noise", synth_noise, "Per-residue substitution rate");
  synth->add_flag("--twins", synth_twins, "Make B.1.427 and B.1.429 share one signature");
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--out", synth_out, "Output FASTA");

  std::string embed_in, embed_labels, embed_method = "ohe", embed_out = "embedded.csv";
  int embed_k = 0, embed_mismatch = 0;
  std::size_t embed_components = 500;
  auto* embed = app.add_subcommand("embed", "Embed a FASTA corpus into a feature CSV");
  embed->add_option("--fasta,--input", embed_in, "FASTA input")->required();
  embed->add_option("--labels", embed_labels, "id,label CSV");
  embed->add_option("--method", embed_method, "ohe|spike2vec|pwm2vec|stringkernel");
  embed->add_option("--k", embed_k, "k-mer length (0 = method default)");
  embed->add_option("--mismatch", embed_mismatch, "String kernel mismatch budget");
  embed->add_option("--components", embed_components, "Kernel PCA components");
  embed->add_option("--out", embed_out, "Output CSV");

  Overrides fl_o, base_o, curve_o, part_o, coord_o;
  auto* fl = app.add_subcommand("fl-train", "Federated training, in-process");
  add_common(fl, fl_o);
  auto* base = app.add_subcommand("baseline-train", "Centralized training on the full training split");
  add_common(base, base_o);
  auto* curves = app.add_subcommand("curves", "Learning curves and global training trace as CSV");
  add_common(curves, curve_o);
  auto* part = app.add_subcommand("partition", "Write node bundles and coordinator data for a networked run");
  add_common(part, part_o);

  std::string listen, shard, port_file, node_log;
  int sessions = 1;
  auto* node = app.add_subcommand("node", "Serve one federation node over TCP");
  node->add_option("--listen", listen, "host:port (port 0 picks a free port)")->required();
  node->add_option("--shard", shard, "Node bundle JSON")->required();
  node->add_option("--sessions", sessions, "Coordinator sessions to serve before exiting");
  node->add_option("--port-file", port_file, "Write the bound port here");
  node->add_option("--log", node_log, "Append node-side frames (JSONL)");

  std::string coord_nodes, coord_data;
  int coord_timeout = 5000;
  auto* coord = app.add_subcommand("coordinate", "Run the coordinator against three nodes");
  coord->add_option("--nodes", coord_nodes, "ADDR,ADDR,ADDR")->required();
  coord->add_option("--data", coord_data, "Directory written by partition")->required();
  coord->add_option("--connect-timeout", coord_timeout, "Milliseconds to wait for each node");
  add_common(coord, coord_o);

  std::string eval_run;
  auto* evaluate = app.add_subcommand("evaluate", "Recompute metrics from a run directory");
  evaluate->add_option("--run", eval_run, "Run directory or its metrics.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::kConfig);
  }

  try {
    if (*synth) {
      return run_synth(synth_config, synth_length, synth_per_class, synth_noise, synth_twins, synth_seed, synth_out);
    }
    if (*embed) {
      Corpus corpus = read_fasta_file(embed_in);
      if (!embed_labels.empty()) {
        std::ifstream csv(embed_labels);
        if (!csv) fail(ErrorKind::kData, "cannot open " + embed_labels);
        corpus = apply_label_csv(corpus, csv);
      }
      EmbedOptions opts;
      opts.method = parse_embedding_method(embed_method);
      opts.k = embed_k;
      opts.max_mismatch = embed_mismatch;
      opts.components = embed_components;
      const auto data = embed_corpus(corpus, opts);
      write_embedded_csv(embed_out, data);
      std::printf("%zu rows, dim %zu -> %s\n", data.size(), data.descriptor.dim, embed_out.c_str());
      return 0;
    }
    if (*fl) {
      const auto config = build_config(fl_o);
      const auto result = cmd_fl(config, load_dataset(config));
      print_summary(result);
      if (config.audit) {
        std::printf("audit: %s\n", result.audit_passed ? "PASS" : "FAIL");
        if (!result.audit_passed) return static_cast<int>(ErrorKind::kAudit);
      }
      return 0;
    }
    if (*base) {
      const auto config = build_config(base_o);
      const auto data = load_dataset(config);
      const auto result = cmd_baseline(config, data);
      std::printf("embedding %s dim %zu\n", to_string(data.descriptor.method).c_str(), data.descriptor.dim);
      print_summary(result);
      return 0;
    }
    if (*curves) {
      const auto config = build_config(curve_o);
      for (const auto& f : cmd_curves(config, load_dataset(config))) std::printf("%s\n", f.c_str());
      return 0;
    }
    if (*part) return run_partition(build_config(part_o));
    if (*node) {
      auto data = NodeData::load(shard);
      Listener listener(Endpoint::parse(listen));
      if (!port_file.empty()) {
        const auto tmp = port_file + ".tmp";
        write_text_file(tmp, std::to_string(listener.port()) + "\n");
        fs::rename(tmp, port_file);
      }
      std::vector<std::string> log;
      serve_node(listener, std::move(data), sessions, NetOptions{}, node_log.empty() ? nullptr : &log);
      if (!node_log.empty()) {
        std::ofstream out(node_log, std::ios::app);
        for (const auto& line : log) out << line << '\n';
      }
      return 0;
    }
    if (*coord) {
      if (coord_o.config.empty() && coord_o.fasta.empty() && coord_o.embedded.empty()) {
        coord_o.config = (fs::path(coord_data) / "config.json").string();
      }
      return run_coordinate(coord_nodes, coord_data, build_config(coord_o), coord_timeout);
    }
    if (*evaluate) {
      fs::path dir(eval_run);
      if (fs::is_regular_file(dir)) dir = dir.parent_path();
      const auto report = evaluate_run_directory(dir.string());
      std::cout << strip_timing(report.to_json()).dump(2) << '\n';
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "fedspike: %s error: %s\n", error_kind_name(e.kind()), e.what());
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fedspike: %s\n", e.what());
    return static_cast<int>(ErrorKind::kData);
  }
  return 0;
}
