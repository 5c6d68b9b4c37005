#include "fedspike/pipeline.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fedspike {

namespace fs = std::filesystem;

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kData, "cannot write " + path);
  out << text;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kData, "cannot read " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

namespace {

template <typename F>
auto at_field(const std::string& path, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, "config field '" + path + "': " + e.what());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, "config field '" + path + "': " + e.what());
  }
}

std::string resolve(const std::string& base, const std::string& path) {
  if (path.empty() || base.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base) / path).string();
}

std::uint64_t env_seed() {
  if (const char* s = std::getenv("FEDSPIKE_SEED")) {
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      fail(ErrorKind::kConfig, "FEDSPIKE_SEED is not an unsigned integer");
    }
  }
  return 0;
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j, const std::string& base_dir) {
  RunConfig c;
  c.base_dir = base_dir;
  if (!j.is_object()) fail(ErrorKind::kConfig, "config must be a JSON object");
  at_field("data", [&] {
    const auto& d = j.at("data");
    c.data.fasta = d.value("fasta", "");
    c.data.labels_csv = d.value("labels_csv", "");
    c.data.embedded = d.value("embedded", "");
    if (d.contains("synth")) c.data.synth = d.at("synth");
    const int sources = !c.data.fasta.empty() + !c.data.embedded.empty() + c.data.synth.has_value();
    if (sources != 1) fail(ErrorKind::kConfig, "exactly one of fasta, embedded, synth is required");
  });
  if (j.contains("embedding")) {
    at_field("embedding", [&] {
      const auto& e = j.at("embedding");
      c.embedding.method = parse_embedding_method(e.value("method", "ohe"));
      c.embedding.k = e.value("k", 0);
      c.embedding.max_mismatch = e.value("mismatch", 0);
      c.embedding.components = e.value("components", std::size_t{500});
    });
  }
  if (j.contains("local")) {
    const auto& l = j.at("local");
    if (l.is_array()) {
      if (l.size() != static_cast<std::size_t>(kNumNodes)) {
        fail(ErrorKind::kConfig, "config field 'local': expected one object or an array of 3");
      }
      for (std::size_t i = 0; i < l.size(); ++i) {
        c.local[i] = at_field("local[" + std::to_string(i) + "]", [&] { return LearnerConfig::from_json(l[i]); });
      }
    } else {
      auto cfg = at_field("local", [&] { return LearnerConfig::from_json(l); });
      c.local.fill(cfg);
    }
    c.baseline = c.local[0];
  }
  if (j.contains("baseline")) c.baseline = at_field("baseline", [&] { return LearnerConfig::from_json(j.at("baseline")); });
  if (j.contains("global")) c.global = at_field("global", [&] { return TrainConfig::from_json(j.at("global")); });
  at_field("runs", [&] { c.runs = j.value("runs", 1); });
  if (c.runs < 1) fail(ErrorKind::kConfig, "config field 'runs': must be at least 1");
  at_field("seed", [&] { c.seed = j.contains("seed") ? j.at("seed").get<std::uint64_t>() : env_seed(); });
  at_field("stratified", [&] { c.stratified = j.value("stratified", true); });
  at_field("out", [&] { c.out = j.value("out", c.out); });
  at_field("audit", [&] { c.audit = j.value("audit", false); });
  if (j.contains("curves")) {
    at_field("curves", [&] {
      const auto& cv = j.at("curves");
      c.curve_fractions = cv.value("fractions", c.curve_fractions);
      c.curve_folds = cv.value("folds", c.curve_folds);
    });
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, path + ": " + e.what());
  }
  return from_json(j, fs::path(path).parent_path().string());
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json data;
  if (!this->data.fasta.empty()) data["fasta"] = resolve(base_dir, this->data.fasta);
  if (!this->data.labels_csv.empty()) data["labels_csv"] = resolve(base_dir, this->data.labels_csv);
  if (!this->data.embedded.empty()) data["embedded"] = resolve(base_dir, this->data.embedded);
  if (this->data.synth) data["synth"] = *this->data.synth;
  nlohmann::json local = nlohmann::json::array();
  for (const auto& l : this->local) local.push_back(l.to_json());
  return {{"data", data},
          {"embedding", {{"method", to_string(embedding.method)},
                         {"k", embedding.k},
                         {"mismatch", embedding.max_mismatch},
                         {"components", embedding.components}}},
          {"local", local},
          {"baseline", baseline.to_json()},
          {"global", global.to_json()},
          {"runs", runs},
          {"seed", seed},
          {"stratified", stratified},
          {"out", out},
          {"audit", audit},
          {"curves", {{"fractions", curve_fractions}, {"folds", curve_folds}}}};
}

EmbeddedDataset load_dataset(const RunConfig& config) {
  if (!config.data.embedded.empty()) return read_embedded_csv(resolve(config.base_dir, config.data.embedded));
  Corpus corpus;
  if (config.data.synth) {
    corpus = synth_from_config(*config.data.synth, config.base_dir);
  } else {
    corpus = read_fasta_file(resolve(config.base_dir, config.data.fasta));
    if (!config.data.labels_csv.empty()) {
      std::ifstream csv(resolve(config.base_dir, config.data.labels_csv));
      if (!csv) fail(ErrorKind::kData, "cannot open " + config.data.labels_csv);
      corpus = apply_label_csv(corpus, csv);
    }
  }
  return embed_corpus(corpus, config.embedding);
}

std::uint64_t run_seed(const RunConfig& config, int run) { return config.seed + static_cast<std::uint64_t>(run); }

CoordinatorOptions coordinator_options(const RunConfig& config, std::uint64_t seed) {
  CoordinatorOptions o{config.local, config.global};
  for (std::size_t i = 0; i < o.node_configs.size(); ++i) o.node_configs[i].seed = derive_seed(seed, i + 1);
  o.global.seed = derive_seed(seed, 10);
  return o;
}

nlohmann::json strip_timing(nlohmann::json j) {
  if (j.is_object()) {
    j.erase("timing");
    for (auto& [key, value] : j.items()) value = strip_timing(value);
  } else if (j.is_array()) {
    for (auto& v : j) v = strip_timing(v);
  }
  return j;
}

nlohmann::json metrics_document(const MetricsReport& report, const std::string& mode, std::uint64_t seed,
                                const EmbeddingDescriptor& descriptor, const std::vector<std::string>& labels) {
  return {{"mode", mode},
          {"seed", seed},
          {"labels", labels},
          {"embedding", {{"method", to_string(descriptor.method)},
                         {"k", descriptor.k},
                         {"dim", descriptor.dim},
                         {"pad_len", descriptor.pad_len}}},
          {"metrics", report.to_json()},
          {"std_convention", "population standard deviation (divisor = number of runs)"}};
}

namespace {

void write_summary(const std::string& out, const std::vector<MetricsReport>& reports, CommandResult& result) {
  result.reports = reports;
  result.summary = aggregate_runs(reports);
  write_text_file((fs::path(out) / "summary.csv").string(), result.summary.to_csv());
}

std::string predictions_csv(const std::vector<std::string>& ids, const std::vector<int>& truth,
                            const std::vector<int>& pred, const Matrix& proba) {
  std::ostringstream out;
  out.precision(17);
  out << "id,true,pred";
  for (Eigen::Index c = 0; c < proba.cols(); ++c) out << ",p" << c;
  out << '\n';
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out << ids[i] << ',' << truth[i] << ',' << pred[i];
    for (Eigen::Index c = 0; c < proba.cols(); ++c) out << ',' << proba(static_cast<Eigen::Index>(i), c);
    out << '\n';
  }
  return out.str();
}

}  // namespace

void write_run_directory(const std::string& dir, const FederationRun& run, const RunConfig& config,
                         const EmbeddingDescriptor& descriptor, std::uint64_t seed) {
  fs::create_directories(fs::path(dir) / "models");
  const fs::path d(dir);
  write_text_file((d / "plan.json").string(), run.plan.to_json().dump() + "\n");
  std::string log;
  for (const auto& line : run.message_log) log += line + "\n";
  write_text_file((d / "messages.log").string(), log);
  for (std::size_t i = 0; i < run.local_models.size(); ++i) {
    write_text_file((d / "models" / ("node" + std::to_string(i + 1) + ".json")).string(),
                    run.local_models[i].to_json().dump() + "\n");
  }
  write_text_file((d / "models" / "global.json").string(), run.global.to_json().dump() + "\n");
  auto doc = metrics_document(run.metrics, "federated", seed, descriptor, run.label_vocab);
  doc["nodes"] = run.node_descriptors;
  write_text_file((d / "metrics.json").string(), doc.dump(2) + "\n");
  write_text_file((d / "confusion.csv").string(), confusion_to_csv(run.metrics.confusion, run.label_vocab));
  write_text_file((d / "predictions.csv").string(),
                  predictions_csv(run.test_ids, run.test_labels, run.test_predictions, run.test_proba));
  std::ostringstream trace;
  trace.precision(12);
  trace << "epoch,loss,accuracy\n";
  for (std::size_t e = 0; e < run.trace.loss.size(); ++e) {
    trace << e << ',' << run.trace.loss[e] << ',' << run.trace.accuracy[e] << '\n';
  }
  write_text_file((d / "trace.csv").string(), trace.str());
  write_text_file((d / "config.json").string(), config.to_json().dump(2) + "\n");
}

CommandResult cmd_baseline(const RunConfig& config, const EmbeddedDataset& data) {
  fs::create_directories(config.out);
  CommandResult result;
  std::vector<MetricsReport> reports;
  const int num_classes = static_cast<int>(data.label_vocab.size());
  for (int r = 0; r < config.runs; ++r) {
    const auto seed = run_seed(config, r);
    auto plan = make_split(data.size(), seed, config.stratified, data.y);
    std::vector<std::size_t> train;
    for (const auto& s : plan.shards) train.insert(train.end(), s.begin(), s.end());
    std::sort(train.begin(), train.end());
    LabeledMatrix all{data.x, data.y, num_classes, data.label_vocab};
    auto train_set = all.subset(train);
    auto test_set = all.subset(plan.test);
    auto cfg = config.baseline;
    cfg.seed = derive_seed(seed, 20);

    const auto start = std::chrono::steady_clock::now();
    auto model = train_local(train_set, cfg);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    auto proba = model.predict_proba(test_set.x);
    auto pred = model.predict(test_set.x);
    auto report = classification_metrics(test_set.y, pred, proba, num_classes);
    report.train_time_seconds = seconds;

    const auto dir = fs::path(config.out) / ("run_" + std::to_string(seed));
    fs::create_directories(dir);
    auto doc = metrics_document(report, "centralized", seed, data.descriptor, data.label_vocab);
    doc["learner"] = cfg.to_json();
    write_text_file((dir / "metrics.json").string(), doc.dump(2) + "\n");
    write_text_file((dir / "confusion.csv").string(), confusion_to_csv(report.confusion, data.label_vocab));
    std::vector<std::string> ids;
    for (std::size_t i : plan.test) ids.push_back(data.ids[i]);
    write_text_file((dir / "predictions.csv").string(), predictions_csv(ids, test_set.y, pred, proba));
    write_text_file((dir / "config.json").string(), config.to_json().dump(2) + "\n");
    result.run_dirs.push_back(dir.string());
    reports.push_back(std::move(report));
  }
  write_summary(config.out, reports, result);
  return result;
}

CommandResult cmd_fl(const RunConfig& config, const EmbeddedDataset& data) {
  fs::create_directories(config.out);
  CommandResult result;
  std::vector<MetricsReport> reports;
  for (int r = 0; r < config.runs; ++r) {
    const auto seed = run_seed(config, r);
    const auto options = coordinator_options(config, seed);
    auto run = run_federated_training(data, options.node_configs, options.global, seed, config.stratified);
    const auto dir = (fs::path(config.out) / ("run_" + std::to_string(seed))).string();
    write_run_directory(dir, run, config, data.descriptor, seed);
    if (config.audit) {
      std::vector<Matrix> shards;
      for (int n = 0; n < kNumNodes; ++n) {
        LabeledMatrix all{data.x, data.y, static_cast<int>(data.label_vocab.size()), data.label_vocab};
        shards.push_back(all.subset(run.plan.shards[static_cast<std::size_t>(n)]).x);
      }
      std::vector<const Matrix*> ptrs;
      for (const auto& s : shards) ptrs.push_back(&s);
      auto audit = audit_message_log(run.message_log, ptrs, static_cast<int>(data.label_vocab.size()));
      write_text_file((fs::path(dir) / "audit.json").string(), audit.to_json().dump(2) + "\n");
      result.audit_passed = result.audit_passed && audit.passed;
      result.audits.push_back(std::move(audit));
    }
    result.run_dirs.push_back(dir);
    reports.push_back(run.metrics);
  }
  write_summary(config.out, reports, result);
  return result;
}

std::vector<std::string> cmd_curves(const RunConfig& config, const EmbeddedDataset& data) {
  const auto dir = fs::path(config.out) / "curves";
  fs::create_directories(dir);
  const auto seed = run_seed(config, 0);
  auto plan = make_split(data.size(), seed, config.stratified, data.y);
  auto part = partition_dataset(data, plan);
  const auto options = coordinator_options(config, seed);
  std::vector<std::string> files;
  for (int n = 0; n < kNumNodes; ++n) {
    const auto& node = part.nodes[static_cast<std::size_t>(n)];
    auto points = learning_curve(node.shard, options.node_configs[static_cast<std::size_t>(n)], config.curve_fractions,
                                 config.curve_folds);
    std::ostringstream csv;
    csv.precision(12);
    csv << "fraction,train_accuracy,validation_accuracy\n";
    for (const auto& p : points) csv << p.fraction << ',' << p.train_accuracy << ',' << p.validation_accuracy << '\n';
    const auto path = (dir / ("learning_curve_" + node.node_id + ".csv")).string();
    write_text_file(path, csv.str());
    files.push_back(path);
  }
  auto run = run_federated_training(data, options.node_configs, options.global, seed, config.stratified);
  std::ostringstream trace;
  trace.precision(12);
  trace << "epoch,loss,accuracy\n";
  for (std::size_t e = 0; e < run.trace.loss.size(); ++e) {
    trace << e << ',' << run.trace.loss[e] << ',' << run.trace.accuracy[e] << '\n';
  }
  const auto trace_path = (dir / "global_trace.csv").string();
  write_text_file(trace_path, trace.str());
  files.push_back(trace_path);
  return files;
}

MetricsReport evaluate_run_directory(const std::string& dir) {
  const fs::path d(dir);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_text_file((d / "metrics.json").string()));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, "metrics.json: " + std::string(e.what()));
  }
  const auto labels = doc.at("labels").get<std::vector<std::string>>();
  const int num_classes = static_cast<int>(labels.size());
  std::istringstream in(read_text_file((d / "predictions.csv").string()));
  std::string line;
  std::getline(in, line);
  std::vector<int> truth, pred;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != static_cast<std::size_t>(3 + num_classes)) fail(ErrorKind::kData, "bad predictions row: " + line);
    truth.push_back(std::stoi(cells[1]));
    pred.push_back(std::stoi(cells[2]));
    std::vector<double> p;
    for (int c = 0; c < num_classes; ++c) p.push_back(std::stod(cells[static_cast<std::size_t>(3 + c)]));
    rows.push_back(std::move(p));
  }
  Matrix proba(static_cast<Eigen::Index>(rows.size()), num_classes);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int c = 0; c < num_classes; ++c) proba(static_cast<Eigen::Index>(i), c) = rows[i][static_cast<std::size_t>(c)];
  }
  return classification_metrics(truth, pred, proba, num_classes);
}

}  // namespace fedspike
