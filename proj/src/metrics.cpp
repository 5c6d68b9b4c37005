#include "fedspike/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace fedspike {

namespace {

void check_labels(const std::vector<int>& y, int num_classes) {
  for (int v : y) {
    if (v < 0 || v >= num_classes) {
      fail(ErrorKind::kData, "label " + std::to_string(v) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

}  // namespace

ConfusionMatrix confusion_matrix(const std::vector<int>& y_true, const std::vector<int>& y_pred, int num_classes) {
  if (y_true.size() != y_pred.size()) fail(ErrorKind::kData, "y_true and y_pred lengths differ");
  check_labels(y_true, num_classes);
  check_labels(y_pred, num_classes);
  ConfusionMatrix m(static_cast<std::size_t>(num_classes), std::vector<long>(static_cast<std::size_t>(num_classes), 0));
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    ++m[static_cast<std::size_t>(y_true[i])][static_cast<std::size_t>(y_pred[i])];
  }
  return m;
}

MetricsReport metrics_from_confusion(const ConfusionMatrix& confusion) {
  const std::size_t c = confusion.size();
  MetricsReport r;
  r.confusion = confusion;
  std::vector<double> support(c, 0.0), predicted(c, 0.0);
  double total = 0.0, diag = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const auto v = static_cast<double>(confusion[i][j]);
      support[i] += v;
      predicted[j] += v;
      total += v;
    }
    diag += static_cast<double>(confusion[i][i]);
  }
  if (total == 0) fail(ErrorKind::kData, "no samples to evaluate");
  r.accuracy = diag / total;
  double f1_sum = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    const auto tp = static_cast<double>(confusion[k][k]);
    bool undefined = false;
    double precision = 0.0, recall = 0.0;
    if (predicted[k] > 0) precision = tp / predicted[k]; else undefined = true;
    if (support[k] > 0) recall = tp / support[k]; else undefined = true;
    const double f1 = precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    r.zero_division_classes += undefined;
    r.precision_weighted += support[k] * precision;
    r.recall_weighted += tp;  // support * recall
    r.f1_weighted += support[k] * f1;
    f1_sum += f1;
  }
  r.precision_weighted /= total;
  r.recall_weighted /= total;
  r.f1_weighted /= total;
  r.f1_macro = f1_sum / static_cast<double>(c);
  return r;
}

double binary_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  double n_pos = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
    for (std::size_t t = i; t < j; ++t) {
      if (positive[order[t]]) {
        pos_rank_sum += midrank;
        n_pos += 1.0;
      }
    }
    i = j;
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) return 0.5;
  return (pos_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

double roc_auc_ovr(const std::vector<int>& y_true, const Matrix& proba, int num_classes) {
  if (static_cast<std::size_t>(proba.rows()) != y_true.size() || proba.cols() != num_classes) {
    fail(ErrorKind::kData, "probability matrix shape does not match labels");
  }
  check_labels(y_true, num_classes);
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<bool> positive(y_true.size());
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) n_pos += positive[i] = y_true[i] == c;
    if (n_pos == 0) {
      warn("roc_auc_ovr: class " + std::to_string(c) + " absent from y_true, skipped");
      continue;
    }
    if (n_pos == y_true.size()) continue;
    std::vector<double> scores(y_true.size());
    for (std::size_t i = 0; i < y_true.size(); ++i) scores[i] = proba(static_cast<Eigen::Index>(i), c);
    sum += binary_auc(scores, positive);
    ++counted;
  }
  return counted ? sum / counted : 0.5;
}

MetricsReport classification_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                                     const Matrix& proba, int num_classes) {
  auto r = metrics_from_confusion(confusion_matrix(y_true, y_pred, num_classes));
  r.roc_auc_ovr = roc_auc_ovr(y_true, proba, num_classes);
  return r;
}

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names = {"accuracy", "precision_weighted", "recall_weighted",
                                                 "f1_weighted", "f1_macro", "roc_auc_ovr"};
  return names;
}

double metric_value(const MetricsReport& r, const std::string& name) {
  if (name == "accuracy") return r.accuracy;
  if (name == "precision_weighted") return r.precision_weighted;
  if (name == "recall_weighted") return r.recall_weighted;
  if (name == "f1_weighted") return r.f1_weighted;
  if (name == "f1_macro") return r.f1_macro;
  if (name == "roc_auc_ovr") return r.roc_auc_ovr;
  if (name == "train_time_seconds") return r.train_time_seconds;
  fail(ErrorKind::kConfig, "unknown metric '" + name + "'");
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  for (const auto& name : metric_names()) j[name] = metric_value(*this, name);
  j["confusion"] = confusion;
  j["zero_division_classes"] = zero_division_classes;
  j["timing"] = {{"train_time_seconds", train_time_seconds}};
  return j;
}

const MetricSummary& RunSummary::at(const std::string& name) const {
  for (const auto& m : metrics) {
    if (m.name == name) return m;
  }
  fail(ErrorKind::kConfig, "no summary for metric '" + name + "'");
}

std::string RunSummary::to_csv() const {
  std::ostringstream out;
  out.precision(12);
  out << "metric,mean,std\n";
  for (const auto& m : metrics) out << m.name << ',' << m.mean << ',' << m.std << '\n';
  return out.str();
}

RunSummary aggregate_runs(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) fail(ErrorKind::kData, "aggregate_runs needs at least one report");
  RunSummary s;
  s.runs = reports.size();
  auto names = metric_names();
  names.push_back("train_time_seconds");
  const auto r = static_cast<double>(reports.size());
  for (const auto& name : names) {
    double mean = 0.0;
    for (const auto& rep : reports) mean += metric_value(rep, name);
    mean /= r;
    double var = 0.0;
    for (const auto& rep : reports) var += std::pow(metric_value(rep, name) - mean, 2);
    s.metrics.push_back({name, mean, std::sqrt(var / r)});
  }
  return s;
}

std::string confusion_to_csv(const ConfusionMatrix& confusion, const std::vector<std::string>& labels) {
  std::ostringstream out;
  out << "true\\pred";
  for (std::size_t j = 0; j < confusion.size(); ++j) out << ',' << (j < labels.size() ? labels[j] : std::to_string(j));
  out << '\n';
  for (std::size_t i = 0; i < confusion.size(); ++i) {
    out << (i < labels.size() ? labels[i] : std::to_string(i));
    for (long v : confusion[i]) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

}  // namespace fedspike
