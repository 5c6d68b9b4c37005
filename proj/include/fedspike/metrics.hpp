#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedspike/common.hpp"

namespace fedspike {

using ConfusionMatrix = std::vector<std::vector<long>>;

// entry [i][j] counts samples of true class i predicted as j.
ConfusionMatrix confusion_matrix(const std::vector<int>& y_true, const std::vector<int>& y_pred, int num_classes);

struct MetricsReport {
  double accuracy = 0.0;
  double precision_weighted = 0.0;
  double recall_weighted = 0.0;
  double f1_weighted = 0.0;
  double f1_macro = 0.0;
  double roc_auc_ovr = 0.0;
  double train_time_seconds = 0.0;
  ConfusionMatrix confusion;
  // Classes whose precision or recall had a zero denominator and were set to 0.
  int zero_division_classes = 0;

  nlohmann::json to_json() const;  // timing lives under "timing"
};

// Metric names in reporting order, excluding timing.
const std::vector<std::string>& metric_names();
double metric_value(const MetricsReport& report, const std::string& name);

// Precision/recall/F1 family derived from a confusion matrix.
MetricsReport metrics_from_confusion(const ConfusionMatrix& confusion);

MetricsReport classification_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                                     const Matrix& proba, int num_classes);

// Macro average over classes present in y_true of the per-class
// one-vs-rest AUC (Mann-Whitney with midranks).
double roc_auc_ovr(const std::vector<int>& y_true, const Matrix& proba, int num_classes);
double binary_auc(const std::vector<double>& scores, const std::vector<bool>& positive);

struct MetricSummary {
  std::string name;
  double mean = 0.0;
  double std = 0.0;  // population (divisor R)
};

struct RunSummary {
  std::size_t runs = 0;
  std::vector<MetricSummary> metrics;  // metric_names() order, then train_time_seconds

  const MetricSummary& at(const std::string& name) const;
  std::string to_csv() const;
};

RunSummary aggregate_runs(const std::vector<MetricsReport>& reports);

std::string confusion_to_csv(const ConfusionMatrix& confusion, const std::vector<std::string>& labels);

}  // namespace fedspike
