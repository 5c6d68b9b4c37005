#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedspike/common.hpp"

namespace fedspike {

struct LabeledMatrix {
  Matrix x;
  std::vector<int> y;
  int num_classes = 0;
  std::vector<std::string> label_vocab;

  std::size_t rows() const { return y.size(); }
  std::size_t cols() const { return static_cast<std::size_t>(x.cols()); }
  // Throws kData on shape/label violations or non-finite features.
  void validate() const;
  LabeledMatrix subset(const std::vector<std::size_t>& rows) const;
};

// n x C, rows on the probability simplex.
using ProbaMatrix = Matrix;

// Throws kData unless every row sums to 1 within tol with entries in [0,1].
void check_proba_rows(const ProbaMatrix& p, double tol = 1e-9);
std::vector<int> argmax_rows(const Matrix& scores);

enum class LearnerKind { kLogReg, kTree, kForest, kGbt };

std::string to_string(LearnerKind kind);
LearnerKind parse_learner_kind(const std::string& name);

struct LearnerConfig {
  LearnerKind kind = LearnerKind::kLogReg;
  double learning_rate = 0.1;
  int epochs = 300;         // logreg
  int max_depth = 8;        // trees
  int n_trees = 50;         // forest trees or boosting rounds
  double subsample = 1.0;   // gbt row subsampling
  double l2 = 1e-4;         // logreg weight decay or gbt leaf penalty
  std::uint64_t seed = 0;
  bool bootstrap = true;    // forest
  int max_features = 0;     // 0: sqrt(d) for forests, all features otherwise
  bool standardize = false; // logreg

  static LearnerConfig defaults(LearnerKind kind);
  void validate() const;
  nlohmann::json to_json() const;
  static LearnerConfig from_json(const nlohmann::json& j);
};

// Axis-aligned binary tree; x[feature] <= threshold goes left.
struct TreeNode {
  int feature = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double gain = 0.0;  // impurity decrease of the split, weighted by node size
  std::vector<double> value;  // class distribution, or a single regression output
};

struct DecisionTree {
  std::vector<TreeNode> nodes;

  const std::vector<double>& evaluate(const double* row) const;
  int depth() const;
};

struct LogRegParams {
  Matrix weights;  // d x C
  Vector bias;     // C
  Vector mean;     // empty unless standardised
  Vector scale;
};

struct ForestParams {
  std::vector<DecisionTree> trees;
  double oob_accuracy = -1.0;  // -1 when not computable
};

struct GbtParams {
  Vector base_score;  // C
  double shrinkage = 0.1;
  std::vector<std::vector<DecisionTree>> rounds;  // [round][class]
  std::vector<double> loss_trace;  // training log-loss, entry 0 = base score
};

class LocalModel {
 public:
  using Params = std::variant<LogRegParams, DecisionTree, ForestParams, GbtParams>;

  LocalModel(LearnerConfig config, int num_classes, std::size_t dim,
             std::vector<std::string> label_vocab, Params params);

  const LearnerConfig& config() const { return config_; }
  LearnerKind kind() const { return config_.kind; }
  int num_classes() const { return num_classes_; }
  std::size_t dim() const { return dim_; }
  const std::vector<std::string>& label_vocab() const { return label_vocab_; }
  const Params& params() const { return params_; }

  // Raw scores whose row argmax is the predicted class: logits for logreg and
  // boosting, leaf distributions for trees.
  Matrix decision_function(const Matrix& x) const;
  ProbaMatrix predict_proba(const Matrix& x) const;
  std::vector<int> predict(const Matrix& x) const;

  nlohmann::json to_json() const;
  static LocalModel from_json(const nlohmann::json& j);

 private:
  void check_dim(const Matrix& x) const;

  LearnerConfig config_;
  int num_classes_;
  std::size_t dim_;
  std::vector<std::string> label_vocab_;
  Params params_;
};

inline constexpr int kModelFormatVersion = 1;

// Mean cross-entropy + l2 * ||W||^2 and its gradient.
struct LogRegObjective {
  double loss = 0.0;
  Matrix grad_weights;
  Vector grad_bias;
};

LogRegObjective logreg_objective(const Matrix& weights, const Vector& bias, const Matrix& x,
                                 const std::vector<int>& y, int num_classes, double l2);

LocalModel train_logreg(const LabeledMatrix& data, const LearnerConfig& cfg);
LocalModel train_tree(const LabeledMatrix& data, const LearnerConfig& cfg);
LocalModel train_forest(const LabeledMatrix& data, const LearnerConfig& cfg);
LocalModel train_gbt(const LabeledMatrix& data, const LearnerConfig& cfg);
LocalModel train_local(const LabeledMatrix& data, const LearnerConfig& cfg);

ProbaMatrix predict_proba(const LocalModel& model, const Matrix& x);

struct SplitChoice {
  int feature = -1;  // -1: no split improves impurity
  double threshold = 0.0;
  double impurity_decrease = 0.0;  // weighted by node sample count
};

// Best Gini split over the given rows and features, thresholds at midpoints
// between consecutive distinct values. Ties keep the earliest candidate.
SplitChoice best_gini_split(const Matrix& x, const std::vector<int>& y, int num_classes,
                            const std::vector<std::size_t>& rows,
                            const std::vector<int>& features);

// Mean-decrease-in-impurity importances of a forest, normalised to sum 1.
std::vector<double> forest_importances(const LocalModel& forest);

struct FeatureSelection {
  std::vector<bool> mask;
  LabeledMatrix reduced;
  std::vector<double> importances;
};

FeatureSelection select_features(const LabeledMatrix& data, double threshold,
                                 const LearnerConfig& forest_cfg = LearnerConfig::defaults(LearnerKind::kForest));
Matrix apply_feature_mask(const Matrix& x, const std::vector<bool>& mask);

struct LearningCurvePoint {
  double fraction = 0.0;
  double train_accuracy = 0.0;
  double validation_accuracy = 0.0;
};

std::vector<LearningCurvePoint> learning_curve(const LabeledMatrix& data, const LearnerConfig& cfg,
                                               const std::vector<double>& fractions, int folds);

}  // namespace fedspike
