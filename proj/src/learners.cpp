#include "fedspike/learners.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Sparse>

namespace fedspike {

void LabeledMatrix::validate() const {
  if (y.empty()) fail(ErrorKind::kData, "labeled matrix has no rows");
  if (x.cols() < 1) fail(ErrorKind::kData, "labeled matrix has no feature columns");
  if (static_cast<std::size_t>(x.rows()) != y.size()) {
    fail(ErrorKind::kData, "feature rows (" + std::to_string(x.rows()) + ") != labels (" +
                               std::to_string(y.size()) + ")");
  }
  if (num_classes < 1) fail(ErrorKind::kData, "class count must be positive");
  for (int label : y) {
    if (label < 0 || label >= num_classes) {
      fail(ErrorKind::kData, "label " + std::to_string(label) + " outside [0, " +
                                 std::to_string(num_classes) + ")");
    }
  }
  if (!x.allFinite()) fail(ErrorKind::kData, "features contain NaN or infinity");
}

LabeledMatrix LabeledMatrix::subset(const std::vector<std::size_t>& idx) const {
  LabeledMatrix out{Matrix(static_cast<Eigen::Index>(idx.size()), x.cols()), {}, num_classes, label_vocab};
  out.y.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.x.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
    out.y.push_back(y[idx[i]]);
  }
  return out;
}

void check_proba_rows(const ProbaMatrix& p, double tol) {
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    if (std::abs(p.row(i).sum() - 1.0) > tol || p.row(i).minCoeff() < 0.0 || p.row(i).maxCoeff() > 1.0) {
      fail(ErrorKind::kData, "row " + std::to_string(i) + " is not a probability vector");
    }
  }
}

std::vector<int> argmax_rows(const Matrix& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    out[static_cast<std::size_t>(i)] = argmax(scores.row(i).data(), static_cast<int>(scores.cols()));
  }
  return out;
}

std::string to_string(LearnerKind kind) {
  switch (kind) {
    case LearnerKind::kLogReg: return "logreg";
    case LearnerKind::kTree: return "tree";
    case LearnerKind::kForest: return "forest";
    case LearnerKind::kGbt: return "gbt";
  }
  return "?";
}

LearnerKind parse_learner_kind(const std::string& name) {
  for (auto k : {LearnerKind::kLogReg, LearnerKind::kTree, LearnerKind::kForest, LearnerKind::kGbt}) {
    if (to_string(k) == name) return k;
  }
  fail(ErrorKind::kConfig, "unknown learner '" + name + "' (valid: logreg, tree, forest, gbt)");
}

LearnerConfig LearnerConfig::defaults(LearnerKind kind) {
  LearnerConfig c;
  c.kind = kind;
  switch (kind) {
    case LearnerKind::kLogReg:
      break;
    case LearnerKind::kTree:
      c.max_depth = 8;
      break;
    case LearnerKind::kForest:
      c.max_depth = 8;
      c.n_trees = 50;
      break;
    case LearnerKind::kGbt:
      c.max_depth = 3;
      c.n_trees = 100;
      c.learning_rate = 0.1;
      c.l2 = 1.0;
      break;
  }
  return c;
}

void LearnerConfig::validate() const {
  if (!(learning_rate > 0.0)) fail(ErrorKind::kConfig, "learning_rate must be positive");
  if (epochs < 1) fail(ErrorKind::kConfig, "epochs must be positive");
  if (max_depth < 0) fail(ErrorKind::kConfig, "max_depth must be non-negative");
  if (n_trees < 0 || (kind == LearnerKind::kForest && n_trees < 1)) {
    fail(ErrorKind::kConfig, "n_trees must be positive");
  }
  if (!(subsample > 0.0 && subsample <= 1.0)) fail(ErrorKind::kConfig, "subsample must lie in (0, 1]");
  if (l2 < 0.0) fail(ErrorKind::kConfig, "l2 must be non-negative");
  if (max_features < 0) fail(ErrorKind::kConfig, "max_features must be non-negative");
}

nlohmann::json LearnerConfig::to_json() const {
  return {{"kind", to_string(kind)},       {"learning_rate", learning_rate},
          {"epochs", epochs},              {"max_depth", max_depth},
          {"n_trees", n_trees},            {"subsample", subsample},
          {"l2", l2},                      {"seed", seed},
          {"bootstrap", bootstrap},        {"max_features", max_features},
          {"standardize", standardize}};
}

LearnerConfig LearnerConfig::from_json(const nlohmann::json& j) {
  try {
    LearnerConfig c = defaults(parse_learner_kind(j.at("kind").get<std::string>()));
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.max_depth = j.value("max_depth", c.max_depth);
    c.n_trees = j.value("n_trees", c.n_trees);
    c.subsample = j.value("subsample", c.subsample);
    c.l2 = j.value("l2", c.l2);
    c.seed = j.value("seed", c.seed);
    c.bootstrap = j.value("bootstrap", c.bootstrap);
    c.max_features = j.value("max_features", c.max_features);
    c.standardize = j.value("standardize", c.standardize);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, std::string("learner config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Trees

const std::vector<double>& DecisionTree::evaluate(const double* row) const {
  int n = 0;
  while (nodes[static_cast<std::size_t>(n)].feature >= 0) {
    const auto& node = nodes[static_cast<std::size_t>(n)];
    n = row[node.feature] <= node.threshold ? node.left : node.right;
  }
  return nodes[static_cast<std::size_t>(n)].value;
}

int DecisionTree::depth() const {
  std::vector<int> d(nodes.size(), 0);
  int best = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    if (n.feature < 0) continue;
    d[static_cast<std::size_t>(n.left)] = d[static_cast<std::size_t>(n.right)] = d[i] + 1;
    best = std::max(best, d[i] + 1);
  }
  return best;
}

namespace {

double weighted_gini(const std::vector<double>& counts, double n) {
  if (n <= 0) return 0.0;
  double sq = 0.0;
  for (double c : counts) sq += c * c;
  return n - sq / n;
}

struct SortedColumn {
  std::vector<std::pair<double, std::size_t>> entries;  // value, position in rows
};

void sort_column(const Matrix& x, const std::vector<std::size_t>& rows, int feature,
                 std::vector<std::pair<double, std::size_t>>& out) {
  out.clear();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.emplace_back(x(static_cast<Eigen::Index>(rows[i]), feature), i);
  }
  std::sort(out.begin(), out.end());
}

bool column_constant(const Matrix& x, const std::vector<std::size_t>& rows, int feature) {
  const double first = x(static_cast<Eigen::Index>(rows.front()), feature);
  for (std::size_t r : rows) {
    if (x(static_cast<Eigen::Index>(r), feature) != first) return false;
  }
  return true;
}

}  // namespace

SplitChoice best_gini_split(const Matrix& x, const std::vector<int>& y, int num_classes,
                            const std::vector<std::size_t>& rows, const std::vector<int>& features) {
  SplitChoice best;
  if (rows.size() < 2) return best;
  std::vector<double> total(static_cast<std::size_t>(num_classes), 0.0);
  for (std::size_t r : rows) total[static_cast<std::size_t>(y[r])] += 1.0;
  const double n = static_cast<double>(rows.size());
  const double parent = weighted_gini(total, n);
  if (parent <= 0.0) return best;

  std::vector<std::pair<double, std::size_t>> col;
  std::vector<double> left(total.size());
  std::vector<double> right(total.size());
  // Zero-gain splits are allowed while the node is impure.
  double best_decrease = -1.0;
  double best_balance = 0.0;
  for (int f : features) {
    if (column_constant(x, rows, f)) continue;
    sort_column(x, rows, f, col);
    std::fill(left.begin(), left.end(), 0.0);
    right = total;
    for (std::size_t i = 0; i + 1 < col.size(); ++i) {
      const auto label = static_cast<std::size_t>(y[rows[col[i].second]]);
      left[label] += 1.0;
      right[label] -= 1.0;
      if (col[i].first == col[i + 1].first) continue;
      const double nl = static_cast<double>(i + 1);
      const double decrease = parent - weighted_gini(left, nl) - weighted_gini(right, n - nl);
      // Equal decreases go to the more balanced split.
      const double balance = std::min(nl, n - nl);
      if (decrease > best_decrease + 1e-12 || (decrease >= best_decrease - 1e-12 && balance > best_balance)) {
        best_decrease = decrease;
        best_balance = balance;
        best.feature = f;
        best.threshold = 0.5 * (col[i].first + col[i + 1].first);
        best.impurity_decrease = std::max(0.0, decrease);
      }
    }
  }
  return best;
}

namespace {

// Chooses the candidate features for one node.
class FeatureSampler {
 public:
  FeatureSampler(std::vector<int> usable, int max_features, Rng* rng)
      : usable_(std::move(usable)), max_features_(max_features), rng_(rng) {}

  template <typename Eval>
  SplitChoice choose(Eval&& eval, const Matrix& x, const std::vector<std::size_t>& rows) {
    const auto d = static_cast<int>(usable_.size());
    if (rng_ == nullptr || max_features_ >= d) return eval(usable_);
    // Draw in random order; keep drawing past max_features until at least one
    // non-constant feature has been examined.
    std::vector<int> pool = usable_;
    std::vector<int> drawn;
    int examined_nonconstant = 0;
    for (int taken = 0; taken < d; ++taken) {
      const auto pick = static_cast<std::size_t>(taken) +
                        rng_->below(static_cast<std::uint64_t>(d - taken));
      std::swap(pool[static_cast<std::size_t>(taken)], pool[pick]);
      const int f = pool[static_cast<std::size_t>(taken)];
      drawn.push_back(f);
      if (!column_constant(x, rows, f)) ++examined_nonconstant;
      if (static_cast<int>(drawn.size()) >= max_features_ && examined_nonconstant > 0) break;
    }
    std::sort(drawn.begin(), drawn.end());
    return eval(drawn);
  }

 private:
  std::vector<int> usable_;
  int max_features_;
  Rng* rng_;
};

std::vector<int> all_features(std::size_t d) {
  std::vector<int> f(d);
  std::iota(f.begin(), f.end(), 0);
  return f;
}

struct ClassTreeBuilder {
  const Matrix& x;
  const std::vector<int>& y;
  int num_classes;
  int max_depth;
  FeatureSampler sampler;
  DecisionTree tree;

  int build(const std::vector<std::size_t>& rows, int depth) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    std::vector<double> dist(static_cast<std::size_t>(num_classes), 0.0);
    for (std::size_t r : rows) dist[static_cast<std::size_t>(y[r])] += 1.0;
    for (double& v : dist) v /= static_cast<double>(rows.size());

    SplitChoice split;
    if (depth < max_depth && rows.size() >= 2) {
      split = sampler.choose(
          [&](const std::vector<int>& feats) { return best_gini_split(x, y, num_classes, rows, feats); },
          x, rows);
    }
    if (split.feature < 0) {
      tree.nodes[static_cast<std::size_t>(id)].value = std::move(dist);
      return id;
    }
    std::vector<std::size_t> lrows, rrows;
    for (std::size_t r : rows) {
      (x(static_cast<Eigen::Index>(r), split.feature) <= split.threshold ? lrows : rrows).push_back(r);
    }
    const int l = build(lrows, depth + 1);
    const int rr = build(rrows, depth + 1);
    auto& node = tree.nodes[static_cast<std::size_t>(id)];
    node.feature = split.feature;
    node.threshold = split.threshold;
    node.left = l;
    node.right = rr;
    node.gain = split.impurity_decrease;
    return id;
  }
};

}  // namespace

LocalModel train_tree(const LabeledMatrix& data, const LearnerConfig& cfg) {
  if (cfg.kind != LearnerKind::kTree) fail(ErrorKind::kConfig, "train_tree needs kind=tree");
  cfg.validate();
  data.validate();
  std::vector<std::size_t> rows(data.rows());
  std::iota(rows.begin(), rows.end(), 0);
  ClassTreeBuilder b{data.x, data.y, data.num_classes, cfg.max_depth,
                     FeatureSampler(all_features(data.cols()), static_cast<int>(data.cols()), nullptr), {}};
  b.build(rows, 0);
  return LocalModel(cfg, data.num_classes, data.cols(), data.label_vocab, std::move(b.tree));
}

namespace {

ForestParams fit_forest(const LabeledMatrix& data, const LearnerConfig& cfg) {
  const std::size_t n = data.rows();
  const std::size_t d = data.cols();
  const int max_features = cfg.max_features > 0
                               ? std::min(cfg.max_features, static_cast<int>(d))
                               : std::max(1, static_cast<int>(std::sqrt(static_cast<double>(d))));
  Rng rng(cfg.seed);
  ForestParams fit;
  Matrix oob_votes = Matrix::Zero(static_cast<Eigen::Index>(n), data.num_classes);
  std::vector<bool> has_oob(n, false);

  for (int t = 0; t < cfg.n_trees; ++t) {
    std::vector<std::size_t> rows(n);
    std::vector<bool> in_bag(n, !cfg.bootstrap);
    if (cfg.bootstrap) {
      for (auto& r : rows) {
        r = static_cast<std::size_t>(rng.below(n));
        in_bag[r] = true;
      }
      std::sort(rows.begin(), rows.end());
    } else {
      std::iota(rows.begin(), rows.end(), 0);
    }
    ClassTreeBuilder b{data.x, data.y, data.num_classes, cfg.max_depth,
                       FeatureSampler(all_features(d), max_features, &rng), {}};
    b.build(rows, 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (in_bag[i]) continue;
      const auto& dist = b.tree.evaluate(data.x.row(static_cast<Eigen::Index>(i)).data());
      for (int c = 0; c < data.num_classes; ++c) oob_votes(static_cast<Eigen::Index>(i), c) += dist[static_cast<std::size_t>(c)];
      has_oob[i] = true;
    }
    fit.trees.push_back(std::move(b.tree));
  }
  std::size_t oob_n = 0, oob_hit = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!has_oob[i]) continue;
    ++oob_n;
    oob_hit += argmax(oob_votes.row(static_cast<Eigen::Index>(i)).data(), data.num_classes) == data.y[i];
  }
  if (oob_n > 0) fit.oob_accuracy = static_cast<double>(oob_hit) / static_cast<double>(oob_n);
  return fit;
}

}  // namespace

LocalModel train_forest(const LabeledMatrix& data, const LearnerConfig& cfg) {
  if (cfg.kind != LearnerKind::kForest) fail(ErrorKind::kConfig, "train_forest needs kind=forest");
  cfg.validate();
  data.validate();
  return LocalModel(cfg, data.num_classes, data.cols(), data.label_vocab, fit_forest(data, cfg));
}

std::vector<double> forest_importances(const LocalModel& model) {
  const auto* forest = std::get_if<ForestParams>(&model.params());
  if (!forest) fail(ErrorKind::kConfig, "importances need a forest model");
  std::vector<double> imp(model.dim(), 0.0);
  // Per-tree normalised decrease, averaged over trees.
  for (const auto& tree : forest->trees) {
    std::vector<double> t(model.dim(), 0.0);
    for (const auto& node : tree.nodes) {
      if (node.feature >= 0) t[static_cast<std::size_t>(node.feature)] += node.gain;
    }
    const double total = std::accumulate(t.begin(), t.end(), 0.0);
    if (total > 0) {
      for (std::size_t j = 0; j < t.size(); ++j) imp[j] += t[j] / total;
    }
  }
  const double total = std::accumulate(imp.begin(), imp.end(), 0.0);
  if (total > 0) {
    for (double& v : imp) v /= total;
  }
  return imp;
}

// ---------------------------------------------------------------------------
// Gradient-boosted trees

namespace {

struct RegressionTreeBuilder {
  const Matrix& x;
  const std::vector<double>& grad;
  const std::vector<double>& hess;
  double lambda;
  int max_depth;
  const std::vector<int>& features;
  DecisionTree tree;
  std::vector<std::pair<double, std::size_t>> col;

  double score(double g, double h) const { return g * g / (h + lambda); }

  int build(const std::vector<std::size_t>& rows, int depth) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    double g_total = 0.0, h_total = 0.0;
    for (std::size_t r : rows) {
      g_total += grad[r];
      h_total += hess[r];
    }
    SplitChoice best;
    if (depth < max_depth && rows.size() >= 2) {
      const double parent = score(g_total, h_total);
      for (int f : features) {
        if (column_constant(x, rows, f)) continue;
        sort_column(x, rows, f, col);
        double gl = 0.0, hl = 0.0;
        for (std::size_t i = 0; i + 1 < col.size(); ++i) {
          const std::size_t r = rows[col[i].second];
          gl += grad[r];
          hl += hess[r];
          if (col[i].first == col[i + 1].first) continue;
          const double gain = 0.5 * (score(gl, hl) + score(g_total - gl, h_total - hl) - parent);
          if (gain > best.impurity_decrease + 1e-12) {
            best = {f, 0.5 * (col[i].first + col[i + 1].first), gain};
          }
        }
      }
    }
    if (best.feature < 0) {
      tree.nodes[static_cast<std::size_t>(id)].value = {-g_total / (h_total + lambda)};
      return id;
    }
    std::vector<std::size_t> lrows, rrows;
    for (std::size_t r : rows) {
      (x(static_cast<Eigen::Index>(r), best.feature) <= best.threshold ? lrows : rrows).push_back(r);
    }
    const int l = build(lrows, depth + 1);
    const int rr = build(rrows, depth + 1);
    auto& node = tree.nodes[static_cast<std::size_t>(id)];
    node.feature = best.feature;
    node.threshold = best.threshold;
    node.left = l;
    node.right = rr;
    node.gain = best.impurity_decrease;
    return id;
  }
};

void softmax_rows(Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

double mean_log_loss(const Matrix& proba, const std::vector<int>& y) {
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    total -= std::log(std::max(proba(static_cast<Eigen::Index>(i), y[i]), 1e-300));
  }
  return total / static_cast<double>(y.size());
}

}  // namespace

LocalModel train_gbt(const LabeledMatrix& data, const LearnerConfig& cfg) {
  if (cfg.kind != LearnerKind::kGbt) fail(ErrorKind::kConfig, "train_gbt needs kind=gbt");
  cfg.validate();
  data.validate();
  const std::size_t n = data.rows();
  const int c_count = data.num_classes;

  GbtParams params;
  params.shrinkage = cfg.learning_rate;
  params.base_score = Vector::Zero(c_count);
  {
    std::vector<double> counts(static_cast<std::size_t>(c_count), 0.0);
    for (int label : data.y) counts[static_cast<std::size_t>(label)] += 1.0;
    for (int c = 0; c < c_count; ++c) {
      params.base_score(c) = std::log(std::max(counts[static_cast<std::size_t>(c)] / static_cast<double>(n), 1e-12));
    }
  }

  // Features constant over the whole training set can never split.
  std::vector<int> usable;
  std::vector<std::size_t> all_rows(n);
  std::iota(all_rows.begin(), all_rows.end(), 0);
  for (int f = 0; f < static_cast<int>(data.cols()); ++f) {
    if (!column_constant(data.x, all_rows, f)) usable.push_back(f);
  }

  Matrix scores(static_cast<Eigen::Index>(n), c_count);
  scores.rowwise() = params.base_score.transpose();
  Matrix proba = scores;
  softmax_rows(proba);
  params.loss_trace.push_back(mean_log_loss(proba, data.y));

  Rng rng(cfg.seed);
  std::vector<double> grad(n), hess(n);
  for (int round = 0; round < cfg.n_trees; ++round) {
    std::vector<std::size_t> rows = all_rows;
    if (cfg.subsample < 1.0) {
      rng.shuffle(rows);
      rows.resize(std::max<std::size_t>(1, static_cast<std::size_t>(cfg.subsample * static_cast<double>(n))));
      std::sort(rows.begin(), rows.end());
    }
    std::vector<DecisionTree> trees;
    for (int c = 0; c < c_count; ++c) {
      for (std::size_t i = 0; i < n; ++i) {
        const double p = proba(static_cast<Eigen::Index>(i), c);
        grad[i] = p - (data.y[i] == c ? 1.0 : 0.0);
        hess[i] = std::max(p * (1.0 - p), 1e-16);
      }
      RegressionTreeBuilder b{data.x, grad, hess, cfg.l2, cfg.max_depth, usable, {}, {}};
      b.build(rows, 0);
      trees.push_back(std::move(b.tree));
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = data.x.row(static_cast<Eigen::Index>(i)).data();
      for (int c = 0; c < c_count; ++c) {
        scores(static_cast<Eigen::Index>(i), c) += cfg.learning_rate * trees[static_cast<std::size_t>(c)].evaluate(row)[0];
      }
    }
    proba = scores;
    softmax_rows(proba);
    params.loss_trace.push_back(mean_log_loss(proba, data.y));
    params.rounds.push_back(std::move(trees));
  }
  return LocalModel(cfg, c_count, data.cols(), data.label_vocab, std::move(params));
}

// ---------------------------------------------------------------------------
// Logistic regression

namespace {

template <typename X>
LogRegObjective logreg_objective_impl(const Matrix& weights, const Vector& bias, const X& x,
                                      const std::vector<int>& y, int num_classes, double l2) {
  const auto n = static_cast<double>(y.size());
  Matrix proba = x * weights;
  proba.rowwise() += bias.transpose();
  softmax_rows(proba);
  LogRegObjective out;
  out.loss = mean_log_loss(proba, y) + l2 * weights.squaredNorm();
  for (std::size_t i = 0; i < y.size(); ++i) proba(static_cast<Eigen::Index>(i), y[i]) -= 1.0;
  out.grad_weights = (x.transpose() * proba) / n + 2.0 * l2 * weights;
  out.grad_bias = proba.colwise().sum().transpose() / n;
  (void)num_classes;
  return out;
}

}  // namespace

LogRegObjective logreg_objective(const Matrix& weights, const Vector& bias, const Matrix& x,
                                 const std::vector<int>& y, int num_classes, double l2) {
  return logreg_objective_impl(weights, bias, x, y, num_classes, l2);
}

LocalModel train_logreg(const LabeledMatrix& data, const LearnerConfig& cfg) {
  if (cfg.kind != LearnerKind::kLogReg) fail(ErrorKind::kConfig, "train_logreg needs kind=logreg");
  cfg.validate();
  data.validate();
  {
    const int first = data.y.front();
    if (std::all_of(data.y.begin(), data.y.end(), [&](int v) { return v == first; })) {
      warn("logistic regression trained on a single class");
    }
  }

  LogRegParams params;
  Matrix x = data.x;
  if (cfg.standardize) {
    params.mean = x.colwise().mean().transpose();
    params.scale = ((x.rowwise() - params.mean.transpose()).array().square().colwise().mean().sqrt()).transpose();
    for (Eigen::Index j = 0; j < params.scale.size(); ++j) {
      if (params.scale(j) <= 0.0) params.scale(j) = 1.0;
    }
    x = ((x.rowwise() - params.mean.transpose()).array().rowwise() / params.scale.transpose().array()).matrix();
  }
  params.weights = Matrix::Zero(x.cols(), data.num_classes);
  params.bias = Vector::Zero(data.num_classes);

  auto descend = [&](const auto& features) {
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      auto obj = logreg_objective_impl(params.weights, params.bias, features, data.y, data.num_classes, cfg.l2);
      if (!std::isfinite(obj.loss)) {
        fail(ErrorKind::kTraining, "logistic regression diverged at epoch " + std::to_string(epoch));
      }
      params.weights -= cfg.learning_rate * obj.grad_weights;
      params.bias -= cfg.learning_rate * obj.grad_bias;
    }
  };
  const double nonzero = static_cast<double>((x.array() != 0.0).count());
  if (nonzero < 0.1 * static_cast<double>(x.size())) {
    Eigen::SparseMatrix<double, Eigen::RowMajor> sparse = x.sparseView();
    descend(sparse);
  } else {
    descend(x);
  }
  return LocalModel(cfg, data.num_classes, data.cols(), data.label_vocab, std::move(params));
}

LocalModel train_local(const LabeledMatrix& data, const LearnerConfig& cfg) {
  switch (cfg.kind) {
    case LearnerKind::kLogReg: return train_logreg(data, cfg);
    case LearnerKind::kTree: return train_tree(data, cfg);
    case LearnerKind::kForest: return train_forest(data, cfg);
    case LearnerKind::kGbt: return train_gbt(data, cfg);
  }
  fail(ErrorKind::kConfig, "unknown learner kind");
}

// ---------------------------------------------------------------------------
// LocalModel

LocalModel::LocalModel(LearnerConfig config, int num_classes, std::size_t dim,
                       std::vector<std::string> label_vocab, Params params)
    : config_(config),
      num_classes_(num_classes),
      dim_(dim),
      label_vocab_(std::move(label_vocab)),
      params_(std::move(params)) {}

void LocalModel::check_dim(const Matrix& x) const {
  if (static_cast<std::size_t>(x.cols()) != dim_) {
    fail(ErrorKind::kData, "model expects " + std::to_string(dim_) + " features, got " +
                               std::to_string(x.cols()));
  }
}

namespace {

Matrix tree_distributions(const std::vector<DecisionTree>& trees, const Matrix& x, int num_classes) {
  Matrix out = Matrix::Zero(x.rows(), num_classes);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (const auto& t : trees) {
      const auto& dist = t.evaluate(x.row(i).data());
      for (int c = 0; c < num_classes; ++c) out(i, c) += dist[static_cast<std::size_t>(c)];
    }
  }
  out /= static_cast<double>(trees.size());
  return out;
}

}  // namespace

Matrix LocalModel::decision_function(const Matrix& x) const {
  check_dim(x);
  struct Visitor {
    const LocalModel& m;
    const Matrix& x;
    Matrix operator()(const LogRegParams& p) const {
      Matrix logits;
      if (p.mean.size() > 0) {
        Matrix z = ((x.rowwise() - p.mean.transpose()).array().rowwise() / p.scale.transpose().array()).matrix();
        logits = z * p.weights;
      } else {
        logits = x * p.weights;
      }
      logits.rowwise() += p.bias.transpose();
      return logits;
    }
    Matrix operator()(const DecisionTree& t) const { return tree_distributions({t}, x, m.num_classes_); }
    Matrix operator()(const ForestParams& p) const { return tree_distributions(p.trees, x, m.num_classes_); }
    Matrix operator()(const GbtParams& p) const {
      Matrix s(x.rows(), m.num_classes_);
      s.rowwise() = p.base_score.transpose();
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double* row = x.row(i).data();
        for (const auto& round : p.rounds) {
          for (int c = 0; c < m.num_classes_; ++c) {
            s(i, c) += p.shrinkage * round[static_cast<std::size_t>(c)].evaluate(row)[0];
          }
        }
      }
      return s;
    }
  };
  return std::visit(Visitor{*this, x}, params_);
}

ProbaMatrix LocalModel::predict_proba(const Matrix& x) const {
  Matrix s = decision_function(x);
  if (std::holds_alternative<LogRegParams>(params_) || std::holds_alternative<GbtParams>(params_)) {
    softmax_rows(s);
  }
  return s;
}

std::vector<int> LocalModel::predict(const Matrix& x) const { return argmax_rows(decision_function(x)); }

ProbaMatrix predict_proba(const LocalModel& model, const Matrix& x) { return model.predict_proba(x); }

namespace {

nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()},
          {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  Matrix m(j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
  auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != m.size()) fail(ErrorKind::kData, "matrix data size mismatch");
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

nlohmann::json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector vector_from_json(const nlohmann::json& j) {
  auto data = j.get<std::vector<double>>();
  return Eigen::Map<Vector>(data.data(), static_cast<Eigen::Index>(data.size()));
}

nlohmann::json tree_to_json(const DecisionTree& t) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : t.nodes) {
    nodes.push_back({n.feature, n.threshold, n.left, n.right, n.gain, n.value});
  }
  return nodes;
}

DecisionTree tree_from_json(const nlohmann::json& j) {
  DecisionTree t;
  for (const auto& n : j) {
    t.nodes.push_back({n.at(0).get<int>(), n.at(1).get<double>(), n.at(2).get<int>(), n.at(3).get<int>(),
                       n.at(4).get<double>(), n.at(5).get<std::vector<double>>()});
  }
  return t;
}

}  // namespace

nlohmann::json LocalModel::to_json() const {
  nlohmann::json j = {{"version", kModelFormatVersion},
                      {"kind", to_string(config_.kind)},
                      {"hyperparameters", config_.to_json()},
                      {"num_classes", num_classes_},
                      {"dim", dim_},
                      {"labels", label_vocab_}};
  struct Visitor {
    nlohmann::json operator()(const LogRegParams& p) const {
      nlohmann::json out = {{"weights", matrix_to_json(p.weights)}, {"bias", vector_to_json(p.bias)}};
      if (p.mean.size() > 0) {
        out["mean"] = vector_to_json(p.mean);
        out["scale"] = vector_to_json(p.scale);
      }
      return out;
    }
    nlohmann::json operator()(const DecisionTree& t) const { return {{"tree", tree_to_json(t)}}; }
    nlohmann::json operator()(const ForestParams& p) const {
      nlohmann::json trees = nlohmann::json::array();
      for (const auto& t : p.trees) trees.push_back(tree_to_json(t));
      return {{"trees", trees}, {"oob_accuracy", p.oob_accuracy}};
    }
    nlohmann::json operator()(const GbtParams& p) const {
      nlohmann::json rounds = nlohmann::json::array();
      for (const auto& r : p.rounds) {
        nlohmann::json per_class = nlohmann::json::array();
        for (const auto& t : r) per_class.push_back(tree_to_json(t));
        rounds.push_back(per_class);
      }
      return {{"base_score", vector_to_json(p.base_score)},
              {"shrinkage", p.shrinkage},
              {"rounds", rounds},
              {"loss_trace", p.loss_trace}};
    }
  };
  j["params"] = std::visit(Visitor{}, params_);
  return j;
}

LocalModel LocalModel::from_json(const nlohmann::json& j) {
  try {
    if (!j.contains("version")) fail(ErrorKind::kData, "model document lacks a version field");
    if (j.at("version").get<int>() != kModelFormatVersion) {
      fail(ErrorKind::kData, "unsupported model version " + j.at("version").dump());
    }
    auto cfg = LearnerConfig::from_json(j.at("hyperparameters"));
    const auto& p = j.at("params");
    Params params;
    switch (cfg.kind) {
      case LearnerKind::kLogReg: {
        LogRegParams lr{matrix_from_json(p.at("weights")), vector_from_json(p.at("bias")), {}, {}};
        if (p.contains("mean")) {
          lr.mean = vector_from_json(p.at("mean"));
          lr.scale = vector_from_json(p.at("scale"));
        }
        params = std::move(lr);
        break;
      }
      case LearnerKind::kTree:
        params = tree_from_json(p.at("tree"));
        break;
      case LearnerKind::kForest: {
        ForestParams f;
        for (const auto& t : p.at("trees")) f.trees.push_back(tree_from_json(t));
        f.oob_accuracy = p.value("oob_accuracy", -1.0);
        params = std::move(f);
        break;
      }
      case LearnerKind::kGbt: {
        GbtParams g;
        g.base_score = vector_from_json(p.at("base_score"));
        g.shrinkage = p.at("shrinkage").get<double>();
        for (const auto& r : p.at("rounds")) {
          std::vector<DecisionTree> per_class;
          for (const auto& t : r) per_class.push_back(tree_from_json(t));
          g.rounds.push_back(std::move(per_class));
        }
        g.loss_trace = p.value("loss_trace", std::vector<double>{});
        params = std::move(g);
        break;
      }
    }
    return LocalModel(cfg, j.at("num_classes").get<int>(), j.at("dim").get<std::size_t>(),
                      j.at("labels").get<std::vector<std::string>>(), std::move(params));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, std::string("model document: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Feature selection and learning curves

Matrix apply_feature_mask(const Matrix& x, const std::vector<bool>& mask) {
  if (static_cast<std::size_t>(x.cols()) != mask.size()) {
    fail(ErrorKind::kData, "feature mask length does not match column count");
  }
  const auto kept = static_cast<Eigen::Index>(std::count(mask.begin(), mask.end(), true));
  Matrix out(x.rows(), kept);
  Eigen::Index c = 0;
  for (std::size_t j = 0; j < mask.size(); ++j) {
    if (mask[j]) out.col(c++) = x.col(static_cast<Eigen::Index>(j));
  }
  return out;
}

FeatureSelection select_features(const LabeledMatrix& data, double threshold, const LearnerConfig& forest_cfg) {
  if (!(threshold >= 0.0)) fail(ErrorKind::kConfig, "selection threshold must be non-negative");
  FeatureSelection out;
  out.importances = forest_importances(train_forest(data, forest_cfg));
  const double mean = 1.0 / static_cast<double>(out.importances.size());
  for (double v : out.importances) out.mask.push_back(v >= threshold * mean);
  if (std::none_of(out.mask.begin(), out.mask.end(), [](bool b) { return b; })) {
    fail(ErrorKind::kData, "feature selection dropped every feature");
  }
  out.reduced = {apply_feature_mask(data.x, out.mask), data.y, data.num_classes, data.label_vocab};
  return out;
}

namespace {

double accuracy_of(const LocalModel& m, const LabeledMatrix& d) {
  const auto pred = m.predict(d.x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == d.y[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

}  // namespace

std::vector<LearningCurvePoint> learning_curve(const LabeledMatrix& data, const LearnerConfig& cfg,
                                               const std::vector<double>& fractions, int folds) {
  data.validate();
  if (folds < 2) fail(ErrorKind::kConfig, "learning curves need at least 2 folds");
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) fail(ErrorKind::kConfig, "fractions must lie in (0, 1]");
  }

  // Stratified fold assignment: shuffle each class, deal round-robin.
  Rng rng(cfg.seed);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.num_classes));
  for (std::size_t i = 0; i < data.rows(); ++i) by_class[static_cast<std::size_t>(data.y[i])].push_back(i);
  std::vector<int> fold_of(data.rows());
  std::size_t dealt = 0;
  for (auto& members : by_class) {
    rng.shuffle(members);
    for (std::size_t r : members) fold_of[r] = static_cast<int>(dealt++ % static_cast<std::size_t>(folds));
  }

  std::vector<LearningCurvePoint> out;
  for (double fraction : fractions) {
    LearningCurvePoint point{fraction, 0.0, 0.0};
    for (int fold = 0; fold < folds; ++fold) {
      std::vector<std::size_t> val;
      std::vector<std::vector<std::size_t>> pool(by_class.size());
      for (std::size_t c = 0; c < by_class.size(); ++c) {
        for (std::size_t r : by_class[c]) (fold_of[r] == fold ? val : pool[c]).push_back(r);
      }
      std::vector<std::size_t> train;
      for (std::size_t c = 0; c < pool.size(); ++c) {
        if (pool[c].empty()) continue;
        const auto take = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(pool[c].size())));
        if (take == 0) {
          const std::string name = c < data.label_vocab.size() ? data.label_vocab[c] : std::to_string(c);
          fail(ErrorKind::kData, "fraction " + std::to_string(fraction) + " leaves class '" + name +
                                     "' without training samples");
        }
        train.insert(train.end(), pool[c].begin(), pool[c].begin() + static_cast<std::ptrdiff_t>(take));
      }
      std::sort(train.begin(), train.end());
      std::sort(val.begin(), val.end());
      auto train_set = data.subset(train);
      auto model = train_local(train_set, cfg);
      point.train_accuracy += accuracy_of(model, train_set);
      if (!val.empty()) point.validation_accuracy += accuracy_of(model, data.subset(val));
    }
    point.train_accuracy /= folds;
    point.validation_accuracy /= folds;
    out.push_back(point);
  }
  return out;
}

}  // namespace fedspike
