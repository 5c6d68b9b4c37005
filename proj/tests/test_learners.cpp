#include <doctest.h>

#include <cmath>
#include <numeric>

#include "fedspike/learners.hpp"
#include "test_util.hpp"

using namespace fedspike;
using fedspike::test::error_kind_of;
using fedspike::test::random_matrix;

namespace {

LabeledMatrix separable_2d(Rng& rng, int n) {
  LabeledMatrix d{Matrix(n, 2), std::vector<int>(static_cast<std::size_t>(n)), 2, {"neg", "pos"}};
  for (int i = 0; i < n; ++i) {
    const int y = i % 2;
    d.x(i, 0) = rng.uniform(0.5, 2.0) * (y ? 1.0 : -1.0);
    d.x(i, 1) = rng.uniform(-1.0, 1.0);
    d.y[static_cast<std::size_t>(i)] = y;
  }
  return d;
}

LabeledMatrix xor_2d() {
  LabeledMatrix d{Matrix(8, 2), {}, 2, {"a", "b"}};
  const double pts[8][2] = {{0, 0}, {0.1, 0.1}, {1, 1}, {0.9, 0.9}, {0, 1}, {0.1, 0.9}, {1, 0}, {0.9, 0.1}};
  for (int i = 0; i < 8; ++i) {
    d.x(i, 0) = pts[i][0];
    d.x(i, 1) = pts[i][1];
    d.y.push_back(i < 4 ? 0 : 1);
  }
  return d;
}

LabeledMatrix random_labeled(Rng& rng, int n, int d, int c) {
  LabeledMatrix out{random_matrix(rng, n, d), std::vector<int>(static_cast<std::size_t>(n)), c, {}};
  for (int i = 0; i < n; ++i) out.y[static_cast<std::size_t>(i)] = i < c ? i : static_cast<int>(rng.below(static_cast<std::uint64_t>(c)));
  for (int k = 0; k < c; ++k) out.label_vocab.push_back("c" + std::to_string(k));
  return out;
}

double accuracy(const LocalModel& m, const LabeledMatrix& d) {
  const auto p = m.predict(d.x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < p.size(); ++i) hit += p[i] == d.y[i];
  return static_cast<double>(hit) / static_cast<double>(p.size());
}

double gini(const std::vector<int>& labels, int c) {
  if (labels.empty()) return 0.0;
  std::vector<double> counts(static_cast<std::size_t>(c), 0.0);
  for (int y : labels) counts[static_cast<std::size_t>(y)] += 1.0;
  double g = 1.0;
  for (double v : counts) g -= (v / labels.size()) * (v / labels.size());
  return g;
}

}  // namespace

TEST_CASE("learner names and config validation") {
  for (auto k : {LearnerKind::kLogReg, LearnerKind::kTree, LearnerKind::kForest, LearnerKind::kGbt}) {
    CHECK(parse_learner_kind(to_string(k)) == k);
    auto cfg = LearnerConfig::defaults(k);
    CHECK(LearnerConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
  }
  CHECK(error_kind_of([] { parse_learner_kind("svm"); }) == ErrorKind::kConfig);
  auto bad = LearnerConfig::defaults(LearnerKind::kLogReg);
  bad.learning_rate = 0.0;
  CHECK(error_kind_of([&] { bad.validate(); }) == ErrorKind::kConfig);
  auto lr = LearnerConfig::defaults(LearnerKind::kLogReg);
  CHECK(lr.learning_rate == 0.1);
  CHECK(lr.epochs == 300);
  CHECK(lr.l2 == 1e-4);
  CHECK(LearnerConfig::defaults(LearnerKind::kTree).max_depth == 8);
  CHECK(LearnerConfig::defaults(LearnerKind::kForest).n_trees == 50);
  auto gbt = LearnerConfig::defaults(LearnerKind::kGbt);
  CHECK(gbt.n_trees == 100);
  CHECK(gbt.max_depth == 3);
  CHECK(gbt.learning_rate == 0.1);
}

TEST_CASE("labeled matrix validation") {
  LabeledMatrix d{Matrix::Zero(2, 2), {0, 3}, 2, {}};
  CHECK(error_kind_of([&] { d.validate(); }) == ErrorKind::kData);
  LabeledMatrix e{Matrix::Zero(2, 2), {0}, 2, {}};
  CHECK(error_kind_of([&] { e.validate(); }) == ErrorKind::kData);
  LabeledMatrix f{Matrix::Constant(1, 1, std::nan("")), {0}, 1, {}};
  CHECK(error_kind_of([&] { f.validate(); }) == ErrorKind::kData);
}

TEST_CASE("logistic regression separates linearly separable data") {
  Rng rng(1);
  auto d = separable_2d(rng, 60);
  auto cfg = LearnerConfig::defaults(LearnerKind::kLogReg);
  cfg.epochs = 100;
  CHECK(accuracy(train_logreg(d, cfg), d) == 1.0);
  cfg.standardize = true;
  CHECK(accuracy(train_logreg(d, cfg), d) == 1.0);
}

TEST_CASE("logistic regression l2 pulls predictions toward uniform") {
  Rng rng(2);
  auto d = separable_2d(rng, 40);
  double previous = 1e9;
  for (double l2 : {0.0, 0.1, 1.0, 4.0}) {
    auto cfg = LearnerConfig::defaults(LearnerKind::kLogReg);
    cfg.l2 = l2;
    auto p = train_logreg(d, cfg).predict_proba(d.x);
    const double spread = (p.array() - 0.5).abs().mean();
    CHECK(spread < previous);
    previous = spread;
  }
  CHECK(previous < 0.1);
}

TEST_CASE("logistic regression gradient matches central differences") {
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    const int n = 3 + static_cast<int>(rng.below(5));
    const int dim = 1 + static_cast<int>(rng.below(4));
    const int c = 2 + static_cast<int>(rng.below(3));
    auto data = random_labeled(rng, n, dim, c);
    Matrix w = random_matrix(rng, dim, c, -0.5, 0.5);
    Vector b = random_matrix(rng, c, 1, -0.5, 0.5);
    const double l2 = 0.01 * static_cast<double>(rng.below(3));
    auto obj = logreg_objective(w, b, data.x, data.y, c, l2);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      Matrix wp = w, wm = w;
      wp.data()[i] += h;
      wm.data()[i] -= h;
      const double fd = (logreg_objective(wp, b, data.x, data.y, c, l2).loss -
                         logreg_objective(wm, b, data.x, data.y, c, l2).loss) / (2 * h);
      CHECK(std::abs(fd - obj.grad_weights.data()[i]) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      Vector bp = b, bm = b;
      bp[i] += h;
      bm[i] -= h;
      const double fd = (logreg_objective(w, bp, data.x, data.y, c, l2).loss -
                         logreg_objective(w, bm, data.x, data.y, c, l2).loss) / (2 * h);
      CHECK(std::abs(fd - obj.grad_bias[i]) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("zero-weight logistic model predicts uniform rows") {
  const int c = 9;
  LogRegParams p{Matrix::Zero(4, c), Vector::Zero(c), {}, {}};
  LocalModel m(LearnerConfig::defaults(LearnerKind::kLogReg), c, 4, {}, p);
  Rng rng(4);
  auto proba = m.predict_proba(random_matrix(rng, 5, 4));
  CHECK(proba.cols() == 9);
  for (Eigen::Index i = 0; i < proba.size(); ++i) CHECK(proba.data()[i] == doctest::Approx(1.0 / 9.0).epsilon(1e-15));
  CHECK(error_kind_of([&] { m.predict_proba(Matrix::Zero(2, 3)); }) == ErrorKind::kData);
}

TEST_CASE("tree on pure data is a single leaf") {
  LabeledMatrix d{Matrix::Random(10, 3), std::vector<int>(10, 1), 3, {}};
  auto m = train_tree(d, LearnerConfig::defaults(LearnerKind::kTree));
  const auto& tree = std::get<DecisionTree>(m.params());
  CHECK(tree.depth() == 0);
  auto p = m.predict_proba(d.x);
  for (Eigen::Index i = 0; i < p.rows(); ++i) CHECK(p(i, 1) == 1.0);
}

TEST_CASE("tree solves XOR with depth 2") {
  auto d = xor_2d();
  auto cfg = LearnerConfig::defaults(LearnerKind::kTree);
  cfg.max_depth = 2;
  CHECK(accuracy(train_tree(d, cfg), d) == 1.0);
  cfg.max_depth = 1;
  CHECK(accuracy(train_tree(d, cfg), d) < 1.0);
}

TEST_CASE("best split matches exhaustive threshold search") {
  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    const int n = t == 0 ? 6 : 4 + static_cast<int>(rng.below(20));
    const int c = 2 + static_cast<int>(rng.below(2));
    Matrix x(n, 1);
    std::vector<int> y;
    for (int i = 0; i < n; ++i) {
      x(i, 0) = static_cast<double>(rng.below(8));
      y.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(c))));
    }
    std::vector<std::size_t> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), 0);
    auto split = best_gini_split(x, y, c, rows, {0});

    double best = 0.0;
    std::vector<double> values(x.data(), x.data() + n);
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    const double parent = gini(y, c) * n;
    for (std::size_t v = 0; v + 1 < values.size(); ++v) {
      const double thr = 0.5 * (values[v] + values[v + 1]);
      std::vector<int> l, r;
      for (int i = 0; i < n; ++i) (x(i, 0) <= thr ? l : r).push_back(y[static_cast<std::size_t>(i)]);
      const double dec = parent - gini(l, c) * l.size() - gini(r, c) * r.size();
      best = std::max(best, dec);
    }
    CHECK(split.impurity_decrease == doctest::Approx(best).epsilon(1e-12));
    if (split.feature >= 0) {
      std::vector<int> l, r;
      for (int i = 0; i < n; ++i) (x(i, 0) <= split.threshold ? l : r).push_back(y[static_cast<std::size_t>(i)]);
      CHECK(parent - gini(l, c) * l.size() - gini(r, c) * r.size() == doctest::Approx(best).epsilon(1e-12));
    } else {
      CHECK(best <= 1e-12);
    }
  }
}

TEST_CASE("degenerate forest equals a single tree") {
  Rng rng(6);
  auto d = random_labeled(rng, 40, 4, 3);
  auto cfg = LearnerConfig::defaults(LearnerKind::kForest);
  cfg.n_trees = 1;
  cfg.bootstrap = false;
  cfg.max_features = 4;
  auto tree_cfg = LearnerConfig::defaults(LearnerKind::kTree);
  tree_cfg.max_depth = cfg.max_depth;
  auto test = random_matrix(rng, 30, 4);
  CHECK(train_forest(d, cfg).predict_proba(test) == train_tree(d, tree_cfg).predict_proba(test));
}

TEST_CASE("forest out-of-bag accuracy tracks held-out accuracy") {
  Rng rng(7);
  auto make = [&](int n) {
    LabeledMatrix d{Matrix(n, 3), std::vector<int>(static_cast<std::size_t>(n)), 2, {"a", "b"}};
    for (int i = 0; i < n; ++i) {
      const int y = static_cast<int>(rng.below(2));
      d.y[static_cast<std::size_t>(i)] = y;
      d.x(i, 0) = (y ? 1.0 : -1.0) + rng.uniform(-1.2, 1.2);
      d.x(i, 1) = rng.uniform(-1, 1);
      d.x(i, 2) = rng.uniform(-1, 1);
    }
    return d;
  };
  auto train = make(50);
  auto test = make(500);
  auto cfg = LearnerConfig::defaults(LearnerKind::kForest);
  cfg.seed = 3;
  auto m = train_forest(train, cfg);
  const double oob = std::get<ForestParams>(m.params()).oob_accuracy;
  CHECK(oob >= 0.0);
  CHECK(std::abs(oob - accuracy(m, test)) <= 0.15);
}

TEST_CASE("large forest fits noiseless separable data") {
  Rng rng(8);
  auto d = separable_2d(rng, 80);
  auto cfg = LearnerConfig::defaults(LearnerKind::kForest);
  cfg.n_trees = 100;
  CHECK(accuracy(train_forest(d, cfg), d) == 1.0);
}

TEST_CASE("boosting with zero rounds predicts class priors") {
  LabeledMatrix d{Matrix::Random(10, 2), {0, 0, 0, 0, 0, 1, 1, 1, 2, 2}, 3, {}};
  auto cfg = LearnerConfig::defaults(LearnerKind::kGbt);
  cfg.n_trees = 0;
  auto p = train_gbt(d, cfg).predict_proba(d.x);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    CHECK(p(i, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p(i, 1) == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(p(i, 2) == doctest::Approx(0.2).epsilon(1e-12));
  }
}

TEST_CASE("boosting loss trace never increases") {
  Rng rng(9);
  for (double lr : {0.1, 0.3}) {
    auto d = random_labeled(rng, 60, 3, 3);
    auto cfg = LearnerConfig::defaults(LearnerKind::kGbt);
    cfg.n_trees = 30;
    cfg.learning_rate = lr;
    auto m = train_gbt(d, cfg);
    const auto& trace = std::get<GbtParams>(m.params()).loss_trace;
    REQUIRE(trace.size() == 31);
    for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1] + 1e-12);
  }
}

TEST_CASE("single boosting stump splits at the class boundary") {
  LabeledMatrix d{Matrix(8, 1), {0, 0, 0, 0, 0, 1, 1, 1}, 2, {}};
  for (int i = 0; i < 8; ++i) d.x(i, 0) = static_cast<double>(i);
  auto cfg = LearnerConfig::defaults(LearnerKind::kGbt);
  cfg.n_trees = 1;
  cfg.max_depth = 1;
  auto m = train_gbt(d, cfg);
  const auto& rounds = std::get<GbtParams>(m.params()).rounds;
  REQUIRE(rounds.size() == 1);
  for (const auto& tree : rounds[0]) {
    REQUIRE(tree.nodes.size() == 3);
    CHECK(tree.nodes[0].feature == 0);
    CHECK(tree.nodes[0].threshold == 4.5);
  }
}

TEST_CASE("every learner: simplex rows, argmax consistency, determinism, JSON round trip") {
  Rng rng(10);
  auto d = random_labeled(rng, 45, 5, 9);
  auto test = random_matrix(rng, 20, 5);
  for (auto k : {LearnerKind::kLogReg, LearnerKind::kTree, LearnerKind::kForest, LearnerKind::kGbt}) {
    CAPTURE(to_string(k));
    auto cfg = LearnerConfig::defaults(k);
    cfg.seed = 42;
    if (k == LearnerKind::kGbt) cfg.n_trees = 10;
    auto m = train_local(d, cfg);
    auto p = m.predict_proba(test);
    CHECK(p.cols() == 9);
    check_proba_rows(p);
    CHECK(argmax_rows(p) == m.predict(test));
    CHECK(argmax_rows(m.decision_function(test)) == m.predict(test));
    CHECK(train_local(d, cfg).predict_proba(test) == p);
    auto back = LocalModel::from_json(nlohmann::json::parse(m.to_json().dump()));
    CHECK(back.predict_proba(test) == p);
    CHECK(m.to_json().at("version") == kModelFormatVersion);
  }
}

TEST_CASE("argmax ties go to the lowest index") {
  Matrix s(2, 3);
  s << 0.2, 0.4, 0.4, 0.5, 0.5, 0.0;
  CHECK(argmax_rows(s) == std::vector<int>{1, 0});
}

TEST_CASE("feature selection keeps a perfectly predictive feature") {
  Rng rng(11);
  const int n = 80;
  LabeledMatrix d{random_matrix(rng, n, 6), std::vector<int>(n), 2, {"a", "b"}};
  for (int i = 0; i < n; ++i) {
    d.y[static_cast<std::size_t>(i)] = i % 2;
    d.x(i, 3) = i % 2 ? 1.0 + rng.uniform() : -1.0 - rng.uniform();
  }
  auto cfg = LearnerConfig::defaults(LearnerKind::kForest);
  auto all = select_features(d, 0.0, cfg);
  CHECK(std::all_of(all.mask.begin(), all.mask.end(), [](bool b) { return b; }));
  CHECK(all.reduced.x == d.x);
  CHECK(std::accumulate(all.importances.begin(), all.importances.end(), 0.0) == doctest::Approx(1.0));

  auto strict = select_features(d, 1.0, cfg);
  CHECK(strict.mask[3]);
  Matrix probe = random_matrix(rng, 4, 6);
  Matrix reduced = apply_feature_mask(probe, strict.mask);
  Eigen::Index col = 0;
  for (int j = 0; j < 6; ++j) {
    if (strict.mask[static_cast<std::size_t>(j)]) {
      CHECK(reduced.col(col) == probe.col(j));
      ++col;
    }
  }
  CHECK(col == reduced.cols());
}

TEST_CASE("learning curve rows and separable train accuracy") {
  Rng rng(12);
  auto d = separable_2d(rng, 60);
  auto cfg = LearnerConfig::defaults(LearnerKind::kTree);
  const std::vector<double> fractions{0.2, 0.4, 0.6, 0.8, 1.0};
  auto curve = learning_curve(d, cfg, fractions, 5);
  REQUIRE(curve.size() == fractions.size());
  for (std::size_t i = 0; i < curve.size(); ++i) CHECK(curve[i].fraction == fractions[i]);
  CHECK(curve.back().train_accuracy == 1.0);
  CHECK(error_kind_of([&] { learning_curve(d, cfg, {0.0}, 5); }) == ErrorKind::kConfig);
  CHECK(error_kind_of([&] { learning_curve(d, cfg, {1.0}, 1); }) == ErrorKind::kConfig);
}
