#include "fedspike/mlp.hpp"

#include <cmath>
#include <numeric>

namespace fedspike {

MlpArchitecture MlpArchitecture::stacking(int num_classes, int num_models) {
  return {{num_classes * num_models, 25, 15, num_classes}};
}

void MlpArchitecture::validate() const {
  if (layer_sizes.size() < 2) fail(ErrorKind::kConfig, "an MLP needs at least input and output sizes");
  for (int s : layer_sizes) {
    if (s < 1) fail(ErrorKind::kConfig, "layer sizes must be positive");
  }
}

std::vector<std::size_t> MlpArchitecture::layer_param_counts() const {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    const auto in = static_cast<std::size_t>(layer_sizes[l]);
    const auto o = static_cast<std::size_t>(layer_sizes[l + 1]);
    out.push_back(in * o + o);
  }
  return out;
}

std::size_t MlpArchitecture::param_count() const {
  auto counts = layer_param_counts();
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

std::size_t MlpModel::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
  return n;
}

nlohmann::json MlpModel::to_json() const {
  nlohmann::json layers_json = nlohmann::json::array();
  for (const auto& l : layers) {
    layers_json.push_back(
        {{"shape", {l.weights.rows(), l.weights.cols()}},
         {"weights", std::vector<double>(l.weights.data(), l.weights.data() + l.weights.size())},
         {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}});
  }
  return {{"version", kModelFormatVersion},
          {"kind", "mlp"},
          {"layer_sizes", arch.layer_sizes},
          {"hidden_activation", "relu"},
          {"output_activation", "softmax"},
          {"layers", layers_json}};
}

MlpModel MlpModel::from_json(const nlohmann::json& j) {
  try {
    if (j.value("version", 0) != kModelFormatVersion || j.value("kind", "") != "mlp") {
      fail(ErrorKind::kData, "not a version-1 mlp model document");
    }
    MlpModel m;
    m.arch.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
    m.arch.validate();
    const auto& layers = j.at("layers");
    if (layers.size() != m.arch.num_layers()) fail(ErrorKind::kData, "mlp layer count mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      DenseLayer d;
      d.weights.resize(m.arch.layer_sizes[l], m.arch.layer_sizes[l + 1]);
      d.bias.resize(m.arch.layer_sizes[l + 1]);
      auto w = layers[l].at("weights").get<std::vector<double>>();
      auto b = layers[l].at("bias").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(w.size()) != d.weights.size() ||
          static_cast<Eigen::Index>(b.size()) != d.bias.size()) {
        fail(ErrorKind::kData, "mlp layer " + std::to_string(l) + " has the wrong shape");
      }
      std::copy(w.begin(), w.end(), d.weights.data());
      std::copy(b.begin(), b.end(), d.bias.data());
      m.layers.push_back(std::move(d));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, std::string("mlp document: ") + e.what());
  }
}

void TrainConfig::validate() const {
  if (batch_size < 1) fail(ErrorKind::kConfig, "batch_size must be at least 1");
  if (epochs < 1) fail(ErrorKind::kConfig, "epochs must be at least 1");
  if (!(adam.learning_rate > 0.0)) fail(ErrorKind::kConfig, "Adam learning rate must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    fail(ErrorKind::kConfig, "Adam betas must lie in [0, 1)");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", adam.learning_rate}, {"beta1", adam.beta1}, {"beta2", adam.beta2},
          {"epsilon", adam.epsilon},             {"batch_size", batch_size}, {"epochs", epochs},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  try {
    TrainConfig c;
    c.adam.learning_rate = j.value("learning_rate", c.adam.learning_rate);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.epsilon = j.value("epsilon", c.adam.epsilon);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, std::string("global train config: ") + e.what());
  }
}

MlpModel init_mlp(const MlpArchitecture& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  MlpModel m{arch, {}};
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    const int in = arch.layer_sizes[l];
    const int out = arch.layer_sizes[l + 1];
    DenseLayer d{Matrix::Zero(in, out), Vector::Zero(out)};
    if (l + 1 < arch.num_layers()) {
      const double limit = std::sqrt(6.0 / in);
      for (Eigen::Index i = 0; i < d.weights.size(); ++i) d.weights.data()[i] = rng.uniform(-limit, limit);
    }
    m.layers.push_back(std::move(d));
  }
  return m;
}

namespace {

void check_input(const MlpModel& model, const Matrix& x) {
  if (x.cols() != model.arch.layer_sizes.front()) {
    fail(ErrorKind::kData, "mlp expects " + std::to_string(model.arch.layer_sizes.front()) +
                               " input columns, got " + std::to_string(x.cols()));
  }
}

// Activations of every layer; acts[0] is the input.
std::vector<Matrix> forward_all(const MlpModel& model, const Matrix& x) {
  std::vector<Matrix> acts{x};
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    Matrix z = acts.back() * model.layers[l].weights;
    z.rowwise() += model.layers[l].bias.transpose();
    if (l + 1 < model.layers.size()) {
      z = z.cwiseMax(0.0);
    } else {
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        auto row = z.row(i);
        row = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
      }
    }
    acts.push_back(std::move(z));
  }
  return acts;
}

}  // namespace

ProbaMatrix forward(const MlpModel& model, const Matrix& x) {
  check_input(model, x);
  return forward_all(model, x).back();
}

double cross_entropy(const ProbaMatrix& proba, const std::vector<int>& y) {
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    total -= std::log(std::max(proba(static_cast<Eigen::Index>(i), y[i]), 1e-300));
  }
  return total / static_cast<double>(y.size());
}

MlpGradients backprop_gradients(const MlpModel& model, const Matrix& x, const std::vector<int>& y) {
  check_input(model, x);
  if (y.empty() || static_cast<std::size_t>(x.rows()) != y.size()) {
    fail(ErrorKind::kData, "backprop needs a non-empty batch with one label per row");
  }
  const auto acts = forward_all(model, x);
  const auto n = static_cast<double>(y.size());
  MlpGradients g;
  g.loss = cross_entropy(acts.back(), y);
  g.weights.resize(model.layers.size());
  g.biases.resize(model.layers.size());

  // Softmax + cross-entropy: dL/dz = (p - onehot) / n.
  Matrix delta = acts.back();
  for (std::size_t i = 0; i < y.size(); ++i) delta(static_cast<Eigen::Index>(i), y[i]) -= 1.0;
  delta /= n;
  for (std::size_t l = model.layers.size(); l-- > 0;) {
    g.weights[l] = acts[l].transpose() * delta;
    g.biases[l] = delta.colwise().sum().transpose();
    if (l == 0) break;
    Matrix back = delta * model.layers[l].weights.transpose();
    delta = (acts[l].array() > 0.0).select(back, 0.0);
  }
  return g;
}

std::pair<MlpModel, TrainTrace> train_mlp(MlpModel model, const LabeledMatrix& data, const TrainConfig& cfg) {
  cfg.validate();
  data.validate();
  check_input(model, data.x);
  if (data.num_classes != model.arch.layer_sizes.back()) {
    fail(ErrorKind::kData, "label classes do not match the mlp output width");
  }

  struct Moments {
    Matrix mw, vw;
    Vector mb, vb;
  };
  std::vector<Moments> moments;
  for (const auto& l : model.layers) {
    moments.push_back({Matrix::Zero(l.weights.rows(), l.weights.cols()),
                       Matrix::Zero(l.weights.rows(), l.weights.cols()), Vector::Zero(l.bias.size()),
                       Vector::Zero(l.bias.size())});
  }

  Rng rng(cfg.seed);
  const std::size_t n = data.rows();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  TrainTrace trace;
  long step = 0;
  const auto& a = cfg.adam;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      LabeledMatrix batch = data.subset(idx);
      auto grads = backprop_gradients(model, batch.x, batch.y);
      if (!std::isfinite(grads.loss)) {
        fail(ErrorKind::kTraining, "global model loss became non-finite at epoch " + std::to_string(epoch) +
                                       "; lower the learning rate");
      }
      loss_sum += grads.loss * static_cast<double>(idx.size());
      const auto pred = argmax_rows(forward_all(model, batch.x).back());
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.y[i];

      ++step;
      const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(step));
      for (std::size_t l = 0; l < model.layers.size(); ++l) {
        auto& m = moments[l];
        m.mw = a.beta1 * m.mw + (1.0 - a.beta1) * grads.weights[l];
        m.vw = a.beta2 * m.vw + (1.0 - a.beta2) * grads.weights[l].cwiseProduct(grads.weights[l]);
        m.mb = a.beta1 * m.mb + (1.0 - a.beta1) * grads.biases[l];
        m.vb = a.beta2 * m.vb + (1.0 - a.beta2) * grads.biases[l].cwiseProduct(grads.biases[l]);
        model.layers[l].weights.array() -=
            a.learning_rate * (m.mw.array() / c1) / ((m.vw.array() / c2).sqrt() + a.epsilon);
        model.layers[l].bias.array() -=
            a.learning_rate * (m.mb.array() / c1) / ((m.vb.array() / c2).sqrt() + a.epsilon);
      }
    }
    trace.loss.push_back(loss_sum / static_cast<double>(n));
    trace.accuracy.push_back(static_cast<double>(correct) / static_cast<double>(n));
  }
  return {std::move(model), std::move(trace)};
}

}  // namespace fedspike
