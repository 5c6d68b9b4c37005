#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedspike/common.hpp"
#include "fedspike/learners.hpp"

namespace fedspike {

// Fully connected ReLU network with a softmax output layer.
struct MlpArchitecture {
  std::vector<int> layer_sizes{27, 25, 15, 9};

  // 9 classes x 3 local models in, two hidden layers of 25 and 15.
  static MlpArchitecture stacking(int num_classes = 9, int num_models = 3);

  void validate() const;
  std::size_t num_layers() const { return layer_sizes.size() - 1; }
  std::vector<std::size_t> layer_param_counts() const;
  std::size_t param_count() const;
};

struct DenseLayer {
  Matrix weights;  // in x out
  Vector bias;     // out
};

struct MlpModel {
  MlpArchitecture arch;
  std::vector<DenseLayer> layers;

  std::size_t param_count() const;
  nlohmann::json to_json() const;
  static MlpModel from_json(const nlohmann::json& j);
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  AdamConfig adam;
  int batch_size = 16;
  int epochs = 100;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Per-epoch mean training loss and accuracy, accumulated over the epoch's
// mini-batches as they are processed.
struct TrainTrace {
  std::vector<double> loss;
  std::vector<double> accuracy;
};

// He-uniform hidden weights, zero biases. The output layer starts at zero so
// an untrained model predicts the uniform distribution.
MlpModel init_mlp(const MlpArchitecture& arch, std::uint64_t seed);

ProbaMatrix forward(const MlpModel& model, const Matrix& x);

struct MlpGradients {
  double loss = 0.0;  // mean cross-entropy of the batch
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
};

MlpGradients backprop_gradients(const MlpModel& model, const Matrix& x, const std::vector<int>& y);

double cross_entropy(const ProbaMatrix& proba, const std::vector<int>& y);

std::pair<MlpModel, TrainTrace> train_mlp(MlpModel model, const LabeledMatrix& data, const TrainConfig& cfg);

}  // namespace fedspike
