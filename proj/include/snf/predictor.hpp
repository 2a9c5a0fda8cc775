#pragma once

// Next-location predictor whose penultimate layer is the feature space h(x).
//
//   window ids -> embedding rows -> mean over the window -> input projection (x~)
//              -> B residual blocks -> features h(x) -> linear head -> logits
//
// Block b: x + W2^ relu(W1^ x + b1) + c b2, where W^ = c W / sigma^ and
// sigma^ = u^T W v is the power-iteration estimate of the spectral norm.
// The branch is c^2-Lipschitz, so each block is bi-Lipschitz within (1 -/+ c).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "snf/autodiff.hpp"
#include "snf/checkpoint.hpp"
#include "snf/epr.hpp"
#include "snf/nn.hpp"

namespace snf::predictor {

using epr::LocationId;

struct WindowedExample {
  std::vector<LocationId> context;
  LocationId label = 0;
  std::size_t trajectory = 0;
  std::size_t start = 0;
};

// Windows start at 0, stride, 2 stride, ... while start + L < T.
std::vector<WindowedExample> make_windows(const epr::Trajectory& trajectory, std::size_t L, std::size_t stride);
std::vector<WindowedExample> make_windows(const epr::Dataset& dataset, std::size_t L, std::size_t stride);

struct SpectralNorm {
  Tensor normalized;  // c W / sigma
  double sigma = 0.0;
};

// W is (in x out); u has `in` entries and is refined in place by
// `iterations` power steps. Throws ValidationError for a zero matrix.
SpectralNorm spectral_normalize(const Tensor& W, std::vector<double>& u, double c, int iterations = 1);

// Largest singular value by plain power iteration from a fixed start vector.
double power_iteration_sigma(const Tensor& W, int iterations);

struct PredictorConfig {
  std::size_t num_locations = 100;
  std::size_t embedding_dim = 32;
  std::size_t feature_dim = 32;
  std::size_t blocks = 4;
  double branch_scale = 0.9;
  std::size_t window = 20;
  std::size_t stride = 5;
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  int refine_iterations = 50;
  std::uint64_t seed = 1;
};

struct Forward {
  Tensor features;  // (n x d_f)
  Tensor logits;    // (n x D)
};

class PredictorModel {
 public:
  static PredictorModel create(const PredictorConfig& config);

  const PredictorConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Number of spectrally normalized matrices (2 per block).
  std::size_t normalized_count() const { return 2 * config_.blocks; }
  // Current c W / sigma^ for matrix k (block k / 2, layer k % 2).
  Tensor normalized_matrix(std::size_t k) const;
  double sigma_estimate(std::size_t k) const { return sigma_[k]; }

  // Post-projection representation x~ of each window, (n x d_f).
  Tensor embed(std::span<const WindowedExample> windows) const;
  // Residual block b applied row-wise to x (n x d_f).
  Tensor block(std::size_t b, const Tensor& x) const;
  Forward forward(std::span<const WindowedExample> windows, unsigned threads = 1) const;

  // One power step on every matrix, then sigma^ refreshed from the new vectors.
  void power_step(int iterations = 1);

  // Tape form used by training; p from params().bind().
  struct Graph {
    Var features;
    Var logits;
  };
  Graph build(Tape& tape, const std::vector<Var>& p, std::span<const WindowedExample> windows,
              bool sigma_on_tape) const;

  std::vector<double> loss_trace;
  double train_accuracy = 0.0;

  Checkpoint to_checkpoint() const;
  static PredictorModel from_checkpoint(const Checkpoint& ckpt);
  std::string hash() const;

 private:
  PredictorConfig config_;
  ParamStore params_;
  std::size_t embedding_ = 0;
  Linear projection_;
  struct Block {
    std::size_t w1, b1, w2, b2;
  };
  std::vector<Block> blocks_;
  Linear head_;
  std::vector<std::vector<double>> u_;
  std::vector<double> sigma_;

  std::size_t matrix_param(std::size_t k) const { return k % 2 == 0 ? blocks_[k / 2].w1 : blocks_[k / 2].w2; }
};

// Mean cross-entropy of a batch; exposed for gradient checks.
Var cross_entropy(Var logits, std::span<const WindowedExample> windows);

PredictorModel train_predictor(std::span<const WindowedExample> windows, const PredictorConfig& config);
PredictorModel train_predictor(const epr::Dataset& dataset, const PredictorConfig& config);

double accuracy(const PredictorModel& model, std::span<const WindowedExample> windows, unsigned threads = 1);

// Shannon entropy (nats) of softmax(logits).
double softmax_entropy(std::span<const double> logits);

struct FeatureMatrix {
  std::string dataset_id;
  std::size_t window = 0;
  std::size_t stride = 0;
  std::string model_hash;
  Tensor values;  // (rows x d_f)
  std::vector<std::size_t> trajectory;
  std::vector<std::size_t> window_start;

  std::size_t rows() const { return trajectory.size(); }
  std::size_t dim() const { return values.cols(); }
};

FeatureMatrix extract_features(const PredictorModel& model, const epr::Dataset& dataset, unsigned threads = 1);

std::string serialize_features(const FeatureMatrix& features);
FeatureMatrix parse_features(std::string_view text);
void write_features(const FeatureMatrix& features, const std::filesystem::path& path);
FeatureMatrix read_features(const std::filesystem::path& path);

}  // namespace snf::predictor
