#pragma once

// Normalizing flows over feature space: masked-coupling rational-quadratic
// spline layers and slice surjections that drop a fixed subset of dims.
//
// Direction convention: "inverse"/inference maps data y to latent z and is
// what log_prob evaluates; "forward"/generative maps z to y and is used only
// for sampling. The spline is evaluated in closed form in the inference
// direction; the generative direction solves the rational-quadratic for its
// root, so it runs off the tape.
//
// log p(y) = log N(z_0; 0, I) + sum_bijections log|det J_k|
//          + sum_surjections [log p(y_k^- | z_k) + log|det J(y_k^+)|]
//          - sum log std        (affine feature standardization)

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "snf/autodiff.hpp"
#include "snf/checkpoint.hpp"
#include "snf/nn.hpp"

namespace snf::flows {

// Per-element spline on plain doubles. derivatives has K+1 entries including
// the two unit boundary derivatives.
struct SplineParams {
  std::vector<double> widths;
  std::vector<double> heights;
  std::vector<double> derivatives;
  double bound = 5.0;

  // raw = [K width logits | K height logits | K-1 derivative pre-activations]
  static SplineParams from_raw(std::span<const double> raw, std::size_t bins, double bound);
  static SplineParams identity(std::size_t bins, double bound);
  std::size_t bins() const { return widths.size(); }
};

// Raw pre-activation giving derivative exactly 1 after softplus + 1e-3.
double identity_derivative_raw();

struct SplineEval {
  double value = 0.0;
  double log_deriv = 0.0;
};

// Data -> latent, closed form. log_deriv = log |dx/dy|.
SplineEval rq_spline_inverse(double y, const SplineParams& params);
// Latent -> data by the quadratic root. log_deriv = log |dy/dx|.
SplineEval rq_spline_forward(double x, const SplineParams& params);

struct SplineVars {
  Var value;      // (M x 1)
  Var log_deriv;  // (M x 1)
};
// Tape version of rq_spline_inverse. y is (M x 1), raw is (M x (3K-1)).
SplineVars rq_spline_inverse(Var y, Var raw, std::size_t bins, double bound);

struct FlowConfig {
  std::size_t layers = 10;
  std::vector<std::size_t> surjection_layers{3, 8};  // 1-based; empty gives a BNF
  double drop_fraction = 0.25;
  std::size_t bins = 64;
  double bound = 5.0;
  std::vector<std::size_t> hidden{128, 128};
  double learning_rate = 3e-4;
  double weight_decay = 1e-4;
  std::size_t batch_size = 128;
  std::size_t max_epochs = 200;
  std::size_t patience = 20;
  double validation_fraction = 0.1;
  // 0 trains on every row; otherwise a seeded subset of this many rows.
  std::size_t max_train_rows = 0;
  double init_scale = 0.01;
  std::uint64_t seed = 1;
};

struct CouplingLayer {
  std::size_t dim = 0;
  std::vector<std::size_t> pass;       // conditioner inputs, copied unchanged
  std::vector<std::size_t> transform;  // splined dims
  std::size_t cond_dim = 0;            // extra conditioning columns
  Mlp conditioner;
};

struct SliceSurjection {
  std::size_t dim = 0;
  std::vector<std::size_t> kept;     // y+
  std::vector<std::size_t> dropped;  // y-
  std::vector<std::size_t> permutation;  // output column j is z[:, permutation[j]]
  CouplingLayer inner;               // acts on y+ conditioned on y-
  Mlp decoder;                       // z -> [mean | log_std] of y-
};

struct Layer {
  enum class Kind { Coupling, Surjection } kind = Kind::Coupling;
  CouplingLayer coupling;
  SliceSurjection surjection;
  std::size_t in_dim() const { return kind == Kind::Coupling ? coupling.dim : surjection.dim; }
  std::size_t out_dim() const { return kind == Kind::Coupling ? coupling.dim : surjection.kept.size(); }
};

struct LayerResult {
  Var z;
  Var contribution;  // (n x 1)
};

struct LogLikelihoodBreakdown {
  std::vector<double> base;                 // per row
  std::vector<std::vector<double>> layers;  // [layer][row]
  double standardization = 0.0;             // shared constant
  std::vector<double> total;                // per row
};

class FlowStack {
 public:
  static FlowStack create(std::size_t input_dim, const FlowConfig& config);

  const FlowConfig& config() const { return config_; }
  std::size_t input_dim() const { return input_dim_; }
  std::size_t base_dim() const { return layers_.empty() ? input_dim_ : layers_.back().out_dim(); }
  const std::vector<Layer>& layers() const { return layers_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  bool is_surjective() const;

  // Standardization applied before the first layer.
  const std::vector<double>& shift() const { return shift_; }
  const std::vector<double>& scale() const { return scale_; }
  void set_standardization(std::vector<double> shift, std::vector<double> scale);
  double standardization_log_det() const;

  // Layer-level maps on the tape.
  LayerResult layer_inverse(std::size_t k, const std::vector<Var>& p, Var y) const;
  // Generative direction of layer k; surjections draw y- from the decoder.
  Tensor layer_forward(std::size_t k, const Tensor& z, Rng& rng) const;
  // Generative surjection with a caller-chosen y-.
  Tensor surjection_forward(std::size_t k, const Tensor& z, const Tensor& y_minus) const;

  // Total log density of every row of y (n x input_dim), on the tape.
  Var log_prob(Tape& tape, const std::vector<Var>& p, Var y) const;
  LogLikelihoodBreakdown breakdown(const Tensor& y) const;
  std::vector<double> log_prob(const Tensor& y, unsigned threads = 1) const;

  Tensor sample(Rng& rng, std::size_t n) const;

  std::vector<double> train_trace;
  std::vector<double> validation_trace;
  std::vector<double> best_validation_trace;  // validation NLL at each improvement
  std::size_t best_epoch = 0;

  Checkpoint to_checkpoint() const;
  static FlowStack from_checkpoint(const Checkpoint& ckpt);

 private:
  FlowConfig config_;
  std::size_t input_dim_ = 0;
  std::vector<Layer> layers_;
  ParamStore params_;
  std::vector<double> shift_, scale_;
};

CouplingLayer make_coupling(ParamStore& store, const std::string& name, std::size_t dim, bool odd, std::size_t cond_dim,
                            const FlowConfig& config, Rng& rng);
// Tape inverse of a coupling; cond may be invalid when cond_dim == 0.
LayerResult coupling_inverse(const CouplingLayer& layer, const FlowConfig& config, const std::vector<Var>& p, Var y,
                             Var cond);
Tensor coupling_forward(const CouplingLayer& layer, const FlowConfig& config, const ParamStore& params, const Tensor& z,
                        const Tensor& cond);

FlowConfig bnf_config(FlowConfig config);

// Mean NLL of rows, for training and gradient checks.
Var mean_nll(const FlowStack& stack, Tape& tape, const std::vector<Var>& p, const Tensor& rows);

// Standardizes with statistics from the training split, trains with AdamW and
// early stopping, and returns the best-validation parameters. With `groups`
// (one id per row, e.g. the trajectory) the validation split holds out whole
// groups instead of single rows.
FlowStack train_flow(const Tensor& features, const FlowConfig& config, std::span<const std::size_t> groups = {});

void save_flow(const FlowStack& stack, const std::filesystem::path& path);
FlowStack load_flow(const std::filesystem::path& path);

}  // namespace snf::flows
