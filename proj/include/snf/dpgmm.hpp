#pragma once

// Truncated Dirichlet-process Gaussian mixture fit by ADVI.
//
// Generative model (K components, p dims, diagonal covariances):
//   alpha ~ Gamma(1, 1)             nu_i ~ Beta(1, alpha), i < K
//   mu_k  ~ N(0, I)                 sigma_kj ~ HalfNormal(1)
//   pi    = stick_break(nu)         y ~ sum_k pi_k N(mu_k, diag(sigma_k^2))
//
// The variational family is a mean-field Gaussian over the unconstrained vector
//   theta = [log alpha | logit nu (K-1) | mu (K x p, row-major) | log sigma (K x p)]
// so every ELBO term carries the log-Jacobian of its transform.
//
// Data are standardized per dim before fitting (unit-scale priors); densities
// reported in data space include the -sum log scale Jacobian.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "snf/autodiff.hpp"
#include "snf/checkpoint.hpp"
#include "snf/random.hpp"

namespace snf::dpgmm {

// pi_i = nu_i prod_{j<i} (1 - nu_j) for i < K, pi_K takes the remaining stick.
// Throws ValidationError unless every nu is in (0, 1).
std::vector<double> stick_break(std::span<const double> nu);

// log sum_k pi_k N(y; mu_k, diag(sigma_k^2)). mu and sigma are (K x p).
double mixture_log_lik(std::span<const double> y, std::span<const double> pi, const Tensor& mu, const Tensor& sigma);

struct DpgmmConfig {
  std::size_t components = 50;
  std::size_t mc_samples = 8;
  double learning_rate = 3e-3;
  std::size_t iterations = 10000;
  std::size_t batch_size = 512;  // 0 uses every row each step
  std::size_t posterior_draws = 512;
  double init_log_std = -3.0;    // initial variational log std of every coordinate
  std::uint64_t seed = 1;
};

struct Layout {
  std::size_t K = 0;
  std::size_t p = 0;
  std::size_t size() const { return 1 + (K - 1) + 2 * K * p; }
  std::size_t alpha() const { return 0; }
  std::size_t nu(std::size_t i) const { return 1 + i; }
  std::size_t mu(std::size_t k, std::size_t j) const { return K + k * p + j; }
  std::size_t log_sigma(std::size_t k, std::size_t j) const { return K + K * p + k * p + j; }
};

struct MixtureDraw {
  double alpha = 0.0;
  std::vector<double> pi;
  Tensor mu;     // (K x p), standardized space
  Tensor sigma;  // (K x p), standardized space
};

struct VariationalPosterior {
  Layout layout;
  std::vector<double> mean;
  std::vector<double> log_std;
  std::vector<double> shift, scale;  // data standardization
  std::vector<double> elbo_trace;    // per-step ELBO estimate divided by the row count

  // Maps an unconstrained theta to mixture parameters.
  MixtureDraw constrain(std::span<const double> theta) const;
  MixtureDraw draw(Rng& rng) const;
  // Expected weights over `draws` posterior samples; components above
  // `threshold` count as effective.
  std::vector<double> expected_weights(std::size_t draws, std::uint64_t seed) const;
  std::size_t effective_components(double threshold = 0.01, std::size_t draws = 512, std::uint64_t seed = 1) const;
  // Variational-mean component locations mapped back to data space, (K x p).
  Tensor component_means() const;

  Checkpoint to_checkpoint() const;
  static VariationalPosterior from_checkpoint(const Checkpoint& ckpt);
};

// Log prior + transform Jacobians + likelihood, summed over the rows of theta
// (S x D, one unconstrained draw per row), on the tape. data is standardized, (n x p);
// data_weight rescales the likelihood for minibatches.
Var log_joint(Var theta, const Layout& layout, const Tensor& data, double data_weight);

// ELBO with common random numbers: eps is (S x D), one standard-normal row per
// MC sample. Entropy of the Gaussian family is analytic.
Var elbo(Var mean, Var log_std, const Layout& layout, const Tensor& data, const Tensor& eps, double data_weight = 1.0);

double gaussian_entropy(std::span<const double> log_std);

VariationalPosterior fit_advi(const Tensor& data, const DpgmmConfig& config);

// n draws from the posterior stream of `seed`, in standardized space.
std::vector<MixtureDraw> posterior_draws(const VariationalPosterior& posterior, std::size_t n_draws, std::uint64_t seed);

// Per row: log (1/n) sum_draws p(y | theta_draw), in data space. All rows share
// the same n draws from `seed`, so results do not depend on the thread count.
std::vector<double> posterior_log_lik(const Tensor& y, const VariationalPosterior& posterior, std::size_t n_draws,
                                      std::uint64_t seed, unsigned threads = 1);

void save_posterior(const VariationalPosterior& posterior, const std::filesystem::path& path);
VariationalPosterior load_posterior(const std::filesystem::path& path);

}  // namespace snf::dpgmm
