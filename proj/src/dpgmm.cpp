#include "snf/dpgmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>

#include <Eigen/Dense>

#include "snf/errors.hpp"
#include "snf/gaussian.hpp"
#include "snf/optim.hpp"
#include "snf/parallel.hpp"

namespace snf::dpgmm {

namespace {

constexpr std::size_t kEvalChunk = 1024;
const double kLog2Pi = std::log(2 * std::numbers::pi);

double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }

std::vector<std::size_t> iota(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> v(hi - lo);
  std::iota(v.begin(), v.end(), lo);
  return v;
}

// log pi from unconstrained logits, never -inf: log nu = -softplus(-v), log(1 - nu) = -softplus(v).
std::vector<double> log_weights(std::span<const double> theta, const Layout& L) {
  std::vector<double> out(L.K, 0.0);
  double rest = 0.0;
  for (std::size_t i = 0; i + 1 < L.K; ++i) {
    const double v = theta[L.nu(i)];
    out[i] = rest - softplus(-v);
    rest -= softplus(v);
  }
  out[L.K - 1] = rest;
  return out;
}

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const Mat>;
using MutMap = Eigen::Map<Mat>;

// sum_b sum_s log sum_k exp(log_pi[s, k] + log N(y_b; mu[sK + k], exp(s[sK + k])^2)) as one node.
// mu and log_sigma are (S K x p), log_pi is (S x K). The backward pass uses the
// responsibilities R kept from the forward pass:
//   d/dlog_pi = sum_b R,  d/dmu = iv (R^T y - N mu),
//   d/dlog_sigma = -N + iv (R^T y^2 - 2 mu R^T y + N mu^2),  N = sum_b R.
Var mixture_data_term(Var mu, Var log_sigma, Var log_pi, const Tensor& data) {
  Tape& tape = *mu.tape();
  const auto B = Eigen::Index(data.rows()), p = Eigen::Index(data.cols());
  const auto S = Eigen::Index(log_pi.rows()), K = Eigen::Index(log_pi.cols());
  const ConstMap y(data.data().data(), B, p);
  auto y2 = std::make_shared<Mat>(y.array().square().matrix());
  auto yc = std::make_shared<Mat>(y);
  auto resp = std::make_shared<std::vector<Mat>>(static_cast<std::size_t>(S));
  const ConstMap m(mu.value().data().data(), S * K, p);
  const ConstMap ls(log_sigma.value().data().data(), S * K, p);
  const ConstMap lp(log_pi.value().data().data(), S, K);
  double total = 0.0;
  for (Eigen::Index s = 0; s < S; ++s) {
    const Mat iv = (ls.middleRows(s * K, K).array() * -2.0).exp().matrix();
    const Mat miv = m.middleRows(s * K, K).cwiseProduct(iv);
    Eigen::RowVectorXd c = lp.row(s);
    for (Eigen::Index k = 0; k < K; ++k)
      c(k) -= ls.row(s * K + k).sum() + 0.5 * m.row(s * K + k).dot(miv.row(k)) + 0.5 * kLog2Pi * double(p);
    Mat& comp = (*resp)[static_cast<std::size_t>(s)];
    comp.noalias() = *yc * miv.transpose();
    comp.noalias() -= 0.5 * *y2 * iv.transpose();
    comp.rowwise() += c;
    for (Eigen::Index b = 0; b < B; ++b) {
      const double mx = comp.row(b).maxCoeff();
      comp.row(b) = (comp.row(b).array() - mx).exp().matrix();
      const double z = comp.row(b).sum();
      comp.row(b) /= z;
      total += mx + std::log(z);
    }
  }
  const std::size_t im = mu.id(), is = log_sigma.id(), ip = log_pi.id();
  return tape.record("mixture_data_term", Tensor::scalar(total), {im, is, ip},
                     [=](Tape& t, std::size_t self) {
                       const double g = t.grad_of(self).item();
                       const ConstMap m(t.value(im).data().data(), S * K, p);
                       const ConstMap ls(t.value(is).data().data(), S * K, p);
                       Tensor gm(Shape{std::size_t(S * K), std::size_t(p)}), gs(gm.shape());
                       Tensor gp(Shape{std::size_t(S), std::size_t(K)});
                       MutMap gmm(gm.data().data(), S * K, p), gsm(gs.data().data(), S * K, p);
                       MutMap gpm(gp.data().data(), S, K);
                       for (Eigen::Index s = 0; s < S; ++s) {
                         const Mat& R = (*resp)[static_cast<std::size_t>(s)];
                         const Eigen::VectorXd N = R.colwise().sum().transpose() * g;
                         const Mat ry = g * (R.transpose() * *yc);
                         const Mat ry2 = g * (R.transpose() * *y2);
                         const auto mb = m.middleRows(s * K, K).array();
                         const Mat iv = (ls.middleRows(s * K, K).array() * -2.0).exp().matrix();
                         gpm.row(s) = N.transpose();
                         gmm.middleRows(s * K, K) = (iv.array() * (ry.array() - mb.colwise() * N.array())).matrix();
                         gsm.middleRows(s * K, K) =
                             (iv.array() * (ry2.array() - 2.0 * mb * ry.array() + mb.square().colwise() * N.array()))
                                 .colwise() -
                             N.array();
                       }
                       if (t.requires_grad(im)) t.accumulate(im, std::move(gm));
                       if (t.requires_grad(is)) t.accumulate(is, std::move(gs));
                       if (t.requires_grad(ip)) t.accumulate(ip, std::move(gp));
                     });
}

double logaddexp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

std::vector<double> stick_break(std::span<const double> nu) {
  std::vector<double> pi(nu.size() + 1);
  double rest = 1.0;
  for (std::size_t i = 0; i < nu.size(); ++i) {
    if (!(nu[i] > 0.0 && nu[i] < 1.0)) throw ValidationError("stick_break: nu must lie in (0, 1)");
    pi[i] = nu[i] * rest;
    rest *= 1.0 - nu[i];
  }
  pi.back() = rest;
  return pi;
}

double mixture_log_lik(std::span<const double> y, std::span<const double> pi, const Tensor& mu, const Tensor& sigma) {
  const std::size_t K = pi.size(), p = y.size();
  if (mu.rows() != K || sigma.rows() != K || mu.cols() != p || sigma.cols() != p) {
    throw ValidationError("mixture_log_lik: expected (" + std::to_string(K) + " x " + std::to_string(p) +
                          ") component parameters");
  }
  double acc = -std::numeric_limits<double>::infinity();
  std::vector<double> log_sigma(p);
  for (std::size_t k = 0; k < K; ++k) {
    if (pi[k] <= 0.0) continue;
    for (std::size_t j = 0; j < p; ++j) log_sigma[j] = std::log(sigma.at(k, j));
    const double lk = std::log(pi[k]) + gaussian_log_density(y, mu.data().subspan(k * p, p), log_sigma);
    acc = logaddexp(acc, lk);
  }
  return acc;
}

Var log_joint(Var theta, const Layout& L, const Tensor& data, double data_weight) {
  Tape& tape = *theta.tape();
  const std::size_t K = L.K, p = L.p, S = theta.rows();
  if (theta.cols() != L.size() || data.cols() != p) throw ValidationError("log_joint: parameter or data width mismatch");
  static const std::size_t kAlpha[1] = {0};
  Var a = select_cols(theta, kAlpha);
  Var alpha = exp(a);
  // Gamma(1, 1) on alpha, plus d alpha / d a = alpha.
  Var total = sum(a - alpha);

  Var log_pi;
  if (K > 1) {
    Var v = select_cols(theta, iota(L.nu(0), L.nu(0) + K - 1));
    Var log_nu = -softplus(-v);
    Var log_rest = -softplus(v);
    // Beta(1, alpha): log alpha + (alpha - 1) log(1 - nu); logit Jacobian log nu + log(1 - nu).
    total = total + sum(a) * double(K - 1) + sum(alpha * sum(log_rest, 1)) + sum(log_nu);
    // log pi_i = log nu_i + sum_{j<i} log(1 - nu_j); the last entry is the remaining stick.
    Tensor upper(Shape{K - 1, K});
    for (std::size_t j = 0; j + 1 < K; ++j)
      for (std::size_t i = j + 1; i < K; ++i) upper.at(j, i) = 1.0;
    log_pi = concat_cols({log_nu, tape.constant(Tensor(Shape{S, 1}))}) + matmul(log_rest, tape.constant(upper));
  } else {
    log_pi = tape.constant(Tensor(Shape{S, 1}));
  }

  // Components of every sample stacked: row s * K + k.
  Var mu = reshape(select_cols(theta, iota(L.mu(0, 0), L.mu(0, 0) + K * p)), Shape{S * K, p});
  Var s = reshape(select_cols(theta, iota(L.log_sigma(0, 0), L.log_sigma(0, 0) + K * p)), Shape{S * K, p});
  const double skp = double(S * K * p);
  total = total - 0.5 * sum(square(mu)) - 0.5 * kLog2Pi * skp;
  // HalfNormal(1): log 2 - 0.5 log 2 pi - sigma^2 / 2, plus the log Jacobian s.
  total = total + sum(s) - 0.5 * sum(exp(s * 2.0)) + (std::log(2.0) - 0.5 * kLog2Pi) * skp;

  if (data.rows() > 0) total = total + mixture_data_term(mu, s, log_pi, data) * data_weight;
  return total;
}

double gaussian_entropy(std::span<const double> log_std) {
  double h = 0.0;
  for (double w : log_std) h += w;
  return h + 0.5 * double(log_std.size()) * (1.0 + kLog2Pi);
}

Var elbo(Var mean, Var log_std, const Layout& L, const Tensor& data, const Tensor& eps, double data_weight) {
  const std::size_t S = eps.rows(), D = L.size();
  if (S == 0) throw ValidationError("elbo needs at least one MC sample");
  if (eps.cols() != D || mean.cols() != D || log_std.cols() != D) throw ValidationError("elbo: width mismatch");
  Var theta = mean + exp(log_std) * mean.tape()->constant(eps);
  return log_joint(theta, L, data, data_weight) / double(S) + sum(log_std) + 0.5 * double(D) * (1.0 + kLog2Pi);
}

MixtureDraw VariationalPosterior::constrain(std::span<const double> theta) const {
  const Layout& L = layout;
  if (theta.size() != L.size()) throw ValidationError("theta has the wrong length");
  MixtureDraw d;
  d.alpha = std::exp(theta[L.alpha()]);
  d.pi = log_weights(theta, L);
  for (double& v : d.pi) v = std::exp(v);
  d.mu = Tensor(Shape{L.K, L.p});
  d.sigma = Tensor(Shape{L.K, L.p});
  for (std::size_t k = 0; k < L.K; ++k) {
    for (std::size_t j = 0; j < L.p; ++j) {
      d.mu.at(k, j) = theta[L.mu(k, j)];
      d.sigma.at(k, j) = std::exp(theta[L.log_sigma(k, j)]);
    }
  }
  return d;
}

namespace {

std::vector<double> sample_theta(const VariationalPosterior& q, Rng& rng) {
  std::vector<double> theta(q.mean.size());
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = q.mean[i] + std::exp(q.log_std[i]) * standard_normal(rng);
  return theta;
}

}  // namespace

MixtureDraw VariationalPosterior::draw(Rng& rng) const { return constrain(sample_theta(*this, rng)); }

std::vector<double> VariationalPosterior::expected_weights(std::size_t draws, std::uint64_t seed) const {
  if (draws == 0) throw ValidationError("need at least one posterior draw");
  Rng rng = make_rng(seed, 0xd1);
  std::vector<double> w(layout.K, 0.0);
  for (std::size_t i = 0; i < draws; ++i) {
    const auto lw = log_weights(sample_theta(*this, rng), layout);
    for (std::size_t k = 0; k < layout.K; ++k) w[k] += std::exp(lw[k]) / double(draws);
  }
  return w;
}

std::size_t VariationalPosterior::effective_components(double threshold, std::size_t draws, std::uint64_t seed) const {
  const auto w = expected_weights(draws, seed);
  return static_cast<std::size_t>(std::count_if(w.begin(), w.end(), [&](double v) { return v > threshold; }));
}

Tensor VariationalPosterior::component_means() const {
  Tensor out(Shape{layout.K, layout.p});
  for (std::size_t k = 0; k < layout.K; ++k)
    for (std::size_t j = 0; j < layout.p; ++j) out.at(k, j) = mean[layout.mu(k, j)] * scale[j] + shift[j];
  return out;
}

VariationalPosterior fit_advi(const Tensor& data, const DpgmmConfig& config) {
  const std::size_t n = data.rows(), p = data.cols(), K = config.components;
  if (n == 0 || p == 0) throw ValidationError("DPGMM fit needs non-empty data");
  if (K == 0) throw ValidationError("DPGMM needs at least one component");
  if (config.mc_samples == 0 || config.iterations == 0) throw ValidationError("DPGMM needs mc_samples and iterations >= 1");
  if (!data.all_finite()) throw ValidationError("DPGMM data contain non-finite values");

  VariationalPosterior q;
  q.layout = Layout{K, p};
  q.shift.assign(p, 0.0);
  q.scale.assign(p, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < p; ++j) q.shift[j] += data.at(r, j) / double(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < p; ++j) q.scale[j] += std::pow(data.at(r, j) - q.shift[j], 2) / double(n);
  for (double& v : q.scale) v = v > 0 ? std::sqrt(v) : 1.0;
  Tensor z(Shape{n, p});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < p; ++j) z.at(r, j) = (data.at(r, j) - q.shift[j]) / q.scale[j];

  // Start at alpha = 1 with every nu at its prior mean 1/2 (geometric weights),
  // locations on distinct random data rows and unit widths. Equal starting
  // weights leave split clusters as stable local optima far more often.
  const Layout& L = q.layout;
  Rng rng = make_rng(config.seed, 0xd0);
  q.mean.assign(L.size(), 0.0);
  q.log_std.assign(L.size(), config.init_log_std);

  const auto rows = random_permutation(rng, n);
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t r = k < n ? rows[k] : uniform_index(rng, n);
    for (std::size_t j = 0; j < p; ++j) {
      q.mean[L.mu(k, j)] = z.at(r, j);
      q.mean[L.log_sigma(k, j)] = 0.0;
    }
  }

  std::vector<Tensor> params{Tensor::row(q.mean), Tensor::row(q.log_std)};
  AdamConfig adam;
  adam.learning_rate = config.learning_rate;
  adam.clip_norm = 0.0;
  OptimizerState opt = make_optimizer_state(params, adam);
  const std::size_t B = config.batch_size == 0 ? n : std::min(config.batch_size, n);
  std::vector<std::size_t> order = random_permutation(rng, n);
  std::size_t cursor = 0;
  Tensor batch(Shape{B, p}), eps(Shape{config.mc_samples, L.size()});
  for (std::size_t it = 0; it < config.iterations; ++it) {
    for (std::size_t b = 0; b < B; ++b) {
      if (cursor == n) {
        order = random_permutation(rng, n);
        cursor = 0;
      }
      const std::size_t r = order[cursor++];
      for (std::size_t j = 0; j < p; ++j) batch.at(b, j) = z.at(r, j);
    }
    for (double& v : eps.data()) v = standard_normal(rng);
    Tape tape;
    Var m = tape.leaf(params[0]), w = tape.leaf(params[1]);
    Var loss;
    try {
      loss = -elbo(m, w, L, batch, eps, double(n) / double(B)) / double(n);
    } catch (const NumericalError& e) {
      throw NumericalError("DPGMM fit diverged at step " + std::to_string(it) + ": " + e.what());
    }
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw NumericalError("DPGMM fit diverged at step " + std::to_string(it));
    q.elbo_trace.push_back(-value);
    auto grads = tape.grad(loss, {m, w});
    adamw_step(params, grads, opt);
  }
  q.mean = params[0].vec();
  q.log_std = params[1].vec();
  return q;
}

std::vector<MixtureDraw> posterior_draws(const VariationalPosterior& q, std::size_t n_draws, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0xd2);
  std::vector<MixtureDraw> out;
  out.reserve(n_draws);
  for (std::size_t i = 0; i < n_draws; ++i) out.push_back(q.draw(rng));
  return out;
}

std::vector<double> posterior_log_lik(const Tensor& y, const VariationalPosterior& q, std::size_t n_draws,
                                      std::uint64_t seed, unsigned threads) {
  const Layout& L = q.layout;
  const std::size_t n = y.rows(), K = L.K, p = L.p;
  if (n_draws == 0) throw ValidationError("posterior_log_lik needs n_draws >= 1");
  if (y.cols() != p) {
    throw ValidationError("DPGMM expects " + std::to_string(p) + " dims, found " + std::to_string(y.cols()));
  }
  if (!y.all_finite()) throw ValidationError("DPGMM input contains non-finite values");

  // Per draw: inverse variances, mu / var and a per-component constant.
  struct Draw {
    Mat inv_var, mu_iv;
    Eigen::RowVectorXd constant;
  };
  std::vector<Draw> draws;
  draws.reserve(n_draws);
  for (const MixtureDraw& md : posterior_draws(q, n_draws, seed)) {
    Draw& d = draws.emplace_back();
    d.inv_var.resize(Eigen::Index(K), Eigen::Index(p));
    d.mu_iv.resize(Eigen::Index(K), Eigen::Index(p));
    d.constant.resize(Eigen::Index(K));
    for (std::size_t k = 0; k < K; ++k) {
      double c = std::log(md.pi[k]) - 0.5 * kLog2Pi * double(p);
      for (std::size_t j = 0; j < p; ++j) {
        const double sd = md.sigma.at(k, j), mu = md.mu.at(k, j), iv = 1.0 / (sd * sd);
        d.inv_var(Eigen::Index(k), Eigen::Index(j)) = iv;
        d.mu_iv(Eigen::Index(k), Eigen::Index(j)) = mu * iv;
        c -= std::log(sd) + 0.5 * mu * mu * iv;
      }
      d.constant(Eigen::Index(k)) = c;
    }
  }
  double log_det = 0.0;
  for (double s : q.scale) log_det -= std::log(s);

  std::vector<double> out(n);
  const std::size_t chunks = (n + kEvalChunk - 1) / kEvalChunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * kEvalChunk, hi = std::min(n, lo + kEvalChunk), m = hi - lo;
    const auto rows_m = Eigen::Index(m), cols_p = Eigen::Index(p), cols_k = Eigen::Index(K);
    Mat z(rows_m, cols_p);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < p; ++j) z(Eigen::Index(r), Eigen::Index(j)) = (y.at(lo + r, j) - q.shift[j]) / q.scale[j];
    const Mat z2 = z.array().square().matrix();
    Eigen::VectorXd acc = Eigen::VectorXd::Constant(rows_m, -std::numeric_limits<double>::infinity());
    Mat comp(rows_m, cols_k);
    for (const Draw& d : draws) {
      comp.noalias() = z * d.mu_iv.transpose();
      comp.noalias() -= 0.5 * z2 * d.inv_var.transpose();
      comp.rowwise() += d.constant;
      for (Eigen::Index r = 0; r < Eigen::Index(m); ++r) {
        const double mx = comp.row(r).maxCoeff();
        const double lse = mx + std::log((comp.row(r).array() - mx).exp().sum());
        acc(r) = logaddexp(acc(r), lse);
      }
    }
    for (std::size_t r = 0; r < m; ++r) out[lo + r] = acc(Eigen::Index(r)) - std::log(double(n_draws)) + log_det;
  });
  return out;
}

Checkpoint VariationalPosterior::to_checkpoint() const {
  Checkpoint ck;
  ck.kind = "dpgmm";
  ck.meta["components"] = layout.K;
  ck.meta["dim"] = layout.p;
  ck.put("mean", Tensor::row(mean));
  ck.put("log_std", Tensor::row(log_std));
  ck.put("standardize.shift", Tensor::row(shift));
  ck.put("standardize.scale", Tensor::row(scale));
  ck.put("elbo_trace", Tensor::row(elbo_trace));
  return ck;
}

VariationalPosterior VariationalPosterior::from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "dpgmm") throw ValidationError("checkpoint kind '" + ck.kind + "' is not a DPGMM posterior");
  VariationalPosterior q;
  try {
    q.layout = Layout{ck.meta.at("components").get<std::size_t>(), ck.meta.at("dim").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("DPGMM checkpoint metadata: ") + e.what());
  }
  if (q.layout.K == 0 || q.layout.p == 0) throw ValidationError("DPGMM checkpoint has an empty layout");
  q.mean = ck.get("mean").vec();
  q.log_std = ck.get("log_std").vec();
  q.shift = ck.get("standardize.shift").vec();
  q.scale = ck.get("standardize.scale").vec();
  q.elbo_trace = ck.get("elbo_trace").vec();
  if (q.mean.size() != q.layout.size() || q.log_std.size() != q.layout.size() || q.shift.size() != q.layout.p ||
      q.scale.size() != q.layout.p) {
    throw ValidationError("DPGMM checkpoint arrays do not match its layout");
  }
  return q;
}

void save_posterior(const VariationalPosterior& posterior, const std::filesystem::path& path) {
  save_checkpoint(posterior.to_checkpoint(), path);
}

VariationalPosterior load_posterior(const std::filesystem::path& path) {
  return VariationalPosterior::from_checkpoint(load_checkpoint(path));
}

}  // namespace snf::dpgmm
