#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>

#include <boost/math/distributions/beta.hpp>
#include <boost/math/distributions/gamma.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/exp_sinh.hpp>
#include <catch2/catch_amalgamated.hpp>

#include "snf/dpgmm.hpp"
#include "snf/errors.hpp"
#include "snf/gaussian.hpp"

using namespace snf;
using namespace snf::dpgmm;
using Catch::Approx;

namespace {

const double kLog2Pi = std::log(2 * std::numbers::pi);

VariationalPosterior point_posterior(const Layout& layout, std::vector<double> mean, double log_std) {
  VariationalPosterior q;
  q.layout = layout;
  q.mean = std::move(mean);
  q.log_std.assign(layout.size(), log_std);
  q.shift.assign(layout.p, 0.0);
  q.scale.assign(layout.p, 1.0);
  return q;
}

std::vector<double> random_theta(Rng& rng, const Layout& layout) {
  std::vector<double> t(layout.size());
  for (double& v : t) v = 0.7 * standard_normal(rng);
  return t;
}

double log_joint_value(const std::vector<double>& theta, const Layout& layout, const Tensor& data) {
  Tape tape;
  return log_joint(tape.constant(Tensor::row(theta)), layout, data, 1.0).value().item();
}

Tensor two_clusters(Rng& rng, std::size_t n) {
  Tensor d(Shape{n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const bool c = i % 2 == 1;
    d.at(i, 0) = (c ? 3.0 : -3.0) + 0.5 * standard_normal(rng);
    d.at(i, 1) = (c ? 2.0 : 0.0) + 0.5 * standard_normal(rng);
  }
  return d;
}

// log of the K = 1, p = 1 evidence with mu ~ N(0, 1), sigma ~ HalfNormal(1):
// given sigma, y ~ N(0, sigma^2 I + 1 1^T), and sigma is integrated numerically.
double conjugate_log_evidence(const std::vector<double>& y) {
  const double n = double(y.size());
  const double s1 = std::accumulate(y.begin(), y.end(), 0.0);
  double s2 = 0.0;
  for (double v : y) s2 += v * v;
  auto log_f = [&](double sigma) {
    const double v = sigma * sigma;
    const double log_lik = -0.5 * n * kLog2Pi - n * std::log(sigma) - 0.5 * std::log1p(n / v) -
                           0.5 / v * (s2 - s1 * s1 / (v + n));
    return log_lik + std::log(2.0) - 0.5 * kLog2Pi - 0.5 * v;
  };
  double peak = -std::numeric_limits<double>::infinity();
  for (double s = 0.01; s < 10; s += 0.01) peak = std::max(peak, log_f(s));
  boost::math::quadrature::exp_sinh<double> integrator;
  const double mass = integrator.integrate([&](double s) { return s > 0 ? std::exp(log_f(s) - peak) : 0.0; });
  return peak + std::log(mass);
}

}  // namespace

TEST_CASE("stick breaking examples") {
  auto pi = stick_break(std::vector<double>{0.5, 0.5});
  REQUIRE(pi.size() == 3);
  CHECK(pi[0] == 0.5);
  CHECK(pi[1] == 0.25);
  CHECK(pi[2] == 0.25);
  CHECK(stick_break(std::vector<double>{}) == std::vector<double>{1.0});
  pi = stick_break(std::vector<double>{0.2, 0.3, 0.4});
  const std::vector<double> expect{0.2, 0.24, 0.224, 0.336};
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(pi[i] - expect[i]) <= 1e-12);
  for (double bad : {0.0, 1.0, -0.1, 1.5, std::numeric_limits<double>::quiet_NaN()})
    CHECK_THROWS_AS(stick_break(std::vector<double>{0.5, bad}), ValidationError);
}

TEST_CASE("stick breaking always yields a simplex") {
  Rng rng(1);
  for (int rep = 0; rep < 1000; ++rep) {
    std::vector<double> nu(1 + rep % 60);
    for (double& v : nu) v = std::clamp(std::pow(uniform01(rng), 1 + rep % 5), 1e-12, 1 - 1e-12);
    const auto pi = stick_break(nu);
    for (double v : pi) CHECK(v >= 0.0);
    CHECK(std::abs(std::accumulate(pi.begin(), pi.end(), 0.0) - 1.0) <= 1e-9);
  }
}

TEST_CASE("mixture log likelihood") {
  const std::vector<double> y{0.3, -1.2};
  const Tensor mu = Tensor::matrix(1, 2, {0.5, 0.1});
  const Tensor sigma = Tensor::matrix(1, 2, {1.5, 0.7});
  const double single = gaussian_log_density(y, mu.data(), std::vector<double>{std::log(1.5), std::log(0.7)});
  CHECK(mixture_log_lik(y, std::vector<double>{1.0}, mu, sigma) == Approx(single).margin(1e-12));
  // Two identical halves collapse to one component.
  const Tensor mu2 = Tensor::matrix(2, 2, {0.5, 0.1, 0.5, 0.1});
  const Tensor sigma2 = Tensor::matrix(2, 2, {1.5, 0.7, 1.5, 0.7});
  CHECK(mixture_log_lik(y, std::vector<double>{0.5, 0.5}, mu2, sigma2) == Approx(single).margin(1e-12));

  const double phi0 = std::exp(-0.5 * kLog2Pi), phi5 = std::exp(-0.5 * kLog2Pi - 12.5);
  const double expect = std::log(0.3 * phi0 + 0.7 * phi5);
  const double v = mixture_log_lik(std::vector<double>{0.0}, std::vector<double>{0.3, 0.7},
                                   Tensor::matrix(2, 1, {0.0, 5.0}), Tensor::matrix(2, 1, {1.0, 1.0}));
  CHECK(v == Approx(expect).margin(1e-12));
  CHECK(v == Approx(-2.1236).margin(1e-3));  // the rounded reference value; exact is -2.12290

  // Component order does not matter.
  Rng rng(2);
  const std::size_t K = 5, p = 3;
  Tensor m(Shape{K, p}), s(Shape{K, p});
  for (double& x : m.data()) x = standard_normal(rng);
  for (double& x : s.data()) x = 0.5 + uniform01(rng);
  const auto pi = stick_break(std::vector<double>{0.3, 0.2, 0.6, 0.5});
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Tensor mp(Shape{K, p}), sp(Shape{K, p});
  std::vector<double> pp(K);
  for (std::size_t k = 0; k < K; ++k) {
    pp[k] = pi[perm[k]];
    for (std::size_t j = 0; j < p; ++j) {
      mp.at(k, j) = m.at(perm[k], j);
      sp.at(k, j) = s.at(perm[k], j);
    }
  }
  const std::vector<double> yy{0.1, 0.4, -0.9};
  CHECK(mixture_log_lik(yy, pi, m, s) == Approx(mixture_log_lik(yy, pp, mp, sp)).margin(1e-12));
  CHECK_THROWS_AS(mixture_log_lik(yy, pi, Tensor(Shape{4, 3}), s), ValidationError);
}

TEST_CASE("log joint matches prior densities, Jacobians and the mixture likelihood") {
  Rng rng(3);
  const Layout L{4, 2};
  CHECK(L.size() == 4 + 16);
  for (int rep = 0; rep < 20; ++rep) {
    const auto theta = random_theta(rng, L);
    const double alpha = std::exp(theta[0]);
    double expect = std::log(boost::math::pdf(boost::math::gamma_distribution<double>(1.0, 1.0), alpha)) + theta[0];
    std::vector<double> nu(L.K - 1);
    for (std::size_t i = 0; i + 1 < L.K; ++i) {
      nu[i] = 1.0 / (1.0 + std::exp(-theta[L.nu(i)]));
      expect += std::log(boost::math::pdf(boost::math::beta_distribution<double>(1.0, alpha), nu[i]));
      expect += std::log(nu[i]) + std::log(1 - nu[i]);
    }
    const boost::math::normal_distribution<double> std_normal;
    for (std::size_t k = 0; k < L.K; ++k) {
      for (std::size_t j = 0; j < L.p; ++j) {
        expect += std::log(boost::math::pdf(std_normal, theta[L.mu(k, j)]));
        const double sigma = std::exp(theta[L.log_sigma(k, j)]);
        expect += std::log(2 * boost::math::pdf(std_normal, sigma)) + theta[L.log_sigma(k, j)];
      }
    }
    const Tensor empty(Shape{0, 2});
    CHECK(log_joint_value(theta, L, empty) == Approx(expect).margin(1e-9));

    Tensor data(Shape{7, 2});
    for (double& v : data.data()) v = 2 * standard_normal(rng);
    const auto q = point_posterior(L, theta, -30.0);
    const MixtureDraw d = q.constrain(theta);
    double lik = 0.0;
    for (std::size_t r = 0; r < data.rows(); ++r) lik += mixture_log_lik(data.data().subspan(r * 2, 2), d.pi, d.mu, d.sigma);
    CHECK(log_joint_value(theta, L, data) - log_joint_value(theta, L, empty) == Approx(lik).margin(1e-9));
  }
}

TEST_CASE("log joint sums over stacked draws") {
  Rng rng(4);
  const Layout L{3, 2};
  const auto a = random_theta(rng, L), b = random_theta(rng, L);
  Tensor data(Shape{5, 2});
  for (double& v : data.data()) v = standard_normal(rng);
  std::vector<double> both = a;
  both.insert(both.end(), b.begin(), b.end());
  Tape tape;
  const double stacked =
      log_joint(tape.constant(Tensor::matrix(2, L.size(), both)), L, data, 1.0).value().item();
  CHECK(stacked == Approx(log_joint_value(a, L, data) + log_joint_value(b, L, data)).margin(1e-9));
}

TEST_CASE("single component layout has no stick variables") {
  const Layout L{1, 1};
  CHECK(L.size() == 3);
  const auto q = point_posterior(L, {0.0, 0.4, -0.2}, -30.0);
  const MixtureDraw d = q.constrain(q.mean);
  CHECK(d.pi == std::vector<double>{1.0});
  CHECK(d.alpha == 1.0);
}

TEST_CASE("ELBO at a near point mass is the log joint plus the Gaussian entropy") {
  Rng rng(5);
  const Layout L{3, 2};
  const auto theta = random_theta(rng, L);
  Tensor eps(Shape{50, L.size()});
  for (double& v : eps.data()) v = standard_normal(rng);
  const std::vector<double> log_std(L.size(), -12.0);
  const Tensor empty(Shape{0, 2});
  Tape tape;
  const double e =
      elbo(tape.constant(Tensor::row(theta)), tape.constant(Tensor::row(log_std)), L, empty, eps).value().item();
  CHECK(gaussian_entropy(log_std) == Approx(-12.0 * double(L.size()) + 0.5 * double(L.size()) * (1 + kLog2Pi)));
  CHECK(e - gaussian_entropy(log_std) == Approx(log_joint_value(theta, L, empty)).margin(1e-4));
}

TEST_CASE("ELBO gradients match finite differences with common random numbers") {
  Rng rng(6);
  const Layout L{3, 2};
  const auto mean = random_theta(rng, L);
  std::vector<double> log_std(L.size());
  for (double& v : log_std) v = -1.0 + 0.3 * standard_normal(rng);
  Tensor data(Shape{6, 2});
  for (double& v : data.data()) v = standard_normal(rng);
  Tensor eps(Shape{10000, L.size()});
  for (double& v : eps.data()) v = standard_normal(rng);

  auto value = [&](const std::vector<double>& m, const std::vector<double>& w) {
    Tape t;
    return elbo(t.constant(Tensor::row(m)), t.constant(Tensor::row(w)), L, data, eps, 1.0).value().item();
  };
  Tape tape;
  Var m = tape.leaf(Tensor::row(mean)), w = tape.leaf(Tensor::row(log_std));
  auto g = tape.grad(elbo(m, w, L, data, eps, 1.0), {m, w});
  const double h = 1e-5;
  for (int which = 0; which < 2; ++which) {
    for (std::size_t i = 0; i < L.size(); ++i) {
      auto mp = mean, mm = mean, wp = log_std, wm = log_std;
      (which == 0 ? mp : wp)[i] += h;
      (which == 0 ? mm : wm)[i] -= h;
      const double fd = (value(mp, wp) - value(mm, wm)) / (2 * h);
      const double ad = g[std::size_t(which)][i];
      CHECK(std::abs(ad - fd) <= 1e-3 * std::max(std::abs(fd), 1e-3));
    }
  }
}

TEST_CASE("ELBO lower-bounds the evidence of a conjugate toy") {
  Rng rng(7);
  Tensor y(Shape{30, 1});
  for (double& v : y.data()) v = 0.5 + 0.8 * standard_normal(rng);
  DpgmmConfig config;
  config.components = 1;
  config.batch_size = 0;
  config.iterations = 4000;
  const VariationalPosterior q = fit_advi(y, config);
  Tensor z = y;
  for (double& v : z.data()) v = (v - q.shift[0]) / q.scale[0];
  const double evidence = conjugate_log_evidence(z.vec());

  // ELBO estimate with its MC standard error from 20 independent chunks.
  std::vector<double> chunks;
  for (int c = 0; c < 20; ++c) {
    Tensor eps(Shape{1000, q.layout.size()});
    for (double& v : eps.data()) v = standard_normal(rng);
    Tape t;
    chunks.push_back(
        elbo(t.constant(Tensor::row(q.mean)), t.constant(Tensor::row(q.log_std)), q.layout, z, eps).value().item());
  }
  const double mean = std::accumulate(chunks.begin(), chunks.end(), 0.0) / 20.0;
  double var = 0.0;
  for (double v : chunks) var += (v - mean) * (v - mean) / 19.0;
  const double se = std::sqrt(var / 20.0);
  INFO("elbo " << mean << " +- " << se << " evidence " << evidence);
  CHECK(mean <= evidence + 3 * se);
  CHECK(mean >= evidence - 0.5);
}

TEST_CASE("ADVI fits and effective components") {
  SECTION("two well-separated clusters recover two components") {
    Rng rng(8);
    const Tensor data = two_clusters(rng, 1000);
    const VariationalPosterior q = fit_advi(data, DpgmmConfig{});
    CHECK(q.layout.K == 50);
    CHECK(q.effective_components() == 2);
    const auto w = q.expected_weights(512, 1);
    const Tensor means = q.component_means();
    std::vector<std::vector<double>> found;
    for (std::size_t k = 0; k < w.size(); ++k)
      if (w[k] > 0.01) found.push_back({means.at(k, 0), means.at(k, 1)});
    REQUIRE(found.size() == 2);
    std::sort(found.begin(), found.end());
    CHECK(std::hypot(found[0][0] + 3.0, found[0][1] - 0.0) <= 0.2);
    CHECK(std::hypot(found[1][0] - 3.0, found[1][1] - 2.0) <= 0.2);
    CHECK(std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0) <= 1e-9);
  }
  SECTION("a single tight Gaussian needs few components") {
    Rng rng(9);
    Tensor data(Shape{1000, 2});
    for (double& v : data.data()) v = 1.0 + 0.05 * standard_normal(rng);
    const VariationalPosterior q = fit_advi(data, DpgmmConfig{});
    CHECK(q.effective_components() <= 3);
  }
}

TEST_CASE("ADVI is seed-deterministic and validates input") {
  Rng rng(10);
  const Tensor data = two_clusters(rng, 200);
  DpgmmConfig config;
  config.components = 5;
  config.iterations = 50;
  const auto a = fit_advi(data, config), b = fit_advi(data, config);
  CHECK(a.elbo_trace == b.elbo_trace);
  CHECK(a.mean == b.mean);
  CHECK(a.elbo_trace.size() == 50);
  CHECK_THROWS_AS(fit_advi(Tensor(Shape{0, 2}), config), ValidationError);
  Tensor bad = data;
  bad[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(fit_advi(bad, config), ValidationError);
  config.components = 0;
  CHECK_THROWS_AS(fit_advi(data, config), ValidationError);
}

TEST_CASE("posterior predictive log likelihood") {
  Rng rng(11);
  const Layout L{4, 3};
  auto q = point_posterior(L, random_theta(rng, L), -30.0);
  q.shift = {0.5, -1.0, 2.0};
  q.scale = {2.0, 0.5, 1.5};
  Tensor y(Shape{40, 3});
  for (double& v : y.data()) v = 2 * standard_normal(rng);

  SECTION("point mass equals the mixture at that point") {
    const MixtureDraw d = q.constrain(q.mean);
    const double log_det = -std::log(2.0 * 0.5 * 1.5);
    const auto lp = posterior_log_lik(y, q, 16, 3);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      std::vector<double> z(3);
      for (std::size_t j = 0; j < 3; ++j) z[j] = (y.at(r, j) - q.shift[j]) / q.scale[j];
      CHECK(lp[r] == Approx(mixture_log_lik(z, d.pi, d.mu, d.sigma) + log_det).margin(1e-8));
    }
  }

  q.log_std.assign(L.size(), -1.0);
  SECTION("one draw equals that draw's mixture") {
    const MixtureDraw d = posterior_draws(q, 1, 5)[0];
    const auto lp = posterior_log_lik(y, q, 1, 5);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      std::vector<double> z(3);
      for (std::size_t j = 0; j < 3; ++j) z[j] = (y.at(r, j) - q.shift[j]) / q.scale[j];
      CHECK(lp[r] == Approx(mixture_log_lik(z, d.pi, d.mu, d.sigma) - std::log(1.5)).margin(1e-9));
    }
  }

  SECTION("draws are shared, so threads do not change the result") {
    CHECK(posterior_log_lik(y, q, 64, 7, 1) == posterior_log_lik(y, q, 64, 7, 4));
    for (const MixtureDraw& d : posterior_draws(q, 20, 7))
      CHECK(std::abs(std::accumulate(d.pi.begin(), d.pi.end(), 0.0) - 1.0) <= 1e-9);
  }

  SECTION("MC variance shrinks like 1 / n") {
    const Tensor one = Tensor::matrix(1, 3, {0.2, -0.8, 2.5});
    auto spread = [&](std::size_t n) {
      std::vector<double> v;
      for (std::uint64_t seed = 0; seed < 40; ++seed) v.push_back(posterior_log_lik(one, q, n, seed)[0]);
      const double m = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
      double s = 0.0;
      for (double x : v) s += (x - m) * (x - m);
      return s / double(v.size() - 1);
    };
    const double ratio = spread(64) / spread(256);
    CHECK(ratio > 2.0);
    CHECK(ratio < 8.0);
  }

  SECTION("errors") {
    CHECK_THROWS_AS(posterior_log_lik(Tensor(Shape{2, 2}), q, 8, 1), ValidationError);
    CHECK_THROWS_AS(posterior_log_lik(y, q, 0, 1), ValidationError);
  }
}

TEST_CASE("posterior estimate stabilizes beyond 512 draws") {
  Rng rng(12);
  Tensor data(Shape{2000, 8});
  for (std::size_t r = 0; r < data.rows(); ++r)
    for (std::size_t j = 0; j < 8; ++j) data.at(r, j) = (r % 3 == 0 ? 2.0 : -1.0) * (j % 2 ? 1 : -1) + standard_normal(rng);
  DpgmmConfig config;
  config.iterations = 1500;
  const VariationalPosterior q = fit_advi(data, config);
  const auto a = posterior_log_lik(data, q, 512, 1), b = posterior_log_lik(data, q, 1024, 2);
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / double(a.size());
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / double(b.size());
  CHECK(std::abs(ma - mb) < 0.05);
}

TEST_CASE("DPGMM checkpoint round trip") {
  Rng rng(13);
  const Tensor data = two_clusters(rng, 100);
  DpgmmConfig config;
  config.components = 6;
  config.iterations = 20;
  const auto q = fit_advi(data, config);
  const auto path = std::filesystem::temp_directory_path() / "snf_test_dpgmm.ckpt";
  save_posterior(q, path);
  const auto back = load_posterior(path);
  std::filesystem::remove(path);
  CHECK(back.layout.K == 6);
  CHECK(back.layout.p == 2);
  CHECK(back.mean == q.mean);
  CHECK(back.log_std == q.log_std);
  CHECK(back.shift == q.shift);
  CHECK(back.scale == q.scale);
  CHECK(back.elbo_trace == q.elbo_trace);
  CHECK(posterior_log_lik(data, back, 32, 1) == posterior_log_lik(data, q, 32, 1));
  Checkpoint wrong = q.to_checkpoint();
  wrong.kind = "flow";
  CHECK_THROWS_AS(VariationalPosterior::from_checkpoint(wrong), ValidationError);
}
