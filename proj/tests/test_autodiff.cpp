#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <random>

#include "fd.hpp"
#include "snf/autodiff.hpp"
#include "snf/errors.hpp"
#include "snf/gaussian.hpp"
#include "snf/nn.hpp"
#include "snf/optim.hpp"

using namespace snf;
using snf::testing::central_difference;
using snf::testing::rel_err;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data()) v = u(rng);
  return t;
}

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Checks every coordinate of every input against central differences.
void check_gradients(const ScalarFn& f, const std::vector<Tensor>& inputs, double tol = 1e-4) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
  Var loss = f(tape, vars);
  std::vector<Tensor> grads = tape.grad(loss, vars);
  auto scalar = [&](const std::vector<Tensor>& ps) {
    Tape t2;
    std::vector<Var> v2;
    for (const Tensor& p : ps) v2.push_back(t2.leaf(p, false));
    return f(t2, v2).value().item();
  };
  for (std::size_t w = 0; w < inputs.size(); ++w) {
    for (std::size_t i = 0; i < inputs[w].size(); ++i) {
      const double num = central_difference(scalar, inputs, w, i, 1e-5);
      INFO("input " << w << " index " << i << " analytic " << grads[w][i] << " numeric " << num);
      CHECK(rel_err(grads[w][i], num) <= tol);
    }
  }
}

}  // namespace

TEST_CASE("grad of x*x at 3 is 6", "[autodiff]") {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(3.0));
  auto g = tape.grad(x * x, {x});
  REQUIRE(g[0].item() == Catch::Approx(6.0).margin(1e-15));
}

TEST_CASE("grad of sum(softplus(x)) at zero is one half", "[autodiff]") {
  Tape tape;
  Var x = tape.leaf(Tensor::row({0, 0, 0, 0}));
  auto g = tape.grad(sum(softplus(x)), {x});
  for (double v : g[0].data()) REQUIRE(v == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("MLP loss gradient matches central differences", "[autodiff]") {
  std::mt19937_64 rng(7);
  ParamStore store;
  Rng init(11);
  Mlp mlp = Mlp::create(store, "mlp", 3, {6, 5}, 2, init);
  Tensor x = random_tensor(rng, {4, 3}, -2, 2);

  auto loss_of = [&](Tape& tape, const std::vector<Var>& params) {
    Var in = tape.constant(x);
    Var out = mlp.forward(params, in);
    return mean(square(tanh(out))) + sum(softplus(out)) * 0.1;
  };
  Tape tape;
  std::vector<Var> params = store.bind(tape, true);
  Var loss = loss_of(tape, params);
  auto grads = tape.grad(loss, params);

  auto scalar = [&](const std::vector<Tensor>& ps) {
    Tape t2;
    std::vector<Var> v2;
    for (const Tensor& p : ps) v2.push_back(t2.leaf(p, false));
    return loss_of(t2, v2).value().item();
  };
  // 50 random parameter coordinates.
  std::size_t checked = 0;
  while (checked < 50) {
    const std::size_t w = std::uniform_int_distribution<std::size_t>(0, store.size() - 1)(rng);
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, store.value(w).size() - 1)(rng);
    const double num = central_difference(scalar, store.values(), w, i, 1e-5);
    CHECK(rel_err(grads[w][i], num) <= 1e-4);
    ++checked;
  }
}

TEST_CASE("every differentiable op matches finite differences", "[autodiff][property]") {
  std::mt19937_64 rng(2024);
  const Tensor a = random_tensor(rng, {3, 4}, -2, 2);
  const Tensor b = random_tensor(rng, {3, 4}, -2, 2);
  const Tensor pos = random_tensor(rng, {3, 4}, 0.2, 2);
  const Tensor row = random_tensor(rng, {1, 4}, -2, 2);
  const Tensor col = random_tensor(rng, {3, 1}, 0.5, 2);
  const Tensor m2 = random_tensor(rng, {4, 2}, -2, 2);
  const Tensor w = random_tensor(rng, {3, 4}, -1, 1);  // weights for a non-trivial scalarization

  auto weighted = [&](Tape& t, Var v) {
    if (v.shape() == w.shape()) return sum(v * t.constant(w));
    return sum(v * v) * 0.5 + sum(v);
  };

  SECTION("add/sub/mul/div with broadcasting") {
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, v[0] + v[1] * v[2]); }, {a, b, row});
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, (v[0] - v[1]) / v[2]); }, {a, b, col});
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, v[0] / v[1]); }, {a, pos});
  }
  SECTION("matmul and transpose") {
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, matmul(v[0], v[1])); }, {a, m2});
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, transpose(transpose(v[0]))); }, {a});
    const Tensor bias2 = random_tensor(rng, {1, 2}, -2, 2);
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, affine(v[0], v[1], v[2])); },
                    {a, m2, bias2});
  }
  SECTION("unary ops") {
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, exp(v[0])); }, {a});
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, log(v[0])); }, {pos});
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, tanh(v[0])); }, {a});
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, relu(v[0])); }, {a});
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, softplus(v[0])); }, {a});
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, sigmoid(v[0])); }, {a});
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, pow(v[0], 1.7)); }, {pos});
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, sqrt(v[0])); }, {pos});
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, clamp(v[0], -1.0, 1.0)); }, {a});
  }
  SECTION("reductions") {
    check_gradients([&](Tape&, const std::vector<Var>& v) { return sum(square(sum(v[0], 0))); }, {a});
    check_gradients([&](Tape&, const std::vector<Var>& v) { return sum(square(mean(v[0], 1))); }, {a});
    check_gradients([&](Tape&, const std::vector<Var>& v) { return mean(square(v[0])); }, {a});
    check_gradients([&](Tape&, const std::vector<Var>& v) { return sum(square(logsumexp_rows(v[0]))); }, {a});
    check_gradients([&](Tape& t, const std::vector<Var>& v) { return weighted(t, softmax_rows(v[0])); }, {a});
  }
  SECTION("indexing and reshaping") {
    const std::vector<std::size_t> idx{3, 0, 2};
    const std::vector<std::size_t> cols{2, 0, 2};
    const std::vector<std::size_t> rows{1, 1, 0, 2};
    check_gradients([&](Tape&, const std::vector<Var>& v) { return sum(square(gather_cols(v[0], idx))); }, {a});
    check_gradients([&](Tape&, const std::vector<Var>& v) { return sum(square(select_cols(v[0], cols))); }, {a});
    check_gradients([&](Tape&, const std::vector<Var>& v) { return sum(exp(select_rows(v[0], rows))); }, {a});
    check_gradients(
        [&](Tape& t, const std::vector<Var>& v) { return weighted(t, reshape(concat_cols({v[0], v[1]}), {3, 4})); },
        {random_tensor(rng, {3, 1}, -2, 2), random_tensor(rng, {3, 3}, -2, 2)});
  }
}

TEST_CASE("affine equals matmul plus broadcast bias", "[autodiff]") {
  std::mt19937_64 rng(7);
  const Tensor x = random_tensor(rng, {5, 3}, -2, 2), w = random_tensor(rng, {3, 4}, -2, 2),
               b = random_tensor(rng, {1, 4}, -2, 2);
  Tape tape;
  const Var vx = tape.leaf(x), vw = tape.leaf(w), vb = tape.leaf(b);
  const Tensor fused = affine(vx, vw, vb).value();
  const Tensor plain = (matmul(vx, vw) + vb).value();
  for (std::size_t i = 0; i < fused.size(); ++i) CHECK(fused[i] == Catch::Approx(plain[i]).epsilon(1e-14));
  CHECK_THROWS_AS(affine(vx, vw, tape.leaf(Tensor(Shape{1, 3}))), ValidationError);
}

TEST_CASE("grad rejects non-scalar losses and reports NaN origins", "[autodiff][errors]") {
  Tape tape;
  Var x = tape.leaf(Tensor::row({1, 2}));
  REQUIRE_THROWS_AS(tape.grad(x * x, {x}), ValidationError);

  Tape t2;
  Var z = t2.leaf(Tensor::row({0.0, 1.0}));
  Var loss = sum(sqrt(z));
  try {
    t2.grad(loss, {z});
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    REQUIRE(std::string(e.what()).find("sqrt") != std::string::npos);
  }
}

TEST_CASE("unreachable parameters receive zero gradients", "[autodiff]") {
  Tape tape;
  Var x = tape.leaf(Tensor::row({1, 2}));
  Var unused = tape.leaf(Tensor(Shape{2, 3}, 4.0));
  auto g = tape.grad(sum(x), {x, unused});
  REQUIRE(g[1].shape() == Shape{2, 3});
  for (double v : g[1].data()) REQUIRE(v == 0.0);
}

TEST_CASE("shape algebra violations raise instead of reshaping", "[autodiff][errors]") {
  Tape tape;
  Var a = tape.leaf(Tensor(Shape{2, 3}, 1.0));
  Var b = tape.leaf(Tensor(Shape{2, 3}, 1.0));
  Var c = tape.leaf(Tensor(Shape{3, 4}, 1.0));
  REQUIRE(matmul(a, c).shape() == Shape{2, 4});
  REQUIRE_THROWS_AS(matmul(a, b), ValidationError);
  REQUIRE_THROWS_AS(a + c, ValidationError);
  REQUIRE_THROWS_AS(tape.leaf(Tensor(Shape{2, 2}, 1.0)) + tape.leaf(Tensor(Shape{1, 3}, 1.0)), ValidationError);
}

TEST_CASE("tape evaluation is bit-for-bit deterministic", "[autodiff][property]") {
  auto run = [] {
    ParamStore store;
    Rng init(5);
    Mlp mlp = Mlp::create(store, "m", 4, {8}, 3, init);
    Tape tape;
    auto p = store.bind(tape, true);
    Rng data_rng(9);
    Tensor x(Shape{5, 4});
    for (double& v : x.data()) v = standard_normal(data_rng);
    Var loss = sum(logsumexp_rows(mlp.forward(p, tape.constant(x))));
    auto g = tape.grad(loss, p);
    g.push_back(Tensor::scalar(loss.value().item()));
    return g;
  };
  REQUIRE(run() == run());
}

TEST_CASE("non-finite forward values raise NumericalError", "[autodiff][errors]") {
  Tape tape;
  Var x = tape.leaf(Tensor::row({-1.0}));
  REQUIRE_THROWS_AS(log(x), NumericalError);
}

TEST_CASE("adamw: zero gradient reduces to decoupled decay", "[optim]") {
  std::vector<Tensor> params{Tensor::row({2.0, -3.0})};
  std::vector<Tensor> grads{Tensor::row({0.0, 0.0})};
  AdamConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.weight_decay = 0.1;
  auto state = make_optimizer_state(params, cfg);
  adamw_step(params, grads, state);
  REQUIRE(params[0][0] == Catch::Approx(2.0 * (1 - 0.01 * 0.1)).epsilon(1e-14));
  REQUIRE(params[0][1] == Catch::Approx(-3.0 * (1 - 0.01 * 0.1)).epsilon(1e-14));
  REQUIRE(state.step == 1);
}

TEST_CASE("adamw: single step from fresh state moves by the learning rate", "[optim]") {
  std::vector<Tensor> params{Tensor::scalar(0.0)};
  std::vector<Tensor> grads{Tensor::scalar(1.0)};
  AdamConfig cfg;
  cfg.learning_rate = 1e-3;
  auto state = make_optimizer_state(params, cfg);
  adamw_step(params, grads, state);
  // m_hat = v_hat = 1 after bias correction.
  REQUIRE(params[0].item() == Catch::Approx(-1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adamw: constant gradient updates approach the learning rate", "[optim]") {
  std::vector<Tensor> params{Tensor::scalar(0.0)};
  std::vector<Tensor> grads{Tensor::scalar(0.37)};
  AdamConfig cfg;
  cfg.learning_rate = 1e-3;
  auto state = make_optimizer_state(params, cfg);
  // Hand-iterated recurrences: with constant g, m_hat = v_hat^(1/2) = |g| at every step.
  double prev = 0.0;
  for (int i = 0; i < 200; ++i) {
    adamw_step(params, grads, state);
    const double step = prev - params[0].item();
    REQUIRE(step == Catch::Approx(1e-3).epsilon(1e-6));
    prev = params[0].item();
  }
}

TEST_CASE("adamw: shape mismatch is rejected", "[optim][errors]") {
  std::vector<Tensor> params{Tensor::row({1, 2})};
  std::vector<Tensor> grads{Tensor::row({1, 2, 3})};
  auto state = make_optimizer_state(params, AdamConfig{});
  REQUIRE_THROWS_AS(adamw_step(params, grads, state), ValidationError);
}

TEST_CASE("gaussian_log_density examples", "[gaussian]") {
  const std::vector<double> z1{0.0}, z2{0.0, 0.0};
  REQUIRE(gaussian_log_density(z1, z1, z1) == Catch::Approx(-0.5 * std::log(2 * M_PI)).epsilon(1e-14));
  REQUIRE(gaussian_log_density(z2, z2, z2) == Catch::Approx(-std::log(2 * M_PI)).epsilon(1e-14));
  REQUIRE_THROWS_AS(gaussian_log_density(z1, z2, z2), ValidationError);
}

TEST_CASE("gaussian_log_density integrates to one on a 5-d grid", "[gaussian]") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> mean(5), log_std(5);
  for (int i = 0; i < 5; ++i) {
    mean[i] = u(rng);
    log_std[i] = 0.5 * u(rng);
  }
  // Trapezoid rule over mean +/- 6 sd, 25 nodes per axis (h = sd / 2).
  const int n = 25;
  std::vector<std::vector<double>> nodes(5);
  std::vector<double> h(5);
  for (int d = 0; d < 5; ++d) {
    const double sd = std::exp(log_std[d]);
    h[d] = 12 * sd / (n - 1);
    for (int k = 0; k < n; ++k) nodes[d].push_back(mean[d] - 6 * sd + k * h[d]);
  }
  double total = 0.0;
  std::vector<double> x(5);
  for (int i0 = 0; i0 < n; ++i0)
    for (int i1 = 0; i1 < n; ++i1)
      for (int i2 = 0; i2 < n; ++i2)
        for (int i3 = 0; i3 < n; ++i3)
          for (int i4 = 0; i4 < n; ++i4) {
            const int idx[5] = {i0, i1, i2, i3, i4};
            double wgt = 1.0;
            for (int d = 0; d < 5; ++d) {
              x[d] = nodes[d][idx[d]];
              wgt *= (idx[d] == 0 || idx[d] == n - 1) ? 0.5 * h[d] : h[d];
            }
            total += wgt * std::exp(gaussian_log_density(x, mean, log_std));
          }
  REQUIRE(std::abs(total - 1.0) <= 1e-3);
}

TEST_CASE("row-wise tape gaussian density agrees with the scalar version", "[gaussian]") {
  Tape tape;
  Tensor x = Tensor::matrix(2, 3, {0.1, -0.3, 2.0, 1.0, 0.0, -1.0});
  Tensor m = Tensor::row({0.5, 0.0, 1.0});
  Tensor s = Tensor::row({0.1, -0.2, 0.3});
  Var lp = gaussian_log_density_rows(tape.constant(x), tape.constant(m), tape.constant(s));
  for (std::size_t r = 0; r < 2; ++r) {
    std::vector<double> xr(x.data().begin() + 3 * r, x.data().begin() + 3 * r + 3);
    REQUIRE(lp.value()[r] == Catch::Approx(gaussian_log_density(xr, m.vec(), s.vec())).epsilon(1e-14));
  }
}
