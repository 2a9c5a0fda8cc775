// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fail.
//
//   acceptance [work_dir]
//
// Criteria 7-10 and 13 run the full desk pipeline (built-in default config)
// twice under work_dir; everything else uses small synthetic instances.

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>
#include <thread>

#include "fd.hpp"
#include "snf/checkpoint.hpp"
#include "snf/dpgmm.hpp"
#include "snf/epr.hpp"
#include "snf/flows.hpp"
#include "snf/ood_stats.hpp"
#include "snf/pipeline.hpp"
#include "snf/predictor.hpp"
#include "snf/random.hpp"
#include "snf/text.hpp"

using namespace snf;
namespace fs = std::filesystem;
using snf::testing::rel_err;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v) { return fmt_double(v); }

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << o.detail << " ("
            << fmt_fixed(seconds_since(t0), 1) << " s)" << std::endl;
}

// ---- synthetic helpers ---------------------------------------------------

flows::FlowConfig small_flow(std::size_t layers, std::vector<std::size_t> surjections, double init_scale) {
  flows::FlowConfig c;
  c.layers = layers;
  c.surjection_layers = std::move(surjections);
  c.bins = 8;
  c.hidden = {16, 16};
  c.init_scale = init_scale;
  return c;
}

Tensor gaussian_rows(Rng& rng, std::size_t n, std::size_t d, double sd = 1.0) {
  Tensor t(Shape{n, d});
  for (double& v : t.data()) v = sd * standard_normal(rng);
  return t;
}

Tensor ring_rows(Rng& rng, std::size_t n) {
  Tensor t(Shape{n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const double a = 2 * std::numbers::pi * uniform01(rng), r = 2.0 + 0.2 * standard_normal(rng);
    t.at(i, 0) = r * std::cos(a);
    t.at(i, 1) = r * std::sin(a);
  }
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Midpoint rule for exp(log p) over [-6, 6]^2 with n points per axis.
double grid_mass(const flows::FlowStack& stack, std::size_t n) {
  const double lo = -6.0, h = 12.0 / double(n);
  Tensor grid(Shape{n * n, 2});
  for (std::size_t i = 0; i < n * n; ++i) {
    grid.at(i, 0) = lo + (double(i % n) + 0.5) * h;
    grid.at(i, 1) = lo + (double(i / n) + 0.5) * h;
  }
  double mass = 0.0;
  for (double v : stack.log_prob(grid, std::max(1u, std::thread::hardware_concurrency()))) mass += std::exp(v);
  return mass * h * h;
}

// Inference map of the whole stack without the base density: z and summed log-dets.
std::pair<Tensor, std::vector<double>> infer(const flows::FlowStack& stack, const Tensor& y) {
  Tape tape;
  auto p = stack.params().bind(tape, false);
  Var z = tape.constant(y);
  std::vector<double> logdet(y.rows(), 0.0);
  for (std::size_t k = 0; k < stack.layers().size(); ++k) {
    flows::LayerResult r = stack.layer_inverse(k, p, z);
    z = r.z;
    for (std::size_t i = 0; i < logdet.size(); ++i) logdet[i] += r.contribution.value()[i];
  }
  return {z.value(), logdet};
}

// ---- criteria 1-6 ----------------------------------------------------------

Outcome quadrature() {
  const auto t0 = Clock::now();
  Rng rng(101);
  const Tensor data = ring_rows(rng, 2000);
  flows::FlowConfig snf_cfg = small_flow(4, {2}, 0.5);
  std::ostringstream detail;
  bool ok = true;
  auto check = [&](const char* label, const flows::FlowStack& s) {
    const double m = grid_mass(s, 400);
    ok = ok && std::abs(m - 1.0) <= 0.02;
    detail << label << "=" << fmt_fixed(m, 4) << " ";
  };
  const auto snf_init = flows::FlowStack::create(2, snf_cfg);
  if (snf_init.base_dim() != 1) return {false, "surjective stack does not reduce 2 -> 1"};
  check("snf_init", snf_init);
  check("bnf_init", flows::FlowStack::create(2, flows::bnf_config(snf_cfg)));
  flows::FlowConfig train_cfg = small_flow(4, {2}, 0.01);
  train_cfg.hidden = {32, 32};
  train_cfg.max_epochs = 15;
  check("snf_trained", flows::train_flow(data, train_cfg));
  check("bnf_trained", flows::train_flow(data, flows::bnf_config(train_cfg)));
  const double t = seconds_since(t0);
  ok = ok && t < 120.0;
  detail << "within 1 +- 0.02, runtime " << fmt_fixed(t, 1) << " s < 120 s";
  return {ok, detail.str()};
}

Outcome change_of_variables() {
  const auto t0 = Clock::now();
  Rng rng(102);
  double worst = 0.0;
  for (std::size_t d : {2, 3, 4}) {
    const auto stack = flows::FlowStack::create(d, flows::bnf_config(small_flow(4, {}, 1.0)));
    const Tensor y = gaussian_rows(rng, 100, d, 2.0);
    const auto [z, logdet] = infer(stack, y);
    const double h = 1e-6;
    // All 2d perturbed copies of a point go through the stack in one batch.
    for (std::size_t r = 0; r < y.rows(); ++r) {
      Tensor a(Shape{2 * d, d});
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t i = 0; i < d; ++i) a.at(2 * j, i) = a.at(2 * j + 1, i) = y.at(r, i);
      for (std::size_t j = 0; j < d; ++j) {
        a.at(2 * j, j) += h;
        a.at(2 * j + 1, j) -= h;
      }
      const Tensor za = infer(stack, a).first;
      Eigen::MatrixXd J(d, d);
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t i = 0; i < d; ++i)
          J(Eigen::Index(i), Eigen::Index(j)) = (za.at(2 * j, i) - za.at(2 * j + 1, i)) / (2 * h);
      const double det = std::abs(J.determinant());
      worst = std::max(worst, std::abs(std::exp(logdet[r]) - det) / det);
    }
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-3 && t < 60.0,
          "max relative error " + num(worst) + " <= 1e-3 over 300 points, runtime " + fmt_fixed(t, 1) + " s < 60 s"};
}

Outcome invertibility() {
  Rng rng(103);
  double worst = 0.0;
  // Every layer of bijective stacks (alternating coupling masks) and the full stacks.
  for (std::size_t d : {1, 2, 3, 5, 8}) {
    const auto stack = flows::FlowStack::create(d, flows::bnf_config(small_flow(4, {}, 1.0)));
    const Tensor y = gaussian_rows(rng, 1000, d, 2.0);
    Tape tape;
    auto p = stack.params().bind(tape, false);
    Tensor z = y;
    for (std::size_t k = 0; k < stack.layers().size(); ++k) {
      const Tensor zk = stack.layer_inverse(k, p, tape.constant(z)).z.value();
      Rng unused(0);
      worst = std::max(worst, max_abs_diff(stack.layer_forward(k, zk, unused), z));
      z = zk;
    }
    Tensor back = z;
    for (std::size_t k = stack.layers().size(); k-- > 0;) {
      Rng unused(0);
      back = stack.layer_forward(k, back, unused);
    }
    worst = std::max(worst, max_abs_diff(back, y));
  }
  // Conditioned coupling, the bijective part inside a surjection.
  const flows::FlowConfig cfg = small_flow(1, {}, 1.0);
  for (bool odd : {false, true}) {
    ParamStore store;
    const auto layer = flows::make_coupling(store, "c", 4, odd, 2, cfg, rng);
    const Tensor y = gaussian_rows(rng, 1000, 4, 2.0), cond = gaussian_rows(rng, 1000, 2);
    Tape tape;
    auto p = store.bind(tape, false);
    const Tensor z = flows::coupling_inverse(layer, cfg, p, tape.constant(y), tape.constant(cond)).z.value();
    worst = std::max(worst, max_abs_diff(flows::coupling_forward(layer, cfg, store, z, cond), y));
  }
  return {worst <= 1e-6, "max |forward(inverse(y)) - y| = " + num(worst) + " <= 1e-6 over 1000 points"};
}

Outcome right_inverse() {
  const auto stack = flows::FlowStack::create(6, small_flow(3, {2}, 1.0));
  if (stack.layers()[1].kind != flows::Layer::Kind::Surjection) return {false, "layer 2 is not a surjection"};
  const std::size_t q = stack.layers()[1].out_dim(), nd = stack.layers()[1].surjection.dropped.size();
  Rng rng(104);
  const Tensor z = gaussian_rows(rng, 1000, q, 2.0);
  double worst = 0.0;
  auto recover = [&](const Tensor& y) {
    Tape tape;
    auto p = stack.params().bind(tape, false);
    worst = std::max(worst, max_abs_diff(stack.layer_inverse(1, p, tape.constant(y)).z.value(), z));
  };
  recover(stack.layer_forward(1, z, rng));                                 // decoder-sampled y-
  recover(stack.surjection_forward(1, z, gaussian_rows(rng, 1000, nd, 2.0)));  // arbitrary y-
  return {worst <= 1e-6, "max |inverse(forward(z)) - z| = " + num(worst) + " <= 1e-6"};
}

Outcome gradients() {
  const double h = 1e-6;
  // Flow NLL.
  double flow_worst = 0.0;
  {
    flows::FlowConfig config = small_flow(3, {2}, 1.0);
    config.bins = 4;
    config.hidden = {6};
    flows::FlowStack stack = flows::FlowStack::create(3, config);
    stack.set_standardization({0.2, -0.1, 0.0}, {1.3, 0.9, 1.1});
    Rng rng(105);
    const Tensor rows = gaussian_rows(rng, 8, 3, 1.5);
    Tape tape;
    auto p = stack.params().bind(tape, true);
    auto g = tape.grad(flows::mean_nll(stack, tape, p, rows), p);
    auto nll = [&](const flows::FlowStack& s) {
      Tape t;
      auto q = s.params().bind(t, false);
      return flows::mean_nll(s, t, q, rows).value().item();
    };
    for (std::size_t k = 0; k < stack.params().size(); ++k) {
      for (std::size_t i = 0; i < stack.params().value(k).size(); i += 3) {
        flows::FlowStack a = stack, b = stack;
        a.params().value(k)[i] += h;
        b.params().value(k)[i] -= h;
        flow_worst = std::max(flow_worst, rel_err(g[k][i], (nll(a) - nll(b)) / (2 * h)));
      }
    }
  }
  // Predictor cross-entropy.
  double pred_worst = 0.0;
  {
    predictor::PredictorConfig cfg;
    cfg.num_locations = 9;
    cfg.embedding_dim = cfg.feature_dim = 4;
    cfg.blocks = 2;
    cfg.window = 5;
    cfg.stride = 1;
    const auto m = predictor::PredictorModel::create(cfg);
    epr::Trajectory traj;
    traj.visits = {0, 1, 2, 3, 4, 5, 6, 7, 8, 0, 1, 4, 4, 2};
    const auto w = predictor::make_windows(traj, 5, 1);
    Tape tape;
    auto p = m.params().bind(tape, true);
    auto grads = tape.grad(predictor::cross_entropy(m.build(tape, p, w, true).logits, w), p);
    auto scalar = [&](const std::vector<Tensor>& ps) {
      predictor::PredictorModel copy = m;
      copy.params().values() = ps;
      Tape t2;
      auto p2 = copy.params().bind(t2, false);
      return predictor::cross_entropy(copy.build(t2, p2, w, true).logits, w).value().item();
    };
    for (std::size_t k = 0; k < m.params().size(); ++k)
      for (std::size_t i = 0; i < m.params().value(k).size(); i += 3)
        pred_worst = std::max(
            pred_worst, rel_err(grads[k][i], snf::testing::central_difference(scalar, m.params().values(), k, i, h)));
  }
  // DPGMM ELBO with common random numbers.
  double elbo_worst = 0.0;
  {
    Rng rng(106);
    const dpgmm::Layout L{3, 2};
    std::vector<double> mean(L.size()), log_std(L.size());
    for (double& v : mean) v = 0.7 * standard_normal(rng);
    for (double& v : log_std) v = -1.0 + 0.3 * standard_normal(rng);
    const Tensor data = gaussian_rows(rng, 6, 2);
    const Tensor eps = gaussian_rows(rng, 10000, L.size());
    auto value = [&](const std::vector<double>& m, const std::vector<double>& s) {
      Tape t;
      return dpgmm::elbo(t.constant(Tensor::row(m)), t.constant(Tensor::row(s)), L, data, eps).value().item();
    };
    Tape tape;
    Var m = tape.leaf(Tensor::row(mean)), s = tape.leaf(Tensor::row(log_std));
    auto g = tape.grad(dpgmm::elbo(m, s, L, data, eps), {m, s});
    const double he = 1e-5;
    for (int which = 0; which < 2; ++which) {
      for (std::size_t i = 0; i < L.size(); ++i) {
        auto mp = mean, mm = mean, sp = log_std, sm = log_std;
        (which == 0 ? mp : sp)[i] += he;
        (which == 0 ? mm : sm)[i] -= he;
        elbo_worst = std::max(elbo_worst, rel_err(g[std::size_t(which)][i], (value(mp, sp) - value(mm, sm)) / (2 * he)));
      }
    }
  }
  return {flow_worst <= 1e-4 && pred_worst <= 1e-4 && elbo_worst <= 1e-3,
          "max relative error flow " + num(flow_worst) + " <= 1e-4, predictor " + num(pred_worst) +
              " <= 1e-4, dpgmm " + num(elbo_worst) + " <= 1e-3"};
}

Outcome simulator_law() {
  // Closed-form explore probability per step, binned by log2 of the distinct count.
  struct Bin {
    double events = 0, explores = 0, expected = 0, variance = 0;
  };
  const std::vector<epr::AgentParams> settings{{0.6, 0.5}, {0.3, 0.2}, {0.9, 0.8}};
  std::size_t bins_checked = 0;
  double worst_sigma = 0.0;
  Rng rng(107);
  const std::size_t D = 5000;
  for (const auto& params : settings) {
    std::map<int, Bin> bins;
    for (int n = 0; n < 100; ++n) {
      const auto t = epr::simulate_trajectory(params, 2000, D, epr::Intervention::none(), rng);
      std::vector<bool> seen(D, false);
      seen[t.visits[0]] = true;
      std::size_t S = 1;
      for (std::size_t i = 1; i < t.visits.size() && S < D; ++i) {
        const double p = std::clamp(params.rho * std::pow(double(S), -params.gamma), 0.0, 1.0);
        Bin& b = bins[static_cast<int>(std::floor(std::log2(double(S))))];
        const bool explored = !seen[t.visits[i]];
        b.events += 1;
        b.explores += explored;
        b.expected += p;
        b.variance += p * (1 - p);
        if (explored) {
          seen[t.visits[i]] = true;
          ++S;
        }
      }
    }
    for (const auto& [key, b] : bins) {
      if (b.events < 200 || b.variance == 0) continue;
      worst_sigma = std::max(worst_sigma, std::abs(b.explores - b.expected) / std::sqrt(b.variance));
      ++bins_checked;
    }
  }
  return {worst_sigma <= 3.0 && bins_checked >= 9,
          "max deviation " + fmt_fixed(worst_sigma, 2) + " binomial sd <= 3 over " + std::to_string(bins_checked) +
              " bins, 3 settings"};
}

// ---- desk pipeline -------------------------------------------------------

struct DeskRun {
  fs::path out;
  double seconds = 0.0;
  std::string error;
};

DeskRun run_desk(const fs::path& out) {
  DeskRun r{out, 0.0, {}};
  fs::remove_all(out);
  const auto t0 = Clock::now();
  try {
    pipeline::RunOptions options{out, std::max(1u, std::thread::hardware_concurrency()), true};
    pipeline::cmd_pipeline(pipeline::default_config(), options);
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  r.seconds = seconds_since(t0);
  return r;
}

Outcome spectral_constraint(const DeskRun& run) {
  if (!run.error.empty()) return {false, "desk pipeline failed: " + run.error};
  const auto config = pipeline::default_config();
  const auto model = predictor::PredictorModel::from_checkpoint(load_checkpoint(run.out / "models" / "predictor.ckpt"));
  const auto& pc = model.config();
  if (pc.num_locations != 100 || pc.window != 20 || config.simulator.trajectories != 200 ||
      config.simulator.steps != 500)
    return {false, "desk predictor is not N=200, T=500, D=100, L=20"};
  double sigma_max = 0.0;
  for (std::size_t k = 0; k < model.normalized_count(); ++k)
    sigma_max = std::max(sigma_max, predictor::power_iteration_sigma(model.normalized_matrix(k), 1000));

  // Pairs of real embedded windows from the training data.
  const auto train = epr::read_dataset(run.out / "data" / "train.epr");
  const auto windows = predictor::make_windows(train, pc.window, pc.stride);
  Rng rng(108);
  std::vector<predictor::WindowedExample> a, b;
  while (a.size() < 1000) {
    const auto i = uniform_index(rng, windows.size()), j = uniform_index(rng, windows.size());
    if (i == j) continue;
    a.push_back(windows[i]);
    b.push_back(windows[j]);
  }
  Tensor xa = model.embed(a), xb = model.embed(b);
  const double c = pc.branch_scale;
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (std::size_t blk = 0; blk < pc.blocks; ++blk) {
    const Tensor fa = model.block(blk, xa), fb = model.block(blk, xb);
    for (std::size_t r = 0; r < 1000; ++r) {
      double dx = 0.0, df = 0.0;
      for (std::size_t k = 0; k < xa.cols(); ++k) {
        dx += std::pow(xa.at(r, k) - xb.at(r, k), 2);
        df += std::pow(fa.at(r, k) - fb.at(r, k), 2);
      }
      if (dx == 0.0) continue;
      const double ratio = std::sqrt(df / dx);
      lo = std::min(lo, ratio);
      hi = std::max(hi, ratio);
    }
    xa = fa;
    xb = fb;
  }
  return {sigma_max <= c + 0.02 && lo >= 1 - c && hi <= 1 + c,
          "max sigma " + fmt_fixed(sigma_max, 4) + " <= " + fmt_fixed(c + 0.02, 2) + ", block ratios in [" +
              fmt_fixed(lo, 3) + ", " + fmt_fixed(hi, 3) + "] within [" + fmt_fixed(1 - c, 2) + ", " +
              fmt_fixed(1 + c, 2) + "]"};
}

double mean_test_nll(const fs::path& out, const std::string& kind) {
  const auto rows = pipeline::parse_scores(read_file(out / "scores" / kind / "test.csv"));
  if (rows.empty()) throw std::runtime_error("no test scores for " + kind);
  double s = 0.0;
  for (const auto& r : rows) s -= r.loglik;
  return s / double(rows.size());
}

Outcome nll_ordering(const DeskRun& run) {
  if (!run.error.empty()) return {false, "desk pipeline failed: " + run.error};
  const double snf = mean_test_nll(run.out, "flow-snf"), bnf = mean_test_nll(run.out, "flow-bnf"),
               dp = mean_test_nll(run.out, "dpgmm");
  const bool ok = snf <= bnf + 1.0 && bnf < dp - 5.0 && run.seconds < 1800.0;
  return {ok, "test NLL snf " + fmt_fixed(snf, 3) + " <= bnf + 1 (" + fmt_fixed(bnf, 3) + "), bnf < dpgmm - 5 (" +
                  fmt_fixed(dp, 3) + "), pipeline " + fmt_fixed(run.seconds, 0) + " s < 1800 s"};
}

struct ReportCell {
  double p = 0.0, w = 0.0;
};

// dataset -> cell for one estimator of report_N<n>.csv.
std::map<std::string, ReportCell> report_cells(const fs::path& out, std::size_t n, const std::string& estimator) {
  std::map<std::string, ReportCell> cells;
  const std::string text = read_file(out / "report" / ("report_N" + std::to_string(n) + ".csv"));
  const auto lines = split(text, '\n');
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const auto f = split(lines[i], ',');
    if (f.size() != 6) throw std::runtime_error("malformed report line: " + std::string(lines[i]));
    if (f[2] == estimator) cells[std::string(f[1])] = {parse_double(f[3]), parse_double(f[4])};
  }
  return cells;
}

std::vector<std::string> interventional_names() {
  std::vector<std::string> names;
  for (const auto& iv : epr::standard_interventions()) names.push_back(iv.dataset_name());
  return names;
}

Outcome table2_pattern(const DeskRun& run) {
  if (!run.error.empty()) return {false, "desk pipeline failed: " + run.error};
  const auto config = pipeline::default_config();
  if (config.stats.repetitions != 100) return {false, "desk repetitions != 100"};
  const auto cells = report_cells(run.out, 100, "flow-snf");
  const double train_p = cells.at("train").p, test_p = cells.at("test").p;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& name : interventional_names()) {
    const double p = cells.at(name).p;
    if (p >= worst) {
      worst = p;
      worst_name = name;
    }
  }
  return {train_p == 1.0 && test_p >= 0.01 && worst <= 1e-3,
          "train p " + num(train_p) + " == 1, test p " + fmt_pvalue(test_p) + " >= 0.01, max interventional p " +
              fmt_pvalue(worst) + " (" + worst_name + ") <= 1e-3"};
}

Outcome table4_pattern(const DeskRun& run) {
  if (!run.error.empty()) return {false, "desk pipeline failed: " + run.error};
  const auto cells = report_cells(run.out, 100, "flow-snf");
  const double test_w = cells.at("test").w;
  double lowest = std::numeric_limits<double>::infinity();
  std::string lowest_name;
  for (const auto& name : interventional_names()) {
    if (cells.at(name).w < lowest) {
      lowest = cells.at(name).w;
      lowest_name = name;
    }
  }
  return {lowest >= 2.0 * test_w, "min interventional W " + fmt_fixed(lowest, 4) + " (" + lowest_name +
                                      ") >= 2 x test W " + fmt_fixed(test_w, 4)};
}

// ---- criteria 11-13 ------------------------------------------------------

Outcome null_calibration() {
  Rng rng(111);
  std::vector<double> p;
  for (int r = 0; r < 1000; ++r) {
    std::vector<double> a(100), b(100);
    for (double& v : a) v = standard_normal(rng);
    for (double& v : b) v = standard_normal(rng);
    p.push_back(ood::welch_t_test(a, b));
  }
  const double ks = ood::ks_uniform_pvalue(p);
  // Unit examples (reference values from scipy.stats).
  const double welch = ood::welch_t_test(std::vector<double>{1, 2, 3, 4}, std::vector<double>{2, 4, 6, 8, 10});
  const double w1 = ood::wasserstein_1d(std::vector<double>{0, 1, 5}, std::vector<double>{2, 3});
  const double w2 = ood::wasserstein_1d(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3});
  const bool examples = std::abs(welch - 0.06913359319239236) <= 1e-12 &&
                        std::abs(w1 - 1.8333333333333333) <= 1e-12 && w2 == 0.0 &&
                        ood::welch_t_test(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3}) == 1.0;
  return {ks > 0.01 && examples, "KS p of 1000 null p-values " + fmt_pvalue(ks) + " > 0.01, unit examples " +
                                     (examples ? "exact" : "MISMATCH")};
}

Outcome dpgmm_sanity() {
  Rng rng(112);
  Tensor data(Shape{1000, 2});
  for (std::size_t i = 0; i < 1000; ++i) {
    const bool c = i % 2 == 1;
    data.at(i, 0) = (c ? 3.0 : -3.0) + 0.5 * standard_normal(rng);
    data.at(i, 1) = (c ? 2.0 : 0.0) + 0.5 * standard_normal(rng);
  }
  const auto q = dpgmm::fit_advi(data, dpgmm::DpgmmConfig{});
  const std::size_t eff = q.effective_components();
  const auto w = q.expected_weights(512, 1);
  const Tensor means = q.component_means();
  std::vector<std::pair<double, double>> found;
  for (std::size_t k = 0; k < w.size(); ++k)
    if (w[k] > 0.01) found.emplace_back(means.at(k, 0), means.at(k, 1));
  std::sort(found.begin(), found.end());
  double err = std::numeric_limits<double>::infinity();
  if (found.size() == 2)
    err = std::max(std::hypot(found[0].first + 3.0, found[0].second), std::hypot(found[1].first - 3.0, found[1].second - 2.0));
  const auto pi = dpgmm::stick_break(std::vector<double>{0.2, 0.3, 0.4});
  const std::vector<double> expect{0.2, 0.24, 0.224, 0.336};
  double stick = 0.0;
  for (std::size_t i = 0; i < 4; ++i) stick = std::max(stick, std::abs(pi[i] - expect[i]));
  return {eff == 2 && err <= 0.2 && stick <= 1e-12, "effective components " + std::to_string(eff) +
                                                        " == 2, max mean error " + fmt_fixed(err, 4) +
                                                        " <= 0.2, stick-break error " + num(stick) + " <= 1e-12"};
}

Outcome determinism(const DeskRun& first, const DeskRun& second) {
  if (!first.error.empty() || !second.error.empty()) return {false, "desk pipeline failed"};
  std::size_t compared = 0;
  std::vector<std::string> differ;
  for (const auto& entry : fs::directory_iterator(first.out / "report")) {
    if (entry.path().extension() == ".json") continue;  // manifests record wall time
    const fs::path other = second.out / "report" / entry.path().filename();
    ++compared;
    if (!fs::exists(other) || read_file(entry.path()) != read_file(other)) differ.push_back(entry.path().filename().string());
  }
  std::string detail = std::to_string(compared) + " report files compared, " + std::to_string(differ.size()) + " differ";
  for (const auto& d : differ) detail += " " + d;
  return {compared > 0 && differ.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_run");

  report(1, "flow densities integrate to one", quadrature);
  report(2, "analytic log-det matches finite-difference Jacobians", change_of_variables);
  report(3, "bijective layers invert", invertibility);
  report(4, "surjection right-inverse recovers z", right_inverse);
  report(5, "autodiff gradients match finite differences", gradients);
  report(6, "simulator exploration law", simulator_law);

  std::cerr << "running the desk pipeline into " << (work / "run1").string() << std::endl;
  const DeskRun first = run_desk(work / "run1");
  report(7, "spectral constraint after desk training", [&] { return spectral_constraint(first); });
  report(8, "desk test NLL ordering", [&] { return nll_ordering(first); });
  report(9, "desk t-test pattern (SNF, N=100, R=100)", [&] { return table2_pattern(first); });
  report(10, "desk Wasserstein pattern (SNF)", [&] { return table4_pattern(first); });
  report(11, "statistics null calibration", null_calibration);
  report(12, "DPGMM sanity", dpgmm_sanity);

  std::cerr << "rerunning the desk pipeline into " << (work / "run2").string() << std::endl;
  const DeskRun second = run_desk(work / "run2");
  report(13, "pipeline rerun is byte identical", [&] { return determinism(first, second); });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
