#include "snf/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Dense>

#include "snf/errors.hpp"
#include "snf/optim.hpp"
#include "snf/parallel.hpp"
#include "snf/text.hpp"

namespace snf::predictor {

namespace {

using MatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

constexpr std::string_view kFeatureMagic = "# snf-features";
constexpr int kFeatureVersion = 1;
constexpr std::size_t kForwardChunk = 1024;

// Work on Eigen-owned (aligned) copies so reductions do not depend on where
// the std::vector buffers happen to sit in the heap.
double normalize(Eigen::VectorXd& m) {
  const double n = m.norm();
  if (!std::isfinite(n)) throw NumericalError("non-finite weights in spectral normalization (training diverged?)");
  if (n > 0) m /= n;
  return n;
}

double normalize(std::vector<double>& x) {
  Eigen::VectorXd m = VecMap(x.data(), static_cast<Eigen::Index>(x.size()));
  const double n = normalize(m);
  x.assign(m.data(), m.data() + m.size());
  return n;
}

// One power step on W (in x out): v = W^T u / |.|, u = W v / |.|. Returns u^T W v.
double power_step_on(const Tensor& W, std::vector<double>& u, std::vector<double>& v) {
  MatMap w(W.data().data(), static_cast<Eigen::Index>(W.rows()), static_cast<Eigen::Index>(W.cols()));
  Eigen::VectorXd um = VecMap(u.data(), static_cast<Eigen::Index>(u.size()));
  Eigen::VectorXd vm = w.transpose() * um;
  if (normalize(vm) == 0) throw ValidationError("spectral normalization of a zero matrix");
  um = w * vm;
  if (normalize(um) == 0) throw ValidationError("spectral normalization of a zero matrix");
  u.assign(um.data(), um.data() + um.size());
  v.assign(vm.data(), vm.data() + vm.size());
  return um.dot(w * vm);
}

Tensor pooling_matrix(std::span<const WindowedExample> windows, std::size_t num_locations) {
  Tensor P(Shape{windows.size(), num_locations});
  for (std::size_t r = 0; r < windows.size(); ++r) {
    const auto& ctx = windows[r].context;
    const double w = 1.0 / static_cast<double>(ctx.size());
    for (LocationId id : ctx) {
      if (id >= num_locations) throw ValidationError("window location id out of range");
      P.at(r, id) += w;
    }
  }
  return P;
}

}  // namespace

std::vector<WindowedExample> make_windows(const epr::Trajectory& trajectory, std::size_t L, std::size_t stride) {
  if (L == 0 || stride == 0) throw ValidationError("window length and stride must be positive");
  const auto& v = trajectory.visits;
  if (v.size() < L + 1) {
    throw ValidationError("trajectory of length " + std::to_string(v.size()) + " is shorter than L + 1 = " +
                          std::to_string(L + 1));
  }
  std::vector<WindowedExample> out;
  for (std::size_t s = 0; s + L < v.size(); s += stride) {
    WindowedExample w;
    w.context.assign(v.begin() + static_cast<std::ptrdiff_t>(s), v.begin() + static_cast<std::ptrdiff_t>(s + L));
    w.label = v[s + L];
    w.trajectory = trajectory.agent_id;
    w.start = s;
    out.push_back(std::move(w));
  }
  return out;
}

std::vector<WindowedExample> make_windows(const epr::Dataset& dataset, std::size_t L, std::size_t stride) {
  std::vector<WindowedExample> out;
  for (const auto& t : dataset.trajectories) {
    auto w = make_windows(t, L, stride);
    out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return out;
}

SpectralNorm spectral_normalize(const Tensor& W, std::vector<double>& u, double c, int iterations) {
  if (u.size() != W.rows()) throw ValidationError("power vector length does not match matrix rows");
  std::vector<double> v;
  double sigma = 0.0;
  for (int i = 0; i < std::max(1, iterations); ++i) sigma = power_step_on(W, u, v);
  if (!(sigma > 0)) throw ValidationError("spectral normalization of a zero matrix");
  SpectralNorm out{W, sigma};
  for (double& x : out.normalized.data()) x *= c / sigma;
  return out;
}

double power_iteration_sigma(const Tensor& W, int iterations) {
  std::vector<double> u(W.rows());
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = 1.0 + 0.1 * std::sin(static_cast<double>(i) + 1.0);
  normalize(u);
  std::vector<double> v;
  double sigma = 0.0;
  for (int i = 0; i < iterations; ++i) sigma = power_step_on(W, u, v);
  return sigma;
}

PredictorModel PredictorModel::create(const PredictorConfig& config) {
  if (config.num_locations < 2) throw ValidationError("predictor needs at least 2 locations");
  if (config.embedding_dim == 0 || config.feature_dim == 0) throw ValidationError("predictor dims must be positive");
  if (!(config.branch_scale >= 0)) throw ValidationError("branch scale must be non-negative");
  PredictorModel m;
  m.config_ = config;
  Rng rng = make_rng(config.seed, 0x9e3);
  const std::size_t D = config.num_locations, e = config.embedding_dim, f = config.feature_dim;
  Tensor emb(Shape{D, e});
  for (double& x : emb.data()) x = standard_normal(rng);
  m.embedding_ = m.params_.add("embedding", std::move(emb));
  m.projection_ = Linear::create(m.params_, "projection", e, f, rng);
  for (std::size_t b = 0; b < config.blocks; ++b) {
    const std::string n = "block" + std::to_string(b);
    Block blk;
    blk.w1 = m.params_.add(n + ".w1", uniform_init(rng, f, f, f));
    blk.b1 = m.params_.add(n + ".b1", uniform_init(rng, 1, f, f));
    blk.w2 = m.params_.add(n + ".w2", uniform_init(rng, f, f, f));
    blk.b2 = m.params_.add(n + ".b2", uniform_init(rng, 1, f, f));
    m.blocks_.push_back(blk);
  }
  m.head_ = Linear::create(m.params_, "head", f, D, rng);
  for (std::size_t k = 0; k < m.normalized_count(); ++k) {
    std::vector<double> u(f);
    for (double& x : u) x = standard_normal(rng);
    normalize(u);
    m.u_.push_back(std::move(u));
  }
  m.sigma_.assign(m.normalized_count(), 1.0);
  m.power_step(1);
  return m;
}

void PredictorModel::power_step(int iterations) {
  std::vector<double> v;
  for (std::size_t k = 0; k < normalized_count(); ++k) {
    for (int i = 0; i < std::max(1, iterations); ++i) sigma_[k] = power_step_on(params_.value(matrix_param(k)), u_[k], v);
  }
}

Tensor PredictorModel::normalized_matrix(std::size_t k) const {
  Tensor W = params_.value(matrix_param(k));
  for (double& x : W.data()) x *= config_.branch_scale / sigma_[k];
  return W;
}

PredictorModel::Graph PredictorModel::build(Tape& tape, const std::vector<Var>& p,
                                            std::span<const WindowedExample> windows, bool sigma_on_tape) const {
  const double c = config_.branch_scale;
  Var pooled = matmul(tape.constant(pooling_matrix(windows, config_.num_locations)), p[embedding_]);
  Var x = projection_.forward(p, pooled);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    Var w[2];
    for (int j = 0; j < 2; ++j) {
      const std::size_t k = 2 * b + static_cast<std::size_t>(j);
      Var W = p[matrix_param(k)];
      if (sigma_on_tape) {
        // sigma^ = u^T W v with u, v held fixed; the gradient flows through W.
        std::vector<double> u = u_[k], v;
        power_step_on(params_.value(matrix_param(k)), u, v);
        Var sigma = matmul(matmul(tape.constant(Tensor::row(u_[k])), W), tape.constant(Tensor::column(v)));
        w[j] = W / sigma * c;
      } else {
        w[j] = W * (c / sigma_[k]);
      }
    }
    Var h = relu(matmul(x, w[0]) + p[blocks_[b].b1]);
    x = x + matmul(h, w[1]) + p[blocks_[b].b2] * c;
  }
  return {x, head_.forward(p, x)};
}

Tensor PredictorModel::embed(std::span<const WindowedExample> windows) const {
  Tape tape;
  auto p = params_.bind(tape, false);
  Var pooled = matmul(tape.constant(pooling_matrix(windows, config_.num_locations)), p[embedding_]);
  return projection_.forward(p, pooled).value();
}

Tensor PredictorModel::block(std::size_t b, const Tensor& x) const {
  if (b >= blocks_.size()) throw ValidationError("block index out of range");
  Tape tape;
  Var xv = tape.constant(x);
  Var w1 = tape.constant(normalized_matrix(2 * b)), w2 = tape.constant(normalized_matrix(2 * b + 1));
  Var b1 = tape.constant(params_.value(blocks_[b].b1)), b2 = tape.constant(params_.value(blocks_[b].b2));
  Var h = relu(matmul(xv, w1) + b1);
  return (xv + matmul(h, w2) + b2 * config_.branch_scale).value();
}

Forward PredictorModel::forward(std::span<const WindowedExample> windows, unsigned threads) const {
  const std::size_t n = windows.size();
  Forward out{Tensor(Shape{n, config_.feature_dim}), Tensor(Shape{n, config_.num_locations})};
  const std::size_t chunks = (n + kForwardChunk - 1) / kForwardChunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * kForwardChunk, hi = std::min(n, lo + kForwardChunk);
    Tape tape;
    auto p = params_.bind(tape, false);
    Graph g = build(tape, p, windows.subspan(lo, hi - lo), false);
    std::copy(g.features.value().data().begin(), g.features.value().data().end(),
              out.features.data().begin() + static_cast<std::ptrdiff_t>(lo * config_.feature_dim));
    std::copy(g.logits.value().data().begin(), g.logits.value().data().end(),
              out.logits.data().begin() + static_cast<std::ptrdiff_t>(lo * config_.num_locations));
  });
  return out;
}

Var cross_entropy(Var logits, std::span<const WindowedExample> windows) {
  std::vector<std::size_t> labels(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) labels[i] = windows[i].label;
  return mean(logsumexp_rows(logits) - gather_cols(logits, labels));
}

PredictorModel train_predictor(std::span<const WindowedExample> windows, const PredictorConfig& config) {
  if (windows.empty() || config.batch_size == 0) throw ValidationError("predictor training needs at least one batch");
  PredictorModel model = PredictorModel::create(config);
  AdamConfig adam;
  adam.learning_rate = config.learning_rate;
  adam.weight_decay = config.weight_decay;
  OptimizerState opt = make_optimizer_state(model.params().values(), adam);
  Rng rng = make_rng(config.seed, 0x7a1);
  std::vector<WindowedExample> batch;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = random_permutation(rng, windows.size());
    double total = 0.0;
    for (std::size_t lo = 0; lo < order.size(); lo += config.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + config.batch_size);
      batch.clear();
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(windows[order[i]]);
      model.power_step(1);
      Tape tape;
      auto p = model.params().bind(tape, true);
      auto g = model.build(tape, p, batch, true);
      Var loss = cross_entropy(g.logits, batch);
      const double value = loss.value().item();
      if (!std::isfinite(value)) throw NumericalError("predictor loss diverged at step " + std::to_string(step));
      auto grads = tape.grad(loss, p);
      adamw_step(model.params().values(), grads, opt);
      total += value * static_cast<double>(hi - lo);
      ++step;
    }
    model.loss_trace.push_back(total / static_cast<double>(windows.size()));
  }
  model.power_step(config.refine_iterations);
  model.train_accuracy = accuracy(model, windows);
  return model;
}

PredictorModel train_predictor(const epr::Dataset& dataset, const PredictorConfig& config) {
  if (dataset.manifest.num_locations != config.num_locations) {
    throw ValidationError("dataset has D=" + std::to_string(dataset.manifest.num_locations) + ", predictor expects " +
                          std::to_string(config.num_locations));
  }
  const auto windows = make_windows(dataset, config.window, config.stride);
  return train_predictor(windows, config);
}

double accuracy(const PredictorModel& model, std::span<const WindowedExample> windows, unsigned threads) {
  if (windows.empty()) return 0.0;
  const Tensor logits = model.forward(windows, threads).logits;
  const std::size_t D = logits.cols();
  std::size_t hits = 0;
  for (std::size_t r = 0; r < windows.size(); ++r) {
    const auto row = logits.data().subspan(r * D, D);
    hits += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == windows[r].label;
  }
  return static_cast<double>(hits) / static_cast<double>(windows.size());
}

double softmax_entropy(std::span<const double> logits) {
  if (logits.empty()) throw ValidationError("softmax_entropy of an empty vector");
  const double m = *std::max_element(logits.begin(), logits.end());
  if (!std::isfinite(m)) throw ValidationError("softmax_entropy needs finite logits");
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  const double log_z = std::log(z);
  double h = 0.0;
  for (double l : logits) {
    const double lp = l - m - log_z;
    const double p = std::exp(lp);
    if (p > 0) h -= p * lp;
  }
  return std::max(h, 0.0);
}

Checkpoint PredictorModel::to_checkpoint() const {
  Checkpoint ck;
  ck.kind = "predictor";
  const auto& c = config_;
  ck.meta = {{"num_locations", c.num_locations}, {"embedding_dim", c.embedding_dim}, {"feature_dim", c.feature_dim},
             {"blocks", c.blocks},           {"branch_scale", c.branch_scale},   {"window", c.window},
             {"stride", c.stride},           {"epochs", c.epochs},               {"batch_size", c.batch_size},
             {"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
             {"refine_iterations", c.refine_iterations}, {"seed", c.seed}, {"train_accuracy", train_accuracy}};
  for (std::size_t i = 0; i < params_.size(); ++i) ck.put(params_.name(i), params_.value(i));
  for (std::size_t k = 0; k < normalized_count(); ++k) ck.put("power.u" + std::to_string(k), Tensor::row(u_[k]));
  ck.put("power.sigma", Tensor::row(sigma_));
  ck.put("loss_trace", Tensor::row(loss_trace));
  return ck;
}

PredictorModel PredictorModel::from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "predictor") throw ValidationError("checkpoint kind '" + ck.kind + "' is not a predictor");
  PredictorConfig c;
  try {
    c.num_locations = ck.meta.at("num_locations");
    c.embedding_dim = ck.meta.at("embedding_dim");
    c.feature_dim = ck.meta.at("feature_dim");
    c.blocks = ck.meta.at("blocks");
    c.branch_scale = ck.meta.at("branch_scale");
    c.window = ck.meta.at("window");
    c.stride = ck.meta.at("stride");
    c.epochs = ck.meta.at("epochs");
    c.batch_size = ck.meta.at("batch_size");
    c.learning_rate = ck.meta.at("learning_rate");
    c.weight_decay = ck.meta.at("weight_decay");
    c.refine_iterations = ck.meta.at("refine_iterations");
    c.seed = ck.meta.at("seed");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("predictor checkpoint metadata: ") + e.what());
  }
  PredictorModel m = create(c);
  for (std::size_t i = 0; i < m.params_.size(); ++i) {
    const Tensor& t = ck.get(m.params_.name(i));
    if (t.shape() != m.params_.value(i).shape()) {
      throw ValidationError("checkpoint array '" + m.params_.name(i) + "' has shape " + shape_str(t.shape()) +
                            ", expected " + shape_str(m.params_.value(i).shape()));
    }
    m.params_.value(i) = t;
  }
  for (std::size_t k = 0; k < m.normalized_count(); ++k) m.u_[k] = ck.get("power.u" + std::to_string(k)).vec();
  m.sigma_ = ck.get("power.sigma").vec();
  m.loss_trace = ck.get("loss_trace").vec();
  m.train_accuracy = ck.meta.value("train_accuracy", 0.0);
  return m;
}

std::string PredictorModel::hash() const { return hex64(fnv1a64(serialize_checkpoint(to_checkpoint()))); }

FeatureMatrix extract_features(const PredictorModel& model, const epr::Dataset& dataset, unsigned threads) {
  const auto& c = model.config();
  if (dataset.manifest.num_locations != c.num_locations) {
    throw ValidationError("dataset has D=" + std::to_string(dataset.manifest.num_locations) + ", predictor expects " +
                          std::to_string(c.num_locations));
  }
  const auto windows = make_windows(dataset, c.window, c.stride);
  FeatureMatrix fm;
  fm.dataset_id = dataset.manifest.id;
  fm.window = c.window;
  fm.stride = c.stride;
  fm.model_hash = model.hash();
  fm.values = model.forward(windows, threads).features;
  if (!fm.values.all_finite()) throw NumericalError("non-finite features for dataset " + fm.dataset_id);
  for (const auto& w : windows) {
    fm.trajectory.push_back(w.trajectory);
    fm.window_start.push_back(w.start);
  }
  return fm;
}

std::string serialize_features(const FeatureMatrix& fm) {
  std::string out;
  out += std::string(kFeatureMagic) + " v" + std::to_string(kFeatureVersion) + " dataset=" + fm.dataset_id +
         " d_f=" + std::to_string(fm.dim()) + " L=" + std::to_string(fm.window) +
         " stride=" + std::to_string(fm.stride) + " model=" + fm.model_hash + " rows=" + std::to_string(fm.rows()) +
         "\n";
  out += "dataset,trajectory,window_start";
  for (std::size_t j = 0; j < fm.dim(); ++j) out += ",f" + std::to_string(j);
  out += '\n';
  for (std::size_t r = 0; r < fm.rows(); ++r) {
    out += fm.dataset_id + ',' + std::to_string(fm.trajectory[r]) + ',' + std::to_string(fm.window_start[r]);
    for (std::size_t j = 0; j < fm.dim(); ++j) {
      out += ',';
      out += fmt_double(fm.values.at(r, j));
    }
    out += '\n';
  }
  return out;
}

FeatureMatrix parse_features(std::string_view text) {
  auto lines = split(text, '\n');
  const std::string prefix = std::string(kFeatureMagic) + " v";
  if (lines.size() < 2 || !starts_with(lines[0], prefix)) throw ValidationError("not a feature matrix file");
  std::string_view head = lines[0].substr(prefix.size());
  const std::size_t sp = head.find(' ');
  if (parse_u64(head.substr(0, sp)) != kFeatureVersion) throw ValidationError("unsupported feature file version");
  FeatureMatrix fm;
  std::size_t dim = 0, rows = 0;
  for (const auto& [k, v] : parse_kv_line(sp == std::string_view::npos ? std::string_view{} : head.substr(sp))) {
    if (k == "dataset") fm.dataset_id = v;
    else if (k == "d_f") dim = parse_u64(v);
    else if (k == "L") fm.window = parse_u64(v);
    else if (k == "stride") fm.stride = parse_u64(v);
    else if (k == "model") fm.model_hash = v;
    else if (k == "rows") rows = parse_u64(v);
    else throw ValidationError("unknown feature header key '" + k + "'");
  }
  std::vector<double> values;
  values.reserve(rows * dim);
  for (std::size_t i = 2; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    auto f = split(lines[i], ',');
    if (f.size() != dim + 3) {
      throw ValidationError("feature line " + std::to_string(i + 1) + ": expected " + std::to_string(dim + 3) +
                            " fields, found " + std::to_string(f.size()));
    }
    fm.trajectory.push_back(parse_u64(f[1]));
    fm.window_start.push_back(parse_u64(f[2]));
    for (std::size_t j = 0; j < dim; ++j) values.push_back(parse_double(f[3 + j]));
  }
  if (fm.trajectory.size() != rows) {
    throw ValidationError("feature file has " + std::to_string(fm.trajectory.size()) + " rows, header says " +
                          std::to_string(rows));
  }
  fm.values = Tensor(Shape{rows, dim}, std::move(values));
  if (!fm.values.all_finite()) throw ValidationError("feature file contains non-finite values");
  return fm;
}

void write_features(const FeatureMatrix& features, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_features(features));
}

FeatureMatrix read_features(const std::filesystem::path& path) { return parse_features(read_file(path)); }

}  // namespace snf::predictor
