#include "snf/optim.hpp"

#include <cmath>

#include "snf/errors.hpp"

namespace snf {

OptimizerState make_optimizer_state(std::span<const Tensor> params, AdamConfig config) {
  if (config.learning_rate <= 0) throw ValidationError("learning rate must be positive");
  OptimizerState s;
  s.config = config;
  for (const Tensor& p : params) {
    s.first_moment.emplace_back(p.shape(), 0.0);
    s.second_moment.emplace_back(p.shape(), 0.0);
  }
  return s;
}

double global_norm(std::span<const Tensor> grads) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double v : g.data()) sq += v * v;
  return std::sqrt(sq);
}

void adamw_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimizerState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ValidationError("optimizer: parameter/gradient/state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape() || params[i].shape() != state.first_moment[i].shape()) {
      throw ValidationError("optimizer: shape mismatch for parameter " + std::to_string(i) + ": " +
                            shape_str(params[i].shape()) + " vs gradient " + shape_str(grads[i].shape()));
    }
  }
  const AdamConfig& c = state.config;
  double scale = 1.0;
  if (c.clip_norm > 0) {
    const double norm = global_norm(grads);
    if (!std::isfinite(norm)) throw NumericalError("optimizer: non-finite gradient norm");
    if (norm > c.clip_norm) scale = c.clip_norm / norm;
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto m = state.first_moment[i].data();
    auto v = state.second_moment[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j] * scale;
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= c.learning_rate * (mhat / (std::sqrt(vhat) + c.epsilon) + c.weight_decay * p[j]);
    }
  }
}

}  // namespace snf
