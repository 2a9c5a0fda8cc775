#include "snf/nn.hpp"

#include <cmath>

#include "snf/errors.hpp"

namespace snf {

std::size_t ParamStore::add(std::string name, Tensor init) {
  names_.push_back(std::move(name));
  values_.push_back(std::move(init));
  return values_.size() - 1;
}

std::size_t ParamStore::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  throw ValidationError("no parameter named '" + name + "'");
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const Tensor& t : values_) n += t.size();
  return n;
}

std::vector<Var> ParamStore::bind(Tape& tape, bool requires_grad) const {
  std::vector<Var> out;
  out.reserve(values_.size());
  for (const Tensor& t : values_) out.push_back(tape.leaf(t, requires_grad));
  return out;
}

Tensor uniform_init(Rng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in, double gain) {
  Tensor t(Shape{rows, cols});
  const double bound = fan_in ? gain / std::sqrt(static_cast<double>(fan_in)) : 0.0;
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& v : t.data()) v = bound > 0 ? u(rng) : 0.0;
  return t;
}

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                      double gain) {
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = store.add(name + ".weight", uniform_init(rng, in, out, in, gain));
  l.bias = store.add(name + ".bias", uniform_init(rng, 1, out, in, gain));
  return l;
}

Var Linear::forward(const std::vector<Var>& p, Var x) const {
  if (x.cols() != in) {
    throw ValidationError("linear layer expects " + std::to_string(in) + " inputs, got " + std::to_string(x.cols()));
  }
  return affine(x, p[weight], p[bias]);
}

Mlp Mlp::create(ParamStore& store, const std::string& name, std::size_t in, const std::vector<std::size_t>& hidden,
                std::size_t out, Rng& rng, double output_gain) {
  Mlp m;
  std::size_t prev = in;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    m.layers.push_back(Linear::create(store, name + ".l" + std::to_string(i), prev, hidden[i], rng));
    prev = hidden[i];
  }
  m.layers.push_back(Linear::create(store, name + ".out", prev, out, rng, output_gain));
  return m;
}

Var Mlp::forward(const std::vector<Var>& p, Var x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i].forward(p, h);
    if (i + 1 < layers.size()) h = relu(h);
  }
  return h;
}

}  // namespace snf
