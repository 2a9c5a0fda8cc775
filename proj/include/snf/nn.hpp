#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "snf/autodiff.hpp"
#include "snf/random.hpp"
#include "snf/tensor.hpp"

namespace snf {

// Owns named trainable tensors. Modules refer to parameters by index and see
// them as Vars through a per-tape binding.
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor init);
  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }
  Tensor& value(std::size_t i) { return values_[i]; }
  std::vector<Tensor>& values() { return values_; }
  const std::vector<Tensor>& values() const { return values_; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t index_of(const std::string& name) const;
  std::size_t scalar_count() const;

  std::vector<Var> bind(Tape& tape, bool requires_grad) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
Tensor uniform_init(Rng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in, double gain = 1.0);

struct Linear {
  std::size_t weight = 0;  // (in x out)
  std::size_t bias = 0;    // (1 x out)
  std::size_t in = 0;
  std::size_t out = 0;

  static Linear create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                       double gain = 1.0);
  Var forward(const std::vector<Var>& p, Var x) const;
};

// ReLU MLP: in -> hidden... -> out, linear output layer.
struct Mlp {
  std::vector<Linear> layers;

  static Mlp create(ParamStore& store, const std::string& name, std::size_t in, const std::vector<std::size_t>& hidden,
                    std::size_t out, Rng& rng, double output_gain = 1.0);
  Var forward(const std::vector<Var>& p, Var x) const;
};

}  // namespace snf
