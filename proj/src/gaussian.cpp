#include "snf/gaussian.hpp"

#include <cmath>

#include "snf/errors.hpp"

namespace snf {

double gaussian_log_density(std::span<const double> x, std::span<const double> mean, std::span<const double> log_std) {
  if (x.size() != mean.size() || x.size() != log_std.size()) {
    throw ValidationError("gaussian_log_density: length mismatch (" + std::to_string(x.size()) + ", " +
                          std::to_string(mean.size()) + ", " + std::to_string(log_std.size()) + ")");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = (x[i] - mean[i]) * std::exp(-log_std[i]);
    s += -kHalfLog2Pi - log_std[i] - 0.5 * z * z;
  }
  return s;
}

Var gaussian_log_density_rows(Var x, Var mean, Var log_std) {
  Var z = (x - mean) * exp(-log_std);
  Var per = (-0.5) * square(z) - log_std;
  const double d = static_cast<double>(x.cols());
  return sum(per, 1) - kHalfLog2Pi * d;
}

Var standard_normal_log_density_rows(Var x) {
  const double d = static_cast<double>(x.cols());
  return sum(square(x), 1) * (-0.5) - kHalfLog2Pi * d;
}

}  // namespace snf
