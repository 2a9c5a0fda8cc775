#pragma once

#include <numbers>
#include <span>

#include "snf/autodiff.hpp"

namespace snf {

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

// sum_i  -0.5 log(2 pi) - log_std_i - 0.5 ((x_i - mean_i) / exp(log_std_i))^2
double gaussian_log_density(std::span<const double> x, std::span<const double> mean, std::span<const double> log_std);

// Row-wise diagonal Gaussian log density on the tape. mean/log_std broadcast
// against x (rows x d); result is (rows x 1).
Var gaussian_log_density_rows(Var x, Var mean, Var log_std);

// Standard normal log density summed over each row; (rows x 1).
Var standard_normal_log_density_rows(Var x);

}  // namespace snf
