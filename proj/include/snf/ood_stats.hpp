#pragma once

// Two-sample statistics on scalar likelihood estimates: Welch t-tests and 1-D
// Wasserstein distances averaged over random subsamples, the OoD report built
// from them, and histogram/KDE exports for plotting.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace snf::ood {

// Student-t CDF through the regularized incomplete beta. Throws unless df > 0.
double t_cdf(double x, double df);

// Two-sided Welch test of equal means. Each sample needs >= 2 values. When
// both variances are zero the means decide: equal -> 1, different -> 0.
double welch_t_test(std::span<const double> a, std::span<const double> b);

// W1 = int_0^1 |F_a^-1(u) - F_b^-1(u)| du with empirical (step) quantiles.
double wasserstein_1d(std::span<const double> a, std::span<const double> b);

// One-sample Kolmogorov-Smirnov test against Uniform(0, 1); returns the
// asymptotic p-value with the Stephens small-sample correction.
double ks_uniform_pvalue(std::span<const double> values);

enum class Statistic { TTest, Wasserstein };

struct SubsampleTestConfig {
  std::size_t subsample = 100;
  std::size_t repetitions = 100;
  std::uint64_t seed = 1;
  unsigned threads = 1;
};

// Mean of `stat` over R repetitions, each on size-N subsamples drawn without
// replacement from both sides. Repetition r uses stream r of the seed. When
// reference and candidate are the same span (same data pointer and size) one
// subsample serves both sides, so p = 1 and W = 0 exactly.
double avg_subsampled_stat(std::span<const double> reference, std::span<const double> candidate,
                           const SubsampleTestConfig& config, Statistic stat);

struct LikelihoodSamples {
  std::string dataset;
  std::string estimator;
  std::vector<double> values;
};

// Mean of values per trajectory id, in order of first appearance.
std::vector<double> per_trajectory_means(std::span<const double> values, std::span<const std::size_t> trajectory);

struct ReportRow {
  std::string dataset;
  std::string estimator;
  double mean_p = 1.0;
  double mean_w = 0.0;
  bool ood = false;
};

struct TestReport {
  std::string reference;
  double alpha = 0.01;
  std::vector<std::string> datasets;    // row order
  std::vector<std::string> estimators;  // column order
  std::vector<ReportRow> rows;          // datasets x estimators, dataset-major

  const ReportRow& at(const std::string& dataset, const std::string& estimator) const;
  // Aligned tables: mean p-values, then mean Wasserstein distances.
  std::string to_text() const;
  std::string to_csv() const;
};

// Compares every dataset (the reference included) against the reference set
// of the same estimator. Throws ValidationError when the reference is absent,
// a (dataset, estimator) pair is missing or duplicated, or values are empty or
// non-finite.
TestReport ood_report(const std::vector<LikelihoodSamples>& sets, const std::string& reference,
                      const SubsampleTestConfig& config, double alpha = 0.01);

struct DensityCurve {
  std::string dataset;
  std::vector<double> bin_center, hist_density;
  std::vector<double> kde_x, kde_y;
  double bandwidth = 0.0;
};

// Per set: histogram on `bins` equal bins over the range shared by all sets,
// and a Gaussian KDE (Silverman bandwidth) sampled at `bins` points; both
// integrate to 1 over their grids.
std::vector<DensityCurve> density_export(const std::vector<LikelihoodSamples>& sets, std::size_t bins = 100);
// Columns: dataset,bin_center,hist_density,kde_x,kde_y
std::string density_csv(const std::vector<DensityCurve>& curves);

}  // namespace snf::ood
