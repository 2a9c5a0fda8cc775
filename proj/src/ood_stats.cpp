#include "snf/ood_stats.hpp"

#include <algorithm>
#include <boost/math/special_functions/beta.hpp>
#include <cmath>
#include <iterator>
#include <map>
#include <numbers>
#include <sstream>

#include "snf/errors.hpp"
#include "snf/parallel.hpp"
#include "snf/random.hpp"
#include "snf/text.hpp"

namespace snf::ood {

namespace {

// P(|T| >= |x|) for T ~ t(df). Uses whichever incomplete-beta argument keeps
// the result free of cancellation: the tail form far out, the central form
// near zero.
double t_two_sided_tail(double x, double df) {
  const double x2 = x * x;
  if (std::isinf(x)) return 0.0;
  const double z = x2 / (df + x2);
  if (z > 0.5) return boost::math::ibeta(df / 2.0, 0.5, df / (df + x2));
  return 1.0 - boost::math::ibeta(0.5, df / 2.0, z);
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double var_of(std::span<const double> v, double mean) {
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / static_cast<double>(v.size() - 1);
}

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw ValidationError(std::string(what) + ": non-finite value");
  }
}

// Linear-interpolation quantile of sorted data.
double quantile_sorted(const std::vector<double>& s, double q) {
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (pos - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

}  // namespace

double t_cdf(double x, double df) {
  if (!(df > 0.0) || std::isnan(x)) throw ValidationError("t_cdf: df must be > 0 and x a number");
  if (x == 0.0) return 0.5;
  if (std::isinf(df)) return 0.5 * std::erfc(-x / std::numbers::sqrt2);
  const double half_tail = 0.5 * t_two_sided_tail(x, df);
  return x < 0.0 ? half_tail : 1.0 - half_tail;
}

double welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw ValidationError("welch_t_test: each sample needs at least 2 values");
  require_finite(a, "welch_t_test");
  require_finite(b, "welch_t_test");
  const double ma = mean_of(a), mb = mean_of(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double va = var_of(a, ma) / na, vb = var_of(b, mb) / nb;
  const double se2 = va + vb;
  if (se2 == 0.0) return ma == mb ? 1.0 : 0.0;
  const double t = (ma - mb) / std::sqrt(se2);
  const double df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  return std::clamp(t_two_sided_tail(t, df), 0.0, 1.0);
}

double wasserstein_1d(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ValidationError("wasserstein_1d: empty sample");
  require_finite(a, "wasserstein_1d");
  require_finite(b, "wasserstein_1d");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const std::size_t na = sa.size(), nb = sb.size();
  if (na == nb) {
    double s = 0.0;
    for (std::size_t i = 0; i < na; ++i) s += std::abs(sa[i] - sb[i]);
    return s / static_cast<double>(na);
  }
  // Quantile steps of a sit at multiples of 1/na, of b at 1/nb; in units of
  // 1/(na nb) both are integers, so the merge is exact.
  std::size_t i = 0, j = 0, u = 0;
  double s = 0.0;
  while (i < na && j < nb) {
    const std::size_t next_a = (i + 1) * nb, next_b = (j + 1) * na;
    const std::size_t next = std::min(next_a, next_b);
    s += std::abs(sa[i] - sb[j]) * static_cast<double>(next - u);
    u = next;
    if (next == next_a) ++i;
    if (next == next_b) ++j;
  }
  return s / (static_cast<double>(na) * static_cast<double>(nb));
}

double ks_uniform_pvalue(std::span<const double> values) {
  if (values.empty()) throw ValidationError("ks_uniform_pvalue: empty sample");
  std::vector<double> s(values.begin(), values.end());
  std::sort(s.begin(), s.end());
  const double n = static_cast<double>(s.size());
  double d = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double u = std::clamp(s[i], 0.0, 1.0);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - u, u - static_cast<double>(i) / n});
  }
  const double sn = std::sqrt(n);
  const double lambda = (sn + 0.12 + 0.11 / sn) * d;
  if (lambda < 1e-3) return 1.0;
  // Q_KS(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2)
  double q = 0.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    q += (k % 2 == 1 ? 2.0 : -2.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(q, 0.0, 1.0);
}

double avg_subsampled_stat(std::span<const double> reference, std::span<const double> candidate,
                           const SubsampleTestConfig& config, Statistic stat) {
  const std::size_t n = config.subsample;
  if (config.repetitions == 0) throw ValidationError("subsample test: repetitions must be >= 1");
  if (n < 2) throw ValidationError("subsample test: subsample size must be >= 2");
  if (n > reference.size() || n > candidate.size()) {
    throw ValidationError("subsample test: subsample size " + std::to_string(n) + " exceeds a dataset of size " +
                          std::to_string(std::min(reference.size(), candidate.size())));
  }
  const bool self = reference.data() == candidate.data() && reference.size() == candidate.size();
  std::vector<double> results(config.repetitions);
  parallel_for(config.repetitions, config.threads, [&](std::size_t r) {
    Rng rng = make_rng(config.seed, r);
    std::vector<double> sa, sb;
    sa.reserve(n);
    std::sample(reference.begin(), reference.end(), std::back_inserter(sa), n, rng);
    if (self) {
      sb = sa;
    } else {
      sb.reserve(n);
      std::sample(candidate.begin(), candidate.end(), std::back_inserter(sb), n, rng);
    }
    results[r] = stat == Statistic::TTest ? welch_t_test(sa, sb) : wasserstein_1d(sa, sb);
  });
  double s = 0.0;
  for (double v : results) s += v;
  return s / static_cast<double>(results.size());
}

std::vector<double> per_trajectory_means(std::span<const double> values, std::span<const std::size_t> trajectory) {
  if (values.size() != trajectory.size()) throw ValidationError("per_trajectory_means: size mismatch");
  std::vector<std::size_t> order;
  std::map<std::size_t, std::pair<double, std::size_t>> acc;
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto [it, inserted] = acc.try_emplace(trajectory[i], 0.0, 0);
    if (inserted) order.push_back(trajectory[i]);
    it->second.first += values[i];
    it->second.second += 1;
  }
  std::vector<double> out;
  out.reserve(order.size());
  for (std::size_t id : order) {
    const auto& [sum, count] = acc.at(id);
    out.push_back(sum / static_cast<double>(count));
  }
  return out;
}

const ReportRow& TestReport::at(const std::string& dataset, const std::string& estimator) const {
  for (const auto& row : rows) {
    if (row.dataset == dataset && row.estimator == estimator) return row;
  }
  throw ValidationError("report has no row for " + dataset + "/" + estimator);
}

std::string TestReport::to_text() const {
  std::size_t w0 = std::string("dataset").size();
  for (const auto& d : datasets) w0 = std::max(w0, d.size());
  std::size_t wc = 10;
  for (const auto& e : estimators) wc = std::max(wc, e.size());
  std::ostringstream out;
  auto table = [&](const std::string& title, bool pvalues) {
    out << title << "\n" << pad("dataset", w0 + 2);
    for (const auto& e : estimators) out << pad(e, wc + 2);
    out << "\n";
    for (std::size_t d = 0; d < datasets.size(); ++d) {
      out << pad(datasets[d], w0 + 2);
      for (std::size_t e = 0; e < estimators.size(); ++e) {
        const auto& row = rows[d * estimators.size() + e];
        const std::string cell = pvalues ? fmt_pvalue(row.mean_p) + (row.ood ? " *" : "") : fmt_fixed(row.mean_w, 2);
        out << pad(cell, wc + 2);
      }
      out << "\n";
    }
  };
  table("mean p-value vs " + reference + " (* = OoD at alpha " + fmt_double(alpha) + ")", true);
  out << "\n";
  table("mean Wasserstein distance vs " + reference, false);
  return out.str();
}

std::string TestReport::to_csv() const {
  std::ostringstream out;
  out << "reference,dataset,estimator,mean_p,mean_w,ood\n";
  for (const auto& row : rows) {
    out << reference << "," << row.dataset << "," << row.estimator << "," << fmt_double(row.mean_p) << ","
        << fmt_double(row.mean_w) << "," << (row.ood ? 1 : 0) << "\n";
  }
  return out.str();
}

TestReport ood_report(const std::vector<LikelihoodSamples>& sets, const std::string& reference,
                      const SubsampleTestConfig& config, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("ood_report: alpha must be in (0, 1)");
  TestReport report;
  report.reference = reference;
  report.alpha = alpha;
  std::map<std::pair<std::string, std::string>, const LikelihoodSamples*> index;
  for (const auto& s : sets) {
    if (s.values.empty()) throw ValidationError("ood_report: empty likelihood set " + s.dataset + "/" + s.estimator);
    require_finite(s.values, "ood_report");
    if (!index.emplace(std::make_pair(s.dataset, s.estimator), &s).second) {
      throw ValidationError("ood_report: duplicate likelihood set " + s.dataset + "/" + s.estimator);
    }
    if (std::find(report.datasets.begin(), report.datasets.end(), s.dataset) == report.datasets.end()) {
      report.datasets.push_back(s.dataset);
    }
    if (std::find(report.estimators.begin(), report.estimators.end(), s.estimator) == report.estimators.end()) {
      report.estimators.push_back(s.estimator);
    }
  }
  if (std::find(report.datasets.begin(), report.datasets.end(), reference) == report.datasets.end()) {
    throw ValidationError("ood_report: reference dataset '" + reference + "' not present");
  }
  for (const auto& d : report.datasets) {
    for (const auto& e : report.estimators) {
      if (!index.count({d, e})) throw ValidationError("ood_report: missing " + e + " scores for dataset " + d);
    }
  }
  std::uint64_t cell = 0;
  for (const auto& d : report.datasets) {
    for (const auto& e : report.estimators) {
      const auto& ref = index.at({reference, e})->values;
      const auto& cand = index.at({d, e})->values;
      SubsampleTestConfig cell_config = config;
      cell_config.seed = derive_seed(config.seed, cell++);
      ReportRow row;
      row.dataset = d;
      row.estimator = e;
      // The reference row passes the same span twice, which selects the
      // identical-subsample path.
      row.mean_p = avg_subsampled_stat(ref, cand, cell_config, Statistic::TTest);
      row.mean_w = avg_subsampled_stat(ref, cand, cell_config, Statistic::Wasserstein);
      row.ood = row.mean_p < alpha;
      report.rows.push_back(std::move(row));
    }
  }
  return report;
}

std::vector<DensityCurve> density_export(const std::vector<LikelihoodSamples>& sets, std::size_t bins) {
  if (sets.empty() || bins == 0) throw ValidationError("density_export: need at least one set and one bin");
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& s : sets) {
    if (s.values.empty()) throw ValidationError("density_export: empty set " + s.dataset);
    require_finite(s.values, "density_export");
    const auto [mn, mx] = std::minmax_element(s.values.begin(), s.values.end());
    lo = std::min(lo, *mn);
    hi = std::max(hi, *mx);
  }
  if (hi == lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / static_cast<double>(bins);
  std::vector<DensityCurve> out;
  for (const auto& s : sets) {
    DensityCurve c;
    c.dataset = s.dataset;
    const double n = static_cast<double>(s.values.size());
    std::vector<double> counts(bins, 0.0);
    for (double v : s.values) {
      const auto b = static_cast<std::size_t>(std::clamp(std::floor((v - lo) / width), 0.0, static_cast<double>(bins - 1)));
      counts[b] += 1.0;
    }
    for (std::size_t b = 0; b < bins; ++b) {
      c.bin_center.push_back(lo + (static_cast<double>(b) + 0.5) * width);
      c.hist_density.push_back(counts[b] / (n * width));
    }

    // Silverman: 0.9 min(sd, IQR/1.34) n^(-1/5), falling back to sd when the
    // IQR vanishes and to the bin width for a constant sample.
    std::vector<double> sorted(s.values);
    std::sort(sorted.begin(), sorted.end());
    const double m = mean_of(sorted);
    const double sd = sorted.size() > 1 ? std::sqrt(var_of(sorted, m)) : 0.0;
    const double iqr = (quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25)) / 1.34;
    double spread = iqr > 0.0 ? std::min(sd, iqr) : sd;
    double h = 0.9 * spread * std::pow(n, -0.2);
    if (!(h > 0.0)) h = width;
    c.bandwidth = h;

    const double x0 = lo - 3.0 * h, x1 = hi + 3.0 * h;
    const double step = bins > 1 ? (x1 - x0) / static_cast<double>(bins - 1) : 0.0;
    const double norm = 1.0 / (n * h * std::sqrt(2.0 * std::numbers::pi));
    for (std::size_t g = 0; g < bins; ++g) {
      const double x = bins > 1 ? x0 + step * static_cast<double>(g) : 0.5 * (x0 + x1);
      double acc = 0.0;
      for (double v : sorted) {
        const double u = (x - v) / h;
        acc += std::exp(-0.5 * u * u);
      }
      c.kde_x.push_back(x);
      c.kde_y.push_back(acc * norm);
    }
    // Renormalize so the trapezoid area over the sampled grid is exactly 1.
    double area = 0.0;
    for (std::size_t g = 1; g < bins; ++g) area += 0.5 * (c.kde_y[g] + c.kde_y[g - 1]) * step;
    if (area > 0.0) {
      for (double& y : c.kde_y) y /= area;
    }
    out.push_back(std::move(c));
  }
  return out;
}

std::string density_csv(const std::vector<DensityCurve>& curves) {
  std::ostringstream out;
  out << "dataset,bin_center,hist_density,kde_x,kde_y\n";
  for (const auto& c : curves) {
    for (std::size_t i = 0; i < c.bin_center.size(); ++i) {
      out << c.dataset << "," << fmt_double(c.bin_center[i]) << "," << fmt_double(c.hist_density[i]) << ","
          << fmt_double(c.kde_x[i]) << "," << fmt_double(c.kde_y[i]) << "\n";
    }
  }
  return out.str();
}

}  // namespace snf::ood
