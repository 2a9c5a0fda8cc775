#include "snf/flows.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include <Eigen/Core>

#include "snf/errors.hpp"
#include "snf/gaussian.hpp"
#include "snf/optim.hpp"
#include "snf/parallel.hpp"

namespace snf::flows {

namespace {

constexpr double kMinDerivative = 1e-3;
constexpr double kLogStdBound = 7.0;
constexpr std::size_t kEvalChunk = 512;

double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }

std::vector<double> softmax_scaled(std::span<const double> logits, double total) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += out[i] = std::exp(logits[i] - m);
  for (double& v : out) v *= total / z;
  return out;
}

// Left knots: knots[0] = -B, knots[k] = -B + sum_{j<k} sizes[j].
std::vector<double> knots_of(const std::vector<double>& sizes, double bound) {
  std::vector<double> k(sizes.size() + 1, -bound);
  for (std::size_t i = 0; i < sizes.size(); ++i) k[i + 1] = k[i] + sizes[i];
  return k;
}

// Bin k with knots[k] <= v, clamped to [0, K-1]; interior knots only.
std::size_t find_bin(std::span<const double> knots, double v) {
  const std::size_t K = knots.size() - 1;
  const auto it = std::upper_bound(knots.begin() + 1, knots.begin() + static_cast<std::ptrdiff_t>(K), v);
  return static_cast<std::size_t>(it - (knots.begin() + 1));
}

std::vector<std::size_t> iota(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> v(hi - lo);
  std::iota(v.begin(), v.end(), lo);
  return v;
}

Tensor take_rows(const Tensor& t, std::span<const std::size_t> rows) {
  const std::size_t c = t.cols();
  Tensor out(Shape{rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * c), c,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return out;
}

Tensor take_cols(const Tensor& t, std::span<const std::size_t> cols) {
  Tensor out(Shape{t.rows(), cols.size()});
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t j = 0; j < cols.size(); ++j) out.at(r, j) = t.at(r, cols[j]);
  return out;
}

Tensor concat(const Tensor& a, const Tensor& b) {
  Tensor out(Shape{a.rows(), a.cols() + b.cols()});
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t j = 0; j < a.cols(); ++j) out.at(r, j) = a.at(r, j);
    for (std::size_t j = 0; j < b.cols(); ++j) out.at(r, a.cols() + j) = b.at(r, j);
  }
  return out;
}

Tensor mlp_eval(const Mlp& mlp, const ParamStore& params, const Tensor& x) {
  Tape tape;
  auto p = params.bind(tape, false);
  return mlp.forward(p, tape.constant(x)).value();
}

std::size_t raw_width(std::size_t bins) { return 3 * bins - 1; }

std::vector<std::size_t> json_indices(const nlohmann::json& j) { return j.get<std::vector<std::size_t>>(); }

}  // namespace

double identity_derivative_raw() { return std::log(std::expm1(1.0 - kMinDerivative)); }

SplineParams SplineParams::from_raw(std::span<const double> raw, std::size_t K, double bound) {
  if (raw.size() != raw_width(K)) throw ValidationError("spline expects " + std::to_string(raw_width(K)) + " raw values");
  SplineParams s;
  s.bound = bound;
  s.widths = softmax_scaled(raw.subspan(0, K), 2 * bound);
  s.heights = softmax_scaled(raw.subspan(K, K), 2 * bound);
  s.derivatives.assign(K + 1, 1.0);
  for (std::size_t i = 0; i + 1 < K; ++i) s.derivatives[i + 1] = softplus(raw[2 * K + i]) + kMinDerivative;
  return s;
}

SplineParams SplineParams::identity(std::size_t K, double bound) {
  std::vector<double> raw(raw_width(K), 0.0);
  std::fill(raw.begin() + static_cast<std::ptrdiff_t>(2 * K), raw.end(), identity_derivative_raw());
  return from_raw(raw, K, bound);
}

SplineEval rq_spline_inverse(double y, const SplineParams& sp) {
  const double B = sp.bound;
  if (y < -B || y > B) return {y, 0.0};
  const auto yk = knots_of(sp.widths, B), xk = knots_of(sp.heights, B);
  const std::size_t k = find_bin(yk, y);
  const double w = sp.widths[k], h = sp.heights[k], d0 = sp.derivatives[k], d1 = sp.derivatives[k + 1];
  const double s = h / w, xi = (y - yk[k]) / w, om = xi * (1 - xi);
  const double den = s + (d1 + d0 - 2 * s) * om;
  const double x = xk[k] + h * (s * xi * xi + d0 * om) / den;
  const double dnum = s * s * (d1 * xi * xi + 2 * s * om + d0 * (1 - xi) * (1 - xi));
  return {x, std::log(dnum) - 2 * std::log(den)};
}

SplineEval rq_spline_forward(double x, const SplineParams& sp) {
  const double B = sp.bound;
  if (x < -B || x > B) return {x, 0.0};
  const auto yk = knots_of(sp.widths, B), xk = knots_of(sp.heights, B);
  const std::size_t k = find_bin(xk, x);
  const double w = sp.widths[k], h = sp.heights[k], d0 = sp.derivatives[k], d1 = sp.derivatives[k + 1];
  const double s = h / w, dx = x - xk[k], e = d1 + d0 - 2 * s;
  const double a = h * (s - d0) + dx * e;
  const double b = h * d0 - dx * e;
  const double c = -s * dx;
  const double disc = std::max(b * b - 4 * a * c, 0.0);
  double xi = std::clamp(2 * c / (-b - std::sqrt(disc)), 0.0, 1.0);
  // One Newton step on the closed-form direction removes the cancellation error
  // of the root formula in steep bins.
  {
    const double om = xi * (1 - xi), den = s + e * om;
    const double g = xk[k] + h * (s * xi * xi + d0 * om) / den - x;
    const double slope = h * s * s * (d1 * xi * xi + 2 * s * om + d0 * (1 - xi) * (1 - xi)) / (den * den);
    if (slope > 0) xi = std::clamp(xi - g / slope, 0.0, 1.0);
  }
  const double y = yk[k] + xi * w;
  const double om = xi * (1 - xi);
  const double den = s + e * om;
  const double dnum = s * s * (d1 * xi * xi + 2 * s * om + d0 * (1 - xi) * (1 - xi));
  return {y, 2 * std::log(den) - std::log(dnum)};
}

namespace {

// Forward-mode dual number over the 7 local spline inputs
// (y, y_k, w_k, x_k, h_k, d_k, d_k+1); gives exact local partials.
struct Dual {
  double v = 0.0;
  std::array<double, 7> d{};
};
Dual operator+(Dual a, const Dual& b) {
  a.v += b.v;
  for (std::size_t i = 0; i < 7; ++i) a.d[i] += b.d[i];
  return a;
}
Dual operator-(Dual a, const Dual& b) {
  a.v -= b.v;
  for (std::size_t i = 0; i < 7; ++i) a.d[i] -= b.d[i];
  return a;
}
Dual operator*(const Dual& a, const Dual& b) {
  Dual r;
  r.v = a.v * b.v;
  for (std::size_t i = 0; i < 7; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}
Dual operator/(const Dual& a, const Dual& b) {
  Dual r;
  r.v = a.v / b.v;
  for (std::size_t i = 0; i < 7; ++i) r.d[i] = (a.d[i] - r.v * b.d[i]) / b.v;
  return r;
}
Dual operator*(double c, Dual a) {
  a.v *= c;
  for (double& x : a.d) x *= c;
  return a;
}
Dual operator-(double c, Dual a) {
  a.v = c - a.v;
  for (double& x : a.d) x = -x;
  return a;
}
Dual log(const Dual& a) {
  Dual r;
  r.v = std::log(a.v);
  for (std::size_t i = 0; i < 7; ++i) r.d[i] = a.d[i] / a.v;
  return r;
}

template <class T>
void rq_local(const T& y, const T& yk, const T& w, const T& xk, const T& h, const T& d0, const T& d1, T& x, T& logd) {
  using std::log;
  const T xi = (y - yk) / w;
  const T s = h / w;
  const T om = xi * (1.0 - xi);
  const T den = s + (d1 + d0 - 2.0 * s) * om;
  x = xk + h * (s * xi * xi + d0 * om) / den;
  const T dnum = s * s * (d1 * xi * xi + 2.0 * s * om + d0 * (1.0 - xi) * (1.0 - xi));
  logd = log(dnum) - 2.0 * log(den);
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Softmax into a reused buffer; Eigen's packet exp keeps the 2K exponentials
// per element from dominating flow evaluation.
void unit_softmax(const double* logits, std::size_t K, AlignedVector& out) {
  out.resize(K);
  Eigen::Map<const Eigen::ArrayXd> l(logits, static_cast<Eigen::Index>(K));
  Eigen::Map<Eigen::ArrayXd> o(out.data(), static_cast<Eigen::Index>(K));
  o = (l - l.maxCoeff()).exp();
  o /= o.sum();
}

// Everything about one element's spline that both passes need.
struct ElementSpline {
  AlignedVector sw, sh;  // softmax of width / height logits
  double yk = 0, xk = 0, w = 0, h = 0, d0 = 1, d1 = 1;
  std::size_t bin = 0;
  bool inside = false;

  void evaluate(double y, const double* raw, std::size_t K, double B) {
    inside = y >= -B && y <= B;
    if (!inside) return;
    unit_softmax(raw, K, sw);
    unit_softmax(raw + K, K, sh);
    // Left knot of bin k is -B + 2B * sum_{j<k} sw_j; the last bin absorbs rounding.
    double acc_w = -B, acc_h = -B;
    bin = K - 1;
    for (std::size_t k = 0; k + 1 < K; ++k) {
      const double next = acc_w + 2 * B * sw[k];
      if (y < next) {
        bin = k;
        break;
      }
      acc_w = next;
      acc_h += 2 * B * sh[k];
    }
    yk = acc_w;
    xk = acc_h;
    w = 2 * B * sw[bin];
    h = 2 * B * sh[bin];
    d0 = bin > 0 ? softplus(raw[2 * K + bin - 1]) + kMinDerivative : 1.0;
    d1 = bin + 1 < K ? softplus(raw[2 * K + bin]) + kMinDerivative : 1.0;
  }
};

}  // namespace

SplineVars rq_spline_inverse(Var y, Var raw, std::size_t K, double B) {
  Tape& tape = *y.tape();
  const std::size_t M = y.rows();
  const std::size_t P = raw_width(K);
  if (y.cols() != 1 || raw.rows() != M || raw.cols() != P) {
    throw ValidationError("rq_spline_inverse: y " + shape_str(y.shape()) + " and raw " + shape_str(raw.shape()) +
                          " do not match K=" + std::to_string(K));
  }
  // One fused node holding [x | log dx/dy] per element.
  Tensor out(Shape{M, 2});
  {
    const Tensor& yv = y.value();
    const Tensor& rv = raw.value();
    ElementSpline e;
    for (std::size_t m = 0; m < M; ++m) {
      e.evaluate(yv[m], rv.data().data() + m * P, K, B);
      if (!e.inside) {
        out.at(m, 0) = yv[m];
        continue;
      }
      rq_local(yv[m], e.yk, e.w, e.xk, e.h, e.d0, e.d1, out.at(m, 0), out.at(m, 1));
    }
  }
  const std::size_t iy = y.id(), ir = raw.id();
  Var node = tape.record("rq_spline", std::move(out), {iy, ir}, [iy, ir, M, K, B, P](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& yv = t.value(iy);
    const Tensor& rv = t.value(ir);
    const bool want_y = t.requires_grad(iy), want_raw = t.requires_grad(ir);
    Tensor gy(Shape{M, 1});
    Tensor graw(Shape{M, P});
    ElementSpline e;
    std::vector<double> gs(K);
    for (std::size_t m = 0; m < M; ++m) {
      const double gx = g.at(m, 0), gl = g.at(m, 1);
      const double* r = rv.data().data() + m * P;
      e.evaluate(yv[m], r, K, B);
      if (!e.inside) {
        gy[m] = gx;
        continue;
      }
      Dual in[7];
      const double vals[7] = {yv[m], e.yk, e.w, e.xk, e.h, e.d0, e.d1};
      for (std::size_t i = 0; i < 7; ++i) {
        in[i].v = vals[i];
        in[i].d[i] = 1.0;
      }
      Dual x, logd;
      rq_local(in[0], in[1], in[2], in[3], in[4], in[5], in[6], x, logd);
      double gv[7];
      for (std::size_t i = 0; i < 7; ++i) gv[i] = gx * x.d[i] + gl * logd.d[i];
      gy[m] = gv[0];
      if (!want_raw) continue;
      double* gr = graw.data().data() + m * P;
      // Knot and bin-size gradients through the scaled softmax:
      // dL/ds_j = 2B (g_knot [j < bin] + g_size [j == bin]).
      auto through_softmax = [&](const AlignedVector& sm, double g_knot, double g_size, double* dst) {
        double dot = 0.0;
        for (std::size_t j = 0; j < K; ++j) {
          gs[j] = 2 * B * ((j < e.bin ? g_knot : 0.0) + (j == e.bin ? g_size : 0.0));
          dot += sm[j] * gs[j];
        }
        for (std::size_t j = 0; j < K; ++j) dst[j] = sm[j] * (gs[j] - dot);
      };
      through_softmax(e.sw, gv[1], gv[2], gr);
      through_softmax(e.sh, gv[3], gv[4], gr + K);
      if (e.bin > 0) gr[2 * K + e.bin - 1] += gv[5] * sigmoid(r[2 * K + e.bin - 1]);
      if (e.bin + 1 < K) gr[2 * K + e.bin] += gv[6] * sigmoid(r[2 * K + e.bin]);
    }
    if (want_y) t.accumulate(iy, std::move(gy));
    if (want_raw) t.accumulate(ir, std::move(graw));
  });
  static const std::size_t kValueCol[1] = {0}, kLogCol[1] = {1};
  return {select_cols(node, kValueCol), select_cols(node, kLogCol)};
}

CouplingLayer make_coupling(ParamStore& store, const std::string& name, std::size_t dim, bool odd, std::size_t cond_dim,
                            const FlowConfig& config, Rng& rng) {
  if (dim == 0) throw ValidationError("coupling layer needs at least one dimension");
  CouplingLayer c;
  c.dim = dim;
  c.cond_dim = cond_dim;
  for (std::size_t i = 0; i < dim; ++i) {
    const bool transformed = dim == 1 || (i % 2 == 1) == odd;
    (transformed ? c.transform : c.pass).push_back(i);
  }
  const std::size_t in = std::max<std::size_t>(c.pass.size() + cond_dim, 1);
  const std::size_t P = raw_width(config.bins);
  c.conditioner = Mlp::create(store, name, in, config.hidden, c.transform.size() * P, rng, config.init_scale);
  // Output bias = identity spline, so the layer starts as a near-identity map.
  Tensor& bias = store.value(c.conditioner.layers.back().bias);
  for (std::size_t t = 0; t < c.transform.size(); ++t)
    for (std::size_t j = 0; j < P; ++j) bias[t * P + j] = j >= 2 * config.bins ? identity_derivative_raw() : 0.0;
  return c;
}

namespace {

Var conditioner_input(const CouplingLayer& layer, Var y, Var cond) {
  std::vector<Var> parts;
  if (!layer.pass.empty()) parts.push_back(select_cols(y, layer.pass));
  if (layer.cond_dim > 0) parts.push_back(cond);
  if (parts.empty()) return y.tape()->constant(Tensor(Shape{y.rows(), 1}));
  return parts.size() == 1 ? parts[0] : concat_cols(parts);
}

Tensor conditioner_input(const CouplingLayer& layer, const Tensor& z, const Tensor& cond) {
  Tensor pass = take_cols(z, layer.pass);
  if (layer.cond_dim > 0) pass = layer.pass.empty() ? cond : concat(pass, cond);
  if (pass.cols() == 0) return Tensor(Shape{z.rows(), 1});
  return pass;
}

}  // namespace

LayerResult coupling_inverse(const CouplingLayer& layer, const FlowConfig& config, const std::vector<Var>& p, Var y,
                             Var cond) {
  if (y.cols() != layer.dim) {
    throw ValidationError("coupling layer expects " + std::to_string(layer.dim) + " dims, got " +
                          std::to_string(y.cols()));
  }
  if (layer.cond_dim > 0 && (!cond.valid() || cond.cols() != layer.cond_dim || cond.rows() != y.rows())) {
    throw ValidationError("coupling layer conditioning input has the wrong shape");
  }
  const std::size_t n = y.rows(), t = layer.transform.size(), P = raw_width(config.bins);
  Var raw = reshape(layer.conditioner.forward(p, conditioner_input(layer, y, cond)), Shape{n * t, P});
  Var yt = reshape(select_cols(y, layer.transform), Shape{n * t, 1});
  SplineVars s = rq_spline_inverse(yt, raw, config.bins, config.bound);
  Var zt = reshape(s.value, Shape{n, t});
  Var logdet = sum(reshape(s.log_deriv, Shape{n, t}), 1);
  if (layer.pass.empty()) return {zt, logdet};
  // Columns of [pass | transformed] back into original order.
  std::vector<std::size_t> order(layer.dim);
  for (std::size_t i = 0; i < layer.pass.size(); ++i) order[layer.pass[i]] = i;
  for (std::size_t i = 0; i < t; ++i) order[layer.transform[i]] = layer.pass.size() + i;
  return {select_cols(concat_cols({select_cols(y, layer.pass), zt}), order), logdet};
}

Tensor coupling_forward(const CouplingLayer& layer, const FlowConfig& config, const ParamStore& params, const Tensor& z,
                        const Tensor& cond) {
  const std::size_t n = z.rows(), t = layer.transform.size(), P = raw_width(config.bins);
  const Tensor raw = mlp_eval(layer.conditioner, params, conditioner_input(layer, z, cond));
  Tensor y = z;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < t; ++i) {
      const auto sp = SplineParams::from_raw(raw.data().subspan(r * t * P + i * P, P), config.bins, config.bound);
      y.at(r, layer.transform[i]) = rq_spline_forward(z.at(r, layer.transform[i]), sp).value;
    }
  }
  return y;
}

FlowConfig bnf_config(FlowConfig config) {
  config.surjection_layers.clear();
  return config;
}

FlowStack FlowStack::create(std::size_t input_dim, const FlowConfig& config) {
  if (input_dim == 0) throw ValidationError("flow input dimension must be positive");
  if (config.bins < 2 || !(config.bound > 0)) throw ValidationError("flow needs >= 2 bins and a positive bound");
  if (!(config.drop_fraction >= 0 && config.drop_fraction < 1)) throw ValidationError("drop fraction must be in [0, 1)");
  for (std::size_t s : config.surjection_layers) {
    if (s < 1 || s > config.layers) throw ValidationError("surjection layer index out of range");
  }
  FlowStack st;
  st.config_ = config;
  st.input_dim_ = input_dim;
  st.shift_.assign(input_dim, 0.0);
  st.scale_.assign(input_dim, 1.0);
  Rng rng = make_rng(config.seed, 0xf1);
  std::size_t dim = input_dim;
  bool odd = false;
  for (std::size_t k = 1; k <= config.layers; ++k) {
    const std::string name = "layer" + std::to_string(k);
    const bool surj = std::find(config.surjection_layers.begin(), config.surjection_layers.end(), k) !=
                      config.surjection_layers.end();
    const std::size_t drop = surj ? static_cast<std::size_t>(std::lround(config.drop_fraction * double(dim))) : 0;
    Layer layer;
    if (drop == 0) {
      layer.kind = Layer::Kind::Coupling;
      layer.coupling = make_coupling(st.params_, name, dim, odd, 0, config, rng);
      odd = !odd;
    } else {
      layer.kind = Layer::Kind::Surjection;
      SliceSurjection& s = layer.surjection;
      s.dim = dim;
      auto perm = random_permutation(rng, dim);
      s.dropped.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(drop));
      s.kept.assign(perm.begin() + static_cast<std::ptrdiff_t>(drop), perm.end());
      std::sort(s.dropped.begin(), s.dropped.end());
      std::sort(s.kept.begin(), s.kept.end());
      const std::size_t q = s.kept.size();
      s.permutation = random_permutation(rng, q);
      s.inner = make_coupling(st.params_, name + ".inner", q, false, drop, config, rng);
      s.decoder = Mlp::create(st.params_, name + ".decoder", q, config.hidden, 2 * drop, rng, config.init_scale);
      dim = q;
      odd = false;
    }
    st.layers_.push_back(std::move(layer));
  }
  return st;
}

bool FlowStack::is_surjective() const {
  return std::any_of(layers_.begin(), layers_.end(), [](const Layer& l) { return l.kind == Layer::Kind::Surjection; });
}

void FlowStack::set_standardization(std::vector<double> shift, std::vector<double> scale) {
  if (shift.size() != input_dim_ || scale.size() != input_dim_) throw ValidationError("standardization size mismatch");
  for (double s : scale)
    if (!(s > 0)) throw ValidationError("standardization scale must be positive");
  shift_ = std::move(shift);
  scale_ = std::move(scale);
}

double FlowStack::standardization_log_det() const {
  double s = 0.0;
  for (double v : scale_) s -= std::log(v);
  return s;
}

LayerResult FlowStack::layer_inverse(std::size_t k, const std::vector<Var>& p, Var y) const {
  const Layer& layer = layers_.at(k);
  if (layer.kind == Layer::Kind::Coupling) return coupling_inverse(layer.coupling, config_, p, y, Var{});
  const SliceSurjection& s = layer.surjection;
  if (y.cols() != s.dim) {
    throw ValidationError("surjection expects " + std::to_string(s.dim) + " dims, got " + std::to_string(y.cols()));
  }
  Var y_minus = select_cols(y, s.dropped);
  LayerResult inner = coupling_inverse(s.inner, config_, p, select_cols(y, s.kept), y_minus);
  Var dec = s.decoder.forward(p, inner.z);
  const std::size_t nd = s.dropped.size();
  Var mean = select_cols(dec, iota(0, nd));
  Var log_std = clamp(select_cols(dec, iota(nd, 2 * nd)), -kLogStdBound, kLogStdBound);
  return {select_cols(inner.z, s.permutation), gaussian_log_density_rows(y_minus, mean, log_std) + inner.contribution};
}

Tensor FlowStack::surjection_forward(std::size_t k, const Tensor& z_out, const Tensor& y_minus) const {
  const Layer& layer = layers_.at(k);
  if (layer.kind != Layer::Kind::Surjection) throw ValidationError("layer " + std::to_string(k) + " is not a surjection");
  const SliceSurjection& s = layer.surjection;
  Tensor z(Shape{z_out.rows(), s.kept.size()});
  for (std::size_t r = 0; r < z.rows(); ++r)
    for (std::size_t j = 0; j < s.permutation.size(); ++j) z.at(r, s.permutation[j]) = z_out.at(r, j);
  const Tensor y_plus = coupling_forward(s.inner, config_, params_, z, y_minus);
  Tensor y(Shape{z.rows(), s.dim});
  for (std::size_t r = 0; r < z.rows(); ++r) {
    for (std::size_t i = 0; i < s.kept.size(); ++i) y.at(r, s.kept[i]) = y_plus.at(r, i);
    for (std::size_t i = 0; i < s.dropped.size(); ++i) y.at(r, s.dropped[i]) = y_minus.at(r, i);
  }
  return y;
}

Tensor FlowStack::layer_forward(std::size_t k, const Tensor& z, Rng& rng) const {
  const Layer& layer = layers_.at(k);
  if (layer.kind == Layer::Kind::Coupling) return coupling_forward(layer.coupling, config_, params_, z, Tensor{});
  const SliceSurjection& s = layer.surjection;
  Tensor zin(Shape{z.rows(), s.kept.size()});
  for (std::size_t r = 0; r < z.rows(); ++r)
    for (std::size_t j = 0; j < s.permutation.size(); ++j) zin.at(r, s.permutation[j]) = z.at(r, j);
  const Tensor dec = mlp_eval(s.decoder, params_, zin);
  const std::size_t nd = s.dropped.size();
  Tensor y_minus(Shape{z.rows(), nd});
  for (std::size_t r = 0; r < z.rows(); ++r) {
    for (std::size_t i = 0; i < nd; ++i) {
      const double log_std = std::clamp(dec.at(r, nd + i), -kLogStdBound, kLogStdBound);
      y_minus.at(r, i) = dec.at(r, i) + std::exp(log_std) * standard_normal(rng);
    }
  }
  return surjection_forward(k, z, y_minus);
}

Var FlowStack::log_prob(Tape& tape, const std::vector<Var>& p, Var y) const {
  if (y.cols() != input_dim_) {
    throw ValidationError("flow expects " + std::to_string(input_dim_) + " feature dims, found " +
                          std::to_string(y.cols()));
  }
  if (!y.value().all_finite()) throw ValidationError("flow input contains non-finite values");
  std::vector<double> inv_scale(input_dim_);
  for (std::size_t j = 0; j < input_dim_; ++j) inv_scale[j] = 1.0 / scale_[j];
  Var z = (y - tape.constant(Tensor::row(shift_))) * tape.constant(Tensor::row(inv_scale));
  Var total;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    LayerResult r;
    try {
      r = layer_inverse(k, p, z);
    } catch (const NumericalError& e) {
      throw NumericalError("flow layer " + std::to_string(k + 1) + ": " + e.what());
    }
    z = r.z;
    total = total.valid() ? total + r.contribution : r.contribution;
  }
  Var base = standard_normal_log_density_rows(z);
  total = total.valid() ? base + total : base;
  return total + standardization_log_det();
}

LogLikelihoodBreakdown FlowStack::breakdown(const Tensor& y) const {
  if (!y.all_finite()) throw ValidationError("flow input contains non-finite values");
  Tape tape;
  auto p = params_.bind(tape, false);
  std::vector<double> inv_scale(input_dim_);
  for (std::size_t j = 0; j < input_dim_; ++j) inv_scale[j] = 1.0 / scale_[j];
  Var z = (tape.constant(y) - tape.constant(Tensor::row(shift_))) * tape.constant(Tensor::row(inv_scale));
  LogLikelihoodBreakdown out;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    LayerResult r = layer_inverse(k, p, z);
    z = r.z;
    out.layers.push_back(r.contribution.value().vec());
  }
  out.base = standard_normal_log_density_rows(z).value().vec();
  out.standardization = standardization_log_det();
  out.total = out.base;
  for (std::size_t i = 0; i < out.total.size(); ++i) {
    for (const auto& l : out.layers) out.total[i] += l[i];
    out.total[i] += out.standardization;
  }
  return out;
}

std::vector<double> FlowStack::log_prob(const Tensor& y, unsigned threads) const {
  if (!y.all_finite()) throw ValidationError("flow input contains non-finite values");
  const std::size_t n = y.rows();
  std::vector<double> out(n);
  const std::size_t chunks = (n + kEvalChunk - 1) / kEvalChunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * kEvalChunk, hi = std::min(n, lo + kEvalChunk);
    const auto rows = iota(lo, hi);
    Tape tape;
    auto p = params_.bind(tape, false);
    const Tensor v = log_prob(tape, p, tape.constant(take_rows(y, rows))).value();
    std::copy(v.data().begin(), v.data().end(), out.begin() + static_cast<std::ptrdiff_t>(lo));
  });
  return out;
}

Tensor FlowStack::sample(Rng& rng, std::size_t n) const {
  Tensor z(Shape{n, base_dim()});
  for (double& v : z.data()) v = standard_normal(rng);
  for (std::size_t k = layers_.size(); k-- > 0;) z = layer_forward(k, z, rng);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < input_dim_; ++j) z.at(r, j) = z.at(r, j) * scale_[j] + shift_[j];
  return z;
}

Var mean_nll(const FlowStack& stack, Tape& tape, const std::vector<Var>& p, const Tensor& rows) {
  return -mean(stack.log_prob(tape, p, tape.constant(rows)));
}

FlowStack train_flow(const Tensor& features, const FlowConfig& config, std::span<const std::size_t> groups) {
  const std::size_t n = features.rows(), d = features.cols();
  if (n < 2 || d == 0) throw ValidationError("flow training needs at least 2 feature rows");
  if (!features.all_finite()) throw ValidationError("flow training features contain non-finite values");
  if (config.batch_size == 0) throw ValidationError("flow batch size must be positive");
  if (!groups.empty() && groups.size() != n) throw ValidationError("flow training groups must have one entry per row");
  Rng rng = make_rng(config.seed, 0xf10);
  const auto order = random_permutation(rng, n);
  const std::size_t n_val = std::min(n - 1, static_cast<std::size_t>(std::lround(config.validation_fraction * double(n))));
  std::vector<std::size_t> val, train;
  if (groups.empty()) {
    val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  } else {
    // Whole groups go to validation, in order of first appearance in the
    // shuffled rows, until they hold n_val rows. Rows of one trajectory are
    // strongly correlated, so a row-level split would hide overfitting to
    // the training agents.
    std::map<std::size_t, std::size_t> group_rows;
    for (std::size_t g : groups) ++group_rows[g];
    std::set<std::size_t> held;
    std::size_t taken = 0;
    for (std::size_t r : order) {
      if (taken >= n_val) break;
      if (held.insert(groups[r]).second) taken += group_rows[groups[r]];
    }
    if (held.size() == group_rows.size()) held.erase(groups[order.back()]);
    for (std::size_t r : order) (held.count(groups[r]) ? val : train).push_back(r);
  }
  if (config.max_train_rows > 0 && train.size() > config.max_train_rows) train.resize(config.max_train_rows);
  if (val.empty()) val = train;

  std::vector<double> shift(d, 0.0), scale(d, 0.0);
  for (std::size_t r : train)
    for (std::size_t j = 0; j < d; ++j) shift[j] += features.at(r, j);
  for (double& v : shift) v /= double(train.size());
  for (std::size_t r : train)
    for (std::size_t j = 0; j < d; ++j) scale[j] += std::pow(features.at(r, j) - shift[j], 2);
  for (double& v : scale) v = v > 0 ? std::sqrt(v / double(train.size())) : 1.0;

  FlowStack stack = FlowStack::create(d, config);
  stack.set_standardization(shift, scale);
  AdamConfig adam;
  adam.learning_rate = config.learning_rate;
  adam.weight_decay = config.weight_decay;
  OptimizerState opt = make_optimizer_state(stack.params().values(), adam);
  const Tensor val_rows = take_rows(features, val);
  std::vector<Tensor> best = stack.params().values();
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    const auto perm = random_permutation(rng, train.size());
    double total = 0.0;
    for (std::size_t lo = 0; lo < perm.size(); lo += config.batch_size) {
      const std::size_t hi = std::min(perm.size(), lo + config.batch_size);
      std::vector<std::size_t> idx(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) idx[i - lo] = train[perm[i]];
      Tape tape;
      auto p = stack.params().bind(tape, true);
      Var loss;
      try {
        loss = mean_nll(stack, tape, p, take_rows(features, idx));
      } catch (const NumericalError& e) {
        throw NumericalError("flow training diverged at step " + std::to_string(step) + ": " + e.what());
      }
      const double value = loss.value().item();
      if (!std::isfinite(value)) throw NumericalError("flow training diverged at step " + std::to_string(step));
      auto grads = tape.grad(loss, p);
      adamw_step(stack.params().values(), grads, opt);
      total += value * double(hi - lo);
      ++step;
    }
    stack.train_trace.push_back(total / double(train.size()));
    const auto lp = stack.log_prob(val_rows);
    const double v = -std::accumulate(lp.begin(), lp.end(), 0.0) / double(lp.size());
    stack.validation_trace.push_back(v);
    if (v < best_val) {
      best_val = v;
      best = stack.params().values();
      stack.best_validation_trace.push_back(v);
      stack.best_epoch = epoch;
    } else if (epoch - stack.best_epoch >= config.patience) {
      break;
    }
  }
  stack.params().values() = best;
  return stack;
}

Checkpoint FlowStack::to_checkpoint() const {
  Checkpoint ck;
  ck.kind = "flow";
  const auto& c = config_;
  ck.meta["config"] = {{"layers", c.layers},
                       {"surjection_layers", c.surjection_layers},
                       {"drop_fraction", c.drop_fraction},
                       {"bins", c.bins},
                       {"bound", c.bound},
                       {"hidden", c.hidden},
                       {"learning_rate", c.learning_rate},
                       {"weight_decay", c.weight_decay},
                       {"batch_size", c.batch_size},
                       {"max_epochs", c.max_epochs},
                       {"patience", c.patience},
                       {"validation_fraction", c.validation_fraction},
                       {"max_train_rows", c.max_train_rows},
                       {"init_scale", c.init_scale},
                       {"seed", c.seed}};
  ck.meta["input_dim"] = input_dim_;
  ck.meta["best_epoch"] = best_epoch;
  nlohmann::json layers = nlohmann::json::array();
  for (const Layer& l : layers_) {
    if (l.kind == Layer::Kind::Coupling) {
      layers.push_back({{"type", "coupling"}, {"dim", l.coupling.dim}, {"pass", l.coupling.pass},
                        {"transform", l.coupling.transform}});
    } else {
      const auto& s = l.surjection;
      layers.push_back({{"type", "slice_surjection"}, {"dim", s.dim}, {"kept", s.kept}, {"dropped", s.dropped},
                        {"permutation", s.permutation}, {"inner_pass", s.inner.pass},
                        {"inner_transform", s.inner.transform}});
    }
  }
  ck.meta["layers"] = layers;
  for (std::size_t i = 0; i < params_.size(); ++i) ck.put(params_.name(i), params_.value(i));
  ck.put("standardize.shift", Tensor::row(shift_));
  ck.put("standardize.scale", Tensor::row(scale_));
  ck.put("train_trace", Tensor::row(train_trace));
  ck.put("validation_trace", Tensor::row(validation_trace));
  ck.put("best_validation_trace", Tensor::row(best_validation_trace));
  return ck;
}

FlowStack FlowStack::from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "flow") throw ValidationError("checkpoint kind '" + ck.kind + "' is not a flow");
  FlowConfig c;
  FlowStack st;
  try {
    const auto& j = ck.meta.at("config");
    c.layers = j.at("layers");
    c.surjection_layers = json_indices(j.at("surjection_layers"));
    c.drop_fraction = j.at("drop_fraction");
    c.bins = j.at("bins");
    c.bound = j.at("bound");
    c.hidden = json_indices(j.at("hidden"));
    c.learning_rate = j.at("learning_rate");
    c.weight_decay = j.at("weight_decay");
    c.batch_size = j.at("batch_size");
    c.max_epochs = j.at("max_epochs");
    c.patience = j.at("patience");
    c.validation_fraction = j.at("validation_fraction");
    c.max_train_rows = j.at("max_train_rows");
    c.init_scale = j.at("init_scale");
    c.seed = j.at("seed");
    st = create(ck.meta.at("input_dim"), c);
    const auto& layers = ck.meta.at("layers");
    if (layers.size() != st.layers_.size()) throw ValidationError("flow checkpoint layer count mismatch");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      Layer& l = st.layers_[k];
      const auto& lj = layers[k];
      const bool surj = lj.at("type") == "slice_surjection";
      if (surj != (l.kind == Layer::Kind::Surjection)) throw ValidationError("flow checkpoint layer type mismatch");
      if (surj) {
        l.surjection.kept = json_indices(lj.at("kept"));
        l.surjection.dropped = json_indices(lj.at("dropped"));
        l.surjection.permutation = json_indices(lj.at("permutation"));
        l.surjection.inner.pass = json_indices(lj.at("inner_pass"));
        l.surjection.inner.transform = json_indices(lj.at("inner_transform"));
      } else {
        l.coupling.pass = json_indices(lj.at("pass"));
        l.coupling.transform = json_indices(lj.at("transform"));
      }
    }
    st.best_epoch = ck.meta.at("best_epoch");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("flow checkpoint metadata: ") + e.what());
  }
  for (std::size_t i = 0; i < st.params_.size(); ++i) {
    const Tensor& t = ck.get(st.params_.name(i));
    if (t.shape() != st.params_.value(i).shape()) {
      throw ValidationError("checkpoint array '" + st.params_.name(i) + "' has shape " + shape_str(t.shape()) +
                            ", expected " + shape_str(st.params_.value(i).shape()));
    }
    st.params_.value(i) = t;
  }
  st.set_standardization(ck.get("standardize.shift").vec(), ck.get("standardize.scale").vec());
  st.train_trace = ck.get("train_trace").vec();
  st.validation_trace = ck.get("validation_trace").vec();
  st.best_validation_trace = ck.get("best_validation_trace").vec();
  return st;
}

void save_flow(const FlowStack& stack, const std::filesystem::path& path) { save_checkpoint(stack.to_checkpoint(), path); }

FlowStack load_flow(const std::filesystem::path& path) { return FlowStack::from_checkpoint(load_checkpoint(path)); }

}  // namespace snf::flows
