#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "snf/checkpoint.hpp"
#include "snf/errors.hpp"
#include "snf/pipeline.hpp"
#include "snf/text.hpp"

namespace snf::pipeline {

namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

std::vector<std::size_t> parse_size_list(std::string_view v) {
  std::vector<std::size_t> out;
  if (trim(v).empty()) return out;
  for (auto part : split(v, ',')) out.push_back(static_cast<std::size_t>(parse_u64(part)));
  return out;
}

std::string render_size_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

template <class Member>
Field size_field(std::string section, std::string key, Member member) {
  return {std::move(section), std::move(key),
          [member](ExperimentConfig& c, std::string_view v) { member(c) = static_cast<std::size_t>(parse_u64(v)); },
          [member](const ExperimentConfig& c) { return std::to_string(member(c)); }};
}

template <class Member>
Field double_field(std::string section, std::string key, Member member) {
  return {std::move(section), std::move(key),
          [member](ExperimentConfig& c, std::string_view v) {
            const double d = parse_double(v);
            if (!std::isfinite(d)) throw ValidationError("value must be finite");
            member(c) = d;
          },
          [member](const ExperimentConfig& c) { return fmt_double(member(c)); }};
}

template <class Member>
Field list_field(std::string section, std::string key, Member member) {
  return {std::move(section), std::move(key),
          [member](ExperimentConfig& c, std::string_view v) { member(c) = parse_size_list(v); },
          [member](const ExperimentConfig& c) { return render_size_list(member(c)); }};
}

// Canonical key order; render_config emits exactly these.
const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"run", "seed", [](ExperimentConfig& c, std::string_view v) { c.seed = parse_u64(v); },
                 [](const ExperimentConfig& c) { return std::to_string(c.seed); }});

    f.push_back(size_field("simulator", "trajectories", [](auto& c) -> auto& { return c.simulator.trajectories; }));
    f.push_back(size_field("simulator", "steps", [](auto& c) -> auto& { return c.simulator.steps; }));
    f.push_back(size_field("simulator", "locations", [](auto& c) -> auto& { return c.simulator.locations; }));
    f.push_back(double_field("simulator", "mu_rho", [](auto& c) -> auto& { return c.simulator.prior.mu_rho; }));
    f.push_back(double_field("simulator", "sigma_rho", [](auto& c) -> auto& { return c.simulator.prior.sigma_rho; }));
    f.push_back(double_field("simulator", "mu_gamma", [](auto& c) -> auto& { return c.simulator.prior.mu_gamma; }));
    f.push_back(double_field("simulator", "sigma_gamma", [](auto& c) -> auto& { return c.simulator.prior.sigma_gamma; }));

    f.push_back(size_field("predictor", "embedding_dim", [](auto& c) -> auto& { return c.predictor.embedding_dim; }));
    f.push_back(size_field("predictor", "feature_dim", [](auto& c) -> auto& { return c.predictor.feature_dim; }));
    f.push_back(size_field("predictor", "blocks", [](auto& c) -> auto& { return c.predictor.blocks; }));
    f.push_back(double_field("predictor", "branch_scale", [](auto& c) -> auto& { return c.predictor.branch_scale; }));
    f.push_back(size_field("predictor", "window", [](auto& c) -> auto& { return c.predictor.window; }));
    f.push_back(size_field("predictor", "stride", [](auto& c) -> auto& { return c.predictor.stride; }));
    f.push_back(size_field("predictor", "epochs", [](auto& c) -> auto& { return c.predictor.epochs; }));
    f.push_back(size_field("predictor", "batch_size", [](auto& c) -> auto& { return c.predictor.batch_size; }));
    f.push_back(double_field("predictor", "learning_rate", [](auto& c) -> auto& { return c.predictor.learning_rate; }));
    f.push_back(double_field("predictor", "weight_decay", [](auto& c) -> auto& { return c.predictor.weight_decay; }));

    f.push_back(size_field("flow", "layers", [](auto& c) -> auto& { return c.flow.layers; }));
    f.push_back(list_field("flow", "surjection_layers", [](auto& c) -> auto& { return c.flow.surjection_layers; }));
    f.push_back(double_field("flow", "drop_fraction", [](auto& c) -> auto& { return c.flow.drop_fraction; }));
    f.push_back(size_field("flow", "bins", [](auto& c) -> auto& { return c.flow.bins; }));
    f.push_back(double_field("flow", "bound", [](auto& c) -> auto& { return c.flow.bound; }));
    f.push_back(list_field("flow", "hidden", [](auto& c) -> auto& { return c.flow.hidden; }));
    f.push_back(double_field("flow", "learning_rate", [](auto& c) -> auto& { return c.flow.learning_rate; }));
    f.push_back(double_field("flow", "weight_decay", [](auto& c) -> auto& { return c.flow.weight_decay; }));
    f.push_back(size_field("flow", "batch_size", [](auto& c) -> auto& { return c.flow.batch_size; }));
    f.push_back(size_field("flow", "max_epochs", [](auto& c) -> auto& { return c.flow.max_epochs; }));
    f.push_back(size_field("flow", "patience", [](auto& c) -> auto& { return c.flow.patience; }));
    f.push_back(double_field("flow", "validation_fraction", [](auto& c) -> auto& { return c.flow.validation_fraction; }));
    f.push_back(size_field("flow", "max_train_rows", [](auto& c) -> auto& { return c.flow.max_train_rows; }));
    f.push_back(double_field("flow", "init_scale", [](auto& c) -> auto& { return c.flow.init_scale; }));

    f.push_back(size_field("dpgmm", "components", [](auto& c) -> auto& { return c.dpgmm.components; }));
    f.push_back(size_field("dpgmm", "mc_samples", [](auto& c) -> auto& { return c.dpgmm.mc_samples; }));
    f.push_back(double_field("dpgmm", "learning_rate", [](auto& c) -> auto& { return c.dpgmm.learning_rate; }));
    f.push_back(size_field("dpgmm", "iterations", [](auto& c) -> auto& { return c.dpgmm.iterations; }));
    f.push_back(size_field("dpgmm", "batch_size", [](auto& c) -> auto& { return c.dpgmm.batch_size; }));
    f.push_back(size_field("dpgmm", "posterior_draws", [](auto& c) -> auto& { return c.dpgmm.posterior_draws; }));
    f.push_back(double_field("dpgmm", "init_log_std", [](auto& c) -> auto& { return c.dpgmm.init_log_std; }));

    f.push_back(list_field("stats", "subsample", [](auto& c) -> auto& { return c.stats.subsample; }));
    f.push_back(size_field("stats", "repetitions", [](auto& c) -> auto& { return c.stats.repetitions; }));
    f.push_back(double_field("stats", "alpha", [](auto& c) -> auto& { return c.stats.alpha; }));
    f.push_back({"stats", "granularity",
                 [](ExperimentConfig& c, std::string_view v) {
                   v = trim(v);
                   if (v == "window") {
                     c.stats.per_trajectory = false;
                   } else if (v == "trajectory") {
                     c.stats.per_trajectory = true;
                   } else {
                     throw ValidationError("expected 'window' or 'trajectory'");
                   }
                 },
                 [](const ExperimentConfig& c) { return std::string(c.stats.per_trajectory ? "trajectory" : "window"); }});
    f.push_back({"stats", "reference",
                 [](ExperimentConfig& c, std::string_view v) { c.stats.reference = std::string(trim(v)); },
                 [](const ExperimentConfig& c) { return c.stats.reference; }});
    return f;
  }();
  return table;
}

}  // namespace

std::uint64_t ExperimentConfig::stage_seed(const std::string& name) const { return derive_seed(seed, fnv1a64(name)); }

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.predictor.num_locations = c.simulator.locations;
  // Validation holds out whole trajectories, whose NLL bottoms out within a
  // few epochs at desk scale; patience 20 would only add single-core runtime.
  c.flow.patience = 5;
  return c;
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig config = default_config();
  std::map<std::pair<std::string, std::string>, const Field*> index;
  std::set<std::string> sections;
  for (const auto& f : fields()) {
    index[{f.section, f.key}] = &f;
    sections.insert(f.section);
  }
  std::set<std::pair<std::string, std::string>> seen;
  std::string section;
  std::size_t line_no = 0;
  for (auto raw : split(text, '\n')) {
    ++line_no;
    const auto hash = raw.find('#');
    auto line = trim(hash == std::string_view::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ValidationError(where + "malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (!sections.count(section)) throw ValidationError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ValidationError(where + "expected key = value");
    if (section.empty()) throw ValidationError(where + "key outside of a section");
    const std::string key(trim(line.substr(0, eq)));
    const auto it = index.find({section, key});
    if (it == index.end()) throw ValidationError(where + "unknown key '" + key + "' in [" + section + "]");
    if (!seen.insert({section, key}).second) throw ValidationError(where + "duplicate key '" + key + "'");
    try {
      it->second->set(config, line.substr(eq + 1));
    } catch (const ValidationError& e) {
      throw ValidationError(where + section + "." + key + ": " + e.what());
    }
  }
  config.predictor.num_locations = config.simulator.locations;
  validate_config(config);
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("config file not found: " + path.string());
  return parse_config(read_file(path));
}

std::string render_config(const ExperimentConfig& config) {
  std::ostringstream out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out << "\n";
      section = f.section;
      out << "[" << section << "]\n";
    }
    out << f.key << " = " << f.get(config) << "\n";
  }
  return out.str();
}

void validate_config(const ExperimentConfig& c) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ValidationError("config: " + msg);
  };
  const auto& s = c.simulator;
  require(s.trajectories >= 1 && s.steps >= 2 && s.locations >= 2, "simulator needs trajectories >= 1, steps >= 2, locations >= 2");
  require(s.prior.sigma_rho >= 0.0 && s.prior.sigma_gamma >= 0.0, "prior standard deviations must be >= 0");
  const auto& p = c.predictor;
  require(p.window >= 1 && p.window < s.steps, "predictor.window must be in [1, steps)");
  require(p.stride >= 1, "predictor.stride must be >= 1");
  require(p.embedding_dim >= 1 && p.feature_dim >= 1 && p.batch_size >= 1, "predictor dims and batch size must be >= 1");
  require(p.branch_scale > 0.0 && p.branch_scale < 1.0, "predictor.branch_scale must be in (0, 1)");
  require(p.learning_rate > 0.0, "predictor.learning_rate must be > 0");
  const auto& f = c.flow;
  require(f.layers >= 1 && f.bins >= 1 && f.batch_size >= 1 && f.max_epochs >= 1, "flow sizes must be >= 1");
  for (auto k : f.surjection_layers) require(k >= 1 && k <= f.layers, "flow.surjection_layers entries must be in [1, layers]");
  require(f.drop_fraction > 0.0 && f.drop_fraction < 1.0, "flow.drop_fraction must be in (0, 1)");
  require(f.bound > 0.0 && f.learning_rate > 0.0, "flow.bound and flow.learning_rate must be > 0");
  require(f.validation_fraction > 0.0 && f.validation_fraction < 1.0, "flow.validation_fraction must be in (0, 1)");
  const auto& d = c.dpgmm;
  require(d.components >= 1 && d.mc_samples >= 1 && d.iterations >= 1 && d.posterior_draws >= 1,
          "dpgmm sizes must be >= 1");
  require(d.learning_rate > 0.0, "dpgmm.learning_rate must be > 0");
  const auto& st = c.stats;
  require(!st.subsample.empty(), "stats.subsample needs at least one size");
  for (auto n : st.subsample) require(n >= 2, "stats.subsample sizes must be >= 2");
  require(st.repetitions >= 1, "stats.repetitions must be >= 1");
  require(st.alpha > 0.0 && st.alpha < 1.0, "stats.alpha must be in (0, 1)");
  const auto names = dataset_names();
  require(std::find(names.begin(), names.end(), st.reference) != names.end(),
          "stats.reference must name a dataset, got '" + st.reference + "'");
}

}  // namespace snf::pipeline
