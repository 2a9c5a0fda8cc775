#include "snf/epr.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "snf/checkpoint.hpp"
#include "snf/errors.hpp"
#include "snf/parallel.hpp"
#include "snf/text.hpp"

namespace snf::epr {

namespace {

constexpr int kMaxRejections = 10000;
constexpr const char* kDatasetMagic = "# snf-epr-dataset";
constexpr int kDatasetVersion = 1;

bool on_grid(double v, std::initializer_list<double> grid) {
  return std::any_of(grid.begin(), grid.end(), [v](double g) { return std::abs(g - v) < 1e-12; });
}

double truncated_normal(double mu, double sigma, double lo, double hi, bool lo_open, Rng& rng, const char* what) {
  if (sigma < 0) throw ValidationError(std::string("negative prior std for ") + what);
  auto ok = [&](double x) { return (lo_open ? x > lo : x >= lo) && x <= hi; };
  if (sigma == 0) {
    if (!ok(mu)) throw ValidationError(std::string("degenerate prior for ") + what + " lies outside its valid range");
    return mu;
  }
  for (int i = 0; i < kMaxRejections; ++i) {
    const double x = mu + sigma * standard_normal(rng);
    if (ok(x)) return x;
  }
  throw ValidationError(std::string("prior for ") + what + " has no acceptance mass after " +
                        std::to_string(kMaxRejections) + " rejections");
}

}  // namespace

Intervention Intervention::parse(std::string_view text) {
  text = trim(text);
  if (text == "none") return none();
  const std::size_t eq = text.find('=');
  if (eq == std::string_view::npos) throw ValidationError("bad intervention '" + std::string(text) + "'");
  const std::string_view key = text.substr(0, eq);
  const double v = parse_double(text.substr(eq + 1));
  if (key == "shift_rho") return shift_rho(v);
  if (key == "shift_gamma") return shift_gamma(v);
  if (key == "hard_p") return hard_p(v);
  throw ValidationError("unknown intervention kind '" + std::string(key) + "'");
}

std::string Intervention::to_string() const {
  switch (kind) {
    case InterventionKind::None: return "none";
    case InterventionKind::ShiftRho: return "shift_rho=" + fmt_double(value);
    case InterventionKind::ShiftGamma: return "shift_gamma=" + fmt_double(value);
    case InterventionKind::HardP: return "hard_p=" + fmt_double(value);
  }
  return "none";
}

std::string Intervention::dataset_name() const {
  std::string s = to_string();
  std::replace(s.begin(), s.end(), '=', '_');
  return s;
}

void Intervention::validate(bool allow_arbitrary) const {
  switch (kind) {
    case InterventionKind::None: return;
    case InterventionKind::ShiftRho:
    case InterventionKind::ShiftGamma:
      if (allow_arbitrary || on_grid(value, {0.1, 0.4, 0.7, 0.9})) return;
      throw ValidationError("shift mean " + fmt_double(value) + " is not on the grid {0.1,0.4,0.7,0.9}");
    case InterventionKind::HardP:
      if (value < 0 || value > 1) throw ValidationError("hard_p must lie in [0,1]");
      if (allow_arbitrary || on_grid(value, {0.1, 0.25, 0.5, 0.75, 0.9})) return;
      throw ValidationError("hard_p " + fmt_double(value) + " is not on the grid {0.1,0.25,0.5,0.75,0.9}");
  }
}

Prior Intervention::apply(Prior prior) const {
  if (kind == InterventionKind::ShiftRho) prior.mu_rho = value;
  if (kind == InterventionKind::ShiftGamma) prior.mu_gamma = value;
  return prior;
}

std::vector<Intervention> standard_interventions() {
  std::vector<Intervention> out;
  for (double p : {0.1, 0.25, 0.5, 0.75, 0.9}) out.push_back(Intervention::hard_p(p));
  for (double m : {0.1, 0.4, 0.7, 0.9}) out.push_back(Intervention::shift_gamma(m));
  for (double m : {0.1, 0.4, 0.7, 0.9}) out.push_back(Intervention::shift_rho(m));
  return out;
}

AgentParams sample_agent_params(const Prior& prior, Rng& rng) {
  AgentParams p;
  p.rho = truncated_normal(prior.mu_rho, prior.sigma_rho, 0.0, 1.0, true, rng, "rho");
  p.gamma = truncated_normal(prior.mu_gamma, prior.sigma_gamma, 0.0, std::numeric_limits<double>::infinity(), false,
                             rng, "gamma");
  return p;
}

std::size_t distinct_count(std::span<const LocationId> visits) {
  std::vector<LocationId> v(visits.begin(), visits.end());
  std::sort(v.begin(), v.end());
  return static_cast<std::size_t>(std::unique(v.begin(), v.end()) - v.begin());
}

double exploration_probability(std::size_t distinct, const AgentParams& params, std::size_t num_locations) {
  if (distinct >= num_locations) return 0.0;
  const double p = params.rho * std::pow(static_cast<double>(distinct), -params.gamma);
  return std::clamp(p, 0.0, 1.0);
}

double exploration_probability(std::span<const LocationId> prefix, const AgentParams& params,
                               std::size_t num_locations) {
  if (prefix.empty()) throw ValidationError("exploration_probability: empty prefix");
  return exploration_probability(distinct_count(prefix), params, num_locations);
}

Walker::Walker(std::size_t num_locations, LocationId start)
    : counts_(num_locations, 0), unvisited_pos_(num_locations) {
  if (num_locations < 2) throw ValidationError("need at least two locations");
  if (start >= num_locations) throw ValidationError("start location out of range");
  unvisited_.reserve(num_locations);
  for (std::size_t i = 0; i < num_locations; ++i) {
    unvisited_pos_[i] = i;
    unvisited_.push_back(static_cast<LocationId>(i));
  }
  visit(start);
}

void Walker::visit(LocationId loc) {
  if (counts_[loc] == 0) {
    visited_.push_back(loc);
    // swap-remove from the unvisited list
    const std::size_t pos = unvisited_pos_[loc];
    const LocationId last = unvisited_.back();
    unvisited_[pos] = last;
    unvisited_pos_[last] = pos;
    unvisited_.pop_back();
  }
  counts_[loc] += 1;
  length_ += 1;
}

LocationId Walker::step(const AgentParams& params, const Intervention& intervention, Rng& rng) {
  double p = intervention.kind == InterventionKind::HardP
                 ? (unvisited_.empty() ? 0.0 : intervention.value)
                 : exploration_probability(visited_.size(), params, counts_.size());
  LocationId next;
  if (uniform01(rng) < p) {
    next = unvisited_[uniform_index(rng, unvisited_.size())];
  } else {
    // Return: pick a visited location proportionally to its visit count.
    std::size_t r = uniform_index(rng, length_);
    next = visited_.back();
    for (LocationId loc : visited_) {
      if (r < counts_[loc]) {
        next = loc;
        break;
      }
      r -= counts_[loc];
    }
  }
  visit(next);
  return next;
}

LocationId step(std::span<const LocationId> prefix, const AgentParams& params, const Intervention& intervention,
                std::size_t num_locations, Rng& rng) {
  if (prefix.empty()) throw ValidationError("step: empty prefix");
  std::vector<std::uint32_t> counts(num_locations, 0);
  std::vector<LocationId> visited;
  for (LocationId loc : prefix) {
    if (loc >= num_locations) throw ValidationError("step: location id out of range");
    if (counts[loc]++ == 0) visited.push_back(loc);
  }
  std::vector<LocationId> unvisited;
  for (std::size_t i = 0; i < num_locations; ++i)
    if (counts[i] == 0) unvisited.push_back(static_cast<LocationId>(i));
  const double p = intervention.kind == InterventionKind::HardP
                       ? (unvisited.empty() ? 0.0 : intervention.value)
                       : exploration_probability(visited.size(), params, num_locations);
  if (uniform01(rng) < p) return unvisited[uniform_index(rng, unvisited.size())];
  std::size_t r = uniform_index(rng, prefix.size());
  for (LocationId loc : visited) {
    if (r < counts[loc]) return loc;
    r -= counts[loc];
  }
  return visited.back();
}

Trajectory simulate_trajectory(const AgentParams& params, std::size_t steps, std::size_t num_locations,
                               const Intervention& intervention, Rng& rng) {
  if (steps < 1) throw ValidationError("trajectory length must be >= 1");
  if (num_locations < 2) throw ValidationError("need at least two locations");
  Trajectory traj;
  traj.params = params;
  traj.visits.reserve(steps);
  const auto start = static_cast<LocationId>(uniform_index(rng, num_locations));
  traj.visits.push_back(start);
  Walker walker(num_locations, start);
  for (std::size_t t = 1; t < steps; ++t) traj.visits.push_back(walker.step(params, intervention, rng));
  return traj;
}

Dataset simulate_dataset(const DatasetManifest& manifest, unsigned threads) {
  if (manifest.num_trajectories < 1) throw ValidationError("dataset needs at least one trajectory");
  manifest.intervention.validate(manifest.allow_arbitrary_interventions);
  const Prior prior = manifest.intervention.apply(manifest.prior);
  Dataset ds;
  ds.manifest = manifest;
  ds.trajectories.resize(manifest.num_trajectories);
  parallel_for(manifest.num_trajectories, threads, [&](std::size_t i) {
    Rng rng = make_rng(manifest.seed, i);
    const AgentParams params = sample_agent_params(prior, rng);
    Trajectory t = simulate_trajectory(params, manifest.steps, manifest.num_locations, manifest.intervention, rng);
    t.agent_id = i;
    ds.trajectories[i] = std::move(t);
  });
  return ds;
}

std::string manifest_line(const DatasetManifest& m) {
  std::ostringstream os;
  os << kDatasetMagic << " v" << kDatasetVersion << " id=" << m.id << " N=" << m.num_trajectories
     << " T=" << m.steps << " D=" << m.num_locations << " mu_rho=" << fmt_double(m.prior.mu_rho)
     << " sigma_rho=" << fmt_double(m.prior.sigma_rho) << " mu_gamma=" << fmt_double(m.prior.mu_gamma)
     << " sigma_gamma=" << fmt_double(m.prior.sigma_gamma) << " intervention=" << m.intervention.to_string()
     << " seed=" << m.seed << " exploration_target=uniform"
     << " allow_arbitrary=" << (m.allow_arbitrary_interventions ? 1 : 0);
  return os.str();
}

DatasetManifest parse_manifest_line(std::string_view line) {
  const std::string prefix = std::string(kDatasetMagic) + " v";
  if (!starts_with(line, prefix)) throw ValidationError("not an EPR dataset header");
  line.remove_prefix(prefix.size());
  const std::size_t sp = line.find(' ');
  const auto version = parse_u64(line.substr(0, sp));
  if (version != kDatasetVersion) throw ValidationError("unsupported dataset version " + std::to_string(version));
  DatasetManifest m;
  for (const auto& [k, v] : parse_kv_line(sp == std::string_view::npos ? std::string_view{} : line.substr(sp))) {
    if (k == "id") m.id = v;
    else if (k == "N") m.num_trajectories = parse_u64(v);
    else if (k == "T") m.steps = parse_u64(v);
    else if (k == "D") m.num_locations = parse_u64(v);
    else if (k == "mu_rho") m.prior.mu_rho = parse_double(v);
    else if (k == "sigma_rho") m.prior.sigma_rho = parse_double(v);
    else if (k == "mu_gamma") m.prior.mu_gamma = parse_double(v);
    else if (k == "sigma_gamma") m.prior.sigma_gamma = parse_double(v);
    else if (k == "intervention") m.intervention = Intervention::parse(v);
    else if (k == "seed") m.seed = parse_u64(v);
    else if (k == "exploration_target") {
      if (v != "uniform") throw ValidationError("unsupported exploration target '" + v + "'");
    } else if (k == "allow_arbitrary") m.allow_arbitrary_interventions = v == "1";
    else throw ValidationError("unknown dataset manifest key '" + k + "'");
  }
  return m;
}

std::string serialize_dataset(const Dataset& ds) {
  std::string out = manifest_line(ds.manifest);
  out += '\n';
  for (const Trajectory& t : ds.trajectories) {
    out += std::to_string(t.agent_id);
    out += ' ';
    out += fmt_double(t.params.rho);
    out += ' ';
    out += fmt_double(t.params.gamma);
    out += ' ';
    for (std::size_t i = 0; i < t.visits.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(t.visits[i]);
    }
    out += '\n';
  }
  return out;
}

Dataset parse_dataset(std::string_view text) {
  auto lines = split(text, '\n');
  if (lines.empty()) throw ValidationError("empty dataset file");
  Dataset ds;
  ds.manifest = parse_manifest_line(lines[0]);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    std::string_view line = lines[i];
    if (trim(line).empty()) continue;
    auto fields = split(line, ' ');
    if (fields.size() != 4) throw ValidationError("dataset line " + std::to_string(i + 1) + ": expected 4 fields");
    Trajectory t;
    t.agent_id = parse_u64(fields[0]);
    t.params.rho = parse_double(fields[1]);
    t.params.gamma = parse_double(fields[2]);
    for (std::string_view id : split(fields[3], ',')) {
      const auto loc = parse_u64(id);
      if (loc >= ds.manifest.num_locations) {
        throw ValidationError("dataset line " + std::to_string(i + 1) + ": location id out of range");
      }
      t.visits.push_back(static_cast<LocationId>(loc));
    }
    if (t.visits.size() != ds.manifest.steps) {
      throw ValidationError("dataset line " + std::to_string(i + 1) + ": trajectory length differs from T");
    }
    ds.trajectories.push_back(std::move(t));
  }
  if (ds.trajectories.size() != ds.manifest.num_trajectories) {
    throw ValidationError("dataset has " + std::to_string(ds.trajectories.size()) + " trajectories, header says " +
                          std::to_string(ds.manifest.num_trajectories));
  }
  return ds;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_dataset(dataset));
}

Dataset read_dataset(const std::filesystem::path& path) { return parse_dataset(read_file(path)); }

}  // namespace snf::epr
