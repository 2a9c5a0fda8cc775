#pragma once

// Exploration-and-preferential-return trajectory simulator.
//
// An agent starts at a uniformly drawn location. At every later step it
// explores an unvisited location with probability
//     p = clamp(rho * S^(-gamma), 0, 1),   S = distinct locations so far,
// and otherwise returns to a visited location with probability proportional
// to its visit count. Exploration targets are uniform over unvisited
// locations. Once all D locations are visited, p is 0.
//
// Interventions: shift_rho / shift_gamma replace the prior mean of rho or
// gamma; hard_p fixes p to a constant for every step.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "snf/random.hpp"

namespace snf::epr {

using LocationId = std::uint32_t;

struct AgentParams {
  double rho = 0.6;
  double gamma = 0.5;
};

struct Prior {
  double mu_rho = 0.6;
  double sigma_rho = 0.1;
  double mu_gamma = 0.5;
  double sigma_gamma = 0.1;
};

enum class InterventionKind { None, ShiftRho, ShiftGamma, HardP };

struct Intervention {
  InterventionKind kind = InterventionKind::None;
  double value = 0.0;

  static Intervention none() { return {}; }
  static Intervention shift_rho(double mu) { return {InterventionKind::ShiftRho, mu}; }
  static Intervention shift_gamma(double mu) { return {InterventionKind::ShiftGamma, mu}; }
  static Intervention hard_p(double c) { return {InterventionKind::HardP, c}; }

  // "none", "shift_rho=0.4", "shift_gamma=0.9", "hard_p=0.5"
  static Intervention parse(std::string_view text);
  std::string to_string() const;
  // File-name friendly id, e.g. "hard_p_0.5".
  std::string dataset_name() const;
  // Throws ValidationError unless the value lies on the standard grid
  // (shift means {0.1,0.4,0.7,0.9}, hard p {0.1,0.25,0.5,0.75,0.9}) or
  // `allow_arbitrary` is set and the value is in range.
  void validate(bool allow_arbitrary) const;
  Prior apply(Prior prior) const;
};

// The 13 interventional settings: 5 hard, 4 shift_gamma, 4 shift_rho.
std::vector<Intervention> standard_interventions();

struct Trajectory {
  std::size_t agent_id = 0;
  AgentParams params;
  std::vector<LocationId> visits;
};

struct DatasetManifest {
  std::string id = "train";
  std::size_t num_trajectories = 200;
  std::size_t steps = 500;
  std::size_t num_locations = 100;
  Prior prior;
  Intervention intervention;
  std::uint64_t seed = 1;
  bool allow_arbitrary_interventions = false;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Trajectory> trajectories;
};

// Normal draws truncated to rho in (0, 1], gamma >= 0 by rejection.
AgentParams sample_agent_params(const Prior& prior, Rng& rng);

// p for the step after `prefix`, given D locations in total.
double exploration_probability(std::span<const LocationId> prefix, const AgentParams& params, std::size_t num_locations);
double exploration_probability(std::size_t distinct, const AgentParams& params, std::size_t num_locations);

// Incremental agent state; one call per step.
class Walker {
 public:
  Walker(std::size_t num_locations, LocationId start);
  LocationId step(const AgentParams& params, const Intervention& intervention, Rng& rng);
  std::size_t distinct() const { return visited_.size(); }
  std::size_t length() const { return length_; }

 private:
  void visit(LocationId loc);
  std::vector<std::uint32_t> counts_;
  std::vector<LocationId> visited_;
  std::vector<LocationId> unvisited_;
  std::vector<std::size_t> unvisited_pos_;
  std::size_t length_ = 0;
};

// Next location given a full prefix (rebuilds the walker state).
LocationId step(std::span<const LocationId> prefix, const AgentParams& params, const Intervention& intervention,
                std::size_t num_locations, Rng& rng);

Trajectory simulate_trajectory(const AgentParams& params, std::size_t steps, std::size_t num_locations,
                               const Intervention& intervention, Rng& rng);

// Trajectory i uses an RNG stream derived from (seed, i); results are
// identical for any thread count.
Dataset simulate_dataset(const DatasetManifest& manifest, unsigned threads = 1);

std::string manifest_line(const DatasetManifest& manifest);
DatasetManifest parse_manifest_line(std::string_view line);

std::string serialize_dataset(const Dataset& dataset);
Dataset parse_dataset(std::string_view text);
void write_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

std::size_t distinct_count(std::span<const LocationId> visits);

}  // namespace snf::epr
