#pragma once

// Staged experiment pipeline with on-disk artifacts between stages:
//
//   simulate -> train predictor -> extract-features -> train flow-snf / flow-bnf / dpgmm
//            -> score -> report
//
// Layout under the output directory:
//   data/<dataset>.epr            features/<dataset>.feat
//   models/<kind>.ckpt            models/<kind>_trace.csv
//   scores/<estimator>/<dataset>.csv
//   report/report_N<n>.{txt,csv}  report/density_<estimator>.csv
// Every stage directory also receives resolved.conf and a manifest JSON.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "snf/dpgmm.hpp"
#include "snf/epr.hpp"
#include "snf/flows.hpp"
#include "snf/ood_stats.hpp"
#include "snf/predictor.hpp"

namespace snf::pipeline {

struct SimulatorSection {
  std::size_t trajectories = 200;
  std::size_t steps = 500;
  std::size_t locations = 100;
  epr::Prior prior;
};

struct StatsSection {
  std::vector<std::size_t> subsample{100, 200};
  std::size_t repetitions = 100;
  double alpha = 0.01;
  bool per_trajectory = false;  // aggregate window scores to trajectory means
  std::string reference = "train";
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  SimulatorSection simulator;
  predictor::PredictorConfig predictor;
  flows::FlowConfig flow;
  dpgmm::DpgmmConfig dpgmm;
  StatsSection stats;

  // Seeds of every stage derive from `seed` and the stage/dataset name.
  std::uint64_t stage_seed(const std::string& name) const;
};

// Built-in desk profile.
ExperimentConfig default_config();

// "[section]" headers followed by "key = value" lines; '#' starts a comment.
// Unknown sections or keys, duplicates and malformed values throw ValidationError.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Every key, in canonical order; parse_config(render_config(c)) == c.
std::string render_config(const ExperimentConfig& config);
// Config-level checks beyond single values (e.g. layer indices in range).
void validate_config(const ExperimentConfig& config);

// Dataset ids in report order: train, test, then the 13 interventions.
std::vector<std::string> dataset_names();
epr::DatasetManifest dataset_manifest(const ExperimentConfig& config, const std::string& name);

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::map<std::string, std::uint64_t> seeds;
  double wall_seconds = 0.0;
  std::string to_json() const;
};

inline constexpr const char* kToolVersion = "0.3.0";

enum class ModelKind { Predictor, FlowSnf, FlowBnf, Dpgmm };
ModelKind parse_model_kind(std::string_view text);
std::string model_kind_name(ModelKind kind);
// The density estimators scored and reported, in table column order.
std::vector<ModelKind> density_kinds();

struct RunOptions {
  std::filesystem::path out = "run";
  unsigned threads = 1;
  bool verbose = false;
};

// Each command returns the files it wrote (excluding resolved.conf / manifests).
std::vector<std::filesystem::path> cmd_simulate(const ExperimentConfig& config, const RunOptions& options,
                                                const std::optional<std::string>& only = std::nullopt);
std::vector<std::filesystem::path> cmd_train(ModelKind kind, const ExperimentConfig& config, const RunOptions& options);
std::vector<std::filesystem::path> cmd_extract_features(const ExperimentConfig& config, const RunOptions& options);
std::vector<std::filesystem::path> cmd_score(ModelKind kind, const ExperimentConfig& config, const RunOptions& options);
std::vector<std::filesystem::path> cmd_report(const ExperimentConfig& config, const RunOptions& options);
// All stages in order.
std::vector<std::filesystem::path> cmd_pipeline(const ExperimentConfig& config, const RunOptions& options);

struct ScoreRow {
  std::string dataset;
  std::size_t trajectory = 0;
  std::size_t window_start = 0;
  double loglik = 0.0;
};
std::string serialize_scores(const std::vector<ScoreRow>& rows);
std::vector<ScoreRow> parse_scores(std::string_view text);

// Mean NLL over every training feature row, written by cmd_train to
// models/<kind>_summary.json for density models.
double recorded_train_nll(const std::filesystem::path& out, ModelKind kind);

}  // namespace snf::pipeline
