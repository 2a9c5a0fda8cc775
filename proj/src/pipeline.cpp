#include "snf/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "snf/checkpoint.hpp"
#include "snf/errors.hpp"
#include "snf/text.hpp"

namespace snf::pipeline {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

fs::path stage_dir(const RunOptions& options, const char* stage) {
  fs::path d = options.out / stage;
  fs::create_directories(d);
  return d;
}

fs::path data_path(const RunOptions& o, const std::string& name) { return o.out / "data" / (name + ".epr"); }
fs::path features_path(const RunOptions& o, const std::string& name) { return o.out / "features" / (name + ".feat"); }
fs::path model_path(const RunOptions& o, ModelKind kind) { return o.out / "models" / (model_kind_name(kind) + ".ckpt"); }
fs::path scores_path(const RunOptions& o, ModelKind kind, const std::string& name) {
  return o.out / "scores" / model_kind_name(kind) / (name + ".csv");
}

void log(const RunOptions& o, const std::string& msg) {
  if (o.verbose) std::cerr << "[snf_ood] " << msg << "\n";
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw ValidationError("missing " + what + ": " + path.string());
}

std::vector<std::string> as_strings(const std::vector<fs::path>& paths) {
  std::vector<std::string> out;
  for (const auto& p : paths) out.push_back(p.generic_string());
  return out;
}

// resolved.conf plus <command>.manifest.json, written last so a manifest only
// exists for a finished stage.
void finish_stage(const fs::path& dir, const std::string& command, const ExperimentConfig& config,
                  const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs,
                  std::map<std::string, std::uint64_t> seeds, Clock::time_point start) {
  const std::string resolved = render_config(config);
  write_file_atomic(dir / "resolved.conf", resolved);
  RunManifest m;
  m.command = command;
  m.config_hash = hex64(fnv1a64(resolved));
  m.inputs = as_strings(inputs);
  m.outputs = as_strings(outputs);
  m.seeds = std::move(seeds);
  m.seeds["run"] = config.seed;
  m.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  write_file_atomic(dir / (command + ".manifest.json"), m.to_json());
}

// Datasets of the canonical list whose files exist under `dir`.
std::vector<std::string> present(const RunOptions& o, bool features) {
  std::vector<std::string> out;
  for (const auto& name : dataset_names()) {
    if (fs::exists(features ? features_path(o, name) : data_path(o, name))) out.push_back(name);
  }
  return out;
}

predictor::PredictorConfig predictor_config(const ExperimentConfig& config) {
  auto c = config.predictor;
  c.num_locations = config.simulator.locations;
  c.seed = config.stage_seed("predictor");
  return c;
}

flows::FlowConfig flow_config(const ExperimentConfig& config, ModelKind kind) {
  auto c = kind == ModelKind::FlowBnf ? flows::bnf_config(config.flow) : config.flow;
  c.seed = config.stage_seed(model_kind_name(kind));
  return c;
}

dpgmm::DpgmmConfig dpgmm_config(const ExperimentConfig& config) {
  auto c = config.dpgmm;
  c.seed = config.stage_seed("dpgmm");
  return c;
}

std::uint64_t dpgmm_score_seed(const ExperimentConfig& config) { return config.stage_seed("dpgmm-score"); }

double mean_nll(const std::vector<double>& loglik) {
  return -std::accumulate(loglik.begin(), loglik.end(), 0.0) / static_cast<double>(loglik.size());
}

void check_dim(std::size_t expected, const predictor::FeatureMatrix& fm, const std::string& model) {
  if (fm.dim() != expected) {
    throw ValidationError(model + " expects feature dim " + std::to_string(expected) + ", found " +
                          std::to_string(fm.dim()) + " in dataset " + fm.dataset_id);
  }
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

}  // namespace

std::vector<std::string> dataset_names() {
  std::vector<std::string> names{"train", "test"};
  for (const auto& iv : epr::standard_interventions()) names.push_back(iv.dataset_name());
  return names;
}

epr::DatasetManifest dataset_manifest(const ExperimentConfig& config, const std::string& name) {
  epr::DatasetManifest m;
  m.id = name;
  m.num_trajectories = config.simulator.trajectories;
  m.steps = config.simulator.steps;
  m.num_locations = config.simulator.locations;
  m.prior = config.simulator.prior;
  m.seed = config.stage_seed("data/" + name);
  if (name != "train" && name != "test") {
    bool found = false;
    for (const auto& iv : epr::standard_interventions()) {
      if (iv.dataset_name() == name) {
        m.intervention = iv;
        found = true;
      }
    }
    if (!found) throw ValidationError("unknown dataset '" + name + "'");
  }
  return m;
}

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config_hash"] = config_hash;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["seeds"] = seeds;
  j["tool_version"] = kToolVersion;
  j["wall_seconds"] = wall_seconds;
  return j.dump(2) + "\n";
}

ModelKind parse_model_kind(std::string_view text) {
  if (text == "predictor") return ModelKind::Predictor;
  if (text == "flow-snf") return ModelKind::FlowSnf;
  if (text == "flow-bnf") return ModelKind::FlowBnf;
  if (text == "dpgmm") return ModelKind::Dpgmm;
  throw ValidationError("unknown model kind '" + std::string(text) + "' (predictor | flow-snf | flow-bnf | dpgmm)");
}

std::string model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::Predictor: return "predictor";
    case ModelKind::FlowSnf: return "flow-snf";
    case ModelKind::FlowBnf: return "flow-bnf";
    case ModelKind::Dpgmm: return "dpgmm";
  }
  return "predictor";
}

std::vector<ModelKind> density_kinds() { return {ModelKind::FlowSnf, ModelKind::FlowBnf, ModelKind::Dpgmm}; }

std::vector<fs::path> cmd_simulate(const ExperimentConfig& config, const RunOptions& options,
                                   const std::optional<std::string>& only) {
  const auto start = Clock::now();
  const fs::path dir = stage_dir(options, "data");
  std::vector<std::string> names = dataset_names();
  if (only) {
    std::string name = *only;
    if (name.find('=') != std::string::npos) name = epr::Intervention::parse(name).dataset_name();
    if (std::find(names.begin(), names.end(), name) == names.end()) {
      throw ValidationError("--only: unknown dataset '" + *only + "'");
    }
    names = {name};
  }
  std::vector<fs::path> outputs;
  std::map<std::string, std::uint64_t> seeds;
  for (const auto& name : names) {
    const auto manifest = dataset_manifest(config, name);
    log(options, "simulating " + name);
    const auto dataset = epr::simulate_dataset(manifest, options.threads);
    outputs.push_back(data_path(options, name));
    epr::write_dataset(dataset, outputs.back());
    seeds["data/" + name] = manifest.seed;
  }
  finish_stage(dir, "simulate", config, {}, outputs, seeds, start);
  return outputs;
}

std::vector<fs::path> cmd_train(ModelKind kind, const ExperimentConfig& config, const RunOptions& options) {
  const auto start = Clock::now();
  const fs::path dir = stage_dir(options, "models");
  const std::string name = model_kind_name(kind);
  const fs::path ckpt = model_path(options, kind);
  const fs::path trace = dir / (name + "_trace.csv");
  const fs::path summary_path = dir / (name + "_summary.json");
  std::map<std::string, std::uint64_t> seeds;
  nlohmann::ordered_json summary;
  std::ostringstream csv;
  fs::path input;

  if (kind == ModelKind::Predictor) {
    input = data_path(options, "train");
    require_file(input, "training dataset");
    const auto pc = predictor_config(config);
    seeds["predictor"] = pc.seed;
    log(options, "training predictor");
    const auto model = predictor::train_predictor(epr::read_dataset(input), pc);
    save_checkpoint(model.to_checkpoint(), ckpt);
    csv << "epoch,loss\n";
    for (std::size_t e = 0; e < model.loss_trace.size(); ++e) csv << e + 1 << "," << fmt_double(model.loss_trace[e]) << "\n";
    summary["train_accuracy"] = model.train_accuracy;
    summary["model_hash"] = model.hash();
  } else {
    input = features_path(options, "train");
    require_file(input, "training features");
    const auto fm = predictor::read_features(input);
    if (kind == ModelKind::Dpgmm) {
      const auto dc = dpgmm_config(config);
      seeds["dpgmm"] = dc.seed;
      log(options, "fitting dpgmm");
      const auto q = dpgmm::fit_advi(fm.values, dc);
      dpgmm::save_posterior(q, ckpt);
      csv << "step,elbo_per_row\n";
      for (std::size_t s = 0; s < q.elbo_trace.size(); ++s) csv << s + 1 << "," << fmt_double(q.elbo_trace[s]) << "\n";
      const auto ll = dpgmm::posterior_log_lik(fm.values, q, config.dpgmm.posterior_draws, dpgmm_score_seed(config),
                                               options.threads);
      summary["train_mean_nll"] = mean_nll(ll);
      summary["effective_components"] = q.effective_components();
    } else {
      const auto fc = flow_config(config, kind);
      seeds[name] = fc.seed;
      log(options, "training " + name);
      const auto stack = flows::train_flow(fm.values, fc, fm.trajectory);
      flows::save_flow(stack, ckpt);
      csv << "epoch,train_nll,validation_nll\n";
      for (std::size_t e = 0; e < stack.train_trace.size(); ++e) {
        csv << e + 1 << "," << fmt_double(stack.train_trace[e]) << ","
            << (e < stack.validation_trace.size() ? fmt_double(stack.validation_trace[e]) : "") << "\n";
      }
      summary["train_mean_nll"] = mean_nll(stack.log_prob(fm.values, options.threads));
      summary["best_epoch"] = stack.best_epoch;
      summary["base_dim"] = stack.base_dim();
    }
    summary["feature_dim"] = fm.dim();
    summary["train_rows"] = fm.rows();
  }
  write_file_atomic(trace, csv.str());
  write_file_atomic(summary_path, summary.dump(2) + "\n");
  std::vector<fs::path> outputs{ckpt, trace, summary_path};
  finish_stage(dir, "train-" + name, config, {input}, outputs, seeds, start);
  return outputs;
}

std::vector<fs::path> cmd_extract_features(const ExperimentConfig& config, const RunOptions& options) {
  const auto start = Clock::now();
  const fs::path model_file = model_path(options, ModelKind::Predictor);
  require_file(model_file, "predictor checkpoint");
  const auto model = predictor::PredictorModel::from_checkpoint(load_checkpoint(model_file));
  const auto names = present(options, false);
  if (names.empty()) throw ValidationError("no datasets under " + (options.out / "data").string());
  const fs::path dir = stage_dir(options, "features");
  std::vector<fs::path> inputs{model_file}, outputs;
  for (const auto& name : names) {
    log(options, "extracting features for " + name);
    inputs.push_back(data_path(options, name));
    const auto fm = predictor::extract_features(model, epr::read_dataset(inputs.back()), options.threads);
    outputs.push_back(features_path(options, name));
    predictor::write_features(fm, outputs.back());
  }
  finish_stage(dir, "extract-features", config, inputs, outputs, {}, start);
  return outputs;
}

std::vector<fs::path> cmd_score(ModelKind kind, const ExperimentConfig& config, const RunOptions& options) {
  if (kind == ModelKind::Predictor) throw ValidationError("score: the predictor is not a density model");
  const auto start = Clock::now();
  const std::string name = model_kind_name(kind);
  const fs::path model_file = model_path(options, kind);
  require_file(model_file, name + " checkpoint");
  const auto names = present(options, true);
  if (names.empty()) throw ValidationError("no features under " + (options.out / "features").string());
  const fs::path dir = options.out / "scores" / name;
  fs::create_directories(dir);

  std::optional<flows::FlowStack> stack;
  std::optional<dpgmm::VariationalPosterior> q;
  std::size_t expected_dim = 0;
  if (kind == ModelKind::Dpgmm) {
    q = dpgmm::load_posterior(model_file);
    expected_dim = q->layout.p;
  } else {
    stack = flows::load_flow(model_file);
    expected_dim = stack->input_dim();
  }

  std::vector<fs::path> inputs{model_file}, outputs;
  std::map<std::string, std::uint64_t> seeds;
  if (q) seeds["dpgmm-score"] = dpgmm_score_seed(config);
  for (const auto& ds : names) {
    log(options, "scoring " + ds + " with " + name);
    inputs.push_back(features_path(options, ds));
    const auto fm = predictor::read_features(inputs.back());
    check_dim(expected_dim, fm, name);
    const auto ll = q ? dpgmm::posterior_log_lik(fm.values, *q, config.dpgmm.posterior_draws, dpgmm_score_seed(config),
                                                 options.threads)
                      : stack->log_prob(fm.values, options.threads);
    std::vector<ScoreRow> rows(ll.size());
    for (std::size_t i = 0; i < ll.size(); ++i) rows[i] = {ds, fm.trajectory[i], fm.window_start[i], ll[i]};
    outputs.push_back(scores_path(options, kind, ds));
    write_file_atomic(outputs.back(), serialize_scores(rows));
  }
  finish_stage(dir, "score-" + name, config, inputs, outputs, seeds, start);
  return outputs;
}

std::vector<fs::path> cmd_report(const ExperimentConfig& config, const RunOptions& options) {
  const auto start = Clock::now();
  std::vector<ModelKind> kinds;
  for (auto k : density_kinds()) {
    if (fs::exists(options.out / "scores" / model_kind_name(k))) kinds.push_back(k);
  }
  if (kinds.empty()) throw ValidationError("report: no scores under " + (options.out / "scores").string());
  auto names = present(options, true);
  if (names.empty()) names = present(options, false);
  if (std::find(names.begin(), names.end(), config.stats.reference) == names.end()) {
    names.insert(names.begin(), config.stats.reference);
  }

  std::vector<fs::path> inputs;
  std::vector<std::string> missing;
  std::vector<ood::LikelihoodSamples> sets;
  for (auto k : kinds) {
    for (const auto& ds : names) {
      const fs::path p = scores_path(options, k, ds);
      if (!fs::exists(p)) {
        missing.push_back(model_kind_name(k) + "/" + ds);
        continue;
      }
      inputs.push_back(p);
      const auto rows = parse_scores(read_file(p));
      std::vector<double> values(rows.size());
      std::vector<std::size_t> traj(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        values[i] = rows[i].loglik;
        traj[i] = rows[i].trajectory;
      }
      if (config.stats.per_trajectory) values = ood::per_trajectory_means(values, traj);
      sets.push_back({ds, model_kind_name(k), std::move(values)});
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw ValidationError("report: missing scores for " + list);
  }

  const fs::path dir = stage_dir(options, "report");
  std::vector<fs::path> outputs;
  const std::uint64_t stats_seed = config.stage_seed("stats");
  for (std::size_t n : config.stats.subsample) {
    ood::SubsampleTestConfig tc{n, config.stats.repetitions, stats_seed, options.threads};
    log(options, "subsample tests with N=" + std::to_string(n));
    const auto report = ood::ood_report(sets, config.stats.reference, tc, config.stats.alpha);
    const std::string stem = "report_N" + std::to_string(n);
    outputs.push_back(dir / (stem + ".txt"));
    write_file_atomic(outputs.back(), "subsample N=" + std::to_string(n) + ", repetitions " +
                                          std::to_string(config.stats.repetitions) + "\n\n" + report.to_text());
    outputs.push_back(dir / (stem + ".csv"));
    write_file_atomic(outputs.back(), report.to_csv());
  }

  // Mean NLL per dataset and estimator.
  std::ostringstream nll_csv, nll_txt;
  nll_csv << "dataset,estimator,mean_nll\n";
  std::size_t w0 = 8;
  for (const auto& ds : names) w0 = std::max(w0, ds.size());
  nll_txt << "mean negative log-likelihood\n" << pad("dataset", w0 + 2);
  for (auto k : kinds) nll_txt << pad(model_kind_name(k), 12);
  nll_txt << "\n";
  for (const auto& ds : names) {
    nll_txt << pad(ds, w0 + 2);
    for (auto k : kinds) {
      for (const auto& s : sets) {
        if (s.dataset == ds && s.estimator == model_kind_name(k)) {
          const double v = mean_nll(s.values);
          nll_csv << ds << "," << s.estimator << "," << fmt_double(v) << "\n";
          nll_txt << pad(fmt_fixed(v, 2), 12);
        }
      }
    }
    nll_txt << "\n";
  }
  outputs.push_back(dir / "nll_table.csv");
  write_file_atomic(outputs.back(), nll_csv.str());
  outputs.push_back(dir / "nll_table.txt");
  write_file_atomic(outputs.back(), nll_txt.str());

  for (auto k : kinds) {
    std::vector<ood::LikelihoodSamples> per_kind;
    for (const auto& s : sets) {
      if (s.estimator == model_kind_name(k)) per_kind.push_back(s);
    }
    outputs.push_back(dir / ("density_" + model_kind_name(k) + ".csv"));
    write_file_atomic(outputs.back(), ood::density_csv(ood::density_export(per_kind)));
  }
  finish_stage(dir, "report", config, inputs, outputs, {{"stats", stats_seed}}, start);
  return outputs;
}

std::vector<fs::path> cmd_pipeline(const ExperimentConfig& config, const RunOptions& options) {
  std::vector<fs::path> all;
  auto add = [&](std::vector<fs::path> v) { all.insert(all.end(), v.begin(), v.end()); };
  add(cmd_simulate(config, options));
  add(cmd_train(ModelKind::Predictor, config, options));
  add(cmd_extract_features(config, options));
  for (auto k : density_kinds()) add(cmd_train(k, config, options));
  for (auto k : density_kinds()) add(cmd_score(k, config, options));
  add(cmd_report(config, options));
  return all;
}

std::string serialize_scores(const std::vector<ScoreRow>& rows) {
  std::string out = "dataset,trajectory,window_start,loglik\n";
  for (const auto& r : rows) {
    out += r.dataset + "," + std::to_string(r.trajectory) + "," + std::to_string(r.window_start) + "," +
           fmt_double(r.loglik) + "\n";
  }
  return out;
}

std::vector<ScoreRow> parse_scores(std::string_view text) {
  auto lines = split(text, '\n');
  if (lines.empty() || trim(lines[0]) != "dataset,trajectory,window_start,loglik") {
    throw ValidationError("score file: bad header");
  }
  std::vector<ScoreRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto line = trim(lines[i]);
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 4) throw ValidationError("score file line " + std::to_string(i + 1) + ": expected 4 fields");
    ScoreRow r;
    r.dataset = std::string(f[0]);
    r.trajectory = static_cast<std::size_t>(parse_u64(f[1]));
    r.window_start = static_cast<std::size_t>(parse_u64(f[2]));
    r.loglik = parse_double(f[3]);
    if (!std::isfinite(r.loglik)) throw ValidationError("score file line " + std::to_string(i + 1) + ": non-finite");
    rows.push_back(std::move(r));
  }
  return rows;
}

double recorded_train_nll(const fs::path& out, ModelKind kind) {
  const fs::path p = out / "models" / (model_kind_name(kind) + "_summary.json");
  require_file(p, "training summary");
  const auto j = nlohmann::json::parse(read_file(p));
  if (!j.contains("train_mean_nll")) throw ValidationError("training summary has no train_mean_nll: " + p.string());
  return j["train_mean_nll"].get<double>();
}

}  // namespace snf::pipeline
