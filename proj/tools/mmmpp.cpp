// mmmpp command-line tool: fit | decode | simulate | derive | check.
//
// Every failure exits nonzero with a one-line JSON error record on stderr.
// Outputs are written to a temporary file and renamed into place.

#include <CLI11.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mmmpp/mmmpp.hpp"

namespace {

using namespace mmmpp;

struct CommonArgs {
  std::string config;
  std::string events;
  std::string covariates;
  std::string out;
  std::optional<std::uint64_t> seed;
};

struct Args {
  CommonArgs common;
  std::string params;
  std::string piecewise;
  std::optional<std::size_t> n_sim;
  std::optional<std::size_t> n_patients;
  std::optional<double> t_max;
};

void add_common(CLI::App* app, Args& a) {
  app->add_option("--config", a.common.config, "JSON configuration file");
  app->add_option("--events", a.common.events, "events CSV (patient_id,time,mark)");
  app->add_option("--covariates", a.common.covariates, "static covariates CSV");
  app->add_option("--out", a.common.out, "output path")->required();
  app->add_option("--seed", a.common.seed, "random seed (overrides the config)");
}

// "dir/name.csv" + "states" -> "dir/name.states.csv"
std::string sibling(const std::string& out, const std::string& tag) {
  std::filesystem::path p(out);
  const std::string ext = p.has_extension() ? p.extension().string() : std::string(".csv");
  p.replace_extension();
  return p.string() + "." + tag + ext;
}

std::string require(const std::string& value, const char* flag) {
  if (value.empty()) throw ValidationError(flag, "required for this subcommand");
  return value;
}

Config config_or_default(const Args& a) {
  Config cfg = a.common.config.empty() ? Config{} : load_config(a.common.config);
  if (a.common.seed) cfg.seed = *a.common.seed;
  cfg.fit.seed = cfg.seed;
  cfg.derive.seed = cfg.seed;
  if (!a.piecewise.empty()) cfg.piecewise_path = a.piecewise;
  return cfg;
}

RunInfo run_info(const Config& cfg) { return RunInfo{cfg.hash, cfg.seed}; }

LoadedParameters parameters_for(const Args& a, const Config& cfg) {
  const std::optional<ModelSpec> fallback = a.common.config.empty() ? std::nullopt : std::optional(cfg.spec);
  return load_parameters(require(a.params, "--params"), fallback);
}

std::string num(double x) { return format_double(x); }

int cmd_fit(const Args& a) {
  const Config cfg = config_or_default(a);
  require(a.common.config, "--config");
  const Dataset ds = load_dataset(require(a.common.events, "--events"), a.common.covariates, cfg);
  FitSettings settings = cfg.fit;
  if (!a.params.empty()) settings.init_overrides = load_parameters(a.params, cfg.spec).fit.estimates;
  const FitResult res = fit(ds.records, ds.spec, settings);
  write_atomic(a.common.out, fit_to_json(res, ds.standardization, run_info(cfg)).dump(2) + "\n");
  return 0;
}

int cmd_decode(const Args& a) {
  const Config cfg = config_or_default(a);
  const LoadedParameters lp = parameters_for(a, cfg);
  Config data_cfg = cfg;
  data_cfg.spec = lp.fit.spec;
  const Dataset ds =
      load_dataset(require(a.common.events, "--events"), a.common.covariates, data_cfg, &lp.standardization);
  const std::size_t n = ds.spec.n_states;
  std::vector<DecodedPath> paths(ds.records.size());
  std::vector<Matrix> post(ds.records.size());
  parallel_for(ds.records.size(), [&](std::size_t r) {
    paths[r] = viterbi(lp.fit.estimates, ds.records[r], ds.spec);
    post[r] = state_probabilities(lp.fit.estimates, ds.records[r], ds.spec);
  });
  std::ostringstream os;
  os << csv_provenance(run_info(cfg));
  os << "patient_id,time,time_offset,mark,decoded_state";
  for (std::size_t i = 0; i < n; ++i) os << ",posterior_" << (i + 1);
  os << "\n";
  for (std::size_t r = 0; r < ds.records.size(); ++r) {
    const PatientRecord& rec = ds.records[r];
    for (std::size_t k = 0; k < rec.times.size(); ++k) {
      os << csv_escape(rec.id) << ',' << num(rec.times[k]) << ',' << num(rec.time_offset) << ','
         << (k == 0 && !rec.has_initial_mark ? std::string("NA") : num(rec.marks[k])) << ','
         << (paths[r].states[k] + 1);
      for (std::size_t i = 0; i < n; ++i) os << ',' << num(post[r](static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)));
      os << "\n";
    }
  }
  write_atomic(a.common.out, os.str());
  return 0;
}

int cmd_simulate(const Args& a) {
  const Config cfg = config_or_default(a);
  const LoadedParameters lp = parameters_for(a, cfg);
  const ModelSpec& spec = lp.fit.spec;
  const std::size_t n_patients = a.n_patients.value_or(cfg.simulate_n_patients);
  const double t_max = a.t_max.value_or(cfg.simulate_t_max);
  if (n_patients < 1) throw ValidationError("--n-patients", "must be >= 1");
  if (!(t_max > 0.0)) throw ValidationError("--t-max", "must be > 0");

  // Covariate rows are read on the raw scale and mapped onto the model scale
  // with the fit's standardization constants.
  std::vector<CovariateMap> raw_rows;
  if (!a.common.covariates.empty()) raw_rows = load_covariate_rows(a.common.covariates);
  std::vector<CovariateMap> rows = raw_rows;
  for (auto& row : rows)
    for (const auto& s : lp.standardization) {
      auto it = row.find(s.name);
      if (it != row.end()) {
        it->second = (it->second - s.mean) / s.sd;
      }
    }
  const auto names = spec.covariate_names();
  for (const auto& name : names)
    if (rows.empty() || !rows.front().count(name))
      throw CovariateError(name, "simulation needs a value for every covariate used by the model (--covariates)");

  const auto cohort = simulate_cohort(lp.fit.estimates, spec, rows, n_patients, t_max, cfg.seed);
  const RunInfo info = run_info(cfg);

  std::ostringstream ev, st, cv;
  ev << csv_provenance(info) << "patient_id,time,mark\n";
  st << csv_provenance(info) << "patient_id,time,state\n";
  cv << csv_provenance(info) << "patient_id";
  for (const auto& name : names) cv << ',' << csv_escape(name);
  cv << ",followup_end\n";
  for (const auto& sp : cohort) {
    const PatientRecord& rec = sp.record;
    for (std::size_t k = 0; k < rec.times.size(); ++k)
      ev << rec.id << ',' << num(rec.times[k]) << ',' << num(rec.marks[k]) << "\n";
    for (std::size_t k = 0; k < sp.path.states.size(); ++k)
      st << rec.id << ',' << num(sp.path.jump_times[k]) << ',' << (sp.path.states[k] + 1) << "\n";
    cv << rec.id;
    for (const auto& name : names) {
      double v = rec.static_covariates.at(name);
      for (const auto& s : lp.standardization)
        if (s.name == name) v = v * s.sd + s.mean;
      cv << ',' << num(v);
    }
    cv << ',' << num(t_max) << "\n";
  }
  write_atomic(sibling(a.common.out, "states"), st.str());
  write_atomic(sibling(a.common.out, "covariates"), cv.str());
  write_atomic(a.common.out, ev.str());
  return 0;
}

std::string ci_cells(const std::vector<MonteCarloInterval>& ci, std::size_t i) {
  if (ci.empty()) return ",,";
  return num(ci[i].mean) + "," + num(ci[i].lower) + "," + num(ci[i].upper);
}

int cmd_derive(const Args& a) {
  const Config cfg = config_or_default(a);
  const LoadedParameters lp = parameters_for(a, cfg);
  const FitResult& fit = lp.fit;
  std::vector<GroupProfile> profiles = cfg.profiles;
  if (profiles.empty()) {
    GroupProfile ref{"reference", {}};
    for (const auto& name : fit.spec.q_formula) ref.covariates[name] = 0.0;
    profiles.push_back(ref);
  }
  const auto rows = group_table(fit, profiles, cfg.derive);
  const RunInfo info = run_info(cfg);
  std::ostringstream os;
  os << csv_provenance(info) << "group,state,expected_duration,duration_mc_mean,duration_lower,duration_upper,"
     << "time_share,share_mc_mean,share_lower,share_upper\n";
  for (const auto& row : rows)
    for (std::size_t i = 0; i < fit.spec.n_states; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      os << csv_escape(row.label) << ',' << (i + 1) << ',' << num(row.durations[ii]) << ','
         << ci_cells(row.duration_ci, i) << ',' << num(row.shares[ii]) << ',' << ci_cells(row.share_ci, i) << "\n";
    }
  if (cfg.curve) {
    GroupProfile base = profiles.front();
    if (!cfg.curve->base_profile.empty()) {
      bool found = false;
      for (const auto& p : profiles)
        if (p.label == cfg.curve->base_profile) {
          base = p;
          found = true;
        }
      if (!found) throw ValidationError("derive.effect_curve.base_profile", "no profile with this label");
    }
    const auto curve = effect_curve(fit, cfg.curve->covariate, cfg.curve->grid, base, cfg.derive);
    std::ostringstream cs;
    cs << csv_provenance(info) << "covariate,value,share_state1,mc_mean,lower,upper\n";
    for (const auto& pt : curve) {
      cs << csv_escape(cfg.curve->covariate) << ',' << num(pt.value) << ',' << num(pt.point) << ',';
      if (pt.ci) {
        cs << num(pt.ci->mean) << ',' << num(pt.ci->lower) << ',' << num(pt.ci->upper);
      } else {
        cs << ",,";
      }
      cs << "\n";
    }
    write_atomic(sibling(a.common.out, "curve"), cs.str());
  }
  write_atomic(a.common.out, os.str());
  return 0;
}

int cmd_check(const Args& a) {
  const Config cfg = config_or_default(a);
  const LoadedParameters lp = parameters_for(a, cfg);
  Config data_cfg = cfg;
  data_cfg.spec = lp.fit.spec;
  const Dataset ds =
      load_dataset(require(a.common.events, "--events"), a.common.covariates, data_cfg, &lp.standardization);
  const std::size_t n_sim = a.n_sim.value_or(cfg.check_n_sim);
  const auto report = model_check(lp.fit.estimates, ds.spec, ds.records, n_sim, cfg.seed, cfg.check_n_bins);
  const RunInfo info = run_info(cfg);
  std::ostringstream os;
  os << csv_provenance(info) << "variable,statistic,observed,simulated_mean,envelope_lower,envelope_upper,inside\n";
  for (const auto& r : report.rows)
    os << r.variable << ',' << r.statistic << ',' << num(r.observed) << ',' << num(r.simulated_mean) << ','
       << num(r.envelope_lower) << ',' << num(r.envelope_upper) << ',' << (r.inside ? 1 : 0) << "\n";
  std::ostringstream hs;
  hs << csv_provenance(info) << "variable,lower,upper,observed,simulated_mean\n";
  for (const auto& b : report.histogram)
    hs << b.variable << ',' << num(b.lower) << ',' << num(b.upper) << ',' << num(b.observed) << ','
       << num(b.simulated_mean) << "\n";
  write_atomic(sibling(a.common.out, "hist"), hs.str());
  write_atomic(a.common.out, os.str());
  return 0;
}

void print_error(const std::string& kind, const std::string& message, Json extra = Json::object()) {
  Json j{{"error", kind}, {"message", message}};
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  std::cerr << j.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Markov-modulated marked Poisson process models"};
  app.require_subcommand(1);
  Args args;

  auto* fit_cmd = app.add_subcommand("fit", "maximum-likelihood fit");
  add_common(fit_cmd, args);
  fit_cmd->add_option("--params", args.params, "parameter file used as the first start");
  fit_cmd->add_option("--piecewise", args.piecewise, "piecewise covariates CSV");

  auto* decode_cmd = app.add_subcommand("decode", "Viterbi path and posterior state probabilities");
  add_common(decode_cmd, args);
  decode_cmd->add_option("--params", args.params, "fit result or parameter file")->required();
  decode_cmd->add_option("--piecewise", args.piecewise, "piecewise covariates CSV");

  auto* sim_cmd = app.add_subcommand("simulate", "simulate a cohort with ground-truth states");
  add_common(sim_cmd, args);
  sim_cmd->add_option("--params", args.params, "fit result or parameter file")->required();
  sim_cmd->add_option("--n-patients", args.n_patients, "number of patients");
  sim_cmd->add_option("--t-max", args.t_max, "follow-up length per patient");

  auto* derive_cmd = app.add_subcommand("derive", "expected durations, time shares and effect curves");
  add_common(derive_cmd, args);
  derive_cmd->add_option("--params", args.params, "fit result or parameter file")->required();

  auto* check_cmd = app.add_subcommand("check", "simulation-based goodness-of-fit comparison");
  add_common(check_cmd, args);
  check_cmd->add_option("--params", args.params, "fit result or parameter file")->required();
  check_cmd->add_option("--piecewise", args.piecewise, "piecewise covariates CSV");
  check_cmd->add_option("--n-sim", args.n_sim, "number of simulated cohorts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 2;
  }

  try {
    if (fit_cmd->parsed()) return cmd_fit(args);
    if (decode_cmd->parsed()) return cmd_decode(args);
    if (sim_cmd->parsed()) return cmd_simulate(args);
    if (derive_cmd->parsed()) return cmd_derive(args);
    if (check_cmd->parsed()) return cmd_check(args);
  } catch (const ParseError& e) {
    print_error(e.kind(), e.what(), Json{{"file", e.file()}, {"line", e.line()}});
    return 1;
  } catch (const ValidationError& e) {
    print_error(e.kind(), e.what(), Json{{"field", e.field()}});
    return 1;
  } catch (const RecordError& e) {
    print_error(e.kind(), e.what(), Json{{"record_id", e.record_id()}});
    return 1;
  } catch (const Error& e) {
    print_error(e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
  return 1;
}
