#pragma once

// File formats: comma-separated UTF-8 text with a header row, '.' decimal
// separator and raw numeric times. Lines starting with '#' are comments
// (output files carry provenance there). Configuration and parameter
// documents are JSON.
//
//   events      patient_id,time,mark   [extra columns ignored]
//               "NA" as the first mark of a patient: no mark at the index event
//   covariates  patient_id,<name>,...  [optional followup_end column]
//   piecewise   patient_id,covariate,start_time,value

#include <nlohmann/json.hpp>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <unordered_map>
#include <vector>

#include "mmmpp/derived.hpp"
#include "mmmpp/error.hpp"
#include "mmmpp/estimation.hpp"
#include "mmmpp/model.hpp"
#include "mmmpp/stats.hpp"

namespace mmmpp {

inline constexpr const char* kToolName = "mmmpp";
inline constexpr const char* kToolVersion = "0.1.0";

using Json = nlohmann::ordered_json;

// Shortest round-trip representation; "inf"/"-inf"/"nan" for non-finite.
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  if (ec != std::errc{}) throw DomainError("format_double failed");
  return std::string(buf, end);
}

inline std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

// 64-bit FNV-1a, printed as 16 hex digits.
inline std::string fnv1a_hex(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path, 0, "cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes to a sibling temporary file, then renames over `path`.
inline void write_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError(path, 0, "cannot open output file for writing");
    out << content;
    out.flush();
    if (!out) throw ParseError(path, 0, "write failed");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    throw ParseError(path, 0, "rename failed: " + ec.message());
  }
}

// ---------------------------------------------------------------------------
// CSV

struct CsvRow {
  std::size_t line = 0;
  std::vector<std::string> cells;
};

struct CsvTable {
  std::string file;
  std::vector<std::string> header;
  std::vector<CsvRow> rows;

  std::optional<std::size_t> column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }
  std::size_t require_column(std::string_view name) const {
    auto c = column(name);
    if (!c) throw ParseError(file, 1, "missing required column '" + std::string(name) + "'");
    return *c;
  }
};

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline CsvTable parse_csv(const std::string& text, const std::string& file) {
  CsvTable t;
  t.file = file;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool have_header = false;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line_no == 1 && line.size() >= 3 && line.substr(0, 3) == "\xEF\xBB\xBF") line.remove_prefix(3);
    if (line.empty() || line.front() == '#') {
      if (end == text.size()) break;
      continue;
    }
    auto cells = split_csv_line(line);
    if (!have_header) {
      t.header = std::move(cells);
      have_header = true;
    } else {
      if (cells.size() != t.header.size())
        throw ParseError(file, line_no,
                         "expected " + std::to_string(t.header.size()) + " cells, found " + std::to_string(cells.size()));
      t.rows.push_back({line_no, std::move(cells)});
    }
    if (end == text.size()) break;
  }
  if (!have_header) throw ParseError(file, 0, "no header row");
  return t;
}

inline CsvTable read_csv(const std::string& path) { return parse_csv(read_file(path), path); }

// ---------------------------------------------------------------------------
// Configuration

struct CurveConfig {
  std::string covariate;
  std::vector<double> grid;
  std::string base_profile;
};

struct Config {
  ModelSpec spec;
  FitSettings fit;
  std::uint64_t seed = 1;
  std::vector<std::string> standardize;
  std::string piecewise_path;

  std::vector<GroupProfile> profiles;
  std::optional<CurveConfig> curve;
  DerivedSettings derive;

  std::size_t simulate_n_patients = 100;
  double simulate_t_max = 1000.0;

  std::size_t check_n_sim = 20;
  std::size_t check_n_bins = 30;

  std::string hash = "none";  // FNV-1a of the config file bytes
};

namespace detail {

inline std::vector<std::string> string_list(const Json& j, const char* field) {
  if (!j.is_array()) throw ValidationError(field, "must be a list of covariate names");
  std::vector<std::string> out;
  for (const auto& v : j) {
    if (!v.is_string()) throw ValidationError(field, "must be a list of covariate names");
    out.push_back(v.get<std::string>());
  }
  return out;
}

inline void reject_unknown(const Json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ValidationError(where + "." + it.key(), "unknown configuration key");
  }
}

inline CovariateMap covariate_object(const Json& j, const std::string& field) {
  if (!j.is_object()) throw ValidationError(field, "must be an object of covariate values");
  CovariateMap out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_number()) throw ValidationError(field + "." + it.key(), "must be numeric");
    out[it.key()] = it.value().get<double>();
  }
  return out;
}

}  // namespace detail

inline Json spec_to_json(const ModelSpec& spec) {
  return Json{{"n_states", spec.n_states},
              {"mark_family", spec.mark_family},
              {"q_formula", spec.q_formula},
              {"lambda_formula", spec.lambda_formula},
              {"mark_formula", spec.mark_formula},
              {"censoring", to_string(spec.censoring)},
              {"time_unit", spec.time_unit}};
}

inline ModelSpec spec_from_json(const Json& j) {
  ModelSpec spec;
  if (!j.is_object()) throw ValidationError("spec", "must be an object");
  if (j.contains("n_states")) {
    if (!j["n_states"].is_number_integer() || j["n_states"].get<long long>() < 1)
      throw ValidationError("n_states", "must be a positive integer");
    spec.n_states = j["n_states"].get<std::size_t>();
  }
  if (j.contains("mark_family")) spec.mark_family = j["mark_family"].get<std::string>();
  if (j.contains("q_formula")) spec.q_formula = detail::string_list(j["q_formula"], "q_formula");
  if (j.contains("lambda_formula")) spec.lambda_formula = detail::string_list(j["lambda_formula"], "lambda_formula");
  if (j.contains("mark_formula")) spec.mark_formula = detail::string_list(j["mark_formula"], "mark_formula");
  if (j.contains("censoring")) spec.censoring = censoring_from_string(j["censoring"].get<std::string>());
  if (j.contains("time_unit")) spec.time_unit = j["time_unit"].get<std::string>();
  spec.validate();
  return spec;
}

inline Config parse_config_text(const std::string& text, const std::string& name) {
  Config cfg;
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw ParseError(name, 0, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError(name, 0, "configuration must be a JSON object");
  try {
    detail::reject_unknown(j,
                           {"n_states", "mark_family", "q_formula", "lambda_formula", "mark_formula", "censoring",
                            "time_unit", "optimizer", "seed", "standardize", "piecewise_covariates", "derive",
                            "simulate", "check"},
                           "config");
    cfg.spec = spec_from_json(j);
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    cfg.fit.seed = cfg.seed;
    if (j.contains("optimizer")) {
      const Json& o = j["optimizer"];
      detail::reject_unknown(o, {"n_starts", "max_iters", "gradient_tolerance", "jitter_sd"}, "optimizer");
      if (o.contains("n_starts")) cfg.fit.n_starts = o["n_starts"].get<std::size_t>();
      if (o.contains("max_iters")) cfg.fit.max_iters = o["max_iters"].get<std::size_t>();
      if (o.contains("gradient_tolerance")) cfg.fit.gradient_tolerance = o["gradient_tolerance"].get<double>();
      if (o.contains("jitter_sd")) cfg.fit.jitter_sd = o["jitter_sd"].get<double>();
      if (cfg.fit.n_starts < 1) throw ValidationError("optimizer.n_starts", "must be >= 1");
      if (!(cfg.fit.gradient_tolerance > 0.0)) throw ValidationError("optimizer.gradient_tolerance", "must be > 0");
    }
    if (j.contains("standardize")) cfg.standardize = detail::string_list(j["standardize"], "standardize");
    if (j.contains("piecewise_covariates")) cfg.piecewise_path = j["piecewise_covariates"].get<std::string>();
    if (j.contains("derive")) {
      const Json& d = j["derive"];
      detail::reject_unknown(d, {"profiles", "effect_curve", "n_draws", "level"}, "derive");
      if (d.contains("n_draws")) cfg.derive.n_draws = d["n_draws"].get<std::size_t>();
      if (d.contains("level")) cfg.derive.level = d["level"].get<double>();
      if (d.contains("profiles")) {
        for (const auto& p : d["profiles"]) {
          GroupProfile g;
          g.label = p.at("label").get<std::string>();
          g.covariates = detail::covariate_object(p.value("covariates", Json::object()), "derive.profiles." + g.label);
          cfg.profiles.push_back(std::move(g));
        }
      }
      if (d.contains("effect_curve")) {
        const Json& c = d["effect_curve"];
        CurveConfig curve;
        curve.covariate = c.at("covariate").get<std::string>();
        curve.grid = c.at("grid").get<std::vector<double>>();
        curve.base_profile = c.value("base_profile", std::string{});
        cfg.curve = curve;
      }
    }
    if (j.contains("simulate")) {
      const Json& s = j["simulate"];
      detail::reject_unknown(s, {"n_patients", "t_max"}, "simulate");
      if (s.contains("n_patients")) cfg.simulate_n_patients = s["n_patients"].get<std::size_t>();
      if (s.contains("t_max")) cfg.simulate_t_max = s["t_max"].get<double>();
    }
    if (j.contains("check")) {
      const Json& c = j["check"];
      detail::reject_unknown(c, {"n_sim", "n_bins"}, "check");
      if (c.contains("n_sim")) cfg.check_n_sim = c["n_sim"].get<std::size_t>();
      if (c.contains("n_bins")) cfg.check_n_bins = c["n_bins"].get<std::size_t>();
    }
  } catch (const Json::exception& e) {
    throw ParseError(name, 0, std::string("invalid configuration value: ") + e.what());
  }
  cfg.hash = fnv1a_hex(text);
  return cfg;
}

inline Config load_config(const std::string& path) { return parse_config_text(read_file(path), path); }

// ---------------------------------------------------------------------------
// Dataset loading

struct Standardization {
  std::string name;
  double mean = 0.0;
  double sd = 1.0;
};

struct Dataset {
  std::vector<PatientRecord> records;
  ModelSpec spec;
  std::vector<Standardization> standardization;
};

inline std::vector<PatientRecord> load_events(const std::string& path) {
  const CsvTable t = read_csv(path);
  const std::size_t c_id = t.require_column("patient_id");
  const std::size_t c_time = t.require_column("time");
  const std::size_t c_mark = t.require_column("mark");
  std::vector<PatientRecord> records;
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& row : t.rows) {
    const std::string& id = row.cells[c_id];
    if (id.empty()) throw ParseError(path, row.line, "missing patient_id");
    auto time = parse_double(row.cells[c_time]);
    if (!time || !std::isfinite(*time) || *time < 0.0)
      throw ParseError(path, row.line, "patient '" + id + "': time must be a nonnegative number");
    auto [it, inserted] = index.emplace(id, records.size());
    if (inserted) {
      records.emplace_back();
      records.back().id = id;
    }
    PatientRecord& rec = records[it->second];
    const bool first = rec.times.empty();
    if (!first) {
      if (*time == rec.times.back())
        throw ParseError(path, row.line, "patient '" + id + "': duplicate (patient, time) row");
      if (*time < rec.times.back())
        throw ParseError(path, row.line, "patient '" + id + "': times must be strictly increasing");
    }
    const std::string& mark_cell = row.cells[c_mark];
    double mark = 0.0;
    if (mark_cell == "NA") {
      if (!first) throw ParseError(path, row.line, "patient '" + id + "': missing mark");
      rec.has_initial_mark = false;
    } else {
      auto m = parse_double(mark_cell);
      if (!m) throw ParseError(path, row.line, "patient '" + id + "': missing or non-numeric mark");
      if (!(*m >= 0.0) || !std::isfinite(*m))
        throw ParseError(path, row.line, "patient '" + id + "': mark must be a nonnegative number");
      mark = *m;
    }
    rec.times.push_back(*time);
    rec.marks.push_back(mark);
  }
  for (auto& rec : records) {
    rec.time_offset = rec.times.front();
    if (rec.time_offset != 0.0)
      for (double& x : rec.times) x -= rec.time_offset;
  }
  return records;
}

inline void attach_static_covariates(std::vector<PatientRecord>& records, const std::string& path) {
  const CsvTable t = read_csv(path);
  const std::size_t c_id = t.require_column("patient_id");
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t r = 0; r < records.size(); ++r) index.emplace(records[r].id, r);
  std::vector<bool> seen(records.size(), false);
  for (const auto& row : t.rows) {
    const std::string& id = row.cells[c_id];
    auto it = index.find(id);
    if (it == index.end()) continue;  // no events for this patient
    if (seen[it->second]) throw ParseError(path, row.line, "patient '" + id + "' appears more than once");
    seen[it->second] = true;
    PatientRecord& rec = records[it->second];
    for (std::size_t c = 0; c < t.header.size(); ++c) {
      if (c == c_id) continue;
      auto v = parse_double(row.cells[c]);
      if (!v || !std::isfinite(*v))
        throw ParseError(path, row.line, "patient '" + id + "': non-numeric value for '" + t.header[c] + "'");
      if (t.header[c] == "followup_end") {
        rec.followup_end = *v - rec.time_offset;
      } else {
        rec.static_covariates[t.header[c]] = *v;
      }
    }
  }
  for (std::size_t r = 0; r < records.size(); ++r)
    if (!seen[r]) throw ParseError(path, 0, "patient '" + records[r].id + "' missing from covariates file");
}

inline void attach_piecewise_covariates(std::vector<PatientRecord>& records, const std::string& path) {
  const CsvTable t = read_csv(path);
  const std::size_t c_id = t.require_column("patient_id");
  const std::size_t c_name = t.require_column("covariate");
  const std::size_t c_start = t.require_column("start_time");
  const std::size_t c_value = t.require_column("value");
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t r = 0; r < records.size(); ++r) index.emplace(records[r].id, r);
  for (const auto& row : t.rows) {
    auto it = index.find(row.cells[c_id]);
    if (it == index.end()) continue;
    PatientRecord& rec = records[it->second];
    auto start = parse_double(row.cells[c_start]);
    auto value = parse_double(row.cells[c_value]);
    if (!start || !value) throw ParseError(path, row.line, "non-numeric start_time or value");
    StepFunction& fn = rec.piecewise_covariates[row.cells[c_name]];
    const double s = *start - rec.time_offset;
    if (!fn.starts.empty() && !(s > fn.starts.back()))
      throw ParseError(path, row.line, "start_time must be strictly increasing per (patient, covariate)");
    if (fn.starts.empty() && s > 0.0)
      throw ParseError(path, row.line, "first start_time must not be after the patient's first event");
    fn.starts.push_back(s);
    fn.values.push_back(*value);
  }
}

// Centers and scales static covariates by their cohort mean and sample sd;
// with `fixed`, reuses previously recorded constants instead.
inline std::vector<Standardization> standardize(std::vector<PatientRecord>& records,
                                                const std::vector<std::string>& names,
                                                const std::vector<Standardization>* fixed = nullptr) {
  std::vector<Standardization> out;
  if (fixed) {
    for (const auto& s : *fixed) {
      for (auto& r : records) {
        auto it = r.static_covariates.find(s.name);
        if (it != r.static_covariates.end()) it->second = (it->second - s.mean) / s.sd;
      }
      out.push_back(s);
    }
    return out;
  }
  for (const auto& name : names) {
    std::vector<double> v;
    for (const auto& r : records) {
      if (r.piecewise_covariates.count(name))
        throw CovariateError(name, "only static covariates can be standardized");
      auto it = r.static_covariates.find(name);
      if (it == r.static_covariates.end()) throw CovariateError(name, "unknown covariate");
      v.push_back(it->second);
    }
    Standardization s{name, mean(v), sample_sd(v)};
    if (!(s.sd > 0.0)) throw CovariateError(name, "zero variance; cannot standardize");
    for (auto& r : records) {
      double& x = r.static_covariates.find(name)->second;
      x = (x - s.mean) / s.sd;
    }
    out.push_back(s);
  }
  return out;
}

inline Dataset load_dataset(const std::string& events_path, const std::string& covariates_path, const Config& config,
                            const std::vector<Standardization>* fixed_standardization = nullptr) {
  Dataset ds;
  ds.spec = config.spec;
  ds.records = load_events(events_path);
  if (ds.records.empty()) throw ParseError(events_path, 0, "no events");
  if (!covariates_path.empty()) attach_static_covariates(ds.records, covariates_path);
  if (!config.piecewise_path.empty()) attach_piecewise_covariates(ds.records, config.piecewise_path);
  ds.standardization = standardize(ds.records, config.standardize, fixed_standardization);
  for (const auto& rec : ds.records) {
    try {
      validate_record_for_spec(rec, ds.spec);
    } catch (const CovariateError& e) {
      throw ParseError(covariates_path.empty() ? events_path : covariates_path, 0,
                       "unknown covariate '" + e.name() + "' (patient '" + rec.id + "')");
    } catch (const Error& e) {
      throw ParseError(events_path, 0, e.what());
    }
  }
  return ds;
}

// Covariate rows (patient_id column dropped) for cohort simulation.
inline std::vector<CovariateMap> load_covariate_rows(const std::string& path) {
  const CsvTable t = read_csv(path);
  const auto c_id = t.column("patient_id");
  std::vector<CovariateMap> rows;
  for (const auto& row : t.rows) {
    CovariateMap m;
    for (std::size_t c = 0; c < t.header.size(); ++c) {
      if ((c_id && c == *c_id) || t.header[c] == "followup_end") continue;
      auto v = parse_double(row.cells[c]);
      if (!v) throw ParseError(path, row.line, "non-numeric value for '" + t.header[c] + "'");
      m[t.header[c]] = *v;
    }
    rows.push_back(std::move(m));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Parameter documents

inline Json params_to_json(const Parameters& p, const ModelSpec& spec) {
  const std::size_t n = spec.n_states;
  auto slopes = [](const std::vector<std::string>& names, const std::vector<double>& v) {
    Json o = Json::object();
    for (std::size_t c = 0; c < names.size(); ++c) o[names[c]] = v[c];
    return o;
  };
  Json q = Json::array();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      q.push_back(Json{{"from", i + 1}, {"to", j + 1}, {"base", p.q[i][j].base},
                       {"slopes", slopes(spec.q_formula, p.q[i][j].slopes)}});
    }
  Json lambda = Json::array();
  for (std::size_t i = 0; i < n; ++i)
    lambda.push_back(Json{{"base", p.lambda[i].base}, {"slopes", slopes(spec.lambda_formula, p.lambda[i].slopes)}});
  Json marks = Json::array();
  const auto names = spec.family().param_names();
  for (std::size_t i = 0; i < n; ++i) {
    Json m = Json::object();
    for (std::size_t k = 0; k < names.size(); ++k) m[names[k]] = p.marks[i].natural[k];
    m["mean_slopes"] = slopes(spec.mark_formula, p.marks[i].mean_slopes);
    marks.push_back(m);
  }
  return Json{{"delta", p.delta}, {"q", q}, {"lambda", lambda}, {"marks", marks}};
}

// Accepts "base" (rate scale) or "log_base" (linear-predictor intercept)
// for every rate regression; missing slopes default to 0.
inline Parameters params_from_json(const Json& j, const ModelSpec& spec) {
  try {
    const std::size_t n = spec.n_states;
    Parameters p = default_parameters(spec);
    p.delta = j.at("delta").get<std::vector<double>>();
    auto read_rate = [](const Json& o, const std::vector<std::string>& names, RateRegression& r,
                        const std::string& field) {
      if (o.contains("base")) {
        r.base = o["base"].get<double>();
      } else if (o.contains("log_base")) {
        r.base = std::exp(o["log_base"].get<double>());
      } else {
        throw ValidationError(field, "needs 'base' or 'log_base'");
      }
      r.slopes.assign(names.size(), 0.0);
      if (o.contains("slopes")) {
        const Json& s = o["slopes"];
        for (auto it = s.begin(); it != s.end(); ++it) {
          auto pos = std::find(names.begin(), names.end(), it.key());
          if (pos == names.end()) throw ValidationError(field + ".slopes." + it.key(), "covariate not in formula");
          r.slopes[static_cast<std::size_t>(pos - names.begin())] = it.value().get<double>();
        }
      }
    };
    for (const auto& e : j.at("q")) {
      const std::size_t from = e.at("from").get<std::size_t>();
      const std::size_t to = e.at("to").get<std::size_t>();
      if (from < 1 || to < 1 || from > n || to > n || from == to)
        throw ValidationError("q", "invalid state pair");
      read_rate(e, spec.q_formula, p.q[from - 1][to - 1],
                "q[" + std::to_string(from) + "," + std::to_string(to) + "]");
    }
    const Json& lam = j.at("lambda");
    if (lam.size() != n) throw ValidationError("lambda", "needs one entry per state");
    for (std::size_t i = 0; i < n; ++i)
      read_rate(lam[i], spec.lambda_formula, p.lambda[i], "lambda[" + std::to_string(i + 1) + "]");
    const Json& marks = j.at("marks");
    if (marks.size() != n) throw ValidationError("marks", "needs one entry per state");
    const auto names = spec.family().param_names();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < names.size(); ++k) p.marks[i].natural[k] = marks[i].at(names[k]).get<double>();
      p.marks[i].mean_slopes.assign(spec.mark_formula.size(), 0.0);
      if (marks[i].contains("mean_slopes")) {
        const Json& s = marks[i]["mean_slopes"];
        for (auto it = s.begin(); it != s.end(); ++it) {
          auto pos = std::find(spec.mark_formula.begin(), spec.mark_formula.end(), it.key());
          if (pos == spec.mark_formula.end())
            throw ValidationError("marks.mean_slopes." + it.key(), "covariate not in mark_formula");
          p.marks[i].mean_slopes[static_cast<std::size_t>(pos - spec.mark_formula.begin())] = it.value().get<double>();
        }
      }
    }
    p.validate(spec);
    return p;
  } catch (const Json::exception& e) {
    throw ValidationError("parameters", std::string("malformed parameter document: ") + e.what());
  }
}

inline Json matrix_to_json(const Matrix& m) {
  Json out = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    out.push_back(row);
  }
  return out;
}

inline Matrix matrix_from_json(const Json& j) {
  const auto n = static_cast<Eigen::Index>(j.size());
  Matrix m(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(j[static_cast<std::size_t>(i)].size()) != n)
      throw ValidationError("covariance", "must be square");
    for (Eigen::Index k = 0; k < n; ++k) m(i, k) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)].get<double>();
  }
  return m;
}

struct RunInfo {
  std::string config_hash = "none";
  std::uint64_t seed = 0;
};

inline Json provenance_json(const RunInfo& info) {
  return Json{{"tool", kToolName}, {"version", kToolVersion}, {"config_hash", info.config_hash}, {"seed", info.seed}};
}

inline std::string csv_provenance(const RunInfo& info) {
  return std::string("# tool ") + kToolName + " " + kToolVersion + "\n# config_hash " + info.config_hash +
         "\n# seed " + std::to_string(info.seed) + "\n";
}

inline Json fit_to_json(const FitResult& fit, const std::vector<Standardization>& standardization,
                        const RunInfo& info, double level = 0.95) {
  Json j = provenance_json(info);
  j["spec"] = spec_to_json(fit.spec);
  j["layout"] = kWorkingLayoutVersion;
  j["loglik"] = fit.loglik;
  j["n_params"] = fit.n_params();
  j["n_events"] = fit.n_events;
  j["aic"] = fit.aic();
  j["bic"] = fit.bic();
  j["converged"] = fit.converged;
  j["message"] = fit.message;
  j["n_iterations"] = fit.n_iterations;
  j["start_index"] = fit.start_index;
  j["parameters"] = params_to_json(fit.estimates, fit.spec);
  j["working_labels"] = working_labels(fit.spec);
  j["working"] = std::vector<double>(fit.working_estimates.data(),
                                     fit.working_estimates.data() + fit.working_estimates.size());
  if (fit.has_covariance()) {
    j["standard_errors"] = std::vector<double>(fit.standard_errors.data(),
                                               fit.standard_errors.data() + fit.standard_errors.size());
    j["information_positive_definite"] = fit.information_positive_definite;
    j["hessian"] = matrix_to_json(fit.hessian);
    j["covariance"] = matrix_to_json(fit.covariance);
    Json ivs = Json::array();
    for (const auto& iv : confidence_intervals(fit, level))
      ivs.push_back(Json{{"name", iv.name}, {"estimate", iv.estimate}, {"lower", iv.lower}, {"upper", iv.upper},
                         {"reliable", iv.reliable}});
    j["intervals"] = Json{{"level", level}, {"entries", ivs}};
  }
  Json std_json = Json::array();
  for (const auto& s : standardization) std_json.push_back(Json{{"name", s.name}, {"mean", s.mean}, {"sd", s.sd}});
  j["standardization"] = std_json;
  Json starts = Json::array();
  for (const auto& s : fit.starts)
    starts.push_back(Json{{"index", s.index}, {"initial_loglik", s.initial_loglik}, {"final_loglik", s.final_loglik},
                          {"converged", s.converged}, {"iterations", s.iterations}, {"message", s.message}});
  j["starts"] = starts;
  j["warnings"] = fit.warnings;
  return j;
}

struct LoadedParameters {
  FitResult fit;  // covariance present only for fit documents that carry one
  std::vector<Standardization> standardization;
};

// Reads either a fit document or a bare parameter document
// ({"spec": ..., "parameters": ...} or parameters at top level with a spec
// supplied by the caller).
inline LoadedParameters load_parameters(const std::string& path, const std::optional<ModelSpec>& fallback_spec) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::exception& e) {
    throw ParseError(path, 0, std::string("invalid JSON: ") + e.what());
  }
  LoadedParameters out;
  try {
    ModelSpec spec;
    if (j.contains("spec")) {
      spec = spec_from_json(j["spec"]);
    } else if (fallback_spec) {
      spec = *fallback_spec;
    } else {
      throw ValidationError("spec", "parameter document has no spec and no --config was given");
    }
    const Json& pj = j.contains("parameters") ? j["parameters"] : j;
    out.fit = fixed_parameters_result(params_from_json(pj, spec), spec);
    if (j.contains("covariance")) {
      out.fit.covariance = matrix_from_json(j["covariance"]);
      if (out.fit.covariance.rows() != out.fit.working_estimates.size())
        throw ValidationError("covariance", "dimension does not match the working layout");
      out.fit.standard_errors = out.fit.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
      out.fit.information_positive_definite = j.value("information_positive_definite", true);
    }
    if (j.contains("loglik")) out.fit.loglik = j["loglik"].get<double>();
    if (j.contains("converged")) out.fit.converged = j["converged"].get<bool>();
    if (j.contains("standardization"))
      for (const auto& s : j["standardization"])
        out.standardization.push_back({s.at("name").get<std::string>(), s.at("mean").get<double>(), s.at("sd").get<double>()});
  } catch (const Json::exception& e) {
    throw ParseError(path, 0, std::string("malformed parameter document: ") + e.what());
  }
  return out;
}

}  // namespace mmmpp
