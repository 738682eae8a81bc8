#pragma once

// Command implementations behind the countvb executable. Each command reads
// and writes through the streams it is given and returns a process exit
// code: 0 success, 1 error, 2 fit finished without converging.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "countvb/benchmark.hpp"
#include "countvb/csv.hpp"
#include "countvb/model.hpp"
#include "countvb/simulate.hpp"
#include "countvb/vmp_core.hpp"
#include "countvb/vmp_stream.hpp"

namespace countvb::cli {

inline constexpr int kOk = 0;
inline constexpr int kError = 1;
inline constexpr int kNotConverged = 2;

struct Options {
  std::optional<Family> family;
  std::string input;   // "-" is standard input; empty: standard input (fit) or simulated demo (stream)
  std::string output;  // empty: standard output
  std::string curves;  // fit: curve CSV path; empty: <output>.curves.csv when output is a file
  std::string config;  // JSON model spec
  std::uint64_t seed = 1;
  double tol = 1e-10;
  int max_iter = 500;
  std::size_t n = 0;  // simulate: records (default 500); stream demo: streamed records (default 5000)
  std::size_t n_warm = 100;
  std::size_t f_update = 100;
  std::size_t snapshot_every = 10;
  std::size_t replicates = 20;
  std::size_t burn_in = 20000;
  std::size_t kept = 5000;
  std::size_t thin = 20;
};

inline constexpr std::size_t kGridPoints = 200;

inline ModelSpec load_spec(const Options& opt) {
  ModelSpec spec;
  if (!opt.config.empty()) {
    std::ifstream in(opt.config);
    if (!in) throw DataError("cannot open config '" + opt.config + "'");
    spec = nlohmann::json::parse(in).get<ModelSpec>();
  }
  if (opt.family) spec.family = *opt.family;
  return spec;
}

/// Without explicit terms, every column other than the response and the
/// group gets a smooth term with K = 17.
inline void default_terms(ModelSpec& spec, const std::vector<std::string>& header) {
  if (!spec.smooth.empty() || !spec.linear.empty()) return;
  for (const auto& col : header) {
    if (col == spec.response || (spec.group && col == *spec.group)) continue;
    spec.smooth.push_back({col, 17});
  }
}

struct Curve {
  std::string column;
  std::vector<double> x;
  Prediction pred;
};

/// Fitted mean and bands along each smooth predictor over its training
/// range, other predictors at their training means and group effects zero.
inline std::vector<Curve> fitted_curves(const DesignMap& map, const GaussianQ& g,
                                        const std::vector<std::string>& columns) {
  std::vector<Curve> out;
  std::vector<double> base;
  for (const auto& s : map.linear()) base.push_back(s.mean);
  for (const auto& [pred, basis] : map.smooths()) {
    Curve c;
    c.column = columns.at(pred);
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(kGridPoints), map.P());
    for (std::size_t k = 0; k < kGridPoints; ++k) {
      const double x = basis.raw_lo() + (basis.raw_hi() - basis.raw_lo()) * static_cast<double>(k) /
                                             static_cast<double>(kGridPoints - 1);
      c.x.push_back(x);
      auto record = base;
      record[pred] = x;
      rows.row(static_cast<Eigen::Index>(k)) = map.row(record).c.transpose();
    }
    c.pred = predict(g, rows);
    out.push_back(std::move(c));
  }
  return out;
}

inline void write_curves(std::ostream& os, const std::vector<Curve>& curves) {
  csv::write_row(os, std::vector<std::string>{"column", "x", "mean", "lower95", "upper95"});
  for (const auto& c : curves) {
    for (std::size_t k = 0; k < c.x.size(); ++k) {
      const auto i = static_cast<Eigen::Index>(k);
      os << c.column << ',' << csv::format_number(c.x[k]) << ',' << csv::format_number(c.pred.mean(i)) << ','
         << csv::format_number(c.pred.lower95(i)) << ',' << csv::format_number(c.pred.upper95(i)) << '\n';
    }
  }
}

struct OutputTarget {
  std::ofstream file;
  std::ostream* stream;

  OutputTarget(const std::string& path, std::ostream& fallback) : stream(&fallback) {
    if (path.empty()) return;
    file.open(path);
    if (!file) throw DataError("cannot write '" + path + "'");
    stream = &file;
  }
};

// ---------------------------------------------------------------------------

inline int simulate(const Options& opt, std::ostream& out) {
  const Family family = opt.family.value_or(Family::Poisson);
  const std::size_t n = opt.n == 0 ? 500 : opt.n;
  const auto data = sim::additive(opt.seed, family, n);
  OutputTarget target(opt.output, out);
  csv::write_row(*target.stream, std::vector<std::string>{"y", "x1", "x2"});
  for (std::size_t i = 0; i < n; ++i) csv::write_row(*target.stream, std::vector<double>{data.y[i], data.x1[i], data.x2[i]});
  return kOk;
}

struct LoadedData {
  ModelSpec spec;
  std::vector<std::string> columns;  // predictor columns in design order
  std::vector<std::vector<double>> predictors;
  std::optional<std::vector<std::string>> groups;
  Eigen::VectorXd y;
};

inline LoadedData load_table(const ModelSpec& base, std::istream& in) {
  LoadedData d;
  d.spec = base;
  const auto table = csv::read(in);
  default_terms(d.spec, table.header);
  const auto y = table.numeric_column(d.spec.response);
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(y[i] >= 0.0) || y[i] != std::floor(y[i])) {
      throw DataError("line " + std::to_string(table.line_numbers[i]) + ": response must be a nonnegative integer");
    }
  }
  d.y = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  d.columns = d.spec.predictor_columns();
  for (const auto& col : d.columns) d.predictors.push_back(table.numeric_column(col));
  if (d.spec.group) d.groups = table.text_column(*d.spec.group);
  return d;
}

inline int fit_command(const Options& opt, std::istream& in, std::ostream& out, std::ostream& err) {
  const ModelSpec base = load_spec(opt);
  LoadedData data;
  if (opt.input.empty() || opt.input == "-") {
    data = load_table(base, in);
  } else {
    std::ifstream file(opt.input);
    if (!file) throw DataError("cannot open input '" + opt.input + "'");
    data = load_table(base, file);
  }
  const auto design = assemble_design(data.predictors, data.spec.smooth_terms(), data.groups);
  const auto hyper = data.spec.hyperparameters();
  FitConfig cfg;
  cfg.tol = opt.tol;
  cfg.max_iter = opt.max_iter;
  const FitResult result = fit(data.spec.family, design, data.y, hyper, cfg);

  nlohmann::json doc;
  doc["model"] = data.spec;
  doc["n"] = design.n();
  doc["P"] = design.P();
  doc["block_sizes"] = design.block_sizes;
  doc["predictors"] = data.columns;
  doc["hyper"] = {{"sigma_beta", hyper.sigma_beta},
                  {"A", hyper.A},
                  {"kappa_min", hyper.kappa_min},
                  {"kappa_max", hyper.kappa_max}};
  if (design.map.has_group()) doc["group_levels"] = design.map.group_levels();
  nlohmann::json bases = nlohmann::json::array();
  for (const auto& [pred, basis] : design.map.smooths()) bases.push_back({{"column", data.columns[pred]}, {"basis", basis}});
  doc["bases"] = bases;
  doc["fit"] = result;
  {
    OutputTarget target(opt.output, out);
    *target.stream << doc.dump(2) << '\n';
  }

  std::string curve_path = opt.curves;
  if (curve_path.empty() && !opt.output.empty()) curve_path = opt.output + ".curves.csv";
  if (!curve_path.empty()) {
    std::ofstream curves(curve_path);
    if (!curves) throw DataError("cannot write '" + curve_path + "'");
    write_curves(curves, fitted_curves(design.map, result.gaussian, data.columns));
  }

  if (!result.converged) {
    err << "fit did not converge in " << result.iterations << " iterations\n";
    return kNotConverged;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// stream

/// Pulls records one at a time from a CSV source or from the simulated demo.
class RecordSource {
 public:
  struct Record {
    double y = 0.0;
    std::vector<double> x;
    std::optional<std::string> group;
    std::size_t line = 0;
    std::string error;  // nonempty when the line could not be parsed
  };

  explicit RecordSource(std::istream* in) : in_(in) {}
  explicit RecordSource(sim::Dataset demo) : demo_(std::move(demo)) {
    header_ = {"y", "x1"};
    spec_.response = "y";
    spec_.smooth = {{"x1", 17}};
  }

  /// Reads the header (or infers one from a headerless first record) and
  /// resolves column positions.
  void open(ModelSpec& spec) {
    if (demo_) {
      spec.response = "y";
      spec.smooth = spec_.smooth;
      spec.linear.clear();
      spec.group.reset();
      resolve(spec);
      return;
    }
    std::string line;
    while (std::getline(*in_, line)) {
      ++line_;
      if (!csv::trim(line).empty()) break;
    }
    const auto fields = csv::split(line);
    if (fields.empty() || csv::trim(line).empty()) throw DataError("stream input is empty");
    if (csv::parse_number(fields.front())) {
      header_.push_back("y");
      for (std::size_t j = 1; j < fields.size(); ++j) header_.push_back("x" + std::to_string(j));
      if (spec.group) header_.back() = *spec.group;
      pending_ = line;
    } else {
      header_ = fields;
    }
    default_terms(spec, header_);
    resolve(spec);
  }

  std::optional<Record> next() {
    if (demo_) {
      if (pos_ >= demo_->y.size()) return std::nullopt;
      Record r{demo_->y[pos_], {demo_->x1[pos_]}, std::nullopt, pos_ + 1, {}};
      ++pos_;
      return r;
    }
    std::string line;
    std::size_t number = 0;
    if (pending_) {
      line = *pending_;
      pending_.reset();
      number = line_;
    } else {
      while (true) {
        if (!std::getline(*in_, line)) return std::nullopt;
        ++line_;
        if (!csv::trim(line).empty()) break;
      }
      number = line_;
    }
    Record r;
    r.line = number;
    const auto fields = csv::split(line);
    if (fields.size() != header_.size()) {
      r.error = "line " + std::to_string(number) + ": expected " + std::to_string(header_.size()) + " fields";
      return r;
    }
    const auto y = csv::parse_number(fields[y_col_]);
    if (!y) {
      r.error = "line " + std::to_string(number) + ": response is not a number";
      return r;
    }
    r.y = *y;
    for (auto j : x_cols_) {
      const auto v = csv::parse_number(fields[j]);
      if (!v) {
        r.error = "line " + std::to_string(number) + ": column '" + header_[j] + "' is not a number";
        return r;
      }
      r.x.push_back(*v);
    }
    if (group_col_) r.group = fields[*group_col_];
    return r;
  }

 private:
  void resolve(const ModelSpec& spec) {
    auto index = [&](const std::string& name) {
      for (std::size_t j = 0; j < header_.size(); ++j) {
        if (header_[j] == name) return j;
      }
      throw DataError("missing column '" + name + "'");
    };
    y_col_ = index(spec.response);
    x_cols_.clear();
    for (const auto& col : spec.predictor_columns()) x_cols_.push_back(index(col));
    if (spec.group) group_col_ = index(*spec.group);
  }

  std::istream* in_ = nullptr;
  std::optional<sim::Dataset> demo_;
  std::size_t pos_ = 0;
  ModelSpec spec_;
  std::vector<std::string> header_;
  std::optional<std::string> pending_;
  std::size_t line_ = 0;
  std::size_t y_col_ = 0;
  std::vector<std::size_t> x_cols_;
  std::optional<std::size_t> group_col_;
};

inline nlohmann::json snapshot_json(const StreamSnapshot& snap, const DesignMap& map,
                                    const std::vector<std::string>& columns) {
  const auto& g = snap.fit.gaussian;
  nlohmann::json j;
  j["n"] = snap.n;
  j["ingested"] = snap.ingested;
  j["rejected"] = snap.rejected;
  j["clamped"] = snap.clamped;
  j["mu"] = std::vector<double>(g.mu.data(), g.mu.data() + g.mu.size());
  const Eigen::VectorXd d = g.Sigma.diagonal();
  j["sigma_diag"] = std::vector<double>(d.data(), d.data() + d.size());
  std::vector<double> recip;
  for (const auto& b : snap.fit.variances.blocks) recip.push_back(b.recip_sigma2);
  j["mu_recip_sigma2"] = recip;
  nlohmann::json grid = nlohmann::json::array();
  for (const auto& c : fitted_curves(map, g, columns)) {
    grid.push_back({{"column", c.column},
                    {"x", c.x},
                    {"mean", std::vector<double>(c.pred.mean.data(), c.pred.mean.data() + c.pred.mean.size())},
                    {"lower95", std::vector<double>(c.pred.lower95.data(), c.pred.lower95.data() + c.pred.lower95.size())},
                    {"upper95", std::vector<double>(c.pred.upper95.data(), c.pred.upper95.data() + c.pred.upper95.size())}});
  }
  j["grid"] = grid;
  return j;
}

struct LatencySummary {
  double mean_us = 0.0;
  double median_us = 0.0;
  double p99_us = 0.0;
  double first_half_mean_us = 0.0;
  double second_half_mean_us = 0.0;
};

inline LatencySummary summarize_latency(const std::vector<double>& seconds) {
  LatencySummary s;
  if (seconds.empty()) return s;
  auto mean = [](auto b, auto e) {
    double t = 0.0;
    std::size_t k = 0;
    for (auto it = b; it != e; ++it, ++k) t += *it;
    return k ? 1e6 * t / static_cast<double>(k) : 0.0;
  };
  s.mean_us = mean(seconds.begin(), seconds.end());
  s.median_us = 1e6 * bench::quantile(seconds, 0.5);
  s.p99_us = 1e6 * bench::quantile(seconds, 0.99);
  const auto half = seconds.begin() + static_cast<std::ptrdiff_t>(seconds.size() / 2);
  s.first_half_mean_us = mean(seconds.begin(), half);
  s.second_half_mean_us = mean(half, seconds.end());
  return s;
}

inline int stream_command(const Options& opt, std::istream& in, std::ostream& out, std::ostream& err) {
  if (opt.snapshot_every < 1) throw ParameterError("--snapshot-every must be at least 1");
  if (opt.f_update < 1) throw ParameterError("--f-update must be at least 1");
  ModelSpec spec = load_spec(opt);
  if (spec.family != Family::Poisson) throw ParameterError("streaming supports the Poisson family only");

  std::ifstream file;
  std::optional<RecordSource> source;
  if (opt.input == "-") {
    source.emplace(&in);
  } else if (!opt.input.empty()) {
    file.open(opt.input);
    if (!file) throw DataError("cannot open input '" + opt.input + "'");
    source.emplace(&file);
  } else {
    source.emplace(sim::stream_demo(opt.seed, opt.n_warm + (opt.n == 0 ? 5000 : opt.n)));
  }
  source->open(spec);

  // warm-up
  std::vector<std::vector<double>> xs(spec.predictor_columns().size());
  std::vector<double> ys;
  std::vector<std::string> groups;
  while (ys.size() < opt.n_warm) {
    auto rec = source->next();
    if (!rec) break;
    if (!rec->error.empty()) throw DataError(rec->error);
    ys.push_back(rec->y);
    for (std::size_t j = 0; j < xs.size(); ++j) xs[j].push_back(rec->x[j]);
    if (rec->group) groups.push_back(*rec->group);
  }
  if (ys.size() < opt.n_warm) {
    throw DataError("only " + std::to_string(ys.size()) + " records available for a warm-up of " +
                    std::to_string(opt.n_warm));
  }
  std::optional<std::vector<std::string>> group_opt;
  if (spec.group) group_opt = groups;
  const auto design = assemble_design(xs, spec.smooth_terms(), group_opt);
  FitConfig fit_cfg;
  fit_cfg.tol = opt.tol;
  fit_cfg.max_iter = opt.max_iter;
  StreamConfig stream_cfg;
  stream_cfg.F_update = opt.f_update;
  StreamState state;
  try {
    state = warmup(design, Eigen::Map<const Eigen::VectorXd>(ys.data(), static_cast<Eigen::Index>(ys.size())),
                   spec.hyperparameters(), fit_cfg, stream_cfg);
  } catch (const NumericalError& e) {
    err << "warm-up failed: " << e.what() << "; try a larger --n-warm\n";
    return kError;
  }

  OutputTarget target(opt.output, out);
  const auto columns = spec.predictor_columns();
  auto emit = [&] { *target.stream << snapshot_json(snapshot(state), state.map, columns).dump() << '\n'; };
  emit();

  std::vector<double> latency;
  std::size_t since = 0;
  while (auto rec = source->next()) {
    if (!rec->error.empty()) {
      state.rejected += 1;
      err << "rejected: " << rec->error << '\n';
    } else {
      const auto t0 = std::chrono::steady_clock::now();
      const std::string* group = rec->group ? &*rec->group : nullptr;
      const auto outcome = ingest(state, rec->y, rec->x, group);
      latency.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      if (!outcome.accepted) err << "rejected record at line " << rec->line << ": " << outcome.reason << '\n';
    }
    if (++since == opt.snapshot_every) {
      emit();
      since = 0;
    }
  }

  const auto lat = summarize_latency(latency);
  err << "ingests " << latency.size() << ", rejected " << state.rejected << ", clamped " << state.clamped
      << "; per-ingest latency mean " << lat.mean_us << " us, median " << lat.median_us << " us, p99 "
      << lat.p99_us << " us (first half mean " << lat.first_half_mean_us << " us, second half mean "
      << lat.second_half_mean_us << " us)\n";
  return kOk;
}

// ---------------------------------------------------------------------------

inline int benchmark_command(const Options& opt, std::ostream& out, std::ostream& err) {
  bench::StudyConfig cfg;
  cfg.family = opt.family.value_or(Family::Poisson);
  cfg.n = opt.n == 0 ? 500 : opt.n;
  cfg.fit.tol = opt.tol;
  cfg.fit.max_iter = opt.max_iter;
  cfg.chain.burn_in = opt.burn_in;
  cfg.chain.kept = opt.kept;
  cfg.chain.thin = opt.thin;
  cfg.chain.seed = opt.seed;
  const auto results = bench::run_study(cfg, opt.replicates, opt.seed);
  for (const auto& r : results) {
    err << "replicate seed " << r.seed << ": converged " << r.converged << ", iterations " << r.iterations
        << ", fit " << r.fit_seconds << " s, mcmc " << r.mcmc_seconds << " s";
    if (r.kappa_vb) err << ", mu_q(kappa) " << *r.kappa_vb;
    if (r.acceptance_warning) err << ", acceptance outside [0.1, 0.6]";
    err << '\n';
  }
  OutputTarget target(opt.output, out);
  csv::write_row(*target.stream, std::vector<std::string>{"parameter", "median", "q1", "q3", "iqr"});
  for (const auto& s : bench::summarize(results)) {
    *target.stream << s.parameter << ',' << csv::format_number(s.median) << ',' << csv::format_number(s.q1) << ','
                   << csv::format_number(s.q3) << ',' << csv::format_number(s.q3 - s.q1) << '\n';
  }
  return kOk;
}

}  // namespace countvb::cli
