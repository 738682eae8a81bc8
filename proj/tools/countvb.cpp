#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "countvb/cli.hpp"

int main(int argc, char** argv) {
  using countvb::cli::Options;
  CLI::App app{"Variational Bayes for Poisson and Negative Binomial additive mixed models"};
  app.require_subcommand(1);
  Options opt;
  std::string family;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--family", family, "poisson or negbin");
    cmd->add_option("--output", opt.output, "output path (default standard output)");
    cmd->add_option("--seed", opt.seed, "random seed");
  };
  auto fitting = [&](CLI::App* cmd) {
    cmd->add_option("--input", opt.input, "input CSV ('-' for standard input)");
    cmd->add_option("--config", opt.config, "JSON model specification");
    cmd->add_option("--tol", opt.tol, "relative lower-bound change for convergence");
    cmd->add_option("--max-iter", opt.max_iter, "iteration cap");
  };

  auto* simulate = app.add_subcommand("simulate", "simulate the two-predictor additive design");
  common(simulate);
  simulate->add_option("--n", opt.n, "records (default 500)");

  auto* fit = app.add_subcommand("fit", "batch fit; writes the fit JSON and a fitted-curve CSV");
  common(fit);
  fitting(fit);
  fit->add_option("--curves", opt.curves, "curve CSV path (default <output>.curves.csv)");

  auto* stream = app.add_subcommand("stream", "warm-up fit then one-record-at-a-time updates");
  common(stream);
  fitting(stream);
  stream->add_option("--n", opt.n, "streamed records for the simulated demo (default 5000)");
  stream->add_option("--n-warm", opt.n_warm, "warm-up records");
  stream->add_option("--f-update", opt.f_update, "lag between refreshes of the reference mean");
  stream->add_option("--snapshot-every", opt.snapshot_every, "records between snapshots");

  auto* benchmark = app.add_subcommand("benchmark", "accuracy against reference chains on simulated replicates");
  common(benchmark);
  benchmark->add_option("--tol", opt.tol, "relative lower-bound change for convergence");
  benchmark->add_option("--max-iter", opt.max_iter, "iteration cap");
  benchmark->add_option("--replicates", opt.replicates, "number of replicates");
  benchmark->add_option("--n", opt.n, "records per replicate (default 500)");
  benchmark->add_option("--burn-in", opt.burn_in, "chain burn-in sweeps");
  benchmark->add_option("--kept", opt.kept, "kept draws per chain");
  benchmark->add_option("--thin", opt.thin, "thinning factor");

  CLI11_PARSE(app, argc, argv);

  try {
    if (!family.empty()) opt.family = countvb::parse_family(family);
    if (*simulate) return countvb::cli::simulate(opt, std::cout);
    if (*fit) return countvb::cli::fit_command(opt, std::cin, std::cout, std::cerr);
    if (*stream) return countvb::cli::stream_command(opt, std::cin, std::cout, std::cerr);
    if (*benchmark) return countvb::cli::benchmark_command(opt, std::cout, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return countvb::cli::kError;
  }
  return countvb::cli::kError;
}
