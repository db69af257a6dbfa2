#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "poforge/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"po_forge: identification and double-robust estimation for discrete-instrument models"};
  app.require_subcommand(1);
  poforge::CliOptions o;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--model", o.model, "model file or preset:NAME (mto7, headstart5, late3)");
    sub->add_option("--config", o.config, "JSON config");
    sub->add_option("--out", o.out, "report path (default: stdout)");
  };
  auto* identify = app.add_subcommand("identify", "identification report for a model and its functionals");
  common(identify);

  auto* estimate = app.add_subcommand("estimate", "cross-fitted estimates with analytic and bootstrap inference");
  common(estimate);
  estimate->add_option("--data", o.data, "CSV dataset");
  estimate->add_option("--seed", seed, "master seed (fallback: PO_FORGE_SEED)");
  estimate->add_option("--threads", o.threads, "worker threads; never changes results")->check(CLI::PositiveNumber);
  estimate->add_option("--draws", o.draws, "write bootstrap draws as CSV");

  auto* simulate = app.add_subcommand("simulate", "generate data and/or run a Monte Carlo study");
  common(simulate);
  simulate->add_option("--dgp", o.dgp, "simulation spec file or preset:NAME (late3, mto_eimc)");
  simulate->add_option("--data", o.csv, "write the generated dataset here");
  simulate->add_option("--n", o.n, "sample size of the generated dataset")->check(CLI::PositiveNumber);
  simulate->add_option("--reps", o.reps, "Monte Carlo replications (overrides the config)");
  simulate->add_option("--seed", seed, "master seed (fallback: PO_FORGE_SEED)");
  simulate->add_option("--threads", o.threads, "worker threads; never changes results")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);
  for (auto* sub : {estimate, simulate})
    if (sub->parsed() && sub->count("--seed")) o.seed = seed;

  if (identify->parsed()) return poforge::cmd_identify(o, std::cout, std::cerr);
  if (estimate->parsed()) return poforge::cmd_estimate(o, std::cout, std::cerr);
  return poforge::cmd_simulate(o, std::cout, std::cerr);
}
