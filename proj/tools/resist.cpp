#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "resist/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"ResIST training simulator"};
  app.require_subcommand(1);

  std::string run_config, compare_config, sweep_config, fit_csv;
  auto* run = app.add_subcommand("run", "execute one configured protocol run");
  run->add_option("config", run_config, "JSON config file")->required();
  auto* compare =
      app.add_subcommand("compare", "run several methods on shared seed/data");
  compare->add_option("config", compare_config, "JSON config file")->required();
  auto* sweep = app.add_subcommand("sweep", "sweep the local-iteration count");
  sweep->add_option("config", sweep_config, "JSON config file")->required();
  auto* fit = app.add_subcommand("fit", "fit a convergence rate to metrics");
  fit->add_option("metrics", fit_csv, "metrics CSV from a run")->required();

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) return resist::cmd_run(run_config, std::cout, std::cerr);
  if (compare->parsed())
    return resist::cmd_compare(compare_config, std::cout, std::cerr);
  if (sweep->parsed())
    return resist::cmd_sweep(sweep_config, std::cout, std::cerr);
  if (fit->parsed()) return resist::cmd_fit(fit_csv, std::cout, std::cerr);
  return 1;
}
