#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "polyclock/app.hpp"
#include "polyclock/errors.hpp"
#include "polyclock/version.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Polyepoch molecular clock: simulate, infer and summarize piecewise-constant rates through time"};
  app.set_version_flag("--version", std::string(polyclock::kVersion));
  app.require_subcommand(1);

  std::string config_path;
  int chains = 0;
  auto* simulate = app.add_subcommand("simulate", "Simulate an alignment on a dated tree");
  simulate->add_option("-c,--config", config_path, "Run configuration file")->required()->check(CLI::ExistingFile);

  auto* infer = app.add_subcommand("infer", "Sample the posterior of the epoch rates");
  infer->add_option("-c,--config", config_path, "Run configuration file")->required()->check(CLI::ExistingFile);
  infer->add_option("-n,--chains", chains, "Independent chains to run (overrides [sampler] chains)")
      ->check(CLI::PositiveNumber);

  std::string trace_path;
  std::string output_path;
  bool log_scale = false;
  auto* summarize = app.add_subcommand("summarize", "Posterior quantiles per epoch from a trace");
  summarize->add_option("-t,--trace", trace_path, "Trace file written by infer")->required()->check(CLI::ExistingFile);
  summarize->add_option("-c,--config", config_path, "Run configuration file")->required()->check(CLI::ExistingFile);
  summarize->add_option("-o,--output", output_path, "Summary file (default: [output] summary)");
  summarize->add_flag("--log-scale", log_scale, "Report log rates (zeta) instead of rates");

  CLI11_PARSE(app, argc, argv);

  try {
    const polyclock::RunConfig config = polyclock::load_run_config(config_path);
    if (*simulate) {
      polyclock::run_simulate(config, std::cout);
      return 0;
    }
    if (*infer) return polyclock::run_infer(config, chains > 0 ? chains : config.chains, std::cout);
    if (*summarize) {
      polyclock::run_summarize(config, trace_path, output_path.empty() ? config.output.summary : output_path,
                               log_scale, std::cout);
      return 0;
    }
  } catch (const polyclock::Error& e) {
    std::cerr << "polyclock: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "polyclock: unexpected error: " << e.what() << '\n';
    return 3;
  }
  return 1;
}
