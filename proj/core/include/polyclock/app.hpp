#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "polyclock/config.hpp"
#include "polyclock/epochs.hpp"
#include "polyclock/phylo_io.hpp"
#include "polyclock/sampler.hpp"

namespace polyclock {

struct GridConfig {
  std::vector<double> points;
  std::vector<GridSegment> segments;
  std::optional<double> present;

  bool specified() const noexcept { return !points.empty() || !segments.empty(); }
  // `fallback_present` stands in for the present when none is configured.
  EpochGrid build(std::optional<double> fallback_present = std::nullopt) const;
};

enum class SimRateKind { constant, piecewise, loglinear };

struct SimulateConfig {
  int sites = 1000;
  std::uint64_t seed = 1;
  SimRateKind rate = SimRateKind::constant;
  double rate_value = 1e-3;
  double loglinear_c0 = -4.5;
  double loglinear_c1 = -0.05;
  std::vector<double> theta;
  // taxa > 0 draws a coalescent tree instead of reading [data] tree.
  int taxa = 0;
  double sampling_start = 0.0;
  double sampling_end = 0.0;
  double pop_size = 10.0;
  std::uint64_t tree_seed = 1;
  std::string output_prefix;
};

struct OutputConfig {
  std::string trace;
  std::string report;
  std::string checkpoint;
  std::string summary;
  bool log_scale = false;
};

struct RunConfig {
  ConfigFile file;
  std::string tree_path;
  std::string alignment_path;
  std::string dates_path;
  GridConfig grid;
  ModelSpec model;
  SamplerConfig sampler;
  int chains = 1;
  OutputConfig output;
  SimulateConfig simulate;
};

RunConfig read_run_config(const ConfigFile& file);
RunConfig load_run_config(const std::string& path);

// Comment lines carried by every output file.
std::vector<std::string> output_header(const RunConfig& config);

struct LoadedData {
  TimeTree tree;
  Alignment alignment;
  BoundData bound;
};

LoadedData load_data(const RunConfig& config);

struct SimulateOutputs {
  std::string alignment;
  std::string dates;
  std::string truth;
  std::string tree;
};

// Writes <prefix>.fasta, <prefix>.dates.tsv, <prefix>.truth.tsv and
// <prefix>.nwk.
SimulateOutputs run_simulate(const RunConfig& config, std::ostream& log);

// Runs `chains` independent chains (seed, seed + 1, ...). With more than one
// chain, output names gain a ".chainN" suffix before their extension.
// Returns a process exit code.
int run_infer(const RunConfig& config, int chains, std::ostream& log);

struct TraceTable {
  std::vector<std::string> columns;  // including "iteration"
  std::vector<std::vector<double>> values;  // per column

  int column(std::string_view name) const;
  std::size_t row_count() const noexcept { return values.empty() ? 0 : values.front().size(); }
};

TraceTable parse_trace(std::string_view text);

// Per-epoch quantiles of theta = exp(zeta) (or zeta when `log_scale`) and of
// every scalar column over rows with iteration >= `burnin_iterations`.
// Throws Error when fewer than 10 rows remain.
std::string summarize_trace(const TraceTable& trace, const EpochGrid& grid, long burnin_iterations, bool log_scale,
                            const std::vector<std::string>& header = {});

void run_summarize(const RunConfig& config, const std::string& trace_path, const std::string& output_path,
                   bool log_scale, std::ostream& log);

std::string suffixed_path(const std::string& path, int chain, int chains);

}  // namespace polyclock
