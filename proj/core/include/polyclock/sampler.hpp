#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "polyclock/epochs.hpp"
#include "polyclock/likelihood.hpp"
#include "polyclock/phylo_io.hpp"
#include "polyclock/priors.hpp"
#include "polyclock/substmodel.hpp"

namespace polyclock {

using Rng = std::mt19937_64;

// ---------------------------------------------------------------------------
// Hamiltonian Monte Carlo on an unconstrained target

class LogDensity {
 public:
  virtual ~LogDensity() = default;
  virtual int dimension() const = 0;
  // Returns log density at x and writes its gradient.
  virtual double evaluate(std::span<const double> x, std::span<double> gradient) = 0;
};

struct Trajectory {
  std::vector<double> position;
  std::vector<double> momentum;
  std::vector<double> gradient;
  double log_density = 0.0;
  bool finite = true;
};

// L leapfrog steps of size eps with identity mass matrix, starting from a
// point whose gradient is already known. Stops early if the density or
// gradient becomes non-finite.
Trajectory leapfrog(LogDensity& target, std::span<const double> position, std::span<const double> momentum,
                    std::span<const double> gradient, double log_density, double step_size, int steps);

struct HmcOutcome {
  bool accepted = false;
  bool divergent = false;
  double acceptance_probability = 0.0;
  double energy_change = 0.0;  // H(proposal) - H(current)
};

// One HMC transition. `position`, `log_density` and `gradient` describe the
// current point and are replaced on acceptance.
HmcOutcome hmc_update(LogDensity& target, std::vector<double>& position, double& log_density,
                      std::vector<double>& gradient, double step_size, int steps, Rng& rng);

// Nesterov dual averaging of log step size toward a target acceptance rate
// (gamma = 0.05, t0 = 10, kappa = 0.75).
class DualAveraging {
 public:
  DualAveraging(double initial_step_size, double target_acceptance);
  void update(double acceptance_probability);
  double step_size() const noexcept { return step_; }
  double averaged_step_size() const noexcept;

 private:
  double mu_;
  double target_;
  double step_;
  double h_bar_ = 0.0;
  double log_step_bar_ = 0.0;
  long count_ = 0;
};

// ---------------------------------------------------------------------------
// Model and configuration

enum class SubstitutionKind { jc, hky, gtr };

struct SubstitutionSpec {
  SubstitutionKind kind = SubstitutionKind::hky;
  double kappa = 2.0;
  std::array<double, 6> gtr_rates{1.0, 1.0, 1.0, 1.0, 1.0, 1.0};  // AC AG AT CG CT GT
  std::vector<double> frequencies;  // empty: empirical frequencies of the data
  bool estimate = false;            // random-walk kappa / GTR rates (GT fixed at 1)
  int categories = 1;
  double alpha = 1.0;
  bool estimate_alpha = false;
};

GeneratorModel make_generator(const SubstitutionSpec& spec, double kappa, std::span<const double> gtr_rates,
                              std::span<const double> frequencies);

// Priors on substitution parameters: kappa ~ LogNormal(1, 1.25); free GTR
// exchangeabilities ~ Gamma(shape 0.05, scale 10); alpha ~ Exponential(mean 0.5).
double kappa_log_prior(double kappa);
double gtr_rate_log_prior(double rate);
double alpha_log_prior(double alpha);

struct ModelSpec {
  SubstitutionSpec substitution;
  HyperPriors hyper;
  GmrfOptions gmrf;
};

struct SamplerConfig {
  long iterations = 10000;
  long thinning = 10;
  double burnin = 0.1;  // fraction of iterations
  int leapfrog_steps = 20;
  double step_size = 0.05;  // initial HMC step size
  double target_acceptance = 0.8;
  double rho_scale = 0.5;           // sd of the logit-scale random walk
  double substitution_scale = 0.2;  // sd of the log-scale random walks
  std::uint64_t seed = 1;
  double weight_zeta = 10.0;
  double weight_tau = 1.0;
  double weight_rho = 1.0;
  double weight_substitution = 1.0;
  long audit_interval = 1000;
  bool likelihood_enabled = true;  // false samples the prior only

  void validate() const;
  long burnin_iterations() const noexcept { return static_cast<long>(burnin * static_cast<double>(iterations)); }
};

struct ChainState {
  long iteration = 0;
  std::vector<double> zeta;
  double tau = 1.0;
  double rho = 0.99;
  double kappa = 2.0;
  std::array<double, 6> gtr_rates{1.0, 1.0, 1.0, 1.0, 1.0, 1.0};
  double alpha = 1.0;
  double log_likelihood = 0.0;
  double log_prior = 0.0;
  std::vector<double> branch_integrals;
};

// ---------------------------------------------------------------------------
// Gibbs / Metropolis kernels usable on their own

// tau | zeta, rho ~ Gamma(a + tau_exponent, rate b + q / 2) with
// q = zeta' (D_w - rho W) zeta.
double draw_tau(std::span<const double> zeta, const GmrfModel& gmrf, const HyperPriors& hyper, Rng& rng);

// Log target of rho in (0, 1), including the rho-dependent normalizer
// (1/2) log det (D_w - rho W) of the zeta prior.
double rho_log_target(std::span<const double> zeta, const GmrfModel& gmrf, double rho, const HyperPriors& hyper);

// Log Metropolis-Hastings ratio for moving rho_old -> rho_new with a
// symmetric random walk on logit(rho); includes the logit Jacobian.
double rho_log_acceptance(std::span<const double> zeta, const GmrfModel& gmrf, const HyperPriors& hyper,
                          double rho_old, double rho_new);

// Crude strict-clock rate: pairwise JC distances over pairwise path times.
double pairwise_rate_estimate(const BoundData& data);

// ---------------------------------------------------------------------------
// Trace output

// Delimited trace: '#' comment lines, one tab-separated header row, then
// one row per logged iteration. Columns are fixed at construction.
class TraceWriter {
 public:
  TraceWriter(std::ostream& out, std::vector<std::string> columns, std::vector<std::string> comments = {});
  void write_row(long iteration, std::span<const double> values);
  void flush();
  const std::vector<std::string>& columns() const noexcept { return columns_; }

 private:
  std::ostream* out_;
  std::vector<std::string> columns_;
};

struct OperatorStats {
  std::string name;
  long proposed = 0;
  long accepted = 0;
  double acceptance_rate() const noexcept {
    return proposed > 0 ? static_cast<double>(accepted) / static_cast<double>(proposed) : 0.0;
  }
};

struct RunReport {
  long iterations = 0;
  long burnin_iterations = 0;
  std::vector<OperatorStats> operators;
  long divergences = 0;
  long divergences_after_burnin = 0;
  long hmc_moves_after_burnin = 0;
  double divergence_fraction = 0.0;  // of post-burn-in HMC moves
  bool divergence_warning = false;   // fraction > 5%
  double final_step_size = 0.0;
  std::vector<std::string> ess_columns;
  std::vector<double> ess;
  double wall_time_seconds = 0.0;
  std::vector<std::string> warnings;
};

// `header` lines (tool version, config hash, ...) go first, under "header".
std::string report_to_json(const RunReport& report, const std::vector<std::string>& header = {});

// ---------------------------------------------------------------------------
// HMC-within-Gibbs chain

// Posterior over (zeta, tau, rho, substitution parameters) on a fixed tree.
// Each iteration applies one operator chosen with probability proportional
// to its weight: HMC on zeta, Gibbs on tau, random walk on logit rho (only
// when rho is estimated) and log-scale random walks on substitution
// parameters (only when estimated).
class Chain {
 public:
  Chain(const BoundData& data, const EpochGrid& grid, ModelSpec model, SamplerConfig config, int threads = 0);
  ~Chain();
  Chain(const Chain&) = delete;
  Chain& operator=(const Chain&) = delete;

  const ChainState& state() const noexcept { return state_; }
  const SamplerConfig& config() const noexcept { return config_; }
  const GmrfModel& gmrf() const noexcept { return gmrf_; }
  const OccupancyMatrix& occupancy() const noexcept { return occupancy_; }
  double step_size() const noexcept { return step_size_; }

  // Replace the rate field (recomputes caches).
  void set_zeta(std::vector<double> zeta);
  void set_tau(double tau);

  HmcOutcome hmc_update_zeta();
  double gibbs_update_tau();
  bool mh_update_rho();
  bool mh_update_substitution();

  // Recompute likelihood and prior from scratch; returns the largest
  // absolute discrepancy from the cached values.
  double audit();

  // Log posterior of zeta given the other parameters (likelihood plus GMRF
  // prior, up to a zeta-independent constant) and its gradient. Leaves the
  // chain state untouched.
  double zeta_log_density(std::span<const double> zeta, std::span<double> gradient);

  std::vector<std::string> trace_columns() const;
  std::vector<double> trace_values() const;

  // Runs all configured iterations, writing trace rows every `thinning`
  // iterations (including iteration 0) and a checkpoint at every audit.
  RunReport run(TraceWriter* trace, const std::string& checkpoint_path = {});
  void write_checkpoint(const std::string& path) const;
  // Lines recorded under "header" in every checkpoint.
  void set_output_header(std::vector<std::string> lines) { header_ = std::move(lines); }

 private:
  class ZetaTarget;

  double compute_log_prior() const;
  double compute_log_likelihood();
  GeneratorModel current_generator() const;
  SiteRateModel current_site_rates() const;

  const BoundData* data_;
  EpochGrid grid_;
  ModelSpec model_;
  SamplerConfig config_;
  OccupancyMatrix occupancy_;
  std::vector<double> frequencies_;
  std::unique_ptr<TreeLikelihood> likelihood_;
  GmrfModel gmrf_;
  std::unique_ptr<ZetaTarget> target_;
  Rng rng_;
  ChainState state_;
  ChainState checkpoint_state_;
  double zeta_log_density_ = 0.0;
  std::vector<double> zeta_gradient_;
  double step_size_;
  std::vector<std::string> header_;
};

}  // namespace polyclock
