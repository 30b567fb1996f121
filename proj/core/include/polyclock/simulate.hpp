#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "polyclock/epochs.hpp"
#include "polyclock/phylo_io.hpp"
#include "polyclock/substmodel.hpp"

namespace polyclock {

// Piecewise-constant rate theta_m on the epochs of `grid`.
struct PiecewiseRate {
  EpochGrid grid;
  std::vector<double> theta;
};

// f = exp(c0 + c1 * age), where age = origin - time is measured in years
// before `origin` (normally the most recent tip), so c1 < 0 gives a rate
// that decays into the past.
struct LogLinearRate {
  double c0 = 0.0;
  double c1 = 0.0;
  double origin = 0.0;
};

using RateSpec = std::variant<PiecewiseRate, LogLinearRate>;

// Rate at calendar time t.
double rate_at(const RateSpec& rate, double t);
// Integral of the rate over [older, newer] (calendar times, older <= newer).
double rate_integral(const RateSpec& rate, double older, double newer);
// Expected substitutions on every branch; closed form for log-linear rates.
// Throws ModelError when the rate is not positive and finite on the tree.
std::vector<double> true_branch_integrals(const TimeTree& tree, const RateSpec& rate);

struct SimSpec {
  TimeTree tree;
  RateSpec rate;
  GeneratorModel generator;
  SiteRateModel site_rates;
  int sites = 1;
  std::uint64_t seed = 1;
  // Replace every branch integral by zero (test use).
  bool force_zero_branches = false;
};

struct SimResult {
  Alignment alignment;                   // rows in tip order
  std::vector<double> branch_integrals;  // per branch (child node id)
};

// Root state ~ pi, then each child state drawn from the row of
// exp(r b_i Q) indexed by its parent's state, independently per site.
// Every site draws from its own generator seeded from (seed, site), so the
// output does not depend on how sites are scheduled.
SimResult simulate_alignment(const SimSpec& spec);

// Ground-truth table: one row per branch with child node, parent time,
// child time and b_i.
std::string serialize_sidecar(const TimeTree& tree, std::span<const double> branch_integrals);

// Heterochronous constant-size coalescent tree. `tip_times` are calendar
// sampling times; `pop_size` is in years.
TimeTree coalescent_tree(std::span<const double> tip_times, std::vector<std::string> labels, double pop_size,
                         std::mt19937_64& rng);

}  // namespace polyclock
