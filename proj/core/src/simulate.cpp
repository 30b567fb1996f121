#include "polyclock/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "polyclock/errors.hpp"

namespace polyclock {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

void check_piecewise(const PiecewiseRate& p) {
  if (static_cast<int>(p.theta.size()) != p.grid.epoch_count()) {
    throw ModelError(fmt::format("piecewise rate has {} values for {} epochs", p.theta.size(), p.grid.epoch_count()));
  }
  for (double t : p.theta) {
    if (!(t > 0.0) || !std::isfinite(t)) throw ModelError("piecewise rates must be positive and finite");
  }
}

}  // namespace

double rate_at(const RateSpec& rate, double t) {
  if (const auto* p = std::get_if<PiecewiseRate>(&rate)) {
    check_piecewise(*p);
    return p->theta[p->grid.epoch_of(t)];
  }
  const auto& l = std::get<LogLinearRate>(rate);
  return std::exp(l.c0 + l.c1 * (l.origin - t));
}

double rate_integral(const RateSpec& rate, double older, double newer) {
  if (older > newer) throw ModelError("rate integral bounds are reversed");
  if (const auto* p = std::get_if<PiecewiseRate>(&rate)) {
    check_piecewise(*p);
    const int first = p->grid.epoch_of(newer);
    const int last = p->grid.epoch_of(older);
    double total = 0.0;
    for (int e = first; e <= last; ++e) {
      const double span = std::min(newer, p->grid.newer_bound(e)) - std::max(older, p->grid.older_bound(e));
      if (span > 0.0) total += p->theta[e] * span;
    }
    return total;
  }
  const auto& l = std::get<LogLinearRate>(rate);
  const double age_new = l.origin - newer;
  const double age_old = l.origin - older;
  if (l.c1 == 0.0) return std::exp(l.c0) * (newer - older);
  // exp(c0) / c1 * (exp(c1 a_old) - exp(c1 a_new)), written with expm1 for
  // accuracy on short branches.
  return std::exp(l.c0 + l.c1 * age_new) * std::expm1(l.c1 * (age_old - age_new)) / l.c1;
}

std::vector<double> true_branch_integrals(const TimeTree& tree, const RateSpec& rate) {
  std::vector<double> b(tree.branch_count());
  for (int i = 0; i < tree.branch_count(); ++i) {
    const double older = tree.time(tree.parent(i));
    const double newer = tree.time(i);
    for (double t : {older, newer}) {
      const double f = rate_at(rate, t);
      if (!(f > 0.0) || !std::isfinite(f)) {
        throw ModelError(fmt::format("rate is not positive at time {} on branch {}", t, i));
      }
    }
    b[i] = rate_integral(rate, older, newer);
    if (!(b[i] > 0.0) || !std::isfinite(b[i])) {
      throw ModelError(fmt::format("branch {} has non-positive expected substitutions", i));
    }
  }
  return b;
}

SimResult simulate_alignment(const SimSpec& spec) {
  if (spec.sites < 1) throw ModelError("site count must be at least 1");
  const TimeTree& tree = spec.tree;
  const int states = spec.generator.state_count();
  const int categories = spec.site_rates.category_count();

  SimResult result;
  result.branch_integrals = true_branch_integrals(tree, spec.rate);
  std::vector<double> b = result.branch_integrals;
  if (spec.force_zero_branches) std::fill(b.begin(), b.end(), 0.0);

  // Cumulative transition rows per (branch, category).
  const std::size_t block = static_cast<std::size_t>(states) * states;
  std::vector<double> cumulative(static_cast<std::size_t>(tree.branch_count()) * categories * block);
  for (int i = 0; i < tree.branch_count(); ++i) {
    for (int k = 0; k < categories; ++k) {
      const Eigen::MatrixXd p = transition_matrix(spec.generator, spec.site_rates.rates[k] * b[i]);
      double* out = cumulative.data() + (static_cast<std::size_t>(i) * categories + k) * block;
      for (int a = 0; a < states; ++a) {
        double acc = 0.0;
        for (int s = 0; s < states; ++s) {
          acc += p(a, s);
          out[a * states + s] = acc;
        }
      }
    }
  }
  std::vector<double> root_cumulative(states);
  std::partial_sum(spec.generator.stationary().data(), spec.generator.stationary().data() + states,
                   root_cumulative.begin());

  auto draw = [states](const double* cum, double u) {
    // Scale u by the row total so rounding in the cumulative sum cannot
    // leave a gap at the top.
    u *= cum[states - 1];
    int s = 0;
    while (s + 1 < states && u >= cum[s]) ++s;
    return s;
  };

  const int nodes = tree.node_count();
  const int tips = tree.tip_count();
  std::vector<std::uint8_t> data(static_cast<std::size_t>(tips) * spec.sites);
  std::vector<int> node_state(nodes);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  for (int site = 0; site < spec.sites; ++site) {
    std::mt19937_64 rng(splitmix64(spec.seed ^ splitmix64(static_cast<std::uint64_t>(site))));
    const int k = categories > 1 ? std::uniform_int_distribution<int>(0, categories - 1)(rng) : 0;
    node_state[tree.root()] = draw(root_cumulative.data(), uniform(rng));
    for (int v = nodes - 2; v >= 0; --v) {
      const double* row = cumulative.data() + (static_cast<std::size_t>(v) * categories + k) * block +
                          static_cast<std::size_t>(node_state[tree.parent(v)]) * states;
      node_state[v] = draw(row, uniform(rng));
    }
    for (int t = 0; t < tips; ++t) {
      data[static_cast<std::size_t>(t) * spec.sites + site] = static_cast<std::uint8_t>(node_state[t]);
    }
  }
  std::vector<std::string> taxa(tree.tip_labels().begin(), tree.tip_labels().end());
  result.alignment = Alignment(std::move(taxa), states, spec.sites, std::move(data));
  return result;
}

std::string serialize_sidecar(const TimeTree& tree, std::span<const double> branch_integrals) {
  if (static_cast<int>(branch_integrals.size()) != tree.branch_count()) {
    throw DimensionError("sidecar needs one branch integral per branch");
  }
  std::string out = "branch\tparent_time\tchild_time\tb\n";
  for (int i = 0; i < tree.branch_count(); ++i) {
    fmt::format_to(std::back_inserter(out), "{}\t{:.17g}\t{:.17g}\t{:.17g}\n", i, tree.time(tree.parent(i)),
                   tree.time(i), branch_integrals[i]);
  }
  return out;
}

TimeTree coalescent_tree(std::span<const double> tip_times, std::vector<std::string> labels, double pop_size,
                         std::mt19937_64& rng) {
  const int n = static_cast<int>(tip_times.size());
  if (n < 2) throw ShapeError("coalescent tree needs at least 2 tips");
  if (static_cast<int>(labels.size()) != n) throw ShapeError("one label per tip is required");
  if (!(pop_size > 0.0)) throw ModelError("population size must be positive");

  // Work in age before the most recent sample.
  const double present = *std::max_element(tip_times.begin(), tip_times.end());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return present - tip_times[a] < present - tip_times[b]; });

  std::vector<int> parent(2 * n - 1, -1);
  std::vector<double> time(2 * n - 1);
  for (int i = 0; i < n; ++i) time[i] = tip_times[i];

  std::vector<int> active;
  std::size_t next_sample = 0;
  double age = present - tip_times[order[0]];
  int next_internal = n;
  std::exponential_distribution<double> unit(1.0);
  while (next_internal < 2 * n - 1) {
    while (next_sample < order.size() && present - tip_times[order[next_sample]] <= age) {
      active.push_back(order[next_sample++]);
    }
    const double k = static_cast<double>(active.size());
    const double wait = k >= 2 ? unit(rng) * pop_size / (0.5 * k * (k - 1.0)) : std::numeric_limits<double>::infinity();
    const double next_age =
        next_sample < order.size() ? present - tip_times[order[next_sample]] : std::numeric_limits<double>::infinity();
    if (age + wait >= next_age) {
      age = next_age;
      continue;
    }
    age += wait;
    const auto i = std::uniform_int_distribution<std::size_t>(0, active.size() - 1)(rng);
    auto j = std::uniform_int_distribution<std::size_t>(0, active.size() - 2)(rng);
    if (j >= i) ++j;
    const int node = next_internal++;
    parent[active[i]] = node;
    parent[active[j]] = node;
    time[node] = present - age;
    const int a = active[i];
    const int b = active[j];
    active.erase(std::remove_if(active.begin(), active.end(), [&](int v) { return v == a || v == b; }), active.end());
    active.push_back(node);
  }
  return TimeTree(std::move(parent), std::move(time), std::move(labels));
}

}  // namespace polyclock
