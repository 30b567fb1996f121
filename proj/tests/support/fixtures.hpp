#pragma once

#include <array>
#include <random>
#include <string>
#include <vector>

#include "polyclock/epochs.hpp"
#include "polyclock/phylo_io.hpp"
#include "polyclock/simulate.hpp"
#include "polyclock/substmodel.hpp"

namespace polyclock::testing {

inline std::vector<std::string> taxon_labels(int n) {
  std::vector<std::string> labels;
  for (int i = 0; i < n; ++i) labels.push_back("t" + std::to_string(i + 1));
  return labels;
}

// Coalescent tree with tips sampled uniformly over [present - spread, present].
inline TimeTree random_tree(int taxa, std::mt19937_64& rng, double spread = 10.0, double pop_size = 10.0,
                            double present = 2020.0) {
  std::uniform_real_distribution<double> u(present - spread, present);
  std::vector<double> times(taxa);
  for (auto& t : times) t = u(rng);
  if (spread > 0.0) times[0] = present;
  return coalescent_tree(times, taxon_labels(taxa), pop_size, rng);
}

// Uniform random states; each cell missing with probability `missing`.
inline Alignment random_alignment(const std::vector<std::string>& taxa, int sites, std::mt19937_64& rng,
                                  double missing = 0.0, int states = 4) {
  std::uniform_int_distribution<int> state(0, states - 1);
  std::bernoulli_distribution gap(missing);
  std::vector<std::uint8_t> data;
  for (std::size_t r = 0; r < taxa.size(); ++r) {
    for (int c = 0; c < sites; ++c) data.push_back(gap(rng) ? kMissing : static_cast<std::uint8_t>(state(rng)));
  }
  return Alignment(taxa, states, sites, std::move(data));
}

inline std::vector<double> random_simplex(int n, std::mt19937_64& rng, double floor = 0.05) {
  std::uniform_real_distribution<double> u(floor, 1.0);
  std::vector<double> p(n);
  double sum = 0.0;
  for (auto& v : p) sum += (v = u(rng));
  for (auto& v : p) v /= sum;
  return p;
}

inline std::array<double, 6> random_gtr_rates(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 5.0);
  std::array<double, 6> r{};
  for (auto& v : r) v = u(rng);
  return r;
}

inline GeneratorModel random_gtr(std::mt19937_64& rng) {
  const auto r = random_gtr_rates(rng);
  const auto pi = random_simplex(4, rng);
  return gtr(r, pi);
}

// Grid points drawn uniformly over [oldest, newest], kept at least `min_gap` apart.
inline EpochGrid random_grid(int points, double newest, double oldest, std::mt19937_64& rng,
                             double min_gap = 1e-3) {
  std::uniform_real_distribution<double> u(oldest, newest);
  std::vector<double> w;
  while (static_cast<int>(w.size()) < points) {
    const double x = u(rng);
    bool ok = true;
    for (double y : w) ok = ok && std::abs(x - y) > min_gap;
    if (ok) w.push_back(x);
  }
  return EpochGrid(std::move(w));
}

}  // namespace polyclock::testing
