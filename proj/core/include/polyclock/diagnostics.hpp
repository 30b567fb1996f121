#pragma once

#include <span>
#include <vector>

namespace polyclock {

double mean(std::span<const double> x);
// Unbiased sample variance; 0 for fewer than two values.
double variance(std::span<const double> x);

// Sample quantile with linear interpolation between order statistics
// (Hyndman-Fan type 7). `x` need not be sorted.
double quantile(std::span<const double> x, double prob);

// Effective sample size from Geyer's initial monotone positive sequence
// estimator of the integrated autocorrelation time.
double effective_sample_size(std::span<const double> x);

}  // namespace polyclock
