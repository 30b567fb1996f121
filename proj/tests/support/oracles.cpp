#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <boost/math/statistics/anderson_darling.hpp>

namespace polyclock::testing {

MatrixXld expm_taylor(const MatrixXld& a) {
  const long double norm = a.cwiseAbs().colwise().sum().maxCoeff();
  int squarings = 0;
  while (std::ldexp(norm, -squarings) > 0.125L) ++squarings;
  const MatrixXld scaled = a * std::ldexp(1.0L, -squarings);
  const auto n = a.rows();
  MatrixXld result = MatrixXld::Identity(n, n);
  MatrixXld term = MatrixXld::Identity(n, n);
  for (int k = 1; k <= 30; ++k) {
    term = term * scaled / static_cast<long double>(k);
    result += term;
  }
  for (int s = 0; s < squarings; ++s) result = result * result;
  return result;
}

Eigen::MatrixXd expm(const Eigen::MatrixXd& a) { return expm_taylor(a.cast<long double>()).cast<double>(); }

namespace {

std::vector<int> rows_by_tip(const TimeTree& tree, const Alignment& aln) {
  std::vector<int> rows(tree.tip_count(), -1);
  for (int tip = 0; tip < tree.tip_count(); ++tip) {
    for (int r = 0; r < aln.taxon_count(); ++r) {
      if (aln.taxa()[r] == tree.tip_label(tip)) rows[tip] = r;
    }
    if (rows[tip] < 0) throw std::invalid_argument("oracle: tip missing from alignment");
  }
  return rows;
}

// P for every (category, branch), long double.
std::vector<std::vector<MatrixXld>> transition_matrices(const TimeTree& tree, std::span<const double> b,
                                                        const Eigen::MatrixXd& q, std::span<const double> rates) {
  std::vector<std::vector<MatrixXld>> p(rates.size());
  const MatrixXld ql = q.cast<long double>();
  for (std::size_t k = 0; k < rates.size(); ++k) {
    for (int node = 0; node < tree.branch_count(); ++node) {
      p[k].push_back(expm_taylor(ql * (static_cast<long double>(rates[k]) * b[node])));
    }
  }
  return p;
}

}  // namespace

double brute_force_log_likelihood(const TimeTree& tree, const Alignment& aln, std::span<const double> b,
                                  const Eigen::MatrixXd& q, const Eigen::VectorXd& pi, std::span<const double> rates,
                                  std::span<const double> weights) {
  const int n = tree.tip_count();
  const int s = static_cast<int>(q.rows());
  const int internal = n - 1;
  const auto rows = rows_by_tip(tree, aln);
  const auto p = transition_matrices(tree, b, q, rates);

  long double total = 0.0L;
  std::vector<int> state(tree.node_count());
  for (int site = 0; site < aln.site_count(); ++site) {
    long double site_lik = 0.0L;
    for (std::size_t k = 0; k < rates.size(); ++k) {
      long double cat_lik = 0.0L;
      long assignments = 1;
      for (int i = 0; i < internal; ++i) assignments *= s;
      for (long code = 0; code < assignments; ++code) {
        long c = code;
        for (int node = n; node < tree.node_count(); ++node) {
          state[node] = static_cast<int>(c % s);
          c /= s;
        }
        long double prod = pi[state[tree.root()]];
        for (int node = n; node < tree.root(); ++node) {
          prod *= p[k][node](state[tree.parent(node)], state[node]);
        }
        for (int tip = 0; tip < n; ++tip) {
          const int from = state[tree.parent(tip)];
          const std::uint8_t y = aln.at(rows[tip], site);
          if (y == kMissing) {
            long double sum = 0.0L;
            for (int j = 0; j < s; ++j) sum += p[k][tip](from, j);
            prod *= sum;
          } else {
            prod *= p[k][tip](from, y);
          }
        }
        cat_lik += prod;
      }
      site_lik += weights[k] * cat_lik;
    }
    total += std::log(site_lik);
  }
  return static_cast<double>(total);
}

double unscaled_log_likelihood(const TimeTree& tree, const Alignment& aln, std::span<const double> b,
                               const Eigen::MatrixXd& q, const Eigen::VectorXd& pi, std::span<const double> rates,
                               std::span<const double> weights) {
  const int n = tree.tip_count();
  const int s = static_cast<int>(q.rows());
  const auto rows = rows_by_tip(tree, aln);
  const auto p = transition_matrices(tree, b, q, rates);

  long double total = 0.0L;
  std::vector<std::vector<long double>> partial(tree.node_count(), std::vector<long double>(s));
  for (int site = 0; site < aln.site_count(); ++site) {
    long double site_lik = 0.0L;
    for (std::size_t k = 0; k < rates.size(); ++k) {
      for (int tip = 0; tip < n; ++tip) {
        const std::uint8_t y = aln.at(rows[tip], site);
        for (int j = 0; j < s; ++j) partial[tip][j] = (y == kMissing || y == j) ? 1.0L : 0.0L;
      }
      for (int node = n; node < tree.node_count(); ++node) {
        for (int i = 0; i < s; ++i) {
          long double v = 1.0L;
          for (int child : tree.children(node)) {
            long double sum = 0.0L;
            for (int j = 0; j < s; ++j) sum += p[k][child](i, j) * partial[child][j];
            v *= sum;
          }
          partial[node][i] = v;
        }
      }
      long double cat_lik = 0.0L;
      for (int i = 0; i < s; ++i) cat_lik += pi[i] * partial[tree.root()][i];
      site_lik += weights[k] * cat_lik;
    }
    total += std::log(site_lik);
  }
  return static_cast<double>(total);
}

double central_difference(const std::function<double(std::span<const double>)>& f, std::vector<double> x,
                          std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double up = f(x);
  x[i] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

double five_point_difference(const std::function<double(std::span<const double>)>& f, std::vector<double> x,
                             std::size_t i, double h) {
  const double x0 = x[i];
  auto at = [&](double offset) {
    x[i] = x0 + offset;
    return f(x);
  };
  return (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
}

double ks_statistic(std::vector<double> sample, const std::function<double(double)>& cdf) {
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double f = cdf(sample[i]);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

double ks_p_value(double statistic, std::size_t n) {
  const double sn = std::sqrt(static_cast<double>(n));
  const double lambda = (sn + 0.12 + 0.11 / sn) * statistic;
  if (lambda < 0.2) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 == 1 ? 2.0 : -2.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(sum, 0.0, 1.0);
}

double anderson_darling_p_value(double a2) {
  double cdf;
  if (a2 <= 0.0) return 1.0;
  if (a2 < 2.0) {
    cdf = std::exp(-1.2337141 / a2) / std::sqrt(a2) *
          (2.00012 + (0.247105 - (0.0649821 - (0.0347962 - (0.011672 - 0.00168691 * a2) * a2) * a2) * a2) * a2);
  } else {
    cdf = std::exp(-std::exp(1.0776 - (2.30695 - (0.43424 - (0.082433 - (0.008056 - 0.0003146 * a2) * a2) * a2) * a2) * a2));
  }
  return std::clamp(1.0 - cdf, 0.0, 1.0);
}

double anderson_darling_standard_normal(std::vector<double> sample) {
  std::sort(sample.begin(), sample.end());
  return boost::math::statistics::anderson_darling_normality_statistic(sample, 0.0, 1.0);
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(rx.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace polyclock::testing
