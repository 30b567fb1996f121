#include "polyclock/priors.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include <fmt/format.h>

#include "polyclock/errors.hpp"

namespace polyclock {

GmrfModel::GmrfModel(std::span<const double> midpoint_gaps, double rho, double tau, GmrfOptions options)
    : rho_(rho), tau_(tau), options_(options) {
  if (midpoint_gaps.empty()) throw ModelError("GMRF needs at least one grid point");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ModelError(fmt::format("GMRF precision must be positive, got {}", tau));
  if (!std::isfinite(rho) || std::abs(rho) > 1.0 || (std::abs(rho) == 1.0 && !options_.allow_improper)) {
    throw ModelError(fmt::format("|rho| must be < 1 for a proper GMRF prior, got {}", rho));
  }
  weights_.resize(midpoint_gaps.size());
  for (std::size_t m = 0; m < midpoint_gaps.size(); ++m) {
    const double d = midpoint_gaps[m];
    if (!(d > 0.0) || !std::isfinite(d)) throw ModelError("midpoint gaps must be positive");
    weights_[m] = options_.weighting == GapWeighting::inverse_gap ? 1.0 / d : d;
  }
  diagonal_.assign(weights_.size() + 1, 0.0);
  for (std::size_t m = 0; m < weights_.size(); ++m) {
    diagonal_[m] += weights_[m];
    diagonal_[m + 1] += weights_[m];
  }
}

GmrfModel GmrfModel::with_rho(double rho) const {
  GmrfModel m = *this;
  if (!std::isfinite(rho) || std::abs(rho) > 1.0 || (std::abs(rho) == 1.0 && !options_.allow_improper)) {
    throw ModelError(fmt::format("|rho| must be < 1 for a proper GMRF prior, got {}", rho));
  }
  m.rho_ = rho;
  return m;
}

GmrfModel GmrfModel::with_tau(double tau) const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ModelError(fmt::format("GMRF precision must be positive, got {}", tau));
  GmrfModel m = *this;
  m.tau_ = tau;
  return m;
}

void GmrfModel::check_dimension(std::size_t n) const {
  if (n != diagonal_.size()) {
    throw DimensionError(fmt::format("zeta has {} entries, GMRF dimension is {}", n, diagonal_.size()));
  }
}

double GmrfModel::quadratic_form(std::span<const double> zeta) const {
  check_dimension(zeta.size());
  double q = 0.0;
  for (std::size_t j = 0; j < diagonal_.size(); ++j) q += diagonal_[j] * zeta[j] * zeta[j];
  for (std::size_t m = 0; m < weights_.size(); ++m) q -= 2.0 * rho_ * weights_[m] * zeta[m] * zeta[m + 1];
  return q;
}

void GmrfModel::precision_multiply(std::span<const double> zeta, std::span<double> out) const {
  check_dimension(zeta.size());
  check_dimension(out.size());
  const std::size_t n = diagonal_.size();
  for (std::size_t j = 0; j < n; ++j) {
    double v = diagonal_[j] * zeta[j];
    if (j > 0) v -= rho_ * weights_[j - 1] * zeta[j - 1];
    if (j + 1 < n) v -= rho_ * weights_[j] * zeta[j + 1];
    out[j] = v;
  }
}

double GmrfModel::log_determinant() const {
  // Pivots of the LDL' factorization of a symmetric tridiagonal matrix.
  double pivot = diagonal_[0];
  if (!(pivot > 0.0)) return -std::numeric_limits<double>::infinity();
  double logdet = std::log(pivot);
  for (std::size_t j = 1; j < diagonal_.size(); ++j) {
    const double off = rho_ * weights_[j - 1];
    pivot = diagonal_[j] - off * off / pivot;
    if (!(pivot > 1e-300)) return -std::numeric_limits<double>::infinity();
    logdet += std::log(pivot);
  }
  return logdet;
}

Eigen::MatrixXd GmrfModel::dense_precision() const {
  const int n = dimension();
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  for (int j = 0; j < n; ++j) a(j, j) = diagonal_[j];
  for (int m = 0; m + 1 < n; ++m) a(m, m + 1) = a(m + 1, m) = -rho_ * weights_[m];
  return a;
}

namespace {
void require_proper(const GmrfModel& model) {
  if (std::abs(model.rho()) >= 1.0 && !model.options().allow_improper) {
    throw ModelError(fmt::format("|rho| must be < 1 for a proper GMRF prior, got {}", model.rho()));
  }
}
}  // namespace

double gmrf_log_density(std::span<const double> zeta, const GmrfModel& model) {
  require_proper(model);
  return model.tau_exponent() * std::log(model.tau()) - 0.5 * model.tau() * model.quadratic_form(zeta);
}

std::vector<double> gmrf_gradient(std::span<const double> zeta, const GmrfModel& model) {
  require_proper(model);
  std::vector<double> g(zeta.size());
  model.precision_multiply(zeta, g);
  for (auto& v : g) v *= -model.tau();
  return g;
}

std::vector<double> precision_matrix_spectrum(const GmrfModel& model) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(model.dense_precision(), Eigen::EigenvaluesOnly);
  const auto& ev = solver.eigenvalues();
  return std::vector<double>(ev.data(), ev.data() + ev.size());
}

void validate(const HyperPriors& hyper) {
  if (!(hyper.tau_shape > 0.0) || !(hyper.tau_rate > 0.0)) {
    throw ModelError("tau prior shape and rate must be positive");
  }
  if (hyper.rho.estimated) {
    if (!(hyper.rho.scale > 0.0)) throw ModelError("rho prior scale must be positive");
  } else if (!(std::abs(hyper.rho.fixed_value) < 1.0)) {
    throw ModelError("fixed rho must satisfy |rho| < 1");
  }
}

double tau_log_prior(double tau, const HyperPriors& hyper) {
  if (!(tau > 0.0)) return -std::numeric_limits<double>::infinity();
  return (hyper.tau_shape - 1.0) * std::log(tau) - hyper.tau_rate * tau;
}

double rho_log_prior(double rho, const HyperPriors& hyper) {
  if (!hyper.rho.estimated) return 0.0;
  if (!(rho > 0.0 && rho < 1.0)) return -std::numeric_limits<double>::infinity();
  const double x = std::log(rho / (1.0 - rho));
  const double z = (x - hyper.rho.location) / hyper.rho.scale;
  return -0.5 * z * z - std::log(hyper.rho.scale) - 0.5 * std::log(2.0 * std::numbers::pi) -
         std::log(rho * (1.0 - rho));
}

}  // namespace polyclock
