#include "polyclock/substmodel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/special_functions/gamma.hpp>
#include <fmt/format.h>

#include "polyclock/errors.hpp"

namespace polyclock {

namespace {

void check_simplex(std::span<const double> pi, int states) {
  if (static_cast<int>(pi.size()) != states) {
    throw ModelError(fmt::format("frequencies must have {} entries, got {}", states, pi.size()));
  }
  double sum = 0.0;
  for (double p : pi) {
    if (!(p > 0.0) || !std::isfinite(p)) throw ModelError("frequencies must be strictly positive");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-10) {
    throw ModelError(fmt::format("frequencies must sum to 1 (sum = {:.12g})", sum));
  }
}

}  // namespace

GeneratorModel GeneratorModel::from_exchangeabilities(const Eigen::MatrixXd& exchangeability,
                                                      std::span<const double> pi) {
  const int S = static_cast<int>(exchangeability.rows());
  if (S < 2 || exchangeability.cols() != S) throw ModelError("exchangeability matrix must be square, S >= 2");
  check_simplex(pi, S);
  for (int i = 0; i < S; ++i) {
    for (int j = 0; j < S; ++j) {
      if (i == j) continue;
      const double r = exchangeability(i, j);
      if (!(r > 0.0) || !std::isfinite(r)) throw ModelError("exchangeabilities must be positive and finite");
      if (std::abs(r - exchangeability(j, i)) > 1e-12 * std::max(1.0, std::abs(r))) {
        throw ModelError("exchangeability matrix must be symmetric");
      }
    }
  }

  GeneratorModel m;
  m.pi_ = Eigen::Map<const Eigen::VectorXd>(pi.data(), S);
  m.q_ = Eigen::MatrixXd::Zero(S, S);
  for (int i = 0; i < S; ++i) {
    double row = 0.0;
    for (int j = 0; j < S; ++j) {
      if (i == j) continue;
      m.q_(i, j) = exchangeability(i, j) * pi[j];
      row += m.q_(i, j);
    }
    m.q_(i, i) = -row;
  }
  double total = 0.0;
  for (int i = 0; i < S; ++i) total -= pi[i] * m.q_(i, i);
  m.q_ /= total;

  // Pi^(1/2) Q Pi^(-1/2) is symmetric for a reversible Q.
  const Eigen::VectorXd sqrt_pi = m.pi_.array().sqrt();
  Eigen::MatrixXd sym(S, S);
  for (int i = 0; i < S; ++i) {
    for (int j = 0; j < S; ++j) sym(i, j) = sqrt_pi[i] * m.q_(i, j) / sqrt_pi[j];
  }
  sym = 0.5 * (sym + sym.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym);
  if (solver.info() != Eigen::Success) throw NumericalError("eigendecomposition of generator failed");

  // Solver returns ascending eigenvalues; store them descending.
  m.lambda_.resize(S);
  Eigen::MatrixXd u(S, S);
  for (int k = 0; k < S; ++k) {
    m.lambda_[k] = solver.eigenvalues()[S - 1 - k];
    u.col(k) = solver.eigenvectors().col(S - 1 - k);
  }
  m.b_ = sqrt_pi.cwiseInverse().asDiagonal() * u;
  m.b_inv_ = u.transpose() * sqrt_pi.asDiagonal();

  // The stationary pair is known exactly.
  m.lambda_[0] = 0.0;
  m.b_.col(0).setOnes();
  m.b_inv_.row(0) = m.pi_.transpose();
  return m;
}

GeneratorModel hky(double kappa, std::span<const double> pi) {
  if (!(kappa > 0.0) || !std::isfinite(kappa)) throw ModelError(fmt::format("kappa must be positive, got {}", kappa));
  const double rates[6] = {1.0, kappa, 1.0, 1.0, kappa, 1.0};
  return gtr(rates, pi);
}

GeneratorModel gtr(std::span<const double> rates, std::span<const double> pi) {
  if (rates.size() != 6) throw ModelError(fmt::format("GTR needs 6 exchangeabilities, got {}", rates.size()));
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(4, 4);
  int k = 0;
  for (int i = 0; i < 4; ++i) {
    for (int j = i + 1; j < 4; ++j) {
      r(i, j) = r(j, i) = rates[k++];
    }
  }
  return GeneratorModel::from_exchangeabilities(r, pi);
}

GeneratorModel jukes_cantor(int states) {
  const Eigen::MatrixXd r = Eigen::MatrixXd::Ones(states, states);
  const std::vector<double> pi(states, 1.0 / states);
  return GeneratorModel::from_exchangeabilities(r, pi);
}

Eigen::MatrixXd transition_matrix(const GeneratorModel& model, double b) {
  if (!(b >= 0.0)) throw ModelError(fmt::format("branch integral must be nonnegative, got {}", b));
  if (b == 0.0) return Eigen::MatrixXd::Identity(model.state_count(), model.state_count());
  const Eigen::VectorXd decay = (model.eigenvalues() * b).array().exp();
  Eigen::MatrixXd p = model.right_eigenvectors() * decay.asDiagonal() * model.left_eigenvectors();
  return p.cwiseMax(0.0).cwiseMin(1.0);
}

Eigen::MatrixXd transition_matrix_derivative(const GeneratorModel& model, double b) {
  if (!(b >= 0.0)) throw ModelError(fmt::format("branch integral must be nonnegative, got {}", b));
  const Eigen::VectorXd d = (model.eigenvalues() * b).array().exp() * model.eigenvalues().array();
  return model.right_eigenvectors() * d.asDiagonal() * model.left_eigenvectors();
}

SiteRateModel discretized_gamma(double alpha, int categories) {
  if (categories < 1) throw ModelError(fmt::format("category count must be >= 1, got {}", categories));
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ModelError(fmt::format("alpha must be positive, got {}", alpha));
  SiteRateModel m;
  m.alpha = alpha;
  const int K = categories;
  m.weights.assign(K, 1.0 / K);
  m.rates.assign(K, 1.0);
  if (K == 1) return m;

  // Mean of slice k of Gamma(alpha, rate alpha) is
  // K * [P(alpha+1, x_k) - P(alpha+1, x_{k-1})] with x_k the unit-scale
  // quantile at k/K.
  double lower_cdf = 0.0;
  for (int k = 0; k < K; ++k) {
    double upper_cdf = 1.0;
    if (k + 1 < K) {
      const double x = boost::math::gamma_p_inv(alpha, static_cast<double>(k + 1) / K);
      upper_cdf = boost::math::gamma_p(alpha + 1.0, x);
    }
    m.rates[k] = K * (upper_cdf - lower_cdf);
    lower_cdf = upper_cdf;
  }
  const double mean = std::accumulate(m.rates.begin(), m.rates.end(), 0.0) / K;
  for (auto& r : m.rates) r /= mean;
  return m;
}

SiteRateModel single_rate() { return SiteRateModel{}; }

}  // namespace polyclock
