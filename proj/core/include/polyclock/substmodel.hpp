#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace polyclock {

// Normalized reversible generator Q with its spectral decomposition
// Q = B diag(lambda) B^-1.
//
// Q is scaled so that -sum_s pi_s Q_ss = 1: one expected substitution per
// unit of branch integral at stationarity. Eigenvalues are stored in
// decreasing order, so lambda[0] = 0 with B's first column all ones and the
// first row of B^-1 equal to pi.
class GeneratorModel {
 public:
  // `exchangeability` is a symmetric S x S matrix of positive off-diagonal
  // rates (diagonal ignored); `pi` a strictly positive simplex.
  static GeneratorModel from_exchangeabilities(const Eigen::MatrixXd& exchangeability,
                                               std::span<const double> pi);

  int state_count() const noexcept { return static_cast<int>(pi_.size()); }
  const Eigen::MatrixXd& rate_matrix() const noexcept { return q_; }
  const Eigen::VectorXd& stationary() const noexcept { return pi_; }
  const Eigen::MatrixXd& right_eigenvectors() const noexcept { return b_; }
  const Eigen::VectorXd& eigenvalues() const noexcept { return lambda_; }
  const Eigen::MatrixXd& left_eigenvectors() const noexcept { return b_inv_; }

 private:
  Eigen::MatrixXd q_;
  Eigen::VectorXd pi_;
  Eigen::MatrixXd b_;
  Eigen::VectorXd lambda_;
  Eigen::MatrixXd b_inv_;
};

// HKY85 over ACGT; transitions are A<->G and C<->T.
GeneratorModel hky(double kappa, std::span<const double> pi);

// GTR over ACGT; exchangeabilities ordered AC, AG, AT, CG, CT, GT.
GeneratorModel gtr(std::span<const double> rates, std::span<const double> pi);

// Jukes-Cantor generator over `states` states.
GeneratorModel jukes_cantor(int states = 4);

// P(b) = exp(bQ) = B diag(exp(lambda b)) B^-1, entries clamped to [0, 1].
// Throws ModelError for negative b.
Eigen::MatrixXd transition_matrix(const GeneratorModel& model, double b);

// dP/db = Q exp(bQ) = B diag(lambda exp(lambda b)) B^-1.
Eigen::MatrixXd transition_matrix_derivative(const GeneratorModel& model, double b);

// Equal-weight categories of across-site rate variation with mean one.
struct SiteRateModel {
  double alpha = 0.0;  // 0 when there is a single category
  std::vector<double> rates{1.0};
  std::vector<double> weights{1.0};

  int category_count() const noexcept { return static_cast<int>(rates.size()); }
};

// K categories of a Gamma(alpha, alpha) distribution; each category rate is
// the mean of its equal-probability quantile slice, renormalized to mean one.
SiteRateModel discretized_gamma(double alpha, int categories);

SiteRateModel single_rate();

}  // namespace polyclock
