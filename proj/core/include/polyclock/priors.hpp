#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace polyclock {

// How the midpoint gaps d_m enter the neighbour weights W_{m,m+1}.
//   inverse_gap: W = 1/d_m, so increments zeta_{m+1} - zeta_m have
//                variance d_m / tau (first-order random walk).
//   gap:         W = d_m, the weighting printed with the matrix form.
// The two coincide up to a rescaling of tau on uniform grids.
enum class GapWeighting { inverse_gap, gap };

struct GmrfOptions {
  GapWeighting weighting = GapWeighting::inverse_gap;
  // Power of tau is tau_exponent_offset + M/2. The default 0 keeps M/2;
  // 0.5 gives the (M+1)/2 of a proper (M+1)-dimensional Gaussian.
  double tau_exponent_offset = 0.0;
  // Permits rho = 1 (intrinsic, improper prior). Test use only.
  bool allow_improper = false;
};

// Proper GMRF prior on zeta with tridiagonal precision tau (D_w - rho W).
class GmrfModel {
 public:
  GmrfModel(std::span<const double> midpoint_gaps, double rho, double tau, GmrfOptions options = {});

  int dimension() const noexcept { return static_cast<int>(diagonal_.size()); }
  int grid_point_count() const noexcept { return dimension() - 1; }
  double rho() const noexcept { return rho_; }
  double tau() const noexcept { return tau_; }
  const GmrfOptions& options() const noexcept { return options_; }
  // W_{m,m+1}, length M.
  std::span<const double> neighbour_weights() const noexcept { return weights_; }
  // Row sums of W, length M + 1.
  std::span<const double> diagonal() const noexcept { return diagonal_; }
  double tau_exponent() const noexcept { return 0.5 * grid_point_count() + options_.tau_exponent_offset; }

  GmrfModel with_rho(double rho) const;
  GmrfModel with_tau(double tau) const;

  // zeta' (D_w - rho W) zeta in O(M).
  double quadratic_form(std::span<const double> zeta) const;
  // out = (D_w - rho W) zeta in O(M).
  void precision_multiply(std::span<const double> zeta, std::span<double> out) const;
  // log det (D_w - rho W) via the tridiagonal LDL' recursion; -inf when singular.
  double log_determinant() const;
  Eigen::MatrixXd dense_precision() const;

 private:
  void check_dimension(std::size_t n) const;

  std::vector<double> weights_;
  std::vector<double> diagonal_;
  double rho_;
  double tau_;
  GmrfOptions options_;
};

// tau_exponent * log(tau) - (tau/2) zeta' (D_w - rho W) zeta, i.e. the
// density up to a zeta-independent constant. Throws ModelError when
// |rho| >= 1 unless the model allows improper priors.
double gmrf_log_density(std::span<const double> zeta, const GmrfModel& model);

// -tau (D_w - rho W) zeta.
std::vector<double> gmrf_gradient(std::span<const double> zeta, const GmrfModel& model);

// Ascending eigenvalues of D_w - rho W.
std::vector<double> precision_matrix_spectrum(const GmrfModel& model);

struct RhoPrior {
  bool estimated = false;
  double fixed_value = 0.99;
  // Logit-normal on (0, 1) when estimated.
  double location = 0.0;
  double scale = 1.0;
};

struct HyperPriors {
  double tau_shape = 0.001;
  double tau_rate = 0.001;
  RhoPrior rho;
};

void validate(const HyperPriors& hyper);

// (a - 1) log tau - b tau  (unnormalized Gamma(shape a, rate b)).
double tau_log_prior(double tau, const HyperPriors& hyper);
// Normalized logit-normal log density for an estimated rho; 0 for fixed rho.
double rho_log_prior(double rho, const HyperPriors& hyper);

}  // namespace polyclock
