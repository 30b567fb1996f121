#include "polyclock/sampler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <ostream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "polyclock/diagnostics.hpp"
#include "polyclock/errors.hpp"

namespace polyclock {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
// Energy errors beyond this are treated as divergent even when finite.
constexpr double kDivergenceThreshold = 1000.0;

double logit(double p) { return std::log(p / (1.0 - p)); }
double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace

// ---------------------------------------------------------------------------
// HMC

Trajectory leapfrog(LogDensity& target, std::span<const double> position, std::span<const double> momentum,
                    std::span<const double> gradient, double log_density, double step_size, int steps) {
  const std::size_t n = position.size();
  Trajectory t;
  t.position.assign(position.begin(), position.end());
  t.momentum.assign(momentum.begin(), momentum.end());
  t.gradient.assign(gradient.begin(), gradient.end());
  t.log_density = log_density;
  for (int s = 0; s < steps; ++s) {
    for (std::size_t j = 0; j < n; ++j) t.momentum[j] += 0.5 * step_size * t.gradient[j];
    for (std::size_t j = 0; j < n; ++j) t.position[j] += step_size * t.momentum[j];
    t.log_density = target.evaluate(t.position, t.gradient);
    if (!std::isfinite(t.log_density) || !all_finite(t.gradient)) {
      t.finite = false;
      return t;
    }
    for (std::size_t j = 0; j < n; ++j) t.momentum[j] += 0.5 * step_size * t.gradient[j];
  }
  return t;
}

HmcOutcome hmc_update(LogDensity& target, std::vector<double>& position, double& log_density,
                      std::vector<double>& gradient, double step_size, int steps, Rng& rng) {
  std::normal_distribution<double> normal;
  std::vector<double> momentum(position.size());
  double kinetic0 = 0.0;
  for (auto& p : momentum) {
    p = normal(rng);
    kinetic0 += 0.5 * p * p;
  }
  Trajectory t = leapfrog(target, position, momentum, gradient, log_density, step_size, steps);

  HmcOutcome out;
  double kinetic1 = 0.0;
  for (double p : t.momentum) kinetic1 += 0.5 * p * p;
  out.energy_change = t.finite ? (kinetic1 - t.log_density) - (kinetic0 - log_density)
                               : std::numeric_limits<double>::infinity();
  if (!std::isfinite(out.energy_change) || out.energy_change > kDivergenceThreshold) {
    out.divergent = true;
    out.acceptance_probability = 0.0;
    // Consume the uniform anyway so the random stream does not depend on
    // whether the trajectory diverged.
    std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    return out;
  }
  out.acceptance_probability = std::min(1.0, std::exp(-out.energy_change));
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (u < out.acceptance_probability) {
    out.accepted = true;
    position = std::move(t.position);
    gradient = std::move(t.gradient);
    log_density = t.log_density;
  }
  return out;
}

DualAveraging::DualAveraging(double initial_step_size, double target_acceptance)
    : mu_(std::log(10.0 * initial_step_size)), target_(target_acceptance), step_(initial_step_size),
      log_step_bar_(std::log(initial_step_size)) {
  if (!(initial_step_size > 0.0)) throw ModelError("HMC step size must be positive");
}

void DualAveraging::update(double acceptance_probability) {
  constexpr double gamma = 0.05;
  constexpr double t0 = 10.0;
  constexpr double kappa = 0.75;
  ++count_;
  const double m = static_cast<double>(count_);
  const double eta = 1.0 / (m + t0);
  h_bar_ = (1.0 - eta) * h_bar_ + eta * (target_ - acceptance_probability);
  const double log_step = mu_ - std::sqrt(m) / gamma * h_bar_;
  const double w = std::pow(m, -kappa);
  log_step_bar_ = w * log_step + (1.0 - w) * log_step_bar_;
  step_ = std::exp(log_step);
}

double DualAveraging::averaged_step_size() const noexcept { return std::exp(log_step_bar_); }

// ---------------------------------------------------------------------------
// Substitution parameters

GeneratorModel make_generator(const SubstitutionSpec& spec, double kappa, std::span<const double> gtr_rates,
                              std::span<const double> frequencies) {
  switch (spec.kind) {
    case SubstitutionKind::jc: {
      const std::array<double, 6> ones{1, 1, 1, 1, 1, 1};
      return gtr(ones, frequencies);
    }
    case SubstitutionKind::hky:
      return hky(kappa, frequencies);
    case SubstitutionKind::gtr:
      return gtr(gtr_rates, frequencies);
  }
  throw ModelError("unknown substitution model");
}

double kappa_log_prior(double kappa) {
  if (!(kappa > 0.0)) return kNegInf;
  constexpr double mu = 1.0;
  constexpr double sigma = 1.25;
  const double z = (std::log(kappa) - mu) / sigma;
  return -0.5 * z * z - std::log(kappa * sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

double gtr_rate_log_prior(double rate) {
  if (!(rate > 0.0)) return kNegInf;
  constexpr double shape = 0.05;
  constexpr double scale = 10.0;
  return (shape - 1.0) * std::log(rate) - rate / scale - std::lgamma(shape) - shape * std::log(scale);
}

double alpha_log_prior(double alpha) {
  if (!(alpha > 0.0)) return kNegInf;
  constexpr double mean = 0.5;
  return -std::log(mean) - alpha / mean;
}

void SamplerConfig::validate() const {
  if (iterations < 1) throw ModelError("iterations must be at least 1");
  if (thinning < 1) throw ModelError("thinning must be at least 1");
  if (!(burnin >= 0.0 && burnin < 1.0)) throw ModelError("burn-in fraction must lie in [0, 1)");
  if (leapfrog_steps < 1) throw ModelError("leapfrog steps must be at least 1");
  if (!(step_size > 0.0)) throw ModelError("HMC step size must be positive");
  if (!(target_acceptance > 0.0 && target_acceptance < 1.0)) throw ModelError("target acceptance must lie in (0, 1)");
  if (!(rho_scale > 0.0) || !(substitution_scale > 0.0)) throw ModelError("random-walk scales must be positive");
  if (weight_zeta < 0.0 || weight_tau < 0.0 || weight_rho < 0.0 || weight_substitution < 0.0) {
    throw ModelError("operator weights must be non-negative");
  }
  if (audit_interval < 1) throw ModelError("audit interval must be at least 1");
}

// ---------------------------------------------------------------------------
// Hyperparameter kernels

double draw_tau(std::span<const double> zeta, const GmrfModel& gmrf, const HyperPriors& hyper, Rng& rng) {
  const double shape = hyper.tau_shape + gmrf.tau_exponent();
  const double rate = hyper.tau_rate + 0.5 * gmrf.quadratic_form(zeta);
  std::gamma_distribution<double> gamma(shape, 1.0 / rate);
  double tau = gamma(rng);
  // Shapes near zero can underflow to exactly zero.
  return std::max(tau, std::numeric_limits<double>::min());
}

double rho_log_target(std::span<const double> zeta, const GmrfModel& gmrf, double rho, const HyperPriors& hyper) {
  if (!(rho > 0.0 && rho < 1.0)) return kNegInf;
  const GmrfModel moved = gmrf.with_rho(rho);
  return gmrf_log_density(zeta, moved) + 0.5 * moved.log_determinant() + rho_log_prior(rho, hyper);
}

double rho_log_acceptance(std::span<const double> zeta, const GmrfModel& gmrf, const HyperPriors& hyper,
                          double rho_old, double rho_new) {
  const double target_new = rho_log_target(zeta, gmrf, rho_new, hyper);
  if (!std::isfinite(target_new)) return kNegInf;
  const double target_old = rho_log_target(zeta, gmrf, rho_old, hyper);
  // Walk on logit(rho): the proposal density in rho carries 1 / (rho (1 - rho)).
  return target_new - target_old + std::log(rho_new * (1.0 - rho_new)) - std::log(rho_old * (1.0 - rho_old));
}

double pairwise_rate_estimate(const BoundData& data) {
  const TimeTree& tree = data.tree;
  const int tips = std::min(tree.tip_count(), 64);
  const int nodes = tree.node_count();
  std::vector<int> depth(nodes, 0);
  for (int v = nodes - 2; v >= 0; --v) depth[v] = depth[tree.parent(v)] + 1;
  auto mrca = [&](int a, int b) {
    while (a != b) {
      if (depth[a] >= depth[b]) a = tree.parent(a);
      else b = tree.parent(b);
    }
    return a;
  };

  const double states = static_cast<double>(data.state_count);
  const double saturation = (states - 1.0) / states;
  double distance = 0.0;
  double elapsed = 0.0;
  for (int i = 0; i < tips; ++i) {
    for (int j = i + 1; j < tips; ++j) {
      double compared = 0.0;
      double differing = 0.0;
      for (int p = 0; p < data.pattern_count; ++p) {
        const auto a = data.tip_state(i, p);
        const auto b = data.tip_state(j, p);
        if (a == kMissing || b == kMissing) continue;
        compared += data.pattern_weights[p];
        if (a != b) differing += data.pattern_weights[p];
      }
      if (compared <= 0.0) continue;
      const double pdist = std::min(differing / compared, 0.95 * saturation);
      distance += -saturation * std::log(1.0 - pdist / saturation);
      elapsed += tree.time(i) + tree.time(j) - 2.0 * tree.time(mrca(i, j));
    }
  }
  if (distance > 0.0 && elapsed > 0.0) return distance / elapsed;
  // No observed differences: about one substitution over the whole tree.
  double length = 0.0;
  for (int v = 0; v < tree.branch_count(); ++v) length += tree.branch_span(v);
  return 1.0 / (std::max(1, data.site_count) * length);
}

// ---------------------------------------------------------------------------
// Trace and report

TraceWriter::TraceWriter(std::ostream& out, std::vector<std::string> columns, std::vector<std::string> comments)
    : out_(&out), columns_(std::move(columns)) {
  for (const auto& c : comments) *out_ << "# " << c << '\n';
  *out_ << "iteration";
  for (const auto& c : columns_) *out_ << '\t' << c;
  *out_ << '\n';
}

void TraceWriter::write_row(long iteration, std::span<const double> values) {
  if (values.size() != columns_.size()) {
    throw DimensionError(fmt::format("trace row has {} values for {} columns", values.size(), columns_.size()));
  }
  std::string line = fmt::format("{}", iteration);
  for (double v : values) fmt::format_to(std::back_inserter(line), "\t{:.12g}", v);
  line.push_back('\n');
  *out_ << line;
}

void TraceWriter::flush() { out_->flush(); }

std::string report_to_json(const RunReport& report, const std::vector<std::string>& header) {
  nlohmann::ordered_json j;
  if (!header.empty()) j["header"] = header;
  j["iterations"] = report.iterations;
  j["burnin_iterations"] = report.burnin_iterations;
  auto& ops = j["operators"];
  ops = nlohmann::ordered_json::object();
  for (const auto& op : report.operators) {
    ops[op.name] = {{"proposed", op.proposed}, {"accepted", op.accepted}, {"acceptance_rate", op.acceptance_rate()}};
  }
  j["divergences"] = report.divergences;
  j["divergences_after_burnin"] = report.divergences_after_burnin;
  j["hmc_moves_after_burnin"] = report.hmc_moves_after_burnin;
  j["divergence_fraction"] = report.divergence_fraction;
  j["divergence_warning"] = report.divergence_warning;
  j["final_step_size"] = report.final_step_size;
  auto& ess = j["ess"];
  ess = nlohmann::ordered_json::object();
  for (std::size_t c = 0; c < report.ess_columns.size(); ++c) ess[report.ess_columns[c]] = report.ess[c];
  j["warnings"] = report.warnings;
  j["wall_time_seconds"] = report.wall_time_seconds;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Chain

// log P(Y | zeta) + log P(zeta | tau, rho) as a function of zeta alone.
class Chain::ZetaTarget : public LogDensity {
 public:
  explicit ZetaTarget(Chain& chain) : chain_(chain) {}

  int dimension() const override { return static_cast<int>(chain_.state_.zeta.size()); }

  double evaluate(std::span<const double> zeta, std::span<double> gradient) override {
    const double prior = evaluate_likelihood(zeta, gradient);
    if (!std::isfinite(prior)) return kNegInf;
    const auto prior_grad = gmrf_gradient(zeta, chain_.gmrf_);
    for (std::size_t j = 0; j < prior_grad.size(); ++j) gradient[j] += prior_grad[j];
    return last_log_likelihood + gmrf_log_density(zeta, chain_.gmrf_);
  }

  // Writes dlogL/dzeta into `gradient`; returns 0 on success or -inf when the
  // rates are not representable.
  double evaluate_likelihood(std::span<const double> zeta, std::span<double> gradient) {
    const auto& u = chain_.occupancy_;
    theta_.resize(zeta.size());
    for (std::size_t j = 0; j < zeta.size(); ++j) theta_[j] = std::exp(zeta[j]);
    b_.resize(u.branch_count());
    u.multiply(theta_, b_);
    std::fill(gradient.begin(), gradient.end(), 0.0);
    if (!all_finite(b_)) return kNegInf;
    if (!chain_.config_.likelihood_enabled) {
      last_log_likelihood = 0.0;
      return 0.0;
    }
    branch_grad_.resize(b_.size());
    try {
      last_log_likelihood = chain_.likelihood_->log_likelihood_and_gradient(b_, branch_grad_);
    } catch (const NumericalError&) {
      return kNegInf;
    }
    if (!std::isfinite(last_log_likelihood)) return kNegInf;
    u.transpose_multiply(branch_grad_, gradient);
    for (std::size_t j = 0; j < zeta.size(); ++j) gradient[j] *= theta_[j];
    return 0.0;
  }

  const std::vector<double>& branch_integrals() const noexcept { return b_; }

  double last_log_likelihood = 0.0;

 private:
  Chain& chain_;
  std::vector<double> theta_;
  std::vector<double> b_;
  std::vector<double> branch_grad_;
};

namespace {

std::vector<double> initial_frequencies(const BoundData& data, const SubstitutionSpec& spec) {
  if (!spec.frequencies.empty()) {
    if (static_cast<int>(spec.frequencies.size()) != data.state_count) {
      throw ModelError(fmt::format("{} base frequencies given for {} states", spec.frequencies.size(),
                                   data.state_count));
    }
    return spec.frequencies;
  }
  if (spec.kind == SubstitutionKind::jc) return std::vector<double>(data.state_count, 1.0 / data.state_count);
  // Pattern-weighted counts with a pseudo-count of one per state.
  std::vector<double> counts(data.state_count, 1.0);
  for (int t = 0; t < data.tree.tip_count(); ++t) {
    for (int p = 0; p < data.pattern_count; ++p) {
      const auto s = data.tip_state(t, p);
      if (s != kMissing) counts[s] += data.pattern_weights[p];
    }
  }
  double total = 0.0;
  for (double c : counts) total += c;
  for (auto& c : counts) c /= total;
  return counts;
}

}  // namespace

Chain::Chain(const BoundData& data, const EpochGrid& grid, ModelSpec model, SamplerConfig config, int threads)
    : data_(&data),
      grid_(grid),
      model_(std::move(model)),
      config_(config),
      occupancy_(build_occupancy(data.tree, grid)),
      gmrf_(grid.midpoint_gaps(), model_.hyper.rho.estimated ? logistic(model_.hyper.rho.location)
                                                             : model_.hyper.rho.fixed_value,
            1.0, model_.gmrf),
      rng_(config.seed),
      step_size_(config.step_size) {
  config_.validate();
  validate(model_.hyper);
  if (data.state_count != 4 && model_.substitution.kind != SubstitutionKind::jc) {
    throw ModelError("HKY and GTR models need a four-state alphabet");
  }
  if (model_.substitution.categories < 1) throw ModelError("rate category count must be at least 1");
  frequencies_ = initial_frequencies(data, model_.substitution);

  state_.tau = 1.0;
  state_.rho = gmrf_.rho();
  state_.kappa = model_.substitution.kappa;
  state_.gtr_rates = model_.substitution.gtr_rates;
  state_.gtr_rates[5] = 1.0;
  if (model_.substitution.kind == SubstitutionKind::gtr) {
    for (auto& r : state_.gtr_rates) r /= model_.substitution.gtr_rates[5];
  }
  state_.alpha = model_.substitution.alpha;

  likelihood_ = std::make_unique<TreeLikelihood>(data, current_generator(), current_site_rates(), threads);
  target_ = std::make_unique<ZetaTarget>(*this);

  const double rate = pairwise_rate_estimate(data);
  set_zeta(std::vector<double>(grid.epoch_count(), std::log(rate)));
  checkpoint_state_ = state_;
}

Chain::~Chain() = default;

GeneratorModel Chain::current_generator() const {
  return make_generator(model_.substitution, state_.kappa, state_.gtr_rates, frequencies_);
}

SiteRateModel Chain::current_site_rates() const {
  if (model_.substitution.categories <= 1) return single_rate();
  return discretized_gamma(state_.alpha, model_.substitution.categories);
}

double Chain::compute_log_prior() const {
  double lp = gmrf_log_density(state_.zeta, gmrf_) + 0.5 * gmrf_.log_determinant();
  lp += tau_log_prior(state_.tau, model_.hyper) + rho_log_prior(state_.rho, model_.hyper);
  const auto& sub = model_.substitution;
  if (sub.estimate) {
    if (sub.kind == SubstitutionKind::hky) lp += kappa_log_prior(state_.kappa);
    if (sub.kind == SubstitutionKind::gtr) {
      for (int r = 0; r < 5; ++r) lp += gtr_rate_log_prior(state_.gtr_rates[r]);
    }
  }
  if (sub.estimate_alpha && sub.categories > 1) lp += alpha_log_prior(state_.alpha);
  return lp;
}

double Chain::compute_log_likelihood() {
  if (!config_.likelihood_enabled) return 0.0;
  return likelihood_->log_likelihood(state_.branch_integrals);
}

void Chain::set_zeta(std::vector<double> zeta) {
  if (static_cast<int>(zeta.size()) != grid_.epoch_count()) {
    throw DimensionError(fmt::format("zeta has {} entries for {} epochs", zeta.size(), grid_.epoch_count()));
  }
  state_.zeta = std::move(zeta);
  zeta_gradient_.assign(state_.zeta.size(), 0.0);
  zeta_log_density_ = target_->evaluate(state_.zeta, zeta_gradient_);
  if (!std::isfinite(zeta_log_density_)) {
    throw NumericalError("log posterior is not finite at the initial rates");
  }
  state_.branch_integrals = target_->branch_integrals();
  state_.log_likelihood = target_->last_log_likelihood;
  state_.log_prior = compute_log_prior();
}

void Chain::set_tau(double tau) {
  gmrf_ = gmrf_.with_tau(tau);
  state_.tau = tau;
  set_zeta(state_.zeta);
}

HmcOutcome Chain::hmc_update_zeta() {
  // Prior part of the cached density and gradient depends on tau and rho,
  // which other operators may have changed since the last evaluation.
  std::vector<double> gradient = gmrf_gradient(state_.zeta, gmrf_);
  for (std::size_t j = 0; j < gradient.size(); ++j) gradient[j] += zeta_gradient_[j];
  double density = state_.log_likelihood + gmrf_log_density(state_.zeta, gmrf_);

  std::vector<double> position = state_.zeta;
  HmcOutcome out = hmc_update(*target_, position, density, gradient, step_size_, config_.leapfrog_steps, rng_);
  if (out.accepted) {
    // The accepted point is the last one the target evaluated.
    state_.zeta = std::move(position);
    state_.branch_integrals = target_->branch_integrals();
    state_.log_likelihood = target_->last_log_likelihood;
    const auto prior_grad = gmrf_gradient(state_.zeta, gmrf_);
    for (std::size_t j = 0; j < gradient.size(); ++j) zeta_gradient_[j] = gradient[j] - prior_grad[j];
    state_.log_prior = compute_log_prior();
  }
  zeta_log_density_ = state_.log_likelihood + gmrf_log_density(state_.zeta, gmrf_);
  return out;
}

double Chain::gibbs_update_tau() {
  const double tau = draw_tau(state_.zeta, gmrf_, model_.hyper, rng_);
  gmrf_ = gmrf_.with_tau(tau);
  state_.tau = tau;
  state_.log_prior = compute_log_prior();
  zeta_log_density_ = state_.log_likelihood + gmrf_log_density(state_.zeta, gmrf_);
  return tau;
}

bool Chain::mh_update_rho() {
  if (!model_.hyper.rho.estimated) return false;
  std::normal_distribution<double> normal(0.0, config_.rho_scale);
  const double proposal = logistic(logit(state_.rho) + normal(rng_));
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
  if (!(proposal > 0.0 && proposal < 1.0)) return false;
  const double log_ratio = rho_log_acceptance(state_.zeta, gmrf_, model_.hyper, state_.rho, proposal);
  if (!(std::log(u) < log_ratio)) return false;
  gmrf_ = gmrf_.with_rho(proposal);
  state_.rho = proposal;
  state_.log_prior = compute_log_prior();
  zeta_log_density_ = state_.log_likelihood + gmrf_log_density(state_.zeta, gmrf_);
  return true;
}

bool Chain::mh_update_substitution() {
  const auto& sub = model_.substitution;
  std::vector<double*> free;
  if (sub.estimate && sub.kind == SubstitutionKind::hky) free.push_back(&state_.kappa);
  if (sub.estimate && sub.kind == SubstitutionKind::gtr) {
    for (int r = 0; r < 5; ++r) free.push_back(&state_.gtr_rates[r]);
  }
  if (sub.estimate_alpha && sub.categories > 1) free.push_back(&state_.alpha);
  if (free.empty()) return false;

  const auto pick = std::uniform_int_distribution<std::size_t>(0, free.size() - 1)(rng_);
  const double step = std::normal_distribution<double>(0.0, config_.substitution_scale)(rng_);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);

  double* param = free[pick];
  const double old_value = *param;
  const double old_ll = state_.log_likelihood;
  const double old_lp = state_.log_prior;
  *param = old_value * std::exp(step);

  double new_ll = kNegInf;
  double new_lp = compute_log_prior();
  bool accepted = false;
  if (std::isfinite(new_lp)) {
    try {
      likelihood_->set_model(current_generator(), current_site_rates());
      new_ll = compute_log_likelihood();
    } catch (const NumericalError&) {
      new_ll = kNegInf;
    } catch (const ModelError&) {
      new_ll = kNegInf;
    }
    // Log-scale walk: Hastings factor x' / x.
    const double log_ratio = (new_ll + new_lp) - (old_ll + old_lp) + step;
    accepted = std::isfinite(new_ll) && std::log(u) < log_ratio;
  }
  if (accepted) {
    state_.log_likelihood = new_ll;
    state_.log_prior = new_lp;
    if (config_.likelihood_enabled) {
      const auto branch_grad = likelihood_->branch_gradient();
      std::vector<double> g(state_.zeta.size());
      occupancy_.transpose_multiply(branch_grad, g);
      for (std::size_t j = 0; j < g.size(); ++j) zeta_gradient_[j] = g[j] * std::exp(state_.zeta[j]);
    }
  } else {
    *param = old_value;
    likelihood_->set_model(current_generator(), current_site_rates());
    state_.log_likelihood = old_ll;
    state_.log_prior = old_lp;
  }
  zeta_log_density_ = state_.log_likelihood + gmrf_log_density(state_.zeta, gmrf_);
  return accepted;
}

double Chain::zeta_log_density(std::span<const double> zeta, std::span<double> gradient) {
  if (zeta.size() != state_.zeta.size() || gradient.size() != zeta.size()) {
    throw DimensionError("zeta_log_density: expected one value per epoch");
  }
  return target_->evaluate(zeta, gradient);
}

double Chain::audit() {
  const RateField field(state_.zeta);
  const auto b = branch_integrals(occupancy_, field);
  double worst = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    worst = std::max(worst, std::abs(b[i] - state_.branch_integrals[i]) / std::max(1.0, std::abs(b[i])));
  }
  TreeLikelihood fresh(*data_, current_generator(), current_site_rates(), 1);
  const double ll = config_.likelihood_enabled ? fresh.log_likelihood(b) : 0.0;
  const double lp = compute_log_prior();
  worst = std::max(worst, std::abs(ll - state_.log_likelihood) / std::max(1.0, std::abs(ll)));
  worst = std::max(worst, std::abs(lp - state_.log_prior) / std::max(1.0, std::abs(lp)));
  return worst;
}

std::vector<std::string> Chain::trace_columns() const {
  std::vector<std::string> cols{"log_likelihood", "log_prior", "tau", "rho"};
  const auto& sub = model_.substitution;
  if (sub.kind == SubstitutionKind::hky) cols.push_back("kappa");
  if (sub.kind == SubstitutionKind::gtr) {
    for (const char* name : {"rate_AC", "rate_AG", "rate_AT", "rate_CG", "rate_CT", "rate_GT"}) cols.push_back(name);
  }
  if (sub.categories > 1) cols.push_back("alpha");
  for (int m = 0; m < grid_.epoch_count(); ++m) cols.push_back(fmt::format("zeta_{}", m + 1));
  return cols;
}

std::vector<double> Chain::trace_values() const {
  std::vector<double> v{state_.log_likelihood, state_.log_prior, state_.tau, state_.rho};
  const auto& sub = model_.substitution;
  if (sub.kind == SubstitutionKind::hky) v.push_back(state_.kappa);
  if (sub.kind == SubstitutionKind::gtr) v.insert(v.end(), state_.gtr_rates.begin(), state_.gtr_rates.end());
  if (sub.categories > 1) v.push_back(state_.alpha);
  v.insert(v.end(), state_.zeta.begin(), state_.zeta.end());
  return v;
}

void Chain::write_checkpoint(const std::string& path) const {
  if (path.empty()) return;
  const ChainState& s = checkpoint_state_;
  nlohmann::ordered_json j;
  if (!header_.empty()) j["header"] = header_;
  j["iteration"] = s.iteration;
  j["log_likelihood"] = s.log_likelihood;
  j["log_prior"] = s.log_prior;
  j["tau"] = s.tau;
  j["rho"] = s.rho;
  j["kappa"] = s.kappa;
  j["gtr_rates"] = s.gtr_rates;
  j["alpha"] = s.alpha;
  j["step_size"] = step_size_;
  j["zeta"] = s.zeta;
  write_text_file(path, j.dump(2) + "\n");
}

RunReport Chain::run(TraceWriter* trace, const std::string& checkpoint_path) {
  const auto start = std::chrono::steady_clock::now();
  RunReport report;
  report.iterations = config_.iterations;
  report.burnin_iterations = config_.burnin_iterations();

  enum Op { kZeta, kTau, kRho, kSubstitution };
  const auto& sub = model_.substitution;
  const bool substitution_free = (sub.estimate && sub.kind != SubstitutionKind::jc) ||
                                 (sub.estimate_alpha && sub.categories > 1);
  std::vector<double> weights{config_.weight_zeta, config_.weight_tau,
                              model_.hyper.rho.estimated ? config_.weight_rho : 0.0,
                              substitution_free ? config_.weight_substitution : 0.0};
  if (std::all_of(weights.begin(), weights.end(), [](double w) { return w <= 0.0; })) {
    throw ModelError("every operator has zero weight");
  }
  std::discrete_distribution<int> choose(weights.begin(), weights.end());
  std::vector<OperatorStats> stats{{"zeta_hmc"}, {"tau_gibbs"}, {"rho_walk"}, {"substitution_walk"}};

  const auto columns = trace_columns();
  std::vector<std::vector<double>> kept(columns.size());
  auto log_row = [&](long iteration) {
    const auto values = trace_values();
    if (trace) trace->write_row(iteration, values);
    if (iteration >= report.burnin_iterations) {
      for (std::size_t c = 0; c < values.size(); ++c) kept[c].push_back(values[c]);
    }
  };

  DualAveraging adapt(step_size_, config_.target_acceptance);
  state_.iteration = 0;
  log_row(0);
  checkpoint_state_ = state_;

  try {
    for (long it = 1; it <= config_.iterations; ++it) {
      state_.iteration = it;
      const bool in_burnin = it <= report.burnin_iterations;
      switch (choose(rng_)) {
        case kZeta: {
          const HmcOutcome out = hmc_update_zeta();
          ++stats[kZeta].proposed;
          if (out.accepted) ++stats[kZeta].accepted;
          if (out.divergent) ++report.divergences;
          if (in_burnin) {
            adapt.update(out.acceptance_probability);
            step_size_ = adapt.step_size();
          } else {
            ++report.hmc_moves_after_burnin;
            if (out.divergent) ++report.divergences_after_burnin;
          }
          break;
        }
        case kTau:
          gibbs_update_tau();
          ++stats[kTau].proposed;
          ++stats[kTau].accepted;
          break;
        case kRho:
          ++stats[kRho].proposed;
          if (mh_update_rho()) ++stats[kRho].accepted;
          break;
        case kSubstitution:
          ++stats[kSubstitution].proposed;
          if (mh_update_substitution()) ++stats[kSubstitution].accepted;
          break;
      }
      if (it == report.burnin_iterations && adapt.averaged_step_size() > 0.0) {
        step_size_ = adapt.averaged_step_size();
      }
      if (it % config_.thinning == 0) log_row(it);
      if (it % config_.audit_interval == 0) {
        const double discrepancy = audit();
        if (discrepancy > 1e-9) {
          throw NumericalError(fmt::format("cached posterior drifted by {:.3g} at iteration {}", discrepancy, it));
        }
        checkpoint_state_ = state_;
        write_checkpoint(checkpoint_path);
        if (trace) trace->flush();
      }
    }
  } catch (...) {
    write_checkpoint(checkpoint_path);
    if (trace) trace->flush();
    throw;
  }
  checkpoint_state_ = state_;
  write_checkpoint(checkpoint_path);
  if (trace) trace->flush();

  for (auto& s : stats) {
    if (s.proposed > 0 || s.name == "zeta_hmc" || s.name == "tau_gibbs") report.operators.push_back(s);
  }
  report.final_step_size = step_size_;
  if (report.hmc_moves_after_burnin > 0) {
    report.divergence_fraction =
        static_cast<double>(report.divergences_after_burnin) / static_cast<double>(report.hmc_moves_after_burnin);
  }
  report.divergence_warning = report.divergence_fraction > 0.05;
  if (report.divergence_warning) {
    report.warnings.push_back(fmt::format("{:.1f}% of post-burn-in HMC trajectories diverged",
                                          100.0 * report.divergence_fraction));
  }
  report.ess_columns = columns;
  for (const auto& col : kept) report.ess.push_back(effective_sample_size(col));
  report.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace polyclock
