#pragma once

#include <span>
#include <vector>

#include "polyclock/epochs.hpp"
#include "polyclock/phylo_io.hpp"
#include "polyclock/substmodel.hpp"

namespace polyclock {

// Pruning likelihood and its linear-time gradient with respect to branch
// integrals.
//
// One post-order pass computes partials p (conditional likelihood of the data
// below each node) and the log-likelihood. A following pre-order pass
// computes q (joint probability of the data outside each subtree and the
// node state); for branch i with parent a and sibling s the derivative is
//
//   dlogL/db_i = sum_k w_k (q_a * P_s p_s)' r_k Q P_i p_i / L
//
// summed over site patterns. Both passes are O(N C K S^2).
//
// Partials are rescaled per pattern and node whenever their maximum drops
// below 1e-100: post-order scale factors are accumulated into the
// log-likelihood, pre-order ones cancel in the ratio above.
//
// Patterns are processed in fixed-size blocks. With more than one worker
// thread the blocks are distributed across threads; per-block sums are
// reduced in block order, so results do not depend on the thread count.
// A workspace must not be shared between concurrently running chains.
class TreeLikelihood {
 public:
  // `threads` <= 0 reads POLYCLOCK_THREADS from the environment (default 1).
  TreeLikelihood(const BoundData& data, GeneratorModel generator, SiteRateModel site_rates, int threads = 0);

  // Invalidates every cached transition matrix.
  void set_model(GeneratorModel generator, SiteRateModel site_rates);

  const GeneratorModel& generator() const noexcept { return generator_; }
  const SiteRateModel& site_rates() const noexcept { return site_rates_; }
  const BoundData& data() const noexcept { return *data_; }
  int thread_count() const noexcept { return threads_; }

  // Post-order pass. `b` has one entry per branch (child node id).
  double log_likelihood(std::span<const double> b);
  // Pre-order pass; requires a preceding log_likelihood() call with the same
  // branch integrals and model.
  std::vector<double> branch_gradient();
  double log_likelihood_and_gradient(std::span<const double> b, std::span<double> gradient);

  // Log-likelihood of each site pattern from the last post-order pass.
  const std::vector<double>& pattern_log_likelihoods() const noexcept { return pattern_log_lik_; }

 private:
  template <int kStates>
  void update_matrices(std::span<const double> b);
  template <int kStates>
  void post_order_block(int block);
  template <int kStates>
  void pre_order_block(int block);
  template <typename Fn>
  void for_each_block(Fn&& fn);

  // Partials are stored state-major, [category][state][pattern], so the
  // innermost loops run over contiguous patterns.
  std::size_t row_offset(int category, int state) const noexcept {
    return (static_cast<std::size_t>(category) * states_ + state) * patterns_;
  }
  double* internal_post(int node) noexcept { return post_.data() + (node - tips_) * node_stride_; }
  double* internal_pre(int node) noexcept { return pre_.data() + (node - tips_) * node_stride_; }
  double* top(int node) noexcept { return top_.data() + node * node_stride_; }
  const double* matrix(const std::vector<double>& store, int branch, int category) const noexcept {
    return store.data() + (static_cast<std::size_t>(branch) * categories_ + category) * states_ * states_;
  }

  const BoundData* data_;
  GeneratorModel generator_;
  SiteRateModel site_rates_;
  int threads_;

  int tips_ = 0;
  int nodes_ = 0;
  int patterns_ = 0;
  int categories_ = 0;
  int states_ = 0;
  int blocks_ = 0;
  std::size_t node_stride_ = 0;

  // Flattened spectral decomposition.
  std::vector<double> right_, left_, eigenvalues_, pi_;

  std::vector<std::uint8_t> tip_codes_;  // tip patterns with missing mapped to S

  std::vector<double> cached_b_;
  std::vector<double> prob_;   // P_ik, row-major S x S per (branch, category)
  std::vector<double> dprob_;  // r_k Q P_ik

  std::vector<double> post_;  // internal nodes
  std::vector<double> pre_;   // internal nodes
  std::vector<double> top_;   // every non-root node: P_i p_i
  std::vector<double> log_scale_;  // per pattern, accumulated post-order scale
  std::vector<double> pattern_log_lik_;
  std::vector<double> block_log_lik_;
  std::vector<double> block_gradient_;  // blocks x branches
  bool post_valid_ = false;
};

double log_likelihood(const BoundData& data, std::span<const double> b, const GeneratorModel& generator,
                      const SiteRateModel& site_rates);

std::vector<double> branch_gradient(const BoundData& data, std::span<const double> b,
                                    const GeneratorModel& generator, const SiteRateModel& site_rates);

struct RateGradient {
  std::vector<double> wrt_theta;  // U' dlogL/db
  std::vector<double> wrt_zeta;   // theta * wrt_theta
};

// Chain rule from branch integrals to epoch rates and log rates.
RateGradient rate_gradient(std::span<const double> branch_grad, const OccupancyMatrix& occupancy,
                           const RateField& field);

}  // namespace polyclock
