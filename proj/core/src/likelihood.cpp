#include "polyclock/likelihood.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <thread>

#include <fmt/format.h>

#include "polyclock/errors.hpp"

namespace polyclock {

namespace {

constexpr int kBlockPatterns = 64;
constexpr int kMaxStates = 64;
constexpr double kScaleThreshold = 1e-100;

// Kernels over a block of n patterns in the state-major layout. `S` is the
// state count when known at compile time (0 for the runtime `states`); the
// fixed-size instantiations unroll the state loops so the pattern loop
// vectorizes.

// out[r][i] = sum_c M[r][c] in[c][i], or M[c][r] when `Transposed`.
template <int S, bool Transposed>
void propagate(const double* M, int states, const double* __restrict in, double* __restrict out,
               std::size_t stride, int n) {
  const int ns = S > 0 ? S : states;
  if constexpr (S > 0) {
    double m[S][S];
    for (int r = 0; r < S; ++r) {
      for (int c = 0; c < S; ++c) m[r][c] = Transposed ? M[c * S + r] : M[r * S + c];
    }
    for (int i = 0; i < n; ++i) {
#pragma GCC unroll 8
      for (int r = 0; r < S; ++r) {
        double acc = 0.0;
#pragma GCC unroll 8
        for (int c = 0; c < S; ++c) acc += m[r][c] * in[c * stride + i];
        out[r * stride + i] = acc;
      }
    }
  } else {
    for (int r = 0; r < ns; ++r) {
      double* __restrict y = out + r * stride;
      std::fill_n(y, n, 0.0);
      for (int c = 0; c < ns; ++c) {
        const double v = Transposed ? M[c * ns + r] : M[r * ns + c];
        const double* __restrict x = in + c * stride;
        for (int i = 0; i < n; ++i) y[i] += v * x[i];
      }
    }
  }
}

// num[i] += w sum_r a[r][i] (M in)[r][i];  den[i] += w sum_r a[r][i] u[r][i]
template <int S>
void accumulate_derivative(const double* M, int states, double w, const double* __restrict a,
                           const double* __restrict in, const double* __restrict u, double* __restrict num,
                           double* __restrict den, std::size_t a_stride, std::size_t stride, int n) {
  const int ns = S > 0 ? S : states;
  if constexpr (S > 0) {
    double m[S][S];
    for (int r = 0; r < S; ++r) {
      for (int c = 0; c < S; ++c) m[r][c] = w * M[r * S + c];
    }
    for (int i = 0; i < n; ++i) {
      double g = 0.0;
      double d = 0.0;
#pragma GCC unroll 8
      for (int r = 0; r < S; ++r) {
        double acc = 0.0;
#pragma GCC unroll 8
        for (int c = 0; c < S; ++c) acc += m[r][c] * in[c * stride + i];
        g += a[r * a_stride + i] * acc;
        d += a[r * a_stride + i] * u[r * stride + i];
      }
      num[i] += g;
      den[i] += w * d;
    }
  } else {
    for (int r = 0; r < ns; ++r) {
      const double* __restrict ar = a + r * a_stride;
      const double* __restrict ur = u + r * stride;
      for (int i = 0; i < n; ++i) den[i] += w * ar[i] * ur[i];
      for (int c = 0; c < ns; ++c) {
        const double v = w * M[r * ns + c];
        const double* __restrict x = in + c * stride;
        for (int i = 0; i < n; ++i) num[i] += v * ar[i] * x[i];
      }
    }
  }
}

int threads_from_env() {
  if (const char* env = std::getenv("POLYCLOCK_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

}  // namespace

TreeLikelihood::TreeLikelihood(const BoundData& data, GeneratorModel generator, SiteRateModel site_rates,
                               int threads)
    : data_(&data), threads_(threads > 0 ? threads : threads_from_env()) {
  if (data.state_count < 1 || data.state_count > kMaxStates) {
    throw DimensionError(fmt::format("likelihood supports 1 to {} states, data has {}", kMaxStates, data.state_count));
  }
  tips_ = data.tree.tip_count();
  tip_codes_ = data.tip_patterns;
  for (auto& code : tip_codes_) {
    if (code == kMissing) code = static_cast<std::uint8_t>(data.state_count);
  }
  nodes_ = data.tree.node_count();
  patterns_ = data.pattern_count;
  states_ = data.state_count;
  blocks_ = (patterns_ + kBlockPatterns - 1) / kBlockPatterns;
  log_scale_.assign(patterns_, 0.0);
  pattern_log_lik_.assign(patterns_, 0.0);
  block_log_lik_.assign(blocks_, 0.0);
  block_gradient_.assign(static_cast<std::size_t>(blocks_) * (nodes_ - 1), 0.0);
  set_model(std::move(generator), std::move(site_rates));
}

void TreeLikelihood::set_model(GeneratorModel generator, SiteRateModel site_rates) {
  if (generator.state_count() != states_) {
    throw DimensionError(fmt::format("generator has {} states, data has {}", generator.state_count(), states_));
  }
  if (site_rates.category_count() < 1 || site_rates.weights.size() != site_rates.rates.size()) {
    throw ModelError("site rate model needs matching rates and weights");
  }
  generator_ = std::move(generator);
  site_rates_ = std::move(site_rates);
  const int S = states_;
  const int K = site_rates_.category_count();
  if (K != categories_) {
    categories_ = K;
    node_stride_ = static_cast<std::size_t>(patterns_) * K * S;
    post_.assign((tips_ - 1) * node_stride_, 0.0);
    pre_.assign((tips_ - 1) * node_stride_, 0.0);
    top_.assign((nodes_ - 1) * node_stride_, 0.0);
    prob_.assign(static_cast<std::size_t>(nodes_ - 1) * K * S * S, 0.0);
    dprob_.assign(prob_.size(), 0.0);
  }
  right_.resize(S * S);
  left_.resize(S * S);
  eigenvalues_.resize(S);
  pi_.resize(S);
  for (int i = 0; i < S; ++i) {
    eigenvalues_[i] = generator_.eigenvalues()[i];
    pi_[i] = generator_.stationary()[i];
    for (int j = 0; j < S; ++j) {
      right_[i * S + j] = generator_.right_eigenvectors()(i, j);
      left_[i * S + j] = generator_.left_eigenvectors()(i, j);
    }
  }
  cached_b_.assign(nodes_ - 1, -1.0);
  post_valid_ = false;
}

template <int kStates>
void TreeLikelihood::update_matrices(std::span<const double> b) {
  const int S = kStates > 0 ? kStates : states_;
  const int K = categories_;
  double decay[64];
  double* d = S <= 64 ? decay : nullptr;
  std::vector<double> heap;
  if (!d) {
    heap.resize(S);
    d = heap.data();
  }
  for (int i = 0; i < nodes_ - 1; ++i) {
    if (!std::isfinite(b[i]) || b[i] < 0.0) {
      throw NumericalError(fmt::format("branch {} has invalid branch integral {}", i, b[i]), i);
    }
    if (b[i] == cached_b_[i]) continue;
    for (int k = 0; k < K; ++k) {
      const double r = site_rates_.rates[k];
      double* p = prob_.data() + (static_cast<std::size_t>(i) * K + k) * S * S;
      double* dp = dprob_.data() + (static_cast<std::size_t>(i) * K + k) * S * S;
      for (int l = 0; l < S; ++l) d[l] = std::exp(eigenvalues_[l] * r * b[i]);
      for (int s = 0; s < S; ++s) {
        for (int t = 0; t < S; ++t) {
          double acc = 0.0;
          double dacc = 0.0;
          for (int l = 0; l < S; ++l) {
            const double term = right_[s * S + l] * d[l] * left_[l * S + t];
            acc += term;
            dacc += term * eigenvalues_[l];
          }
          if (!std::isfinite(acc) || !std::isfinite(dacc)) {
            throw NumericalError(fmt::format("non-finite transition probability on branch {}", i), i);
          }
          p[s * S + t] = std::clamp(acc, 0.0, 1.0);
          dp[s * S + t] = r * dacc;
        }
      }
    }
    cached_b_[i] = b[i];
  }
}

template <typename Fn>
void TreeLikelihood::for_each_block(Fn&& fn) {
  const int workers = std::min(threads_, blocks_);
  if (workers <= 1) {
    for (int blk = 0; blk < blocks_; ++blk) fn(blk);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int blk = w; blk < blocks_; blk += workers) fn(blk);
    });
  }
  for (auto& t : pool) t.join();
}

template <int kStates>
void TreeLikelihood::post_order_block(int block) {
  const int S = kStates > 0 ? kStates : states_;
  const int K = categories_;
  const int p0 = block * kBlockPatterns;
  const int p1 = std::min(patterns_, p0 + kBlockPatterns);
  const int n = p1 - p0;
  const std::size_t stride = patterns_;
  const auto& tree = data_->tree;
  const int rows = K * S;
  double mx[kBlockPatterns];

  std::fill(log_scale_.begin() + p0, log_scale_.begin() + p1, 0.0);

  for (int a = tips_; a < nodes_; ++a) {
    for (int c : tree.children(a)) {
      for (int k = 0; k < K; ++k) {
        const double* P = matrix(prob_, c, k);
        double* up = top(c) + row_offset(k, 0) + p0;
        if (tree.is_tip(c)) {
          // Missing data maps to index S, whose entry is 1.
          const std::uint8_t* codes = tip_codes_.data() + static_cast<std::size_t>(c) * patterns_ + p0;
          double lut[kMaxStates + 1];
          lut[S] = 1.0;
          for (int s = 0; s < S; ++s) {
            std::copy_n(P + s * S, S, lut);
            double* out = up + s * stride;
            for (int i = 0; i < n; ++i) out[i] = lut[codes[i]];
          }
        } else {
          propagate<kStates, false>(P, S, internal_post(c) + row_offset(k, 0) + p0, up, stride, n);
        }
      }
    }
    const auto& ch = tree.children(a);
    const double* u0 = top(ch[0]) + p0;
    const double* u1 = top(ch[1]) + p0;
    double* dst = internal_post(a) + p0;
    std::fill(mx, mx + n, 0.0);
    for (int j = 0; j < rows; ++j) {
      const double* __restrict x0 = u0 + j * stride;
      const double* __restrict x1 = u1 + j * stride;
      double* __restrict d = dst + j * stride;
      for (int i = 0; i < n; ++i) {
        d[i] = x0[i] * x1[i];
        mx[i] = mx[i] < d[i] ? d[i] : mx[i];
      }
    }
    for (int i = 0; i < n; ++i) {
      if (mx[i] < kScaleThreshold && mx[i] > 0.0) {
        const double inv = 1.0 / mx[i];
        for (int j = 0; j < rows; ++j) dst[j * stride + i] *= inv;
        log_scale_[p0 + i] += std::log(mx[i]);
      }
    }
  }

  const double* root = internal_post(nodes_ - 1) + p0;
  double site[kBlockPatterns];
  std::fill(site, site + n, 0.0);
  for (int k = 0; k < K; ++k) {
    for (int s = 0; s < S; ++s) {
      const double f = site_rates_.weights[k] * pi_[s];
      const double* rp = root + (k * S + s) * stride;
      for (int i = 0; i < n; ++i) site[i] += f * rp[i];
    }
  }
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const int p = p0 + i;
    pattern_log_lik_[p] = std::log(site[i]) + log_scale_[p];
    total += data_->pattern_weights[p] * pattern_log_lik_[p];
  }
  block_log_lik_[block] = total;
}

template <int kStates>
void TreeLikelihood::pre_order_block(int block) {
  const int S = kStates > 0 ? kStates : states_;
  const int K = categories_;
  const int p0 = block * kBlockPatterns;
  const int p1 = std::min(patterns_, p0 + kBlockPatterns);
  const int n = p1 - p0;
  const std::size_t stride = patterns_;
  const auto& tree = data_->tree;
  const int branches = nodes_ - 1;
  const int rows = K * S;
  double* grad = block_gradient_.data() + static_cast<std::size_t>(block) * branches;
  std::fill(grad, grad + branches, 0.0);
  const auto& w = site_rates_.weights;
  const double* pattern_weight = data_->pattern_weights.data() + p0;
  // above[k][s][i] = q_a * u_sibling for the current child
  std::vector<double> above(static_cast<std::size_t>(rows) * kBlockPatterns);
  double num[kBlockPatterns];
  double den[kBlockPatterns];
  double mx[kBlockPatterns];

  double* root_pre = internal_pre(nodes_ - 1);
  for (int k = 0; k < K; ++k) {
    for (int s = 0; s < S; ++s) std::fill_n(root_pre + row_offset(k, s) + p0, n, pi_[s]);
  }

  for (int a = nodes_ - 1; a >= tips_; --a) {
    const auto& ch = tree.children(a);
    for (int side = 0; side < 2; ++side) {
      const int c = ch[side];
      const bool tip = tree.is_tip(c);
      {
        const double* qa = internal_pre(a) + p0;
        const double* us = top(ch[1 - side]) + p0;
        for (int j = 0; j < rows; ++j) {
          const double* __restrict x = qa + j * stride;
          const double* __restrict y = us + j * stride;
          double* __restrict out = above.data() + j * kBlockPatterns;
          for (int i = 0; i < n; ++i) out[i] = x[i] * y[i];
        }
      }
      std::fill(num, num + n, 0.0);
      std::fill(den, den + n, 0.0);
      for (int k = 0; k < K; ++k) {
        const double* ab = above.data() + static_cast<std::size_t>(k) * S * kBlockPatterns;
        const double* uc = top(c) + row_offset(k, 0) + p0;
        const double* dP = matrix(dprob_, c, k);
        const double wk = w[k];
        if (tip) {
          const std::uint8_t* codes = data_->tip_patterns.data() + static_cast<std::size_t>(c) * patterns_ + p0;
          for (int i = 0; i < n; ++i) {
            const std::uint8_t code = codes[i];
            double d = 0.0;
            double g = 0.0;
            for (int s = 0; s < S; ++s) {
              const double v = ab[s * kBlockPatterns + i];
              d += v * uc[s * stride + i];
              if (code != kMissing) g += v * dP[s * S + code];
            }
            num[i] += wk * g;
            den[i] += wk * d;
          }
        } else {
          accumulate_derivative<kStates>(dP, S, wk, ab, internal_post(c) + row_offset(k, 0) + p0, uc, num, den,
                                         kBlockPatterns, stride, n);
        }
      }
      double g = 0.0;
      for (int i = 0; i < n; ++i) g += pattern_weight[i] * (num[i] / den[i]);
      grad[c] = g;

      if (tip) continue;
      double* qc = internal_pre(c) + p0;
      for (int k = 0; k < K; ++k) {
        // Rows of `above` are kBlockPatterns apart; copy through the
        // pattern-stride layout of q.
        const double* P = matrix(prob_, c, k);
        const double* ab = above.data() + static_cast<std::size_t>(k) * S * kBlockPatterns;
        double* out = qc + row_offset(k, 0);
        if constexpr (kStates > 0) {
          double m[kStates][kStates];
          for (int t = 0; t < kStates; ++t) {
            for (int s = 0; s < kStates; ++s) m[t][s] = P[s * kStates + t];
          }
          for (int i = 0; i < n; ++i) {
#pragma GCC unroll 8
            for (int t = 0; t < kStates; ++t) {
              double acc = 0.0;
#pragma GCC unroll 8
              for (int s = 0; s < kStates; ++s) acc += m[t][s] * ab[s * kBlockPatterns + i];
              out[t * stride + i] = acc;
            }
          }
        } else {
          for (int t = 0; t < S; ++t) {
            double* __restrict y = out + t * stride;
            std::fill_n(y, n, 0.0);
            for (int s = 0; s < S; ++s) {
              const double v = P[s * S + t];
              const double* __restrict x = ab + s * kBlockPatterns;
              for (int i = 0; i < n; ++i) y[i] += v * x[i];
            }
          }
        }
      }
      std::fill(mx, mx + n, 0.0);
      for (int j = 0; j < rows; ++j) {
        const double* __restrict q = qc + j * stride;
        for (int i = 0; i < n; ++i) mx[i] = mx[i] < q[i] ? q[i] : mx[i];
      }
      for (int i = 0; i < n; ++i) {
        if (mx[i] < kScaleThreshold && mx[i] > 0.0) {
          const double inv = 1.0 / mx[i];
          for (int j = 0; j < rows; ++j) qc[j * stride + i] *= inv;
        }
      }
    }
  }
}

double TreeLikelihood::log_likelihood(std::span<const double> b) {
  if (static_cast<int>(b.size()) != nodes_ - 1) {
    throw DimensionError(fmt::format("expected {} branch integrals, got {}", nodes_ - 1, b.size()));
  }
  post_valid_ = false;
  if (states_ == 4) {
    update_matrices<4>(b);
    for_each_block([this](int blk) { post_order_block<4>(blk); });
  } else {
    update_matrices<0>(b);
    for_each_block([this](int blk) { post_order_block<0>(blk); });
  }
  double total = 0.0;
  for (double v : block_log_lik_) total += v;
  post_valid_ = true;
  return total;
}

std::vector<double> TreeLikelihood::branch_gradient() {
  if (!post_valid_) throw Error("branch_gradient requires a completed post-order pass");
  if (states_ == 4) {
    for_each_block([this](int blk) { pre_order_block<4>(blk); });
  } else {
    for_each_block([this](int blk) { pre_order_block<0>(blk); });
  }
  const int branches = nodes_ - 1;
  std::vector<double> grad(branches, 0.0);
  for (int blk = 0; blk < blocks_; ++blk) {
    const double* g = block_gradient_.data() + static_cast<std::size_t>(blk) * branches;
    for (int i = 0; i < branches; ++i) grad[i] += g[i];
  }
  return grad;
}

double TreeLikelihood::log_likelihood_and_gradient(std::span<const double> b, std::span<double> gradient) {
  if (static_cast<int>(b.size()) != nodes_ - 1) {
    throw DimensionError(fmt::format("expected {} branch integrals, got {}", nodes_ - 1, b.size()));
  }
  if (static_cast<int>(gradient.size()) != nodes_ - 1) {
    throw DimensionError(fmt::format("gradient buffer has {} entries, expected {}", gradient.size(), nodes_ - 1));
  }
  post_valid_ = false;
  // Both passes per block back to back, while the block's partials are
  // still in cache.
  if (states_ == 4) {
    update_matrices<4>(b);
    for_each_block([this](int blk) {
      post_order_block<4>(blk);
      pre_order_block<4>(blk);
    });
  } else {
    update_matrices<0>(b);
    for_each_block([this](int blk) {
      post_order_block<0>(blk);
      pre_order_block<0>(blk);
    });
  }
  post_valid_ = true;
  double total = 0.0;
  for (double v : block_log_lik_) total += v;
  const int branches = nodes_ - 1;
  std::fill(gradient.begin(), gradient.end(), 0.0);
  for (int blk = 0; blk < blocks_; ++blk) {
    const double* g = block_gradient_.data() + static_cast<std::size_t>(blk) * branches;
    for (int i = 0; i < branches; ++i) gradient[i] += g[i];
  }
  return total;
}

double log_likelihood(const BoundData& data, std::span<const double> b, const GeneratorModel& generator,
                      const SiteRateModel& site_rates) {
  TreeLikelihood engine(data, generator, site_rates, 1);
  return engine.log_likelihood(b);
}

std::vector<double> branch_gradient(const BoundData& data, std::span<const double> b,
                                    const GeneratorModel& generator, const SiteRateModel& site_rates) {
  TreeLikelihood engine(data, generator, site_rates, 1);
  engine.log_likelihood(b);
  return engine.branch_gradient();
}

RateGradient rate_gradient(std::span<const double> branch_grad, const OccupancyMatrix& occupancy,
                           const RateField& field) {
  if (field.size() != occupancy.epoch_count()) {
    throw DimensionError(fmt::format("rate field has {} epochs, occupancy has {}", field.size(),
                                     occupancy.epoch_count()));
  }
  RateGradient out;
  out.wrt_theta.assign(occupancy.epoch_count(), 0.0);
  occupancy.transpose_multiply(branch_grad, out.wrt_theta);
  out.wrt_zeta.resize(out.wrt_theta.size());
  const auto theta = field.theta();
  for (std::size_t m = 0; m < theta.size(); ++m) out.wrt_zeta[m] = theta[m] * out.wrt_theta[m];
  return out;
}

}  // namespace polyclock
