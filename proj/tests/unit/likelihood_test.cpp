#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "polyclock/errors.hpp"
#include "polyclock/likelihood.hpp"

namespace polyclock {
namespace {

struct Instance {
  TimeTree tree;
  Alignment aln;
  BoundData data;
  std::vector<double> b;
  GeneratorModel generator;
  SiteRateModel rates;
};

Instance random_instance(std::mt19937_64& rng, int taxa, int sites, int categories, double missing = 0.1) {
  Instance in;
  in.tree = testing::random_tree(taxa, rng);
  in.aln = testing::random_alignment(testing::taxon_labels(taxa), sites, rng, missing);
  in.data = bind(in.tree, in.aln);
  std::uniform_real_distribution<double> len(0.01, 0.8);
  in.b.resize(in.tree.branch_count());
  for (auto& v : in.b) v = len(rng);
  in.generator = testing::random_gtr(rng);
  in.rates = categories == 1 ? single_rate()
                             : discretized_gamma(std::uniform_real_distribution<double>(0.2, 3.0)(rng), categories);
  return in;
}

double oracle(const Instance& in) {
  return testing::brute_force_log_likelihood(in.tree, in.aln, in.b, in.generator.rate_matrix(),
                                             in.generator.stationary(), in.rates.rates, in.rates.weights);
}

TEST(LogLikelihood, MatchesExhaustiveEnumeration) {
  std::mt19937_64 rng(101);
  for (int rep = 0; rep < 60; ++rep) {
    const auto in = random_instance(rng, 2 + rep % 4, 1 + rep % 4, 1 + rep % 2);
    const double ll = log_likelihood(in.data, in.b, in.generator, in.rates);
    ASSERT_NEAR(ll, oracle(in), 1e-10) << "rep " << rep;
  }
}

TEST(LogLikelihood, ThreeTaxaJukesCantorTwoSites) {
  std::mt19937_64 rng(5);
  auto in = random_instance(rng, 3, 2, 1, 0.0);
  in.generator = jukes_cantor();
  EXPECT_NEAR(log_likelihood(in.data, in.b, in.generator, in.rates), oracle(in), 1e-12);
}

TEST(LogLikelihood, ZeroLengthLimitGivesStationaryProbability) {
  const TimeTree tree({2, 2, -1}, {1.0, 1.0, 0.0}, {"A", "B"});
  const auto data = bind(tree, parse_fasta(">A\nG\n>B\nG\n"));
  const std::vector<double> pi{0.1, 0.2, 0.3, 0.4};
  const auto gen = hky(2.0, pi);
  const std::vector<double> b{1e-12, 1e-12};
  EXPECT_NEAR(log_likelihood(data, b, gen, single_rate()), std::log(0.3), 1e-9);
}

TEST(LogLikelihood, MixtureCollapsesForLargeShape) {
  std::mt19937_64 rng(7);
  const auto in = random_instance(rng, 8, 40, 1);
  const double one = log_likelihood(in.data, in.b, in.generator, single_rate());
  const double four = log_likelihood(in.data, in.b, in.generator, discretized_gamma(1e9, 4));
  EXPECT_NEAR(one, four, 1e-6);
}

TEST(LogLikelihood, ScaledEqualsExtendedPrecision) {
  std::mt19937_64 rng(9);
  for (int taxa : {6, 40, 300}) {
    auto in = random_instance(rng, taxa, 12, 2, 0.05);
    for (auto& v : in.b) v *= 4.0;  // long branches drive partials toward underflow
    const double ll = log_likelihood(in.data, in.b, in.generator, in.rates);
    const double ext = testing::unscaled_log_likelihood(in.tree, in.aln, in.b, in.generator.rate_matrix(),
                                                        in.generator.stationary(), in.rates.rates,
                                                        in.rates.weights);
    EXPECT_NEAR(ll, ext, 1e-9 * std::max(1.0, std::abs(ext))) << taxa << " taxa";
    if (taxa == 300) EXPECT_LT(ext / 12.0, std::log(1e-100));  // rescaling was exercised
  }
}

TEST(LogLikelihood, NoUnderflowOnLongAlignments) {
  std::mt19937_64 rng(10);
  const auto in = random_instance(rng, 120, 100000, 2, 0.02);
  TreeLikelihood lik(in.data, in.generator, in.rates, 1);
  EXPECT_TRUE(std::isfinite(lik.log_likelihood(in.b)));
  for (double v : lik.pattern_log_likelihoods()) ASSERT_TRUE(std::isfinite(v));
}

TEST(LogLikelihood, InvariantToTipOrderInAlignment) {
  std::mt19937_64 rng(11);
  const auto in = random_instance(rng, 9, 60, 2);
  std::vector<int> order(in.aln.taxon_count());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::string> taxa;
  std::vector<std::uint8_t> cells;
  for (int r : order) {
    taxa.push_back(in.aln.taxa()[r]);
    for (auto v : in.aln.row(r)) cells.push_back(v);
  }
  const Alignment shuffled(taxa, 4, in.aln.site_count(), cells);
  const auto data2 = bind(in.tree, shuffled);
  EXPECT_NEAR(log_likelihood(in.data, in.b, in.generator, in.rates),
              log_likelihood(data2, in.b, in.generator, in.rates), 1e-10);
}

TEST(LogLikelihood, ThreadCountDoesNotChangeResults) {
  std::mt19937_64 rng(12);
  const auto in = random_instance(rng, 20, 3000, 2);
  TreeLikelihood one(in.data, in.generator, in.rates, 1);
  TreeLikelihood many(in.data, in.generator, in.rates, 3);
  std::vector<double> g1(in.b.size()), g3(in.b.size());
  const double l1 = one.log_likelihood_and_gradient(in.b, g1);
  const double l3 = many.log_likelihood_and_gradient(in.b, g3);
  EXPECT_EQ(l1, l3);
  EXPECT_EQ(g1, g3);
  EXPECT_EQ(one.log_likelihood(in.b), l1);
  EXPECT_EQ(one.branch_gradient(), g1);
}

TEST(LogLikelihood, NonFiniteBranchIsNumericalError) {
  std::mt19937_64 rng(13);
  auto in = random_instance(rng, 5, 10, 1);
  in.b[3] = std::numeric_limits<double>::infinity();
  try {
    log_likelihood(in.data, in.b, in.generator, in.rates);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.branch(), 3);
  }
}

TEST(BranchGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  for (int rep = 0; rep < 10; ++rep) {
    const auto in = random_instance(rng, 10, 30, rep % 3 == 0 ? 4 : 1);
    const auto grad = branch_gradient(in.data, in.b, in.generator, in.rates);
    auto f = [&](std::span<const double> b) { return log_likelihood(in.data, b, in.generator, in.rates); };
    for (std::size_t i = 0; i < in.b.size(); ++i) {
      const double fd = testing::central_difference(f, in.b, i, 1e-5 * in.b[i]);
      ASSERT_NEAR(grad[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "rep " << rep << " branch " << i;
    }
  }
}

TEST(BranchGradient, MixtureMatchesFiniteDifferences) {
  std::mt19937_64 rng(22);
  const auto in = random_instance(rng, 7, 25, 4, 0.2);
  const auto grad = branch_gradient(in.data, in.b, in.generator, in.rates);
  auto f = [&](std::span<const double> b) { return log_likelihood(in.data, b, in.generator, in.rates); };
  for (std::size_t i = 0; i < in.b.size(); ++i) {
    const double fd = testing::central_difference(f, in.b, i, 1e-5 * in.b[i]);
    EXPECT_NEAR(grad[i], fd, 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST(BranchGradient, MissingSubtreeContributesNothing) {
  // ((A,B),(C,D)) with A and B entirely missing.
  const TimeTree tree({4, 4, 5, 5, 6, 6, -1}, {10, 10, 10, 10, 8, 7, 5}, {"A", "B", "C", "D"});
  const auto data = bind(tree, parse_fasta(">A\n----\n>B\nNNNN\n>C\nACGT\n>D\nACGA\n"));
  const std::vector<double> b{0.2, 0.3, 0.1, 0.4, 0.25, 0.15};
  const auto grad = branch_gradient(data, b, hky(2.0, std::vector<double>{0.2, 0.3, 0.3, 0.2}), single_rate());
  EXPECT_NEAR(grad[0], 0.0, 1e-14);
  EXPECT_NEAR(grad[1], 0.0, 1e-14);
  EXPECT_NEAR(grad[4], 0.0, 1e-14);
  EXPECT_GT(std::abs(grad[2]), 1e-3);
}

TEST(BranchGradient, ConcatenatedAlignmentsAdd) {
  std::mt19937_64 rng(23);
  const auto in = random_instance(rng, 8, 40, 2);
  const auto other = testing::random_alignment(testing::taxon_labels(8), 25, rng, 0.1);
  std::vector<std::uint8_t> cells;
  for (int r = 0; r < 8; ++r) {
    for (auto v : in.aln.row(r)) cells.push_back(v);
    for (auto v : other.row(r)) cells.push_back(v);
  }
  const Alignment joined(testing::taxon_labels(8), 4, 65, cells);
  const auto g1 = branch_gradient(in.data, in.b, in.generator, in.rates);
  const auto g2 = branch_gradient(bind(in.tree, other), in.b, in.generator, in.rates);
  const auto g = branch_gradient(bind(in.tree, joined), in.b, in.generator, in.rates);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], g1[i] + g2[i], 1e-10 * std::max(1.0, std::abs(g[i])));
}

TEST(BranchGradient, RequiresPostOrderPass) {
  std::mt19937_64 rng(24);
  const auto in = random_instance(rng, 4, 5, 1);
  TreeLikelihood lik(in.data, in.generator, in.rates, 1);
  EXPECT_THROW(lik.branch_gradient(), Error);
}

TEST(RateGradient, ScalarChainRule) {
  const OccupancyMatrix occ(1, {0, 1}, {0}, {2.5});
  const std::vector<double> grad_b{-3.0};
  const auto g = rate_gradient(grad_b, occ, RateField({std::log(0.4)}));
  EXPECT_DOUBLE_EQ(g.wrt_theta[0], 2.5 * -3.0);
  EXPECT_NEAR(g.wrt_zeta[0], 0.4 * 2.5 * -3.0, 1e-15);
}

TEST(RateGradient, DimensionMismatch) {
  const OccupancyMatrix occ(2, {0, 1}, {0}, {2.5});
  EXPECT_THROW(rate_gradient(std::vector<double>{1.0, 2.0}, occ, RateField({0.0, 0.0})), DimensionError);
  EXPECT_THROW(rate_gradient(std::vector<double>{1.0}, occ, RateField({0.0})), DimensionError);
}

TEST(RateGradient, ZetaFiniteDifferencesFiftyEpochs) {
  std::mt19937_64 rng(31);
  auto in = random_instance(rng, 10, 20, 1);
  const auto grid = EpochGrid::uniform(50, in.tree.present(), in.tree.root_time() - 2.0);
  const auto occ = build_occupancy(in.tree, grid);
  std::vector<double> zeta(51);
  std::normal_distribution<double> z(-1.0, 0.5);
  for (auto& v : zeta) v = z(rng);
  auto f = [&](std::span<const double> x) {
    return log_likelihood(in.data, branch_integrals(occ, RateField({x.begin(), x.end()})), in.generator, in.rates);
  };
  const auto b = branch_integrals(occ, RateField(zeta));
  const auto g = rate_gradient(branch_gradient(in.data, b, in.generator, in.rates), occ, RateField(zeta));
  for (std::size_t m = 0; m < zeta.size(); ++m) {
    const double fd = testing::central_difference(f, zeta, m, 1e-5);
    EXPECT_NEAR(g.wrt_zeta[m], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "epoch " << m;
  }
}

TEST(RateGradient, EpochsOlderThanRootGetZero) {
  std::mt19937_64 rng(32);
  const auto in = random_instance(rng, 6, 10, 1);
  const double height = in.tree.present() - in.tree.root_time();
  const auto grid = EpochGrid::uniform(10, in.tree.present(), in.tree.root_time() - height);
  const auto occ = build_occupancy(in.tree, grid);
  const RateField field = RateField::constant(11, 0.05);
  const auto b = branch_integrals(occ, field);
  const auto g = rate_gradient(branch_gradient(in.data, b, in.generator, in.rates), occ, field);
  const int root_epoch = grid.epoch_of(in.tree.root_time());
  for (int m = root_epoch + 1; m < 11; ++m) EXPECT_EQ(g.wrt_theta[m], 0.0);
  EXPECT_NE(g.wrt_theta[root_epoch], 0.0);
}

}  // namespace
}  // namespace polyclock
