#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include <boost/math/distributions/normal.hpp>
#include <gmock/gmock.h>
#include <gtest/gtest.h>

#include "polyclock/app.hpp"
#include "polyclock/config.hpp"
#include "polyclock/diagnostics.hpp"
#include "polyclock/errors.hpp"

namespace polyclock {
namespace {

using ::testing::HasSubstr;
namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::path(::testing::TempDir()) / ("polyclock_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) { return read_text_file(p.string()); }

TEST(ConfigFile, ParsesSectionsAndComments) {
  const auto cfg = ConfigFile::parse("# run\n[sampler]\niterations = 500  # short\nseed=7\n\n[grid]\npoints = 3, 2,1\n");
  EXPECT_EQ(cfg.get_long("sampler", "iterations", 0), 500);
  EXPECT_EQ(cfg.get_long("sampler", "seed", 0), 7);
  EXPECT_EQ(cfg.get_doubles("grid", "points"), (std::vector<double>{3, 2, 1}));
  EXPECT_EQ(cfg.find("grid", "points")->line, 7);
  EXPECT_EQ(cfg.hash().size(), 16u);
}

TEST(ConfigFile, ErrorsNameKeyAndLine) {
  try {
    ConfigFile::parse("[sampler]\nitertions = 5\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "sampler.itertions");
    EXPECT_EQ(e.line(), 2u);
  }
  EXPECT_THROW(ConfigFile::parse("[nope]\n"), ConfigError);
  EXPECT_THROW(ConfigFile::parse("seed = 1\n"), ConfigError);
  EXPECT_THROW(ConfigFile::parse("[sampler]\nseed = 1\nseed = 2\n"), ConfigError);
  const auto cfg = ConfigFile::parse("[sampler]\n\nleapfrog_steps = many\n");
  try {
    cfg.get_long("sampler", "leapfrog_steps", 1);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_THAT(e.what(), HasSubstr("line 3"));
    EXPECT_THAT(e.what(), HasSubstr("sampler.leapfrog_steps"));
  }
}

TEST(RunConfig, ValidationNamesOffendingKey) {
  auto expect_key = [](const std::string& text, const std::string& key) {
    try {
      read_run_config(ConfigFile::parse(text));
      ADD_FAILURE() << "no error for " << key;
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.key(), key) << e.what();
    }
  };
  expect_key("[priors]\nrho = 1.5\n", "priors.rho");
  expect_key("[model]\nsubstitution = k80\n", "model.substitution");
  expect_key("[sampler]\ntarget_acceptance = 1\n", "sampler.target_acceptance");
  expect_key("[grid]\npoints = 1, 1\n", "grid.points");
  expect_key("[grid]\nsegments = 4 10\n", "grid.segments");
  expect_key("[simulate]\nrate = piecewise\ntheta = 1\n", "grid.points");
  expect_key("[grid]\npoints = 5\n[simulate]\nrate = piecewise\ntheta = 1\n", "simulate.theta");
}

TEST(RunConfig, Defaults) {
  const auto rc = read_run_config(ConfigFile::parse("", "/data/run"));
  EXPECT_EQ(rc.sampler.leapfrog_steps, 20);
  EXPECT_DOUBLE_EQ(rc.model.hyper.rho.fixed_value, 0.99);
  EXPECT_FALSE(rc.model.hyper.rho.estimated);
  EXPECT_EQ(rc.output.trace, "/data/run/trace.tsv");
  EXPECT_EQ(rc.model.gmrf.weighting, GapWeighting::inverse_gap);
}

TEST(RunConfig, MixedResolutionGrid) {
  const auto rc = read_run_config(ConfigFile::parse("[grid]\nsegments = 4 2020 2016; 2 2016 2000\n"));
  const auto grid = rc.grid.build();
  EXPECT_EQ(grid.grid_point_count(), 6);
  EXPECT_EQ(grid.present(), 2020.0);
}

constexpr const char* kThreeTaxonTree = "((A:1.5,B:1):1,C:2);\n";
constexpr const char* kThreeTaxonDates = "A\t2000.5\nB\t2000\nC\t2000\n";

void write_three_taxon_inputs(const fs::path& dir) {
  write_text_file((dir / "tree.nwk").string(), kThreeTaxonTree);
  write_text_file((dir / "dates.tsv").string(), kThreeTaxonDates);
}

std::string minimal_config(const std::string& extra = "") {
  return "[data]\ntree = tree.nwk\ndates = dates.tsv\nalignment = sim.fasta\n"
         "[simulate]\nsites = 200\nseed = 5\nrate_value = 0.05\noutput_prefix = sim\n" +
         extra;
}

TEST(CliSimulate, MinimalThreeTaxonConfig) {
  const auto dir = fresh_dir("sim3");
  write_three_taxon_inputs(dir);
  write_text_file((dir / "run.cfg").string(), minimal_config());
  std::ostringstream log;
  const auto out = run_simulate(load_run_config((dir / "run.cfg").string()), log);
  const auto aln = parse_fasta(slurp(out.alignment));
  EXPECT_EQ(aln.taxon_count(), 3);
  EXPECT_EQ(aln.site_count(), 200);
  const auto truth = slurp(out.truth);
  EXPECT_THAT(truth, HasSubstr("# config_hash "));
  EXPECT_EQ(std::count(truth.begin(), truth.end(), '\n'), 2 + 1 + 4);
  EXPECT_THAT(log.str(), HasSubstr("seed 5"));
  const auto tree = parse_newick(slurp(out.tree), parse_date_table(slurp(out.dates)));
  EXPECT_DOUBLE_EQ(tree.root_time(), 1998.0);
}

TEST(CliSimulate, DeterministicOutputs) {
  const auto dir = fresh_dir("simdet");
  write_three_taxon_inputs(dir);
  write_text_file((dir / "run.cfg").string(), minimal_config("taxa = 12\nsampling_start = 2000\nsampling_end = 2010\n"));
  std::ostringstream log;
  const auto rc = load_run_config((dir / "run.cfg").string());
  const auto first = run_simulate(rc, log);
  const std::string a = slurp(first.alignment) + slurp(first.truth) + slurp(first.tree) + slurp(first.dates);
  const auto second = run_simulate(rc, log);
  EXPECT_EQ(a, slurp(second.alignment) + slurp(second.truth) + slurp(second.tree) + slurp(second.dates));
}

TEST(CliInfer, ShortRunWritesTraceReportAndSummary) {
  const auto dir = fresh_dir("infer");
  write_three_taxon_inputs(dir);
  write_text_file((dir / "run.cfg").string(),
                  minimal_config() +
                      "[grid]\npoints = 1999.5, 1999\n[sampler]\niterations = 300\nthinning = 10\nseed = 3\n");
  std::ostringstream log;
  const auto rc = load_run_config((dir / "run.cfg").string());
  run_simulate(rc, log);
  ASSERT_EQ(run_infer(rc, 1, log), 0) << log.str();
  const auto trace = parse_trace(slurp(rc.output.trace));
  EXPECT_EQ(trace.row_count(), 31u);
  EXPECT_GE(trace.column("zeta_3"), 0);
  const auto report = slurp(rc.output.report);
  EXPECT_THAT(report, HasSubstr("\"divergences\""));
  EXPECT_THAT(report, HasSubstr("\"config_hash " + rc.file.hash()));
  EXPECT_THAT(slurp(rc.output.checkpoint), HasSubstr("\"polyclock "));
  run_summarize(rc, rc.output.trace, rc.output.summary, false, log);
  const auto summary = slurp(rc.output.summary);
  EXPECT_THAT(summary, HasSubstr("parameter\tepoch\tnewer\tolder\tmedian\tlower95\tupper95\tess\n"));
  EXPECT_THAT(summary, HasSubstr("theta\t1\tinf\t1999.5\t"));
  EXPECT_THAT(summary, HasSubstr("\ntau\tNA\tNA\tNA\t"));
}

TEST(CliInfer, SeveralChainsGetSuffixedOutputs) {
  EXPECT_EQ(suffixed_path("out/trace.tsv", 0, 1), "out/trace.tsv");
  EXPECT_EQ(suffixed_path("out/trace.tsv", 1, 3), "out/trace.chain2.tsv");
}

std::string synthetic_trace(int rows, const std::function<double(int, int)>& value, int epochs = 3) {
  std::string text = "# synthetic\niteration\tlog_likelihood\ttau";
  for (int m = 1; m <= epochs; ++m) text += "\tzeta_" + std::to_string(m);
  text += "\n";
  for (int r = 0; r < rows; ++r) {
    text += std::to_string(r * 10);
    for (int c = 0; c < 2 + epochs; ++c) text += "\t" + std::to_string(value(r, c));
    text += "\n";
  }
  return text;
}

std::vector<std::string> summary_row(const std::string& summary, const std::string& prefix) {
  std::istringstream in(summary);
  std::string line;
  while (std::getline(in, line)) {
    if (line.starts_with(prefix)) {
      std::vector<std::string> fields;
      std::istringstream fs_(line);
      std::string f;
      while (std::getline(fs_, f, '\t')) fields.push_back(f);
      return fields;
    }
  }
  return {};
}

TEST(Summarize, ConstantTraceHasZeroWidth) {
  std::string text = "iteration\tlog_likelihood\ttau\tzeta_1\tzeta_2\tzeta_3\n";
  for (int r = 0; r < 20; ++r) text += std::to_string(r) + "\t-10\t2\t-1\t-2\t-3\n";
  const auto summary = summarize_trace(parse_trace(text), EpochGrid({5.0, 3.0}), 0, false);
  for (int m = 1; m <= 3; ++m) {
    const auto row = summary_row(summary, "theta\t" + std::to_string(m) + "\t");
    ASSERT_EQ(row.size(), 8u);
    EXPECT_NEAR(std::stod(row[4]), std::exp(-m), 1e-9);
    EXPECT_EQ(row[5], row[6]);
    EXPECT_EQ(row[4], row[5]);
  }
  const auto zeta = summarize_trace(parse_trace(text), EpochGrid({5.0, 3.0}), 0, true);
  EXPECT_EQ(summary_row(zeta, "zeta\t2\t")[4], "-2");
}

TEST(Summarize, IidGaussianQuantiles) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.5, 2.0);
  const int rows = 40000;
  std::string text = "iteration\ttau\tzeta_1\tzeta_2\n";
  for (int r = 0; r < rows; ++r) {
    text += std::to_string(r) + "\t" + std::to_string(n(rng)) + "\t" + std::to_string(n(rng)) + "\t" +
            std::to_string(n(rng)) + "\n";
  }
  const auto summary = summarize_trace(parse_trace(text), EpochGrid({1.0}), 0, true);
  const boost::math::normal dist(0.5, 2.0);
  for (const std::string prefix : {"zeta\t1\t", "zeta\t2\t", "tau\t"}) {
    const auto row = summary_row(summary, prefix);
    ASSERT_EQ(row.size(), 8u) << prefix;
    const double p[] = {0.5, 0.025, 0.975};
    for (int i = 0; i < 3; ++i) {
      const double q = boost::math::quantile(dist, p[i]);
      // Standard error of a sample quantile: sqrt(p(1-p)/n) / f(q).
      const double se = std::sqrt(p[i] * (1 - p[i]) / rows) / boost::math::pdf(dist, q);
      EXPECT_NEAR(std::stod(row[4 + i]), q, 4.0 * se) << prefix << " p=" << p[i];
    }
    EXPECT_GT(std::stod(row[7]), 0.8 * rows);
  }
}

TEST(Summarize, BurnInAndMinimumRows) {
  const auto text = synthetic_trace(30, [](int r, int c) { return r + c * 0.1; });
  const auto trace = parse_trace(text);
  EXPECT_NO_THROW(summarize_trace(trace, EpochGrid({5.0, 3.0}), 200, false));
  EXPECT_THROW(summarize_trace(trace, EpochGrid({5.0, 3.0}), 210, false), Error);
  EXPECT_THROW(summarize_trace(trace, EpochGrid({5.0}), 0, false), Error);
}

TEST(ParseTrace, RejectsMalformedRows) {
  EXPECT_THROW(parse_trace("iteration\ta\n0\t1\t2\n"), ParseError);
  EXPECT_THROW(parse_trace("iteration\ta\n0\tx\n"), ParseError);
  EXPECT_THROW(parse_trace("a\tb\n"), ParseError);
}

TEST(Diagnostics, QuantileType7) {
  const std::vector<double> x{4, 1, 3, 2};
  EXPECT_DOUBLE_EQ(quantile(x, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(quantile(x, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(quantile(x, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile(x, 0.25), 1.75);
}

TEST(Diagnostics, EssOfIidAndAutoregressiveSeries) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n;
  const int len = 100000;
  std::vector<double> iid(len), ar(len);
  const double phi = 0.9;
  double prev = 0.0;
  for (int i = 0; i < len; ++i) {
    iid[i] = n(rng);
    prev = phi * prev + n(rng);
    ar[i] = prev;
  }
  EXPECT_NEAR(effective_sample_size(iid) / len, 1.0, 0.05);
  const double expected = len * (1 - phi) / (1 + phi);
  EXPECT_NEAR(effective_sample_size(ar), expected, 0.15 * expected);
}

}  // namespace
}  // namespace polyclock
