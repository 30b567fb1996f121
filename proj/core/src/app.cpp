#include "polyclock/app.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "polyclock/diagnostics.hpp"
#include "polyclock/errors.hpp"
#include "polyclock/simulate.hpp"
#include "polyclock/version.hpp"

namespace polyclock {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  while (true) {
    const auto at = s.find(sep);
    out.push_back(s.substr(0, at));
    if (at == std::string_view::npos) break;
    s = s.substr(at + 1);
  }
  return out;
}

bool to_double(std::string_view s, double& v) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  return ec == std::errc() && ptr == s.data() + s.size() && !s.empty();
}

std::vector<GridSegment> parse_segments(const ConfigFile& file) {
  const auto* entry = file.find("grid", "segments");
  if (!entry) return {};
  std::vector<GridSegment> out;
  for (auto part : split(entry->value, ';')) {
    part = trim(part);
    if (part.empty()) continue;
    std::istringstream in{std::string(part)};
    GridSegment seg;
    std::string extra;
    if (!(in >> seg.count >> seg.newest >> seg.oldest) || (in >> extra)) {
      file.fail("grid", "segments", fmt::format("expected 'count newest oldest', got '{}'", part));
    }
    if (seg.count < 1 || !(seg.newest > seg.oldest)) {
      file.fail("grid", "segments", fmt::format("segment '{}' needs count >= 1 and newest > oldest", part));
    }
    out.push_back(seg);
  }
  return out;
}

void write_lines(std::ostream& out, const std::vector<std::string>& lines, std::string_view prefix) {
  for (const auto& l : lines) out << prefix << l << '\n';
}

std::string with_comments(const std::vector<std::string>& header, std::string_view prefix, std::string_view body) {
  std::ostringstream out;
  write_lines(out, header, prefix);
  out << body;
  return out.str();
}

std::string format_bound(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return fmt::format("{:.17g}", v);
}

}  // namespace

EpochGrid GridConfig::build(std::optional<double> fallback_present) const {
  std::vector<double> all = points;
  std::optional<double> p = present;
  if (!segments.empty()) {
    const EpochGrid seg = EpochGrid::from_segments(segments);
    all.insert(all.end(), seg.points().begin(), seg.points().end());
    if (!p) p = seg.present();
  }
  if (!p) p = fallback_present;
  return EpochGrid(std::move(all), p);
}

RunConfig read_run_config(const ConfigFile& file) {
  RunConfig rc;
  rc.file = file;
  auto positive = [&](std::string_view section, std::string_view key, double v) {
    if (!(v > 0.0) || !std::isfinite(v)) file.fail(section, key, "must be positive");
    return v;
  };
  auto at_least_one = [&](std::string_view section, std::string_view key, long v) {
    if (v < 1) file.fail(section, key, "must be at least 1");
    return v;
  };

  rc.tree_path = file.get_path("data", "tree");
  rc.alignment_path = file.get_path("data", "alignment");
  rc.dates_path = file.get_path("data", "dates");

  rc.grid.points = file.get_doubles("grid", "points");
  rc.grid.segments = parse_segments(file);
  if (file.has("grid", "present")) rc.grid.present = file.get_double("grid", "present", 0.0);
  if (rc.grid.specified()) {
    try {
      (void)rc.grid.build();
    } catch (const ModelError& e) {
      file.fail("grid", file.has("grid", "points") ? "points" : "segments", e.what());
    }
  }

  auto& sub = rc.model.substitution;
  const std::string kind = file.get_string("model", "substitution", "hky");
  if (kind == "jc") sub.kind = SubstitutionKind::jc;
  else if (kind == "hky") sub.kind = SubstitutionKind::hky;
  else if (kind == "gtr") sub.kind = SubstitutionKind::gtr;
  else file.fail("model", "substitution", fmt::format("unknown model '{}' (expected jc, hky or gtr)", kind));
  sub.kappa = positive("model", "kappa", file.get_double("model", "kappa", 2.0));
  if (file.has("model", "gtr_rates")) {
    const auto r = file.get_doubles("model", "gtr_rates");
    if (r.size() != 6) file.fail("model", "gtr_rates", "expected six rates (AC, AG, AT, CG, CT, GT)");
    for (std::size_t i = 0; i < 6; ++i) sub.gtr_rates[i] = positive("model", "gtr_rates", r[i]);
  }
  const std::string freq = file.get_string("model", "frequencies", "empirical");
  if (freq != "empirical") {
    sub.frequencies = file.get_doubles("model", "frequencies");
    if (sub.frequencies.size() != 4) file.fail("model", "frequencies", "expected four frequencies or 'empirical'");
    double total = 0.0;
    for (double f : sub.frequencies) total += positive("model", "frequencies", f);
    if (std::abs(total - 1.0) > 1e-6) file.fail("model", "frequencies", "frequencies must sum to 1");
  }
  sub.estimate = file.get_bool("model", "estimate_substitution", false);
  sub.categories = static_cast<int>(at_least_one("model", "categories", file.get_long("model", "categories", 1)));
  sub.alpha = positive("model", "alpha", file.get_double("model", "alpha", 1.0));
  sub.estimate_alpha = file.get_bool("model", "estimate_alpha", false);

  auto& hyper = rc.model.hyper;
  hyper.tau_shape = positive("priors", "tau_shape", file.get_double("priors", "tau_shape", 0.001));
  hyper.tau_rate = positive("priors", "tau_rate", file.get_double("priors", "tau_rate", 0.001));
  const std::string rho = file.get_string("priors", "rho", "0.99");
  if (rho == "logitnormal") {
    hyper.rho.estimated = true;
  } else {
    double v = 0.0;
    if (!to_double(rho, v)) file.fail("priors", "rho", "expected a number in (-1, 1) or 'logitnormal'");
    if (!(std::abs(v) < 1.0)) file.fail("priors", "rho", "fixed rho must satisfy |rho| < 1");
    hyper.rho.fixed_value = v;
  }
  hyper.rho.location = file.get_double("priors", "rho_location", 0.0);
  hyper.rho.scale = positive("priors", "rho_scale", file.get_double("priors", "rho_scale", 1.0));
  rc.model.gmrf.tau_exponent_offset = file.get_double("priors", "tau_exponent_offset", 0.0);
  const std::string weights = file.get_string("priors", "gmrf_weights", "inverse_gap");
  if (weights == "inverse_gap") rc.model.gmrf.weighting = GapWeighting::inverse_gap;
  else if (weights == "gap") rc.model.gmrf.weighting = GapWeighting::gap;
  else file.fail("priors", "gmrf_weights", "expected 'inverse_gap' or 'gap'");

  auto& s = rc.sampler;
  s.iterations = at_least_one("sampler", "iterations", file.get_long("sampler", "iterations", s.iterations));
  s.thinning = at_least_one("sampler", "thinning", file.get_long("sampler", "thinning", s.thinning));
  s.burnin = file.get_double("sampler", "burnin", s.burnin);
  if (!(s.burnin >= 0.0 && s.burnin < 1.0)) file.fail("sampler", "burnin", "must lie in [0, 1)");
  s.leapfrog_steps = static_cast<int>(
      at_least_one("sampler", "leapfrog_steps", file.get_long("sampler", "leapfrog_steps", s.leapfrog_steps)));
  s.step_size = positive("sampler", "step_size", file.get_double("sampler", "step_size", s.step_size));
  s.target_acceptance = file.get_double("sampler", "target_acceptance", s.target_acceptance);
  if (!(s.target_acceptance > 0.0 && s.target_acceptance < 1.0)) {
    file.fail("sampler", "target_acceptance", "must lie in (0, 1)");
  }
  s.rho_scale = positive("sampler", "rho_scale", file.get_double("sampler", "rho_scale", s.rho_scale));
  s.substitution_scale =
      positive("sampler", "substitution_scale", file.get_double("sampler", "substitution_scale", s.substitution_scale));
  const long seed = file.get_long("sampler", "seed", 1);
  if (seed < 0) file.fail("sampler", "seed", "must be non-negative");
  s.seed = static_cast<std::uint64_t>(seed);
  for (auto [key, field] : {std::pair{"weight_zeta", &s.weight_zeta}, std::pair{"weight_tau", &s.weight_tau},
                            std::pair{"weight_rho", &s.weight_rho},
                            std::pair{"weight_substitution", &s.weight_substitution}}) {
    *field = file.get_double("sampler", key, *field);
    if (*field < 0.0) file.fail("sampler", key, "must be non-negative");
  }
  s.audit_interval =
      at_least_one("sampler", "audit_interval", file.get_long("sampler", "audit_interval", s.audit_interval));
  s.likelihood_enabled = !file.get_bool("sampler", "sample_prior", false);
  rc.chains = static_cast<int>(at_least_one("sampler", "chains", file.get_long("sampler", "chains", 1)));

  rc.output.trace = file.get_path("output", "trace", "trace.tsv");
  rc.output.report = file.get_path("output", "report", "report.json");
  rc.output.checkpoint = file.get_path("output", "checkpoint", "checkpoint.json");
  rc.output.summary = file.get_path("output", "summary", "summary.tsv");
  rc.output.log_scale = file.get_bool("output", "log_scale", false);

  auto& sim = rc.simulate;
  sim.sites = static_cast<int>(at_least_one("simulate", "sites", file.get_long("simulate", "sites", sim.sites)));
  const long sim_seed = file.get_long("simulate", "seed", 1);
  if (sim_seed < 0) file.fail("simulate", "seed", "must be non-negative");
  sim.seed = static_cast<std::uint64_t>(sim_seed);
  const std::string rate = file.get_string("simulate", "rate", "constant");
  if (rate == "constant") sim.rate = SimRateKind::constant;
  else if (rate == "piecewise") sim.rate = SimRateKind::piecewise;
  else if (rate == "loglinear") sim.rate = SimRateKind::loglinear;
  else file.fail("simulate", "rate", "expected 'constant', 'piecewise' or 'loglinear'");
  sim.rate_value = positive("simulate", "rate_value", file.get_double("simulate", "rate_value", sim.rate_value));
  sim.loglinear_c0 = file.get_double("simulate", "loglinear_c0", sim.loglinear_c0);
  sim.loglinear_c1 = file.get_double("simulate", "loglinear_c1", sim.loglinear_c1);
  sim.theta = file.get_doubles("simulate", "theta");
  for (double t : sim.theta) positive("simulate", "theta", t);
  if (sim.rate == SimRateKind::piecewise) {
    if (!rc.grid.specified()) {
      file.fail("grid", "points", "a piecewise simulation rate needs [grid] points or segments");
    }
    if (static_cast<int>(sim.theta.size()) != rc.grid.build().epoch_count()) {
      file.fail("simulate", "theta",
                fmt::format("expected {} rates (one per epoch)", rc.grid.build().epoch_count()));
    }
  }
  sim.taxa = static_cast<int>(file.get_long("simulate", "taxa", 0));
  if (sim.taxa < 0 || sim.taxa == 1) file.fail("simulate", "taxa", "must be 0 (read [data] tree) or at least 2");
  sim.sampling_start = file.get_double("simulate", "sampling_start", 0.0);
  sim.sampling_end = file.get_double("simulate", "sampling_end", sim.sampling_start);
  if (sim.sampling_end < sim.sampling_start) file.fail("simulate", "sampling_end", "must not precede sampling_start");
  sim.pop_size = positive("simulate", "pop_size", file.get_double("simulate", "pop_size", sim.pop_size));
  const long tree_seed = file.get_long("simulate", "tree_seed", 1);
  if (tree_seed < 0) file.fail("simulate", "tree_seed", "must be non-negative");
  sim.tree_seed = static_cast<std::uint64_t>(tree_seed);
  sim.output_prefix = file.get_path("simulate", "output_prefix", "sim");
  return rc;
}

RunConfig load_run_config(const std::string& path) { return read_run_config(ConfigFile::load(path)); }

std::vector<std::string> output_header(const RunConfig& config) {
  return {fmt::format("polyclock {}", kVersion), fmt::format("config_hash {}", config.file.hash())};
}

LoadedData load_data(const RunConfig& config) {
  if (config.tree_path.empty()) config.file.fail("data", "tree", "a tree file is required");
  if (config.alignment_path.empty()) config.file.fail("data", "alignment", "an alignment file is required");
  if (config.dates_path.empty()) config.file.fail("data", "dates", "a date table is required");
  LoadedData d;
  const DateMap dates = parse_date_table(read_text_file(config.dates_path));
  d.tree = parse_newick(read_text_file(config.tree_path), dates);
  d.alignment = parse_fasta(read_text_file(config.alignment_path));
  d.bound = bind(d.tree, d.alignment);
  return d;
}

SimulateOutputs run_simulate(const RunConfig& config, std::ostream& log) {
  const auto& sim = config.simulate;
  TimeTree tree;
  if (sim.taxa > 0) {
    std::vector<double> times(sim.taxa);
    std::vector<std::string> labels(sim.taxa);
    for (int i = 0; i < sim.taxa; ++i) {
      times[i] = sim.taxa > 1 ? sim.sampling_start + (sim.sampling_end - sim.sampling_start) * i / (sim.taxa - 1)
                              : sim.sampling_start;
      labels[i] = fmt::format("taxon{:03d}", i + 1);
    }
    std::mt19937_64 rng(sim.tree_seed);
    tree = coalescent_tree(times, std::move(labels), sim.pop_size, rng);
  } else {
    if (config.tree_path.empty()) config.file.fail("data", "tree", "simulation needs a tree or [simulate] taxa");
    if (config.dates_path.empty()) config.file.fail("data", "dates", "simulation needs tip dates");
    tree = parse_newick(read_text_file(config.tree_path), parse_date_table(read_text_file(config.dates_path)));
  }

  RateSpec rate;
  switch (sim.rate) {
    case SimRateKind::constant:
      rate = LogLinearRate{std::log(sim.rate_value), 0.0, tree.present()};
      break;
    case SimRateKind::piecewise:
      rate = PiecewiseRate{config.grid.build(tree.present()), sim.theta};
      break;
    case SimRateKind::loglinear:
      rate = LogLinearRate{sim.loglinear_c0, sim.loglinear_c1, tree.present()};
      break;
  }

  const auto& sub = config.model.substitution;
  const std::vector<double> pi = sub.frequencies.empty() ? std::vector<double>(4, 0.25) : sub.frequencies;
  SimSpec spec{tree,
               rate,
               make_generator(sub, sub.kappa, sub.gtr_rates, pi),
               sub.categories > 1 ? discretized_gamma(sub.alpha, sub.categories) : single_rate(),
               sim.sites,
               sim.seed};
  const SimResult result = simulate_alignment(spec);

  const auto header = output_header(config);
  SimulateOutputs out{sim.output_prefix + ".fasta", sim.output_prefix + ".dates.tsv", sim.output_prefix + ".truth.tsv",
                      sim.output_prefix + ".nwk"};
  if (const auto dir = std::filesystem::path(sim.output_prefix).parent_path(); !dir.empty()) {
    std::filesystem::create_directories(dir);
  }
  write_text_file(out.alignment, with_comments(header, "; ", serialize_fasta(result.alignment)));
  write_text_file(out.dates, with_comments(header, "# ", serialize_date_table(tree)));
  write_text_file(out.truth, with_comments(header, "# ", serialize_sidecar(tree, result.branch_integrals)));
  std::string newick;
  for (const auto& h : header) newick += "[" + h + "]\n";
  write_text_file(out.tree, newick + serialize_newick(tree) + "\n");

  log << fmt::format("simulated {} sites on {} taxa (seed {}, config {})\n", sim.sites, tree.tip_count(), sim.seed,
                     config.file.hash());
  log << fmt::format("wrote {}, {}, {}, {}\n", out.alignment, out.dates, out.truth, out.tree);
  return out;
}

std::string suffixed_path(const std::string& path, int chain, int chains) {
  if (chains <= 1) return path;
  std::filesystem::path p(path);
  const std::string stem = p.stem().string();
  const std::string ext = p.extension().string();
  return (p.parent_path() / fmt::format("{}.chain{}{}", stem, chain + 1, ext)).string();
}

int run_infer(const RunConfig& config, int chains, std::ostream& log) {
  if (!config.grid.specified()) config.file.fail("grid", "points", "inference needs [grid] points or segments");
  const LoadedData data = load_data(config);
  const EpochGrid grid = config.grid.build(data.tree.present());

  struct Outcome {
    bool ok = false;
    std::string message;
  };
  std::vector<Outcome> outcomes(chains);
  auto run_one = [&](int c) {
    SamplerConfig sc = config.sampler;
    sc.seed = config.sampler.seed + static_cast<std::uint64_t>(c);
    const std::string trace_path = suffixed_path(config.output.trace, c, chains);
    const std::string report_path = suffixed_path(config.output.report, c, chains);
    const std::string checkpoint_path = suffixed_path(config.output.checkpoint, c, chains);
    try {
      for (const auto& path : {trace_path, report_path, checkpoint_path}) {
        if (const auto dir = std::filesystem::path(path).parent_path(); !dir.empty()) {
          std::filesystem::create_directories(dir);
        }
      }
      // Chains share nothing but the read-only data; each gets a
      // single-threaded likelihood when several run at once.
      Chain chain(data.bound, grid, config.model, sc, chains > 1 ? 1 : 0);
      std::ofstream trace_file(trace_path, std::ios::binary);
      if (!trace_file) throw Error(fmt::format("cannot write '{}'", trace_path));
      auto comments = output_header(config);
      comments.push_back(fmt::format("seed {}", sc.seed));
      TraceWriter trace(trace_file, chain.trace_columns(), comments);
      chain.set_output_header(comments);
      const RunReport report = chain.run(&trace, checkpoint_path);
      write_text_file(report_path, report_to_json(report, comments));
      outcomes[c].ok = true;
      outcomes[c].message = fmt::format("chain {}: {} iterations, zeta HMC acceptance {:.3f}, {} divergences, {:.1f} s",
                                        c + 1, report.iterations, report.operators.front().acceptance_rate(),
                                        report.divergences, report.wall_time_seconds);
      for (const auto& w : report.warnings) outcomes[c].message += fmt::format("\nchain {}: warning: {}", c + 1, w);
    } catch (const std::exception& e) {
      outcomes[c].message = fmt::format("chain {} aborted: {} (checkpoint: {})", c + 1, e.what(), checkpoint_path);
    }
  };

  if (chains == 1) {
    run_one(0);
  } else {
    std::vector<std::thread> workers;
    for (int c = 0; c < chains; ++c) workers.emplace_back(run_one, c);
    for (auto& w : workers) w.join();
  }
  bool ok = true;
  for (const auto& o : outcomes) {
    log << o.message << '\n';
    ok = ok && o.ok;
  }
  return ok ? 0 : 1;
}

int TraceTable::column(std::string_view name) const {
  const auto it = std::find(columns.begin(), columns.end(), name);
  return it == columns.end() ? -1 : static_cast<int>(it - columns.begin());
}

TraceTable parse_trace(std::string_view text) {
  TraceTable t;
  int line_no = 0;
  bool have_header = false;
  for (auto line : split(text, '\n')) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    const auto fields = split(line, '\t');
    if (!have_header) {
      for (auto f : fields) t.columns.emplace_back(f);
      t.values.resize(t.columns.size());
      have_header = true;
      continue;
    }
    if (fields.size() != t.columns.size()) {
      throw ParseError(fmt::format("trace line {} has {} fields, header has {}", line_no, fields.size(),
                                   t.columns.size()),
                       0, line_no);
    }
    for (std::size_t c = 0; c < fields.size(); ++c) {
      double v = 0.0;
      if (!to_double(fields[c], v)) {
        throw ParseError(fmt::format("trace line {}: '{}' is not a number", line_no, fields[c]), 0, line_no);
      }
      t.values[c].push_back(v);
    }
  }
  if (!have_header || t.column("iteration") != 0) throw ParseError("trace has no 'iteration' header row", 0, 0);
  return t;
}

std::string summarize_trace(const TraceTable& trace, const EpochGrid& grid, long burnin_iterations, bool log_scale,
                            const std::vector<std::string>& header) {
  const auto& iterations = trace.values[0];
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < iterations.size(); ++r) {
    if (iterations[r] >= static_cast<double>(burnin_iterations)) rows.push_back(r);
  }
  if (rows.size() < 10) {
    throw Error(fmt::format("trace has {} rows after burn-in; at least 10 are needed", rows.size()));
  }
  auto kept = [&](int column, bool exponentiate) {
    std::vector<double> v;
    v.reserve(rows.size());
    for (auto r : rows) v.push_back(exponentiate ? std::exp(trace.values[column][r]) : trace.values[column][r]);
    return v;
  };
  auto stats = [](const std::vector<double>& v) {
    return fmt::format("{:.10g}\t{:.10g}\t{:.10g}\t{:.6g}", quantile(v, 0.5), quantile(v, 0.025),
                       quantile(v, 0.975), effective_sample_size(v));
  };

  std::string out;
  for (const auto& h : header) out += "# " + h + "\n";
  out += "parameter\tepoch\tnewer\tolder\tmedian\tlower95\tupper95\tess\n";
  for (int m = 0; m < grid.epoch_count(); ++m) {
    const int col = trace.column(fmt::format("zeta_{}", m + 1));
    if (col < 0) throw Error(fmt::format("trace has no column zeta_{} for epoch {}", m + 1, m + 1));
    out += fmt::format("{}\t{}\t{}\t{}\t{}\n", log_scale ? "zeta" : "theta", m + 1, format_bound(grid.newer_bound(m)),
                       format_bound(grid.older_bound(m)), stats(kept(col, !log_scale)));
  }
  if (trace.column(fmt::format("zeta_{}", grid.epoch_count() + 1)) >= 0) {
    throw Error(fmt::format("trace has more zeta columns than the grid's {} epochs", grid.epoch_count()));
  }
  for (std::size_t c = 1; c < trace.columns.size(); ++c) {
    const auto& name = trace.columns[c];
    if (name.starts_with("zeta_")) continue;
    out += fmt::format("{}\tNA\tNA\tNA\t{}\n", name, stats(kept(static_cast<int>(c), false)));
  }
  return out;
}

void run_summarize(const RunConfig& config, const std::string& trace_path, const std::string& output_path,
                   bool log_scale, std::ostream& log) {
  if (!config.grid.specified()) config.file.fail("grid", "points", "summaries need [grid] points or segments");
  const TraceTable trace = parse_trace(read_text_file(trace_path));
  const EpochGrid grid = config.grid.build();
  const std::string text =
      summarize_trace(trace, grid, config.sampler.burnin_iterations(), log_scale || config.output.log_scale,
                      output_header(config));
  if (const auto dir = std::filesystem::path(output_path).parent_path(); !dir.empty()) {
    std::filesystem::create_directories(dir);
  }
  write_text_file(output_path, text);
  log << fmt::format("summarized {} trace rows into {}\n", trace.row_count(), output_path);
}

}  // namespace polyclock
