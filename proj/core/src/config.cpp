#include "polyclock/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <set>

#include <fmt/format.h>

#include "polyclock/errors.hpp"
#include "polyclock/phylo_io.hpp"

namespace polyclock {

namespace {

const std::map<std::string, std::set<std::string>, std::less<>>& schema() {
  static const std::map<std::string, std::set<std::string>, std::less<>> keys{
      {"data", {"tree", "alignment", "dates"}},
      {"grid", {"points", "segments", "present"}},
      {"model",
       {"substitution", "kappa", "gtr_rates", "frequencies", "estimate_substitution", "categories", "alpha",
        "estimate_alpha"}},
      {"priors", {"tau_shape", "tau_rate", "rho", "rho_location", "rho_scale", "tau_exponent_offset", "gmrf_weights"}},
      {"sampler",
       {"iterations", "thinning", "burnin", "leapfrog_steps", "step_size", "target_acceptance", "rho_scale",
        "substitution_scale", "seed", "weight_zeta", "weight_tau", "weight_rho", "weight_substitution",
        "audit_interval", "sample_prior", "chains"}},
      {"output", {"trace", "report", "checkpoint", "summary", "log_scale"}},
      {"simulate",
       {"sites", "seed", "rate", "rate_value", "loglinear_c0", "loglinear_c1", "theta", "taxa", "sampling_start",
        "sampling_end", "pop_size", "tree_seed", "output_prefix"}},
  };
  return keys;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string full_key(std::string_view section, std::string_view key) { return fmt::format("{}.{}", section, key); }

bool parse_number(std::string_view text, double& out) {
  text = trim(text);
  if (text.empty()) return false;
  if (text.front() == '+') text.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc() && ptr == text.data() + text.size();
}

}  // namespace

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

ConfigFile ConfigFile::parse(std::string_view text, std::string base_dir) {
  ConfigFile cfg;
  cfg.base_dir_ = std::move(base_dir);
  cfg.hash_ = fnv1a_hex(text);
  std::string section;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(fmt::format("line {}: unterminated section header", line_no), "", line_no);
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (!schema().contains(section)) {
        throw ConfigError(fmt::format("line {}: unknown section [{}]", line_no, section), section, line_no);
      }
    } else {
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError(fmt::format("line {}: expected 'key = value'", line_no), std::string(line), line_no);
      }
      const std::string key(trim(line.substr(0, eq)));
      const std::string value(trim(line.substr(eq + 1)));
      if (section.empty()) {
        throw ConfigError(fmt::format("line {}: key '{}' appears before any section", line_no, key), key, line_no);
      }
      const std::string name = full_key(section, key);
      if (!schema().find(section)->second.contains(key)) {
        throw ConfigError(fmt::format("line {}: unknown key '{}'", line_no, name), name, line_no);
      }
      if (cfg.entries_.contains(name)) {
        throw ConfigError(fmt::format("line {}: duplicate key '{}'", line_no, name), name, line_no);
      }
      cfg.entries_.emplace(name, Entry{value, line_no});
    }
    if (end == text.size()) break;
  }
  return cfg;
}

ConfigFile ConfigFile::load(const std::string& path) {
  const std::string text = read_text_file(path);
  auto dir = std::filesystem::path(path).parent_path();
  return parse(text, dir.empty() ? std::string(".") : dir.string());
}

const ConfigFile::Entry* ConfigFile::find(std::string_view section, std::string_view key) const {
  const auto it = entries_.find(full_key(section, key));
  return it == entries_.end() ? nullptr : &it->second;
}

bool ConfigFile::has(std::string_view section, std::string_view key) const { return find(section, key) != nullptr; }

void ConfigFile::fail(std::string_view section, std::string_view key, std::string_view message) const {
  const Entry* e = find(section, key);
  const std::string name = full_key(section, key);
  if (e) throw ConfigError(fmt::format("line {}: '{}': {}", e->line, name, message), name, e->line);
  throw ConfigError(fmt::format("'{}': {}", name, message), name, 0);
}

std::string ConfigFile::get_string(std::string_view section, std::string_view key, std::string fallback) const {
  const Entry* e = find(section, key);
  return e ? e->value : fallback;
}

double ConfigFile::get_double(std::string_view section, std::string_view key, double fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  double v = 0.0;
  if (!parse_number(e->value, v)) fail(section, key, fmt::format("'{}' is not a number", e->value));
  return v;
}

long ConfigFile::get_long(std::string_view section, std::string_view key, long fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  long v = 0;
  const std::string_view s = e->value;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) fail(section, key, fmt::format("'{}' is not an integer", s));
  return v;
}

bool ConfigFile::get_bool(std::string_view section, std::string_view key, bool fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  std::string v = e->value;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
  if (v == "false" || v == "no" || v == "off" || v == "0") return false;
  fail(section, key, fmt::format("'{}' is not a boolean", e->value));
}

std::vector<double> ConfigFile::get_doubles(std::string_view section, std::string_view key) const {
  const Entry* e = find(section, key);
  if (!e) return {};
  std::vector<double> out;
  std::string_view rest = e->value;
  while (true) {
    const auto comma = rest.find(',');
    const std::string_view item = trim(rest.substr(0, comma));
    double v = 0.0;
    if (!parse_number(item, v)) fail(section, key, fmt::format("'{}' is not a number", item));
    out.push_back(v);
    if (comma == std::string_view::npos) break;
    rest = rest.substr(comma + 1);
  }
  return out;
}

std::string ConfigFile::resolve(const std::string& path) const {
  if (path.empty()) return path;
  const std::filesystem::path p(path);
  if (p.is_absolute()) return path;
  return (std::filesystem::path(base_dir_) / p).lexically_normal().string();
}

std::string ConfigFile::get_path(std::string_view section, std::string_view key, std::string fallback) const {
  const Entry* e = find(section, key);
  return resolve(e ? e->value : fallback);
}

}  // namespace polyclock
