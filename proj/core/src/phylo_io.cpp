#include "polyclock/phylo_io.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "polyclock/errors.hpp"

namespace polyclock {

// ---------------------------------------------------------------------------
// TimeTree

TimeTree::TimeTree(std::vector<int> parent, std::vector<double> node_time,
                   std::vector<std::string> tip_labels)
    : parent_(std::move(parent)), node_time_(std::move(node_time)), tip_labels_(std::move(tip_labels)) {
  const int n_tips = tip_count();
  const int n_nodes = static_cast<int>(parent_.size());
  if (n_tips < 2) {
    throw ShapeError(fmt::format("tree needs at least 2 tips, got {}", n_tips));
  }
  if (n_nodes != 2 * n_tips - 1) {
    throw ShapeError(fmt::format("binary tree with {} tips must have {} nodes, got {}", n_tips,
                                 2 * n_tips - 1, n_nodes));
  }
  if (static_cast<int>(node_time_.size()) != n_nodes) {
    throw ShapeError("node_time length does not match node count");
  }
  children_.assign(n_nodes, {-1, -1});
  for (int i = 0; i < n_nodes - 1; ++i) {
    const int pa = parent_[i];
    if (pa <= i || pa >= n_nodes || pa < n_tips) {
      throw ShapeError(fmt::format("node {} has invalid parent {}", i, pa));
    }
    auto& ch = children_[pa];
    if (ch[0] < 0) {
      ch[0] = i;
    } else if (ch[1] < 0) {
      ch[1] = i;
    } else {
      throw ShapeError(fmt::format("node {} has more than two children", pa));
    }
  }
  if (parent_[n_nodes - 1] != -1) {
    throw ShapeError("root must have no parent");
  }
  for (int a = n_tips; a < n_nodes; ++a) {
    if (children_[a][1] < 0) {
      throw ShapeError(fmt::format("internal node {} has fewer than two children", a));
    }
  }
  for (int i = 0; i < n_nodes - 1; ++i) {
    if (!(node_time_[parent_[i]] < node_time_[i])) {
      throw ShapeError(fmt::format("branch above node {} has non-positive duration", i));
    }
  }
}

int TimeTree::sibling(int node) const {
  const auto& ch = children_.at(parent_.at(node));
  return ch[0] == node ? ch[1] : ch[0];
}

double TimeTree::present() const {
  return *std::max_element(node_time_.begin(), node_time_.begin() + tip_count());
}

double TimeTree::earliest_tip() const {
  return *std::min_element(node_time_.begin(), node_time_.begin() + tip_count());
}

// ---------------------------------------------------------------------------
// Newick

namespace {

struct RawNode {
  std::string label;
  double length = std::numeric_limits<double>::quiet_NaN();
  std::size_t length_offset = 0;
  std::vector<int> children;
};

class NewickParser {
 public:
  explicit NewickParser(std::string_view text) : text_(text) {}

  std::vector<RawNode> parse(int& root) {
    skip_space();
    root = parse_subtree();
    skip_space();
    if (peek() == ':') {
      ++pos_;
      parse_length();  // root branch length is ignored
      skip_space();
    }
    if (peek() != ';') fail("expected ';' at end of tree");
    ++pos_;
    skip_space();
    if (pos_ != text_.size()) fail("unexpected text after ';'");
    return std::move(nodes_);
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError(fmt::format("newick: {} at byte {}", msg, pos_), pos_);
  }

  char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }

  void skip_space() {
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else if (c == '[') {
        const auto close = text_.find(']', pos_);
        if (close == std::string_view::npos) fail("unterminated comment");
        pos_ = close + 1;
      } else {
        break;
      }
    }
  }

  int parse_subtree() {
    skip_space();
    RawNode node;
    if (peek() == '(') {
      ++pos_;
      while (true) {
        node.children.push_back(parse_subtree());
        skip_space();
        if (peek() == ',') {
          ++pos_;
          continue;
        }
        if (peek() == ')') {
          ++pos_;
          break;
        }
        fail("expected ',' or ')'");
      }
      skip_space();
      node.label = parse_label(false);
    } else {
      node.label = parse_label(true);
    }
    skip_space();
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(node));
    nodes_[id].length_offset = pos_;
    if (peek() == ':') {
      ++pos_;
      skip_space();
      nodes_[id].length_offset = pos_;
      nodes_[id].length = parse_length();
    }
    return id;
  }

  std::string parse_label(bool required) {
    std::string label;
    if (peek() == '\'') {
      ++pos_;
      while (true) {
        if (pos_ >= text_.size()) fail("unterminated quoted label");
        if (text_[pos_] == '\'') {
          if (pos_ + 1 < text_.size() && text_[pos_ + 1] == '\'') {
            label.push_back('\'');
            pos_ += 2;
            continue;
          }
          ++pos_;
          break;
        }
        label.push_back(text_[pos_++]);
      }
    } else {
      while (pos_ < text_.size()) {
        const char c = text_[pos_];
        if (std::isspace(static_cast<unsigned char>(c)) || std::string_view("(),:;[]'").find(c) != std::string_view::npos) {
          break;
        }
        label.push_back(c);
        ++pos_;
      }
    }
    if (required && label.empty()) fail("expected a taxon label");
    return label;
  }

  double parse_length() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() && std::string_view("+-0123456789.eE").find(text_[pos_]) != std::string_view::npos) {
      ++pos_;
    }
    double value = 0.0;
    const char* first = text_.data() + start;
    const char* last = text_.data() + pos_;
    if (start < pos_ && *first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, last, value);
    if (start == pos_ || ec != std::errc() || ptr != last) {
      pos_ = start;
      fail("malformed branch length");
    }
    return value;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  std::vector<RawNode> nodes_;
};

}  // namespace

TimeTree parse_newick(std::string_view text, const DateMap& dates) {
  NewickParser parser(text);
  int raw_root = -1;
  std::vector<RawNode> raw = parser.parse(raw_root);

  // Shape checks and id assignment: tips in order of appearance, internal
  // nodes in post-order.
  int n_tips = 0;
  for (const auto& node : raw) {
    if (node.children.empty()) ++n_tips;
  }
  if (n_tips < 2) {
    throw ShapeError(fmt::format("tree needs at least 2 tips, got {}", n_tips));
  }
  for (const auto& node : raw) {
    if (!node.children.empty() && node.children.size() != 2) {
      throw ShapeError(fmt::format("node with {} children; only binary trees are supported",
                                   node.children.size()));
    }
  }
  for (int i = 0; i < static_cast<int>(raw.size()); ++i) {
    if (i == raw_root) continue;
    if (std::isnan(raw[i].length)) {
      throw ParseError(fmt::format("newick: missing branch length{} at byte {}",
                                   raw[i].label.empty() ? std::string() : " for '" + raw[i].label + "'",
                                   raw[i].length_offset),
                       raw[i].length_offset);
    }
    if (!(raw[i].length > 0.0)) {
      throw ParseError(fmt::format("newick: non-positive branch length {} at byte {}", raw[i].length,
                                   raw[i].length_offset),
                       raw[i].length_offset);
    }
  }

  // The raw vector is already in post-order (children are pushed before
  // their parent), so a single pass assigns ids.
  const int n_nodes = 2 * n_tips - 1;
  std::vector<int> id_of(raw.size(), -1);
  std::vector<std::string> labels;
  int next_internal = n_tips;
  for (int i = 0; i < static_cast<int>(raw.size()); ++i) {
    if (raw[i].children.empty()) {
      id_of[i] = static_cast<int>(labels.size());
      labels.push_back(raw[i].label);
    } else {
      id_of[i] = next_internal++;
    }
  }
  {
    std::set<std::string, std::less<>> seen;
    for (const auto& l : labels) {
      if (!seen.insert(l).second) throw ParseError("newick: duplicate tip label '" + l + "'", 0);
    }
  }

  std::vector<int> parent(n_nodes, -1);
  std::vector<double> length(n_nodes, 0.0);
  for (int i = 0; i < static_cast<int>(raw.size()); ++i) {
    for (int c : raw[i].children) parent[id_of[c]] = id_of[i];
    if (i != raw_root) length[id_of[i]] = raw[i].length;
  }

  // Depth below the root, accumulated top-down (parents have larger ids).
  std::vector<double> depth(n_nodes, 0.0);
  for (int v = n_nodes - 2; v >= 0; --v) depth[v] = depth[parent[v]] + length[v];

  std::vector<double> implied_root(n_tips);
  for (int t = 0; t < n_tips; ++t) {
    const auto it = dates.find(labels[t]);
    if (it == dates.end()) throw CalibrationError("no date for tip '" + labels[t] + "'");
    implied_root[t] = it->second - depth[t];
  }
  const double root_time =
      std::accumulate(implied_root.begin(), implied_root.end(), 0.0) / static_cast<double>(n_tips);
  for (int t = 0; t < n_tips; ++t) {
    if (std::abs(implied_root[t] - root_time) > 1e-6) {
      throw CalibrationError(fmt::format(
          "tip '{}' date disagrees with branch lengths by {:.3g} (implied root {} vs {})", labels[t],
          implied_root[t] - root_time, implied_root[t], root_time));
    }
  }

  std::vector<double> times(n_nodes);
  for (int v = 0; v < n_nodes; ++v) times[v] = root_time + depth[v];
  for (int t = 0; t < n_tips; ++t) times[t] = dates.find(labels[t])->second;
  for (int v = 0; v < n_nodes - 1; ++v) {
    if (!(times[parent[v]] < times[v])) {
      throw ShapeError(fmt::format("zero-length branch above node {}", v));
    }
  }
  return TimeTree(std::move(parent), std::move(times), std::move(labels));
}

namespace {

std::string quote_label(const std::string& label) {
  const bool plain = !label.empty() && std::none_of(label.begin(), label.end(), [](char c) {
    return std::isspace(static_cast<unsigned char>(c)) || std::string_view("(),:;[]'").find(c) != std::string_view::npos;
  });
  if (plain) return label;
  std::string out = "'";
  for (char c : label) {
    if (c == '\'') out.push_back('\'');
    out.push_back(c);
  }
  out.push_back('\'');
  return out;
}

void write_subtree(const TimeTree& tree, int node, int precision, std::string& out) {
  if (tree.is_tip(node)) {
    out += quote_label(tree.tip_label(node));
  } else {
    const auto& ch = tree.children(node);
    out.push_back('(');
    write_subtree(tree, ch[0], precision, out);
    out.push_back(',');
    write_subtree(tree, ch[1], precision, out);
    out.push_back(')');
  }
  if (node != tree.root()) {
    out += fmt::format(":{:.{}g}", tree.branch_span(node), precision);
  }
}

}  // namespace

std::string serialize_newick(const TimeTree& tree, int precision) {
  std::string out;
  write_subtree(tree, tree.root(), precision, out);
  out.push_back(';');
  return out;
}

// ---------------------------------------------------------------------------
// Alphabet / Alignment / FASTA

Alphabet Alphabet::dna() { return Alphabet{"ACGT", "-?NRYKMSWBDHVX."}; }

int Alphabet::code(char c) const noexcept {
  const char u = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  const auto s = symbols.find(u);
  if (s != std::string::npos) return static_cast<int>(s);
  if (ambiguity.find(u) != std::string::npos) return kMissing;
  return -1;
}

char Alphabet::symbol(std::uint8_t state) const noexcept {
  if (state == kMissing || state >= symbols.size()) return '-';
  return symbols[state];
}

Alignment::Alignment(std::vector<std::string> taxa, int state_count, int site_count,
                     std::vector<std::uint8_t> data)
    : taxa_(std::move(taxa)), state_count_(state_count), site_count_(site_count), data_(std::move(data)) {
  if (site_count_ < 1) throw ParseError("alignment must have at least one site", 0);
  if (data_.size() != taxa_.size() * static_cast<std::size_t>(site_count_)) {
    throw DimensionError("alignment data size does not match taxa x sites");
  }
  for (auto v : data_) {
    if (v != kMissing && v >= state_count_) throw DimensionError("alignment cell outside state space");
  }
}

Alignment parse_fasta(std::string_view text, const Alphabet& alphabet) {
  if (alphabet.state_count() < 1 || alphabet.state_count() >= kMissing) {
    throw ModelError("alphabet must have between 1 and 254 symbols");
  }
  std::vector<std::string> taxa;
  std::vector<std::vector<std::uint8_t>> rows;
  std::vector<std::size_t> header_line;
  std::set<std::string, std::less<>> seen;

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    const std::size_t line_start = pos;
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() && eol == text.size()) break;
    if (!line.empty() && line.front() == ';') continue;

    if (!line.empty() && line.front() == '>') {
      std::string_view name = line.substr(1);
      const auto ws = name.find_first_of(" \t");
      if (ws != std::string_view::npos) name = name.substr(0, ws);
      if (name.empty()) throw ParseError(fmt::format("fasta: empty sequence name on line {}", line_no), line_start, line_no);
      if (!seen.emplace(name).second) {
        throw ParseError(fmt::format("fasta: duplicate taxon '{}' on line {}", name, line_no), line_start, line_no);
      }
      taxa.emplace_back(name);
      rows.emplace_back();
      header_line.push_back(line_no);
      continue;
    }
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (std::isspace(static_cast<unsigned char>(c))) continue;
      if (rows.empty()) {
        throw ParseError(fmt::format("fasta: sequence data before first header on line {}", line_no),
                         line_start + i, line_no);
      }
      const int code = alphabet.code(c);
      if (code < 0) {
        throw ParseError(fmt::format("fasta: invalid character '{}' on line {}", c, line_no),
                         line_start + i, line_no);
      }
      rows.back().push_back(static_cast<std::uint8_t>(code));
    }
    if (eol == text.size()) break;
  }
  if (rows.empty()) throw ParseError("fasta: no sequences", 0);
  const std::size_t sites = rows.front().size();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].empty()) {
      throw ParseError(fmt::format("fasta: empty sequence '{}' (line {})", taxa[r], header_line[r]), 0,
                       header_line[r]);
    }
    if (rows[r].size() != sites) {
      throw ParseError(fmt::format("fasta: sequence '{}' (line {}) has length {}, expected {}", taxa[r],
                                   header_line[r], rows[r].size(), sites),
                       0, header_line[r]);
    }
  }
  std::vector<std::uint8_t> data;
  data.reserve(rows.size() * sites);
  for (const auto& r : rows) data.insert(data.end(), r.begin(), r.end());
  return Alignment(std::move(taxa), alphabet.state_count(), static_cast<int>(sites), std::move(data));
}

std::string serialize_fasta(const Alignment& aln, const Alphabet& alphabet, int line_width) {
  std::string out;
  const int width = line_width > 0 ? line_width : aln.site_count();
  for (int r = 0; r < aln.taxon_count(); ++r) {
    out.push_back('>');
    out += aln.taxa()[r];
    out.push_back('\n');
    const auto row = aln.row(r);
    for (int s = 0; s < aln.site_count(); ++s) {
      out.push_back(alphabet.symbol(row[s]));
      if ((s + 1) % width == 0 || s + 1 == aln.site_count()) out.push_back('\n');
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Date table

DateMap parse_date_table(std::string_view text) {
  DateMap dates;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool first_row = true;
  while (pos < text.size()) {
    auto eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    const std::size_t line_start = pos;
    pos = eol + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    std::vector<std::string_view> fields;
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && std::string_view(" \t,\r").find(line[i]) != std::string_view::npos) ++i;
      const std::size_t start = i;
      while (i < line.size() && std::string_view(" \t,\r").find(line[i]) == std::string_view::npos) ++i;
      if (i > start) fields.push_back(line.substr(start, i - start));
    }
    if (fields.empty()) continue;
    if (fields.size() != 2) {
      throw ParseError(fmt::format("dates: expected 2 fields on line {}, got {}", line_no, fields.size()),
                       line_start, line_no);
    }
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(fields[1].data(), fields[1].data() + fields[1].size(), value);
    const bool numeric = ec == std::errc() && ptr == fields[1].data() + fields[1].size() && std::isfinite(value);
    if (!numeric) {
      if (first_row) {
        first_row = false;
        continue;
      }
      throw ParseError(fmt::format("dates: non-numeric date '{}' on line {}", fields[1], line_no), line_start,
                       line_no);
    }
    first_row = false;
    if (!dates.emplace(std::string(fields[0]), value).second) {
      throw ParseError(fmt::format("dates: duplicate taxon '{}' on line {}", fields[0], line_no), line_start,
                       line_no);
    }
  }
  return dates;
}

std::string serialize_date_table(const TimeTree& tree) {
  std::string out = "taxon\tdate\n";
  for (int t = 0; t < tree.tip_count(); ++t) {
    out += fmt::format("{}\t{:.17g}\n", tree.tip_label(t), tree.time(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binding

BoundData bind(const TimeTree& tree, const Alignment& aln) {
  std::map<std::string, int, std::less<>> row_of;
  for (int r = 0; r < aln.taxon_count(); ++r) row_of.emplace(aln.taxa()[r], r);
  std::set<std::string, std::less<>> tips(tree.tip_labels().begin(), tree.tip_labels().end());

  std::vector<std::string> only_tree, only_aln;
  for (const auto& t : tips) {
    if (!row_of.contains(t)) only_tree.push_back(t);
  }
  for (const auto& [name, r] : row_of) {
    if (!tips.contains(name)) only_aln.push_back(name);
  }
  if (!only_tree.empty() || !only_aln.empty()) {
    throw BindError(fmt::format("taxa mismatch: in tree only [{}]; in alignment only [{}]",
                                fmt::join(only_tree, ", "), fmt::join(only_aln, ", ")));
  }

  BoundData out;
  out.tree = tree;
  out.state_count = aln.state_count();
  out.site_count = aln.site_count();
  const int n_tips = tree.tip_count();
  out.row_of_tip.resize(n_tips);
  for (int t = 0; t < n_tips; ++t) out.row_of_tip[t] = row_of.at(tree.tip_label(t));

  // Unique columns in order of first appearance.
  std::map<std::vector<std::uint8_t>, int> pattern_index;
  std::vector<std::vector<std::uint8_t>> patterns;
  out.site_pattern.resize(aln.site_count());
  std::vector<std::uint8_t> column(n_tips);
  for (int s = 0; s < aln.site_count(); ++s) {
    for (int t = 0; t < n_tips; ++t) column[t] = aln.at(out.row_of_tip[t], s);
    auto [it, inserted] = pattern_index.emplace(column, static_cast<int>(patterns.size()));
    if (inserted) {
      patterns.push_back(column);
      out.pattern_weights.push_back(0.0);
    }
    out.pattern_weights[it->second] += 1.0;
    out.site_pattern[s] = it->second;
  }
  out.pattern_count = static_cast<int>(patterns.size());
  out.tip_patterns.resize(static_cast<std::size_t>(n_tips) * out.pattern_count);
  for (int p = 0; p < out.pattern_count; ++p) {
    for (int t = 0; t < n_tips; ++t) {
      out.tip_patterns[static_cast<std::size_t>(t) * out.pattern_count + p] = patterns[p][t];
    }
  }
  return out;
}

std::vector<double> empirical_frequencies(const Alignment& aln) {
  const int S = aln.state_count();
  std::vector<double> counts(S, 1.0);
  for (int r = 0; r < aln.taxon_count(); ++r) {
    for (auto v : aln.row(r)) {
      if (v != kMissing) counts[v] += 1.0;
    }
  }
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  for (auto& c : counts) c /= total;
  return counts;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw Error("failed writing '" + path + "'");
}

}  // namespace polyclock
