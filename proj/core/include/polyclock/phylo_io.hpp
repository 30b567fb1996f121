#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace polyclock {

// Rooted binary phylogeny with calendar-time node calibrations.
//
// Node numbering: tips are 0..N-1, internal nodes N..2N-2 in post-order, so
// every parent id is larger than its children's ids and the root is 2N-2.
// Branches are identified by their child node, giving branch ids 0..2N-3.
// Times grow toward the present.
class TimeTree {
 public:
  TimeTree() = default;

  // Validates all invariants; throws ShapeError on violation.
  TimeTree(std::vector<int> parent, std::vector<double> node_time,
           std::vector<std::string> tip_labels);

  int tip_count() const noexcept { return static_cast<int>(tip_labels_.size()); }
  int node_count() const noexcept { return static_cast<int>(parent_.size()); }
  int branch_count() const noexcept { return node_count() - 1; }
  int root() const noexcept { return node_count() - 1; }
  bool is_tip(int node) const noexcept { return node < tip_count(); }

  int parent(int node) const { return parent_.at(node); }
  const std::array<int, 2>& children(int node) const { return children_.at(node); }
  int sibling(int node) const;
  double time(int node) const { return node_time_.at(node); }
  std::span<const double> node_times() const noexcept { return node_time_; }
  const std::string& tip_label(int tip) const { return tip_labels_.at(tip); }
  std::span<const std::string> tip_labels() const noexcept { return tip_labels_; }

  // Duration of the branch above `node` (t_i - t_pa(i)).
  double branch_span(int node) const { return node_time_.at(node) - node_time_.at(parent_.at(node)); }
  // Most recent tip time.
  double present() const;
  // Oldest tip time.
  double earliest_tip() const;
  double root_time() const { return node_time_.at(root()); }

 private:
  std::vector<int> parent_;
  std::vector<std::array<int, 2>> children_;
  std::vector<double> node_time_;
  std::vector<std::string> tip_labels_;
};

inline constexpr std::uint8_t kMissing = 0xFF;

// Character alphabet. Symbols map to states 0..S-1 case-insensitively; the
// ambiguity set maps to kMissing.
struct Alphabet {
  std::string symbols;
  std::string ambiguity;

  static Alphabet dna();

  int state_count() const noexcept { return static_cast<int>(symbols.size()); }
  // Returns the state, kMissing, or -1 for characters outside the alphabet.
  int code(char c) const noexcept;
  char symbol(std::uint8_t state) const noexcept;
};

class Alignment {
 public:
  Alignment() = default;
  Alignment(std::vector<std::string> taxa, int state_count, int site_count,
            std::vector<std::uint8_t> data);

  int taxon_count() const noexcept { return static_cast<int>(taxa_.size()); }
  int site_count() const noexcept { return site_count_; }
  int state_count() const noexcept { return state_count_; }
  std::span<const std::string> taxa() const noexcept { return taxa_; }
  std::uint8_t at(int row, int site) const { return data_.at(static_cast<std::size_t>(row) * site_count_ + site); }
  std::span<const std::uint8_t> row(int r) const {
    return std::span<const std::uint8_t>(data_).subspan(static_cast<std::size_t>(r) * site_count_, site_count_);
  }

 private:
  std::vector<std::string> taxa_;
  int state_count_ = 0;
  int site_count_ = 0;
  std::vector<std::uint8_t> data_;
};

// Tree plus alignment rows permuted into tip order and compressed into
// unique site patterns.
struct BoundData {
  TimeTree tree;
  int state_count = 0;
  int site_count = 0;
  int pattern_count = 0;
  std::vector<int> row_of_tip;               // alignment row for each tip id
  std::vector<std::uint8_t> tip_patterns;    // [tip * pattern_count + pattern]
  std::vector<double> pattern_weights;       // multiplicity of each pattern
  std::vector<int> site_pattern;             // pattern index of each site

  std::uint8_t tip_state(int tip, int pattern) const {
    return tip_patterns[static_cast<std::size_t>(tip) * pattern_count + pattern];
  }
};

using DateMap = std::map<std::string, double, std::less<>>;

TimeTree parse_newick(std::string_view text, const DateMap& dates);
std::string serialize_newick(const TimeTree& tree, int precision = 17);

Alignment parse_fasta(std::string_view text, const Alphabet& alphabet = Alphabet::dna());
std::string serialize_fasta(const Alignment& aln, const Alphabet& alphabet = Alphabet::dna(),
                            int line_width = 60);

// Two-column table: taxon name and decimal-year date, separated by tabs,
// commas or spaces. '#' starts a comment; a non-numeric first row is a header.
DateMap parse_date_table(std::string_view text);
std::string serialize_date_table(const TimeTree& tree);

BoundData bind(const TimeTree& tree, const Alignment& aln);

// State frequencies over non-missing cells with a pseudo-count of one per
// state, so the result is always strictly positive.
std::vector<double> empirical_frequencies(const Alignment& aln);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view contents);

}  // namespace polyclock
