#pragma once

#include <optional>
#include <span>
#include <vector>

#include "polyclock/phylo_io.hpp"

namespace polyclock {

// Equal-width block of grid points: `count` epochs of width
// (newest - oldest) / count ending at `oldest`, i.e. grid points
// newest - k * width for k = 1..count.
struct GridSegment {
  int count = 0;
  double newest = 0.0;
  double oldest = 0.0;
};

// Grid points w_1 > w_2 > ... > w_M (calendar time, decreasing toward the
// past) splitting time into M + 1 epochs. Epoch 0 (rate theta_1) is
// [w_1, +inf), epoch m is [w_{m+1}, w_m), and epoch M is (-inf, w_M).
// Indices in this API are 0-based.
class EpochGrid {
 public:
  EpochGrid() = default;
  // Accepts points in either order; throws ModelError on duplicates (gap
  // <= 1e-12) or an empty list. `present` is the effective w_0 used for the
  // first epoch's midpoint.
  explicit EpochGrid(std::vector<double> points, std::optional<double> present = std::nullopt);

  static EpochGrid uniform(int count, double newest, double oldest);
  // Concatenation of segments for mixed-resolution grids; the newest point
  // of the first segment is the effective present.
  static EpochGrid from_segments(std::span<const GridSegment> segments);

  int grid_point_count() const noexcept { return static_cast<int>(points_.size()); }
  int epoch_count() const noexcept { return grid_point_count() + 1; }
  std::span<const double> points() const noexcept { return points_; }
  std::optional<double> present() const noexcept { return present_; }
  EpochGrid with_present(double present) const;

  // Epoch containing time t under the half-open convention [w_m, w_{m-1}).
  int epoch_of(double t) const noexcept;
  // Bounds of epoch e; infinite at the two open ends.
  double newer_bound(int epoch) const noexcept;
  double older_bound(int epoch) const noexcept;

  // Epoch midpoints, length M + 1. The open-ended oldest epoch is mirrored
  // about w_M; the first epoch spans [w_1, present], or is mirrored when no
  // present newer than w_1 is known.
  std::vector<double> midpoints() const;
  // d_m = |midpoint_m - midpoint_{m+1}|, length M, all positive.
  std::vector<double> midpoint_gaps() const;

 private:
  std::vector<double> points_;
  std::optional<double> present_;
};

// Per-epoch log rates zeta; theta = exp(zeta) > 0.
class RateField {
 public:
  RateField() = default;
  explicit RateField(std::vector<double> zeta) : zeta_(std::move(zeta)) {}
  static RateField constant(int epochs, double theta);

  int size() const noexcept { return static_cast<int>(zeta_.size()); }
  std::span<const double> zeta() const noexcept { return zeta_; }
  std::vector<double> theta() const;

 private:
  std::vector<double> zeta_;
};

// Sparse (2N-2) x (M+1) matrix of branch durations per epoch, in CSR form.
// Only strictly positive durations are stored.
class OccupancyMatrix {
 public:
  OccupancyMatrix() = default;
  OccupancyMatrix(int epochs, std::vector<int> row_start, std::vector<int> epoch, std::vector<double> duration);

  int branch_count() const noexcept { return static_cast<int>(row_start_.size()) - 1; }
  int epoch_count() const noexcept { return epochs_; }
  std::size_t nonzero_count() const noexcept { return epoch_.size(); }

  std::span<const int> row_epochs(int branch) const {
    return std::span<const int>(epoch_).subspan(row_start_[branch], row_start_[branch + 1] - row_start_[branch]);
  }
  std::span<const double> row_durations(int branch) const {
    return std::span<const double>(duration_).subspan(row_start_[branch],
                                                      row_start_[branch + 1] - row_start_[branch]);
  }
  double at(int branch, int epoch) const;

  // y = U x  (x has one entry per epoch)
  void multiply(std::span<const double> x, std::span<double> y) const;
  // y = U^T x  (x has one entry per branch)
  void transpose_multiply(std::span<const double> x, std::span<double> y) const;

 private:
  int epochs_ = 0;
  std::vector<int> row_start_{0};
  std::vector<int> epoch_;
  std::vector<double> duration_;
};

OccupancyMatrix build_occupancy(const TimeTree& tree, const EpochGrid& grid);

// b = U theta. Throws DimensionError when the field size differs from the
// epoch count.
std::vector<double> branch_integrals(const OccupancyMatrix& occupancy, const RateField& field);

// db/dtheta; b is linear in theta, so this is U itself.
inline const OccupancyMatrix& branch_integral_jacobian(const OccupancyMatrix& occupancy) noexcept {
  return occupancy;
}

}  // namespace polyclock
