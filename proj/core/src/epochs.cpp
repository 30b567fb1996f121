#include "polyclock/epochs.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include <fmt/format.h>

#include "polyclock/errors.hpp"

namespace polyclock {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

EpochGrid::EpochGrid(std::vector<double> points, std::optional<double> present)
    : points_(std::move(points)), present_(present) {
  if (points_.empty()) throw ModelError("epoch grid needs at least one grid point");
  for (double w : points_) {
    if (!std::isfinite(w)) throw ModelError("epoch grid points must be finite");
  }
  std::sort(points_.begin(), points_.end(), std::greater<>());
  for (std::size_t m = 1; m < points_.size(); ++m) {
    if (points_[m - 1] - points_[m] <= 1e-12) {
      throw ModelError(fmt::format("duplicate epoch grid point {}", points_[m]));
    }
  }
}

EpochGrid EpochGrid::uniform(int count, double newest, double oldest) {
  const GridSegment seg{count, newest, oldest};
  return from_segments(std::span<const GridSegment>(&seg, 1));
}

EpochGrid EpochGrid::from_segments(std::span<const GridSegment> segments) {
  if (segments.empty()) throw ModelError("grid specification has no segments");
  std::vector<double> points;
  for (const auto& s : segments) {
    if (s.count < 1) throw ModelError(fmt::format("grid segment count must be >= 1, got {}", s.count));
    if (!(s.newest > s.oldest)) {
      throw ModelError(fmt::format("grid segment newest ({}) must exceed oldest ({})", s.newest, s.oldest));
    }
    const double width = (s.newest - s.oldest) / s.count;
    for (int k = 1; k <= s.count; ++k) {
      // The last point is pinned to `oldest` to avoid drift.
      points.push_back(k == s.count ? s.oldest : s.newest - k * width);
    }
  }
  const double present = std::max_element(segments.begin(), segments.end(), [](const auto& a, const auto& b) {
                           return a.newest < b.newest;
                         })->newest;
  return EpochGrid(std::move(points), present);
}

EpochGrid EpochGrid::with_present(double present) const {
  EpochGrid g = *this;
  g.present_ = present;
  return g;
}

int EpochGrid::epoch_of(double t) const noexcept {
  const auto it = std::partition_point(points_.begin(), points_.end(), [t](double w) { return w > t; });
  return static_cast<int>(it - points_.begin());
}

double EpochGrid::newer_bound(int epoch) const noexcept { return epoch == 0 ? kInf : points_[epoch - 1]; }

double EpochGrid::older_bound(int epoch) const noexcept {
  return epoch == grid_point_count() ? -kInf : points_[epoch];
}

std::vector<double> EpochGrid::midpoints() const {
  const int M = grid_point_count();
  std::vector<double> mid(M + 1);
  double first_width;
  if (present_ && *present_ > points_[0]) {
    first_width = *present_ - points_[0];
  } else {
    first_width = M >= 2 ? points_[0] - points_[1] : 1.0;
  }
  mid[0] = points_[0] + 0.5 * first_width;
  for (int e = 1; e < M; ++e) mid[e] = 0.5 * (points_[e - 1] + points_[e]);
  const double last_width = M >= 2 ? points_[M - 2] - points_[M - 1] : first_width;
  mid[M] = points_[M - 1] - 0.5 * last_width;
  return mid;
}

std::vector<double> EpochGrid::midpoint_gaps() const {
  const auto mid = midpoints();
  std::vector<double> d(mid.size() - 1);
  for (std::size_t m = 0; m < d.size(); ++m) d[m] = std::abs(mid[m] - mid[m + 1]);
  return d;
}

RateField RateField::constant(int epochs, double theta) {
  if (!(theta > 0.0)) throw ModelError("rate must be positive");
  return RateField(std::vector<double>(epochs, std::log(theta)));
}

std::vector<double> RateField::theta() const {
  std::vector<double> out(zeta_.size());
  std::transform(zeta_.begin(), zeta_.end(), out.begin(), [](double z) { return std::exp(z); });
  return out;
}

OccupancyMatrix::OccupancyMatrix(int epochs, std::vector<int> row_start, std::vector<int> epoch,
                                 std::vector<double> duration)
    : epochs_(epochs), row_start_(std::move(row_start)), epoch_(std::move(epoch)), duration_(std::move(duration)) {
  if (row_start_.empty() || row_start_.front() != 0 ||
      static_cast<std::size_t>(row_start_.back()) != epoch_.size() || epoch_.size() != duration_.size()) {
    throw DimensionError("inconsistent occupancy matrix layout");
  }
}

double OccupancyMatrix::at(int branch, int epoch) const {
  const auto eps = row_epochs(branch);
  const auto it = std::find(eps.begin(), eps.end(), epoch);
  return it == eps.end() ? 0.0 : row_durations(branch)[it - eps.begin()];
}

void OccupancyMatrix::multiply(std::span<const double> x, std::span<double> y) const {
  if (static_cast<int>(x.size()) != epochs_ || static_cast<int>(y.size()) != branch_count()) {
    throw DimensionError(fmt::format("occupancy multiply: expected {} epochs and {} branches, got {} and {}",
                                     epochs_, branch_count(), x.size(), y.size()));
  }
  for (int i = 0; i < branch_count(); ++i) {
    double acc = 0.0;
    for (int k = row_start_[i]; k < row_start_[i + 1]; ++k) acc += duration_[k] * x[epoch_[k]];
    y[i] = acc;
  }
}

void OccupancyMatrix::transpose_multiply(std::span<const double> x, std::span<double> y) const {
  if (static_cast<int>(x.size()) != branch_count() || static_cast<int>(y.size()) != epochs_) {
    throw DimensionError(fmt::format("occupancy transpose multiply: expected {} branches and {} epochs, got {} and {}",
                                     branch_count(), epochs_, x.size(), y.size()));
  }
  std::fill(y.begin(), y.end(), 0.0);
  for (int i = 0; i < branch_count(); ++i) {
    for (int k = row_start_[i]; k < row_start_[i + 1]; ++k) y[epoch_[k]] += duration_[k] * x[i];
  }
}

OccupancyMatrix build_occupancy(const TimeTree& tree, const EpochGrid& grid) {
  std::vector<int> row_start{0};
  std::vector<int> epoch;
  std::vector<double> duration;
  for (int i = 0; i < tree.branch_count(); ++i) {
    const double t_child = tree.time(i);
    const double t_parent = tree.time(tree.parent(i));
    const int first = grid.epoch_of(t_child);
    const int last = grid.epoch_of(t_parent);
    for (int e = first; e <= last; ++e) {
      const double overlap = std::min(t_child, grid.newer_bound(e)) - std::max(t_parent, grid.older_bound(e));
      if (overlap > 0.0) {
        epoch.push_back(e);
        duration.push_back(overlap);
      }
    }
    row_start.push_back(static_cast<int>(epoch.size()));
  }
  return OccupancyMatrix(grid.epoch_count(), std::move(row_start), std::move(epoch), std::move(duration));
}

std::vector<double> branch_integrals(const OccupancyMatrix& occupancy, const RateField& field) {
  if (field.size() != occupancy.epoch_count()) {
    throw DimensionError(fmt::format("rate field has {} epochs, occupancy has {}", field.size(),
                                     occupancy.epoch_count()));
  }
  const auto theta = field.theta();
  std::vector<double> b(occupancy.branch_count());
  occupancy.multiply(theta, b);
  return b;
}

}  // namespace polyclock
