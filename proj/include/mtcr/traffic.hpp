#pragma once

#include "mtcr/common.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mtcr {

/// Traffic of one service in one cell: values[i] covers
/// [start_time + i*step, start_time + (i+1)*step).
struct CellularTimeSeries {
  std::int64_t cell_id = 0;
  std::string service_id;
  std::int64_t start_time = 0;  // unix seconds, UTC
  std::int64_t step = 0;        // seconds
  std::vector<double> values;

  void validate() const;
};

/// Sums consecutive bins into bins of `target_step` seconds. Throws when the
/// ratio is not integral or the series ends in a partial bin.
CellularTimeSeries downsample_sum(const CellularTimeSeries& ts, std::int64_t target_step);

/// service_id -> macro category, with categories ordered by first appearance.
class CategoryMap {
 public:
  CategoryMap() = default;
  CategoryMap(std::vector<std::string> categories, std::unordered_map<std::string, std::string> mapping);

  /// Parses `service_id=category` lines; '#' starts a comment.
  static CategoryMap parse(std::string_view text);
  static CategoryMap read(const std::filesystem::path& path);
  std::string serialize() const;

  const std::vector<std::string>& categories() const { return categories_; }
  /// Category index for a service, or -1 when unmapped.
  int category_of(const std::string& service_id) const;
  std::size_t size() const { return categories_.size(); }

 private:
  std::vector<std::string> categories_;
  std::unordered_map<std::string, std::string> mapping_;
  std::vector<std::string> order_;  // services in file order, for serialize()
};

/// Which samples of a series survive. Slots use local civil time: night
/// 00:00-07:59, morning 08:00-15:59, afternoon 16:00-23:59.
enum class TimeSlot { Full, Night, Morning, Afternoon };

std::string_view to_string(TimeSlot slot);
TimeSlot parse_time_slot(std::string_view text);
bool in_slot(TimeSlot slot, std::int64_t unix_seconds, std::int64_t utc_offset);

struct TimeAxis {
  std::int64_t start_time = 0;
  std::int64_t step = 3600;
  std::int64_t utc_offset = 0;  // seconds east of UTC, fixed
};

/// Indices of the samples in [0, length) that fall in `slot`.
std::vector<std::size_t> slot_indices(const TimeAxis& axis, std::size_t length, TimeSlot slot);

struct MultivariateSeries {
  std::int64_t cell_id = 0;
  std::vector<std::string> categories;
  Eigen::MatrixXd values;  // n_categories x length
  bool normalized = false;
  TimeAxis axis;
  TimeSlot slot = TimeSlot::Full;

  Eigen::Index length() const { return values.cols(); }
};

struct AggregationReport {
  std::vector<std::string> unmapped_services;
};

/// Row c is the elementwise sum of every series whose service maps to
/// category c. Unmapped services are excluded and reported.
MultivariateSeries aggregate_categories(const std::vector<CellularTimeSeries>& series, const CategoryMap& map,
                                        std::int64_t utc_offset = 0, AggregationReport* report = nullptr);

/// Per-category location/scale of log1p(volume).
struct NormalizationStats {
  std::vector<double> loc;
  std::vector<double> scale;

  void validate(std::size_t n_categories) const;
};

/// Mean and population std of log1p(x) per category over all given cells
/// and timesteps. A zero std falls back to scale 1.
NormalizationStats compute_normalization_stats(const std::vector<MultivariateSeries>& training);

MultivariateSeries normalize(const MultivariateSeries& mv, const NormalizationStats& stats);
MultivariateSeries denormalize(const MultivariateSeries& mv, const NormalizationStats& stats);

MultivariateSeries slice_time_slot(const MultivariateSeries& mv, TimeSlot slot);

// Interchange: `cell_id,service_id,timestamp_iso8601,volume` plus a JSON
// sidecar carrying start, step, k, service list and the fixed UTC offset.
struct TrafficMetadata {
  std::int64_t start_time = 0;
  std::int64_t step = 3600;
  std::int64_t k = 0;
  std::int64_t utc_offset = 0;
  std::vector<std::string> services;
};

struct TrafficTable {
  TrafficMetadata meta;
  std::vector<CellularTimeSeries> series;  // sorted by (cell_id, service order)
};

std::string traffic_to_csv(const std::vector<CellularTimeSeries>& series);
std::string metadata_to_json(const TrafficMetadata& meta);
TrafficMetadata metadata_from_json(const std::string& text);
/// Rejects missing, duplicate or off-axis timestamps.
TrafficTable traffic_from_csv(const std::string& csv, const TrafficMetadata& meta);
TrafficTable read_traffic(const std::filesystem::path& csv, const std::filesystem::path& meta);

/// Groups a table into per-cell multivariate series (ascending cell id).
std::vector<MultivariateSeries> build_multivariate(const TrafficTable& table, const CategoryMap& map,
                                                   std::int64_t target_step, AggregationReport* report = nullptr);

/// `cell_id,category,v_0..v_{k-1}` with a leading axis comment line.
std::string multivariate_to_csv(const std::vector<MultivariateSeries>& cells);
std::vector<MultivariateSeries> multivariate_from_csv(const std::string& text);

}  // namespace mtcr
