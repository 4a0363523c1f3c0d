#include "mtcr/traffic.hpp"

#include "mtcr/common.hpp"
#include "mtcr/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace mtcr {

void CellularTimeSeries::validate() const {
  require(step > 0, ErrorCode::Data, "series step must be positive");
  require(!values.empty(), ErrorCode::Data, "series must have at least one sample");
  for (double v : values) {
    require(std::isfinite(v) && v >= 0.0, ErrorCode::Data,
            "cell " + std::to_string(cell_id) + " service " + service_id + ": negative or non-finite volume");
  }
}

CellularTimeSeries downsample_sum(const CellularTimeSeries& ts, std::int64_t target_step) {
  ts.validate();
  require(target_step > 0 && target_step % ts.step == 0, ErrorCode::InvalidArgument,
          "target step " + std::to_string(target_step) + " is not a multiple of step " + std::to_string(ts.step) +
              " (remainder " + std::to_string(target_step > 0 ? target_step % ts.step : target_step) + ")");
  const std::size_t ratio = static_cast<std::size_t>(target_step / ts.step);
  const std::size_t remainder = ts.values.size() % ratio;
  require(remainder == 0, ErrorCode::InvalidArgument,
          "series of " + std::to_string(ts.values.size()) + " samples leaves a partial trailing bin (remainder " +
              std::to_string(remainder) + ")");
  CellularTimeSeries out{ts.cell_id, ts.service_id, ts.start_time, target_step, {}};
  out.values.reserve(ts.values.size() / ratio);
  for (std::size_t i = 0; i < ts.values.size(); i += ratio) {
    double s = 0.0;
    for (std::size_t j = 0; j < ratio; ++j) s += ts.values[i + j];
    out.values.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------

CategoryMap::CategoryMap(std::vector<std::string> categories, std::unordered_map<std::string, std::string> mapping)
    : categories_(std::move(categories)), mapping_(std::move(mapping)) {
  for (std::size_t i = 0; i < categories_.size(); ++i) {
    for (std::size_t j = i + 1; j < categories_.size(); ++j) {
      require(categories_[i] != categories_[j], ErrorCode::Data, "duplicate category " + categories_[i]);
    }
  }
  for (const auto& [service, cat] : mapping_) {
    require(std::find(categories_.begin(), categories_.end(), cat) != categories_.end(), ErrorCode::Data,
            "service " + service + " maps to unlisted category " + cat);
    order_.push_back(service);
  }
  std::sort(order_.begin(), order_.end());
}

CategoryMap CategoryMap::parse(std::string_view text) {
  CategoryMap map;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view s = line;
    if (auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = io::trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    require(eq != std::string_view::npos, ErrorCode::Data,
            "category map line " + std::to_string(lineno) + ": expected service_id=category");
    const std::string service(io::trim(s.substr(0, eq)));
    const std::string category(io::trim(s.substr(eq + 1)));
    require(!service.empty() && !category.empty(), ErrorCode::Data,
            "category map line " + std::to_string(lineno) + ": empty field");
    require(map.mapping_.emplace(service, category).second, ErrorCode::Data,
            "category map: service " + service + " mapped twice");
    map.order_.push_back(service);
    if (std::find(map.categories_.begin(), map.categories_.end(), category) == map.categories_.end()) {
      map.categories_.push_back(category);
    }
  }
  return map;
}

CategoryMap CategoryMap::read(const std::filesystem::path& path) { return parse(io::read_file(path)); }

std::string CategoryMap::serialize() const {
  std::ostringstream out;
  // Emit services grouped by category so re-parsing reproduces the order.
  for (const auto& cat : categories_) {
    for (const auto& service : order_) {
      if (mapping_.at(service) == cat) out << service << '=' << cat << '\n';
    }
  }
  return out.str();
}

int CategoryMap::category_of(const std::string& service_id) const {
  auto it = mapping_.find(service_id);
  if (it == mapping_.end()) return -1;
  return static_cast<int>(std::find(categories_.begin(), categories_.end(), it->second) - categories_.begin());
}

// ---------------------------------------------------------------------------

std::string_view to_string(TimeSlot slot) {
  switch (slot) {
    case TimeSlot::Full: return "full";
    case TimeSlot::Night: return "night";
    case TimeSlot::Morning: return "morning";
    case TimeSlot::Afternoon: return "afternoon";
  }
  return "full";
}

TimeSlot parse_time_slot(std::string_view text) {
  text = io::trim(text);
  if (text == "full") return TimeSlot::Full;
  if (text == "night") return TimeSlot::Night;
  if (text == "morning") return TimeSlot::Morning;
  if (text == "afternoon") return TimeSlot::Afternoon;
  fail(ErrorCode::InvalidArgument, "unknown time slot '" + std::string(text) + "'");
}

bool in_slot(TimeSlot slot, std::int64_t unix_seconds, std::int64_t utc_offset) {
  if (slot == TimeSlot::Full) return true;
  std::int64_t sec_of_day = (unix_seconds + utc_offset) % 86400;
  if (sec_of_day < 0) sec_of_day += 86400;
  const std::int64_t hour = sec_of_day / 3600;
  switch (slot) {
    case TimeSlot::Night: return hour < 8;
    case TimeSlot::Morning: return hour >= 8 && hour < 16;
    case TimeSlot::Afternoon: return hour >= 16;
    case TimeSlot::Full: return true;
  }
  return true;
}

std::vector<std::size_t> slot_indices(const TimeAxis& axis, std::size_t length, TimeSlot slot) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < length; ++i) {
    if (in_slot(slot, axis.start_time + static_cast<std::int64_t>(i) * axis.step, axis.utc_offset)) idx.push_back(i);
  }
  return idx;
}

MultivariateSeries aggregate_categories(const std::vector<CellularTimeSeries>& series, const CategoryMap& map,
                                        std::int64_t utc_offset, AggregationReport* report) {
  require(!series.empty(), ErrorCode::Data, "no series to aggregate");
  const auto& first = series.front();
  for (const auto& s : series) {
    s.validate();
    require(s.cell_id == first.cell_id, ErrorCode::Data, "aggregate_categories: series from different cells");
    require(s.start_time == first.start_time && s.step == first.step && s.values.size() == first.values.size(),
            ErrorCode::Data,
            "cell " + std::to_string(first.cell_id) + ": service " + s.service_id + " has mismatched start/step/length");
  }
  MultivariateSeries mv;
  mv.cell_id = first.cell_id;
  mv.categories = map.categories();
  mv.axis = {first.start_time, first.step, utc_offset};
  const auto len = static_cast<Eigen::Index>(first.values.size());
  mv.values = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(map.size()), len);
  std::size_t mapped = 0;
  for (const auto& s : series) {
    const int c = map.category_of(s.service_id);
    if (c < 0) {
      if (report) report->unmapped_services.push_back(s.service_id);
      continue;
    }
    ++mapped;
    for (Eigen::Index t = 0; t < len; ++t) mv.values(c, t) += s.values[static_cast<std::size_t>(t)];
  }
  require(mapped > 0, ErrorCode::Data, "cell " + std::to_string(first.cell_id) + ": no mapped services");
  return mv;
}

void NormalizationStats::validate(std::size_t n_categories) const {
  require(loc.size() == n_categories && scale.size() == n_categories, ErrorCode::InvalidArgument,
          "normalization stats do not match category count");
  for (std::size_t c = 0; c < n_categories; ++c) {
    require(std::isfinite(loc[c]) && std::isfinite(scale[c]), ErrorCode::InvalidArgument,
            "non-finite normalization stats");
    require(scale[c] > 0.0, ErrorCode::InvalidArgument, "normalization scale must be positive");
  }
}

NormalizationStats compute_normalization_stats(const std::vector<MultivariateSeries>& training) {
  require(!training.empty(), ErrorCode::InvalidArgument, "no training cells for normalization stats");
  const auto n_cat = training.front().values.rows();
  std::vector<double> sum(static_cast<std::size_t>(n_cat), 0.0), sum_sq(static_cast<std::size_t>(n_cat), 0.0);
  double count = 0.0;
  for (const auto& mv : training) {
    require(mv.values.rows() == n_cat, ErrorCode::InvalidArgument, "category count differs across cells");
    require(!mv.normalized, ErrorCode::InvalidArgument, "stats must be computed on raw series");
    for (Eigen::Index c = 0; c < n_cat; ++c) {
      for (Eigen::Index t = 0; t < mv.values.cols(); ++t) {
        const double v = std::log1p(mv.values(c, t));
        sum[static_cast<std::size_t>(c)] += v;
        sum_sq[static_cast<std::size_t>(c)] += v * v;
      }
    }
    count += static_cast<double>(mv.values.cols());
  }
  NormalizationStats stats;
  for (Eigen::Index c = 0; c < n_cat; ++c) {
    const double mean = sum[static_cast<std::size_t>(c)] / count;
    const double var = std::max(0.0, sum_sq[static_cast<std::size_t>(c)] / count - mean * mean);
    const double sd = std::sqrt(var);
    stats.loc.push_back(mean);
    stats.scale.push_back(sd > 1e-12 ? sd : 1.0);
  }
  return stats;
}

MultivariateSeries normalize(const MultivariateSeries& mv, const NormalizationStats& stats) {
  require(!mv.normalized, ErrorCode::InvalidArgument, "series already normalized");
  stats.validate(static_cast<std::size_t>(mv.values.rows()));
  MultivariateSeries out = mv;
  for (Eigen::Index c = 0; c < mv.values.rows(); ++c) {
    const double loc = stats.loc[static_cast<std::size_t>(c)];
    const double scale = stats.scale[static_cast<std::size_t>(c)];
    for (Eigen::Index t = 0; t < mv.values.cols(); ++t) out.values(c, t) = (std::log1p(mv.values(c, t)) - loc) / scale;
  }
  out.normalized = true;
  return out;
}

MultivariateSeries denormalize(const MultivariateSeries& mv, const NormalizationStats& stats) {
  require(mv.normalized, ErrorCode::InvalidArgument, "series is not normalized");
  stats.validate(static_cast<std::size_t>(mv.values.rows()));
  MultivariateSeries out = mv;
  for (Eigen::Index c = 0; c < mv.values.rows(); ++c) {
    const double loc = stats.loc[static_cast<std::size_t>(c)];
    const double scale = stats.scale[static_cast<std::size_t>(c)];
    for (Eigen::Index t = 0; t < mv.values.cols(); ++t) out.values(c, t) = std::expm1(mv.values(c, t) * scale + loc);
  }
  out.normalized = false;
  return out;
}

MultivariateSeries slice_time_slot(const MultivariateSeries& mv, TimeSlot slot) {
  if (slot == TimeSlot::Full || slot == mv.slot) return mv;
  require(mv.slot == TimeSlot::Full, ErrorCode::InvalidArgument, "cannot re-slice a series already cut to a slot");
  const auto& ax = mv.axis;
  require(ax.step > 0 && (3600 % ax.step == 0 || (ax.step % 3600 == 0 && 86400 % ax.step == 0)), ErrorCode::InvalidArgument,
          "step " + std::to_string(ax.step) + " does not align with hour boundaries");
  require(((ax.start_time + ax.utc_offset) % ax.step + ax.step) % ax.step == 0, ErrorCode::InvalidArgument,
          "series start is not aligned to its step in local time");
  const auto idx = slot_indices(ax, static_cast<std::size_t>(mv.values.cols()), slot);
  require(!idx.empty(), ErrorCode::InvalidArgument,
          "cell " + std::to_string(mv.cell_id) + ": slot " + std::string(to_string(slot)) + " window is empty");
  MultivariateSeries out = mv;
  out.values.resize(mv.values.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.values.col(static_cast<Eigen::Index>(j)) = mv.values.col(static_cast<Eigen::Index>(idx[j]));
  out.slot = slot;
  return out;
}

// ---------------------------------------------------------------------------
// Interchange formats

std::string traffic_to_csv(const std::vector<CellularTimeSeries>& series) {
  std::string out = "cell_id,service_id,timestamp_iso8601,volume\n";
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      out += std::to_string(s.cell_id);
      out += ',';
      out += s.service_id;
      out += ',';
      out += io::format_iso8601(s.start_time + static_cast<std::int64_t>(i) * s.step);
      out += ',';
      out += io::format_double(s.values[i]);
      out += '\n';
    }
  }
  return out;
}

std::string metadata_to_json(const TrafficMetadata& meta) {
  nlohmann::json j = {{"start", io::format_iso8601(meta.start_time)},
                      {"step_seconds", meta.step},
                      {"k", meta.k},
                      {"utc_offset_seconds", meta.utc_offset},
                      {"services", meta.services}};
  return j.dump(2) + "\n";
}

TrafficMetadata metadata_from_json(const std::string& text) {
  TrafficMetadata m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.start_time = io::parse_iso8601(j.at("start").get<std::string>());
    m.step = j.at("step_seconds").get<std::int64_t>();
    m.k = j.at("k").get<std::int64_t>();
    m.utc_offset = j.value("utc_offset_seconds", std::int64_t{0});
    m.services = j.at("services").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Data, std::string("invalid traffic metadata: ") + e.what());
  }
  require(m.step > 0 && m.k >= 1, ErrorCode::Data, "traffic metadata: step and k must be positive");
  return m;
}

TrafficTable traffic_from_csv(const std::string& csv, const TrafficMetadata& meta) {
  std::map<std::string, std::size_t> service_rank;
  for (std::size_t i = 0; i < meta.services.size(); ++i) service_rank[meta.services[i]] = i;
  const auto k = static_cast<std::size_t>(meta.k);

  struct Slot {
    std::vector<double> values;
    std::vector<char> seen;
  };
  std::map<std::pair<std::int64_t, std::size_t>, Slot> cells;

  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  require(io::trim(line) == "cell_id,service_id,timestamp_iso8601,volume", ErrorCode::Data, "traffic CSV: bad header");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    const auto s = io::trim(line);
    if (s.empty()) continue;
    const auto f = io::split(s, ',');
    const auto where = [&] { return "traffic CSV line " + std::to_string(lineno) + ": "; };
    require(f.size() == 4, ErrorCode::Data, where() + "expected 4 fields");
    const std::int64_t cell = io::parse_int(f[0]);
    const auto rank = service_rank.find(std::string(f[1]));
    require(rank != service_rank.end(), ErrorCode::Data, where() + "service " + std::string(f[1]) + " not in metadata");
    const std::int64_t ts = io::parse_iso8601(f[2]);
    const std::int64_t offset = ts - meta.start_time;
    require(offset >= 0 && offset % meta.step == 0 && offset / meta.step < meta.k, ErrorCode::Data,
            where() + "timestamp off the metadata time axis");
    const double volume = io::parse_double(f[3]);
    require(std::isfinite(volume) && volume >= 0.0, ErrorCode::Data, where() + "negative or non-finite volume");
    auto& slot = cells[{cell, rank->second}];
    if (slot.values.empty()) {
      slot.values.assign(k, 0.0);
      slot.seen.assign(k, 0);
    }
    const auto i = static_cast<std::size_t>(offset / meta.step);
    require(!slot.seen[i], ErrorCode::Data, where() + "duplicate timestamp");
    slot.seen[i] = 1;
    slot.values[i] = volume;
  }

  TrafficTable table{meta, {}};
  for (auto& [key, slot] : cells) {
    const auto missing = std::count(slot.seen.begin(), slot.seen.end(), 0);
    require(missing == 0, ErrorCode::Data,
            "cell " + std::to_string(key.first) + " service " + meta.services[key.second] + ": " +
                std::to_string(missing) + " missing timestamps");
    table.series.push_back({key.first, meta.services[key.second], meta.start_time, meta.step, std::move(slot.values)});
  }
  return table;
}

TrafficTable read_traffic(const std::filesystem::path& csv, const std::filesystem::path& meta) {
  return traffic_from_csv(io::read_file(csv), metadata_from_json(io::read_file(meta)));
}

std::vector<MultivariateSeries> build_multivariate(const TrafficTable& table, const CategoryMap& map,
                                                   std::int64_t target_step, AggregationReport* report) {
  std::vector<MultivariateSeries> out;
  AggregationReport local;
  std::size_t i = 0;
  while (i < table.series.size()) {
    std::size_t j = i;
    std::vector<CellularTimeSeries> group;
    while (j < table.series.size() && table.series[j].cell_id == table.series[i].cell_id) {
      group.push_back(downsample_sum(table.series[j], target_step));
      ++j;
    }
    out.push_back(aggregate_categories(group, map, table.meta.utc_offset, &local));
    i = j;
  }
  if (report) {
    std::sort(local.unmapped_services.begin(), local.unmapped_services.end());
    local.unmapped_services.erase(std::unique(local.unmapped_services.begin(), local.unmapped_services.end()),
                                  local.unmapped_services.end());
    *report = std::move(local);
  }
  return out;
}

std::string multivariate_to_csv(const std::vector<MultivariateSeries>& cells) {
  std::string out;
  if (!cells.empty()) {
    const auto& ax = cells.front().axis;
    out += "# start=" + io::format_iso8601(ax.start_time) + " step=" + std::to_string(ax.step) +
           " utc_offset=" + std::to_string(ax.utc_offset) + "\n";
  }
  out += "cell_id,category";
  const Eigen::Index len = cells.empty() ? 0 : cells.front().values.cols();
  for (Eigen::Index t = 0; t < len; ++t) out += ",v_" + std::to_string(t);
  out += '\n';
  for (const auto& mv : cells) {
    require(!mv.normalized && mv.slot == TimeSlot::Full, ErrorCode::InvalidArgument,
            "only raw full-length series are exported");
    for (Eigen::Index c = 0; c < mv.values.rows(); ++c) {
      out += std::to_string(mv.cell_id) + ',' + mv.categories[static_cast<std::size_t>(c)];
      for (Eigen::Index t = 0; t < mv.values.cols(); ++t) {
        out += ',';
        out += io::format_double(mv.values(c, t));
      }
      out += '\n';
    }
  }
  return out;
}

std::vector<MultivariateSeries> multivariate_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  TimeAxis axis;
  std::getline(in, line);
  if (line.rfind("# ", 0) == 0) {
    for (auto tok : io::split(io::trim(std::string_view(line).substr(2)), ' ')) {
      const auto eq = tok.find('=');
      if (eq == std::string_view::npos) continue;
      const auto key = tok.substr(0, eq), val = tok.substr(eq + 1);
      if (key == "start") axis.start_time = io::parse_iso8601(val);
      if (key == "step") axis.step = io::parse_int(val);
      if (key == "utc_offset") axis.utc_offset = io::parse_int(val);
    }
    std::getline(in, line);
  }
  require(line.rfind("cell_id,category", 0) == 0, ErrorCode::Data, "multivariate CSV: bad header");
  std::vector<MultivariateSeries> out;
  std::vector<std::vector<double>> rows;
  const auto flush = [&] {
    if (rows.empty()) return;
    auto& mv = out.back();
    mv.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t c = 0; c < rows.size(); ++c) {
      require(rows[c].size() == rows.front().size(), ErrorCode::Data, "multivariate CSV: ragged rows");
      for (std::size_t t = 0; t < rows[c].size(); ++t) mv.values(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(t)) = rows[c][t];
    }
    rows.clear();
  };
  while (std::getline(in, line)) {
    const auto s = io::trim(line);
    if (s.empty()) continue;
    const auto f = io::split(s, ',');
    require(f.size() >= 3, ErrorCode::Data, "multivariate CSV: short row");
    const std::int64_t cell = io::parse_int(f[0]);
    if (out.empty() || out.back().cell_id != cell) {
      flush();
      MultivariateSeries mv;
      mv.cell_id = cell;
      mv.axis = axis;
      out.push_back(std::move(mv));
    }
    out.back().categories.emplace_back(f[1]);
    std::vector<double> row;
    row.reserve(f.size() - 2);
    for (std::size_t i = 2; i < f.size(); ++i) row.push_back(io::parse_double(f[i]));
    rows.push_back(std::move(row));
  }
  flush();
  return out;
}

}  // namespace mtcr
