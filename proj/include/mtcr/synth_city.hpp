#pragma once

#include "mtcr/tessellation.hpp"
#include "mtcr/traffic.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace mtcr {

/// A synthetic region personality: per-category diurnal traffic profile plus
/// the label distribution its regions are drawn around.
struct Archetype {
  std::string name;
  std::vector<std::array<double, 24>> profile;  // [category][local hour]
  double base_volume = 1.0;
  double weekend_multiplier = 1.0;
  std::vector<double> landuse_mean;  // simplex over land-use categories
  double density_median = 1000.0;    // people / km^2

  void validate(std::size_t n_categories, std::size_t n_landuse) const;
};

std::vector<std::string> default_categories();          // Social, Work, Gaming, Streaming
std::vector<std::string> default_landuse_categories();  // 4 land-use classes
/// residential, office, nightlife, commercial.
std::vector<Archetype> default_archetypes();

struct CitySpec {
  int n_rows = 16;
  int n_cols = 16;
  double cell_size = 100.0;
  int n_regions = 32;
  int days = 14;
  double noise_sigma = 0.2;          // lognormal sigma per (cell, hour)
  double landuse_concentration = 50.0;
  double density_sigma = 0.2;
  /// When true, night/morning/afternoon follow independent archetype layouts.
  bool slot_dependent = false;
  std::int64_t start_time = 1552694400;  // 2019-03-16T00:00:00Z
  std::int64_t utc_offset = 0;
  std::uint64_t seed = 1;
  std::vector<std::string> categories = default_categories();
  std::vector<std::string> landuse_categories = default_landuse_categories();
  std::vector<Archetype> archetypes = default_archetypes();

  void validate() const;
};

struct SyntheticCity {
  CitySpec spec;
  MtcGrid grid;
  TargetTessellation tessellation;
  std::vector<geom::Point> sites;
  std::vector<int> cell_owner;                    // region index owning each cell (nearest site)
  std::vector<int> region_archetype;              // labels follow this archetype
  std::vector<std::array<int, 3>> slot_archetype;  // night, morning, afternoon
  std::vector<std::vector<double>> landuse;       // per region, simplex
  std::vector<double> density;                    // per region, people / km^2
  std::vector<CellularTimeSeries> traffic;        // sorted by (cell, category)
  CategoryMap category_map;
  TrafficMetadata metadata;

  /// Archetype governing `slot` (Full maps to region_archetype).
  int archetype_for(std::size_t region, TimeSlot slot) const;
};

/// Deterministic in (spec, seed). Regions are a Voronoi partition of the
/// grid extent; archetypes are laid out in spatially contiguous districts;
/// each cell carries the traffic of the region whose site is nearest.
SyntheticCity generate_city(const CitySpec& spec);

/// Writes traffic.csv, traffic_meta.json, grid.json, regions.geojson,
/// categories.txt, landuse_truth.csv, density_truth.csv, archetype_truth.csv
/// and manifest.json. Returns file name -> sha256.
std::map<std::string, std::string> export_city(const SyntheticCity& city, const std::filesystem::path& dir);

// Label files shared with the evaluation harness.
struct LandUseTable {
  std::vector<std::string> region_ids;
  std::vector<std::vector<double>> distributions;
};
struct DensityTable {
  std::vector<std::string> region_ids;
  std::vector<double> density;
};
struct ArchetypeTable {
  std::vector<std::string> region_ids;
  std::vector<std::array<int, 4>> labels;  // full, night, morning, afternoon
};

LandUseTable read_landuse_truth(const std::filesystem::path& path);
DensityTable read_density_truth(const std::filesystem::path& path);
ArchetypeTable read_archetype_truth(const std::filesystem::path& path);

}  // namespace mtcr
