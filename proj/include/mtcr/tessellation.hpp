#pragma once

#include "mtcr/common.hpp"
#include "mtcr/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace mtcr {

/// Operator grid of square mobile traffic cells in a planar frame (meters).
/// Cell ids are row-major with row 0 at origin.y.
struct MtcGrid {
  geom::Point origin;
  double cell_size = 100.0;
  int n_rows = 0;
  int n_cols = 0;

  void validate() const;
  int cell_count() const { return n_rows * n_cols; }
  geom::Box cell_box(int cell_id) const;
  geom::Point cell_center(int cell_id) const;
  geom::Box extent() const;
};

struct Region {
  std::string id;
  std::vector<geom::Polygon> parts;
  double area = 0.0;  // m^2
};

/// Stakeholder regions over the same frame as the grid. Areas are computed
/// from the polygons; an explicitly supplied area must agree within 0.1%.
class TargetTessellation {
 public:
  TargetTessellation() = default;
  explicit TargetTessellation(std::vector<Region> regions);

  const std::vector<Region>& regions() const { return regions_; }
  std::size_t size() const { return regions_.size(); }
  const Region& at(std::size_t i) const { return regions_.at(i); }
  std::size_t index_of(const std::string& id) const;
  bool contains(const std::string& id) const { return index_.count(id) != 0; }

 private:
  std::vector<Region> regions_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// region -> ascending list of cell ids whose overlap with the region has
/// positive area.
struct IntersectionMap {
  std::vector<std::string> region_ids;
  std::vector<std::vector<int>> cells;
  std::vector<std::string> warnings;

  const std::vector<int>& cells_of(const std::string& region_id) const;
};

inline constexpr double kAreaEpsilon = 1e-6;    // m^2
inline constexpr double kLengthEpsilon = 1e-6;  // m

IntersectionMap intersect_grid(const MtcGrid& grid, const TargetTessellation& tess,
                               double area_epsilon = kAreaEpsilon);

/// Undirected region graph. Neighbor lists hold region indices, sorted.
class RegionAdjacency {
 public:
  RegionAdjacency() = default;
  RegionAdjacency(std::vector<std::string> ids, std::vector<std::vector<std::size_t>> neighbors,
                  std::string rule);

  /// Convenience for tests and hand-built graphs.
  static RegionAdjacency from_edges(std::vector<std::string> ids,
                                    const std::vector<std::pair<std::string, std::string>>& edges);

  const std::vector<std::string>& ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }
  std::size_t index_of(const std::string& id) const;
  const std::vector<std::size_t>& neighbors(std::size_t i) const { return neighbors_.at(i); }
  std::set<std::string> neighbors(const std::string& id) const;
  const std::string& rule() const { return rule_; }

  /// BFS graph distance from `from` to every region; -1 when unreachable.
  std::vector<int> distances(std::size_t from) const;

 private:
  std::vector<std::string> ids_;
  std::vector<std::vector<std::size_t>> neighbors_;
  std::unordered_map<std::string, std::size_t> index_;
  std::string rule_;
};

/// Rook-style adjacency: regions sharing boundary of positive length.
RegionAdjacency build_adjacency(const TargetTessellation& tess, double tolerance = kLengthEpsilon);

/// Regions at graph distance 1..hops from the anchor, anchor excluded.
std::vector<std::size_t> hop_neighbors(const RegionAdjacency& adj, std::size_t anchor, int hops);
std::set<std::string> hop_neighbors(const RegionAdjacency& adj, const std::string& anchor, int hops);

struct TripletIndex {
  std::size_t anchor, positive, negative;
};

struct Triplet {
  std::string anchor, positive, negative;
};

/// Positive uniform over hop_neighbors, negative uniform over regions beyond
/// `hops` (including unreachable ones). Returns nullopt for an anchor with no
/// positive candidate; throws when every region lies within `hops`.
std::optional<TripletIndex> sample_triplet(const RegionAdjacency& adj, std::size_t anchor, int hops, Rng& rng);
std::optional<Triplet> sample_triplet(const RegionAdjacency& adj, const std::string& anchor, int hops,
                                      std::uint64_t seed);

/// Anchors that have at least one positive and one negative candidate.
std::vector<std::size_t> eligible_anchors(const RegionAdjacency& adj, int hops);

// Interchange formats.
TargetTessellation parse_geojson_regions(const std::string& text);
TargetTessellation read_geojson_regions(const std::filesystem::path& path);
std::string to_geojson(const TargetTessellation& tess,
                       const std::map<std::string, std::map<std::string, double>>& properties = {});

std::string grid_to_json(const MtcGrid& grid);
MtcGrid grid_from_json(const std::string& text);

std::string intersection_to_csv(const IntersectionMap& map);
IntersectionMap intersection_from_csv(const std::string& text);

std::string adjacency_to_csv(const RegionAdjacency& adj);

}  // namespace mtcr
