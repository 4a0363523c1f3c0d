#include "mtcr/tessellation.hpp"

#include "mtcr/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <deque>
#include <sstream>

namespace mtcr {

using nlohmann::json;

void MtcGrid::validate() const {
  require(cell_size > 0.0 && std::isfinite(cell_size), ErrorCode::InvalidArgument, "grid cell_size must be positive");
  require(n_rows > 0 && n_cols > 0, ErrorCode::InvalidArgument, "grid dimensions must be positive");
  require(std::isfinite(origin.x) && std::isfinite(origin.y), ErrorCode::InvalidArgument, "grid origin not finite");
}

geom::Box MtcGrid::cell_box(int cell_id) const {
  require(cell_id >= 0 && cell_id < cell_count(), ErrorCode::InvalidArgument,
          "cell id " + std::to_string(cell_id) + " outside grid");
  const int row = cell_id / n_cols;
  const int col = cell_id % n_cols;
  const double x0 = origin.x + col * cell_size;
  const double y0 = origin.y + row * cell_size;
  return {x0, y0, x0 + cell_size, y0 + cell_size};
}

geom::Point MtcGrid::cell_center(int cell_id) const {
  const auto b = cell_box(cell_id);
  return {0.5 * (b.min_x + b.max_x), 0.5 * (b.min_y + b.max_y)};
}

geom::Box MtcGrid::extent() const {
  return {origin.x, origin.y, origin.x + n_cols * cell_size, origin.y + n_rows * cell_size};
}

TargetTessellation::TargetTessellation(std::vector<Region> regions) : regions_(std::move(regions)) {
  for (std::size_t i = 0; i < regions_.size(); ++i) {
    Region& r = regions_[i];
    require(!r.id.empty(), ErrorCode::InvalidArgument, "region with empty id");
    require(index_.emplace(r.id, i).second, ErrorCode::InvalidArgument, "duplicate region id " + r.id);
    const double computed = geom::area(r.parts);
    if (r.area > 0.0) {
      require(std::abs(r.area - computed) <= 1e-3 * std::max(computed, r.area), ErrorCode::Geometry,
              "region " + r.id + ": stated area " + io::format_double(r.area) + " disagrees with polygon area " +
                  io::format_double(computed));
    }
    r.area = computed;
  }
}

std::size_t TargetTessellation::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) fail(ErrorCode::InvalidArgument, "unknown region id " + id);
  return it->second;
}

const std::vector<int>& IntersectionMap::cells_of(const std::string& region_id) const {
  for (std::size_t i = 0; i < region_ids.size(); ++i) {
    if (region_ids[i] == region_id) return cells[i];
  }
  fail(ErrorCode::InvalidArgument, "unknown region id " + region_id);
}

IntersectionMap intersect_grid(const MtcGrid& grid, const TargetTessellation& tess, double area_epsilon) {
  grid.validate();
  IntersectionMap out;
  out.region_ids.reserve(tess.size());
  out.cells.reserve(tess.size());
  std::vector<double> coverage(static_cast<std::size_t>(grid.cell_count()), 0.0);

  for (const Region& region : tess.regions()) {
    std::vector<int> cells;
    const geom::Box bb = geom::bounds(region.parts);
    const int c0 = std::max(0, static_cast<int>(std::floor((bb.min_x - grid.origin.x) / grid.cell_size)));
    const int c1 = std::min(grid.n_cols - 1, static_cast<int>(std::floor((bb.max_x - grid.origin.x) / grid.cell_size)));
    const int r0 = std::max(0, static_cast<int>(std::floor((bb.min_y - grid.origin.y) / grid.cell_size)));
    const int r1 = std::min(grid.n_rows - 1, static_cast<int>(std::floor((bb.max_y - grid.origin.y) / grid.cell_size)));
    for (int row = r0; row <= r1; ++row) {
      for (int col = c0; col <= c1; ++col) {
        const int id = row * grid.n_cols + col;
        const double a = geom::overlap_area(region.parts, grid.cell_box(id));
        if (a > area_epsilon) {
          cells.push_back(id);
          coverage[static_cast<std::size_t>(id)] += a;
        }
      }
    }
    if (cells.empty()) out.warnings.push_back("region " + region.id + " intersects no grid cell");
    out.region_ids.push_back(region.id);
    out.cells.push_back(std::move(cells));
  }

  // Overlapping regions show up as a cell covered more than once.
  const double cell_area = grid.cell_size * grid.cell_size;
  for (std::size_t id = 0; id < coverage.size(); ++id) {
    if (coverage[id] > cell_area * (1.0 + 1e-9) + area_epsilon) {
      out.warnings.push_back("cell " + std::to_string(id) + " covered by overlapping regions (" +
                             io::format_double(coverage[id]) + " m^2 > cell area)");
    }
  }
  return out;
}

RegionAdjacency::RegionAdjacency(std::vector<std::string> ids, std::vector<std::vector<std::size_t>> neighbors,
                                 std::string rule)
    : ids_(std::move(ids)), neighbors_(std::move(neighbors)), rule_(std::move(rule)) {
  require(ids_.size() == neighbors_.size(), ErrorCode::InvalidArgument, "adjacency size mismatch");
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    require(index_.emplace(ids_[i], i).second, ErrorCode::InvalidArgument, "duplicate region id " + ids_[i]);
  }
  for (std::size_t i = 0; i < neighbors_.size(); ++i) {
    auto& nb = neighbors_[i];
    std::sort(nb.begin(), nb.end());
    nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
    for (std::size_t j : nb) {
      require(j < ids_.size() && j != i, ErrorCode::InvalidArgument, "invalid neighbor of " + ids_[i]);
    }
  }
  for (std::size_t i = 0; i < neighbors_.size(); ++i) {
    for (std::size_t j : neighbors_[i]) {
      require(std::binary_search(neighbors_[j].begin(), neighbors_[j].end(), i), ErrorCode::InvalidArgument,
              "asymmetric adjacency between " + ids_[i] + " and " + ids_[j]);
    }
  }
}

RegionAdjacency RegionAdjacency::from_edges(std::vector<std::string> ids,
                                            const std::vector<std::pair<std::string, std::string>>& edges) {
  std::unordered_map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < ids.size(); ++i) idx[ids[i]] = i;
  std::vector<std::vector<std::size_t>> nb(ids.size());
  for (const auto& [a, b] : edges) {
    const auto ia = idx.find(a), ib = idx.find(b);
    require(ia != idx.end() && ib != idx.end(), ErrorCode::InvalidArgument, "edge references unknown region");
    nb[ia->second].push_back(ib->second);
    nb[ib->second].push_back(ia->second);
  }
  return RegionAdjacency(std::move(ids), std::move(nb), "explicit");
}

std::size_t RegionAdjacency::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) fail(ErrorCode::InvalidArgument, "unknown region id " + id);
  return it->second;
}

std::set<std::string> RegionAdjacency::neighbors(const std::string& id) const {
  std::set<std::string> out;
  for (std::size_t j : neighbors_.at(index_of(id))) out.insert(ids_[j]);
  return out;
}

std::vector<int> RegionAdjacency::distances(std::size_t from) const {
  std::vector<int> dist(ids_.size(), -1);
  std::deque<std::size_t> queue{from};
  dist.at(from) = 0;
  while (!queue.empty()) {
    const std::size_t u = queue.front();
    queue.pop_front();
    for (std::size_t v : neighbors_[u]) {
      if (dist[v] < 0) {
        dist[v] = dist[u] + 1;
        queue.push_back(v);
      }
    }
  }
  return dist;
}

RegionAdjacency build_adjacency(const TargetTessellation& tess, double tolerance) {
  const std::size_t n = tess.size();
  std::vector<geom::Box> boxes;
  boxes.reserve(n);
  for (const Region& r : tess.regions()) {
    require(r.area > kAreaEpsilon, ErrorCode::Geometry, "degenerate polygon (zero area) for region " + r.id);
    boxes.push_back(geom::bounds(r.parts));
  }
  std::vector<std::vector<std::size_t>> nb(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (!boxes[i].touches(boxes[j], tolerance)) continue;
      if (geom::shared_boundary_length(tess.at(i).parts, tess.at(j).parts, tolerance) > tolerance) {
        nb[i].push_back(j);
        nb[j].push_back(i);
      }
    }
  }
  std::vector<std::string> ids;
  ids.reserve(n);
  for (const Region& r : tess.regions()) ids.push_back(r.id);
  return RegionAdjacency(std::move(ids), std::move(nb), "shared-boundary");
}

std::vector<std::size_t> hop_neighbors(const RegionAdjacency& adj, std::size_t anchor, int hops) {
  require(hops >= 1, ErrorCode::InvalidArgument, "hops must be >= 1");
  require(anchor < adj.size(), ErrorCode::InvalidArgument, "anchor index out of range");
  const auto dist = adj.distances(anchor);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] >= 1 && dist[i] <= hops) out.push_back(i);
  }
  return out;
}

std::set<std::string> hop_neighbors(const RegionAdjacency& adj, const std::string& anchor, int hops) {
  std::set<std::string> out;
  for (std::size_t i : hop_neighbors(adj, adj.index_of(anchor), hops)) out.insert(adj.ids()[i]);
  return out;
}

std::optional<TripletIndex> sample_triplet(const RegionAdjacency& adj, std::size_t anchor, int hops, Rng& rng) {
  require(hops >= 1, ErrorCode::InvalidArgument, "hops must be >= 1");
  const auto dist = adj.distances(anchor);
  std::vector<std::size_t> positives, negatives;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (i == anchor) continue;
    if (dist[i] >= 1 && dist[i] <= hops) {
      positives.push_back(i);
    } else {
      negatives.push_back(i);
    }
  }
  if (positives.empty()) return std::nullopt;
  require(!negatives.empty(), ErrorCode::InvalidArgument,
          "region " + adj.ids()[anchor] + " has no non-neighbor within hops=" + std::to_string(hops));
  const std::size_t p = positives[uniform_index(rng, positives.size())];
  const std::size_t q = negatives[uniform_index(rng, negatives.size())];
  return TripletIndex{anchor, p, q};
}

std::optional<Triplet> sample_triplet(const RegionAdjacency& adj, const std::string& anchor, int hops,
                                      std::uint64_t seed) {
  Rng rng(derive_seed(seed, "triplet"));
  const auto t = sample_triplet(adj, adj.index_of(anchor), hops, rng);
  if (!t) return std::nullopt;
  return Triplet{adj.ids()[t->anchor], adj.ids()[t->positive], adj.ids()[t->negative]};
}

std::vector<std::size_t> eligible_anchors(const RegionAdjacency& adj, int hops) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < adj.size(); ++i) {
    const auto dist = adj.distances(i);
    bool has_pos = false, has_neg = false;
    for (std::size_t j = 0; j < dist.size(); ++j) {
      if (j == i) continue;
      if (dist[j] >= 1 && dist[j] <= hops) {
        has_pos = true;
      } else {
        has_neg = true;
      }
    }
    if (has_pos && has_neg) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// GeoJSON

namespace {

geom::Ring parse_ring(const json& coords) {
  geom::Ring ring;
  for (const auto& c : coords) {
    require(c.is_array() && c.size() >= 2, ErrorCode::Data, "bad GeoJSON coordinate");
    ring.push_back({c[0].get<double>(), c[1].get<double>()});
  }
  if (ring.size() >= 2 && ring.front().x == ring.back().x && ring.front().y == ring.back().y) ring.pop_back();
  return ring;
}

geom::Polygon parse_polygon(const json& rings) {
  require(rings.is_array() && !rings.empty(), ErrorCode::Data, "empty GeoJSON polygon");
  geom::Polygon poly;
  poly.outer = parse_ring(rings[0]);
  for (std::size_t i = 1; i < rings.size(); ++i) poly.holes.push_back(parse_ring(rings[i]));
  return poly;
}

json ring_json(const geom::Ring& ring) {
  json out = json::array();
  for (const auto& p : ring) out.push_back({p.x, p.y});
  if (!ring.empty()) out.push_back({ring.front().x, ring.front().y});
  return out;
}

json polygon_json(const geom::Polygon& poly) {
  json out = json::array();
  out.push_back(ring_json(poly.outer));
  for (const auto& h : poly.holes) out.push_back(ring_json(h));
  return out;
}

}  // namespace

TargetTessellation parse_geojson_regions(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::Data, std::string("invalid GeoJSON: ") + e.what());
  }
  require(doc.value("type", "") == "FeatureCollection", ErrorCode::Data, "GeoJSON root must be a FeatureCollection");
  std::vector<Region> regions;
  for (const auto& f : doc.at("features")) {
    const auto& props = f.at("properties");
    require(props.contains("region_id"), ErrorCode::Data, "feature without region_id property");
    Region r;
    r.id = props["region_id"].is_string() ? props["region_id"].get<std::string>() : props["region_id"].dump();
    if (props.contains("area_m2") && props["area_m2"].is_number()) r.area = props["area_m2"].get<double>();
    const auto& g = f.at("geometry");
    const std::string type = g.at("type").get<std::string>();
    if (type == "Polygon") {
      r.parts.push_back(parse_polygon(g.at("coordinates")));
    } else if (type == "MultiPolygon") {
      for (const auto& p : g.at("coordinates")) r.parts.push_back(parse_polygon(p));
    } else {
      fail(ErrorCode::Data, "region " + r.id + ": unsupported geometry type " + type);
    }
    regions.push_back(std::move(r));
  }
  return TargetTessellation(std::move(regions));
}

TargetTessellation read_geojson_regions(const std::filesystem::path& path) {
  return parse_geojson_regions(io::read_file(path));
}

std::string to_geojson(const TargetTessellation& tess,
                       const std::map<std::string, std::map<std::string, double>>& properties) {
  json features = json::array();
  for (const Region& r : tess.regions()) {
    json props = {{"region_id", r.id}, {"area_m2", r.area}};
    if (auto it = properties.find(r.id); it != properties.end()) {
      for (const auto& [k, v] : it->second) {
        if (std::floor(v) == v && std::abs(v) < 1e15) {
          props[k] = static_cast<std::int64_t>(v);
        } else {
          props[k] = v;
        }
      }
    }
    json geometry;
    if (r.parts.size() == 1) {
      geometry = {{"type", "Polygon"}, {"coordinates", polygon_json(r.parts[0])}};
    } else {
      json coords = json::array();
      for (const auto& p : r.parts) coords.push_back(polygon_json(p));
      geometry = {{"type", "MultiPolygon"}, {"coordinates", coords}};
    }
    features.push_back({{"type", "Feature"}, {"properties", props}, {"geometry", geometry}});
  }
  json doc = {{"type", "FeatureCollection"}, {"features", features}};
  return doc.dump(1) + "\n";
}

std::string grid_to_json(const MtcGrid& grid) {
  json j = {{"origin_x", grid.origin.x},
            {"origin_y", grid.origin.y},
            {"cell_size", grid.cell_size},
            {"n_rows", grid.n_rows},
            {"n_cols", grid.n_cols}};
  return j.dump(2) + "\n";
}

MtcGrid grid_from_json(const std::string& text) {
  MtcGrid g;
  try {
    const json j = json::parse(text);
    g.origin = {j.at("origin_x").get<double>(), j.at("origin_y").get<double>()};
    g.cell_size = j.at("cell_size").get<double>();
    g.n_rows = j.at("n_rows").get<int>();
    g.n_cols = j.at("n_cols").get<int>();
  } catch (const json::exception& e) {
    fail(ErrorCode::Data, std::string("invalid grid config: ") + e.what());
  }
  g.validate();
  return g;
}

std::string intersection_to_csv(const IntersectionMap& map) {
  std::ostringstream out;
  out << "region_id,cell_id\n";
  for (std::size_t i = 0; i < map.region_ids.size(); ++i) {
    for (int c : map.cells[i]) out << map.region_ids[i] << ',' << c << '\n';
  }
  return out.str();
}

IntersectionMap intersection_from_csv(const std::string& text) {
  IntersectionMap map;
  std::unordered_map<std::string, std::size_t> idx;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  require(io::trim(line) == "region_id,cell_id", ErrorCode::Data, "intersection CSV: bad header");
  while (std::getline(in, line)) {
    if (io::trim(line).empty()) continue;
    const auto f = io::split(io::trim(line), ',');
    require(f.size() == 2, ErrorCode::Data, "intersection CSV: expected 2 fields");
    const std::string id(f[0]);
    auto [it, inserted] = idx.emplace(id, map.region_ids.size());
    if (inserted) {
      map.region_ids.push_back(id);
      map.cells.emplace_back();
    }
    map.cells[it->second].push_back(static_cast<int>(io::parse_int(f[1])));
  }
  return map;
}

std::string adjacency_to_csv(const RegionAdjacency& adj) {
  std::ostringstream out;
  out << "region_id,neighbor_id\n";
  for (std::size_t i = 0; i < adj.size(); ++i) {
    for (std::size_t j : adj.neighbors(i)) out << adj.ids()[i] << ',' << adj.ids()[j] << '\n';
  }
  return out.str();
}

}  // namespace mtcr
