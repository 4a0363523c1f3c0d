#include "mtcr/synth_city.hpp"

#include "mtcr/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace mtcr {

void Archetype::validate(std::size_t n_categories, std::size_t n_landuse) const {
  require(profile.size() == n_categories, ErrorCode::InvalidArgument,
          "archetype " + name + ": profile needs one row per category");
  for (const auto& row : profile) {
    bool positive = false;
    for (double w : row) {
      require(std::isfinite(w) && w >= 0.0, ErrorCode::InvalidArgument, "archetype " + name + ": negative weight");
      positive = positive || w > 0.0;
    }
    require(positive, ErrorCode::InvalidArgument, "archetype " + name + ": category profile is all zero");
  }
  require(base_volume > 0.0 && weekend_multiplier > 0.0 && density_median >= 0.0, ErrorCode::InvalidArgument,
          "archetype " + name + ": base volume and weekend multiplier must be positive");
  require(landuse_mean.size() == n_landuse, ErrorCode::InvalidArgument,
          "archetype " + name + ": land-use mean has wrong length");
  double s = 0.0;
  for (double p : landuse_mean) {
    require(p > 0.0, ErrorCode::InvalidArgument, "archetype " + name + ": land-use mean must be positive");
    s += p;
  }
  require(std::abs(s - 1.0) < 1e-9, ErrorCode::InvalidArgument, "archetype " + name + ": land-use mean must sum to 1");
}

std::vector<std::string> default_categories() { return {"Social", "Work", "Gaming", "Streaming"}; }

std::vector<std::string> default_landuse_categories() { return {"residential", "commercial", "industrial", "green"}; }

namespace {

struct Bump {
  double center, width, amplitude;
};

std::array<double, 24> diurnal(double floor, std::initializer_list<Bump> bumps) {
  std::array<double, 24> out{};
  for (int h = 0; h < 24; ++h) {
    double v = floor;
    for (const Bump& b : bumps) {
      double d = std::abs(h - b.center);
      d = std::min(d, 24.0 - d);
      v += b.amplitude * std::exp(-0.5 * (d / b.width) * (d / b.width));
    }
    out[static_cast<std::size_t>(h)] = v;
  }
  return out;
}

}  // namespace

std::vector<Archetype> default_archetypes() {
  // Category rows: Social, Work, Gaming, Streaming.
  std::vector<Archetype> a(4);
  a[0].name = "residential";
  a[0].profile = {diurnal(0.15, {{20, 3, 1.0}, {8, 1.5, 0.5}}), diurnal(0.05, {{9, 2, 0.25}}),
                  diurnal(0.10, {{21, 2.5, 0.6}}), diurnal(0.20, {{22, 3, 1.3}, {1, 2, 0.4}})};
  a[0].base_volume = 1.0e5;
  a[0].weekend_multiplier = 1.2;
  a[0].landuse_mean = {0.70, 0.10, 0.05, 0.15};
  a[0].density_median = 22000.0;

  a[1].name = "office";
  a[1].profile = {diurnal(0.05, {{12, 3.5, 0.8}}), diurnal(0.25, {{11, 3.5, 1.6}}), diurnal(0.02, {{13, 2, 0.15}}),
                  diurnal(0.03, {{13, 3, 0.3}})};
  a[1].base_volume = 1.2e5;
  a[1].weekend_multiplier = 0.4;
  a[1].landuse_mean = {0.10, 0.20, 0.60, 0.10};
  a[1].density_median = 3000.0;

  a[2].name = "nightlife";
  a[2].profile = {diurnal(0.20, {{1, 3, 1.2}}), diurnal(0.01, {{15, 3, 0.1}}), diurnal(0.15, {{23, 3, 0.9}}),
                  diurnal(0.10, {{2, 3, 0.6}})};
  a[2].base_volume = 6.0e4;
  a[2].weekend_multiplier = 1.5;
  a[2].landuse_mean = {0.20, 0.45, 0.05, 0.30};
  a[2].density_median = 9000.0;

  a[3].name = "commercial";
  a[3].profile = {diurnal(0.30, {{15, 4, 1.2}}), diurnal(0.10, {{12, 5, 0.5}}), diurnal(0.05, {{17, 3, 0.3}}),
                  diurnal(0.25, {{16, 4, 0.8}})};
  a[3].base_volume = 2.0e5;
  a[3].weekend_multiplier = 1.3;
  a[3].landuse_mean = {0.15, 0.60, 0.15, 0.10};
  a[3].density_median = 14000.0;
  return a;
}

void CitySpec::validate() const {
  require(n_rows > 0 && n_cols > 0 && cell_size > 0.0, ErrorCode::InvalidArgument, "city grid must be non-empty");
  require(n_regions >= 2, ErrorCode::InvalidArgument, "city needs at least 2 regions");
  require(n_regions <= n_rows * n_cols, ErrorCode::InvalidArgument, "more regions than grid cells");
  require(days >= 1, ErrorCode::InvalidArgument, "days must be >= 1");
  require(archetypes.size() >= 2, ErrorCode::InvalidArgument, "at least 2 archetypes required");
  require(static_cast<int>(archetypes.size()) <= n_regions, ErrorCode::InvalidArgument, "more archetypes than regions");
  require(noise_sigma >= 0.0 && density_sigma >= 0.0 && landuse_concentration > 0.0, ErrorCode::InvalidArgument,
          "noise parameters must be non-negative");
  require(((start_time + utc_offset) % 3600 + 3600) % 3600 == 0, ErrorCode::InvalidArgument,
          "start time must fall on a local hour boundary");
  for (const auto& a : archetypes) a.validate(categories.size(), landuse_categories.size());
}

int SyntheticCity::archetype_for(std::size_t region, TimeSlot slot) const {
  switch (slot) {
    case TimeSlot::Full: return region_archetype.at(region);
    case TimeSlot::Night: return slot_archetype.at(region)[0];
    case TimeSlot::Morning: return slot_archetype.at(region)[1];
    case TimeSlot::Afternoon: return slot_archetype.at(region)[2];
  }
  return region_archetype.at(region);
}

namespace {

// Marsaglia-Tsang on the engine-level normal/uniform draws.
double gamma_draw(Rng& rng, double shape) {
  if (shape < 1.0) return gamma_draw(rng, shape + 1.0) * std::pow(std::max(uniform_unit(rng), 1e-300), 1.0 / shape);
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  while (true) {
    double x, v;
    do {
      x = standard_normal(rng);
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform_unit(rng);
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(std::max(u, 1e-300)) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

double dist2(geom::Point a, geom::Point b) { return (a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y); }

std::size_t nearest(const std::vector<geom::Point>& pts, geom::Point p) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double d = dist2(pts[i], p);
    if (d < bd) {
      bd = d;
      best = i;
    }
  }
  return best;
}

std::vector<geom::Point> sample_sites(const geom::Box& box, int n, Rng& rng) {
  const double w = box.max_x - box.min_x, h = box.max_y - box.min_y;
  double min_dist = 0.7 * std::sqrt(w * h / n);
  std::vector<geom::Point> sites;
  int attempts = 0;
  while (static_cast<int>(sites.size()) < n) {
    const geom::Point p{box.min_x + w * uniform_unit(rng), box.min_y + h * uniform_unit(rng)};
    bool ok = true;
    for (const auto& s : sites) {
      if (dist2(s, p) < min_dist * min_dist) {
        ok = false;
        break;
      }
    }
    if (ok) sites.push_back(p);
    if (++attempts > 2000) {
      // Relax the spacing so dense requests still terminate.
      min_dist *= 0.9;
      attempts = 0;
    }
  }
  return sites;
}

/// One archetype per district centre; regions take the archetype of the
/// nearest centre to their site. Every archetype is guaranteed a region.
std::vector<int> district_layout(const std::vector<geom::Point>& sites, const geom::Box& box, int n_archetypes,
                                 Rng& rng) {
  const std::vector<geom::Point> centres = sample_sites(box, n_archetypes, rng);
  std::vector<int> label(sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) label[i] = static_cast<int>(nearest(centres, sites[i]));
  for (int a = 0; a < n_archetypes; ++a) {
    if (std::find(label.begin(), label.end(), a) != label.end()) continue;
    // Steal the site nearest to this centre from an archetype that has spares.
    std::vector<std::size_t> order(sites.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      return dist2(sites[x], centres[static_cast<std::size_t>(a)]) < dist2(sites[y], centres[static_cast<std::size_t>(a)]);
    });
    for (std::size_t i : order) {
      if (std::count(label.begin(), label.end(), label[i]) > 1) {
        label[i] = a;
        break;
      }
    }
  }
  return label;
}

int slot_index(int local_hour) { return local_hour < 8 ? 0 : (local_hour < 16 ? 1 : 2); }

}  // namespace

SyntheticCity generate_city(const CitySpec& spec) {
  spec.validate();
  SyntheticCity city;
  city.spec = spec;
  city.grid = MtcGrid{{0.0, 0.0}, spec.cell_size, spec.n_rows, spec.n_cols};
  const geom::Box box = city.grid.extent();
  const auto n_regions = static_cast<std::size_t>(spec.n_regions);
  const int n_arch = static_cast<int>(spec.archetypes.size());

  Rng site_rng = make_rng(spec.seed, "voronoi-sites");
  city.sites = sample_sites(box, spec.n_regions, site_rng);

  std::vector<Region> regions;
  for (std::size_t i = 0; i < n_regions; ++i) {
    geom::Ring cell{{box.min_x, box.min_y}, {box.max_x, box.min_y}, {box.max_x, box.max_y}, {box.min_x, box.max_y}};
    const auto& p = city.sites[i];
    for (std::size_t j = 0; j < n_regions && !cell.empty(); ++j) {
      if (j == i) continue;
      const auto& q = city.sites[j];
      cell = geom::clip_halfplane(cell, q.x - p.x, q.y - p.y, 0.5 * (q.x * q.x + q.y * q.y - p.x * p.x - p.y * p.y));
    }
    char id[32];
    std::snprintf(id, sizeof(id), "R%03zu", i);
    regions.push_back(Region{id, {geom::Polygon{std::move(cell), {}}}, 0.0});
  }
  city.tessellation = TargetTessellation(std::move(regions));

  city.cell_owner.resize(static_cast<std::size_t>(city.grid.cell_count()));
  std::vector<int> owned(n_regions, 0);
  for (int c = 0; c < city.grid.cell_count(); ++c) {
    const auto r = nearest(city.sites, city.grid.cell_center(c));
    city.cell_owner[static_cast<std::size_t>(c)] = static_cast<int>(r);
    ++owned[r];
  }
  for (std::size_t r = 0; r < n_regions; ++r) {
    require(owned[r] > 0, ErrorCode::InvalidArgument,
            "region " + city.tessellation.at(r).id + " owns zero cells; enlarge the grid or reduce regions");
  }

  Rng layout_rng = make_rng(spec.seed, "archetype-layout");
  city.region_archetype = district_layout(city.sites, box, n_arch, layout_rng);
  city.slot_archetype.resize(n_regions);
  if (spec.slot_dependent) {
    Rng morning_rng = make_rng(spec.seed, "archetype-layout-morning");
    Rng afternoon_rng = make_rng(spec.seed, "archetype-layout-afternoon");
    const auto morning = district_layout(city.sites, box, n_arch, morning_rng);
    const auto afternoon = district_layout(city.sites, box, n_arch, afternoon_rng);
    for (std::size_t r = 0; r < n_regions; ++r) city.slot_archetype[r] = {city.region_archetype[r], morning[r], afternoon[r]};
  } else {
    for (std::size_t r = 0; r < n_regions; ++r) {
      const int a = city.region_archetype[r];
      city.slot_archetype[r] = {a, a, a};
    }
  }

  // Labels: Dirichlet around the archetype mean, lognormal density.
  Rng label_rng = make_rng(spec.seed, "labels");
  for (std::size_t r = 0; r < n_regions; ++r) {
    const Archetype& a = spec.archetypes[static_cast<std::size_t>(city.region_archetype[r])];
    std::vector<double> dist;
    double total = 0.0;
    for (double m : a.landuse_mean) {
      dist.push_back(gamma_draw(label_rng, spec.landuse_concentration * m));
      total += dist.back();
    }
    for (double& d : dist) d /= total;
    city.landuse.push_back(std::move(dist));
    city.density.push_back(a.density_median * std::exp(spec.density_sigma * standard_normal(label_rng)));
  }

  // Traffic: base * profile[category][hour] * weekend * lognormal noise.
  const std::size_t hours = static_cast<std::size_t>(spec.days) * 24;
  const std::size_t n_cat = spec.categories.size();
  for (int c = 0; c < city.grid.cell_count(); ++c) {
    Rng noise = Rng(derive_seed(spec.seed, "cell-noise", static_cast<std::uint64_t>(c)));
    const auto owner = static_cast<std::size_t>(city.cell_owner[static_cast<std::size_t>(c)]);
    std::vector<std::vector<double>> values(n_cat, std::vector<double>(hours));
    for (std::size_t t = 0; t < hours; ++t) {
      const std::int64_t ts = spec.start_time + static_cast<std::int64_t>(t) * 3600;
      const std::int64_t local = ts + spec.utc_offset;
      const int hour = static_cast<int>(((local % 86400) + 86400) % 86400 / 3600);
      const bool weekend = io::weekday(ts, spec.utc_offset) >= 5;
      const Archetype& a =
          spec.archetypes[static_cast<std::size_t>(city.slot_archetype[owner][static_cast<std::size_t>(slot_index(hour))])];
      for (std::size_t k = 0; k < n_cat; ++k) {
        double v = a.base_volume * a.profile[k][static_cast<std::size_t>(hour)];
        if (weekend) v *= a.weekend_multiplier;
        if (spec.noise_sigma > 0.0) v *= std::exp(spec.noise_sigma * standard_normal(noise));
        values[k][t] = v;
      }
    }
    for (std::size_t k = 0; k < n_cat; ++k) {
      city.traffic.push_back({c, spec.categories[k], spec.start_time, 3600, std::move(values[k])});
    }
  }

  // One synthetic service per macro category.
  std::unordered_map<std::string, std::string> mapping;
  for (const auto& cat : spec.categories) mapping[cat] = cat;
  city.category_map = CategoryMap(spec.categories, std::move(mapping));
  city.metadata = TrafficMetadata{spec.start_time, 3600, static_cast<std::int64_t>(hours), spec.utc_offset,
                                  spec.categories};
  return city;
}

std::map<std::string, std::string> export_city(const SyntheticCity& city, const std::filesystem::path& dir) {
  std::map<std::string, std::string> files;
  const auto put = [&](const std::string& name, const std::string& content) {
    io::write_file_atomic(dir / name, content);
    files[name] = io::sha256_hex(content);
  };

  put("traffic.csv", traffic_to_csv(city.traffic));
  put("traffic_meta.json", metadata_to_json(city.metadata));
  put("grid.json", grid_to_json(city.grid));
  put("regions.geojson", to_geojson(city.tessellation));
  put("categories.txt", city.category_map.serialize());

  const auto& tess = city.tessellation;
  {
    std::string s = "region_id";
    for (std::size_t k = 0; k < city.spec.landuse_categories.size(); ++k) s += ",cat_" + std::to_string(k + 1);
    s += '\n';
    for (std::size_t r = 0; r < tess.size(); ++r) {
      s += tess.at(r).id;
      for (double p : city.landuse[r]) s += ',' + io::format_double(p);
      s += '\n';
    }
    put("landuse_truth.csv", s);
  }
  {
    std::string s = "region_id,people_per_km2\n";
    for (std::size_t r = 0; r < tess.size(); ++r) s += tess.at(r).id + ',' + io::format_double(city.density[r]) + '\n';
    put("density_truth.csv", s);
  }
  {
    std::string s = "region_id,archetype,night,morning,afternoon\n";
    for (std::size_t r = 0; r < tess.size(); ++r) {
      s += tess.at(r).id + ',' + std::to_string(city.region_archetype[r]);
      for (int a : city.slot_archetype[r]) s += ',' + std::to_string(a);
      s += '\n';
    }
    put("archetype_truth.csv", s);
  }

  nlohmann::json spec = {{"n_rows", city.spec.n_rows},
                         {"n_cols", city.spec.n_cols},
                         {"cell_size", city.spec.cell_size},
                         {"n_regions", city.spec.n_regions},
                         {"days", city.spec.days},
                         {"noise_sigma", city.spec.noise_sigma},
                         {"slot_dependent", city.spec.slot_dependent},
                         {"seed", city.spec.seed},
                         {"landuse_categories", city.spec.landuse_categories}};
  nlohmann::json archetypes = nlohmann::json::array();
  for (const auto& a : city.spec.archetypes) archetypes.push_back(a.name);
  spec["archetypes"] = archetypes;
  nlohmann::json manifest = {{"generator", "synth_city"}, {"spec", spec}, {"files", files}};
  io::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  return files;
}

namespace {

std::vector<std::vector<std::string>> read_csv_rows(const std::filesystem::path& path, std::vector<std::string>& header) {
  std::istringstream in(io::read_file(path));
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCode::Data, path.string() + ": empty file");
  header.clear();
  for (auto f : io::split(io::trim(line), ',')) header.emplace_back(io::trim(f));
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (io::trim(line).empty()) continue;
    std::vector<std::string> row;
    for (auto f : io::split(io::trim(line), ',')) row.emplace_back(io::trim(f));
    require(row.size() == header.size(), ErrorCode::Data, path.string() + ": row width differs from header");
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

LandUseTable read_landuse_truth(const std::filesystem::path& path) {
  std::vector<std::string> header;
  const auto rows = read_csv_rows(path, header);
  require(header.size() >= 3 && header[0] == "region_id", ErrorCode::Data, path.string() + ": bad land-use header");
  LandUseTable t;
  for (const auto& row : rows) {
    t.region_ids.push_back(row[0]);
    std::vector<double> d;
    double s = 0.0;
    for (std::size_t i = 1; i < row.size(); ++i) {
      d.push_back(io::parse_double(row[i]));
      require(d.back() >= 0.0, ErrorCode::Data, path.string() + ": negative land-use share for " + row[0]);
      s += d.back();
    }
    require(std::abs(s - 1.0) < 1e-9, ErrorCode::Data, path.string() + ": land-use row for " + row[0] + " does not sum to 1");
    t.distributions.push_back(std::move(d));
  }
  return t;
}

DensityTable read_density_truth(const std::filesystem::path& path) {
  std::vector<std::string> header;
  const auto rows = read_csv_rows(path, header);
  require(header.size() == 2 && header[0] == "region_id", ErrorCode::Data, path.string() + ": bad density header");
  DensityTable t;
  for (const auto& row : rows) {
    t.region_ids.push_back(row[0]);
    t.density.push_back(io::parse_double(row[1]));
    require(t.density.back() >= 0.0, ErrorCode::Data, path.string() + ": negative density for " + row[0]);
  }
  return t;
}

ArchetypeTable read_archetype_truth(const std::filesystem::path& path) {
  std::vector<std::string> header;
  const auto rows = read_csv_rows(path, header);
  require(header.size() == 5 && header[0] == "region_id", ErrorCode::Data, path.string() + ": bad archetype header");
  ArchetypeTable t;
  for (const auto& row : rows) {
    t.region_ids.push_back(row[0]);
    std::array<int, 4> l{};
    for (std::size_t i = 0; i < 4; ++i) l[i] = static_cast<int>(io::parse_int(row[i + 1]));
    t.labels.push_back(l);
  }
  return t;
}

}  // namespace mtcr
