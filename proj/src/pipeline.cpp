#include "mtcr/pipeline.hpp"

#include "mtcr/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <set>
#include <sstream>
#include <unordered_map>

namespace mtcr {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

const std::vector<std::string> kInputNames = {"traffic",  "traffic_meta", "grid",    "regions",
                                              "categories", "landuse",    "density", "archetypes"};
const std::map<std::string, std::string> kInputFiles = {
    {"traffic", "traffic.csv"},       {"traffic_meta", "traffic_meta.json"},
    {"grid", "grid.json"},            {"regions", "regions.geojson"},
    {"categories", "categories.txt"}, {"landuse", "landuse_truth.csv"},
    {"density", "density_truth.csv"}, {"archetypes", "archetype_truth.csv"}};

std::vector<int> parse_int_list(const std::string& value) {
  std::vector<int> out;
  for (auto f : io::split(value, ',')) out.push_back(static_cast<int>(io::parse_int(io::trim(f))));
  return out;
}

bool parse_bool(const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  fail(ErrorCode::Config, "expected a boolean, got '" + value + "'");
}

std::uint64_t parse_u64(const std::string& value) {
  const auto v = io::parse_int(value);
  require(v >= 0, ErrorCode::Config, "expected a non-negative integer, got '" + value + "'");
  return static_cast<std::uint64_t>(v);
}

// Component seeds are derived from the global seed so that a change in one
// stage never perturbs the random streams of another.
PipelineConfig with_derived_seeds(PipelineConfig c) {
  c.synth.seed = derive_seed(c.seed, "synth");
  c.ae.seed = derive_seed(c.seed, "ae");
  c.agg.seed = derive_seed(c.seed, "agg");
  c.landuse.seed = derive_seed(c.seed, "eval-landuse");
  c.density.seed = derive_seed(c.seed, "eval-density");
  c.ami.seed = derive_seed(c.seed, "ami");
  return c;
}

ordered_json synth_json(const CitySpec& s) {
  return {{"rows", s.n_rows},
          {"cols", s.n_cols},
          {"cell_size", s.cell_size},
          {"regions", s.n_regions},
          {"days", s.days},
          {"noise", s.noise_sigma},
          {"landuse_concentration", s.landuse_concentration},
          {"density_sigma", s.density_sigma},
          {"slot_dependent", s.slot_dependent},
          {"start_time", s.start_time},
          {"utc_offset", s.utc_offset},
          {"seed", s.seed}};
}

}  // namespace

// ---- configuration ---------------------------------------------------------

PipelineConfig PipelineConfig::parse(const std::string& text, const fs::path& base_dir) {
  PipelineConfig c;
  c.base_dir_ = base_dir;
  c.output_dir = base_dir / "run";
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = io::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string_view::npos, ErrorCode::Config,
            "config line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key(io::trim(line.substr(0, eq)));
    const std::string value(io::trim(line.substr(eq + 1)));
    try {
      c.set(key, value, base_dir);
    } catch (const Error& e) {
      fail(ErrorCode::Config, "config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  require(fs::exists(path), ErrorCode::Config, "config file not found: " + path.string());
  return parse(io::read_file(path), fs::absolute(path).parent_path());
}

void PipelineConfig::set(const std::string& key, const std::string& value, const fs::path& base_dir) {
  const fs::path base = base_dir.empty() ? base_dir_ : base_dir;
  auto path_of = [&](const std::string& v) { return fs::path(v).is_absolute() ? fs::path(v) : base / v; };
  try {
    if (key == "seed") seed = parse_u64(value);
    else if (key == "output_dir") output_dir = path_of(value);
    else if (key == "data_dir") data_dir = path_of(value);
    else if (key.rfind("paths.", 0) == 0) {
      const std::string name = key.substr(6);
      require(kInputFiles.count(name) != 0, ErrorCode::Config, "unknown input path '" + name + "'");
      paths[name] = path_of(value);
    }
    else if (key == "synth.rows") synth.n_rows = static_cast<int>(io::parse_int(value));
    else if (key == "synth.cols") synth.n_cols = static_cast<int>(io::parse_int(value));
    else if (key == "synth.cell_size") synth.cell_size = io::parse_double(value);
    else if (key == "synth.regions") synth.n_regions = static_cast<int>(io::parse_int(value));
    else if (key == "synth.days") synth.days = static_cast<int>(io::parse_int(value));
    else if (key == "synth.noise") synth.noise_sigma = io::parse_double(value);
    else if (key == "synth.landuse_concentration") synth.landuse_concentration = io::parse_double(value);
    else if (key == "synth.density_sigma") synth.density_sigma = io::parse_double(value);
    else if (key == "synth.slot_dependent") synth.slot_dependent = parse_bool(value);
    else if (key == "synth.start_time") synth.start_time = io::parse_iso8601(value);
    else if (key == "synth.utc_offset") synth.utc_offset = io::parse_int(value);
    else if (key == "preprocess.target_step") target_step = io::parse_int(value);
    else if (key == "ae.channels") ae.channels = parse_int_list(value);
    else if (key == "ae.kernel_size") ae.kernel_size = static_cast<int>(io::parse_int(value));
    else if (key == "ae.dilations") ae.dilations = parse_int_list(value);
    else if (key == "ae.pool") ae.pool = static_cast<int>(io::parse_int(value));
    else if (key == "ae.bottleneck") ae.bottleneck = agg.input_dim = static_cast<int>(io::parse_int(value));  // aggregator reads the codes
    else if (key == "ae.activation") ae.activation = parse_activation(value);
    else if (key == "ae.learning_rate") ae.learning_rate = io::parse_double(value);
    else if (key == "ae.epochs") ae.epochs = static_cast<int>(io::parse_int(value));
    else if (key == "ae.batch_size") ae.batch_size = static_cast<int>(io::parse_int(value));
    else if (key == "agg.kind") agg.kind = parse_aggregator_kind(value);
    else if (key == "agg.output_dim") agg.output_dim = static_cast<int>(io::parse_int(value));
    else if (key == "agg.ff_width") agg.ff_width = static_cast<int>(io::parse_int(value));
    else if (key == "agg.layers") agg.layers = static_cast<int>(io::parse_int(value));
    else if (key == "agg.cap") agg.cap = static_cast<int>(io::parse_int(value));
    else if (key == "agg.margin") agg.margin = io::parse_double(value);
    else if (key == "agg.hops") agg.hops = static_cast<int>(io::parse_int(value));
    else if (key == "agg.learning_rate") agg.learning_rate = io::parse_double(value);
    else if (key == "agg.epochs") agg.epochs = static_cast<int>(io::parse_int(value));
    else if (key == "agg.batch_size") agg.batch_size = static_cast<int>(io::parse_int(value));
    else if (key == "slots") {
      slots.clear();
      for (auto f : io::split(value, ',')) slots.push_back(parse_time_slot(io::trim(f)));
    }
    else if (key == "eval.landuse.repeats") landuse.repeats = static_cast<int>(io::parse_int(value));
    else if (key == "eval.landuse.train") landuse.train_fraction = io::parse_double(value);
    else if (key == "eval.landuse.val") landuse.val_fraction = io::parse_double(value);
    else if (key == "eval.landuse.hidden") landuse.hidden = static_cast<int>(io::parse_int(value));
    else if (key == "eval.landuse.max_epochs") landuse.max_epochs = static_cast<int>(io::parse_int(value));
    else if (key == "eval.landuse.patience") landuse.patience = static_cast<int>(io::parse_int(value));
    else if (key == "eval.landuse.learning_rate") landuse.learning_rate = io::parse_double(value);
    else if (key == "eval.landuse.batch_size") landuse.batch_size = static_cast<int>(io::parse_int(value));
    else if (key == "eval.density.repeats") density.repeats = static_cast<int>(io::parse_int(value));
    else if (key == "eval.density.train") density.train_fraction = io::parse_double(value);
    else if (key == "eval.density.trees") density.trees = static_cast<int>(io::parse_int(value));
    else if (key == "eval.cluster.k") cluster_k = parse_int_list(value);
    else if (key == "eval.ami.mode") ami.mode = parse_ami_mode(value);
    else if (key == "eval.ami.n_perm") ami.n_perm = static_cast<int>(io::parse_int(value));
    else if (key == "eval.choose_k.min") choose_k_min = static_cast<int>(io::parse_int(value));
    else if (key == "eval.choose_k.max") choose_k_max = static_cast<int>(io::parse_int(value));
    else fail(ErrorCode::Config, "unknown config key '" + key + "'");
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Config) throw;
    fail(ErrorCode::Config, key + ": " + e.what());
  }
}

void PipelineConfig::validate() const {
  auto check = [](auto&& fn, const std::string& what) {
    try {
      fn();
    } catch (const Error& e) {
      fail(ErrorCode::Config, what + ": " + e.what());
    }
  };
  check([&] { synth.validate(); }, "synth");
  require(target_step >= 1, ErrorCode::Config, "preprocess.target_step must be >= 1");
  check([&] {
    TcnConfig probe = ae;
    if (probe.length == 0) probe.length = std::max(probe.receptive_field(), 1);
    probe.validate();
  }, "ae");
  check([&] { agg.validate(); }, "agg");
  require(agg.input_dim == ae.bottleneck, ErrorCode::Config, "agg input width must equal ae.bottleneck");
  require(!slots.empty(), ErrorCode::Config, "slots must list at least one time slot");
  require(std::set<TimeSlot>(slots.begin(), slots.end()).size() == slots.size(), ErrorCode::Config,
          "slots contains duplicates");
  check([&] { landuse.validate(); }, "eval.landuse");
  check([&] { density.validate(); }, "eval.density");
  require(!cluster_k.empty(), ErrorCode::Config, "eval.cluster.k must list at least one k");
  for (int k : cluster_k) require(k >= 1, ErrorCode::Config, "eval.cluster.k entries must be >= 1");
  require(ami.n_perm >= 1, ErrorCode::Config, "eval.ami.n_perm must be >= 1");
  require(choose_k_min >= 2 && choose_k_min <= choose_k_max, ErrorCode::Config,
          "eval.choose_k range must satisfy 2 <= min <= max");
}

fs::path PipelineConfig::input(const std::string& name) const {
  const auto file = kInputFiles.find(name);
  require(file != kInputFiles.end(), ErrorCode::InvalidArgument, "unknown input " + name);
  if (const auto it = paths.find(name); it != paths.end()) return it->second;
  return (data_dir.empty() ? output_dir / "data" : data_dir) / file->second;
}

std::string PipelineConfig::canonical_json() const {
  const PipelineConfig c = with_derived_seeds(*this);
  ordered_json slot_names = ordered_json::array();
  for (auto s : c.slots) slot_names.push_back(std::string(to_string(s)));
  ordered_json j = {{"seed", c.seed},
                    {"synth", synth_json(c.synth)},
                    {"target_step", c.target_step},
                    {"ae", ordered_json::parse(c.ae.to_json())},
                    {"agg", ordered_json::parse(c.agg.to_json())},
                    {"slots", slot_names},
                    {"landuse", ordered_json::parse(c.landuse.to_json())},
                    {"density", ordered_json::parse(c.density.to_json())},
                    {"cluster_k", c.cluster_k},
                    {"ami", {{"mode", to_string(c.ami.mode)}, {"n_perm", c.ami.n_perm}, {"seed", c.ami.seed}}},
                    {"choose_k", {{"min", c.choose_k_min}, {"max", c.choose_k_max}}}};
  return j.dump();
}

// ---- stages ----------------------------------------------------------------

const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> stages = {"synth",        "preprocess",   "train-ae", "embed-cells",
                                                  "train-agg",    "embed-regions", "eval-landuse", "eval-density",
                                                  "cluster",      "choose-k",     "ami",      "report"};
  return stages;
}

bool is_slot_stage(const std::string& stage) {
  static const std::set<std::string> slot_stages = {"train-ae",     "embed-cells",  "train-agg", "embed-regions",
                                                    "eval-landuse", "eval-density", "cluster",   "choose-k"};
  return slot_stages.count(stage) != 0;
}

namespace {

struct Input {
  fs::path path;
  std::string producer;  // stage that creates it
};

// Outputs are staged in memory and committed together once the stage
// has finished, so a failure never leaves a partial set behind.
using Outputs = std::vector<std::pair<fs::path, std::string>>;

void log_line(const std::string& stage, const std::string& message) {
  std::fprintf(stderr, "[%s] %s\n", stage.c_str(), message.c_str());
}

std::vector<MultivariateSeries> slot_series(const std::vector<MultivariateSeries>& cells, TimeSlot slot) {
  std::vector<MultivariateSeries> out;
  out.reserve(cells.size());
  for (const auto& mv : cells) out.push_back(slice_time_slot(mv, slot));
  return out;
}

// Regions that kept at least one cell in preprocessing, with their polygons.
TargetTessellation used_tessellation(const fs::path& regions_path, const IntersectionMap& map) {
  const auto full = read_geojson_regions(regions_path);
  std::vector<Region> kept;
  for (const auto& id : map.region_ids) kept.push_back(full.at(full.index_of(id)));
  return TargetTessellation(std::move(kept));
}

std::vector<RegionFeatureMatrix> feature_matrices(const IntersectionMap& map,
                                                  const std::vector<MtcEmbedding>& cells,
                                                  const AggregatorConfig& agg) {
  EmbeddingIndex index;
  for (const auto& e : cells) index[e.cell_id] = e.z;
  std::vector<RegionFeatureMatrix> out;
  for (std::size_t r = 0; r < map.region_ids.size(); ++r) {
    out.push_back(build_feature_matrix(map.region_ids[r], map.cells[r], index, agg.cap, derive_seed(agg.seed, "features")));
  }
  return out;
}

std::vector<double> region_areas(const TargetTessellation& tess, const std::vector<std::string>& ids) {
  std::vector<double> w;
  for (const auto& id : ids) w.push_back(tess.at(tess.index_of(id)).area);
  return w;
}

}  // namespace

Pipeline::Pipeline(PipelineConfig config) : config_(with_derived_seeds(std::move(config))) { config_.validate(); }

fs::path Pipeline::slot_dir(TimeSlot slot) const {
  return config_.output_dir / "slots" / std::string(to_string(slot));
}

std::vector<StageOutcome> Pipeline::run(const std::string& stage, std::optional<TimeSlot> slot) {
  std::vector<StageOutcome> out;
  if (stage == "all") {
    for (const auto& s : pipeline_stages()) {
      auto part = run(s, slot);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
  const auto& stages = pipeline_stages();
  require(std::find(stages.begin(), stages.end(), stage) != stages.end(), ErrorCode::InvalidArgument,
          "unknown stage '" + stage + "'");
  if (!is_slot_stage(stage)) {
    out.push_back(run_one(stage, slot));
    return out;
  }
  if (slot) {
    out.push_back(run_one(stage, slot));
  } else {
    for (auto s : config_.slots) out.push_back(run_one(stage, s));
  }
  return out;
}

StageOutcome Pipeline::run_one(const std::string& stage, std::optional<TimeSlot> slot) {
  const PipelineConfig& c = config_;
  const fs::path pre = c.output_dir / "preprocess";
  const fs::path sd = slot ? slot_dir(*slot) : fs::path();
  const std::string slot_name = slot ? std::string(to_string(*slot)) : "";
  const std::vector<TimeSlot> run_slots = slot ? std::vector<TimeSlot>{*slot} : c.slots;
  const std::string key = is_slot_stage(stage) ? stage + "@" + slot_name : stage;

  std::vector<Input> inputs;
  ordered_json settings;
  const auto canonical = ordered_json::parse(c.canonical_json());
  if (stage == "synth") {
    settings = canonical["synth"];
  } else if (stage == "preprocess") {
    inputs = {{c.input("traffic"), "synth"}, {c.input("traffic_meta"), "synth"}, {c.input("categories"), "synth"},
              {c.input("grid"), "synth"},    {c.input("regions"), "synth"}};
    settings = {{"target_step", c.target_step}};
  } else if (stage == "train-ae") {
    inputs = {{pre / "series.csv", "preprocess"}};
    settings = {{"ae", canonical["ae"]}, {"slot", slot_name}};
  } else if (stage == "embed-cells") {
    inputs = {{sd / "ae.ckpt", "train-ae"}, {pre / "series.csv", "preprocess"}};
    settings = {{"slot", slot_name}};
  } else if (stage == "train-agg") {
    inputs = {{sd / "cell_embeddings.csv", "embed-cells"},
              {pre / "intersection.csv", "preprocess"},
              {c.input("regions"), "synth"}};
    settings = {{"agg", canonical["agg"]}, {"slot", slot_name}};
  } else if (stage == "embed-regions") {
    inputs = {{sd / "agg.ckpt", "train-agg"},
              {sd / "cell_embeddings.csv", "embed-cells"},
              {pre / "intersection.csv", "preprocess"}};
    settings = {{"slot", slot_name}};
  } else if (stage == "eval-landuse") {
    inputs = {{sd / "region_embeddings.csv", "embed-regions"}, {c.input("landuse"), "synth"}};
    settings = {{"landuse", canonical["landuse"]}};
  } else if (stage == "eval-density") {
    inputs = {{sd / "region_embeddings.csv", "embed-regions"}, {c.input("density"), "synth"}};
    settings = {{"density", canonical["density"]}};
  } else if (stage == "cluster") {
    inputs = {{sd / "region_embeddings.csv", "embed-regions"}, {c.input("regions"), "synth"}};
    settings = {{"k", c.cluster_k}};
  } else if (stage == "choose-k") {
    inputs = {{sd / "region_embeddings.csv", "embed-regions"}};
    settings = canonical["choose_k"];
  } else if (stage == "ami") {
    for (auto s : run_slots) {
      for (int k : c.cluster_k) {
        inputs.push_back({slot_dir(s) / ("clusters_k" + std::to_string(k) + ".csv"), "cluster"});
      }
    }
    inputs.push_back({c.input("regions"), "synth"});
    inputs.push_back({c.input("landuse"), "synth"});
    if (fs::exists(c.input("archetypes"))) inputs.push_back({c.input("archetypes"), "synth"});
    ordered_json names = ordered_json::array();
    for (auto s : run_slots) names.push_back(std::string(to_string(s)));
    settings = {{"ami", canonical["ami"]}, {"k", c.cluster_k}, {"slots", names}};
  } else if (stage == "report") {
    for (auto s : run_slots) {
      inputs.push_back({slot_dir(s) / "eval_landuse.json", "eval-landuse"});
      inputs.push_back({slot_dir(s) / "eval_density.json", "eval-density"});
      inputs.push_back({slot_dir(s) / "choose_k.json", "choose-k"});
    }
    inputs.push_back({c.output_dir / "ami.json", "ami"});
    ordered_json names = ordered_json::array();
    for (auto s : run_slots) names.push_back(std::string(to_string(s)));
    settings = {{"slots", names}};
  }

  for (const auto& in : inputs) {
    require(fs::exists(in.path), ErrorCode::Dependency,
            "stage " + stage + " needs " + in.path.string() + "; run stage " + in.producer + " first");
  }

  auto rel = [&](const fs::path& p) { return fs::relative(p, c.output_dir).generic_string(); };
  ordered_json input_hashes = ordered_json::object();
  std::string fp_text = key + "\n" + settings.dump() + "\n";
  for (const auto& in : inputs) {
    const auto h = io::sha256_file(in.path);
    input_hashes[rel(in.path)] = h;
    fp_text += rel(in.path) + "=" + h + "\n";
  }
  const std::string fingerprint = io::sha256_hex(fp_text);

  nlohmann::json manifest = nlohmann::json::object();
  if (fs::exists(manifest_path())) manifest = nlohmann::json::parse(io::read_file(manifest_path()));
  if (manifest.contains("stages") && manifest["stages"].contains(key)) {
    const auto& entry = manifest["stages"][key];
    bool fresh = entry.value("fingerprint", "") == fingerprint;
    if (fresh) {
      for (const auto& [name, hash] : entry.at("outputs").items()) {
        const fs::path p = c.output_dir / name;
        if (!fs::exists(p) || io::sha256_file(p) != hash.get<std::string>()) {
          fresh = false;
          break;
        }
      }
    }
    if (fresh) {
      StageOutcome skip{stage, slot, true, {}};
      for (const auto& [name, hash] : entry.at("outputs").items()) skip.outputs.push_back(c.output_dir / name);
      log_line(key, "up to date");
      return skip;
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  Outputs outputs;

  if (stage == "synth") {
    const auto city = generate_city(c.synth);
    // Export into a scratch directory, then stage the files.
    const fs::path scratch = c.output_dir / ".synth-tmp";
    fs::remove_all(scratch);
    export_city(city, scratch);
    for (const auto& name : kInputNames) {
      const fs::path src = scratch / kInputFiles.at(name);
      outputs.push_back({c.input(name), io::read_file(src)});
    }
    fs::remove_all(scratch);
  } else if (stage == "preprocess") {
    const auto table = read_traffic(c.input("traffic"), c.input("traffic_meta"));
    const auto map = CategoryMap::read(c.input("categories"));
    AggregationReport agg_report;
    const auto cells = build_multivariate(table, map, c.target_step, &agg_report);
    const auto grid = grid_from_json(io::read_file(c.input("grid")));
    const auto tess = read_geojson_regions(c.input("regions"));
    auto inter = intersect_grid(grid, tess);
    std::set<std::int64_t> with_traffic;
    for (const auto& mv : cells) with_traffic.insert(mv.cell_id);
    IntersectionMap used;
    std::vector<std::string> dropped;
    std::size_t dropped_cells = 0;
    for (std::size_t r = 0; r < inter.region_ids.size(); ++r) {
      std::vector<int> kept;
      for (int cell : inter.cells[r]) {
        if (with_traffic.count(cell)) kept.push_back(cell);
        else ++dropped_cells;
      }
      if (kept.empty()) {
        dropped.push_back(inter.region_ids[r]);
        continue;
      }
      used.region_ids.push_back(inter.region_ids[r]);
      used.cells.push_back(std::move(kept));
    }
    require(used.region_ids.size() >= 3, ErrorCode::Data, "fewer than 3 regions intersect cells with traffic");
    const auto used_tess = used_tessellation(c.input("regions"), used);
    const auto adjacency = build_adjacency(used_tess);
    ordered_json info = {{"cells_with_traffic", cells.size()},
                         {"regions_total", tess.size()},
                         {"regions_used", used.region_ids.size()},
                         {"regions_dropped", dropped},
                         {"cells_without_traffic", dropped_cells},
                         {"unmapped_services", agg_report.unmapped_services},
                         {"intersection_warnings", inter.warnings},
                         {"series_length", cells.empty() ? 0 : cells.front().length()},
                         {"target_step", c.target_step}};
    outputs.push_back({pre / "series.csv", multivariate_to_csv(cells)});
    outputs.push_back({pre / "intersection.csv", intersection_to_csv(used)});
    outputs.push_back({pre / "adjacency.csv", adjacency_to_csv(adjacency)});
    outputs.push_back({pre / "preprocess.json", info.dump(2) + "\n"});
  } else if (stage == "train-ae") {
    const auto cells = slot_series(multivariate_from_csv(io::read_file(pre / "series.csv")), *slot);
    const auto stats = compute_normalization_stats(cells);
    std::vector<MultivariateSeries> normed;
    for (const auto& mv : cells) normed.push_back(normalize(mv, stats));
    auto model = train_autoencoder(c.ae, normed, [&](int epoch, double loss) {
      if (epoch == 1 || epoch % 10 == 0) log_line(key, "epoch " + std::to_string(epoch) + " loss " + io::format_double(loss));
    });
    model.normalization = stats;
    ordered_json log = {{"slot", slot_name}, {"cells", cells.size()}, {"length", model.config().length},
                        {"epoch_loss", model.training_log}};
    outputs.push_back({sd / "ae.ckpt", nn::serialize_checkpoint(model.to_checkpoint())});
    outputs.push_back({sd / "ae_log.json", log.dump(2) + "\n"});
  } else if (stage == "embed-cells") {
    const auto model = TcnAutoencoder::from_checkpoint(nn::load_checkpoint(sd / "ae.ckpt"));
    require(model.normalization.has_value(), ErrorCode::Data, "autoencoder checkpoint lacks normalization stats");
    const auto cells = slot_series(multivariate_from_csv(io::read_file(pre / "series.csv")), *slot);
    std::vector<MultivariateSeries> normed;
    for (const auto& mv : cells) normed.push_back(normalize(mv, *model.normalization));
    outputs.push_back({sd / "cell_embeddings.csv", embeddings_to_csv(embed_all(model, normed))});
  } else if (stage == "train-agg") {
    const auto inter = intersection_from_csv(io::read_file(pre / "intersection.csv"));
    const auto cells = embeddings_from_csv(io::read_file(sd / "cell_embeddings.csv"));
    const auto features = feature_matrices(inter, cells, c.agg);
    const auto adjacency = build_adjacency(used_tessellation(c.input("regions"), inter));
    const auto model = train_aggregator(c.agg, features, adjacency, [&](int epoch, double loss, double active) {
      if (epoch == 1 || epoch % 10 == 0) {
        log_line(key, "epoch " + std::to_string(epoch) + " loss " + io::format_double(loss) + " active " +
                          io::format_double(active));
      }
    });
    ordered_json log = {{"slot", slot_name},
                        {"kind", to_string(c.agg.kind)},
                        {"epoch_loss", model.loss_log},
                        {"active_fraction", model.active_log}};
    outputs.push_back({sd / "agg.ckpt", nn::serialize_checkpoint(model.to_checkpoint())});
    outputs.push_back({sd / "agg_log.json", log.dump(2) + "\n"});
  } else if (stage == "embed-regions") {
    const auto model = AggregatorModel::from_checkpoint(nn::load_checkpoint(sd / "agg.ckpt"));
    const auto inter = intersection_from_csv(io::read_file(pre / "intersection.csv"));
    const auto cells = embeddings_from_csv(io::read_file(sd / "cell_embeddings.csv"));
    const auto features = feature_matrices(inter, cells, model.config());
    std::size_t subsampled = 0;
    for (const auto& fm : features) subsampled += fm.subsampled ? 1 : 0;
    const auto embeddings = embed_regions(model, features);
    ordered_json prov = {{"kind", to_string(model.config().kind)},
                         {"slot", slot_name},
                         {"hops", model.config().hops},
                         {"margin", model.config().margin},
                         {"seed", c.seed},
                         {"aggregator_seed", model.config().seed},
                         {"regions", embeddings.size()},
                         {"subsampled_regions", subsampled},
                         {"ae_checkpoint_sha256", io::sha256_file(sd / "ae.ckpt")},
                         {"agg_checkpoint_sha256", io::sha256_file(sd / "agg.ckpt")}};
    outputs.push_back({sd / "region_embeddings.csv", region_embeddings_to_csv(embeddings)});
    outputs.push_back({sd / "region_embeddings.json", prov.dump(2) + "\n"});
  } else if (stage == "eval-landuse") {
    const auto emb = region_embeddings_from_csv(io::read_file(sd / "region_embeddings.csv"));
    auto report = landuse_eval(emb, read_landuse_truth(c.input("landuse")), c.landuse);
    report.task = "landuse/" + slot_name;
    outputs.push_back({sd / "eval_landuse.json", report.to_json()});
    outputs.push_back({sd / "eval_landuse.txt", report.to_text()});
  } else if (stage == "eval-density") {
    const auto emb = region_embeddings_from_csv(io::read_file(sd / "region_embeddings.csv"));
    auto report = density_eval(emb, read_density_truth(c.input("density")), c.density);
    report.task = "density/" + slot_name;
    outputs.push_back({sd / "eval_density.json", report.to_json()});
    outputs.push_back({sd / "eval_density.txt", report.to_text()});
  } else if (stage == "cluster") {
    const auto emb = region_embeddings_from_csv(io::read_file(sd / "region_embeddings.csv"));
    const auto tess = read_geojson_regions(c.input("regions"));
    std::vector<std::string> ids;
    for (const auto& e : emb) ids.push_back(e.region_id);
    const auto weights = region_areas(tess, ids);
    const auto merges = ward_linkage(embedding_matrix(emb));
    for (int k : c.cluster_k) {
      require(k <= static_cast<int>(emb.size()), ErrorCode::Config,
              "eval.cluster.k=" + std::to_string(k) + " exceeds the " + std::to_string(emb.size()) + " regions");
      WeightedClustering wc;
      wc.region_ids = ids;
      wc.labels = cut_linkage(merges, static_cast<int>(emb.size()), k);
      wc.weights = weights;
      wc.k = k;
      const std::string stem = "clusters_k" + std::to_string(k);
      outputs.push_back({sd / (stem + ".csv"), clustering_to_csv(wc)});
      outputs.push_back({sd / (stem + ".geojson"), cluster_map_geojson(wc, tess)});
    }
  } else if (stage == "choose-k") {
    const auto emb = region_embeddings_from_csv(io::read_file(sd / "region_embeddings.csv"));
    const int n = static_cast<int>(emb.size());
    const int k_max = std::min(c.choose_k_max, n - 1);
    require(c.choose_k_min <= k_max, ErrorCode::Config, "eval.choose_k range is empty for " + std::to_string(n) + " regions");
    outputs.push_back({sd / "choose_k.json", choose_k(embedding_matrix(emb), c.choose_k_min, k_max).to_json()});
  } else if (stage == "ami") {
    const auto tess = read_geojson_regions(c.input("regions"));
    const auto landuse = read_landuse_truth(c.input("landuse"));
    std::optional<ArchetypeTable> archetypes;
    if (fs::exists(c.input("archetypes"))) archetypes = read_archetype_truth(c.input("archetypes"));
    ordered_json result = {{"mode", to_string(c.ami.mode)}, {"n_perm", c.ami.n_perm}, {"weights", "area_m2"}};
    ordered_json per_slot = ordered_json::object();
    std::map<std::pair<int, TimeSlot>, WeightedClustering> ours;
    for (auto s : run_slots) {
      ordered_json slot_json = ordered_json::object();
      for (int k : c.cluster_k) {
        auto wc = clustering_from_csv(io::read_file(slot_dir(s) / ("clusters_k" + std::to_string(k) + ".csv")));
        wc.weights = region_areas(tess, wc.region_ids);
        wc.k = std::max(wc.k, k);
        ours[{k, s}] = wc;
        // Reference clustering: Ward on the land-use distributions at the same k.
        std::unordered_map<std::string, std::size_t> row;
        for (std::size_t i = 0; i < landuse.region_ids.size(); ++i) row[landuse.region_ids[i]] = i;
        Eigen::MatrixXd lx(static_cast<Eigen::Index>(wc.region_ids.size()),
                           static_cast<Eigen::Index>(landuse.distributions.front().size()));
        for (std::size_t i = 0; i < wc.region_ids.size(); ++i) {
          const auto it = row.find(wc.region_ids[i]);
          require(it != row.end(), ErrorCode::Data, "region " + wc.region_ids[i] + " has no land-use label");
          for (std::size_t j = 0; j < landuse.distributions[it->second].size(); ++j) {
            lx(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = landuse.distributions[it->second][j];
          }
        }
        const auto ref = ward_cluster(wc.region_ids, lx, k, wc.weights);
        ordered_json entry = {{"landuse", adjusted_mutual_information(wc, ref, c.ami)}};
        if (archetypes) {
          std::unordered_map<std::string, int> arch;
          for (std::size_t i = 0; i < archetypes->region_ids.size(); ++i) {
            arch[archetypes->region_ids[i]] = archetypes->labels[i][static_cast<std::size_t>(s)];
          }
          WeightedClustering truth = wc;
          int max_label = 0;
          for (std::size_t i = 0; i < wc.region_ids.size(); ++i) {
            const auto it = arch.find(wc.region_ids[i]);
            require(it != arch.end(), ErrorCode::Data, "region " + wc.region_ids[i] + " has no archetype label");
            truth.labels[i] = it->second;
            max_label = std::max(max_label, it->second);
          }
          truth.k = max_label + 1;
          entry["archetype"] = adjusted_mutual_information(wc, truth, c.ami);
        }
        slot_json["k" + std::to_string(k)] = entry;
      }
      per_slot[std::string(to_string(s))] = slot_json;
    }
    result["slots"] = per_slot;
    ordered_json between = ordered_json::object();
    for (int k : c.cluster_k) {
      ordered_json pairs = ordered_json::object();
      for (std::size_t i = 0; i < run_slots.size(); ++i) {
        for (std::size_t j = i + 1; j < run_slots.size(); ++j) {
          const auto& a = ours.at({k, run_slots[i]});
          const auto b = align_clustering(ours.at({k, run_slots[j]}), a.region_ids);
          pairs[std::string(to_string(run_slots[i])) + "|" + std::string(to_string(run_slots[j]))] =
              adjusted_mutual_information(a, b, c.ami);
        }
      }
      between["k" + std::to_string(k)] = pairs;
    }
    result["between_slots"] = between;
    outputs.push_back({c.output_dir / "ami.json", result.dump(2) + "\n"});
  } else if (stage == "report") {
    const auto ami = ordered_json::parse(io::read_file(c.output_dir / "ami.json"));
    ordered_json rep = {{"tool_version", kToolVersion}, {"config", canonical}};
    ordered_json slots_json = ordered_json::object();
    std::ostringstream text;
    char line[512];
    std::snprintf(line, sizeof(line), "%-10s %10s %10s %10s %10s %12s %12s %8s %6s\n", "slot", "kl", "l1", "cosine",
                  "base_cos", "mae", "rmse", "r2", "k*");
    text << line;
    auto mean_of = [](const ordered_json& j, const char* m) {
      const auto& v = j["metrics"][m]["mean"];
      return v.is_null() ? std::string("undefined") : io::format_double(v.get<double>());
    };
    auto short_num = [](const ordered_json& j, const char* m) {
      const auto& v = j["metrics"][m]["mean"];
      if (v.is_null()) return std::string("n/a");
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.4f", v.get<double>());
      return std::string(buf);
    };
    for (auto s : run_slots) {
      const auto lu = ordered_json::parse(io::read_file(slot_dir(s) / "eval_landuse.json"));
      const auto de = ordered_json::parse(io::read_file(slot_dir(s) / "eval_density.json"));
      const auto ck = ordered_json::parse(io::read_file(slot_dir(s) / "choose_k.json"));
      const std::string name(to_string(s));
      slots_json[name] = {{"landuse", {{"kl", mean_of(lu, "kl")},
                                       {"l1", mean_of(lu, "l1")},
                                       {"cosine", mean_of(lu, "cosine")},
                                       {"baseline_cosine", mean_of(lu, "baseline_cosine")}}},
                          {"density", {{"mae", mean_of(de, "mae")}, {"rmse", mean_of(de, "rmse")}, {"r2", mean_of(de, "r2")}}},
                          {"suggested_k", ck["suggested_k"]},
                          {"best_silhouette_k", ck["best_silhouette_k"]}};
      std::snprintf(line, sizeof(line), "%-10s %10s %10s %10s %10s %12s %12s %8s %6d\n", name.c_str(),
                    short_num(lu, "kl").c_str(), short_num(lu, "l1").c_str(), short_num(lu, "cosine").c_str(),
                    short_num(lu, "baseline_cosine").c_str(), short_num(de, "mae").c_str(),
                    short_num(de, "rmse").c_str(), short_num(de, "r2").c_str(), ck["suggested_k"].get<int>());
      text << line;
    }
    rep["slots"] = slots_json;
    rep["ami"] = ami;
    text << "\nAMI (" << ami["mode"].get<std::string>() << ")\n";
    for (const auto& [slot_name2, per_k] : ami["slots"].items()) {
      for (const auto& [k, entry] : per_k.items()) {
        text << "  " << slot_name2 << " " << k;
        for (const auto& [ref, v] : entry.items()) {
          std::snprintf(line, sizeof(line), "  vs %s %.4f", ref.c_str(), v.get<double>());
          text << line;
        }
        text << "\n";
      }
    }
    for (const auto& [k, pairs] : ami["between_slots"].items()) {
      for (const auto& [pair, v] : pairs.items()) {
        std::snprintf(line, sizeof(line), "  %s %s %.4f\n", k.c_str(), pair.c_str(), v.get<double>());
        text << line;
      }
    }
    outputs.push_back({c.output_dir / "report.json", rep.dump(2) + "\n"});
    outputs.push_back({c.output_dir / "report.txt", text.str()});
  }

  StageOutcome outcome{stage, slot, false, {}};
  ordered_json output_hashes = ordered_json::object();
  for (const auto& [path, content] : outputs) {
    io::write_file_atomic(path, content);
    output_hashes[rel(path)] = io::sha256_hex(content);
    outcome.outputs.push_back(path);
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  // Re-read: the synth stage may have been run by another invocation.
  manifest = nlohmann::json::object();
  if (fs::exists(manifest_path())) manifest = nlohmann::json::parse(io::read_file(manifest_path()));
  manifest["tool_version"] = kToolVersion;
  manifest["config_hash"] = io::sha256_hex(c.canonical_json());
  manifest["seed"] = c.seed;
  manifest["stages"][key] = {{"fingerprint", fingerprint},
                             {"inputs", nlohmann::json::parse(input_hashes.dump())},
                             {"outputs", nlohmann::json::parse(output_hashes.dump())}};
  io::write_file_atomic(manifest_path(), manifest.dump(2) + "\n");

  // Wall-clock timings live outside the manifest so the manifest stays
  // reproducible.
  const fs::path timings_path = c.output_dir / "timings.json";
  nlohmann::json timings = nlohmann::json::object();
  if (fs::exists(timings_path)) timings = nlohmann::json::parse(io::read_file(timings_path));
  timings[key] = seconds;
  io::write_file_atomic(timings_path, timings.dump(2) + "\n");
  log_line(key, "done in " + io::format_double(std::round(seconds * 1000.0) / 1000.0) + " s");
  return outcome;
}

// ---- cluster maps ----------------------------------------------------------

std::string cluster_map_geojson(const WeightedClustering& clustering, const TargetTessellation& tess) {
  std::string missing;
  std::vector<Region> regions;
  std::map<std::string, std::map<std::string, double>> props;
  for (std::size_t i = 0; i < clustering.region_ids.size(); ++i) {
    const auto& id = clustering.region_ids[i];
    if (!tess.contains(id)) {
      missing += (missing.empty() ? "" : ",") + id;
      continue;
    }
    regions.push_back(tess.at(tess.index_of(id)));
    props[id] = {{"cluster", static_cast<double>(clustering.labels[i])}};
  }
  require(missing.empty(), ErrorCode::InvalidArgument, "regions missing from tessellation: " + missing);
  return to_geojson(TargetTessellation(std::move(regions)), props);
}

void emit_cluster_map(const WeightedClustering& clustering, const TargetTessellation& tess, const fs::path& path) {
  io::write_file_atomic(path, cluster_map_geojson(clustering, tess));
}

std::map<std::string, int> read_cluster_map(const fs::path& path) {
  const auto doc = nlohmann::json::parse(io::read_file(path));
  std::map<std::string, int> out;
  for (const auto& f : doc.at("features")) {
    const auto& p = f.at("properties");
    out[p.at("region_id").get<std::string>()] = p.at("cluster").get<int>();
  }
  return out;
}

}  // namespace mtcr
