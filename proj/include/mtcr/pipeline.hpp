#pragma once

#include "mtcr/aggregator.hpp"
#include "mtcr/evaluation.hpp"
#include "mtcr/synth_city.hpp"
#include "mtcr/tcn_autoencoder.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mtcr {

/// One flat `key = value` document drives a run; '#' starts a comment.
/// Relative paths resolve against the config file's directory.
struct PipelineConfig {
  std::filesystem::path output_dir = "run";
  std::filesystem::path data_dir;  // defaults to <output_dir>/data
  std::map<std::string, std::filesystem::path> paths;  // overrides: traffic, traffic_meta, grid, regions, ...

  CitySpec synth;
  std::int64_t target_step = 3600;
  TcnConfig ae;
  AggregatorConfig agg;
  std::vector<TimeSlot> slots = {TimeSlot::Full};
  LandUseEvalConfig landuse;
  DensityEvalConfig density;
  std::vector<int> cluster_k = {4};
  AmiOptions ami{AmiMode::Auto, 200, 0};
  int choose_k_min = 2;
  int choose_k_max = 12;
  std::uint64_t seed = 1;

  static PipelineConfig parse(const std::string& text, const std::filesystem::path& base_dir);
  static PipelineConfig load(const std::filesystem::path& path);

  /// Applies one `key = value` assignment (also used for CLI overrides).
  void set(const std::string& key, const std::string& value, const std::filesystem::path& base_dir = {});
  void validate() const;

  /// Input file locations: traffic, traffic_meta, grid, regions, categories,
  /// landuse, density, archetypes.
  std::filesystem::path input(const std::string& name) const;
  /// Every setting in canonical form, with component seeds derived from the
  /// global one. Paths are left out so relocated runs hash alike.
  std::string canonical_json() const;

 private:
  std::filesystem::path base_dir_;
};

const std::vector<std::string>& pipeline_stages();
bool is_slot_stage(const std::string& stage);

struct StageOutcome {
  std::string stage;
  std::optional<TimeSlot> slot;
  bool skipped = false;  // inputs and settings unchanged since the last run
  std::vector<std::filesystem::path> outputs;
};

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config);

  /// Runs one stage ("all" runs every stage in order). Slot-scoped stages
  /// run for `slot` only when given, else for every configured slot.
  std::vector<StageOutcome> run(const std::string& stage, std::optional<TimeSlot> slot = std::nullopt);

  const PipelineConfig& config() const { return config_; }
  std::filesystem::path slot_dir(TimeSlot slot) const;
  std::filesystem::path manifest_path() const { return config_.output_dir / "manifest.json"; }

 private:
  StageOutcome run_one(const std::string& stage, std::optional<TimeSlot> slot);

  PipelineConfig config_;
};

/// One GeoJSON feature per clustered region with `cluster` and `area_m2`.
void emit_cluster_map(const WeightedClustering& clustering, const TargetTessellation& tess,
                      const std::filesystem::path& path);
std::string cluster_map_geojson(const WeightedClustering& clustering, const TargetTessellation& tess);
/// region_id -> cluster, read back from a cluster map.
std::map<std::string, int> read_cluster_map(const std::filesystem::path& path);

}  // namespace mtcr
