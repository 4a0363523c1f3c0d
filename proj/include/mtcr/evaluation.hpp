#pragma once

#include "mtcr/aggregator.hpp"
#include "mtcr/synth_city.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace mtcr {

// ---- distribution metrics --------------------------------------------------

constexpr double kDistributionFloor = 1e-8;

/// Floors every entry at kDistributionFloor and renormalizes.
Eigen::VectorXd floor_distribution(const Eigen::VectorXd& p);
/// KL(target || predicted) in nats on floored, renormalized inputs.
double kl_divergence(const Eigen::VectorXd& target, const Eigen::VectorXd& predicted);
double l1_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b);
double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

double mean_absolute_error(const std::vector<double>& truth, const std::vector<double>& pred);
double root_mean_squared_error(const std::vector<double>& truth, const std::vector<double>& pred);
/// Undefined (nullopt) when the truth is constant.
std::optional<double> r2_score(const std::vector<double>& truth, const std::vector<double>& pred);

// ---- reports ---------------------------------------------------------------

struct MetricSeries {
  std::string name;
  std::vector<std::optional<double>> per_repeat;
  std::optional<double> mean;
  std::optional<double> std;  // sample standard deviation; needs >= 2 defined repeats
};

struct EvalReport {
  std::string task;
  std::vector<MetricSeries> metrics;
  std::string config_json;  // echo of every setting and seed

  void add_metric(const std::string& name, std::vector<std::optional<double>> values);
  const MetricSeries& metric(const std::string& name) const;
  std::string to_json() const;
  /// Aligned columns for people.
  std::string to_text() const;
};

// ---- land use --------------------------------------------------------------

struct LandUseEvalConfig {
  int repeats = 30;
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  int hidden = 512;
  int max_epochs = 100;
  int patience = 10;
  double learning_rate = 1e-3;
  int batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
};

/// Per repeat: seeded 70/10/20 split, a Linear-ReLU-Linear-softmax
/// perceptron trained on KL with early stopping on the validation KL, and
/// the uniform predictor scored on the same test regions. Metrics: kl, l1,
/// cosine, and baseline_kl, baseline_l1, baseline_cosine.
EvalReport landuse_eval(const std::vector<RegionEmbedding>& embeddings, const LandUseTable& labels,
                        const LandUseEvalConfig& config);

// ---- density ---------------------------------------------------------------

struct RandomForestConfig {
  int trees = 100;
  int min_samples_split = 2;
  int max_depth = 0;  // 0 = unlimited
  std::uint64_t seed = 0;
};

/// Bootstrap-aggregated CART regression trees (variance reduction, every
/// feature considered at every split, midpoint thresholds).
class RandomForestRegressor {
 public:
  explicit RandomForestRegressor(RandomForestConfig config) : config_(config) {}
  void fit(const Eigen::MatrixXd& x, const std::vector<double>& y);
  double predict(const Eigen::VectorXd& x) const;
  std::vector<double> predict(const Eigen::MatrixXd& x) const;

 private:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    double value = 0.0;
    int left = -1, right = -1;
  };
  using Tree = std::vector<Node>;
  int grow(Tree& tree, const Eigen::MatrixXd& x, const std::vector<double>& y, std::vector<int>& idx, int begin,
           int end, int depth) const;

  RandomForestConfig config_;
  std::vector<Tree> trees_;
};

struct DensityEvalConfig {
  int repeats = 30;
  double train_fraction = 0.8;
  int trees = 100;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
};

/// Metrics: mae, rmse, r2 (people per km2).
EvalReport density_eval(const std::vector<RegionEmbedding>& embeddings, const DensityTable& labels,
                        const DensityEvalConfig& config);

// ---- clustering ------------------------------------------------------------

struct WeightedClustering {
  std::vector<std::string> region_ids;
  std::vector<int> labels;
  std::vector<double> weights;  // area in m2
  int k = 0;

  void validate() const;
  /// Same region set with uniform weights.
  static WeightedClustering uniform(std::vector<std::string> ids, std::vector<int> labels);
};

struct WardMerge {
  int a = 0, b = 0;     // cluster slots; the merged cluster keeps slot a (a < b)
  double cost = 0.0;    // increase in within-cluster sum of squares
};

/// Full Ward hierarchy on squared Euclidean distances. Ties go to the pair
/// with the lowest (a, b).
std::vector<WardMerge> ward_linkage(const Eigen::MatrixXd& x);
/// Labels after n - k merges, numbered by each cluster's lowest row index.
std::vector<int> cut_linkage(const std::vector<WardMerge>& merges, int n, int k);

/// Rows of `x` are the embeddings of `region_ids`; weights default to 1.
WeightedClustering ward_cluster(const std::vector<std::string>& region_ids, const Eigen::MatrixXd& x, int k,
                                const std::vector<double>& weights = {});
WeightedClustering ward_cluster(const std::vector<RegionEmbedding>& embeddings, int k,
                                const std::vector<double>& weights = {});

double weighted_entropy(const WeightedClustering& c);
double weighted_mutual_information(const WeightedClustering& u, const WeightedClustering& v);

enum class AmiMode { Analytic, Permutation, Auto };
std::string_view to_string(AmiMode mode);
AmiMode parse_ami_mode(std::string_view text);

struct AmiOptions {
  AmiMode mode = AmiMode::Auto;  // Auto: analytic for equal weights, permutation otherwise
  int n_perm = 200;
  std::uint64_t seed = 0;
};

/// Expected mutual information under random relabeling.
double expected_mutual_information_analytic(const WeightedClustering& u, const WeightedClustering& v);
double expected_mutual_information_permutation(const WeightedClustering& u, const WeightedClustering& v, int n_perm,
                                               std::uint64_t seed);

/// (I - E[I]) / (max(H(U), H(V)) - E[I]); 1 when both are single-cluster, 0
/// when exactly one is.
double adjusted_mutual_information(const WeightedClustering& u, const WeightedClustering& v,
                                   const AmiOptions& options = {});

/// Restricts `c` to `ids` (in that order); throws naming any missing id.
WeightedClustering align_clustering(const WeightedClustering& c, const std::vector<std::string>& ids);

struct KChoice {
  std::vector<int> ks;
  std::vector<double> inertia;
  std::vector<double> silhouette;
  int suggested_k = 0;        // largest second difference of inertia
  int best_silhouette_k = 0;

  std::string to_json() const;
};

/// Mean silhouette with squared Euclidean dissimilarities; singletons score 0.
double silhouette_score(const Eigen::MatrixXd& x, const std::vector<int>& labels);
double within_cluster_ss(const Eigen::MatrixXd& x, const std::vector<int>& labels);

KChoice choose_k(const Eigen::MatrixXd& x, int k_min, int k_max);

/// `region_id,cluster`.
std::string clustering_to_csv(const WeightedClustering& c);
WeightedClustering clustering_from_csv(const std::string& text);

/// Stacks embeddings into an n x d matrix in input order.
Eigen::MatrixXd embedding_matrix(const std::vector<RegionEmbedding>& embeddings);

}  // namespace mtcr
