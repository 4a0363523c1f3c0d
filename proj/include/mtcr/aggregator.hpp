#pragma once

#include "mtcr/nn.hpp"
#include "mtcr/tessellation.hpp"

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace mtcr {

enum class AggregatorKind { WeightedSum, Transformer };

std::string_view to_string(AggregatorKind kind);
AggregatorKind parse_aggregator_kind(std::string_view text);

struct AggregatorConfig {
  AggregatorKind kind = AggregatorKind::Transformer;
  int input_dim = 44;
  int output_dim = 64;
  int ff_width = 128;  // transformer feed-forward width
  int layers = 2;      // transformer encoder layers, one head each
  int cap = 300;       // rows in a feature matrix
  double margin = 1.0;
  int hops = 2;
  double learning_rate = 1e-4;
  int epochs = 60;
  int batch_size = 8;  // anchors per Adam step
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static AggregatorConfig from_json(const std::string& text);
};

/// Padded set of MTC embeddings for one region. Rows with mask == 0 are
/// zero; real rows keep ascending cell-id order.
struct RegionFeatureMatrix {
  std::string region_id;
  Eigen::MatrixXd x;       // cap x input_dim
  std::vector<char> mask;  // cap entries
  int count = 0;
  int total_cells = 0;     // cells intersecting the region before capping
  bool subsampled = false;

  void validate() const;
  /// The count x input_dim block of real rows, in mask order.
  Eigen::MatrixXd real_rows() const;
};

using EmbeddingIndex = std::unordered_map<std::int64_t, Eigen::VectorXd>;

/// Regions with more than `cap` cells keep a seeded uniform sample of them.
RegionFeatureMatrix build_feature_matrix(const std::string& region_id, const std::vector<int>& cell_ids,
                                         const EmbeddingIndex& embeddings, int cap, std::uint64_t seed);

struct RegionEmbedding {
  std::string region_id;
  Eigen::VectorXd e;
};

/// max(||a - p|| - ||a - n|| + margin, 0) with Euclidean norms.
double triplet_loss(const Eigen::VectorXd& a, const Eigen::VectorXd& p, const Eigen::VectorXd& n, double margin);

struct TripletLossGrad {
  double loss = 0.0;
  Eigen::VectorXd da, dp, dn;
};
TripletLossGrad triplet_loss_grad(const Eigen::VectorXd& a, const Eigen::VectorXd& p, const Eigen::VectorXd& n,
                                  double margin);

class AggregatorModel {
 public:
  explicit AggregatorModel(AggregatorConfig config);
  AggregatorModel(AggregatorModel&&) noexcept;
  AggregatorModel& operator=(AggregatorModel&&) noexcept;
  AggregatorModel(const AggregatorModel& other);
  ~AggregatorModel();

  const AggregatorConfig& config() const { return config_; }
  AggregatorKind kind() const { return config_.kind; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  Eigen::VectorXd aggregate(const RegionFeatureMatrix& fm) const;
  /// Same computation on an explicit set of rows (count x input_dim).
  Eigen::VectorXd aggregate_rows(const Eigen::MatrixXd& rows) const;

  /// Opaque forward record for backprop.
  struct Trace;
  Eigen::VectorXd forward(const Eigen::MatrixXd& rows, Trace& trace) const;
  void backward(const Trace& trace, const Eigen::VectorXd& dy, nn::ParamStore& grads) const;
  // Shared ownership so callers never need the complete type.
  std::shared_ptr<Trace> make_trace() const;

  std::vector<double> loss_log;    // mean triplet loss per epoch
  std::vector<double> active_log;  // fraction of nonzero-loss triplets per epoch

  nn::Checkpoint to_checkpoint() const;
  static AggregatorModel from_checkpoint(const nn::Checkpoint& ckpt);

 private:
  AggregatorConfig config_;
  nn::ParamStore params_;
};

using AggregatorEpochCallback = std::function<void(int epoch, double loss, double active_fraction)>;

/// Each epoch visits every eligible anchor in seeded order, draws one
/// (positive, negative) pair per anchor and takes an Adam step per batch of
/// anchors on the mean triplet loss. `features` must cover every region in
/// `adjacency`.
AggregatorModel train_aggregator(const AggregatorConfig& config, const std::vector<RegionFeatureMatrix>& features,
                                 const RegionAdjacency& adjacency, const AggregatorEpochCallback& on_epoch = {});

std::vector<RegionEmbedding> embed_regions(const AggregatorModel& model,
                                           const std::vector<RegionFeatureMatrix>& features);

/// `region_id,e_0..e_{d-1}`.
std::string region_embeddings_to_csv(const std::vector<RegionEmbedding>& embeddings);
std::vector<RegionEmbedding> region_embeddings_from_csv(const std::string& text);

}  // namespace mtcr
