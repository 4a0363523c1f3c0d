#pragma once

#include "mtcr/nn.hpp"
#include "mtcr/traffic.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace mtcr {

enum class Activation { Relu, Tanh };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view text);

/// Encoder: dilated causal conv blocks -> temporal average pool -> linear to
/// the bottleneck. Decoder mirrors it: linear -> nearest-neighbour upsample
/// -> conv blocks -> 1x1 linear head back to the input channels.
struct TcnConfig {
  int input_channels = 4;
  std::vector<int> channels = {32, 32, 32};
  int kernel_size = 3;
  std::vector<int> dilations = {1, 2, 4};
  int pool = 8;
  int bottleneck = 44;
  /// Sequence length the model is built for; 0 means "take it from the
  /// training data".
  int length = 0;
  Activation activation = Activation::Relu;
  double learning_rate = 1e-3;
  int epochs = 100;
  int batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
  int receptive_field() const;
  int pooled_length() const { return (length + pool - 1) / pool; }
  std::string to_json() const;
  static TcnConfig from_json(const std::string& text);
};

struct MtcEmbedding {
  std::int64_t cell_id = 0;
  Eigen::VectorXd z;
};

class TcnAutoencoder {
 public:
  /// Seeded fan-in uniform init; conv biases start at zero.
  explicit TcnAutoencoder(TcnConfig config);

  const TcnConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  /// `x` is channels x time.
  Eigen::VectorXd encode(const Eigen::MatrixXd& x) const;
  MtcEmbedding encode(const MultivariateSeries& mv) const;
  /// Returns channels x time.
  Eigen::MatrixXd decode(const Eigen::VectorXd& z) const;
  Eigen::MatrixXd reconstruct(const Eigen::MatrixXd& x) const;

  /// Post-activation outputs of each encoder block before pooling, each
  /// time x channels.
  std::vector<Eigen::MatrixXd> encoder_activations(const Eigen::MatrixXd& x) const;

  /// Adds scale * d(sum of squared errors)/d(params) into `grads` and
  /// returns the sum of squared errors for `x` (channels x time).
  double accumulate_gradient(const Eigen::MatrixXd& x, nn::ParamStore& grads, double scale) const;

  std::vector<double> training_log;  // mean loss per epoch
  std::optional<NormalizationStats> normalization;

  nn::Checkpoint to_checkpoint() const;
  static TcnAutoencoder from_checkpoint(const nn::Checkpoint& ckpt);

 private:
  struct Cache;
  void check_input(const Eigen::MatrixXd& x) const;
  void forward(const Eigen::MatrixXd& x_tc, Cache& cache) const;

  TcnConfig config_;
  nn::ParamStore params_;
};

/// Mean over samples, channels and time of the squared difference.
double mean_squared_error(const std::vector<Eigen::MatrixXd>& x, const std::vector<Eigen::MatrixXd>& reconstruction);

double reconstruction_loss(const TcnAutoencoder& model, const std::vector<MultivariateSeries>& batch);
double reconstruction_loss(const TcnAutoencoder& model, const std::vector<Eigen::MatrixXd>& batch);

using EpochCallback = std::function<void(int epoch, double loss)>;

/// Adam over seeded-shuffle mini-batches. Throws Divergence with the epoch
/// index on a non-finite loss.
TcnAutoencoder train_autoencoder(TcnConfig config, const std::vector<MultivariateSeries>& training,
                                 const EpochCallback& on_epoch = {});

std::vector<MtcEmbedding> embed_all(const TcnAutoencoder& model, const std::vector<MultivariateSeries>& cells);

/// `cell_id,z_0..z_{d-1}`.
std::string embeddings_to_csv(const std::vector<MtcEmbedding>& embeddings);
std::vector<MtcEmbedding> embeddings_from_csv(const std::string& text);

}  // namespace mtcr
