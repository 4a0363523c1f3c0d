#pragma once

#include "mtcr/common.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <string>
#include <vector>

namespace mtcr::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Named dense tensors. Gradients and optimizer moments share the layout of
/// the parameters they belong to.
class ParamStore {
 public:
  std::size_t add(std::string name, Matrix value);

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Matrix& operator[](std::size_t i) { return values_[i]; }
  const Matrix& operator[](std::size_t i) const { return values_[i]; }
  std::size_t index_of(const std::string& name) const;

  /// Total scalar count and flat coordinate access (tensor-major,
  /// column-major within a tensor).
  std::size_t numel() const;
  double& flat(std::size_t i);
  double flat(std::size_t i) const;

  ParamStore zeros_like() const;
  void set_zero();
  void add_scaled(const ParamStore& other, double scale);
  bool all_finite() const;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

/// Kingma & Ba Adam with bias correction.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& params, const ParamStore& grads);
  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  ParamStore m_, v_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, double fan_in, Rng& rng);

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Container: magic, a JSON header (free-form metadata plus the tensor
/// table) and raw little-endian float64 payloads. Bit-exact round trip.
struct Checkpoint {
  std::string kind;
  std::string metadata_json;  // serialized JSON object
  ParamStore params;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mtcr::nn
