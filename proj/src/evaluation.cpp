#include "mtcr/evaluation.hpp"

#include "mtcr/io.hpp"
#include "mtcr/nn.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace mtcr {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using ordered_json = nlohmann::ordered_json;

// ---- distribution metrics --------------------------------------------------

VectorXd floor_distribution(const VectorXd& p) {
  require(p.size() > 0, ErrorCode::InvalidArgument, "empty distribution");
  VectorXd q = p.cwiseMax(kDistributionFloor);
  return q / q.sum();
}

double kl_divergence(const VectorXd& target, const VectorXd& predicted) {
  require(target.size() == predicted.size(), ErrorCode::InvalidArgument,
          "distribution sizes differ (" + std::to_string(target.size()) + " vs " +
              std::to_string(predicted.size()) + ")");
  const VectorXd t = floor_distribution(target), p = floor_distribution(predicted);
  double kl = 0.0;
  for (Index i = 0; i < t.size(); ++i) kl += t(i) * std::log(t(i) / p(i));
  return std::max(kl, 0.0);
}

double l1_distance(const VectorXd& a, const VectorXd& b) {
  require(a.size() == b.size(), ErrorCode::InvalidArgument, "vector sizes differ");
  return (a - b).cwiseAbs().sum();
}

double cosine_similarity(const VectorXd& a, const VectorXd& b) {
  require(a.size() == b.size(), ErrorCode::InvalidArgument, "vector sizes differ");
  const double na = a.norm(), nb = b.norm();
  require(na > 0.0 && nb > 0.0, ErrorCode::InvalidArgument, "cosine similarity of a zero vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

double mean_absolute_error(const std::vector<double>& truth, const std::vector<double>& pred) {
  require(truth.size() == pred.size() && !truth.empty(), ErrorCode::InvalidArgument, "bad metric inputs");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += std::abs(truth[i] - pred[i]);
  return s / static_cast<double>(truth.size());
}

double root_mean_squared_error(const std::vector<double>& truth, const std::vector<double>& pred) {
  require(truth.size() == pred.size() && !truth.empty(), ErrorCode::InvalidArgument, "bad metric inputs");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += (truth[i] - pred[i]) * (truth[i] - pred[i]);
  return std::sqrt(s / static_cast<double>(truth.size()));
}

std::optional<double> r2_score(const std::vector<double>& truth, const std::vector<double>& pred) {
  require(truth.size() == pred.size() && !truth.empty(), ErrorCode::InvalidArgument, "bad metric inputs");
  const double mean = std::accumulate(truth.begin(), truth.end(), 0.0) / static_cast<double>(truth.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  if (ss_tot <= 0.0) return std::nullopt;
  return 1.0 - ss_res / ss_tot;
}

// ---- reports ---------------------------------------------------------------

void EvalReport::add_metric(const std::string& name, std::vector<std::optional<double>> values) {
  MetricSeries m;
  m.name = name;
  m.per_repeat = std::move(values);
  std::vector<double> defined;
  for (const auto& v : m.per_repeat) {
    if (v) defined.push_back(*v);
  }
  if (!defined.empty()) {
    const double n = static_cast<double>(defined.size());
    const double mean = std::accumulate(defined.begin(), defined.end(), 0.0) / n;
    m.mean = mean;
    if (defined.size() >= 2) {
      double ss = 0.0;
      for (double v : defined) ss += (v - mean) * (v - mean);
      m.std = std::sqrt(ss / (n - 1.0));
    }
  }
  metrics.push_back(std::move(m));
}

const MetricSeries& EvalReport::metric(const std::string& name) const {
  for (const auto& m : metrics) {
    if (m.name == name) return m;
  }
  fail(ErrorCode::InvalidArgument, "report " + task + " has no metric " + name);
}

namespace {
ordered_json opt_json(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }
}  // namespace

std::string EvalReport::to_json() const {
  ordered_json j;
  j["task"] = task;
  j["config"] = config_json.empty() ? ordered_json::object() : ordered_json::parse(config_json);
  ordered_json ms = ordered_json::object();
  for (const auto& m : metrics) {
    ordered_json per = ordered_json::array();
    for (const auto& v : m.per_repeat) per.push_back(opt_json(v));
    ms[m.name] = {{"mean", opt_json(m.mean)}, {"std", opt_json(m.std)}, {"per_repeat", per}};
  }
  j["metrics"] = ms;
  return j.dump(2) + "\n";
}

std::string EvalReport::to_text() const {
  std::size_t width = 6;
  for (const auto& m : metrics) width = std::max(width, m.name.size());
  auto num = [](const std::optional<double>& v) {
    if (!v) return std::string("undefined");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.5f", *v);
    return std::string(buf);
  };
  std::ostringstream out;
  out << "task: " << task << "\n";
  char line[256];
  std::snprintf(line, sizeof(line), "%-*s  %14s  %14s  %7s\n", static_cast<int>(width), "metric", "mean", "std",
                "repeats");
  out << line;
  for (const auto& m : metrics) {
    const auto n = std::count_if(m.per_repeat.begin(), m.per_repeat.end(), [](const auto& v) { return v.has_value(); });
    std::snprintf(line, sizeof(line), "%-*s  %14s  %14s  %7ld\n", static_cast<int>(width), m.name.c_str(),
                  num(m.mean).c_str(), num(m.std).c_str(), static_cast<long>(n));
    out << line;
  }
  return out.str();
}

// ---- shared helpers --------------------------------------------------------

MatrixXd embedding_matrix(const std::vector<RegionEmbedding>& embeddings) {
  require(!embeddings.empty(), ErrorCode::InvalidArgument, "no embeddings");
  const Index d = embeddings.front().e.size();
  MatrixXd x(static_cast<Index>(embeddings.size()), d);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    require(embeddings[i].e.size() == d, ErrorCode::InvalidArgument, "embedding dimensions differ");
    x.row(static_cast<Index>(i)) = embeddings[i].e.transpose();
  }
  return x;
}

namespace {

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed, std::string_view stream, int repeat) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  Rng rng(derive_seed(seed, stream, static_cast<std::uint64_t>(repeat)));
  shuffle(p.begin(), p.end(), rng);
  return p;
}

std::size_t rounded_share(std::size_t n, double fraction) {
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
}

struct Standardizer {
  VectorXd mean, scale;
  Standardizer(const MatrixXd& x) {
    mean = x.colwise().mean().transpose();
    scale.resize(x.cols());
    for (Index j = 0; j < x.cols(); ++j) {
      const double var = (x.col(j).array() - mean(j)).square().mean();
      scale(j) = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
  }
  MatrixXd apply(const MatrixXd& x) const {
    MatrixXd y = x.rowwise() - mean.transpose();
    return y.array().rowwise() / scale.transpose().array();
  }
};

MatrixXd rows_of(const MatrixXd& x, const std::vector<std::size_t>& idx) {
  MatrixXd out(static_cast<Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = x.row(static_cast<Index>(idx[i]));
  return out;
}

// Two-layer perceptron with a softmax head, trained on KL(target || output).
class DistributionMlp {
 public:
  DistributionMlp(Index in, int hidden, Index out, Rng& rng) {
    params_.add("w1", nn::uniform_init(hidden, in, static_cast<double>(in), rng));
    params_.add("b1", nn::uniform_init(hidden, 1, static_cast<double>(in), rng));
    params_.add("w2", nn::uniform_init(out, hidden, hidden, rng));
    params_.add("b2", nn::uniform_init(out, 1, hidden, rng));
  }

  nn::ParamStore& params() { return params_; }

  MatrixXd predict(const MatrixXd& x, MatrixXd* hidden_pre = nullptr) const {
    MatrixXd h = x * params_[0].transpose();
    h.rowwise() += params_[1].col(0).transpose();
    if (hidden_pre) *hidden_pre = h;
    MatrixXd logits = h.cwiseMax(0.0) * params_[2].transpose();
    logits.rowwise() += params_[3].col(0).transpose();
    for (Index i = 0; i < logits.rows(); ++i) {
      const double mx = logits.row(i).maxCoeff();
      logits.row(i) = (logits.row(i).array() - mx).exp();
      logits.row(i) /= logits.row(i).sum();
    }
    return logits;
  }

  // Gradient of the mean KL over the batch; targets are already floored.
  void gradient(const MatrixXd& x, const MatrixXd& t, nn::ParamStore& grads) const {
    MatrixXd pre;
    const MatrixXd p = predict(x, &pre);
    const MatrixXd dlogits = (p - t) / static_cast<double>(x.rows());
    const MatrixXd h = pre.cwiseMax(0.0);
    grads[2] = dlogits.transpose() * h;
    grads[3] = dlogits.colwise().sum().transpose();
    const MatrixXd dh = (pre.array() > 0.0).select(dlogits * params_[2], 0.0);
    grads[0] = dh.transpose() * x;
    grads[1] = dh.colwise().sum().transpose();
  }

 private:
  nn::ParamStore params_;
};

double mean_kl(const MatrixXd& targets, const MatrixXd& predicted) {
  double s = 0.0;
  for (Index i = 0; i < targets.rows(); ++i) s += kl_divergence(targets.row(i).transpose(), predicted.row(i).transpose());
  return s / static_cast<double>(targets.rows());
}

}  // namespace

// ---- land use --------------------------------------------------------------

void LandUseEvalConfig::validate() const {
  require(repeats >= 1, ErrorCode::InvalidArgument, "repeats must be >= 1");
  require(train_fraction > 0.0 && val_fraction >= 0.0 && train_fraction + val_fraction < 1.0,
          ErrorCode::InvalidArgument, "land-use split fractions must leave a test share");
  require(hidden >= 1 && max_epochs >= 1 && patience >= 1 && batch_size >= 1, ErrorCode::InvalidArgument,
          "land-use model settings must be positive");
  require(learning_rate > 0.0, ErrorCode::InvalidArgument, "learning rate must be > 0");
}

std::string LandUseEvalConfig::to_json() const {
  ordered_json j = {{"repeats", repeats},     {"train_fraction", train_fraction},
                    {"val_fraction", val_fraction}, {"test_fraction", 1.0 - train_fraction - val_fraction},
                    {"hidden", hidden},       {"max_epochs", max_epochs},
                    {"patience", patience},   {"learning_rate", learning_rate},
                    {"batch_size", batch_size}, {"seed", seed}};
  return j.dump();
}

EvalReport landuse_eval(const std::vector<RegionEmbedding>& embeddings, const LandUseTable& labels,
                        const LandUseEvalConfig& config) {
  config.validate();
  require(embeddings.size() >= 3, ErrorCode::InvalidArgument, "land-use evaluation needs at least 3 regions");
  std::unordered_map<std::string, std::size_t> label_row;
  for (std::size_t i = 0; i < labels.region_ids.size(); ++i) label_row[labels.region_ids[i]] = i;
  require(!labels.distributions.empty(), ErrorCode::InvalidArgument, "no land-use labels");
  const Index K = static_cast<Index>(labels.distributions.front().size());
  require(K >= 2, ErrorCode::InvalidArgument, "land use needs K >= 2 categories");

  const MatrixXd x = embedding_matrix(embeddings);
  const Index n = x.rows();
  MatrixXd y(n, K);
  for (Index i = 0; i < n; ++i) {
    const auto it = label_row.find(embeddings[static_cast<std::size_t>(i)].region_id);
    require(it != label_row.end(), ErrorCode::InvalidArgument,
            "region " + embeddings[static_cast<std::size_t>(i)].region_id + " has no land-use label");
    const auto& dist = labels.distributions[it->second];
    require(static_cast<Index>(dist.size()) == K, ErrorCode::InvalidArgument,
            "land-use label width mismatch: model has K=" + std::to_string(K) + ", label has " +
                std::to_string(dist.size()));
    for (Index k = 0; k < K; ++k) y(i, k) = dist[static_cast<std::size_t>(k)];
  }
  MatrixXd y_floor(n, K);
  for (Index i = 0; i < n; ++i) y_floor.row(i) = floor_distribution(y.row(i).transpose()).transpose();

  const std::size_t n_test = std::max<std::size_t>(1, rounded_share(static_cast<std::size_t>(n),
                                                                    1.0 - config.train_fraction - config.val_fraction));
  const std::size_t n_val = rounded_share(static_cast<std::size_t>(n), config.val_fraction);
  require(static_cast<std::size_t>(n) > n_test + n_val, ErrorCode::InvalidArgument, "too few regions for the split");
  const VectorXd uniform = VectorXd::Constant(K, 1.0 / static_cast<double>(K));

  std::vector<std::optional<double>> kl, l1, cos, bkl, bl1, bcos, epochs_run;
  for (int r = 0; r < config.repeats; ++r) {
    const auto perm = seeded_permutation(static_cast<std::size_t>(n), config.seed, "landuse-split", r);
    const std::vector<std::size_t> test(perm.begin(), perm.begin() + static_cast<long>(n_test));
    const std::vector<std::size_t> val(perm.begin() + static_cast<long>(n_test),
                                       perm.begin() + static_cast<long>(n_test + n_val));
    const std::vector<std::size_t> train(perm.begin() + static_cast<long>(n_test + n_val), perm.end());

    const Standardizer st(rows_of(x, train));
    const MatrixXd xtr = st.apply(rows_of(x, train)), ytr = rows_of(y_floor, train);
    const MatrixXd xva = st.apply(rows_of(x, val)), yva = rows_of(y_floor, val);
    const MatrixXd xte = st.apply(rows_of(x, test)), yte = rows_of(y, test);

    Rng init_rng(derive_seed(config.seed, "landuse-mlp-init", static_cast<std::uint64_t>(r)));
    Rng batch_rng(derive_seed(config.seed, "landuse-mlp-batches", static_cast<std::uint64_t>(r)));
    DistributionMlp mlp(x.cols(), config.hidden, K, init_rng);
    nn::Adam adam(config.learning_rate);
    nn::ParamStore grads = mlp.params().zeros_like();
    // Without validation regions, early stopping watches the training loss.
    const MatrixXd& xmon = val.empty() ? xtr : xva;
    const MatrixXd& ymon = val.empty() ? ytr : yva;
    double best = std::numeric_limits<double>::infinity();
    nn::ParamStore best_params = mlp.params();
    int since_best = 0, epoch = 0;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (epoch = 1; epoch <= config.max_epochs; ++epoch) {
      shuffle(order.begin(), order.end(), batch_rng);
      for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(config.batch_size)) {
        const std::vector<std::size_t> b(order.begin() + static_cast<long>(s),
                                         order.begin() + static_cast<long>(std::min(order.size(), s + static_cast<std::size_t>(config.batch_size))));
        mlp.gradient(rows_of(xtr, b), rows_of(ytr, b), grads);
        adam.step(mlp.params(), grads);
      }
      const double v = mean_kl(ymon, mlp.predict(xmon));
      require(std::isfinite(v), ErrorCode::Divergence,
              "land-use model diverged at epoch " + std::to_string(epoch) + " of repeat " + std::to_string(r));
      if (v < best) {
        best = v;
        best_params = mlp.params();
        since_best = 0;
      } else if (++since_best >= config.patience) {
        break;
      }
    }
    mlp.params() = best_params;
    const MatrixXd pte = mlp.predict(xte);
    double skl = 0, sl1 = 0, scos = 0, sbkl = 0, sbl1 = 0, sbcos = 0;
    for (Index i = 0; i < yte.rows(); ++i) {
      const VectorXd t = yte.row(i).transpose(), p = pte.row(i).transpose();
      skl += kl_divergence(t, p);
      sl1 += l1_distance(t, p);
      scos += cosine_similarity(t, p);
      sbkl += kl_divergence(t, uniform);
      sbl1 += l1_distance(t, uniform);
      sbcos += cosine_similarity(t, uniform);
    }
    const double m = static_cast<double>(yte.rows());
    kl.push_back(skl / m);
    l1.push_back(sl1 / m);
    cos.push_back(scos / m);
    bkl.push_back(sbkl / m);
    bl1.push_back(sbl1 / m);
    bcos.push_back(sbcos / m);
    epochs_run.push_back(static_cast<double>(std::min(epoch, config.max_epochs)));
  }

  EvalReport report;
  report.task = "landuse";
  auto cfg = ordered_json::parse(config.to_json());
  cfg["n_regions"] = n;
  cfg["categories"] = K;
  cfg["split_sizes"] = {{"train", static_cast<std::size_t>(n) - n_test - n_val}, {"val", n_val}, {"test", n_test}};
  report.config_json = cfg.dump();
  report.add_metric("kl", kl);
  report.add_metric("l1", l1);
  report.add_metric("cosine", cos);
  report.add_metric("baseline_kl", bkl);
  report.add_metric("baseline_l1", bl1);
  report.add_metric("baseline_cosine", bcos);
  report.add_metric("epochs", epochs_run);
  return report;
}

// ---- density ---------------------------------------------------------------

void RandomForestRegressor::fit(const MatrixXd& x, const std::vector<double>& y) {
  require(x.rows() == static_cast<Index>(y.size()) && x.rows() >= 1, ErrorCode::InvalidArgument,
          "random forest needs matching, non-empty inputs");
  require(config_.trees >= 1 && config_.min_samples_split >= 2, ErrorCode::InvalidArgument, "bad forest settings");
  trees_.clear();
  const int n = static_cast<int>(x.rows());
  for (int t = 0; t < config_.trees; ++t) {
    Rng rng(derive_seed(config_.seed, "rf-bootstrap", static_cast<std::uint64_t>(t)));
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (auto& i : idx) i = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(n)));
    std::sort(idx.begin(), idx.end());
    Tree tree;
    grow(tree, x, y, idx, 0, n, 0);
    trees_.push_back(std::move(tree));
  }
}

int RandomForestRegressor::grow(Tree& tree, const MatrixXd& x, const std::vector<double>& y, std::vector<int>& idx,
                                int begin, int end, int depth) const {
  const int node = static_cast<int>(tree.size());
  tree.emplace_back();
  const int m = end - begin;
  double sum = 0.0, sumsq = 0.0;
  for (int i = begin; i < end; ++i) {
    sum += y[static_cast<std::size_t>(idx[i])];
    sumsq += y[static_cast<std::size_t>(idx[i])] * y[static_cast<std::size_t>(idx[i])];
  }
  tree[node].value = sum / m;
  const double parent_sse = sumsq - sum * sum / m;
  if (m < config_.min_samples_split || (config_.max_depth > 0 && depth >= config_.max_depth) ||
      parent_sse <= 1e-12 * std::max(1.0, sumsq)) {
    return node;
  }

  int best_feature = -1;
  double best_threshold = 0.0, best_sse = parent_sse;
  std::vector<int> sorted(idx.begin() + begin, idx.begin() + end);
  for (Index f = 0; f < x.cols(); ++f) {
    std::stable_sort(sorted.begin(), sorted.end(), [&](int a, int b) { return x(a, f) < x(b, f); });
    double ls = 0.0, lsq = 0.0;
    for (int i = 0; i + 1 < m; ++i) {
      const double v = y[static_cast<std::size_t>(sorted[i])];
      ls += v;
      lsq += v * v;
      const double lo = x(sorted[i], f), hi = x(sorted[i + 1], f);
      if (!(lo < hi)) continue;
      const double nl = i + 1, nr = m - nl;
      const double rs = sum - ls, rsq = sumsq - lsq;
      const double sse = (lsq - ls * ls / nl) + (rsq - rs * rs / nr);
      if (sse < best_sse) {
        best_sse = sse;
        best_feature = static_cast<int>(f);
        best_threshold = 0.5 * (lo + hi);
      }
    }
  }
  if (best_feature < 0) return node;

  const auto mid = std::stable_partition(idx.begin() + begin, idx.begin() + end,
                                         [&](int i) { return x(i, best_feature) <= best_threshold; });
  const int split = static_cast<int>(mid - idx.begin());
  tree[node].feature = best_feature;
  tree[node].threshold = best_threshold;
  const int left = grow(tree, x, y, idx, begin, split, depth + 1);
  const int right = grow(tree, x, y, idx, split, end, depth + 1);
  tree[node].left = left;
  tree[node].right = right;
  return node;
}

double RandomForestRegressor::predict(const VectorXd& x) const {
  require(!trees_.empty(), ErrorCode::InvalidArgument, "random forest is not fitted");
  double s = 0.0;
  for (const auto& tree : trees_) {
    int node = 0;
    while (tree[node].feature >= 0) node = x(tree[node].feature) <= tree[node].threshold ? tree[node].left : tree[node].right;
    s += tree[node].value;
  }
  return s / static_cast<double>(trees_.size());
}

std::vector<double> RandomForestRegressor::predict(const MatrixXd& x) const {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i) out.push_back(predict(VectorXd(x.row(i).transpose())));
  return out;
}

void DensityEvalConfig::validate() const {
  require(repeats >= 1, ErrorCode::InvalidArgument, "repeats must be >= 1");
  require(train_fraction > 0.0 && train_fraction < 1.0, ErrorCode::InvalidArgument, "train fraction must be in (0,1)");
  require(trees >= 1, ErrorCode::InvalidArgument, "trees must be >= 1");
}

std::string DensityEvalConfig::to_json() const {
  ordered_json j = {{"repeats", repeats},
                    {"train_fraction", train_fraction},
                    {"test_fraction", 1.0 - train_fraction},
                    {"trees", trees},
                    {"max_depth", "unlimited"},
                    {"seed", seed}};
  return j.dump();
}

EvalReport density_eval(const std::vector<RegionEmbedding>& embeddings, const DensityTable& labels,
                        const DensityEvalConfig& config) {
  config.validate();
  require(embeddings.size() >= 2, ErrorCode::InvalidArgument, "density evaluation needs at least 2 regions");
  std::unordered_map<std::string, double> dens;
  for (std::size_t i = 0; i < labels.region_ids.size(); ++i) dens[labels.region_ids[i]] = labels.density[i];
  const MatrixXd x = embedding_matrix(embeddings);
  std::vector<double> y;
  for (const auto& e : embeddings) {
    const auto it = dens.find(e.region_id);
    require(it != dens.end(), ErrorCode::InvalidArgument, "region " + e.region_id + " has no density label");
    y.push_back(it->second);
  }
  const std::size_t n = embeddings.size();
  const std::size_t n_train = std::clamp<std::size_t>(rounded_share(n, config.train_fraction), 1, n - 1);

  std::vector<std::optional<double>> mae, rmse, r2;
  for (int r = 0; r < config.repeats; ++r) {
    const auto perm = seeded_permutation(n, config.seed, "density-split", r);
    const std::vector<std::size_t> train(perm.begin(), perm.begin() + static_cast<long>(n_train));
    const std::vector<std::size_t> test(perm.begin() + static_cast<long>(n_train), perm.end());
    std::vector<double> ytr, yte;
    for (auto i : train) ytr.push_back(y[i]);
    for (auto i : test) yte.push_back(y[i]);
    RandomForestRegressor rf({config.trees, 2, 0, derive_seed(config.seed, "density-forest", static_cast<std::uint64_t>(r))});
    rf.fit(rows_of(x, train), ytr);
    const auto pred = rf.predict(rows_of(x, test));
    mae.push_back(mean_absolute_error(yte, pred));
    rmse.push_back(root_mean_squared_error(yte, pred));
    r2.push_back(r2_score(yte, pred));
  }
  EvalReport report;
  report.task = "density";
  auto cfg = ordered_json::parse(config.to_json());
  cfg["n_regions"] = n;
  cfg["split_sizes"] = {{"train", n_train}, {"test", n - n_train}};
  report.config_json = cfg.dump();
  report.add_metric("mae", mae);
  report.add_metric("rmse", rmse);
  report.add_metric("r2", r2);
  return report;
}

// ---- clustering ------------------------------------------------------------

void WeightedClustering::validate() const {
  require(!region_ids.empty(), ErrorCode::InvalidArgument, "empty clustering");
  require(labels.size() == region_ids.size() && weights.size() == region_ids.size(), ErrorCode::InvalidArgument,
          "clustering arrays differ in length");
  require(k >= 1, ErrorCode::InvalidArgument, "clustering needs k >= 1");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < k, ErrorCode::InvalidArgument,
            "region " + region_ids[i] + ": label outside [0, k)");
    require(weights[i] > 0.0 && std::isfinite(weights[i]), ErrorCode::InvalidArgument,
            "region " + region_ids[i] + ": weight must be > 0");
  }
}

WeightedClustering WeightedClustering::uniform(std::vector<std::string> ids, std::vector<int> labels) {
  WeightedClustering c;
  c.weights.assign(ids.size(), 1.0);
  c.k = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  c.region_ids = std::move(ids);
  c.labels = std::move(labels);
  return c;
}

std::vector<WardMerge> ward_linkage(const MatrixXd& x) {
  const int n = static_cast<int>(x.rows());
  require(n >= 1, ErrorCode::InvalidArgument, "Ward linkage needs at least one row");
  MatrixXd centroid = x;
  std::vector<double> size(static_cast<std::size_t>(n), 1.0);
  std::vector<char> active(static_cast<std::size_t>(n), 1);
  std::vector<int> nn(static_cast<std::size_t>(n), -1);
  std::vector<double> nn_cost(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());

  auto cost = [&](int i, int j) {
    if (i > j) std::swap(i, j);
    const double ni = size[static_cast<std::size_t>(i)], nj = size[static_cast<std::size_t>(j)];
    return ni * nj / (ni + nj) * (centroid.row(i) - centroid.row(j)).squaredNorm();
  };
  auto refresh = [&](int i) {
    nn[static_cast<std::size_t>(i)] = -1;
    nn_cost[static_cast<std::size_t>(i)] = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
      if (j == i || !active[static_cast<std::size_t>(j)]) continue;
      const double c = cost(i, j);
      if (c < nn_cost[static_cast<std::size_t>(i)]) {
        nn_cost[static_cast<std::size_t>(i)] = c;
        nn[static_cast<std::size_t>(i)] = j;
      }
    }
  };
  for (int i = 0; i < n; ++i) refresh(i);

  std::vector<WardMerge> merges;
  merges.reserve(static_cast<std::size_t>(n > 0 ? n - 1 : 0));
  for (int step = 0; step + 1 < n; ++step) {
    // The lowest index holding the minimum cost, paired with its lowest
    // nearest neighbour, is the lexicographically smallest minimal pair.
    int a = -1;
    for (int i = 0; i < n; ++i) {
      if (!active[static_cast<std::size_t>(i)]) continue;
      if (a < 0 || nn_cost[static_cast<std::size_t>(i)] < nn_cost[static_cast<std::size_t>(a)]) a = i;
    }
    int b = nn[static_cast<std::size_t>(a)];
    const double c = nn_cost[static_cast<std::size_t>(a)];
    if (b < a) std::swap(a, b);
    merges.push_back({a, b, c});
    const double na = size[static_cast<std::size_t>(a)], nb = size[static_cast<std::size_t>(b)];
    centroid.row(a) = (na * centroid.row(a) + nb * centroid.row(b)) / (na + nb);
    size[static_cast<std::size_t>(a)] = na + nb;
    active[static_cast<std::size_t>(b)] = 0;
    for (int i = 0; i < n; ++i) {
      if (!active[static_cast<std::size_t>(i)] || i == a) continue;
      const int cur = nn[static_cast<std::size_t>(i)];
      if (cur == a || cur == b) {
        refresh(i);
        continue;
      }
      const double ci = cost(i, a);
      if (ci < nn_cost[static_cast<std::size_t>(i)] || (ci == nn_cost[static_cast<std::size_t>(i)] && a < cur)) {
        nn_cost[static_cast<std::size_t>(i)] = ci;
        nn[static_cast<std::size_t>(i)] = a;
      }
    }
    refresh(a);
  }
  return merges;
}

std::vector<int> cut_linkage(const std::vector<WardMerge>& merges, int n, int k) {
  require(k >= 1 && k <= n, ErrorCode::InvalidArgument,
          "k=" + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
  require(static_cast<int>(merges.size()) >= n - k, ErrorCode::InvalidArgument, "linkage too short for k");
  std::vector<int> parent(static_cast<std::size_t>(n));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int i) {
    while (parent[static_cast<std::size_t>(i)] != i) i = parent[static_cast<std::size_t>(i)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(i)])];
    return i;
  };
  for (int s = 0; s < n - k; ++s) parent[static_cast<std::size_t>(find(merges[static_cast<std::size_t>(s)].b))] = find(merges[static_cast<std::size_t>(s)].a);
  std::vector<int> labels(static_cast<std::size_t>(n), -1);
  std::unordered_map<int, int> label_of_root;
  for (int i = 0; i < n; ++i) {
    const int root = find(i);
    const auto [it, inserted] = label_of_root.emplace(root, static_cast<int>(label_of_root.size()));
    labels[static_cast<std::size_t>(i)] = it->second;
  }
  return labels;
}

WeightedClustering ward_cluster(const std::vector<std::string>& region_ids, const MatrixXd& x, int k,
                                const std::vector<double>& weights) {
  const int n = static_cast<int>(x.rows());
  require(static_cast<int>(region_ids.size()) == n, ErrorCode::InvalidArgument, "one region id per row required");
  require(k >= 1 && k <= n, ErrorCode::InvalidArgument,
          "k=" + std::to_string(k) + " exceeds the " + std::to_string(n) + " regions");
  WeightedClustering c;
  c.region_ids = region_ids;
  c.labels = cut_linkage(ward_linkage(x), n, k);
  c.weights = weights.empty() ? std::vector<double>(static_cast<std::size_t>(n), 1.0) : weights;
  c.k = k;
  c.validate();
  return c;
}

WeightedClustering ward_cluster(const std::vector<RegionEmbedding>& embeddings, int k,
                                const std::vector<double>& weights) {
  std::vector<std::string> ids;
  for (const auto& e : embeddings) ids.push_back(e.region_id);
  return ward_cluster(ids, embedding_matrix(embeddings), k, weights);
}

namespace {

std::vector<double> cluster_shares(const WeightedClustering& c) {
  std::vector<double> mass(static_cast<std::size_t>(c.k), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < c.labels.size(); ++i) {
    mass[static_cast<std::size_t>(c.labels[i])] += c.weights[i];
    total += c.weights[i];
  }
  for (auto& m : mass) m /= total;
  return mass;
}

int occupied(const std::vector<double>& shares) {
  return static_cast<int>(std::count_if(shares.begin(), shares.end(), [](double s) { return s > 0.0; }));
}

void check_same_regions(const WeightedClustering& u, const WeightedClustering& v) {
  u.validate();
  v.validate();
  require(u.region_ids == v.region_ids, ErrorCode::InvalidArgument,
          "clusterings cover different region sets (align them first)");
  for (std::size_t i = 0; i < u.weights.size(); ++i) {
    require(std::abs(u.weights[i] - v.weights[i]) <= 1e-9 * std::max(u.weights[i], v.weights[i]),
            ErrorCode::InvalidArgument, "region " + u.region_ids[i] + " has different weights in the two clusterings");
  }
}

double mutual_information_of(const std::vector<int>& lu, int ku, const std::vector<int>& lv, int kv,
                             const std::vector<double>& w) {
  MatrixXd joint = MatrixXd::Zero(ku, kv);
  double total = 0.0;
  for (std::size_t i = 0; i < lu.size(); ++i) {
    joint(lu[i], lv[i]) += w[i];
    total += w[i];
  }
  joint /= total;
  const VectorXd pu = joint.rowwise().sum(), pv = joint.colwise().sum().transpose();
  double mi = 0.0;
  for (Index i = 0; i < ku; ++i) {
    for (Index j = 0; j < kv; ++j) {
      const double p = joint(i, j);
      if (p > 0.0) mi += p * std::log(p / (pu(i) * pv(j)));
    }
  }
  return std::max(mi, 0.0);
}

bool uniform_weights(const WeightedClustering& c) {
  const double w0 = c.weights.front();
  return std::all_of(c.weights.begin(), c.weights.end(),
                     [&](double w) { return std::abs(w - w0) <= 1e-12 * w0; });
}

// True when the two label vectors induce the same partition of the regions.
bool same_partition(const WeightedClustering& u, const WeightedClustering& v) {
  std::unordered_map<int, int> fwd, back;
  for (std::size_t i = 0; i < u.labels.size(); ++i) {
    const auto f = fwd.emplace(u.labels[i], v.labels[i]).first;
    const auto b = back.emplace(v.labels[i], u.labels[i]).first;
    if (f->second != v.labels[i] || b->second != u.labels[i]) return false;
  }
  return true;
}

}  // namespace

double weighted_entropy(const WeightedClustering& c) {
  c.validate();
  double h = 0.0;
  for (double p : cluster_shares(c)) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::max(h, 0.0);
}

double weighted_mutual_information(const WeightedClustering& u, const WeightedClustering& v) {
  check_same_regions(u, v);
  return mutual_information_of(u.labels, u.k, v.labels, v.k, u.weights);
}

std::string_view to_string(AmiMode mode) {
  switch (mode) {
    case AmiMode::Analytic: return "analytic";
    case AmiMode::Permutation: return "permutation";
    case AmiMode::Auto: return "auto";
  }
  return "auto";
}

AmiMode parse_ami_mode(std::string_view text) {
  if (text == "analytic") return AmiMode::Analytic;
  if (text == "permutation") return AmiMode::Permutation;
  if (text == "auto") return AmiMode::Auto;
  fail(ErrorCode::InvalidArgument, "unknown AMI mode '" + std::string(text) + "'");
}

double expected_mutual_information_analytic(const WeightedClustering& u, const WeightedClustering& v) {
  check_same_regions(u, v);
  // Area shares become generalized counts over N = number of regions.
  const double N = static_cast<double>(u.region_ids.size());
  auto counts = [&](const WeightedClustering& c) {
    std::vector<double> a;
    for (double s : cluster_shares(c)) {
      if (s <= 0.0) continue;
      double x = s * N;
      if (std::abs(x - std::round(x)) < 1e-9) x = std::round(x);
      a.push_back(x);
    }
    return a;
  };
  const auto a = counts(u), b = counts(v);
  const double lg_n = std::lgamma(N + 1.0);
  double emi = 0.0;
  for (double ai : a) {
    for (double bj : b) {
      const double base = std::lgamma(ai + 1.0) + std::lgamma(bj + 1.0) + std::lgamma(N - ai + 1.0) +
                          std::lgamma(N - bj + 1.0) - lg_n;
      const double lo = std::max(0.0, ai + bj - N), hi = std::min(ai, bj);
      double mass = 0.0, acc = 0.0;
      for (double nij = lo; nij <= hi + 1e-9; nij += 1.0) {
        const double p = std::exp(base - std::lgamma(nij + 1.0) - std::lgamma(ai - nij + 1.0) -
                                  std::lgamma(bj - nij + 1.0) - std::lgamma(N - ai - bj + nij + 1.0));
        mass += p;
        if (nij > 0.0) acc += p * (nij / N) * std::log(N * nij / (ai * bj));
      }
      // With non-integer counts the unit-step support no longer sums to one.
      if (mass > 0.0) emi += acc / mass;
    }
  }
  return emi;
}

double expected_mutual_information_permutation(const WeightedClustering& u, const WeightedClustering& v, int n_perm,
                                               std::uint64_t seed) {
  check_same_regions(u, v);
  require(n_perm >= 1, ErrorCode::InvalidArgument, "n_perm must be >= 1");
  Rng rng = make_rng(seed, "ami-permutation");
  std::vector<int> lv = v.labels;
  double sum = 0.0;
  for (int p = 0; p < n_perm; ++p) {
    lv = v.labels;
    shuffle(lv.begin(), lv.end(), rng);
    sum += mutual_information_of(u.labels, u.k, lv, v.k, u.weights);
  }
  return sum / static_cast<double>(n_perm);
}

double adjusted_mutual_information(const WeightedClustering& u, const WeightedClustering& v,
                                   const AmiOptions& options) {
  check_same_regions(u, v);
  const int cu = occupied(cluster_shares(u)), cv = occupied(cluster_shares(v));
  if (cu == 1 && cv == 1) return 1.0;
  if (cu == 1 || cv == 1) return 0.0;
  // I(U, V) = H(U) = H(V) here; skip the rounding in the general formula.
  if (same_partition(u, v)) return 1.0;
  const double hu = weighted_entropy(u), hv = weighted_entropy(v);
  const double mi = weighted_mutual_information(u, v);
  AmiMode mode = options.mode;
  if (mode == AmiMode::Auto) mode = uniform_weights(u) ? AmiMode::Analytic : AmiMode::Permutation;
  const double emi = mode == AmiMode::Analytic
                         ? expected_mutual_information_analytic(u, v)
                         : expected_mutual_information_permutation(u, v, options.n_perm, options.seed);
  const double denom = std::max(hu, hv) - emi;
  require(std::abs(denom) >= 1e-12, ErrorCode::InvalidArgument, "AMI denominator vanishes");
  return (mi - emi) / denom;
}

WeightedClustering align_clustering(const WeightedClustering& c, const std::vector<std::string>& ids) {
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < c.region_ids.size(); ++i) pos[c.region_ids[i]] = i;
  WeightedClustering out;
  out.k = c.k;
  std::string missing;
  for (const auto& id : ids) {
    const auto it = pos.find(id);
    if (it == pos.end()) {
      missing += (missing.empty() ? "" : ",") + id;
      continue;
    }
    out.region_ids.push_back(id);
    out.labels.push_back(c.labels[it->second]);
    out.weights.push_back(c.weights[it->second]);
  }
  require(missing.empty(), ErrorCode::InvalidArgument, "regions missing from clustering: " + missing);
  return out;
}

// ---- choosing k ------------------------------------------------------------

double within_cluster_ss(const MatrixXd& x, const std::vector<int>& labels) {
  require(static_cast<Index>(labels.size()) == x.rows(), ErrorCode::InvalidArgument, "one label per row required");
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  MatrixXd sums = MatrixXd::Zero(k, x.cols());
  std::vector<double> counts(static_cast<std::size_t>(k), 0.0);
  for (Index i = 0; i < x.rows(); ++i) {
    sums.row(labels[static_cast<std::size_t>(i)]) += x.row(i);
    counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] += 1.0;
  }
  double ss = 0.0;
  for (Index i = 0; i < x.rows(); ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    ss += (x.row(i) - sums.row(l) / counts[static_cast<std::size_t>(l)]).squaredNorm();
  }
  return ss;
}

double silhouette_score(const MatrixXd& x, const std::vector<int>& labels) {
  const Index n = x.rows();
  require(static_cast<Index>(labels.size()) == n, ErrorCode::InvalidArgument, "one label per row required");
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  require(k >= 2, ErrorCode::InvalidArgument, "silhouette needs at least 2 clusters");
  std::vector<double> counts(static_cast<std::size_t>(k), 0.0);
  for (int l : labels) counts[static_cast<std::size_t>(l)] += 1.0;
  double total = 0.0;
  std::vector<double> dist_sum(static_cast<std::size_t>(k));
  for (Index i = 0; i < n; ++i) {
    std::fill(dist_sum.begin(), dist_sum.end(), 0.0);
    for (Index j = 0; j < n; ++j) {
      if (j != i) dist_sum[static_cast<std::size_t>(labels[static_cast<std::size_t>(j)])] += (x.row(i) - x.row(j)).squaredNorm();
    }
    const int own = labels[static_cast<std::size_t>(i)];
    if (counts[static_cast<std::size_t>(own)] <= 1.0) continue;  // singleton scores 0
    const double a = dist_sum[static_cast<std::size_t>(own)] / (counts[static_cast<std::size_t>(own)] - 1.0);
    double b = std::numeric_limits<double>::infinity();
    for (int l = 0; l < k; ++l) {
      if (l != own && counts[static_cast<std::size_t>(l)] > 0.0) b = std::min(b, dist_sum[static_cast<std::size_t>(l)] / counts[static_cast<std::size_t>(l)]);
    }
    const double m = std::max(a, b);
    if (m > 0.0) total += (b - a) / m;
  }
  return total / static_cast<double>(n);
}

KChoice choose_k(const MatrixXd& x, int k_min, int k_max) {
  const int n = static_cast<int>(x.rows());
  require(k_min <= k_max, ErrorCode::InvalidArgument, "empty k range");
  require(k_min >= 2 && k_max <= n - 1, ErrorCode::InvalidArgument,
          "k range must lie within [2, " + std::to_string(n - 1) + "]");
  const auto merges = ward_linkage(x);
  std::map<int, double> inertia;
  for (int k = k_min - 1; k <= k_max + 1; ++k) inertia[k] = within_cluster_ss(x, cut_linkage(merges, n, k));
  KChoice out;
  double best_curv = -std::numeric_limits<double>::infinity(), best_sil = -std::numeric_limits<double>::infinity();
  for (int k = k_min; k <= k_max; ++k) {
    const auto labels = cut_linkage(merges, n, k);
    out.ks.push_back(k);
    out.inertia.push_back(inertia[k]);
    const double sil = silhouette_score(x, labels);
    out.silhouette.push_back(sil);
    const double curv = inertia[k - 1] - 2.0 * inertia[k] + inertia[k + 1];
    if (curv > best_curv) {
      best_curv = curv;
      out.suggested_k = k;
    }
    if (sil > best_sil) {
      best_sil = sil;
      out.best_silhouette_k = k;
    }
  }
  return out;
}

std::string KChoice::to_json() const {
  ordered_json j = {{"k", ks},
                    {"inertia", inertia},
                    {"silhouette", silhouette},
                    {"suggested_k", suggested_k},
                    {"best_silhouette_k", best_silhouette_k}};
  return j.dump(2) + "\n";
}

std::string clustering_to_csv(const WeightedClustering& c) {
  std::string out = "region_id,cluster\n";
  for (std::size_t i = 0; i < c.region_ids.size(); ++i) out += c.region_ids[i] + "," + std::to_string(c.labels[i]) + "\n";
  return out;
}

WeightedClustering clustering_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  require(io::trim(line) == "region_id,cluster", ErrorCode::Data, "clustering CSV: bad header");
  std::vector<std::string> ids;
  std::vector<int> labels;
  while (std::getline(in, line)) {
    if (io::trim(line).empty()) continue;
    const auto f = io::split(io::trim(line), ',');
    require(f.size() == 2, ErrorCode::Data, "clustering CSV: expected 2 fields");
    ids.emplace_back(f[0]);
    labels.push_back(static_cast<int>(io::parse_int(f[1])));
  }
  return WeightedClustering::uniform(std::move(ids), std::move(labels));
}

}  // namespace mtcr
