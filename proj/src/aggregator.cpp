#include "mtcr/aggregator.hpp"

#include "mtcr/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mtcr {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {
constexpr double kLayerNormEps = 1e-5;
}

std::string_view to_string(AggregatorKind kind) {
  return kind == AggregatorKind::WeightedSum ? "weighted_sum" : "transformer";
}

AggregatorKind parse_aggregator_kind(std::string_view text) {
  if (text == "weighted_sum") return AggregatorKind::WeightedSum;
  if (text == "transformer") return AggregatorKind::Transformer;
  fail(ErrorCode::InvalidArgument, "unknown aggregator kind '" + std::string(text) + "'");
}

void AggregatorConfig::validate() const {
  require(input_dim >= 1 && output_dim >= 1, ErrorCode::InvalidArgument, "aggregator dims must be >= 1");
  require(ff_width >= 1 && layers >= 1, ErrorCode::InvalidArgument, "transformer needs >= 1 layer and ff width");
  require(cap >= 1, ErrorCode::InvalidArgument, "cap must be >= 1");
  require(margin >= 0.0 && std::isfinite(margin), ErrorCode::InvalidArgument, "margin must be >= 0");
  require(hops >= 1, ErrorCode::InvalidArgument, "hops must be >= 1");
  require(learning_rate >= 0.0 && std::isfinite(learning_rate), ErrorCode::InvalidArgument, "bad learning rate");
  require(epochs >= 0 && batch_size >= 1, ErrorCode::InvalidArgument, "epochs >= 0 and batch_size >= 1 required");
}

std::string AggregatorConfig::to_json() const {
  nlohmann::json j = {{"kind", to_string(kind)}, {"input_dim", input_dim},
                      {"output_dim", output_dim}, {"ff_width", ff_width},
                      {"layers", layers},         {"cap", cap},
                      {"margin", margin},         {"hops", hops},
                      {"learning_rate", learning_rate}, {"epochs", epochs},
                      {"batch_size", batch_size}, {"seed", seed}};
  return j.dump();
}

AggregatorConfig AggregatorConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  AggregatorConfig c;
  c.kind = parse_aggregator_kind(j.at("kind").get<std::string>());
  c.input_dim = j.at("input_dim").get<int>();
  c.output_dim = j.at("output_dim").get<int>();
  c.ff_width = j.at("ff_width").get<int>();
  c.layers = j.at("layers").get<int>();
  c.cap = j.at("cap").get<int>();
  c.margin = j.at("margin").get<double>();
  c.hops = j.at("hops").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

// ---------------------------------------------------------------------------

void RegionFeatureMatrix::validate() const {
  require(x.rows() == static_cast<Index>(mask.size()), ErrorCode::InvalidArgument, "mask length differs from rows");
  int n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      ++n;
    } else {
      require(x.row(static_cast<Index>(i)).isZero(0.0), ErrorCode::InvalidArgument,
              "region " + region_id + ": padded row is not zero");
    }
  }
  require(n == count, ErrorCode::InvalidArgument, "region " + region_id + ": count differs from mask");
  require(count >= 1 && count <= x.rows(), ErrorCode::InvalidArgument, "region " + region_id + ": bad row count");
}

MatrixXd RegionFeatureMatrix::real_rows() const {
  const Index n = std::count(mask.begin(), mask.end(), char{1});
  require(n > 0, ErrorCode::InvalidArgument, "region " + region_id + ": mask has no real rows");
  MatrixXd out(n, x.cols());
  Index k = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) out.row(k++) = x.row(static_cast<Index>(i));
  }
  return out;
}

RegionFeatureMatrix build_feature_matrix(const std::string& region_id, const std::vector<int>& cell_ids,
                                         const EmbeddingIndex& embeddings, int cap, std::uint64_t seed) {
  require(cap >= 1, ErrorCode::InvalidArgument, "cap must be >= 1");
  require(!cell_ids.empty(), ErrorCode::InvalidArgument, "region " + region_id + " has no cells");
  std::vector<int> chosen = cell_ids;
  std::sort(chosen.begin(), chosen.end());
  RegionFeatureMatrix fm;
  fm.region_id = region_id;
  fm.total_cells = static_cast<int>(chosen.size());
  if (static_cast<int>(chosen.size()) > cap) {
    Rng rng(derive_seed(seed, "feature-sample:" + region_id));
    // Partial Fisher-Yates: the first `cap` slots become the sample.
    for (std::size_t i = 0; i < static_cast<std::size_t>(cap); ++i) {
      const std::size_t j = i + uniform_index(rng, chosen.size() - i);
      std::swap(chosen[i], chosen[j]);
    }
    chosen.resize(static_cast<std::size_t>(cap));
    std::sort(chosen.begin(), chosen.end());
    fm.subsampled = true;
  }
  const auto first = embeddings.find(chosen.front());
  require(first != embeddings.end(), ErrorCode::InvalidArgument,
          "region " + region_id + ": no embedding for cell " + std::to_string(chosen.front()));
  const Index dim = first->second.size();
  fm.x = MatrixXd::Zero(cap, dim);
  fm.mask.assign(static_cast<std::size_t>(cap), 0);
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    const auto it = embeddings.find(chosen[i]);
    require(it != embeddings.end(), ErrorCode::InvalidArgument,
            "region " + region_id + ": no embedding for cell " + std::to_string(chosen[i]));
    require(it->second.size() == dim, ErrorCode::InvalidArgument, "embedding dimensions differ");
    fm.x.row(static_cast<Index>(i)) = it->second.transpose();
    fm.mask[i] = 1;
  }
  fm.count = static_cast<int>(chosen.size());
  return fm;
}

double triplet_loss(const VectorXd& a, const VectorXd& p, const VectorXd& n, double margin) {
  require(a.size() == p.size() && a.size() == n.size(), ErrorCode::InvalidArgument, "triplet dimension mismatch");
  return std::max((a - p).norm() - (a - n).norm() + margin, 0.0);
}

TripletLossGrad triplet_loss_grad(const VectorXd& a, const VectorXd& p, const VectorXd& n, double margin) {
  TripletLossGrad g;
  g.loss = triplet_loss(a, p, n, margin);
  g.da = VectorXd::Zero(a.size());
  g.dp = VectorXd::Zero(a.size());
  g.dn = VectorXd::Zero(a.size());
  if (g.loss <= 0.0) return g;
  const VectorXd ap = a - p, an = a - n;
  const double dap = ap.norm(), dan = an.norm();
  // The norm is not differentiable at zero; use the zero subgradient there.
  if (dap > 0.0) {
    g.da += ap / dap;
    g.dp -= ap / dap;
  }
  if (dan > 0.0) {
    g.da -= an / dan;
    g.dn += an / dan;
  }
  return g;
}

// ---------------------------------------------------------------------------

namespace {

struct LayerNormCache {
  MatrixXd xhat;
  VectorXd inv_std;
};

MatrixXd layer_norm(const MatrixXd& x, const MatrixXd& gamma, const MatrixXd& beta, LayerNormCache& cache) {
  const Index n = x.rows(), d = x.cols();
  cache.xhat.resize(n, d);
  cache.inv_std.resize(n);
  for (Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    cache.inv_std(i) = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.xhat.row(i) = (x.row(i).array() - mu) * cache.inv_std(i);
  }
  MatrixXd y = cache.xhat.array().rowwise() * gamma.col(0).transpose().array();
  y.rowwise() += beta.col(0).transpose();
  return y;
}

MatrixXd layer_norm_backward(const MatrixXd& dy, const MatrixXd& gamma, const LayerNormCache& cache, MatrixXd& dgamma,
                             MatrixXd& dbeta) {
  dgamma.col(0) += (dy.array() * cache.xhat.array()).colwise().sum().transpose().matrix();
  dbeta.col(0) += dy.colwise().sum().transpose();
  const MatrixXd dxhat = dy.array().rowwise() * gamma.col(0).transpose().array();
  MatrixXd dx(dy.rows(), dy.cols());
  for (Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).mean();
    const double m2 = (dxhat.row(i).array() * cache.xhat.row(i).array()).mean();
    dx.row(i) = cache.inv_std(i) * (dxhat.row(i).array() - m1 - cache.xhat.row(i).array() * m2);
  }
  return dx;
}

MatrixXd linear_rows(const MatrixXd& x, const MatrixXd& w, const MatrixXd& b) {
  MatrixXd y = x * w.transpose();
  y.rowwise() += b.col(0).transpose();
  return y;
}

struct EncoderLayerCache {
  MatrixXd h, q, k, v, p, a, h1, f1, z;
  LayerNormCache ln1, ln2;
};

// Parameter offsets inside one transformer layer.
enum : std::size_t { Wq, Bq, Wk, Bk, Wv, Bv, Wo, Bo, G1, Be1, W1, C1, W2, C2, G2, Be2, kPerLayer };

}  // namespace

struct AggregatorModel::Trace {
  MatrixXd x;
  // weighted sum
  MatrixXd gate;
  VectorXd pooled;
  // transformer
  std::vector<EncoderLayerCache> layers;
};

AggregatorModel::AggregatorModel(AggregatorConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng = make_rng(config_.seed, "agg-init");
  const int D = config_.input_dim, E = config_.output_dim;
  if (config_.kind == AggregatorKind::WeightedSum) {
    params_.add("gate_w", nn::uniform_init(D, D, D, rng));
    params_.add("gate_b", nn::uniform_init(D, 1, D, rng));
    params_.add("out_w", nn::uniform_init(E, D, D, rng));
    params_.add("out_b", nn::uniform_init(E, 1, D, rng));
    return;
  }
  params_.add("proj_w", nn::uniform_init(E, D, D, rng));
  params_.add("proj_b", nn::uniform_init(E, 1, D, rng));
  const int F = config_.ff_width;
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "l" + std::to_string(l) + "_";
    for (const char* name : {"q", "k", "v", "o"}) {
      params_.add(p + "w" + name, nn::uniform_init(E, E, E, rng));
      params_.add(p + "b" + name, nn::uniform_init(E, 1, E, rng));
    }
    params_.add(p + "ln1_g", MatrixXd::Ones(E, 1));
    params_.add(p + "ln1_b", MatrixXd::Zero(E, 1));
    params_.add(p + "ff1_w", nn::uniform_init(F, E, E, rng));
    params_.add(p + "ff1_b", nn::uniform_init(F, 1, E, rng));
    params_.add(p + "ff2_w", nn::uniform_init(E, F, F, rng));
    params_.add(p + "ff2_b", nn::uniform_init(E, 1, F, rng));
    params_.add(p + "ln2_g", MatrixXd::Ones(E, 1));
    params_.add(p + "ln2_b", MatrixXd::Zero(E, 1));
  }
}

AggregatorModel::AggregatorModel(AggregatorModel&&) noexcept = default;
AggregatorModel& AggregatorModel::operator=(AggregatorModel&&) noexcept = default;
AggregatorModel::AggregatorModel(const AggregatorModel& other) = default;
AggregatorModel::~AggregatorModel() = default;

std::shared_ptr<AggregatorModel::Trace> AggregatorModel::make_trace() const { return std::make_shared<Trace>(); }

VectorXd AggregatorModel::forward(const MatrixXd& rows, Trace& t) const {
  require(rows.rows() >= 1, ErrorCode::InvalidArgument, "aggregate needs at least one real row");
  require(rows.cols() == config_.input_dim, ErrorCode::InvalidArgument, "feature dimension mismatch");
  t.x = rows;
  if (config_.kind == AggregatorKind::WeightedSum) {
    const MatrixXd pre = linear_rows(rows, params_[0], params_[1]);
    t.gate = pre.unaryExpr([](double v) { return nn::sigmoid(v); });
    t.pooled = (rows.array() * t.gate.array()).colwise().sum().transpose();
    return params_[2] * t.pooled + params_[3].col(0);
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(config_.output_dim));
  MatrixXd h = linear_rows(rows, params_[0], params_[1]);
  t.layers.assign(static_cast<std::size_t>(config_.layers), {});
  for (int l = 0; l < config_.layers; ++l) {
    const std::size_t o = 2 + static_cast<std::size_t>(l) * kPerLayer;
    auto& c = t.layers[static_cast<std::size_t>(l)];
    c.h = h;
    c.q = linear_rows(h, params_[o + Wq], params_[o + Bq]);
    c.k = linear_rows(h, params_[o + Wk], params_[o + Bk]);
    c.v = linear_rows(h, params_[o + Wv], params_[o + Bv]);
    MatrixXd s = scale * c.q * c.k.transpose();
    for (Index i = 0; i < s.rows(); ++i) {
      const double mx = s.row(i).maxCoeff();
      s.row(i) = (s.row(i).array() - mx).exp();
      s.row(i) /= s.row(i).sum();
    }
    c.p = std::move(s);
    c.a = c.p * c.v;
    const MatrixXd r1 = h + linear_rows(c.a, params_[o + Wo], params_[o + Bo]);
    c.h1 = layer_norm(r1, params_[o + G1], params_[o + Be1], c.ln1);
    c.f1 = linear_rows(c.h1, params_[o + W1], params_[o + C1]);
    c.z = c.f1.cwiseMax(0.0);
    const MatrixXd r2 = c.h1 + linear_rows(c.z, params_[o + W2], params_[o + C2]);
    h = layer_norm(r2, params_[o + G2], params_[o + Be2], c.ln2);
  }
  return h.colwise().mean().transpose();
}

void AggregatorModel::backward(const Trace& t, const VectorXd& dy, nn::ParamStore& grads) const {
  if (config_.kind == AggregatorKind::WeightedSum) {
    grads[2] += dy * t.pooled.transpose();
    grads[3].col(0) += dy;
    const VectorXd dpooled = params_[2].transpose() * dy;
    // d(sum_r x_r * g_r)/d pre = x * g * (1 - g), broadcast over rows.
    MatrixXd dpre = t.x.array() * t.gate.array() * (1.0 - t.gate.array());
    dpre.array().rowwise() *= dpooled.transpose().array();
    grads[0] += dpre.transpose() * t.x;
    grads[1].col(0) += dpre.colwise().sum().transpose();
    return;
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(config_.output_dim));
  const Index n = t.x.rows();
  MatrixXd dh = MatrixXd::Constant(n, config_.output_dim, 0.0);
  dh.rowwise() += dy.transpose() / static_cast<double>(n);
  for (int l = config_.layers - 1; l >= 0; --l) {
    const std::size_t o = 2 + static_cast<std::size_t>(l) * kPerLayer;
    const auto& c = t.layers[static_cast<std::size_t>(l)];
    const MatrixXd dr2 = layer_norm_backward(dh, params_[o + G2], c.ln2, grads[o + G2], grads[o + Be2]);
    MatrixXd dh1 = dr2;
    grads[o + W2] += dr2.transpose() * c.z;
    grads[o + C2].col(0) += dr2.colwise().sum().transpose();
    const MatrixXd df1 = (c.f1.array() > 0.0).select(dr2 * params_[o + W2], 0.0);
    grads[o + W1] += df1.transpose() * c.h1;
    grads[o + C1].col(0) += df1.colwise().sum().transpose();
    dh1 += df1 * params_[o + W1];

    const MatrixXd dr1 = layer_norm_backward(dh1, params_[o + G1], c.ln1, grads[o + G1], grads[o + Be1]);
    MatrixXd dh_in = dr1;
    grads[o + Wo] += dr1.transpose() * c.a;
    grads[o + Bo].col(0) += dr1.colwise().sum().transpose();
    const MatrixXd da = dr1 * params_[o + Wo];
    const MatrixXd dp = da * c.v.transpose();
    const MatrixXd dv = c.p.transpose() * da;
    MatrixXd ds = c.p.array() * (dp.array().colwise() - (dp.array() * c.p.array()).rowwise().sum());
    ds *= scale;
    const MatrixXd dq = ds * c.k;
    const MatrixXd dk = ds.transpose() * c.q;
    grads[o + Wq] += dq.transpose() * c.h;
    grads[o + Bq].col(0) += dq.colwise().sum().transpose();
    grads[o + Wk] += dk.transpose() * c.h;
    grads[o + Bk].col(0) += dk.colwise().sum().transpose();
    grads[o + Wv] += dv.transpose() * c.h;
    grads[o + Bv].col(0) += dv.colwise().sum().transpose();
    dh_in += dq * params_[o + Wq] + dk * params_[o + Wk] + dv * params_[o + Wv];
    dh = std::move(dh_in);
  }
  grads[0] += dh.transpose() * t.x;
  grads[1].col(0) += dh.colwise().sum().transpose();
}

VectorXd AggregatorModel::aggregate_rows(const MatrixXd& rows) const {
  Trace t;
  return forward(rows, t);
}

VectorXd AggregatorModel::aggregate(const RegionFeatureMatrix& fm) const {
  require(std::find(fm.mask.begin(), fm.mask.end(), char{1}) != fm.mask.end(), ErrorCode::InvalidArgument,
          "region " + fm.region_id + ": all-false mask");
  return aggregate_rows(fm.real_rows());
}

nn::Checkpoint AggregatorModel::to_checkpoint() const {
  nlohmann::json meta = {{"config", nlohmann::json::parse(config_.to_json())},
                         {"loss_log", loss_log},
                         {"active_log", active_log}};
  return {"region_aggregator", meta.dump(), params_};
}

AggregatorModel AggregatorModel::from_checkpoint(const nn::Checkpoint& ckpt) {
  require(ckpt.kind == "region_aggregator", ErrorCode::Data, "checkpoint is not a region aggregator");
  const auto meta = nlohmann::json::parse(ckpt.metadata_json);
  AggregatorModel model(AggregatorConfig::from_json(meta.at("config").dump()));
  require(model.params_.size() == ckpt.params.size(), ErrorCode::Data, "checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    require(model.params_.name(i) == ckpt.params.name(i) && model.params_[i].rows() == ckpt.params[i].rows() &&
                model.params_[i].cols() == ckpt.params[i].cols(),
            ErrorCode::Data, "checkpoint tensor " + ckpt.params.name(i) + " does not match the config");
    model.params_[i] = ckpt.params[i];
  }
  model.loss_log = meta.at("loss_log").get<std::vector<double>>();
  model.active_log = meta.at("active_log").get<std::vector<double>>();
  return model;
}

// ---------------------------------------------------------------------------

AggregatorModel train_aggregator(const AggregatorConfig& config, const std::vector<RegionFeatureMatrix>& features,
                                 const RegionAdjacency& adjacency, const AggregatorEpochCallback& on_epoch) {
  require(adjacency.size() >= 3, ErrorCode::InvalidArgument, "triplet training needs at least 3 regions");
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < features.size(); ++i) by_id[features[i].region_id] = i;
  std::vector<MatrixXd> rows(adjacency.size());
  for (std::size_t r = 0; r < adjacency.size(); ++r) {
    const auto it = by_id.find(adjacency.ids()[r]);
    require(it != by_id.end(), ErrorCode::InvalidArgument, "no feature matrix for region " + adjacency.ids()[r]);
    rows[r] = features[it->second].real_rows();
  }

  const auto anchors = eligible_anchors(adjacency, config.hops);
  require(!anchors.empty(), ErrorCode::InvalidArgument,
          "no eligible anchors (every region lacks a positive or a negative at hops=" + std::to_string(config.hops) + ")");

  AggregatorModel model(config);
  nn::Adam adam(config.learning_rate);
  nn::ParamStore grads = model.params().zeros_like();
  Rng order_rng = make_rng(config.seed, "agg-anchor-order");
  Rng triplet_rng = make_rng(config.seed, "triplet-sampling");
  std::vector<std::size_t> order = anchors;
  AggregatorModel::Trace ta, tp, tn;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    std::size_t active = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      grads.set_zero();
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const auto t = sample_triplet(adjacency, order[i], config.hops, triplet_rng);
        const VectorXd a = model.forward(rows[t->anchor], ta);
        const VectorXd p = model.forward(rows[t->positive], tp);
        const VectorXd n = model.forward(rows[t->negative], tn);
        const auto g = triplet_loss_grad(a, p, n, config.margin);
        loss_sum += g.loss;
        if (g.loss > 0.0) {
          ++active;
          model.backward(ta, scale * g.da, grads);
          model.backward(tp, scale * g.dp, grads);
          model.backward(tn, scale * g.dn, grads);
        }
      }
      if (!std::isfinite(loss_sum) || !grads.all_finite()) {
        fail(ErrorCode::Divergence, "aggregator diverged (non-finite loss) at epoch " + std::to_string(epoch + 1));
      }
      adam.step(model.params(), grads);
    }
    const double mean_loss = loss_sum / static_cast<double>(order.size());
    const double frac = static_cast<double>(active) / static_cast<double>(order.size());
    model.loss_log.push_back(mean_loss);
    model.active_log.push_back(frac);
    if (on_epoch) on_epoch(epoch + 1, mean_loss, frac);
  }
  return model;
}

std::vector<RegionEmbedding> embed_regions(const AggregatorModel& model,
                                           const std::vector<RegionFeatureMatrix>& features) {
  std::vector<RegionEmbedding> out;
  out.reserve(features.size());
  for (const auto& fm : features) {
    try {
      out.push_back({fm.region_id, model.aggregate(fm)});
    } catch (const Error& e) {
      fail(e.code(), "region " + fm.region_id + ": " + e.what());
    }
  }
  return out;
}

std::string region_embeddings_to_csv(const std::vector<RegionEmbedding>& embeddings) {
  std::string out = "region_id";
  const Index d = embeddings.empty() ? 0 : embeddings.front().e.size();
  for (Index i = 0; i < d; ++i) out += ",e_" + std::to_string(i);
  out += '\n';
  for (const auto& e : embeddings) {
    out += e.region_id;
    for (Index i = 0; i < e.e.size(); ++i) out += ',' + io::format_double(e.e(i));
    out += '\n';
  }
  return out;
}

std::vector<RegionEmbedding> region_embeddings_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  require(line.rfind("region_id", 0) == 0, ErrorCode::Data, "region embeddings CSV: bad header");
  const auto width = io::split(io::trim(line), ',').size();
  std::vector<RegionEmbedding> out;
  while (std::getline(in, line)) {
    if (io::trim(line).empty()) continue;
    const auto f = io::split(io::trim(line), ',');
    require(f.size() == width, ErrorCode::Data, "region embeddings CSV: row width differs from header");
    RegionEmbedding e;
    e.region_id = std::string(f[0]);
    e.e.resize(static_cast<Index>(width - 1));
    for (std::size_t i = 1; i < width; ++i) e.e(static_cast<Index>(i - 1)) = io::parse_double(f[i]);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace mtcr
