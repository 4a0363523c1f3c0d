#include "mtcr/tcn_autoencoder.hpp"

#include "mtcr/io.hpp"

#include <json.hpp>

#include <cmath>
#include <numeric>
#include <sstream>

namespace mtcr {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string_view to_string(Activation a) { return a == Activation::Relu ? "relu" : "tanh"; }

Activation parse_activation(std::string_view text) {
  if (text == "relu") return Activation::Relu;
  if (text == "tanh") return Activation::Tanh;
  fail(ErrorCode::InvalidArgument, "unknown activation '" + std::string(text) + "'");
}

void TcnConfig::validate() const {
  require(input_channels >= 1, ErrorCode::InvalidArgument, "input_channels must be >= 1");
  require(!channels.empty() && channels.size() == dilations.size(), ErrorCode::InvalidArgument,
          "one channel width per dilation required");
  for (int c : channels) require(c >= 1, ErrorCode::InvalidArgument, "channel widths must be >= 1");
  require(kernel_size >= 2, ErrorCode::InvalidArgument, "kernel size must be >= 2");
  for (std::size_t i = 0; i < dilations.size(); ++i) {
    const int d = dilations[i];
    require(d >= 1 && (d & (d - 1)) == 0, ErrorCode::InvalidArgument, "dilations must be powers of two");
    require(i == 0 || d > dilations[i - 1], ErrorCode::InvalidArgument, "dilations must be strictly increasing");
  }
  require(pool >= 1, ErrorCode::InvalidArgument, "pool factor must be >= 1");
  require(bottleneck >= 1, ErrorCode::InvalidArgument, "bottleneck dim must be >= 1");
  require(learning_rate >= 0.0 && std::isfinite(learning_rate), ErrorCode::InvalidArgument, "bad learning rate");
  require(epochs >= 0 && batch_size >= 1, ErrorCode::InvalidArgument, "epochs >= 0 and batch_size >= 1 required");
  require(length >= receptive_field(), ErrorCode::InvalidArgument,
          "series length " + std::to_string(length) + " is shorter than the receptive field; minimum length is " +
              std::to_string(receptive_field()));
}

int TcnConfig::receptive_field() const {
  int rf = 1;
  for (int d : dilations) rf += (kernel_size - 1) * d;
  return rf;
}

std::string TcnConfig::to_json() const {
  nlohmann::json j = {{"input_channels", input_channels}, {"channels", channels},
                      {"kernel_size", kernel_size},       {"dilations", dilations},
                      {"pool", pool},                     {"bottleneck", bottleneck},
                      {"length", length},                 {"activation", to_string(activation)},
                      {"learning_rate", learning_rate},   {"epochs", epochs},
                      {"batch_size", batch_size},         {"seed", seed}};
  return j.dump();
}

TcnConfig TcnConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  TcnConfig c;
  c.input_channels = j.at("input_channels").get<int>();
  c.channels = j.at("channels").get<std::vector<int>>();
  c.kernel_size = j.at("kernel_size").get<int>();
  c.dilations = j.at("dilations").get<std::vector<int>>();
  c.pool = j.at("pool").get<int>();
  c.bottleneck = j.at("bottleneck").get<int>();
  c.length = j.at("length").get<int>();
  c.activation = parse_activation(j.at("activation").get<std::string>());
  c.learning_rate = j.at("learning_rate").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

// ---------------------------------------------------------------------------

namespace {

struct ConvLayer {
  std::size_t w, b;
  int dilation;
};

// Layer parameter indices follow construction order in the constructor.
struct Layout {
  std::vector<ConvLayer> enc, dec;
  std::size_t enc_fc_w, enc_fc_b, dec_fc_w, dec_fc_b, head_w, head_b;
};

Layout layout_of(const TcnConfig& c) {
  Layout l;
  std::size_t k = 0;
  for (int d : c.dilations) {
    l.enc.push_back({k, k + 1, d});
    k += 2;
  }
  l.enc_fc_w = k++;
  l.enc_fc_b = k++;
  l.dec_fc_w = k++;
  l.dec_fc_b = k++;
  for (int d : c.dilations) {
    l.dec.push_back({k, k + 1, d});
    k += 2;
  }
  l.head_w = k++;
  l.head_b = k++;
  return l;
}

/// Causal im2col: column (c*K + j) holds channel c shifted right by
/// d*(K-1-j) with zero fill.
MatrixXd im2col(const MatrixXd& h, int kernel, int dilation) {
  const Index T = h.rows(), C = h.cols();
  MatrixXd col = MatrixXd::Zero(T, C * kernel);
  for (Index c = 0; c < C; ++c) {
    for (int j = 0; j < kernel; ++j) {
      const Index s = static_cast<Index>(dilation) * (kernel - 1 - j);
      if (s < T) col.col(c * kernel + j).tail(T - s) = h.col(c).head(T - s);
    }
  }
  return col;
}

MatrixXd col2im(const MatrixXd& dcol, Index channels, int kernel, int dilation) {
  const Index T = dcol.rows();
  MatrixXd dh = MatrixXd::Zero(T, channels);
  for (Index c = 0; c < channels; ++c) {
    for (int j = 0; j < kernel; ++j) {
      const Index s = static_cast<Index>(dilation) * (kernel - 1 - j);
      if (s < T) dh.col(c).head(T - s) += dcol.col(c * kernel + j).tail(T - s);
    }
  }
  return dh;
}

void activate(Activation a, const MatrixXd& pre, MatrixXd& out) {
  if (a == Activation::Relu) {
    out = pre.cwiseMax(0.0);
  } else {
    out = pre.array().tanh().matrix();
  }
}

/// dpre = dout * act'(pre), using the cached output for tanh.
MatrixXd activation_backward(Activation a, const MatrixXd& pre, const MatrixXd& out, const MatrixXd& dout) {
  if (a == Activation::Relu) return (pre.array() > 0.0).select(dout, 0.0);
  return (dout.array() * (1.0 - out.array().square())).matrix();
}

}  // namespace

struct TcnAutoencoder::Cache {
  std::vector<MatrixXd> enc_in, enc_col, enc_pre, enc_out;
  MatrixXd pooled;  // Tp x C
  VectorXd flat, z, u;
  std::vector<MatrixXd> dec_in, dec_col, dec_pre, dec_out;
  MatrixXd xhat;  // T x C_in
};

TcnAutoencoder::TcnAutoencoder(TcnConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng = make_rng(config_.seed, "ae-init");
  const int K = config_.kernel_size;
  int in = config_.input_channels;
  for (std::size_t b = 0; b < config_.channels.size(); ++b) {
    const int out = config_.channels[b];
    params_.add("enc_conv" + std::to_string(b) + "_w", nn::uniform_init(out, in * K, in * K, rng));
    params_.add("enc_conv" + std::to_string(b) + "_b", MatrixXd::Zero(out, 1));
    in = out;
  }
  const int hidden = config_.channels.back();
  const int flat = hidden * config_.pooled_length();
  params_.add("enc_fc_w", nn::uniform_init(config_.bottleneck, flat, flat, rng));
  params_.add("enc_fc_b", nn::uniform_init(config_.bottleneck, 1, flat, rng));
  params_.add("dec_fc_w", nn::uniform_init(flat, config_.bottleneck, config_.bottleneck, rng));
  params_.add("dec_fc_b", nn::uniform_init(flat, 1, config_.bottleneck, rng));
  in = hidden;
  for (std::size_t b = 0; b < config_.channels.size(); ++b) {
    const int out = config_.channels[config_.channels.size() - 1 - b];
    params_.add("dec_conv" + std::to_string(b) + "_w", nn::uniform_init(out, in * K, in * K, rng));
    params_.add("dec_conv" + std::to_string(b) + "_b", MatrixXd::Zero(out, 1));
    in = out;
  }
  params_.add("head_w", nn::uniform_init(config_.input_channels, in, in, rng));
  params_.add("head_b", nn::uniform_init(config_.input_channels, 1, in, rng));
}

void TcnAutoencoder::check_input(const MatrixXd& x) const {
  require(x.cols() >= config_.receptive_field(), ErrorCode::InvalidArgument,
          "series of length " + std::to_string(x.cols()) + " is shorter than the receptive field; minimum length is " +
              std::to_string(config_.receptive_field()));
  require(x.rows() == config_.input_channels && x.cols() == config_.length, ErrorCode::InvalidArgument,
          "input shape " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) + " does not match model " +
              std::to_string(config_.input_channels) + "x" + std::to_string(config_.length));
  require(x.allFinite(), ErrorCode::InvalidArgument, "input contains non-finite values");
}

void TcnAutoencoder::forward(const MatrixXd& x_tc, Cache& cache) const {
  const Layout L = layout_of(config_);
  const int K = config_.kernel_size;
  const Index T = x_tc.rows();
  const Index Tp = config_.pooled_length();
  const int P = config_.pool;

  MatrixXd h = x_tc;
  for (const auto& layer : L.enc) {
    cache.enc_in.push_back(h);
    cache.enc_col.push_back(im2col(h, K, layer.dilation));
    MatrixXd pre = cache.enc_col.back() * params_[layer.w].transpose();
    pre.rowwise() += params_[layer.b].col(0).transpose();
    MatrixXd out;
    activate(config_.activation, pre, out);
    cache.enc_pre.push_back(std::move(pre));
    cache.enc_out.push_back(out);
    h = std::move(out);
  }

  const Index C = h.cols();
  cache.pooled = MatrixXd::Zero(Tp, C);
  for (Index p = 0; p < Tp; ++p) {
    const Index t0 = p * P, t1 = std::min<Index>(T, t0 + P);
    cache.pooled.row(p) = h.middleRows(t0, t1 - t0).colwise().mean();
  }
  cache.flat = Eigen::Map<const VectorXd>(cache.pooled.data(), cache.pooled.size());
  cache.z = params_[L.enc_fc_w] * cache.flat + params_[L.enc_fc_b].col(0);

  cache.u = params_[L.dec_fc_w] * cache.z + params_[L.dec_fc_b].col(0);
  const Eigen::Map<const MatrixXd> u(cache.u.data(), Tp, C);
  MatrixXd g(T, C);
  for (Index t = 0; t < T; ++t) g.row(t) = u.row(t / P);
  for (const auto& layer : L.dec) {
    cache.dec_in.push_back(g);
    cache.dec_col.push_back(im2col(g, K, layer.dilation));
    MatrixXd pre = cache.dec_col.back() * params_[layer.w].transpose();
    pre.rowwise() += params_[layer.b].col(0).transpose();
    MatrixXd out;
    activate(config_.activation, pre, out);
    cache.dec_pre.push_back(std::move(pre));
    cache.dec_out.push_back(out);
    g = std::move(out);
  }
  cache.xhat = g * params_[L.head_w].transpose();
  cache.xhat.rowwise() += params_[L.head_b].col(0).transpose();
}

VectorXd TcnAutoencoder::encode(const MatrixXd& x) const {
  check_input(x);
  Cache cache;
  forward(x.transpose(), cache);
  return cache.z;
}

MtcEmbedding TcnAutoencoder::encode(const MultivariateSeries& mv) const {
  require(mv.normalized, ErrorCode::InvalidArgument, "cell " + std::to_string(mv.cell_id) + ": series not normalized");
  return {mv.cell_id, encode(mv.values)};
}

MatrixXd TcnAutoencoder::decode(const VectorXd& z) const {
  require(z.size() == config_.bottleneck, ErrorCode::InvalidArgument, "embedding dimension mismatch");
  const Layout L = layout_of(config_);
  const int K = config_.kernel_size;
  const Index T = config_.length, Tp = config_.pooled_length();
  const int P = config_.pool;
  const Index C = config_.channels.back();
  const VectorXd uvec = params_[L.dec_fc_w] * z + params_[L.dec_fc_b].col(0);
  const Eigen::Map<const MatrixXd> u(uvec.data(), Tp, C);
  MatrixXd g(T, C);
  for (Index t = 0; t < T; ++t) g.row(t) = u.row(t / P);
  for (const auto& layer : L.dec) {
    MatrixXd pre = im2col(g, K, layer.dilation) * params_[layer.w].transpose();
    pre.rowwise() += params_[layer.b].col(0).transpose();
    activate(config_.activation, pre, g);
  }
  MatrixXd xhat = g * params_[L.head_w].transpose();
  xhat.rowwise() += params_[L.head_b].col(0).transpose();
  return xhat.transpose();
}

MatrixXd TcnAutoencoder::reconstruct(const MatrixXd& x) const {
  check_input(x);
  Cache cache;
  forward(x.transpose(), cache);
  return cache.xhat.transpose();
}

std::vector<MatrixXd> TcnAutoencoder::encoder_activations(const MatrixXd& x) const {
  check_input(x);
  Cache cache;
  forward(x.transpose(), cache);
  return cache.enc_out;
}

double TcnAutoencoder::accumulate_gradient(const MatrixXd& x, nn::ParamStore& grads, double scale) const {
  check_input(x);
  const Layout L = layout_of(config_);
  const int K = config_.kernel_size;
  const int P = config_.pool;
  const MatrixXd x_tc = x.transpose();
  Cache cache;
  forward(x_tc, cache);
  const Index T = x_tc.rows(), Tp = config_.pooled_length();

  const MatrixXd diff = cache.xhat - x_tc;
  const double sse = diff.squaredNorm();
  const MatrixXd dxhat = 2.0 * scale * diff;

  // Head.
  const MatrixXd& g_last = cache.dec_out.back();
  grads[L.head_w] += dxhat.transpose() * g_last;
  grads[L.head_b] += dxhat.colwise().sum().transpose();
  MatrixXd dg = dxhat * params_[L.head_w];

  for (std::size_t i = L.dec.size(); i-- > 0;) {
    const auto& layer = L.dec[i];
    const MatrixXd dpre = activation_backward(config_.activation, cache.dec_pre[i], cache.dec_out[i], dg);
    grads[layer.w] += dpre.transpose() * cache.dec_col[i];
    grads[layer.b] += dpre.colwise().sum().transpose();
    dg = col2im(dpre * params_[layer.w], cache.dec_in[i].cols(), K, layer.dilation);
  }

  // Upsample backward: each pooled step collects its P copies.
  const Index C = dg.cols();
  MatrixXd du = MatrixXd::Zero(Tp, C);
  for (Index t = 0; t < T; ++t) du.row(t / P) += dg.row(t);
  const Eigen::Map<const VectorXd> du_vec(du.data(), du.size());
  grads[L.dec_fc_w] += du_vec * cache.z.transpose();
  grads[L.dec_fc_b] += du_vec;
  const VectorXd dz = params_[L.dec_fc_w].transpose() * du_vec;

  grads[L.enc_fc_w] += dz * cache.flat.transpose();
  grads[L.enc_fc_b] += dz;
  const VectorXd dflat = params_[L.enc_fc_w].transpose() * dz;
  const Eigen::Map<const MatrixXd> dpooled(dflat.data(), Tp, C);

  MatrixXd dh = MatrixXd::Zero(T, C);
  for (Index p = 0; p < Tp; ++p) {
    const Index t0 = p * P, t1 = std::min<Index>(T, t0 + P);
    const double inv = 1.0 / static_cast<double>(t1 - t0);
    for (Index t = t0; t < t1; ++t) dh.row(t) = inv * dpooled.row(p);
  }

  for (std::size_t i = L.enc.size(); i-- > 0;) {
    const auto& layer = L.enc[i];
    const MatrixXd dpre = activation_backward(config_.activation, cache.enc_pre[i], cache.enc_out[i], dh);
    grads[layer.w] += dpre.transpose() * cache.enc_col[i];
    grads[layer.b] += dpre.colwise().sum().transpose();
    if (i > 0) dh = col2im(dpre * params_[layer.w], cache.enc_in[i].cols(), K, layer.dilation);
  }
  return sse;
}

nn::Checkpoint TcnAutoencoder::to_checkpoint() const {
  nlohmann::json meta = {{"config", nlohmann::json::parse(config_.to_json())}, {"training_log", training_log}};
  if (normalization) meta["normalization"] = {{"loc", normalization->loc}, {"scale", normalization->scale}};
  return {"tcn_autoencoder", meta.dump(), params_};
}

TcnAutoencoder TcnAutoencoder::from_checkpoint(const nn::Checkpoint& ckpt) {
  require(ckpt.kind == "tcn_autoencoder", ErrorCode::Data, "checkpoint is not a TCN autoencoder");
  const auto meta = nlohmann::json::parse(ckpt.metadata_json);
  TcnAutoencoder model(TcnConfig::from_json(meta.at("config").dump()));
  require(model.params_.size() == ckpt.params.size(), ErrorCode::Data, "checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    require(model.params_.name(i) == ckpt.params.name(i) && model.params_[i].rows() == ckpt.params[i].rows() &&
                model.params_[i].cols() == ckpt.params[i].cols(),
            ErrorCode::Data, "checkpoint tensor " + ckpt.params.name(i) + " does not match the config");
    model.params_[i] = ckpt.params[i];
  }
  model.training_log = meta.at("training_log").get<std::vector<double>>();
  if (meta.contains("normalization")) {
    model.normalization = NormalizationStats{meta["normalization"].at("loc").get<std::vector<double>>(),
                                             meta["normalization"].at("scale").get<std::vector<double>>()};
  }
  return model;
}

// ---------------------------------------------------------------------------

double mean_squared_error(const std::vector<MatrixXd>& x, const std::vector<MatrixXd>& reconstruction) {
  require(!x.empty() && x.size() == reconstruction.size(), ErrorCode::InvalidArgument,
          "batch must be nonempty and sizes must match");
  double total = 0.0;
  double count = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    require(x[i].rows() == reconstruction[i].rows() && x[i].cols() == reconstruction[i].cols() &&
                x[i].rows() == x[0].rows() && x[i].cols() == x[0].cols(),
            ErrorCode::InvalidArgument, "shape mismatch in batch");
    total += (x[i] - reconstruction[i]).squaredNorm();
    count += static_cast<double>(x[i].size());
  }
  return total / count;
}

double reconstruction_loss(const TcnAutoencoder& model, const std::vector<MatrixXd>& batch) {
  std::vector<MatrixXd> rec;
  rec.reserve(batch.size());
  for (const auto& x : batch) rec.push_back(model.reconstruct(x));
  return mean_squared_error(batch, rec);
}

double reconstruction_loss(const TcnAutoencoder& model, const std::vector<MultivariateSeries>& batch) {
  std::vector<MatrixXd> xs;
  xs.reserve(batch.size());
  for (const auto& mv : batch) xs.push_back(mv.values);
  return reconstruction_loss(model, xs);
}

TcnAutoencoder train_autoencoder(TcnConfig config, const std::vector<MultivariateSeries>& training,
                                 const EpochCallback& on_epoch) {
  require(!training.empty(), ErrorCode::InvalidArgument, "no training cells");
  if (config.length == 0) config.length = static_cast<int>(training.front().values.cols());
  if (config.input_channels == 0) config.input_channels = static_cast<int>(training.front().values.rows());
  TcnAutoencoder model(config);
  const auto n = training.size();
  for (const auto& mv : training) {
    require(mv.values.rows() == config.input_channels && mv.values.cols() == config.length, ErrorCode::InvalidArgument,
            "cell " + std::to_string(mv.cell_id) + ": series shape differs from the training length");
  }

  nn::Adam adam(config.learning_rate);
  nn::ParamStore grads = model.params().zeros_like();
  Rng rng = make_rng(config.seed, "ae-shuffle");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const double per_sample = static_cast<double>(config.input_channels) * config.length;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle(order.begin(), order.end(), rng);
    double epoch_sse = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(config.batch_size));
      grads.set_zero();
      const double scale = 1.0 / (static_cast<double>(end - start) * per_sample);
      for (std::size_t i = start; i < end; ++i) {
        epoch_sse += model.accumulate_gradient(training[order[i]].values, grads, scale);
      }
      if (!std::isfinite(epoch_sse) || !grads.all_finite()) {
        fail(ErrorCode::Divergence, "autoencoder diverged (non-finite loss) at epoch " + std::to_string(epoch + 1));
      }
      adam.step(model.params(), grads);
    }
    const double loss = epoch_sse / (static_cast<double>(n) * per_sample);
    model.training_log.push_back(loss);
    if (on_epoch) on_epoch(epoch + 1, loss);
  }
  return model;
}

std::vector<MtcEmbedding> embed_all(const TcnAutoencoder& model, const std::vector<MultivariateSeries>& cells) {
  std::vector<MtcEmbedding> out;
  out.reserve(cells.size());
  for (const auto& mv : cells) {
    try {
      out.push_back(model.encode(mv));
    } catch (const Error& e) {
      fail(e.code(), "cell " + std::to_string(mv.cell_id) + ": " + e.what());
    }
  }
  return out;
}

std::string embeddings_to_csv(const std::vector<MtcEmbedding>& embeddings) {
  std::string out = "cell_id";
  const Index d = embeddings.empty() ? 0 : embeddings.front().z.size();
  for (Index i = 0; i < d; ++i) out += ",z_" + std::to_string(i);
  out += '\n';
  for (const auto& e : embeddings) {
    out += std::to_string(e.cell_id);
    for (Index i = 0; i < e.z.size(); ++i) out += ',' + io::format_double(e.z(i));
    out += '\n';
  }
  return out;
}

std::vector<MtcEmbedding> embeddings_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  require(line.rfind("cell_id", 0) == 0, ErrorCode::Data, "embeddings CSV: bad header");
  const auto width = io::split(io::trim(line), ',').size();
  std::vector<MtcEmbedding> out;
  while (std::getline(in, line)) {
    if (io::trim(line).empty()) continue;
    const auto f = io::split(io::trim(line), ',');
    require(f.size() == width, ErrorCode::Data, "embeddings CSV: row width differs from header");
    MtcEmbedding e;
    e.cell_id = io::parse_int(f[0]);
    e.z.resize(static_cast<Index>(width - 1));
    for (std::size_t i = 1; i < width; ++i) e.z(static_cast<Index>(i - 1)) = io::parse_double(f[i]);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace mtcr
