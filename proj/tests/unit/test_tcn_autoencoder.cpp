#include "mtcr/tcn_autoencoder.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace mtcr;

namespace {

TcnConfig tiny(Activation act = Activation::Tanh) {
  TcnConfig c;
  c.input_channels = 2;
  c.channels = {4, 4};
  c.kernel_size = 3;
  c.dilations = {1, 2};
  c.pool = 4;
  c.bottleneck = 4;
  c.length = 32;
  c.activation = act;
  c.seed = 11;
  return c;
}

Eigen::MatrixXd random_input(int channels, int length, std::uint64_t seed) {
  Rng rng = make_rng(seed, "tcn-test-input");
  Eigen::MatrixXd x(channels, length);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = standard_normal(rng);
  return x;
}

}  // namespace

TEST_CASE("receptive field and length validation") {
  TcnConfig c;
  c.length = 64;
  CHECK(c.receptive_field() == 15);
  c.validate();
  c.length = 14;
  try {
    c.validate();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("15") != std::string::npos);
  }
  TcnAutoencoder model(tiny());
  CHECK_THROWS_AS(model.encode(random_input(2, 31, 1)), Error);
  CHECK_THROWS_AS(model.encode(random_input(3, 32, 1)), Error);
}

TEST_CASE("shapes") {
  TcnAutoencoder model(tiny());
  const auto x = random_input(2, 32, 2);
  CHECK(model.encode(x).size() == 4);
  const auto r = model.reconstruct(x);
  CHECK(r.rows() == 2);
  CHECK(r.cols() == 32);
  const auto acts = model.encoder_activations(x);
  REQUIRE(acts.size() == 2);
  CHECK(acts[1].rows() == 32);
  CHECK(acts[1].cols() == 4);
}

TEST_CASE("encoder blocks are causal") {
  TcnAutoencoder model(tiny(Activation::Relu));
  auto x = random_input(2, 32, 3);
  const auto before = model.encoder_activations(x);
  const int t = 20;
  for (int s = t + 1; s < 32; ++s) x.col(s).setRandom();
  const auto after = model.encoder_activations(x);
  for (std::size_t b = 0; b < before.size(); ++b) {
    CHECK((before[b].topRows(t + 1) - after[b].topRows(t + 1)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((before[b].bottomRows(32 - t - 1) - after[b].bottomRows(32 - t - 1)).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("analytic gradient matches central differences") {
  for (Activation act : {Activation::Tanh, Activation::Relu}) {
    CAPTURE(to_string(act));
    TcnAutoencoder model(tiny(act));
    const auto x = random_input(2, 32, 4);
    auto grads = model.params().zeros_like();
    model.accumulate_gradient(x, grads, 1.0);
    auto sse = [&]() { return (model.reconstruct(x) - x).squaredNorm(); };
    const std::size_t n = model.params().numel();
    Rng rng = make_rng(5, "tcn-test-coords");
    int bad = 0;
    for (int k = 0; k < 100; ++k) {
      const std::size_t i = uniform_index(rng, n);
      const double h = 1e-5, orig = model.params().flat(i);
      model.params().flat(i) = orig + h;
      const double up = sse();
      model.params().flat(i) = orig - h;
      const double down = sse();
      model.params().flat(i) = orig;
      const double numeric = (up - down) / (2 * h);
      if (oracle::relative_error(grads.flat(i), numeric) >= 1e-4) ++bad;
    }
    CHECK(bad == 0);
  }
}

TEST_CASE("training reduces loss on repeated data") {
  std::vector<MultivariateSeries> cells;
  for (int c = 0; c < 4; ++c) {
    MultivariateSeries mv;
    mv.cell_id = c;
    mv.categories = {"a", "b"};
    mv.values = Eigen::MatrixXd(2, 32);
    for (int t = 0; t < 32; ++t) {
      mv.values(0, t) = std::sin(0.3 * t + c);
      mv.values(1, t) = std::cos(0.2 * t) * (c % 2 ? 1 : -1);
    }
    mv.normalized = true;
    cells.push_back(mv);
  }
  auto cfg = tiny(Activation::Relu);
  cfg.length = 0;
  cfg.epochs = 60;
  cfg.batch_size = 2;
  cfg.learning_rate = 3e-3;
  int calls = 0;
  const auto model = train_autoencoder(cfg, cells, [&](int epoch, double) { CHECK(epoch == ++calls); });
  CHECK(calls == 60);
  CHECK(model.config().length == 32);
  CHECK(model.training_log.back() < 0.5 * model.training_log.front());

  // Same seed, same model.
  const auto again = train_autoencoder(cfg, cells);
  CHECK(again.training_log == model.training_log);

  const auto emb = embed_all(model, cells);
  CHECK(emb.size() == 4);
  const auto back = embeddings_from_csv(embeddings_to_csv(emb));
  REQUIRE(back.size() == 4);
  CHECK(back[2].cell_id == 2);
  CHECK(back[2].z == emb[2].z);

  cells[0].values.resize(2, 40);
  cells[0].values.setZero();
  CHECK_THROWS_AS(train_autoencoder(cfg, cells), Error);
}

TEST_CASE("checkpoint round trip preserves outputs") {
  TcnAutoencoder model(tiny(Activation::Relu));
  model.normalization = NormalizationStats{{0.5, 1.0}, {2.0, 3.0}};
  model.training_log = {1.0, 0.5};
  const auto back = TcnAutoencoder::from_checkpoint(model.to_checkpoint());
  const auto x = random_input(2, 32, 6);
  CHECK(back.encode(x) == model.encode(x));
  CHECK(back.config().to_json() == model.config().to_json());
  REQUIRE(back.normalization.has_value());
  CHECK(back.normalization->scale == model.normalization->scale);
  CHECK(back.training_log == model.training_log);
}

TEST_CASE("divergence names the epoch") {
  std::vector<MultivariateSeries> cells(1);
  cells[0].categories = {"a", "b"};
  cells[0].values = Eigen::MatrixXd::Constant(2, 32, 1e200);
  cells[0].normalized = true;
  auto cfg = tiny();
  cfg.length = 0;
  cfg.epochs = 3;
  try {
    train_autoencoder(cfg, cells);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Divergence);
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
  }
}
