#include "mtcr/aggregator.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace mtcr;

namespace {

AggregatorConfig mini(AggregatorKind kind) {
  AggregatorConfig c;
  c.kind = kind;
  c.input_dim = 4;
  c.output_dim = 8;
  c.ff_width = 16;
  c.cap = 8;
  c.seed = 21;
  return c;
}

Eigen::MatrixXd random_rows(int n, int d, Rng& rng) {
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = standard_normal(rng);
  return x;
}

RegionFeatureMatrix padded(const Eigen::MatrixXd& rows, int cap) {
  RegionFeatureMatrix fm;
  fm.region_id = "r";
  fm.x = Eigen::MatrixXd::Zero(cap, rows.cols());
  fm.x.topRows(rows.rows()) = rows;
  fm.mask.assign(static_cast<std::size_t>(cap), 0);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) fm.mask[static_cast<std::size_t>(i)] = 1;
  fm.count = static_cast<int>(rows.rows());
  fm.total_cells = fm.count;
  return fm;
}

}  // namespace

TEST_CASE("triplet loss examples") {
  const Eigen::VectorXd a = Eigen::VectorXd::Zero(2);
  Eigen::VectorXd p(2), n(2);
  p << 1, 0;
  n << 3, 0;
  CHECK(triplet_loss(a, p, n, 1.0) == 0.0);
  CHECK(triplet_loss(a, p, n, 2.5) == doctest::Approx(0.5));
  CHECK(triplet_loss(a, n, p, 1.0) == doctest::Approx(3.0));
  const auto g = triplet_loss_grad(a, n, p, 1.0);
  CHECK(g.loss == doctest::Approx(3.0));
  // d/dp ||a - p|| = (p - a)/||a - p||, d/dn -||a - n|| = -(n - a)/||a - n||.
  CHECK(g.dp(0) == doctest::Approx(1.0));
  CHECK(g.dn(0) == doctest::Approx(-1.0));
  CHECK(g.da(0) == doctest::Approx(0.0));
  // Coincident anchor and positive: zero subgradient on that term.
  const auto z = triplet_loss_grad(a, a, p, 2.0);
  CHECK(z.loss == doctest::Approx(1.0));
  CHECK(z.dp.norm() == 0.0);
  CHECK(std::isfinite(z.da.norm()));
}

TEST_CASE("triplet loss scales with the embeddings when margin scales") {
  Rng rng = make_rng(1, "triplet-scale");
  for (int k = 0; k < 20; ++k) {
    Eigen::VectorXd a(3), p(3), n(3);
    for (int i = 0; i < 3; ++i) {
      a(i) = standard_normal(rng);
      p(i) = standard_normal(rng);
      n(i) = standard_normal(rng);
    }
    CHECK(triplet_loss(2.0 * a, 2.0 * p, 2.0 * n, 2.0) == doctest::Approx(2.0 * triplet_loss(a, p, n, 1.0)));
    CHECK(triplet_loss(a, p, n, 1.0) >= 0.0);
  }
}

TEST_CASE("feature matrix construction") {
  EmbeddingIndex emb;
  for (int c = 0; c < 400; ++c) emb[c] = Eigen::VectorXd::Constant(3, c);
  const auto fm = build_feature_matrix("R1", {7, 2}, emb, 300, 1);
  CHECK(fm.x.rows() == 300);
  CHECK(fm.count == 2);
  CHECK(fm.x(0, 0) == 2);
  CHECK(fm.x(1, 0) == 7);
  CHECK(fm.x.bottomRows(298).cwiseAbs().maxCoeff() == 0.0);
  CHECK(fm.mask[1] == 1);
  CHECK(fm.mask[2] == 0);
  CHECK(fm.real_rows().rows() == 2);

  std::vector<int> many(350);
  for (int i = 0; i < 350; ++i) many[static_cast<std::size_t>(i)] = i;
  const auto big = build_feature_matrix("R2", many, emb, 300, 1);
  CHECK(big.count == 300);
  CHECK(big.total_cells == 350);
  CHECK(big.subsampled);
  std::set<double> rows;
  for (int i = 0; i < 300; ++i) rows.insert(big.x(i, 0));
  CHECK(rows.size() == 300);
  for (int i = 1; i < 300; ++i) CHECK(big.x(i, 0) > big.x(i - 1, 0));
  CHECK(build_feature_matrix("R2", many, emb, 300, 1).x == big.x);
  CHECK(build_feature_matrix("R2", many, emb, 300, 2).x != big.x);

  CHECK_THROWS_AS(build_feature_matrix("R3", {}, emb, 300, 1), Error);
  CHECK_THROWS_AS(build_feature_matrix("R3", {1000}, emb, 300, 1), Error);
}

TEST_CASE("weighted sum against a hand computation") {
  AggregatorModel model(mini(AggregatorKind::WeightedSum));
  Rng rng = make_rng(2, "ws-hand");
  const auto x = random_rows(3, 4, rng);
  const auto& p = model.params();
  const Eigen::MatrixXd w1 = p[p.index_of("gate_w")], b1 = p[p.index_of("gate_b")];
  const Eigen::MatrixXd w2 = p[p.index_of("out_w")], b2 = p[p.index_of("out_b")];
  Eigen::VectorXd s = Eigen::VectorXd::Zero(4);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 4; ++j) {
      double pre = b1(j, 0);
      for (int k = 0; k < 4; ++k) pre += w1(j, k) * x(i, k);
      s(j) += x(i, j) / (1.0 + std::exp(-pre));
    }
  }
  const Eigen::VectorXd expected = w2 * s + b2.col(0);
  CHECK((model.aggregate_rows(x) - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("closed gate and duplicated rows") {
  AggregatorModel ws(mini(AggregatorKind::WeightedSum));
  Rng rng = make_rng(3, "ws-gate");
  const auto x = random_rows(2, 4, rng);
  auto& p = ws.params();
  p[p.index_of("gate_w")].setZero();
  p[p.index_of("gate_b")].setConstant(-1e3);
  CHECK((ws.aggregate_rows(x) - p[p.index_of("out_b")].col(0)).cwiseAbs().maxCoeff() < 1e-12);

  // A sum counts a duplicated row twice; mean pooling does not.
  AggregatorModel ws2(mini(AggregatorKind::WeightedSum));
  AggregatorModel tr(mini(AggregatorKind::Transformer));
  Eigen::MatrixXd one = x.topRows(1), two(2, 4);
  two << x.row(0), x.row(0);
  CHECK((ws2.aggregate_rows(two) - ws2.aggregate_rows(one)).norm() > 1e-6);
  CHECK((tr.aggregate_rows(two) - tr.aggregate_rows(one)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(tr.aggregate_rows(one).size() == 8);
  CHECK(std::isfinite(tr.aggregate_rows(one).norm()));
}

TEST_CASE("permutation and padding invariance") {
  for (AggregatorKind kind : {AggregatorKind::WeightedSum, AggregatorKind::Transformer}) {
    CAPTURE(to_string(kind));
    AggregatorModel model(mini(kind));
    Rng rng = make_rng(4, "agg-invariance");
    for (int trial = 0; trial < 25; ++trial) {
      const int n = 1 + static_cast<int>(uniform_index(rng, 8));
      const auto x = random_rows(n, 4, rng);
      std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
      shuffle(perm.begin(), perm.end(), rng);
      Eigen::MatrixXd xp(n, 4);
      for (int i = 0; i < n; ++i) xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
      const auto y = model.aggregate_rows(x);
      CHECK((model.aggregate_rows(xp) - y).cwiseAbs().maxCoeff() < 1e-6);
      auto fm = padded(x, 8);
      // Junk in padded rows must not leak.
      for (int i = n; i < 8; ++i) fm.x.row(i).setConstant(1e3);
      CHECK((model.aggregate(fm) - y).cwiseAbs().maxCoeff() < 1e-6);
    }
  }
}

TEST_CASE("analytic gradients match central differences") {
  for (AggregatorKind kind : {AggregatorKind::WeightedSum, AggregatorKind::Transformer}) {
    CAPTURE(to_string(kind));
    AggregatorModel model(mini(kind));
    Rng rng = make_rng(5, "agg-grad");
    const auto x = random_rows(5, 4, rng);
    Eigen::VectorXd c(8);
    for (int i = 0; i < 8; ++i) c(i) = standard_normal(rng);
    auto trace = model.make_trace();
    model.forward(x, *trace);
    auto grads = model.params().zeros_like();
    model.backward(*trace, c, grads);
    const auto f = [&]() { return c.dot(model.aggregate_rows(x)); };
    int bad = 0;
    const std::size_t n = model.params().numel();
    for (int k = 0; k < 100; ++k) {
      const std::size_t i = uniform_index(rng, n);
      const double h = 1e-5, orig = model.params().flat(i);
      model.params().flat(i) = orig + h;
      const double up = f();
      model.params().flat(i) = orig - h;
      const double down = f();
      model.params().flat(i) = orig;
      if (oracle::relative_error(grads.flat(i), (up - down) / (2 * h)) >= 1e-4) ++bad;
    }
    CHECK(bad == 0);
  }
}

TEST_CASE("training on a chain graph separates far regions") {
  // Ten regions on a line; features drift smoothly along it.
  std::vector<std::string> ids;
  std::vector<std::pair<std::string, std::string>> edges;
  std::vector<RegionFeatureMatrix> features;
  Rng rng = make_rng(6, "chain");
  for (int r = 0; r < 10; ++r) {
    ids.push_back("r" + std::to_string(r));
    if (r > 0) edges.emplace_back(ids[static_cast<std::size_t>(r - 1)], ids.back());
    Eigen::MatrixXd rows = random_rows(4, 4, rng) * 0.1;
    rows.col(0).array() += 0.3 * r;
    auto fm = padded(rows, 8);
    fm.region_id = ids.back();
    features.push_back(fm);
  }
  const auto adj = RegionAdjacency::from_edges(ids, edges);
  for (AggregatorKind kind : {AggregatorKind::WeightedSum, AggregatorKind::Transformer}) {
    CAPTURE(to_string(kind));
    auto cfg = mini(kind);
    cfg.epochs = 80;
    cfg.learning_rate = 3e-3;
    cfg.hops = 1;
    int calls = 0;
    const auto model = train_aggregator(cfg, features, adj, [&](int, double, double f) {
      ++calls;
      CHECK(f >= 0.0);
      CHECK(f <= 1.0);
    });
    CHECK(calls == 80);
    CHECK(model.loss_log.size() == 80);
    CHECK(model.loss_log.back() < model.loss_log.front());

    const auto again = train_aggregator(cfg, features, adj);
    CHECK(again.loss_log == model.loss_log);

    const auto emb = embed_regions(model, features);
    REQUIRE(emb.size() == 10);
    CHECK((emb[0].e - emb[1].e).norm() < (emb[0].e - emb[9].e).norm());

    const auto back = region_embeddings_from_csv(region_embeddings_to_csv(emb));
    CHECK(back[3].region_id == "r3");
    CHECK(back[3].e == emb[3].e);

    const auto restored = AggregatorModel::from_checkpoint(model.to_checkpoint());
    CHECK(restored.aggregate(features[4]) == model.aggregate(features[4]));
    CHECK(restored.loss_log == model.loss_log);
  }
}

TEST_CASE("training errors") {
  std::vector<RegionFeatureMatrix> features;
  Rng rng = make_rng(7, "errors");
  for (const char* id : {"a", "b", "c"}) {
    auto fm = padded(random_rows(2, 4, rng), 8);
    fm.region_id = id;
    features.push_back(fm);
  }
  const auto cfg = mini(AggregatorKind::WeightedSum);
  // A triangle: every region lies within two hops of every other.
  const auto tri = RegionAdjacency::from_edges({"a", "b", "c"}, {{"a", "b"}, {"b", "c"}, {"a", "c"}});
  CHECK_THROWS_AS(train_aggregator(cfg, features, tri), Error);
  const auto four = RegionAdjacency::from_edges({"a", "b", "c", "d"}, {{"a", "b"}});
  CHECK_THROWS_AS(train_aggregator(cfg, features, four), Error);  // no features for d

  AggregatorConfig bad = cfg;
  bad.cap = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK(AggregatorConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
  CHECK(parse_aggregator_kind("weighted_sum") == AggregatorKind::WeightedSum);
  CHECK_THROWS_AS(parse_aggregator_kind("lstm"), Error);
}
