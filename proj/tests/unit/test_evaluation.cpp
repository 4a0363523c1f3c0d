#include "mtcr/evaluation.hpp"

#include "oracles.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <numeric>

using namespace mtcr;

namespace {

std::vector<std::string> ids_for(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("r" + std::to_string(i));
  return ids;
}

std::vector<int> random_labels(std::size_t n, int k, Rng& rng) {
  std::vector<int> l(n);
  for (auto& x : l) x = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(k)));
  return l;
}

WeightedClustering weighted(const std::vector<int>& labels, const std::vector<double>& w) {
  WeightedClustering c;
  c.region_ids = ids_for(labels.size());
  c.labels = labels;
  c.weights = w;
  c.k = *std::max_element(labels.begin(), labels.end()) + 1;
  return c;
}

Eigen::MatrixXd blobs(int per, int k, double spread, Rng& rng) {
  Eigen::MatrixXd x(per * k, 2);
  for (int c = 0; c < k; ++c) {
    for (int i = 0; i < per; ++i) {
      x(c * per + i, 0) = 10.0 * c + spread * standard_normal(rng);
      x(c * per + i, 1) = 5.0 * (c % 2) + spread * standard_normal(rng);
    }
  }
  return x;
}

}  // namespace

TEST_CASE("distribution metrics") {
  Eigen::VectorXd p(2), q(2);
  p << 0.5, 0.5;
  q << 0.9, 0.1;
  CHECK(kl_divergence(p, p) == doctest::Approx(0.0));
  CHECK(kl_divergence(p, q) == doctest::Approx(0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1)));
  CHECK(l1_distance(p, q) == doctest::Approx(0.8));
  CHECK(cosine_similarity(p, p) == doctest::Approx(1.0));

  Eigen::VectorXd z(3);
  z << 1.0, 0.0, 0.0;
  const auto f = floor_distribution(z);
  CHECK(f.sum() == doctest::Approx(1.0));
  CHECK(f(1) > 0.0);
  CHECK(std::isfinite(kl_divergence(f, z)));

  CHECK(mean_absolute_error({1, 2, 3}, {1, 2, 5}) == doctest::Approx(2.0 / 3.0));
  CHECK(root_mean_squared_error({1, 2, 3}, {1, 2, 5}) == doctest::Approx(std::sqrt(4.0 / 3.0)));
  CHECK(*r2_score({1, 2, 3}, {1, 2, 3}) == doctest::Approx(1.0));
  CHECK(*r2_score({1, 2, 3}, {2, 2, 2}) == doctest::Approx(0.0));
  CHECK_FALSE(r2_score({4, 4, 4}, {1, 2, 3}).has_value());
}

TEST_CASE("report serialization") {
  EvalReport r;
  r.task = "demo";
  r.config_json = R"({"seed":3})";
  r.add_metric("m", {1.0, 3.0, std::nullopt});
  CHECK(*r.metric("m").mean == doctest::Approx(2.0));
  CHECK(*r.metric("m").std == doctest::Approx(std::sqrt(2.0)));
  const auto j = nlohmann::json::parse(r.to_json());
  CHECK(j["task"] == "demo");
  CHECK(j["config"]["seed"] == 3);
  CHECK(j["metrics"]["m"]["per_repeat"][2].is_null());
  CHECK(r.to_text().find("m") != std::string::npos);
  CHECK_THROWS_AS(r.metric("missing"), Error);
}

TEST_CASE("weighted entropy examples") {
  CHECK(weighted_entropy(WeightedClustering::uniform(ids_for(4), {0, 0, 1, 1})) == doctest::Approx(std::log(2.0)));
  CHECK(weighted_entropy(weighted({0, 1}, {3.0, 1.0})) == doctest::Approx(0.562335).epsilon(1e-6));
  CHECK(weighted_entropy(WeightedClustering::uniform(ids_for(3), {0, 0, 0})) == 0.0);
}

TEST_CASE("weighted entropy and MI against the double loop") {
  Rng rng = make_rng(1, "mi-oracle");
  for (int t = 0; t < 40; ++t) {
    const std::size_t n = 2 + uniform_index(rng, 9);
    const int ku = 1 + static_cast<int>(uniform_index(rng, 4)), kv = 1 + static_cast<int>(uniform_index(rng, 4));
    auto lu = random_labels(n, ku, rng), lv = random_labels(n, kv, rng);
    std::vector<double> w(n);
    for (auto& x : w) x = 0.1 + 10.0 * uniform_unit(rng);
    const auto u = weighted(lu, w), v = weighted(lv, w);
    CHECK(std::abs(weighted_entropy(u) - oracle::weighted_entropy_brute(lu, w)) < 1e-12);
    CHECK(std::abs(weighted_mutual_information(u, v) - oracle::weighted_mi_brute(lu, lv, w)) < 1e-12);
    CHECK(weighted_mutual_information(u, v) == doctest::Approx(weighted_mutual_information(v, u)));
  }
}

TEST_CASE("analytic AMI against the count-based oracle") {
  Rng rng = make_rng(2, "ami-oracle");
  for (int t = 0; t < 20; ++t) {
    const int k1 = 2 + static_cast<int>(uniform_index(rng, 5)), k2 = 2 + static_cast<int>(uniform_index(rng, 5));
    const auto lu = random_labels(40, k1, rng), lv = random_labels(40, k2, rng);
    const auto u = WeightedClustering::uniform(ids_for(40), lu), v = WeightedClustering::uniform(ids_for(40), lv);
    const double ours = adjusted_mutual_information(u, v, {AmiMode::Analytic, 0, 0});
    CHECK(std::abs(ours - oracle::ami_counts(lu, lv)) < 1e-9);
    CHECK(std::abs(ours - adjusted_mutual_information(v, u, {AmiMode::Analytic, 0, 0})) < 1e-12);
    CHECK(std::abs(expected_mutual_information_analytic(u, v) -
                   oracle::expected_mi_counts(oracle::contingency(lu, lv))) < 1e-12);
  }
}

TEST_CASE("AMI special cases") {
  const auto a = WeightedClustering::uniform(ids_for(6), {0, 0, 1, 1, 2, 2});
  CHECK(adjusted_mutual_information(a, a) == doctest::Approx(1.0));
  // Relabeling does not matter.
  const auto b = WeightedClustering::uniform(ids_for(6), {2, 2, 0, 0, 1, 1});
  CHECK(adjusted_mutual_information(a, b) == doctest::Approx(1.0));
  const auto one = WeightedClustering::uniform(ids_for(6), {0, 0, 0, 0, 0, 0});
  CHECK(adjusted_mutual_information(one, one) == 1.0);
  CHECK(adjusted_mutual_information(one, a) == 0.0);

  auto other = a;
  other.region_ids[0] = "x";
  CHECK_THROWS_AS(adjusted_mutual_information(a, other), Error);

  CHECK(parse_ami_mode(to_string(AmiMode::Permutation)) == AmiMode::Permutation);
  CHECK_THROWS_AS(parse_ami_mode("bogus"), Error);
}

TEST_CASE("permutation EMI with uniform weights tracks the analytic value") {
  Rng rng = make_rng(3, "perm-emi");
  const auto u = WeightedClustering::uniform(ids_for(30), random_labels(30, 3, rng));
  const auto v = WeightedClustering::uniform(ids_for(30), random_labels(30, 4, rng));
  const double exact = expected_mutual_information_analytic(u, v);
  const double perm = expected_mutual_information_permutation(u, v, 2000, 5);
  CHECK(perm == doctest::Approx(exact).epsilon(0.05));
  CHECK(perm == expected_mutual_information_permutation(u, v, 2000, 5));
}

TEST_CASE("weighted AMI of identical clusterings is 1 and random ones sit near 0") {
  Rng rng = make_rng(4, "weighted-ami");
  std::vector<double> w(40);
  for (auto& x : w) x = 1.0 + 4.0 * uniform_unit(rng);
  const auto u = weighted(random_labels(40, 4, rng), w);
  CHECK(adjusted_mutual_information(u, u, {AmiMode::Permutation, 100, 1}) == doctest::Approx(1.0));
  double sum = 0;
  for (int t = 0; t < 20; ++t) {
    const auto v = weighted(random_labels(40, 4, rng), w);
    sum += adjusted_mutual_information(u, v, {AmiMode::Auto, 100, static_cast<std::uint64_t>(t)});
  }
  CHECK(std::abs(sum / 20) < 0.1);
}

TEST_CASE("Ward linkage against exhaustive search") {
  Rng rng = make_rng(5, "ward-oracle");
  for (int t = 0; t < 10; ++t) {
    Eigen::MatrixXd x(15, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = standard_normal(rng);
    const auto merges = ward_linkage(x);
    CHECK(merges.size() == 14);
    for (std::size_t m = 1; m < merges.size(); ++m) CHECK(merges[m].cost >= merges[m - 1].cost - 1e-12);
    for (int k : {1, 2, 4, 7, 15}) CHECK(cut_linkage(merges, 15, k) == oracle::ward_brute(x, k));
  }
}

TEST_CASE("Ward cluster edge cases and blobs") {
  Rng rng = make_rng(6, "ward-blobs");
  const auto x = blobs(8, 3, 0.3, rng);
  const auto ids = ids_for(24);
  const auto c3 = ward_cluster(ids, x, 3);
  CHECK(c3.k == 3);
  for (int c = 0; c < 3; ++c) {
    for (int i = 1; i < 8; ++i) CHECK(c3.labels[static_cast<std::size_t>(c * 8 + i)] == c3.labels[static_cast<std::size_t>(c * 8)]);
  }
  CHECK(c3.labels[0] == 0);
  const auto all = ward_cluster(ids, x, 24);
  for (int i = 0; i < 24; ++i) CHECK(all.labels[static_cast<std::size_t>(i)] == i);
  const auto single = ward_cluster(ids, x, 1);
  for (int l : single.labels) CHECK(l == 0);
  CHECK_THROWS_AS(ward_cluster(ids, x, 25), Error);
  CHECK_THROWS_AS(ward_cluster(ids, x, 0), Error);

  double prev = INFINITY;
  const auto merges = ward_linkage(x);
  for (int k = 1; k <= 24; ++k) {
    const double w = within_cluster_ss(x, cut_linkage(merges, 24, k));
    CHECK(w <= prev + 1e-9);
    prev = w;
  }
}

TEST_CASE("silhouette and k choice") {
  // Three blobs at the corners of an equilateral triangle.
  Rng rng = make_rng(7, "choose-k");
  Eigen::MatrixXd x(30, 2);
  const double cx[] = {0.0, 10.0, 5.0}, cy[] = {0.0, 0.0, 8.66};
  for (int i = 0; i < 30; ++i) {
    x(i, 0) = cx[i / 10] + 0.5 * standard_normal(rng);
    x(i, 1) = cy[i / 10] + 0.5 * standard_normal(rng);
  }
  const auto labels = cut_linkage(ward_linkage(x), 30, 3);
  CHECK(silhouette_score(x, labels) == doctest::Approx(oracle::silhouette_brute(x, labels)).epsilon(1e-12));
  const auto choice = choose_k(x, 2, 8);
  CHECK(choice.suggested_k == 3);
  CHECK(choice.best_silhouette_k == 3);
  CHECK(choice.ks.size() == 7);
  const auto j = nlohmann::json::parse(choice.to_json());
  CHECK(j["suggested_k"] == 3);
  CHECK_THROWS_AS(choose_k(x, 2, 30), Error);
  CHECK_THROWS_AS(choose_k(x, 1, 4), Error);
}

TEST_CASE("clustering CSV round trip and alignment") {
  auto c = weighted({0, 1, 1, 0}, {1, 2, 3, 4});
  const auto back = clustering_from_csv(clustering_to_csv(c));
  CHECK(back.region_ids == c.region_ids);
  CHECK(back.labels == c.labels);
  const auto aligned = align_clustering(c, {"r3", "r0"});
  CHECK(aligned.labels == std::vector<int>{0, 0});
  CHECK(aligned.weights == std::vector<double>{4, 1});
  try {
    align_clustering(c, {"r9"});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("r9") != std::string::npos);
  }
}

TEST_CASE("random forest fits a linear target") {
  Rng rng = make_rng(8, "rf-linear");
  Eigen::MatrixXd x(200, 2), xt(50, 2);
  std::vector<double> y(200), yt(50);
  for (int i = 0; i < 200; ++i) {
    x(i, 0) = uniform_unit(rng);
    x(i, 1) = uniform_unit(rng);
    y[static_cast<std::size_t>(i)] = 3.0 * x(i, 0) + 1.0;
  }
  for (int i = 0; i < 50; ++i) {
    xt(i, 0) = (i + 0.5) / 50.0;
    xt(i, 1) = uniform_unit(rng);
    yt[static_cast<std::size_t>(i)] = 3.0 * xt(i, 0) + 1.0;
  }
  RandomForestRegressor rf({50, 2, 0, 1});
  rf.fit(x, y);
  CHECK(*r2_score(yt, rf.predict(xt)) >= 0.99);
  CHECK(*r2_score(y, rf.predict(x)) >= 0.99);

  // Constant features: the forest can only predict a mean.
  RandomForestRegressor flat({20, 2, 0, 2});
  const Eigen::MatrixXd zeros = Eigen::MatrixXd::Zero(200, 2);
  flat.fit(zeros, y);
  CHECK(*r2_score(y, flat.predict(zeros)) <= 1e-3);
}

TEST_CASE("land-use evaluation with informative and uninformative embeddings") {
  Rng rng = make_rng(9, "landuse-test");
  LandUseTable labels;
  std::vector<RegionEmbedding> informative, noise;
  for (int r = 0; r < 60; ++r) {
    const std::string id = "r" + std::to_string(r);
    std::vector<double> d(3);
    double s = 0;
    for (auto& v : d) s += (v = 0.05 + uniform_unit(rng) * (r % 3 == 0 ? 3.0 : 1.0));
    for (auto& v : d) v /= s;
    labels.region_ids.push_back(id);
    labels.distributions.push_back(d);
    Eigen::VectorXd e(3), z(3);
    for (int k = 0; k < 3; ++k) {
      e(k) = d[static_cast<std::size_t>(k)];
      z(k) = standard_normal(rng);
    }
    informative.push_back({id, e});
    noise.push_back({id, z});
  }
  LandUseEvalConfig cfg;
  cfg.repeats = 3;
  cfg.hidden = 32;
  cfg.seed = 4;
  const auto good = landuse_eval(informative, labels, cfg);
  CHECK(*good.metric("kl").mean < *good.metric("baseline_kl").mean);
  CHECK(*good.metric("cosine").mean > *good.metric("baseline_cosine").mean);
  CHECK(good.metric("kl").per_repeat.size() == 3);
  CHECK(landuse_eval(informative, labels, cfg).to_json() == good.to_json());

  // Baseline metrics depend only on the split, not on the embeddings.
  const auto bad = landuse_eval(noise, labels, cfg);
  CHECK(*bad.metric("baseline_kl").mean == *good.metric("baseline_kl").mean);

  auto partial = labels;
  partial.region_ids.pop_back();
  partial.distributions.pop_back();
  CHECK_THROWS_AS(landuse_eval(informative, partial, cfg), Error);
}

TEST_CASE("density evaluation") {
  Rng rng = make_rng(10, "density-test");
  DensityTable labels;
  std::vector<RegionEmbedding> emb;
  for (int r = 0; r < 50; ++r) {
    const std::string id = "r" + std::to_string(r);
    Eigen::VectorXd e(2);
    e << uniform_unit(rng), uniform_unit(rng);
    labels.region_ids.push_back(id);
    labels.density.push_back(1000.0 + 4000.0 * e(0));
    emb.push_back({id, e});
  }
  DensityEvalConfig cfg;
  cfg.repeats = 3;
  cfg.trees = 30;
  cfg.seed = 2;
  const auto rep = density_eval(emb, labels, cfg);
  CHECK(*rep.metric("r2").mean > 0.8);
  CHECK(*rep.metric("mae").mean > 0.0);
  CHECK(*rep.metric("rmse").mean >= *rep.metric("mae").mean);
}
