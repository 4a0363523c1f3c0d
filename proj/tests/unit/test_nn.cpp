#include "mtcr/nn.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace mtcr;
using namespace mtcr::nn;

TEST_CASE("param store flat access is column-major per tensor") {
  ParamStore p;
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  p.add("a", a);
  p.add("b", Matrix::Constant(1, 3, 7.0));
  CHECK(p.numel() == 7);
  CHECK(p.flat(1) == 3);  // a(1, 0)
  CHECK(p.flat(4) == 7);
  p.flat(6) = -1;
  CHECK(p[1](0, 2) == -1);
  CHECK(p.index_of("b") == 1);
  CHECK_THROWS_AS(p.index_of("c"), Error);
  CHECK_THROWS_AS(p.add("a", a), Error);

  auto g = p.zeros_like();
  CHECK(g.numel() == 7);
  g.flat(0) = 2;
  p.add_scaled(g, 0.5);
  CHECK(p.flat(0) == 2);
  CHECK(p.all_finite());
  p.flat(3) = NAN;
  CHECK_FALSE(p.all_finite());
}

TEST_CASE("Adam minimizes a quadratic") {
  ParamStore p;
  p.add("x", (Matrix(2, 1) << 5.0, -3.0).finished());
  const Matrix target = (Matrix(2, 1) << 1.0, 2.0).finished();
  Adam adam(0.05);
  for (int i = 0; i < 2000; ++i) {
    ParamStore g = p.zeros_like();
    g[0] = 2.0 * (p[0] - target);
    adam.step(p, g);
  }
  CHECK(adam.steps() == 2000);
  CHECK((p[0] - target).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("first Adam step moves each coordinate by lr") {
  // With bias correction the first update is lr * g / (|g| + eps).
  ParamStore p;
  p.add("x", (Matrix(1, 3) << 0.0, 0.0, 0.0).finished());
  ParamStore g = p.zeros_like();
  g[0] << 4.0, -0.1, 0.0;
  Adam adam(0.01);
  adam.step(p, g);
  CHECK(p[0](0, 0) == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(p[0](0, 1) == doctest::Approx(0.01).epsilon(1e-6));
  CHECK(p[0](0, 2) == 0.0);
}

TEST_CASE("uniform init respects the fan-in bound") {
  Rng rng = make_rng(1, "init-test");
  const Matrix w = uniform_init(30, 40, 16.0, rng);
  CHECK(w.cwiseAbs().maxCoeff() <= 0.25);
  CHECK(w.cwiseAbs().maxCoeff() > 0.2);
  CHECK(std::abs(w.mean()) < 0.02);
}

TEST_CASE("checkpoints round trip bit-exactly") {
  Checkpoint c;
  c.kind = "test";
  c.metadata_json = R"({"a":1})";
  c.params.add("w", (Matrix(2, 3) << 1.0 / 3.0, -0.0, 1e-300, 7, 8, 9).finished());
  c.params.add("b", Matrix::Constant(4, 1, std::nextafter(1.0, 2.0)));
  const auto bytes = serialize_checkpoint(c);
  const auto back = deserialize_checkpoint(bytes);
  CHECK(back.kind == "test");
  CHECK(back.metadata_json == c.metadata_json);
  REQUIRE(back.params.size() == 2);
  CHECK(back.params.name(1) == "b");
  CHECK(back.params[0] == c.params[0]);
  CHECK(back.params[1] == c.params[1]);
  CHECK(std::signbit(back.params[0](0, 1)));

  const auto path = std::filesystem::temp_directory_path() / "mtcr_nn_test.ckpt";
  save_checkpoint(c, path);
  CHECK(serialize_checkpoint(load_checkpoint(path)) == bytes);
  std::filesystem::remove(path);

  CHECK_THROWS_AS(deserialize_checkpoint("garbage"), Error);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), Error);
}
