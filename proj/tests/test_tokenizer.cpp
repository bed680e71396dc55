#include "doctest.h"
#include "support.hpp"

#include "lift3d/config.hpp"
#include "lift3d/error.hpp"
#include "lift3d/tokenizer3d.hpp"

#include <numbers>
#include <numeric>
#include <set>

using namespace lift3d;
using namespace lift3d::tokenizer;
using geometry::PointCloud;
using support::Matrix;

namespace {

PointCloud random_normalized(Rng& rng, int n) {
  PointCloud pc{support::uniform_cloud(rng, n), support::uniform_cloud(rng, n)};
  pc.colors = (pc.colors.array() + 1.0) * 0.5;
  return geometry::normalize_to_cube(pc).first;
}

double gelu(double x) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

}  // namespace

TEST_CASE("single-layer tokens match a hand-written group/linear/max oracle") {
  Rng rng(1);
  const PointCloud pc = random_normalized(rng, 40);
  TokenizerConfig cfg;
  cfg.dims = {5};
  cfg.points = {6};
  cfg.k_nn = 4;
  cfg.output_dim = 3;
  const auto params = TokenizerParams::init(cfg, 7);
  const auto tokens = tokenize(pc, cfg, params, 3);

  const auto centers = support::brute_fps(pc.points, 6, 3);
  const Matrix& w = params.layers[0].w.value();
  const Matrix& b = params.layers[0].b.value();
  Matrix pooled(6, 5);
  for (int c = 0; c < 6; ++c) {
    geometry::Points center = pc.points.row(centers[static_cast<std::size_t>(c)]);
    const auto nbrs = support::brute_knn(center, pc.points, 4);
    for (int o = 0; o < 5; ++o) {
      double best = -1e300;
      for (int j : nbrs) {
        double h = b(0, o);
        for (int ch = 0; ch < 3; ++ch) h += pc.colors(j, ch) * w(ch, o);
        for (int ch = 0; ch < 3; ++ch) h += (pc.points(j, ch) - center(0, ch)) * w(3 + ch, o);
        best = std::max(best, gelu(h));
      }
      pooled(c, o) = best;
    }
    CHECK(tokens.centers.row(c) == pc.points.row(centers[static_cast<std::size_t>(c)]));
  }
  const Matrix expected = (pooled * params.out_w.value()).rowwise() + params.out_b.value().row(0);
  CHECK((tokens.features.value() - expected).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("token centers are input points and the plan is deterministic") {
  Rng rng(2);
  const PointCloud pc = random_normalized(rng, 600);
  const auto cfg = config::desk_tokenizer(3);
  const auto plan_a = plan_tokenizer(pc, cfg, 5);
  const auto plan_b = plan_tokenizer(pc, cfg, 5);
  REQUIRE(plan_a.levels.size() == 3);
  CHECK(plan_a.token_centers() == plan_b.token_centers());
  for (std::size_t l = 0; l < 3; ++l) CHECK(plan_a.levels[l].neighbors == plan_b.levels[l].neighbors);
  for (Eigen::Index i = 0; i < plan_a.token_centers().rows(); ++i) {
    bool found = false;
    for (Eigen::Index j = 0; j < pc.size() && !found; ++j) found = pc.points.row(j) == plan_a.token_centers().row(i);
    CHECK(found);
  }
  auto params = TokenizerParams::init(cfg, 1);
  const auto tokens = encode_tokens(plan_a, cfg, params);
  CHECK(tokens.size() == 64);
  CHECK(tokens.features.cols() == cfg.output_dim);
  CHECK(tokens.features.value().allFinite());
}

TEST_CASE("parameter count equals the collected tensor sizes and grows with depth") {
  long previous = 0;
  for (int layers = 1; layers <= 4; ++layers) {
    for (bool norm : {false, true}) {
      auto cfg = config::desk_tokenizer(layers);
      cfg.norm = norm;
      const auto params = TokenizerParams::init(cfg, 0);
      nn::ParamList list;
      params.collect(list, "t.");
      long n = 0;
      for (const auto& p : list) n += static_cast<long>(p.tensor.value().size());
      CHECK(tokenizer_param_count(cfg) == n);
    }
    const long count = tokenizer_param_count(config::desk_tokenizer(layers));
    CHECK(count > previous);
    previous = count;
  }
  // One layer 6 -> 16 plus the 16 -> 32 projection.
  CHECK(tokenizer_param_count(config::desk_tokenizer(1)) == 6 * 16 + 16 + 16 * 32 + 32);
}

TEST_CASE("layout validation") {
  TokenizerConfig cfg = config::desk_tokenizer(2);
  cfg.points = {64, 64};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.points = {256};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = config::desk_tokenizer(2);
  cfg.k_nn = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  Rng rng(3);
  CHECK_THROWS_AS(plan_tokenizer(random_normalized(rng, 100), config::desk_tokenizer(2), 0), InvalidArgument);
}

TEST_CASE("tokenizer gradients reach every weight") {
  Rng rng(4);
  const PointCloud pc = random_normalized(rng, 64);
  TokenizerConfig cfg;
  cfg.dims = {4, 6};
  cfg.points = {16, 8};
  cfg.k_nn = 4;
  cfg.output_dim = 5;
  auto params = TokenizerParams::init(cfg, 2);
  const auto plan = plan_tokenizer(pc, cfg, 0);
  nn::ParamList list;
  params.collect(list, "");
  for (auto& p : list) {
    const double err =
        support::gradient_error([&] { return nn::sum_all(encode_tokens(plan, cfg, params).features); }, p.tensor);
    CHECK_MESSAGE(err < 1e-5, p.name);
  }
}

TEST_CASE("token centers compose the per-level sampling prefixes") {
  Rng rng(5);
  const PointCloud pc = random_normalized(rng, 600);
  const auto cfg = config::desk_tokenizer(3);
  const auto plan = plan_tokenizer(pc, cfg, 9);
  REQUIRE(plan.coords.size() == 4);
  std::vector<int> chain(64);
  std::iota(chain.begin(), chain.end(), 0);
  for (int l = 2; l >= 0; --l) {
    const auto& level = plan.levels[static_cast<std::size_t>(l)];
    CHECK(static_cast<int>(level.centers.size()) == cfg.points[static_cast<std::size_t>(l)]);
    CHECK(std::set<int>(level.centers.begin(), level.centers.end()).size() == level.centers.size());
    for (int& c : chain) c = level.centers[static_cast<std::size_t>(c)];
  }
  for (int i = 0; i < 64; ++i) CHECK(plan.token_centers().row(i) == pc.points.row(chain[static_cast<std::size_t>(i)]));
}

TEST_CASE("permuting input points with the start point pinned leaves tokens unchanged") {
  Rng rng(6);
  const PointCloud pc = random_normalized(rng, 300);
  const auto cfg = config::desk_tokenizer(2);
  const std::uint64_t seed = 17;
  const int pinned = static_cast<int>(seed % 300);
  // Reverse every index except the pinned start point.
  std::vector<int> others;
  for (int i = 299; i >= 0; --i) {
    if (i != pinned) others.push_back(i);
  }
  std::vector<int> perm(300);
  for (int i = 0, o = 0; i < 300; ++i) perm[static_cast<std::size_t>(i)] = i == pinned ? pinned : others[static_cast<std::size_t>(o++)];
  REQUIRE(perm[static_cast<std::size_t>(pinned)] == pinned);
  PointCloud shuffled{geometry::Points(300, 3), geometry::Points(300, 3)};
  for (int i = 0; i < 300; ++i) {
    shuffled.points.row(i) = pc.points.row(perm[static_cast<std::size_t>(i)]);
    shuffled.colors.row(i) = pc.colors.row(perm[static_cast<std::size_t>(i)]);
  }
  const auto params = TokenizerParams::init(cfg, 3);
  const auto a = tokenize(pc, cfg, params, seed);
  const auto b = tokenize(shuffled, cfg, params, seed);
  CHECK(a.centers == b.centers);
  CHECK((a.features.value() - b.features.value()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("a dominant neighbor decides the pooled group feature") {
  PointCloud pc{geometry::Points::Zero(4, 3), geometry::Points::Zero(4, 3)};
  pc.points << 0, 0, 0, 0.1, 0, 0, 0, 0.1, 0, 0, 0, 0.1;
  pc.colors(2, 0) = 50.0;
  TokenizerConfig cfg;
  cfg.dims = {3};
  cfg.points = {1};
  cfg.k_nn = 4;
  cfg.output_dim = 3;
  auto params = TokenizerParams::init(cfg, 1);
  params.layers[0].w.mutable_value().setZero();
  params.layers[0].w.mutable_value()(0, 0) = 1.0;
  params.layers[0].w.mutable_value()(0, 1) = 2.0;
  params.layers[0].w.mutable_value()(0, 2) = 3.0;
  params.layers[0].b.mutable_value().setZero();
  const auto tokens = tokenize(pc, cfg, params, 0);
  for (int o = 0; o < 3; ++o) CHECK(tokens.features.value()(0, o) == doctest::Approx(gelu(50.0 * (o + 1))));
}
