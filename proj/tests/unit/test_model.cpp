#include "doctest.h"

#include <numeric>
#include <random>

#include "endofuse/model.hpp"

#include "support/checks.hpp"

using namespace endofuse;
using namespace endofuse::testing;

TEST_CASE("reference constants give 432 and 216 channels") {
  const auto r = architecture_suite();
  for (const auto& f : r.failures) INFO(f);
  CHECK(r.ok());
}

TEST_CASE("symbolic shapes for the default configuration") {
  ModelConfig cfg;
  cfg.input_side = 64;
  const auto s = backbone_shape(cfg);
  CHECK(s.block_in == std::vector<int>{48, 216, 300});
  CHECK(s.block_out == std::vector<int>{432, 600, 684});
  CHECK(s.out_channels == 684);
  CHECK(s.out_side == 16);
}

TEST_CASE("config validation") {
  ModelConfig cfg;
  cfg.input_side = 4;  // 3 blocks need at least 8
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.compression = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.mlp_dropout = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("forward shapes and parameter naming on the tiny model") {
  const ModelConfig cfg = tiny_model_config();
  auto params = init_parameters<double>(cfg, 3);
  CHECK(params.contains("backbone.block1.layer1.conv.weight"));
  CHECK(params.contains("backbone.transition0.bn.running_var"));
  CHECK_FALSE(params.contains("backbone.transition1.conv.weight"));
  CHECK(params.at("head.weight").shape() == Shape{3, 8});

  std::mt19937_64 rng(1);
  auto images = random_tensor({5, 3, 16, 16}, rng);
  auto features = random_tensor({5, cfg.d_in}, rng);
  ForwardContext<double> ctx{Mode::eval, nullptr, nullptr};
  const auto z = densenet_forward(images, params, cfg, ctx);
  CHECK(z.shape() == Shape{5, backbone_shape(cfg).out_channels, 8, 8});
  const auto logits = model_forward(images, features, params, cfg, ctx);
  CHECK(logits.shape() == Shape{5, 3});

  auto wrong = random_tensor({5, cfg.d_in + 1}, rng);
  CHECK_THROWS_AS(model_forward(images, wrong, params, cfg, ctx), SchemaError);
}

TEST_CASE("initialization is a pure function of the seed") {
  const ModelConfig cfg = tiny_model_config();
  auto a = init_parameters<float>(cfg, 9), b = init_parameters<float>(cfg, 9), c = init_parameters<float>(cfg, 10);
  bool same = true, differs = false;
  for (std::size_t i = 0; i < a.entries().size(); ++i) {
    same = same && (a.entries()[i].tensor.value() == b.entries()[i].tensor.value()).all();
    differs = differs || (a.entries()[i].tensor.value() != c.entries()[i].tensor.value()).any();
  }
  CHECK(same);
  CHECK(differs);
}

TEST_CASE("eval-mode forward is equivariant to batch permutation") {
  const ModelConfig cfg = tiny_model_config();
  auto params = init_parameters<double>(cfg, 4);
  std::mt19937_64 rng(8);
  const Index n = 6;
  auto images = random_tensor({n, 3, 16, 16}, rng);
  auto features = random_tensor({n, cfg.d_in}, rng);
  std::vector<Index> perm(n);
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);

  const Index img = 3 * 16 * 16;
  DTensor pi({n, 3, 16, 16}), pf({n, cfg.d_in});
  for (Index i = 0; i < n; ++i) {
    pi.value().segment(i * img, img) = images.value().segment(perm[i] * img, img);
    pf.value().segment(i * cfg.d_in, cfg.d_in) = features.value().segment(perm[i] * cfg.d_in, cfg.d_in);
  }
  ForwardContext<double> ctx{Mode::eval, nullptr, nullptr};
  const auto y = model_forward(images, features, params, cfg, ctx);
  const auto yp = model_forward(pi, pf, params, cfg, ctx);
  for (Index i = 0; i < n; ++i)
    for (Index c = 0; c < cfg.num_classes; ++c)
      CHECK(yp.value()(i * cfg.num_classes + c) == doctest::Approx(y.value()(perm[i] * cfg.num_classes + c)).epsilon(1e-12));
}

TEST_CASE("bottleneck variant builds and runs") {
  ModelConfig cfg = tiny_model_config();
  cfg.bottleneck = true;
  auto params = init_parameters<double>(cfg, 2);
  CHECK(params.at("backbone.block0.layer0.bottleneck.weight").shape() == Shape{16, 8});
  std::mt19937_64 rng(3);
  auto images = random_tensor({2, 3, 16, 16}, rng);
  auto features = random_tensor({2, cfg.d_in}, rng);
  ForwardContext<double> ctx{Mode::eval, nullptr, nullptr};
  CHECK(model_forward(images, features, params, cfg, ctx).shape() == Shape{2, 3});
}
