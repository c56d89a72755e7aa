#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "dks/blocks.hpp"
#include "dks/model.hpp"
#include "testutil.hpp"

using namespace dks;
using T = double;

namespace {

int64_t count_params(std::vector<NamedTensor<T>>& params, bool conv_only) {
  int64_t n = 0;
  for (auto& p : params) {
    if (!p.trainable) continue;
    bool is_bn_affine = p.name.find(".gamma") != std::string::npos ||
                        p.name.find(".beta") != std::string::npos;
    if (conv_only == !is_bn_affine) n += p.tensor.numel();
  }
  return n;
}

}  // namespace

TEST_CASE("stage: {64 ch, 2 blocks, stride 2} maps 1x32x16x16 to 1x64x8x8") {
  std::mt19937_64 rng(1);
  Stage<T> stage(32, 64, 2, 2, rng);
  Tensor<T> x({1, 32, 16, 16}, 0.1);
  Tensor<T> y = stage.forward(x, Mode::eval);
  CHECK(y.shape() == Shape{1, 64, 8, 8});
  CHECK(stage.downsamples() == 1);
}

TEST_CASE("stage: parameter enumeration for {16 ch, 5 blocks, stride 1} from 16 channels") {
  // Five identity-shaped blocks: each holds two 3x3x16x16 convs (2304 weights
  // apiece) and two BN affine pairs (32 each). Totals: 5*2*2304 = 23040 conv
  // weights and 5*2*32 = 320 BN affine terms.
  std::mt19937_64 rng(2);
  Stage<T> stage(16, 16, 5, 1, rng);
  std::vector<NamedTensor<T>> params;
  stage.collect("s", params);

  int64_t conv_w = count_params(params, true);
  int64_t bn_affine = count_params(params, false);
  CHECK(conv_w == 23040);
  CHECK(bn_affine == 320);
  CHECK(conv_w + bn_affine == 23360);

  // per-block census against the layer shapes themselves
  int64_t by_shape = 0;
  for (auto& p : params)
    if (p.trainable) by_shape += p.tensor.numel();
  CHECK(by_shape == 23360);

  // no projection shortcut anywhere: shape never changes
  for (auto& p : params) CHECK(p.name.find("proj") == std::string::npos);
}

TEST_CASE("stage: projection appears exactly when shape changes") {
  std::mt19937_64 rng(3);
  Stage<T> same(8, 8, 3, 1, rng);
  Stage<T> wider(8, 16, 3, 1, rng);
  Stage<T> strided(8, 8, 3, 2, rng);
  CHECK_FALSE(same.block(0).projected());
  CHECK(wider.block(0).projected());
  CHECK(strided.block(0).projected());
  // only the first block of a stage reshapes
  for (size_t i = 1; i < 3; ++i) {
    CHECK_FALSE(wider.block(i).projected());
    CHECK_FALSE(strided.block(i).projected());
  }
}

TEST_CASE("block: zeroed convolutions degenerate to a relu-composed shortcut") {
  std::mt19937_64 rng(4);
  BasicResidualBlock<T> block(4, 4, 1, rng);
  std::vector<NamedTensor<T>> params;
  block.collect("b", params);
  for (auto& p : params)
    if (p.name.find("conv") != std::string::npos)
      std::fill(p.tensor.data_mut().begin(), p.tensor.data_mut().end(), T(0));

  Tensor<T> x({2, 4, 5, 5});
  testutil::fill_normal(x, rng);
  Tensor<T> y = block.forward(x, Mode::eval);
  // main path contributes bn(0) = beta = 0, so out = relu(x + 0) = relu(x)
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(std::max(0.0, x.data()[i])).epsilon(1e-12));
}

TEST_CASE("block: stride-2 block rejects inputs it cannot halve") {
  std::mt19937_64 rng(5);
  BasicResidualBlock<T> block(4, 8, 2, rng);
  Tensor<T> x({1, 4, 1, 1}, 1.0);
  CHECK_THROWS_AS(block.forward(x, Mode::eval), ConfigError);
}

TEST_CASE("stage: invalid block counts and strides are config errors") {
  std::mt19937_64 rng(6);
  CHECK_THROWS_AS(Stage<T>(4, 4, 0, 1, rng), ConfigError);
  CHECK_THROWS_AS(Stage<T>(4, 4, 2, 3, rng), ConfigError);
}

TEST_CASE("downsample counting over stage lists") {
  ModelSpec spec;
  spec.stem_stride = 1;
  spec.stages = {{16, 2, 1}, {32, 2, 2}, {64, 2, 2}};
  spec.num_classes = 10;
  CHECK(backbone_downsamples(spec) == 2);

  ModelSpec empty;
  empty.stem_stride = 1;
  CHECK(backbone_downsamples(empty) == 0);

  ModelSpec preset = make_model_spec("cifar_mini", 10);
  CHECK(backbone_downsamples(preset) == 2);
}

TEST_CASE("head paths match the backbone's downsample count in presets") {
  for (const char* name : {"cifar_mini", "resnet32_cifar", "tiny_imagenet_mini"}) {
    ModelSpec spec = make_model_spec(name, 10);
    int64_t bd = backbone_downsamples(spec);
    for (const auto& h : spec.heads) CHECK(head_path_downsamples(spec, h) == bd);
  }
}

TEST_CASE("parameter names are stable and prefixed") {
  std::mt19937_64 rng(7);
  Stage<T> stage(4, 8, 2, 2, rng);
  std::vector<NamedTensor<T>> params;
  stage.collect("stage0", params);
  std::vector<std::string> expect{
      "stage0.block0.conv1.w", "stage0.block0.bn1.gamma", "stage0.block0.bn1.beta",
      "stage0.block0.bn1.running_mean", "stage0.block0.bn1.running_var",
      "stage0.block0.conv2.w", "stage0.block0.bn2.gamma", "stage0.block0.bn2.beta",
      "stage0.block0.bn2.running_mean", "stage0.block0.bn2.running_var",
      "stage0.block0.proj.conv.w", "stage0.block0.proj.bn.gamma", "stage0.block0.proj.bn.beta",
      "stage0.block0.proj.bn.running_mean", "stage0.block0.proj.bn.running_var",
      "stage0.block1.conv1.w", "stage0.block1.bn1.gamma", "stage0.block1.bn1.beta",
      "stage0.block1.bn1.running_mean", "stage0.block1.bn1.running_var",
      "stage0.block1.conv2.w", "stage0.block1.bn2.gamma", "stage0.block1.bn2.beta",
      "stage0.block1.bn2.running_mean", "stage0.block1.bn2.running_var"};
  REQUIRE(params.size() == expect.size());
  for (size_t i = 0; i < expect.size(); ++i) CHECK(params[i].name == expect[i]);
  // running stats flagged as such, never trainable
  for (auto& p : params) {
    bool is_stat = p.name.find("running_") != std::string::npos;
    CHECK(p.running_stat == is_stat);
    CHECK(p.trainable == !is_stat);
  }
}

TEST_CASE("same seed rebuilds identical stage weights") {
  std::mt19937_64 a(99), b(99);
  Stage<T> s1(4, 8, 2, 2, a), s2(4, 8, 2, 2, b);
  std::vector<NamedTensor<T>> p1, p2;
  s1.collect("s", p1);
  s2.collect("s", p2);
  REQUIRE(p1.size() == p2.size());
  for (size_t i = 0; i < p1.size(); ++i) CHECK(testutil::bitwise_equal(p1[i].tensor, p2[i].tensor));
}
