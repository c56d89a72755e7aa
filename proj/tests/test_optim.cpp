#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dks/optim.hpp"
#include "testutil.hpp"

using namespace dks;

namespace {

NamedTensor<double> param(const char* name, std::vector<double> vals,
                          std::vector<double> grads, bool trainable = true) {
  NamedTensor<double> p;
  p.name = name;
  p.tensor = Tensor<double>::from_data({static_cast<int64_t>(vals.size())}, vals);
  p.trainable = trainable;
  p.running_stat = !trainable;
  auto g = p.tensor.grad_mut();
  for (size_t i = 0; i < grads.size(); ++i) g[i] = grads[i];
  return p;
}

}  // namespace

TEST_CASE("sgd: weight decay alone shrinks a stationary parameter") {
  std::vector<NamedTensor<double>> params;
  params.push_back(param("w", {1.0}, {0.0}));
  Sgd<double> opt(0.0, 1e-4, false);
  opt.step(params, 0.1);
  // g = 0 + 1e-4 * 1, v = g, theta = 1 - 0.1 * 1e-4
  CHECK(params[0].tensor.data()[0] == doctest::Approx(0.99999).epsilon(1e-12));
}

TEST_CASE("sgd: two momentum steps match the recurrence by hand") {
  std::vector<NamedTensor<double>> params;
  params.push_back(param("w", {0.0}, {1.0}));
  Sgd<double> opt(0.9, 0.0, false);

  opt.step(params, 0.1);  // v1 = 1, theta1 = -0.1
  CHECK(params[0].tensor.data()[0] == doctest::Approx(-0.1).epsilon(1e-12));

  opt.step(params, 0.1);  // v2 = 0.9 + 1 = 1.9, theta2 = -0.1 - 0.19
  CHECK(params[0].tensor.data()[0] == doctest::Approx(-0.29).epsilon(1e-12));
}

TEST_CASE("sgd: nesterov lookahead applies g + m*v") {
  std::vector<NamedTensor<double>> params;
  params.push_back(param("w", {0.0}, {1.0}));
  Sgd<double> opt(0.9, 0.0, true);
  opt.step(params, 0.1);  // theta = -0.1 * (1 + 0.9 * 1)
  CHECK(params[0].tensor.data()[0] == doctest::Approx(-0.19).epsilon(1e-12));
}

TEST_CASE("sgd: plain gradient descent when momentum and decay are zero") {
  std::vector<NamedTensor<double>> params;
  params.push_back(param("w", {2.0, -3.0}, {0.5, -1.5}));
  Sgd<double> opt(0.0, 0.0, false);
  opt.step(params, 0.2);
  CHECK(params[0].tensor.data()[0] == doctest::Approx(2.0 - 0.2 * 0.5));
  CHECK(params[0].tensor.data()[1] == doctest::Approx(-3.0 + 0.2 * 1.5));
}

TEST_CASE("sgd: constructor rejects out-of-range hyperparameters") {
  CHECK_THROWS_AS(Sgd<double>(1.0, 0.0, false), ConfigError);
  CHECK_THROWS_AS(Sgd<double>(-0.1, 0.0, false), ConfigError);
  CHECK_THROWS_AS(Sgd<double>(0.9, -1e-4, false), ConfigError);
  CHECK_NOTHROW(Sgd<double>(0.0, 0.0, false));
  CHECK_NOTHROW(Sgd<double>(0.99, 0.1, true));
}

TEST_CASE("sgd: non-trainable entries are never touched") {
  std::vector<NamedTensor<double>> params;
  params.push_back(param("bn.running_mean", {5.0, 6.0}, {100.0, 100.0}, false));
  params.push_back(param("w", {1.0}, {1.0}));
  Sgd<double> opt(0.9, 1e-2, false);
  opt.step(params, 0.1);
  opt.step(params, 0.1);
  CHECK(params[0].tensor.data()[0] == 5.0);  // bitwise: no arithmetic applied
  CHECK(params[0].tensor.data()[1] == 6.0);
  CHECK(params[1].tensor.data()[0] != 1.0);
}

TEST_CASE("sgd: swapping the parameter set between steps is a usage error") {
  std::vector<NamedTensor<double>> params;
  params.push_back(param("w", {1.0, 2.0}, {0.1, 0.1}));
  Sgd<double> opt(0.9, 0.0, false);
  opt.step(params, 0.1);

  std::vector<NamedTensor<double>> other;
  other.push_back(param("w", {1.0, 2.0, 3.0}, {0.1, 0.1, 0.1}));
  CHECK_THROWS_AS(opt.step(other, 0.1), UsageError);
}

TEST_CASE("sgd: velocity state is per-parameter and persists") {
  // two parameters with different gradients must not share momentum
  std::vector<NamedTensor<double>> params;
  params.push_back(param("a", {0.0}, {1.0}));
  params.push_back(param("b", {0.0}, {-2.0}));
  Sgd<double> opt(0.5, 0.0, false);
  opt.step(params, 1.0);  // va=1, vb=-2
  opt.step(params, 1.0);  // va=1.5, vb=-3
  CHECK(params[0].tensor.data()[0] == doctest::Approx(-2.5));  // -(1 + 1.5)
  CHECK(params[1].tensor.data()[0] == doctest::Approx(5.0));   // 2 + 3
}

TEST_CASE("lr_at: periodic drops") {
  LrSchedule s;
  s.lr0 = 0.1;
  s.factor = 10.0;
  s.period = 60;
  CHECK(lr_at(s, 0) == doctest::Approx(0.1));
  CHECK(lr_at(s, 59) == doctest::Approx(0.1));
  CHECK(lr_at(s, 60) == doctest::Approx(0.01));
  CHECK(lr_at(s, 119) == doctest::Approx(0.01));
  CHECK(lr_at(s, 120) == doctest::Approx(0.001));
}

TEST_CASE("lr_at: milestone form, drop lands on the milestone epoch") {
  LrSchedule s;
  s.lr0 = 0.1;
  s.factor = 5.0;
  s.milestones = {60, 120, 160};
  CHECK(lr_at(s, 0) == doctest::Approx(0.1));
  CHECK(lr_at(s, 59) == doctest::Approx(0.1));
  CHECK(lr_at(s, 60) == doctest::Approx(0.02));  // takes effect at the milestone
  CHECK(lr_at(s, 130) == doctest::Approx(0.004));
  CHECK(lr_at(s, 160) == doctest::Approx(0.0008));
  CHECK(lr_at(s, 500) == doctest::Approx(0.0008));
}

TEST_CASE("lr_at: no schedule means constant") {
  LrSchedule s;
  s.lr0 = 0.05;
  CHECK(lr_at(s, 0) == doctest::Approx(0.05));
  CHECK(lr_at(s, 1000) == doctest::Approx(0.05));
}

TEST_CASE("lr_at: invalid inputs") {
  LrSchedule s;
  CHECK_THROWS_AS(lr_at(s, -1), ConfigError);
  s.factor = 0.0;
  CHECK_THROWS_AS(lr_at(s, 0), ConfigError);
  s.factor = -2.0;
  CHECK_THROWS_AS(lr_at(s, 0), ConfigError);
}
