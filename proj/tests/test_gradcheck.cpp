#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace tssd;
using tssd::testing::project;
using tssd::testing::random_tensor;

namespace {

constexpr double kTol = 1e-4;
constexpr double kBatchNormTol = 1e-3;

struct Fixture {
  ParamSet<double> params;
  Rng rng{17};

  Tensor<double>& add(const std::string& name, Shape shape, double lo = -1, double hi = 1) {
    return params.add(name, random_tensor(std::move(shape), rng, lo, hi));
  }
};

double check(ParamSet<double>& params, const Graph<double>& g) {
  const auto r = gradcheck(params, g);
  EXPECT_GT(r.checked, 0u);
  return r.max_rel_error;
}

}  // namespace

TEST(Gradcheck, SingleLinearLayer) {
  Fixture f;
  f.add("w", Shape{2, 3});
  f.add("b", Shape{2});
  ASSERT_EQ(f.params.parameter_count(), 8u);
  const auto x = random_tensor(Shape{4, 3}, f.rng);
  auto graph = [&](Tape<double>& t) {
    return project(linear(t.constant(x), t.param(f.params, "w"), t.param(f.params, "b")), 1);
  };
  EXPECT_LT(check(f.params, graph), kTol);
}

TEST(Gradcheck, ConvPoolLinearStack) {
  Fixture f;
  f.add("x", Shape{2, 2, 5, 4});
  f.add("k", Shape{3, 2, 3, 3});
  f.add("w", Shape{4, 12});
  f.add("b", Shape{4});
  auto graph = [&](Tape<double>& t) {
    auto y = avgpool2d(conv2d(t.param(f.params, "x"), t.param(f.params, "k")));
    return project(linear(reshape(y, Shape{2, 12}), t.param(f.params, "w"), t.param(f.params, "b")), 2);
  };
  EXPECT_LT(check(f.params, graph), kTol);
}

TEST(Gradcheck, BatchNormTrainBatchFour) {
  Fixture f;
  f.add("x", Shape{4, 3}, -2, 2);
  f.add("gamma", Shape{3}, 0.5, 1.5);
  f.add("beta", Shape{3});
  Tensor<double> rm(Shape{3}), rv(Shape{3}, 1.0);
  auto graph = [&](Tape<double>& t) {
    return project(batchnorm(t.param(f.params, "x"), t.param(f.params, "gamma"),
                             t.param(f.params, "beta"), BatchNormState<double>{&rm, &rv},
                             BatchNormMode::kTrain),
                   3);
  };
  EXPECT_LT(check(f.params, graph), kBatchNormTol);
}

TEST(Gradcheck, BatchNormTrainSpatial) {
  Fixture f;
  f.add("x", Shape{3, 2, 2, 2}, -2, 2);
  f.add("gamma", Shape{2}, 0.5, 1.5);
  f.add("beta", Shape{2});
  Tensor<double> rm(Shape{2}), rv(Shape{2}, 1.0);
  auto graph = [&](Tape<double>& t) {
    return project(batchnorm(t.param(f.params, "x"), t.param(f.params, "gamma"),
                             t.param(f.params, "beta"), BatchNormState<double>{&rm, &rv},
                             BatchNormMode::kTrain),
                   4);
  };
  EXPECT_LT(check(f.params, graph), kBatchNormTol);
}

TEST(Gradcheck, BatchNormInference) {
  Fixture f;
  f.add("x", Shape{2, 3, 2, 2});
  f.add("gamma", Shape{3}, 0.5, 1.5);
  f.add("beta", Shape{3});
  Tensor<double> rm(Shape{3}, std::vector<double>{0.1, -0.2, 0.3});
  Tensor<double> rv(Shape{3}, std::vector<double>{0.5, 1.5, 2.0});
  auto graph = [&](Tape<double>& t) {
    return project(batchnorm(t.param(f.params, "x"), t.param(f.params, "gamma"),
                             t.param(f.params, "beta"), BatchNormState<double>{&rm, &rv},
                             BatchNormMode::kInference),
                   5);
  };
  EXPECT_LT(check(f.params, graph), kTol);
}

TEST(Gradcheck, ElementwiseAndReductions) {
  Fixture f;
  f.add("a", Shape{4, 3});
  f.add("b", Shape{4, 3});
  auto graph = [&](Tape<double>& t) {
    auto a = t.param(f.params, "a");
    auto b = t.param(f.params, "b");
    auto e = add(mul(a, b), sub(square(a), scale(b, 0.3)));
    return add(project(e, 6), scale(mean(e), 2.0));
  };
  EXPECT_LT(check(f.params, graph), kTol);
}

TEST(Gradcheck, MatmulAndReshape) {
  Fixture f;
  f.add("a", Shape{3, 5});
  f.add("b", Shape{5, 4});
  auto graph = [&](Tape<double>& t) {
    return project(reshape(matmul(t.param(f.params, "a"), t.param(f.params, "b")), Shape{2, 6}), 7);
  };
  EXPECT_LT(check(f.params, graph), kTol);
}

TEST(Gradcheck, TimeSlicingAndMean) {
  Fixture f;
  f.add("z", Shape{4, 2, 3});
  auto graph = [&](Tape<double>& t) {
    auto z = t.param(f.params, "z");
    return add(project(time_mean(z, 3), 8), project(slice_leading(z, 1, 2), 9));
  };
  EXPECT_LT(check(f.params, graph), kTol);
}

TEST(Gradcheck, CrossEntropy) {
  Fixture f;
  f.add("logits", Shape{5, 4}, -3, 3);
  const std::vector<int> labels{0, 3, 1, 1, 2};
  auto graph = [&](Tape<double>& t) {
    return softmax_cross_entropy(t.param(f.params, "logits"), std::span<const int>(labels));
  };
  EXPECT_LT(check(f.params, graph), kTol);
}

TEST(Gradcheck, GlobalPool) {
  Fixture f;
  f.add("x", Shape{2, 3, 4, 2});
  auto graph = [&](Tape<double>& t) { return project(global_avgpool(t.param(f.params, "x")), 10); };
  EXPECT_LT(check(f.params, graph), kTol);
}

TEST(Gradcheck, LifWithIdentitySpikes) {
  Fixture f;
  f.add("i", Shape{3 * 2, 4});
  LIFConfig cfg;
  cfg.spike_fn = SpikeFn::kIdentity;
  cfg.detach_reset = false;
  cfg.threshold = 0.5;
  cfg.tau = 1.7;
  auto graph = [&](Tape<double>& t) { return project(lif(t.param(f.params, "i"), 3, cfg), 11); };
  EXPECT_LT(check(f.params, graph), kTol);
}

TEST(Gradcheck, SpikeFreeNetworkInference) {
  LIFConfig cfg;
  cfg.spike_fn = SpikeFn::kIdentity;
  cfg.detach_reset = false;
  cfg.threshold = 0.5;
  auto net = build_network<double>(tssd::testing::tiny_spec(1, 4, 3), cfg, 5);
  Rng rng(6);
  Batch<double> batch{random_tensor(Shape{2, 1, 4, 4}, rng), {0, 2}};
  auto graph = [&](Tape<double>& t) {
    auto rec = net.forward(t, batch, 2, BatchNormMode::kInference);
    return add(project(rec.final_logits, 12), project(*rec.weak_logits, 13));
  };
  EXPECT_LT(check(net.params(), graph), kTol);
}

TEST(Gradcheck, SpikeFreeNetworkTrainMode) {
  LIFConfig cfg;
  cfg.spike_fn = SpikeFn::kIdentity;
  cfg.detach_reset = false;
  cfg.threshold = 0.5;
  auto net = build_network<double>(tssd::testing::tiny_spec(1, 4, 3), cfg, 7);
  Rng rng(8);
  Batch<double> batch{random_tensor(Shape{2, 1, 4, 4}, rng), {1, 0}};
  auto graph = [&](Tape<double>& t) {
    auto rec = net.forward(t, batch, 2, BatchNormMode::kTrain);
    return project(rec.final_logits, 14);
  };
  EXPECT_LT(check(net.params(), graph), kBatchNormTol);
}

TEST(Gradcheck, NonScalarGraphRejected) {
  Fixture f;
  f.add("w", Shape{3});
  auto graph = [&](Tape<double>& t) { return t.param(f.params, "w"); };
  EXPECT_THROW(gradcheck(f.params, Graph<double>(graph)), TapeError);
}
