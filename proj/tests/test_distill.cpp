#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace tssd;
using tssd::testing::random_tensor;
using tssd::testing::tiny_spec;

namespace {

Tensor<double> t3(std::size_t T, std::size_t B, std::size_t K, std::vector<double> v) {
  return Tensor<double>(Shape{T, B, K}, std::move(v));
}
Tensor<double> t2(std::size_t B, std::size_t K, std::vector<double> v) {
  return Tensor<double>(Shape{B, K}, std::move(v));
}

// -ln softmax(z)[y], computed with a max shift.
double ce_oracle(const std::vector<double>& z, int y) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double s = 0;
  for (double v : z) s += std::exp(v - m);
  return -(z[static_cast<std::size_t>(y)] - m - std::log(s));
}

}  // namespace

TEST(AverageLogits, Examples) {
  Tape<double> tape;
  auto a = average_logits(tape.constant(t3(2, 1, 2, {2, 0, 0, 2})), 2);
  EXPECT_EQ(a.value().storage(), (std::vector<double>{1, 1}));
  auto z = tape.constant(t3(3, 1, 2, {5, -1, 7, 8, 1, 1}));
  EXPECT_EQ(average_logits(z, 1).value().storage(), (std::vector<double>{5, -1}));
  auto c = average_logits(tape.constant(t3(3, 2, 1, {0.3, -2, 0.3, -2, 0.3, -2})), 3);
  EXPECT_NEAR(c.value()[0], 0.3, 1e-15);
  EXPECT_NEAR(c.value()[1], -2.0, 1e-15);
  EXPECT_THROW(average_logits(z, 4), ShapeError);
  EXPECT_THROW(average_logits(z, 0), ShapeError);
}

TEST(TaskLoss, UniformLogits) {
  Tape<double> tape;
  const std::vector<int> y{4};
  auto z = tape.constant(Tensor<double>(Shape{2, 1, 10}));
  EXPECT_NEAR(task_loss(z, std::span<const int>(y), 1).value()[0], std::log(10.0), 1e-12);
  EXPECT_NEAR(task_loss(z, std::span<const int>(y), 2).value()[0], 2 * std::log(10.0), 1e-12);
}

TEST(TaskLoss, ConfidentCorrectLogit) {
  Tape<double> tape;
  const std::vector<int> y{0};
  // two classes: -ln(e^10 / (e^10 + 1)) = ln(1 + e^-10)
  auto two = tape.constant(t3(1, 1, 2, {10, 0}));
  EXPECT_NEAR(task_loss(two, std::span<const int>(y), 1).value()[0], std::log1p(std::exp(-10.0)),
              1e-15);
  EXPECT_NEAR(task_loss(two, std::span<const int>(y), 1).value()[0], 4.54e-5, 1e-7);
  std::vector<double> z(10, 0.0);
  z[0] = 10;
  auto ten = tape.constant(t3(1, 1, 10, z));
  EXPECT_NEAR(task_loss(ten, std::span<const int>(y), 1).value()[0], ce_oracle(z, 0), 1e-12);
}

TEST(TaskLoss, BatchMeanMatchesOracle) {
  Rng rng(1);
  auto z = random_tensor(Shape{3, 4, 5}, rng, -3, 3);
  const std::vector<int> y{0, 4, 2, 2};
  double expected = 0;
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t b = 0; b < 4; ++b) {
      std::vector<double> row(5);
      for (std::size_t k = 0; k < 5; ++k) row[k] = z.at(t, b, k);
      expected += ce_oracle(row, y[b]) / 4.0;
    }
  }
  Tape<double> tape;
  EXPECT_NEAR(task_loss(tape.constant(z), std::span<const int>(y), 2).value()[0], expected, 1e-12);
}

TEST(TaskLoss, LabelOutOfRange) {
  Tape<double> tape;
  const std::vector<int> y{-1};
  EXPECT_THROW(task_loss(tape.constant(Tensor<double>(Shape{1, 1, 3})), std::span<const int>(y), 1),
               ConfigError);
}

TEST(TsdLoss, Examples) {
  Tape<double> tape;
  auto a = tape.constant(t2(1, 2, {1, 0}));
  auto b = tape.constant(t2(1, 2, {0, 1}));
  EXPECT_EQ(tsd_loss(a, b).value()[0], 2.0);
  EXPECT_EQ(tsd_loss(a, a).value()[0], 0.0);
  EXPECT_THROW(tsd_loss(a, tape.constant(t2(1, 3, {0, 0, 0}))), ShapeError);
}

TEST(TsdLoss, MeanOverBatch) {
  Tape<double> tape;
  auto s = tape.constant(t2(2, 2, {1, 0, 3, 0}));
  auto t = tape.constant(t2(2, 2, {0, 1, 0, 0}));
  EXPECT_NEAR(tsd_loss(s, t).value()[0], (2.0 + 9.0) / 2.0, 1e-15);
}

TEST(TsdLoss, GradientAgainstClosedForm) {
  Rng rng(2);
  ParamSet<double> p;
  p.add("s", random_tensor(Shape{3, 4}, rng));
  p.add("t", random_tensor(Shape{3, 4}, rng));
  Tape<double> tape;
  backward(tsd_loss(tape.param(p, "s"), tape.param(p, "t")), p);
  for (std::size_t i = 0; i < 12; ++i) {
    const double d = 2.0 * (p["s"][i] - p["t"][i]) / 3.0;
    EXPECT_NEAR(p["s"].grad()[i], d, 1e-12);
    EXPECT_NEAR(p["t"].grad()[i], -d, 1e-12);
  }
  auto r = gradcheck(p, Graph<double>([&](Tape<double>& t) {
                       return tsd_loss(t.param(p, "s"), t.param(p, "t"));
                     }));
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(TsdLoss, DetachedTeacherGetsNoGradient) {
  ParamSet<double> p;
  p.add("s", Tensor<double>(Shape{1, 2}, std::vector<double>{1, 0}));
  p.add("t", Tensor<double>(Shape{1, 2}, std::vector<double>{0, 1}));
  Tape<double> tape;
  backward(tsd_loss(tape.param(p, "s"), tape.param(p, "t"), true), p);
  EXPECT_EQ(p["t"].grad(), (std::vector<double>{0, 0}));
  EXPECT_EQ(p["s"].grad(), (std::vector<double>{2, -2}));
}

TEST(SsdLoss, Examples) {
  Tape<double> tape;
  auto fin = tape.constant(t2(1, 2, {0, 0}));
  EXPECT_EQ(ssd_loss(tape.constant(t3(1, 1, 2, {1, 1})), fin, 1).value()[0], 2.0);
  auto same = tape.constant(t3(2, 1, 2, {0, 0, 0, 0}));
  EXPECT_EQ(ssd_loss(same, fin, 2).value()[0], 0.0);
  auto w = tape.constant(t3(2, 1, 2, {std::sqrt(0.5), 0, 0, std::sqrt(0.3)}));
  EXPECT_NEAR(ssd_loss(w, fin, 2).value()[0], 0.8, 1e-12);
  EXPECT_THROW(ssd_loss(w, tape.constant(t2(1, 3, {0, 0, 0})), 2), ShapeError);
  EXPECT_THROW(ssd_loss(w, fin, 3), ShapeError);
}

TEST(SsdLoss, TeacherDetachedByDefault) {
  ParamSet<double> p;
  p.add("w", Tensor<double>(Shape{1, 1, 2}, std::vector<double>{1, 1}));
  p.add("f", Tensor<double>(Shape{1, 2}, std::vector<double>{0, 0}));
  Tape<double> tape;
  backward(ssd_loss(tape.param(p, "w"), tape.param(p, "f"), 1), p);
  EXPECT_EQ(p["f"].grad(), (std::vector<double>{0, 0}));
  EXPECT_EQ(p["w"].grad(), (std::vector<double>{2, 2}));
  Tape<double> t2;
  backward(ssd_loss(t2.param(p, "w"), t2.param(p, "f"), 1, false), p);
  EXPECT_EQ(p["f"].grad(), (std::vector<double>{-2, -2}));
}

TEST(TotalLoss, Examples) {
  DistillConfig c;
  c.alpha = 0;
  c.beta = 0;
  EXPECT_EQ(total_loss(1.3, 5.0, 7.0, c).total, 1.3);
  c.alpha = 1;
  c.beta = 1;
  EXPECT_EQ(total_loss(1.0, 0.5, 0.25, c).total, 1.75);
}

TEST(TotalLoss, AffineInWeights) {
  const double task = 0.9, tsd = 0.4, ssd = 0.15;
  for (double a : {0.0, 0.5, 2.0}) {
    for (double b : {0.0, 1.0, 3.0}) {
      DistillConfig c;
      c.alpha = a;
      c.beta = b;
      EXPECT_NEAR(total_loss(task, tsd, ssd, c).total, task + a * tsd + b * ssd, 1e-15);
    }
  }
}

TEST(DistillConfig, Validation) {
  DistillConfig c;
  c.student_steps = 3;
  c.teacher_steps = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.student_steps = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.alpha = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

class ComposeTest : public ::testing::Test {
 protected:
  Network<double> net = build_network<double>(tiny_spec(1, 8, 3), LIFConfig{}, 21);
  Batch<double> batch = [] {
    Rng rng(22);
    return Batch<double>{random_tensor(Shape{4, 1, 8, 8}, rng, 0, 3), {0, 1, 2, 1}};
  }();

  LossTerms<double> run(Tape<double>& tape, const DistillConfig& cfg) {
    auto rec = net.forward(tape, batch, cfg.teacher_steps, BatchNormMode::kInference);
    auto terms = compose_losses(rec.final_logits, rec.weak_logits,
                                std::span<const int>(batch.labels), cfg);
    backward(terms.total, net.params());
    return terms;
  }

  std::map<std::string, std::vector<double>> grads() {
    std::map<std::string, std::vector<double>> g;
    for (const auto& e : net.params())
      if (e.trainable()) g[e.name] = e.tensor.grad();
    return g;
  }
};

TEST_F(ComposeTest, TotalIsWeightedSum) {
  DistillConfig cfg;
  cfg.alpha = 0.7;
  cfg.beta = 1.3;
  Tape<double> tape;
  auto t = run(tape, cfg);
  EXPECT_NEAR(t.values.total, t.values.task + 0.7 * t.values.tsd + 1.3 * t.values.ssd,
              1e-6 * std::abs(t.values.total));
  EXPECT_GE(t.values.task, 0.0);
  EXPECT_GE(t.values.tsd, 0.0);
  EXPECT_GE(t.values.ssd, 0.0);
}

TEST_F(ComposeTest, EqualStepsGiveZeroTsd) {
  DistillConfig cfg;
  cfg.student_steps = cfg.teacher_steps = 3;
  Tape<double> tape;
  EXPECT_EQ(run(tape, cfg).values.tsd, 0.0);
}

TEST_F(ComposeTest, WeakHeadOnlyLearnsFromSsd) {
  DistillConfig cfg;
  cfg.beta = 0;
  Tape<double> tape;
  run(tape, cfg);
  for (const auto& e : net.params()) {
    if (!e.weak_head || !e.trainable()) continue;
    for (double g : e.tensor.grad()) EXPECT_EQ(g, 0.0) << e.name;
  }
  cfg.weak_task_loss = true;
  Tape<double> t2;
  run(t2, cfg);
  double mass = 0;
  for (double g : net.params()["weak.fc.weight"].grad()) mass += std::abs(g);
  EXPECT_GT(mass, 0.0);
}

TEST_F(ComposeTest, SsdDoesNotReachDeepStages) {
  DistillConfig with, without;
  without.beta = 0;
  Tape<double> ta, tb;
  run(ta, with);
  auto g1 = grads();
  run(tb, without);
  auto g0 = grads();
  for (const char* name : {"head.fc.weight", "head.fc.bias", "stage2.block0.conv.weight"}) {
    ASSERT_EQ(g1[name].size(), g0[name].size());
    for (std::size_t i = 0; i < g1[name].size(); ++i) EXPECT_NEAR(g1[name][i], g0[name][i], 1e-12);
  }
}

TEST_F(ComposeTest, AblationReducesToPerStepCrossEntropy) {
  DistillConfig cfg;
  cfg.alpha = cfg.beta = 0;
  Tape<double> ta;
  run(ta, cfg);
  auto g_compose = grads();
  Tape<double> tb;
  auto rec = net.forward(tb, batch, cfg.teacher_steps, BatchNormMode::kInference);
  Var<double> loss;
  for (std::size_t t = 0; t < cfg.student_steps; ++t) {
    auto step = reshape(slice_leading(rec.final_logits, t, 1), Shape{4, 3});
    auto ce = softmax_cross_entropy(step, std::span<const int>(batch.labels));
    loss = t == 0 ? ce : add(loss, ce);
  }
  backward(loss, net.params());
  auto g_plain = grads();
  for (const auto& [name, g] : g_plain) {
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g_compose[name][i], g[i], 1e-9) << name;
  }
}

TEST_F(ComposeTest, MissingWeakHeadWithSsd) {
  Tape<double> tape;
  auto rec = net.forward(tape, batch, 4, BatchNormMode::kInference);
  EXPECT_THROW(compose_losses(rec.final_logits, std::optional<Var<double>>{},
                              std::span<const int>(batch.labels), DistillConfig{}),
               ConfigError);
}

TEST(ZeroAtAgreement, RandomPairs) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = random_tensor(Shape{3, 4}, rng);
    auto b = a;
    b[rng.below(12)] += 0.25;
    Tape<double> tape;
    EXPECT_EQ(tsd_loss(tape.constant(a), tape.constant(a)).value()[0], 0.0);
    EXPECT_GT(tsd_loss(tape.constant(a), tape.constant(b)).value()[0], 0.0);
    Tensor<double> w(Shape{2, 3, 4});
    std::copy(a.storage().begin(), a.storage().end(), w.storage().begin());
    std::copy(a.storage().begin(), a.storage().end(), w.storage().begin() + 12);
    EXPECT_EQ(ssd_loss(tape.constant(w), tape.constant(a), 2).value()[0], 0.0);
    EXPECT_GT(ssd_loss(tape.constant(w), tape.constant(b), 2).value()[0], 0.0);
  }
}
