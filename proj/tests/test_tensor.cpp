#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace tssd;

TEST(Tensor, LengthMatchesShapeProduct) {
  Tensor<double> t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_THROW(Tensor<double>(Shape{2, 3}, std::vector<double>(5)), ShapeError);
}

TEST(Tensor, ZeroDimensionRejected) {
  EXPECT_THROW(Tensor<double>(Shape{2, 0}), ShapeError);
}

TEST(Tensor, ScalarHasEmptyShape) {
  Tensor<double> s(Shape{}, 3.5);
  EXPECT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0], 3.5);
}

TEST(Tensor, RowMajorIndexing) {
  Tensor<double> t(Shape{2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
  EXPECT_EQ(t.at(1, 2), 5.0);
  EXPECT_EQ(t.at(0, 1), 1.0);
}

TEST(Tensor, ReshapeKeepsData) {
  Tensor<double> t(Shape{2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
  auto r = t.reshaped(Shape{3, 2});
  EXPECT_EQ(r.at(2, 1), 5.0);
  EXPECT_THROW(t.reshaped(Shape{4, 2}), ShapeError);
}

TEST(Tensor, GradBufferMatchesData) {
  Tensor<double> t(Shape{4});
  EXPECT_FALSE(t.has_grad());
  t.zero_grad();
  EXPECT_EQ(t.grad().size(), t.size());
}

TEST(Tensor, FiniteCheck) {
  Tensor<double> t(Shape{2});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
}

TEST(ParamSet, NamesAreUnique) {
  ParamSet<double> p;
  p.add("w", Tensor<double>(Shape{2}));
  EXPECT_THROW(p.add("w", Tensor<double>(Shape{2})), ConfigError);
  EXPECT_THROW(p["missing"], ConfigError);
}

TEST(ParamSet, IterationFollowsInsertionOrder) {
  ParamSet<double> p;
  for (const char* n : {"c", "a", "b"}) p.add(n, Tensor<double>(Shape{1}));
  std::vector<std::string> names;
  for (const auto& e : p) names.push_back(e.name);
  EXPECT_EQ(names, (std::vector<std::string>{"c", "a", "b"}));
}

TEST(ParamSet, ReferencesSurviveGrowth) {
  ParamSet<double> p;
  Tensor<double>& first = p.add("first", Tensor<double>(Shape{1}, 7.0));
  for (int i = 0; i < 100; ++i) p.add("x" + std::to_string(i), Tensor<double>(Shape{1}));
  EXPECT_EQ(first[0], 7.0);
  EXPECT_EQ(&first, &p["first"]);
}

TEST(ParamSet, ParameterCountSkipsBuffers) {
  ParamSet<double> p;
  p.add("w", Tensor<double>(Shape{3, 2}));
  p.add("stat", Tensor<double>(Shape{5}), ParamKind::kBuffer);
  EXPECT_EQ(p.parameter_count(), 6u);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
}

TEST(Rng, DerivedSeedsDiffer) {
  EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
  EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
  EXPECT_EQ(derive_seed(9, 3), derive_seed(9, 3));
}

TEST(Rng, BelowStaysInRange) {
  Rng r(3);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) {
    auto v = r.below(7);
    ASSERT_LT(v, 7u);
    ++hits[v];
  }
  for (int h : hits) EXPECT_GT(h, 800);
}

TEST(Rng, NormalMoments) {
  Rng r(11);
  double s = 0, ss = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    s += v;
    ss += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(ss / n, 1.0, 0.02);
}
