#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace tssd;

TEST(KeyValues, ParsesCommentsAndWhitespace) {
  auto kv = KeyValues::parse("# comment\n\n distill.alpha = 0.5 \ntrain.epochs=3\n");
  EXPECT_EQ(kv.get_double("distill.alpha", 0), 0.5);
  EXPECT_EQ(kv.get_uint("train.epochs", 0), 3u);
  EXPECT_EQ(kv.get_string("missing", "x"), "x");
}

TEST(KeyValues, MalformedLineNamesLocation) {
  try {
    KeyValues::parse("a=1\nnot a pair\n", "run.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos);
  }
}

TEST(KeyValues, TypedGettersRejectGarbage) {
  auto kv = KeyValues::parse("a=1.5x\nb=-3\nc=maybe\n");
  EXPECT_THROW(kv.get_double("a", 0), ConfigError);
  EXPECT_THROW(kv.get_uint("b", 0), ConfigError);
  EXPECT_THROW(kv.get_bool("c", false), ConfigError);
}

TEST(KeyValues, DoublesRoundTripExactly) {
  KeyValues kv;
  kv.set("x", 0.1);
  kv.set("y", 1e-4);
  auto back = KeyValues::parse(kv.str());
  EXPECT_EQ(back.get_double("x", 0), 0.1);
  EXPECT_EQ(back.get_double("y", 0), 1e-4);
}

TEST(KeyValues, MergeOverwrites) {
  auto a = KeyValues::parse("x=1\ny=2\n");
  a.merge(KeyValues::parse("y=3\nz=4\n"));
  EXPECT_EQ(a.str(), "x=1\ny=3\nz=4\n");
}

TEST(RunConfig, RoundTripThroughText) {
  RunConfig c;
  c.distill.alpha = 0.25;
  c.distill.student_steps = 1;
  c.train.lr = 0.05;
  c.train.seed = 77;
  c.data.kind = "bars";
  c.model = NetworkSpec::vgg_mini(1, 16, 4).narrowed(8);
  c.lif.tau = 1.5;
  auto back = RunConfig::from_kv(KeyValues::parse(c.to_kv().str()));
  EXPECT_EQ(back.to_kv().str(), c.to_kv().str());
  EXPECT_EQ(back.model, c.model);
}

TEST(RunConfig, UnknownKeyRejected) {
  try {
    RunConfig::from_kv(KeyValues::parse("distill.alhpa=1\n"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("distill.alhpa"), std::string::npos);
  }
}

TEST(RunConfig, LaterLayerWins) {
  auto file = KeyValues::parse("distill.alpha=0.5\ndistill.beta=0.5\n");
  auto flags = KeyValues::parse("distill.alpha=0\n");
  file.merge(flags);
  auto c = RunConfig::from_kv(file);
  EXPECT_EQ(c.distill.alpha, 0.0);
  EXPECT_EQ(c.distill.beta, 0.5);
}

TEST(RunConfig, ValidationCoversSections) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  c.data.kind = "cifar";
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.precision = "half";
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.distill.teacher_steps = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(RunConfig, DefaultsMatchTrainingConstants) {
  RunConfig c;
  EXPECT_EQ(c.train.lr, 0.1);
  EXPECT_EQ(c.train.momentum, 0.9);
  EXPECT_EQ(c.lif.tau, 2.0);
  EXPECT_EQ(c.lif.threshold, 1.0);
  EXPECT_EQ(c.lif.surrogate_width, 1.0);
  EXPECT_EQ(c.distill.alpha, 1.0);
  EXPECT_EQ(c.distill.beta, 1.0);
}
