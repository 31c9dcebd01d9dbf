// Randomized invariants, runnable on their own: `tssd_properties`.
#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace tssd;
using tssd::testing::random_tensor;
using tssd::testing::tiny_spec;

namespace {

LIFConfig random_lif(Rng& rng) {
  LIFConfig c;
  c.tau = rng.uniform(1.0, 5.0);
  c.threshold = rng.uniform(0.2, 2.0);
  c.surrogate_width = rng.uniform(0.2, 2.0);
  return c;
}

EventStream random_stream(Rng& rng) {
  EventStream s;
  s.width = static_cast<std::uint16_t>(4 + rng.below(40));
  s.height = static_cast<std::uint16_t>(4 + rng.below(40));
  const std::size_t n = rng.below(500);
  std::uint32_t t = 0;
  for (std::size_t i = 0; i < n; ++i) {
    t += static_cast<std::uint32_t>(rng.below(800));
    s.events.push_back(Event{t, static_cast<std::uint16_t>(rng.below(s.width)),
                             static_cast<std::uint16_t>(rng.below(s.height)),
                             static_cast<std::uint8_t>(rng.below(2))});
  }
  return s;
}

}  // namespace

TEST(Property, SpikeBinarity) {
  Rng rng(1);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t T = 1 + rng.below(6), n = 1 + rng.below(8);
    const double scale = std::pow(10.0, rng.uniform(-2, 3));
    auto cur = random_tensor(Shape{T, n}, rng, -scale, scale);
    const auto cfg = random_lif(rng);
    auto train = lif_sequence(cur, cfg);
    ASSERT_TRUE(train.binary()) << "trial " << trial;
    Tape<double> tape;
    auto out = lif(tape.constant(cur.reshaped(Shape{T * n})), T, cfg);
    for (double v : out.value().storage()) ASSERT_TRUE(v == 0.0 || v == 1.0);
  }
}

TEST(Property, ResetArithmetic) {
  Rng rng(2);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto cfg = random_lif(rng);
    const std::size_t n = 1 + rng.below(16);
    LIFState<double> state{random_tensor(Shape{n}, rng, -1, 2)};
    auto cur = random_tensor(Shape{n}, rng, -2, 3);
    auto r = lif_step(state, cur, cfg);
    for (std::size_t i = 0; i < n; ++i) {
      const double pre = (1.0 - 1.0 / cfg.tau) * state.membrane[i] + cur[i];
      ASSERT_EQ(r.pre_reset[i], pre);
      ASSERT_EQ(r.state.membrane[i], pre - cfg.threshold * r.spikes[i]);
      ASSERT_EQ(r.spikes[i], pre >= cfg.threshold ? 1.0 : 0.0);
    }
  }
}

TEST(Property, MemorylessLimit) {
  Rng rng(3);
  LIFConfig cfg;
  cfg.tau = 1.0;
  cfg.threshold = 1e9;  // never fires, so H(t) is the raw charge
  for (int trial = 0; trial < 500; ++trial) {
    LIFState<double> state{Tensor<double>(Shape{4})};
    for (int t = 0; t < 5; ++t) {
      auto cur = random_tensor(Shape{4}, rng, -3, 3);
      auto r = lif_step(state, cur, cfg);
      ASSERT_EQ(r.state.membrane, cur);
      state = r.state;
    }
  }
}

TEST(Property, PrefixInInference) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const bool frames = trial % 2 == 1;
    auto net = build_network<double>(tiny_spec(frames ? 2 : 1), random_lif(rng), 100 + trial);
    const std::size_t b = 1 + rng.below(4), tt = 2 + rng.below(4), ts = 1 + rng.below(tt - 1);
    Batch<double> batch;
    batch.temporal = frames;
    batch.inputs = frames ? random_tensor(Shape{b, tt, 2, 8, 8}, rng, 0, 3)
                          : random_tensor(Shape{b, 1, 8, 8}, rng, 0, 3);
    Tape<double> tl, ts_tape;
    auto full = net.forward(tl, batch, tt, BatchNormMode::kInference);
    auto part = net.forward(ts_tape, batch, ts, BatchNormMode::kInference);
    const auto& a = full.final_logits.value().storage();
    const auto& p = part.final_logits.value().storage();
    for (std::size_t i = 0; i < p.size(); ++i) ASSERT_EQ(a[i], p[i]) << "trial " << trial;
    const auto& wa = full.weak_logits->value().storage();
    const auto& wp = part.weak_logits->value().storage();
    for (std::size_t i = 0; i < wp.size(); ++i) ASSERT_EQ(wa[i], wp[i]);
  }
}

TEST(Property, EventCountConservation) {
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    auto s = random_stream(rng);
    const double window = rng.uniform(0.5, 50.0);
    const std::size_t th = 1 + rng.below(s.height), tw = 1 + rng.below(s.width);
    auto ft = integrate_events<double>(s, window, th, tw);
    double total = 0;
    for (double v : ft.frames.storage()) {
      ASSERT_GE(v, 0.0);
      total += v;
    }
    ASSERT_EQ(total, static_cast<double>(s.events.size()));
    const std::size_t expected_frames =
        s.events.empty() ? 1 : static_cast<std::size_t>(std::floor(s.events.back().t_us / (window * 1000))) + 1;
    ASSERT_EQ(ft.timesteps(), expected_frames);
  }
}

TEST(Property, IntegrationDeterminism) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = random_stream(rng);
    auto a = integrate_events<double>(s, 7.5, s.height / 2 + 1, s.width / 2 + 1);
    auto b = integrate_events<double>(s, 7.5, s.height / 2 + 1, s.width / 2 + 1);
    ASSERT_EQ(a.frames, b.frames);
  }
}

TEST(Property, SplitDisjointExhaustive) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(300);
    auto [tr, te] = split_indices(n, rng.uniform(), rng.next());
    std::vector<int> seen(n, 0);
    for (auto i : tr) ++seen[i];
    for (auto i : te) ++seen[i];
    for (int c : seen) ASSERT_EQ(c, 1);
  }
}

TEST(Property, CheckpointRoundTrip) {
  Rng rng(8);
  auto dir = tssd::testing::scratch_dir("prop_ckpt");
  for (int trial = 0; trial < 30; ++trial) {
    ParamSet<double> p;
    const std::size_t count = 1 + rng.below(6);
    for (std::size_t k = 0; k < count; ++k) {
      Shape s;
      for (std::size_t d = 0, r = 1 + rng.below(4); d < r; ++d) s.push_back(1 + rng.below(5));
      Tensor<double> t(s);
      for (double& v : t.storage()) v = rng.normal() * std::pow(10.0, rng.uniform(-30, 30));
      p.add("t" + std::to_string(k), std::move(t),
            rng.bernoulli(0.3) ? ParamKind::kBuffer : ParamKind::kTrainable);
    }
    save_checkpoint(p, dir / "c");
    auto back = load_checkpoint<double>(dir / "c");
    ASSERT_EQ(back.size(), p.size());
    for (const auto& e : p) ASSERT_EQ(back[e.name], e.tensor);

    auto net = build_network<float>(tiny_spec(), random_lif(rng), rng.next());
    save_checkpoint(net.params(), dir / "n");
    auto fresh = build_network<float>(tiny_spec(), net.lif_config(), 0);
    load_checkpoint_into(fresh.params(), dir / "n");
    for (const auto& e : net.params()) ASSERT_EQ(fresh.params()[e.name], e.tensor);
  }
}

TEST(Property, SeedDeterminism) {
  auto data = synth_bars<float>(48, 3, 8, 0.2, 9);
  std::vector<std::size_t> tr(36), te(12);
  std::iota(tr.begin(), tr.end(), 0);
  std::iota(te.begin(), te.end(), 36);
  auto train = data.subset(tr);
  auto test = data.subset(te);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 8;
  tc.augment = true;
  tc.lr_step = 2;
  auto run = [&](std::uint64_t seed) {
    tc.seed = seed;
    auto net = build_network<float>(tiny_spec(1, 8, 3), LIFConfig{}, seed);
    std::vector<std::string> lines;
    FitOutputs out;
    out.on_row = [&](const MetricsRow& r) {
      MetricsRow copy = r;
      copy.wall_seconds = 0;
      lines.push_back(format_metrics_row(copy));
    };
    fit(net, train, test, DistillConfig{}, tc, out);
    return lines;
  };
  const auto a = run(11), b = run(11), c = run(12);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}
