// Trains a small spiking VGG on synthetic oriented bars with the student
// running one timestep and a four-step temporal teacher, then compares
// single-step accuracy against the weak classifier and early exit.
//
//   train_bars [epochs] [seed]

#include <cstdio>
#include <cstdlib>

#include "tssd/tssd.hpp"

int main(int argc, char** argv) {
  using namespace tssd;
  const std::size_t epochs = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 5;
  const std::uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 1;

  DataConfig data;
  data.kind = "bars";
  data.size = 16;
  data.n_train = 1000;
  data.n_test = 200;
  data.noise = 0.3;
  auto sets = load_datasets<float>(data, 1);

  const auto spec = NetworkSpec::vgg_mini(1, data.size, data.classes).narrowed(8);
  auto net = build_network<float>(spec, LIFConfig{}, seed);

  DistillConfig distill;
  distill.student_steps = 1;
  distill.teacher_steps = 4;
  TrainConfig train;
  train.epochs = epochs;
  train.batch_size = 32;
  train.lr = 0.05;
  train.lr_step = epochs;
  train.seed = seed;

  FitOutputs out;
  out.on_row = [](const MetricsRow& r) {
    if (r.split == "test") std::printf("epoch %zu  accuracy %.3f  weak %.3f\n", r.epoch, r.accuracy, r.weak_accuracy);
  };
  fit(net, sets.train, sets.test, distill, train, out);

  for (std::size_t t : {1, 2, 4}) {
    std::printf("T=%zu accuracy %.3f\n", t, evaluate(net, sets.test, t).accuracy);
  }
  const auto ee = early_exit_eval(net, sets.test, 1, 0.9);
  std::printf("early exit at 0.9: %.3f (%.0f%% exit at the weak head, weak alone %.3f)\n",
              ee.blended_accuracy, 100.0 * ee.exit_fraction, ee.weak_accuracy);
  return 0;
}
