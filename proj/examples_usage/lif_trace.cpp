// Drives one LIF neuron with a constant current and prints its membrane
// trace: the potential before and after reset, and the spike train.
//
//   lif_trace [current] [steps] [tau]

#include <cstdio>
#include <cstdlib>

#include "tssd/tssd.hpp"

int main(int argc, char** argv) {
  using namespace tssd;
  const double current = argc > 1 ? std::atof(argv[1]) : 0.6;
  const int steps = argc > 2 ? std::atoi(argv[2]) : 10;
  LIFConfig cfg;
  cfg.tau = argc > 3 ? std::atof(argv[3]) : 2.0;
  cfg.validate();

  const Shape one{1};
  auto state = LIFState<double>::zeros(one);
  std::printf("t   input   H(pre-reset)  spike  H(after)\n");
  for (int t = 0; t < steps; ++t) {
    auto step = lif_step(state, Tensor<double>(one, current), cfg);
    state = step.state;
    std::printf("%-3d %-7.3f %-13.6f %-6.0f %.6f\n", t, current, step.pre_reset[0], step.spikes[0],
                state.membrane[0]);
  }
  return 0;
}
