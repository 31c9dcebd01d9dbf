#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "tssd/tssd.hpp"

namespace tssd::testing {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// sum(out * w) for a fixed random w: turns any output into a scalar whose
// gradient reaches every output element with a generic weight.
inline Var<double> project(const Var<double>& out, std::uint64_t seed) {
  Rng rng(seed);
  Tape<double>& tape = *out.tape();
  return sum(mul(out, tape.constant(random_tensor(out.shape(), rng))));
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("tssd_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Small network used across the suites: 3 stages, weak head after stage 1.
inline NetworkSpec tiny_spec(std::size_t in_channels = 1, std::size_t size = 8,
                             std::size_t classes = 3) {
  NetworkSpec s;
  s.stages = {{{4}, false}, {{4}, true}, {{6}, true}};
  s.attach_stage = 1;
  s.input_channels = in_channels;
  s.input_height = size;
  s.input_width = size;
  s.num_classes = classes;
  return s;
}

}  // namespace tssd::testing
