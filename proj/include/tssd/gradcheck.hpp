#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "tssd/error.hpp"
#include "tssd/params.hpp"
#include "tssd/tape.hpp"

namespace tssd {

template <class Real>
using Graph = std::function<Var<Real>(Tape<Real>&)>;

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Compares tape gradients of the scalar built by `graph` against central
/// finite differences for every element of every trainable entry of `params`.
/// The graph must bind its parameters through the tape it is handed.
///
/// Relative error per element is |analytic - numeric| /
/// max(|analytic|, |numeric|, 1e-8).
template <class Real>
GradcheckResult gradcheck(ParamSet<Real>& params, const Graph<Real>& graph,
                          double epsilon = 1e-6) {
  Tape<Real> tape;
  Var<Real> loss = graph(tape);
  if (loss.size() != 1) {
    throw TapeError("gradcheck: graph output must be scalar, got " + shape_str(loss.shape()));
  }
  backward(loss, params);

  auto evaluate = [&]() {
    Tape<Real> probe;
    return static_cast<double>(graph(probe).value()[0]);
  };

  GradcheckResult result;
  for (auto& entry : params) {
    if (!entry.trainable()) continue;
    Tensor<Real>& p = entry.tensor;
    const std::vector<Real> analytic = p.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const Real saved = p[i];
      p[i] = static_cast<Real>(saved + epsilon);
      const double up = evaluate();
      p[i] = static_cast<Real>(saved - epsilon);
      const double down = evaluate();
      p[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++result.checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = entry.name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace tssd
