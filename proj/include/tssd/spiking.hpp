#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tssd/error.hpp"
#include "tssd/ops.hpp"
#include "tssd/tape.hpp"
#include "tssd/tensor.hpp"

namespace tssd {

/// What the neuron emits as its output signal.
enum class SpikeFn {
  kHeaviside,  // binary spike, rectangular surrogate gradient
  kIdentity,   // passthrough of the membrane; exists for gradient checking
};

/// Leaky integrate-and-fire constants.
struct LIFConfig {
  double tau = 2.0;
  double threshold = 1.0;
  double surrogate_width = 1.0;
  SpikeFn spike_fn = SpikeFn::kHeaviside;
  /// Treat the reset term S*threshold as a constant during backward.
  bool detach_reset = true;

  double leak() const { return 1.0 - 1.0 / tau; }

  void validate() const {
    // tau == 1 is allowed: it is the memoryless limit with leak factor 0.
    if (!(tau >= 1.0) || !std::isfinite(tau)) {
      throw ConfigError("lif: tau must be >= 1, got " + std::to_string(tau));
    }
    if (!(threshold > 0.0)) {
      throw ConfigError("lif: threshold must be > 0, got " + std::to_string(threshold));
    }
    if (!(surrogate_width > 0.0)) {
      throw ConfigError("lif: surrogate_width must be > 0, got " +
                        std::to_string(surrogate_width));
    }
  }
};

/// Membrane potentials of one layer.
template <class Real>
struct LIFState {
  Tensor<Real> membrane;

  static LIFState zeros(const Shape& shape) { return LIFState{Tensor<Real>(shape)}; }
};

/// Spikes over time, [T, ...], every element 0 or 1.
template <class Real>
struct SpikeTrain {
  Tensor<Real> spikes;

  std::size_t timesteps() const { return spikes.dim(0); }
  bool binary() const {
    for (Real v : spikes.storage()) {
      if (v != Real(0) && v != Real(1)) return false;
    }
    return true;
  }
};

/// Rectangular surrogate of dS/dH: 1/a inside |H - threshold| < a/2, else 0.
template <class Real>
Real surrogate_grad(Real pre_reset, const LIFConfig& cfg) {
  const double a = cfg.surrogate_width;
  return std::abs(static_cast<double>(pre_reset) - cfg.threshold) < a / 2.0
             ? static_cast<Real>(1.0 / a)
             : Real(0);
}

/// Elementwise surrogate factors for a tensor of pre-reset membranes.
template <class Real>
Tensor<Real> spike_backward(const Tensor<Real>& membrane, const LIFConfig& cfg) {
  cfg.validate();
  Tensor<Real> out(membrane.shape());
  for (std::size_t i = 0; i < membrane.size(); ++i) out[i] = surrogate_grad(membrane[i], cfg);
  return out;
}

template <class Real>
struct LIFStepResult {
  Tensor<Real> spikes;
  LIFState<Real> state;    // post-reset membrane
  Tensor<Real> pre_reset;  // membrane before the reset, input to the surrogate
};

/// One timestep: charge with leak, fire on H >= threshold, soft reset.
template <class Real>
LIFStepResult<Real> lif_step(const LIFState<Real>& state, const Tensor<Real>& current,
                             const LIFConfig& cfg) {
  cfg.validate();
  if (current.shape() != state.membrane.shape()) {
    throw ShapeError("lif_step: current " + shape_str(current.shape()) +
                     " does not match membrane " + shape_str(state.membrane.shape()));
  }
  if (!current.all_finite()) throw NumericError("lif_step: non-finite input current");
  const Real leak = static_cast<Real>(cfg.leak());
  const Real theta = static_cast<Real>(cfg.threshold);
  LIFStepResult<Real> r{Tensor<Real>(current.shape()), LIFState<Real>{Tensor<Real>(current.shape())},
                        Tensor<Real>(current.shape())};
  for (std::size_t i = 0; i < current.size(); ++i) {
    const Real h = leak * state.membrane[i] + current[i];
    const Real s = cfg.spike_fn == SpikeFn::kHeaviside ? (h >= theta ? Real(1) : Real(0)) : h;
    r.pre_reset[i] = h;
    r.spikes[i] = s;
    r.state.membrane[i] = h - s * theta;
  }
  return r;
}

/// Unrolls lif_step over currents[T, ...] from `initial` (zeros if absent).
template <class Real>
SpikeTrain<Real> lif_sequence(const Tensor<Real>& currents, const LIFConfig& cfg,
                              std::optional<LIFState<Real>> initial = std::nullopt) {
  if (currents.rank() < 1) throw ShapeError("lif_sequence: currents must be [T, ...]");
  const std::size_t steps = currents.dim(0);
  const Shape step_shape(currents.shape().begin() + 1, currents.shape().end());
  const std::size_t row = currents.size() / steps;
  LIFState<Real> state = initial ? std::move(*initial) : LIFState<Real>::zeros(step_shape);
  SpikeTrain<Real> out{Tensor<Real>(currents.shape())};
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor<Real> cur(step_shape, std::vector<Real>(currents.storage().begin() + t * row,
                                                   currents.storage().begin() + (t + 1) * row));
    auto r = lif_step(state, cur, cfg);
    std::copy(r.spikes.storage().begin(), r.spikes.storage().end(),
              out.spikes.storage().begin() + t * row);
    state = std::move(r.state);
  }
  return out;
}

/// Differentiable LIF layer over `timesteps` time-major slices of `currents`
/// (leading dimension = timesteps * batch). Membranes start at zero.
///
/// Backward is BPTT: with u_t the pre-reset membrane and h_t the post-reset
/// one, dL/du_t = dL/dS_t * surrogate(u_t) + dL/dh_t and dL/dh_{t-1} =
/// leak * dL/du_t. With detach_reset the reset contributes nothing through
/// S_t; otherwise dh_t/du_t = 1 - threshold * dS_t/du_t.
///
/// If `pre_reset_out` is given it receives the pre-reset membranes.
template <class Real>
Var<Real> lif(const Var<Real>& currents, std::size_t timesteps, const LIFConfig& cfg,
              Tensor<Real>* pre_reset_out = nullptr) {
  cfg.validate();
  const Shape& s = currents.shape();
  if (timesteps == 0) throw ShapeError("lif: timestep count must be >= 1");
  if (s.empty() || s[0] % timesteps != 0) {
    detail::shape_fail("lif", s, "leading dim divisible by T=" + std::to_string(timesteps));
  }
  const Tensor<Real>& in = currents.value();
  if (!in.all_finite()) throw NumericError("lif: non-finite input current");
  const std::size_t row = in.size() / timesteps;
  const Real leak = static_cast<Real>(cfg.leak());
  const Real theta = static_cast<Real>(cfg.threshold);
  const bool heaviside = cfg.spike_fn == SpikeFn::kHeaviside;
  Tensor<Real> out(s);
  std::vector<Real> pre(in.size());
  std::vector<Real> h(row, Real(0));
  const Real* iv = in.data().data();
  for (std::size_t t = 0; t < timesteps; ++t) {
    const Real* it = iv + t * row;
    Real* ot = out.data().data() + t * row;
    Real* pt = pre.data() + t * row;
    for (std::size_t i = 0; i < row; ++i) {
      const Real u = leak * h[i] + it[i];
      const Real sp = heaviside ? (u >= theta ? Real(1) : Real(0)) : u;
      pt[i] = u;
      ot[i] = sp;
      h[i] = u - sp * theta;
    }
  }
  if (pre_reset_out) *pre_reset_out = Tensor<Real>(s, pre);
  const std::size_t ic = currents.id();
  return detail::tape_of(currents).record(
      std::move(out), {currents},
      [ic, timesteps, row, leak, theta, heaviside, cfg, pre = std::move(pre)](Tape<Real>& t,
                                                                            std::size_t self) {
        Real* d = t.grad_sink(ic);
        if (!d) return;
        const Real* g = t.grad_at(self).data();
        const Real inv_a = static_cast<Real>(1.0 / cfg.surrogate_width);
        const Real half_a = static_cast<Real>(cfg.surrogate_width / 2.0);
        std::vector<Real> gh(row, Real(0));
        for (std::size_t step = timesteps; step-- > 0;) {
          const Real* gt = g + step * row;
          const Real* pt = pre.data() + step * row;
          Real* dt = d + step * row;
          for (std::size_t i = 0; i < row; ++i) {
            const Real ds = heaviside ? (std::abs(pt[i] - theta) < half_a ? inv_a : Real(0))
                                      : Real(1);
            const Real dh_du = cfg.detach_reset ? Real(1) : Real(1) - theta * ds;
            const Real gu = gt[i] * ds + gh[i] * dh_du;
            dt[i] += gu;
            gh[i] = leak * gu;
          }
        }
      });
}

}  // namespace tssd
