#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tssd/error.hpp"
#include "tssd/kv.hpp"
#include "tssd/ops.hpp"
#include "tssd/tape.hpp"

namespace tssd {

/// Knobs of the combined objective task + alpha*tsd + beta*ssd.
struct DistillConfig {
  std::size_t student_steps = 2;  // T_s: inference timesteps
  std::size_t teacher_steps = 4;  // T_t: training timesteps
  double alpha = 1.0;             // temporal self-distillation weight
  double beta = 1.0;              // spatial self-distillation weight
  bool detach_tsd_teacher = false;
  bool detach_ssd_teacher = true;
  /// Student logits are the first T_s steps of the T_t run. When false the
  /// student comes from a separate T_s-step forward pass.
  bool shared_run = true;
  /// Also apply the per-timestep task loss to the weak classifier's logits.
  bool weak_task_loss = false;

  void validate() const {
    if (student_steps < 1) throw ConfigError("distill: T_s must be >= 1");
    if (teacher_steps < student_steps) {
      throw ConfigError("distill: T_t (" + std::to_string(teacher_steps) + ") must be >= T_s (" +
                        std::to_string(student_steps) + ")");
    }
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("distill: alpha and beta must be >= 0");
  }

  void to_kv(KeyValues& kv) const {
    kv.set("distill.ts", student_steps);
    kv.set("distill.tt", teacher_steps);
    kv.set("distill.alpha", alpha);
    kv.set("distill.beta", beta);
    kv.set("distill.detach_tsd_teacher", detach_tsd_teacher);
    kv.set("distill.detach_ssd_teacher", detach_ssd_teacher);
    kv.set("distill.shared_run", shared_run);
    kv.set("distill.weak_task_loss", weak_task_loss);
  }

  static DistillConfig from_kv(const KeyValues& kv) { return from_kv(kv, DistillConfig{}); }
  static DistillConfig from_kv(const KeyValues& kv, DistillConfig base) {
    base.student_steps = kv.get_uint("distill.ts", base.student_steps);
    base.teacher_steps = kv.get_uint("distill.tt", base.teacher_steps);
    base.alpha = kv.get_double("distill.alpha", base.alpha);
    base.beta = kv.get_double("distill.beta", base.beta);
    base.detach_tsd_teacher = kv.get_bool("distill.detach_tsd_teacher", base.detach_tsd_teacher);
    base.detach_ssd_teacher = kv.get_bool("distill.detach_ssd_teacher", base.detach_ssd_teacher);
    base.shared_run = kv.get_bool("distill.shared_run", base.shared_run);
    base.weak_task_loss = kv.get_bool("distill.weak_task_loss", base.weak_task_loss);
    return base;
  }
};

/// Scalar values of the three loss terms and their weighted total.
struct LossBreakdown {
  double task = 0.0;
  double tsd = 0.0;
  double ssd = 0.0;
  double total = 0.0;
};

/// total = task + alpha*tsd + beta*ssd.
inline LossBreakdown total_loss(double task, double tsd, double ssd, const DistillConfig& cfg) {
  return {task, tsd, ssd, task + cfg.alpha * tsd + cfg.beta * ssd};
}

/// Mean of the first `over` timestep slices of [T,B,K] logits -> [B,K].
template <class Real>
Var<Real> average_logits(const Var<Real>& per_timestep, std::size_t over) {
  if (per_timestep.shape().size() != 3) {
    detail::shape_fail("average_logits", per_timestep.shape(), "[T,B,K]");
  }
  return time_mean(per_timestep, over);
}

namespace detail {

template <class Real>
Var<Real> timestep(const Var<Real>& per_timestep, std::size_t t) {
  const Shape& s = per_timestep.shape();
  return reshape(slice_leading(per_timestep, t, 1), Shape{s[1], s[2]});
}

// sum over classes of squared differences, mean over the batch
template <class Real>
Var<Real> batch_sq_l2(const Var<Real>& a, const Var<Real>& b, const char* op) {
  if (a.shape() != b.shape() || a.shape().size() != 2) shape_fail(op, a.shape(), b.shape());
  return scale(sum(square(sub(a, b))), Real(1) / static_cast<Real>(a.shape()[0]));
}

}  // namespace detail

/// Sum over the first `steps` timesteps of batch-mean cross entropy.
template <class Real>
Var<Real> task_loss(const Var<Real>& per_timestep, std::span<const int> labels, std::size_t steps) {
  const Shape& s = per_timestep.shape();
  if (s.size() != 3) detail::shape_fail("task_loss", s, "[T,B,K]");
  if (steps < 1 || steps > s[0]) {
    throw ShapeError("task_loss: steps=" + std::to_string(steps) + " outside [1, " +
                     std::to_string(s[0]) + "]");
  }
  Var<Real> total = softmax_cross_entropy(detail::timestep(per_timestep, 0), labels);
  for (std::size_t t = 1; t < steps; ++t) {
    total = add(total, softmax_cross_entropy(detail::timestep(per_timestep, t), labels));
  }
  return total;
}

/// Temporal self-distillation: squared L2 between the student's and the
/// teacher's averaged logits, summed over classes and averaged over the batch.
template <class Real>
Var<Real> tsd_loss(const Var<Real>& student_avg, const Var<Real>& teacher_avg,
                   bool detach_teacher = false) {
  return detail::batch_sq_l2(student_avg, detach_teacher ? detach(teacher_avg) : teacher_avg,
                             "tsd_loss");
}

/// Spatial self-distillation: for each of the first `steps` timesteps, squared
/// L2 between the weak logits and the averaged final logits; summed over time.
template <class Real>
Var<Real> ssd_loss(const Var<Real>& weak_per_timestep, const Var<Real>& final_avg,
                   std::size_t steps, bool detach_teacher = true) {
  const Shape& s = weak_per_timestep.shape();
  if (s.size() != 3) detail::shape_fail("ssd_loss", s, "[T,B,K]");
  if (steps < 1 || steps > s[0]) {
    throw ShapeError("ssd_loss: steps=" + std::to_string(steps) + " outside [1, " +
                     std::to_string(s[0]) + "]");
  }
  const Var<Real> target = detach_teacher ? detach(final_avg) : final_avg;
  Var<Real> total = detail::batch_sq_l2(detail::timestep(weak_per_timestep, 0), target, "ssd_loss");
  for (std::size_t t = 1; t < steps; ++t) {
    total = add(total, detail::batch_sq_l2(detail::timestep(weak_per_timestep, t), target, "ssd_loss"));
  }
  return total;
}

/// Loss terms kept on the tape, plus their scalar values.
template <class Real>
struct LossTerms {
  Var<Real> task;
  std::optional<Var<Real>> tsd;
  std::optional<Var<Real>> ssd;
  Var<Real> total;
  LossBreakdown values;
};

/// Builds task + alpha*tsd + beta*ssd from one forward run.
///
/// `final_logits` covers T_t steps (or T_s when no teacher steps exist);
/// `student_logits` is the [T_s,B,K] student run when it is not the prefix of
/// the teacher run. Terms with zero weight are still reported in `values` but
/// are computed from detached copies, so they contribute no gradient.
template <class Real>
LossTerms<Real> compose_losses(const Var<Real>& final_logits,
                               const std::optional<Var<Real>>& weak_logits,
                               std::span<const int> labels, const DistillConfig& cfg,
                               const std::optional<Var<Real>>& student_logits = std::nullopt) {
  cfg.validate();
  const Var<Real>& student = student_logits ? *student_logits : final_logits;
  const std::size_t ts = cfg.student_steps;
  LossTerms<Real> out;
  out.task = task_loss(student, labels, ts);
  if (cfg.weak_task_loss && weak_logits) {
    out.task = add(out.task, task_loss(*weak_logits, labels, ts));
  }
  out.total = out.task;
  out.values.task = out.task.value()[0];
  const Var<Real> student_avg = average_logits(student, ts);
  if (cfg.alpha > 0.0) {
    const Var<Real> teacher_avg = average_logits(final_logits, cfg.teacher_steps);
    out.tsd = tsd_loss(student_avg, teacher_avg, cfg.detach_tsd_teacher);
    out.values.tsd = out.tsd->value()[0];
    out.total = add(out.total, scale(*out.tsd, static_cast<Real>(cfg.alpha)));
  } else if (cfg.teacher_steps <= final_logits.shape()[0]) {
    out.values.tsd = tsd_loss(detach(student_avg),
                              detach(average_logits(final_logits, cfg.teacher_steps)))
                         .value()[0];
  }
  if (cfg.beta > 0.0) {
    if (!weak_logits) throw ConfigError("compose_losses: beta > 0 needs the weak classifier");
    out.ssd = ssd_loss(*weak_logits, student_avg, ts, cfg.detach_ssd_teacher);
    out.values.ssd = out.ssd->value()[0];
    out.total = add(out.total, scale(*out.ssd, static_cast<Real>(cfg.beta)));
  } else if (weak_logits) {
    out.values.ssd = ssd_loss(detach(*weak_logits), detach(student_avg), ts).value()[0];
  }
  out.values.total = out.total.value()[0];
  return out;
}

}  // namespace tssd
