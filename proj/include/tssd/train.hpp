#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tssd/checkpoint.hpp"
#include "tssd/data.hpp"
#include "tssd/distill.hpp"
#include "tssd/error.hpp"
#include "tssd/kv.hpp"
#include "tssd/model.hpp"
#include "tssd/params.hpp"
#include "tssd/rng.hpp"
#include "tssd/tape.hpp"

namespace tssd {

struct TrainConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;  // 1e-3 is the usual choice for event data
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  std::size_t lr_step = 30;
  double lr_gamma = 0.1;
  std::uint64_t seed = 0;
  bool augment = false;  // flip + crop on static training images

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train: lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
    if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2 (batch norm)");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (lr_step < 1) throw ConfigError("train: lr_step must be >= 1");
    if (!(lr_gamma > 0.0)) throw ConfigError("train: lr_gamma must be > 0");
  }

  void to_kv(KeyValues& kv) const {
    kv.set("train.lr", lr);
    kv.set("train.momentum", momentum);
    kv.set("train.weight_decay", weight_decay);
    kv.set("train.epochs", epochs);
    kv.set("train.batch_size", batch_size);
    kv.set("train.lr_step", lr_step);
    kv.set("train.lr_gamma", lr_gamma);
    kv.set("train.seed", seed);
    kv.set("train.augment", augment);
  }

  static TrainConfig from_kv(const KeyValues& kv) { return from_kv(kv, TrainConfig{}); }
  static TrainConfig from_kv(const KeyValues& kv, TrainConfig base) {
    base.lr = kv.get_double("train.lr", base.lr);
    base.momentum = kv.get_double("train.momentum", base.momentum);
    base.weight_decay = kv.get_double("train.weight_decay", base.weight_decay);
    base.epochs = kv.get_uint("train.epochs", base.epochs);
    base.batch_size = kv.get_uint("train.batch_size", base.batch_size);
    base.lr_step = kv.get_uint("train.lr_step", base.lr_step);
    base.lr_gamma = kv.get_double("train.lr_gamma", base.lr_gamma);
    base.seed = kv.get_uint("train.seed", base.seed);
    base.augment = kv.get_bool("train.augment", base.augment);
    return base;
  }
};

/// Step schedule: lr * gamma^floor(epoch / lr_step).
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  return cfg.lr * std::pow(cfg.lr_gamma, static_cast<double>(epoch / cfg.lr_step));
}

/// Velocity buffers, one per trainable entry of a ParamSet, in its order.
template <class Real>
struct MomentumState {
  std::vector<std::string> names;
  std::vector<std::vector<Real>> velocity;

  static MomentumState zeros(const ParamSet<Real>& params) {
    MomentumState st;
    for (const auto& e : params) {
      if (!e.trainable()) continue;
      st.names.push_back(e.name);
      st.velocity.emplace_back(e.tensor.size(), Real(0));
    }
    return st;
  }
};

/// v <- momentum*v + grad + wd*param; param <- param - lr*v, for every
/// trainable entry. Entries flagged without weight decay use wd = 0; missing
/// gradients count as zero.
template <class Real>
void sgd_update(ParamSet<Real>& params, MomentumState<Real>& state, double lr, double momentum,
                double weight_decay) {
  std::size_t k = 0;
  for (auto& e : params) {
    if (!e.trainable()) continue;
    if (k >= state.names.size() || state.names[k] != e.name ||
        state.velocity[k].size() != e.tensor.size()) {
      throw ShapeError("sgd_update: momentum state does not mirror parameter '" + e.name + "'");
    }
    const auto g = e.tensor.grad();
    const bool has_grad = g.size() == e.tensor.size();
    if (!has_grad && !g.empty()) {
      throw ShapeError("sgd_update: gradient of '" + e.name + "' has " + std::to_string(g.size()) +
                       " entries, parameter has " + std::to_string(e.tensor.size()));
    }
    const Real mu = static_cast<Real>(momentum);
    const Real wd = e.weight_decay ? static_cast<Real>(weight_decay) : Real(0);
    const Real step = static_cast<Real>(lr);
    auto p = e.tensor.data();
    auto& v = state.velocity[k];
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = mu * v[i] + (has_grad ? g[i] : Real(0)) + wd * p[i];
      p[i] -= step * v[i];
    }
    ++k;
  }
  if (k != state.names.size()) throw ShapeError("sgd_update: momentum state has extra buffers");
}

namespace detail {

// argmax of the mean of the first `steps` slices of [T,B,K] logits
template <class Real>
std::vector<int> predict(const Tensor<Real>& logits, std::size_t steps) {
  const std::size_t b = logits.dim(1), k = logits.dim(2);
  std::vector<int> out(b);
  std::vector<double> acc(k);
  for (std::size_t i = 0; i < b; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t c = 0; c < k; ++c) acc[c] += logits[(t * b + i) * k + c];
    }
    out[i] = static_cast<int>(std::max_element(acc.begin(), acc.end()) - acc.begin());
  }
  return out;
}

inline std::size_t count_correct(const std::vector<int>& pred, std::span<const int> labels) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) n += pred[i] == labels[i];
  return n;
}

}  // namespace detail

struct StepResult {
  LossBreakdown loss;
  std::size_t correct = 0;       // student (T_s-averaged) predictions
  std::size_t weak_correct = 0;  // weak head, T_s-averaged
  std::size_t count = 0;
};

/// One optimisation step: forward over T_t in train mode, compose the losses,
/// backpropagate into every trainable parameter, momentum SGD update at `lr`.
template <class Real>
StepResult train_step(Network<Real>& net, const Batch<Real>& batch, const DistillConfig& dcfg,
                      const TrainConfig& tcfg, MomentumState<Real>& state, double lr) {
  dcfg.validate();
  Tape<Real> tape;
  ForwardRecord<Real> rec = net.forward(tape, batch, dcfg.teacher_steps, BatchNormMode::kTrain);
  std::optional<Var<Real>> student;
  if (!dcfg.shared_run && dcfg.student_steps < dcfg.teacher_steps) {
    student = net.forward(tape, batch, dcfg.student_steps, BatchNormMode::kTrain).final_logits;
  }
  LossTerms<Real> terms = compose_losses(rec.final_logits, rec.weak_logits,
                                         std::span<const int>(batch.labels), dcfg, student);
  const LossBreakdown& v = terms.values;
  if (!std::isfinite(v.total)) {
    throw NumericError("train_step: non-finite loss (task=" + std::to_string(v.task) +
                       ", tsd=" + std::to_string(v.tsd) + ", ssd=" + std::to_string(v.ssd) + ")");
  }
  backward(terms.total, net.params());
  for (const auto& e : net.params()) {
    if (!e.trainable()) continue;
    for (Real g : e.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("train_step: non-finite gradient in '" + e.name + "'");
    }
  }
  sgd_update(net.params(), state, lr, tcfg.momentum, tcfg.weight_decay);

  StepResult out;
  out.loss = v;
  out.count = batch.size();
  const Tensor<Real>& logits = student ? student->value() : rec.final_logits.value();
  out.correct = detail::count_correct(detail::predict(logits, dcfg.student_steps), batch.labels);
  if (rec.weak_logits) {
    out.weak_correct =
        detail::count_correct(detail::predict(rec.weak_logits->value(), dcfg.student_steps), batch.labels);
  }
  return out;
}

struct EvalResult {
  double accuracy = 0.0;
  double weak_accuracy = std::numeric_limits<double>::quiet_NaN();  // NaN without a weak head
  double task_loss = 0.0;  // per-timestep CE summed over T_s, mean over samples
  double ssd_loss = std::numeric_limits<double>::quiet_NaN();
  std::size_t count = 0;
};

/// Inference-mode evaluation running exactly `steps` timesteps per batch.
template <class Real>
EvalResult evaluate(Network<Real>& net, const Dataset<Real>& ds, std::size_t steps,
                    std::size_t batch_size = 64) {
  if (ds.size() == 0) throw DataError("evaluate: empty dataset");
  if (steps < 1) throw ConfigError("evaluate: T_s must be >= 1");
  if (batch_size < 1) throw ConfigError("evaluate: batch_size must be >= 1");
  EvalResult out;
  std::size_t correct = 0, weak_correct = 0;
  double task = 0.0, ssd = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t end = std::min(ds.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Batch<Real> batch = make_batch(ds, std::span<const std::size_t>(idx));
    Tape<Real> tape;
    tape.set_grad_enabled(false);
    ForwardRecord<Real> rec = net.forward(tape, batch, steps, BatchNormMode::kInference);
    const std::span<const int> labels(batch.labels);
    correct += detail::count_correct(detail::predict(rec.final_logits.value(), steps), labels);
    const double n = static_cast<double>(batch.size());
    task += n * task_loss(rec.final_logits, labels, steps).value()[0];
    if (rec.weak_logits) {
      weak_correct += detail::count_correct(detail::predict(rec.weak_logits->value(), steps), labels);
      ssd += n * ssd_loss(*rec.weak_logits, average_logits(rec.final_logits, steps), steps).value()[0];
    }
  }
  const double total = static_cast<double>(ds.size());
  out.count = ds.size();
  out.accuracy = static_cast<double>(correct) / total;
  out.task_loss = task / total;
  if (net.has_weak_head()) {
    out.weak_accuracy = static_cast<double>(weak_correct) / total;
    out.ssd_loss = ssd / total;
  }
  return out;
}

/// One line of metrics.csv. Fields that a split cannot measure are NaN and
/// written empty (the test split never runs the T_t teacher, so it has no tsd).
struct MetricsRow {
  std::size_t epoch = 0;
  std::string split;
  double task_loss = 0.0;
  double tsd_loss = 0.0;
  double ssd_loss = 0.0;
  double total_loss = 0.0;
  double accuracy = 0.0;
  double weak_accuracy = 0.0;
  double wall_seconds = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,split,task_loss,tsd_loss,ssd_loss,total_loss,accuracy,weak_accuracy,wall_seconds";

inline std::string format_metrics_row(const MetricsRow& r) {
  auto num = [](double v) -> std::string {
    if (std::isnan(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
  };
  return std::to_string(r.epoch) + "," + r.split + "," + num(r.task_loss) + "," + num(r.tsd_loss) +
         "," + num(r.ssd_loss) + "," + num(r.total_loss) + "," + num(r.accuracy) + "," +
         num(r.weak_accuracy) + "," + num(r.wall_seconds);
}

struct FitResult {
  std::vector<MetricsRow> rows;
  double best_accuracy = 0.0;
  std::size_t best_epoch = 0;
  double final_accuracy = 0.0;
  double final_weak_accuracy = std::numeric_limits<double>::quiet_NaN();
};

/// Where fit() writes its artifacts; an empty dir writes nothing.
struct FitOutputs {
  std::filesystem::path dir;
  std::function<void(const MetricsRow&)> on_row;
};

/// Full training loop: per epoch a seeded shuffle, minibatch train_step at
/// lr_at(epoch), then evaluation of `test` at T_s. Batches smaller than two
/// samples (the tail of an epoch) are skipped. With an output dir, writes
/// metrics.csv and checkpoints `best` (highest test accuracy, earliest epoch
/// on ties) and `final`.
template <class Real>
FitResult fit(Network<Real>& net, const Dataset<Real>& train, const Dataset<Real>& test,
              const DistillConfig& dcfg, const TrainConfig& tcfg, const FitOutputs& outputs = {}) {
  dcfg.validate();
  tcfg.validate();
  train.validate();
  test.validate();
  if (train.num_classes != net.spec().num_classes) {
    throw ConfigError("fit: dataset has " + std::to_string(train.num_classes) +
                      " classes, network " + std::to_string(net.spec().num_classes));
  }
  std::ofstream csv;
  if (!outputs.dir.empty()) {
    std::filesystem::create_directories(outputs.dir);
    csv.open(outputs.dir / "metrics.csv");
    if (!csv) throw DataError("fit: cannot write " + (outputs.dir / "metrics.csv").string());
    csv << kMetricsHeader << '\n';
  }
  auto emit = [&](const MetricsRow& row, FitResult& res) {
    res.rows.push_back(row);
    if (csv.is_open()) csv << format_metrics_row(row) << '\n' << std::flush;
    if (outputs.on_row) outputs.on_row(row);
  };

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  MomentumState<Real> state = MomentumState<Real>::zeros(net.params());
  FitResult res;
  res.best_accuracy = -1.0;
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(tcfg.seed, 2 * epoch));
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    Rng augment_rng(derive_seed(tcfg.seed, 2 * epoch + 1));
    const double lr = lr_at(epoch, tcfg);

    double task = 0, tsd = 0, ssd = 0, total = 0;
    std::size_t correct = 0, weak_correct = 0, seen = 0;
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + tcfg.batch_size);
      if (end - start < 2) break;
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      Batch<Real> batch = make_batch(train, idx, tcfg.augment ? &augment_rng : nullptr);
      StepResult step = train_step(net, batch, dcfg, tcfg, state, lr);
      const double n = static_cast<double>(step.count);
      task += n * step.loss.task;
      tsd += n * step.loss.tsd;
      ssd += n * step.loss.ssd;
      total += n * step.loss.total;
      correct += step.correct;
      weak_correct += step.weak_correct;
      seen += step.count;
    }
    const double n = static_cast<double>(std::max<std::size_t>(seen, 1));
    MetricsRow tr{epoch, "train", task / n, tsd / n, ssd / n, total / n,
                  static_cast<double>(correct) / n,
                  net.has_weak_head() ? static_cast<double>(weak_correct) / n
                                      : std::numeric_limits<double>::quiet_NaN(),
                  elapsed()};
    emit(tr, res);

    EvalResult ev = evaluate(net, test, dcfg.student_steps, tcfg.batch_size);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    MetricsRow te{epoch, "test", ev.task_loss, nan, ev.ssd_loss, nan, ev.accuracy,
                  ev.weak_accuracy, elapsed()};
    emit(te, res);
    if (ev.accuracy > res.best_accuracy) {
      res.best_accuracy = ev.accuracy;
      res.best_epoch = epoch;
      if (!outputs.dir.empty()) save_checkpoint(net.params(), outputs.dir / "best");
    }
    res.final_accuracy = ev.accuracy;
    res.final_weak_accuracy = ev.weak_accuracy;
  }
  if (!outputs.dir.empty()) save_checkpoint(net.params(), outputs.dir / "final");
  return res;
}

}  // namespace tssd
