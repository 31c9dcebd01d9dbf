#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tssd/data.hpp"
#include "tssd/error.hpp"
#include "tssd/model.hpp"
#include "tssd/rng.hpp"
#include "tssd/tape.hpp"
#include "tssd/train.hpp"

namespace tssd {

// ---------------------------------------------------------------------------
// Risk estimators

namespace detail {

inline void check_probability(std::span<const double> p, const std::string& what) {
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(what + ": negative or non-finite entry");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ConfigError(what + ": entries sum to " + std::to_string(total) + ", expected 1");
  }
}

}  // namespace detail

/// Finite set of contexts x with class probabilities p*(x) and sampling weights.
struct ToyDistribution {
  std::vector<std::vector<double>> p_star;  // [contexts][classes]
  std::vector<double> weights;              // [contexts], sums to 1

  std::size_t contexts() const { return p_star.size(); }
  std::size_t classes() const { return p_star.empty() ? 0 : p_star.front().size(); }

  void validate() const {
    if (p_star.empty()) throw ConfigError("toy distribution: no contexts");
    if (weights.size() != p_star.size()) {
      throw ConfigError("toy distribution: " + std::to_string(weights.size()) + " weights for " +
                        std::to_string(p_star.size()) + " contexts");
    }
    detail::check_probability(weights, "toy distribution weights");
    for (std::size_t i = 0; i < p_star.size(); ++i) {
      if (p_star[i].size() != classes() || classes() < 1) {
        throw ConfigError("toy distribution: context " + std::to_string(i) + " has a different class count");
      }
      detail::check_probability(p_star[i], "toy distribution p*(" + std::to_string(i) + ")");
    }
  }

  /// Two equally likely contexts with p* = (0.7, 0.3) and (0.2, 0.8).
  static ToyDistribution toy2() { return {{{0.7, 0.3}, {0.2, 0.8}}, {0.5, 0.5}}; }

  /// 0-1 losses of the predictor that answers class 1 in context 0 and class 0
  /// in context 1; its population risk under toy2() is 0.75.
  static std::vector<std::vector<double>> toy2_losses() { return {{1.0, 0.0}, {0.0, 1.0}}; }

  /// Population risk sum_x w(x) p*(x)^T L(f(x)) of a predictor given by its
  /// per-context loss vectors.
  double population_risk(const std::vector<std::vector<double>>& losses) const {
    validate();
    check_losses(losses);
    double r = 0.0;
    for (std::size_t x = 0; x < contexts(); ++x) {
      r += weights[x] * std::inner_product(p_star[x].begin(), p_star[x].end(), losses[x].begin(), 0.0);
    }
    return r;
  }

  void check_losses(const std::vector<std::vector<double>>& losses) const {
    if (losses.size() != contexts()) {
      throw ConfigError("toy distribution: " + std::to_string(losses.size()) + " loss vectors for " +
                        std::to_string(contexts()) + " contexts");
    }
    for (const auto& l : losses) {
      if (l.size() != classes()) throw ConfigError("toy distribution: loss vector length != class count");
    }
  }
};

/// Mean over the sample of the label-indexed loss entry.
inline double empirical_risk(std::span<const std::vector<double>> losses, std::span<const int> labels) {
  if (losses.size() != labels.size()) {
    throw ConfigError("empirical_risk: " + std::to_string(losses.size()) + " loss vectors for " +
                      std::to_string(labels.size()) + " labels");
  }
  if (losses.empty()) throw ConfigError("empirical_risk: empty sample");
  double total = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= losses[i].size()) {
      throw ConfigError("empirical_risk: label " + std::to_string(labels[i]) + " outside the loss vector");
    }
    total += losses[i][static_cast<std::size_t>(labels[i])];
  }
  return total / static_cast<double>(losses.size());
}

/// Mean over the sample of p*(x_n)^T L(f(x_n)).
inline double bayes_distilled_risk(std::span<const std::vector<double>> losses,
                                   std::span<const std::vector<double>> p_star) {
  if (losses.size() != p_star.size()) {
    throw ConfigError("bayes_distilled_risk: " + std::to_string(losses.size()) + " loss vectors for " +
                      std::to_string(p_star.size()) + " probability vectors");
  }
  if (losses.empty()) throw ConfigError("bayes_distilled_risk: empty sample");
  double total = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    detail::check_probability(p_star[i], "bayes_distilled_risk: p*");
    if (p_star[i].size() != losses[i].size()) {
      throw ConfigError("bayes_distilled_risk: probability and loss vector lengths differ");
    }
    total += std::inner_product(p_star[i].begin(), p_star[i].end(), losses[i].begin(), 0.0);
  }
  return total / static_cast<double>(losses.size());
}

struct RiskReport {
  std::size_t n = 0;
  std::size_t m = 0;
  double population_risk = 0.0;
  double empirical_mean = 0.0;
  double empirical_variance = 0.0;
  double distilled_mean = 0.0;
  double distilled_variance = 0.0;
  /// distilled / empirical variance; 1 when both are zero.
  double variance_ratio = 1.0;

  double empirical_std_error() const { return std::sqrt(empirical_variance / static_cast<double>(m)); }
  double distilled_std_error() const { return std::sqrt(distilled_variance / static_cast<double>(m)); }

  std::string csv() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "n,m,population_risk,empirical_mean,empirical_variance,distilled_mean,"
                  "distilled_variance,variance_ratio\n%zu,%zu,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n",
                  n, m, population_risk, empirical_mean, empirical_variance, distilled_mean,
                  distilled_variance, variance_ratio);
    return buf;
  }
};

/// Draws M samples of N contexts (labels from p*) and records, per sample,
/// the empirical and the Bayes-distilled risk of a fixed predictor given by
/// its per-context loss vectors. Variances are unbiased sample variances over
/// the M estimates.
inline RiskReport variance_experiment(const ToyDistribution& dist,
                                      const std::vector<std::vector<double>>& losses, std::size_t n,
                                      std::size_t m, std::uint64_t seed) {
  dist.validate();
  dist.check_losses(losses);
  if (n < 2 || m < 2) throw ConfigError("variance_experiment: N and M must be >= 2");
  Rng rng(seed);
  auto draw = [&rng](std::span<const double> p) {
    const double u = rng.uniform();
    double c = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      c += p[i];
      if (u < c) return i;
    }
    return p.size() - 1;
  };
  std::vector<double> emp(m), dis(m);
  std::vector<double> distilled_value(dist.contexts());
  for (std::size_t x = 0; x < dist.contexts(); ++x) {
    distilled_value[x] =
        std::inner_product(dist.p_star[x].begin(), dist.p_star[x].end(), losses[x].begin(), 0.0);
  }
  for (std::size_t j = 0; j < m; ++j) {
    double e = 0.0, d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t x = draw(dist.weights);
      const std::size_t y = draw(dist.p_star[x]);
      e += losses[x][y];
      d += distilled_value[x];
    }
    emp[j] = e / static_cast<double>(n);
    dis[j] = d / static_cast<double>(n);
  }
  auto mean_var = [](const std::vector<double>& v) {
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double a : v) ss += (a - mean) * (a - mean);
    return std::pair{mean, ss / static_cast<double>(v.size() - 1)};
  };
  RiskReport r;
  r.n = n;
  r.m = m;
  r.population_risk = dist.population_risk(losses);
  std::tie(r.empirical_mean, r.empirical_variance) = mean_var(emp);
  std::tie(r.distilled_mean, r.distilled_variance) = mean_var(dis);
  if (r.empirical_variance > 0.0) {
    r.variance_ratio = r.distilled_variance / r.empirical_variance;
  } else {
    r.variance_ratio = r.distilled_variance > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Spike firing rate maps

template <class Real>
struct SfrMap {
  Tensor<double> map;  // [H, W], values in [0, 1]
  double mean = 0.0;
};

/// Firing rate of a stage's spikes per spatial location, averaged over
/// timesteps, batch and channels (inference-mode BN).
template <class Real>
SfrMap<Real> sfr_map(Network<Real>& net, const Batch<Real>& batch, std::size_t timesteps,
                     std::size_t stage) {
  if (stage >= net.spec().stages.size()) {
    throw ConfigError("sfr_map: stage " + std::to_string(stage) + " outside [0, " +
                      std::to_string(net.spec().stages.size()) + ")");
  }
  Tape<Real> tape;
  tape.set_grad_enabled(false);
  ForwardRecord<Real> rec = net.forward(tape, batch, timesteps, BatchNormMode::kInference, true);
  const Tensor<Real>& s = rec.stage_spikes.at(stage);  // [T,B,C,H,W]
  const std::size_t outer = s.dim(0) * s.dim(1) * s.dim(2);
  const std::size_t h = s.dim(3), w = s.dim(4);
  SfrMap<Real> out;
  out.map = Tensor<double>(Shape{h, w});
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < h * w; ++i) out.map[i] += static_cast<double>(s[o * h * w + i]);
  }
  double total = 0.0;
  for (double& v : out.map.storage()) {
    v /= static_cast<double>(outer);
    total += v;
  }
  out.mean = total / static_cast<double>(h * w);
  return out;
}

/// 8-bit binary PGM, scaled so the largest entry maps to 255 (an all-zero map
/// stays zero).
inline void write_pgm(const std::filesystem::path& path, const Tensor<double>& map) {
  if (map.rank() != 2) throw ShapeError("write_pgm: expected [H,W], got " + shape_str(map.shape()));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("write_pgm: cannot write '" + path.string() + "'");
  const double peak = *std::max_element(map.storage().begin(), map.storage().end());
  out << "P5\n" << map.dim(1) << ' ' << map.dim(0) << "\n255\n";
  for (double v : map.storage()) {
    const double scaled = peak > 0.0 ? std::clamp(v / peak, 0.0, 1.0) * 255.0 : 0.0;
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(scaled))));
  }
}

/// Raw rates as CSV, one image row per line.
inline void write_map_csv(const std::filesystem::path& path, const Tensor<double>& map) {
  std::ofstream out(path);
  if (!out) throw DataError("write_map_csv: cannot write '" + path.string() + "'");
  char buf[32];
  for (std::size_t y = 0; y < map.dim(0); ++y) {
    for (std::size_t x = 0; x < map.dim(1); ++x) {
      std::snprintf(buf, sizeof buf, "%.9g", map[y * map.dim(1) + x]);
      out << (x ? "," : "") << buf;
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Early exit through the weak classifier

struct EarlyExitResult {
  double full_accuracy = 0.0;
  double weak_accuracy = 0.0;
  double blended_accuracy = 0.0;  // equals full_accuracy without a threshold
  double exit_fraction = 0.0;
};

/// Samples whose weak-head softmax maximum (of the T_s-averaged weak logits)
/// reaches `threshold` take the weak prediction; the rest the final one.
template <class Real>
EarlyExitResult early_exit_eval(Network<Real>& net, const Dataset<Real>& ds, std::size_t steps,
                                std::optional<double> threshold = std::nullopt,
                                std::size_t batch_size = 64) {
  if (!net.has_weak_head()) throw ConfigError("early_exit_eval: network has no weak classifier");
  if (ds.size() == 0) throw DataError("early_exit_eval: empty dataset");
  if (steps < 1) throw ConfigError("early_exit_eval: T_s must be >= 1");
  std::size_t full = 0, weak = 0, blended = 0, exits = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t end = std::min(ds.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Batch<Real> batch = make_batch(ds, std::span<const std::size_t>(idx));
    Tape<Real> tape;
    tape.set_grad_enabled(false);
    ForwardRecord<Real> rec = net.forward(tape, batch, steps, BatchNormMode::kInference);
    const auto pf = detail::predict(rec.final_logits.value(), steps);
    const auto pw = detail::predict(rec.weak_logits->value(), steps);
    const Tensor<Real>& wl = rec.weak_logits->value();
    const std::size_t b = batch.size(), k = wl.dim(2);
    for (std::size_t i = 0; i < b; ++i) {
      const int y = batch.labels[i];
      full += pf[i] == y;
      weak += pw[i] == y;
      bool exit_here = false;
      if (threshold) {
        std::vector<double> avg(k, 0.0);
        for (std::size_t t = 0; t < steps; ++t) {
          for (std::size_t c = 0; c < k; ++c) avg[c] += wl[(t * b + i) * k + c];
        }
        for (double& a : avg) a /= static_cast<double>(steps);
        const double mx = *std::max_element(avg.begin(), avg.end());
        double z = 0.0;
        for (double a : avg) z += std::exp(a - mx);
        exit_here = 1.0 / z >= *threshold;  // softmax of the argmax entry
      }
      exits += exit_here;
      blended += (exit_here ? pw[i] : pf[i]) == y;
    }
  }
  const double n = static_cast<double>(ds.size());
  return {full / n, weak / n, blended / n, exits / n};
}

}  // namespace tssd
