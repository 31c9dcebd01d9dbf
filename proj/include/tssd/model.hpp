#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tssd/error.hpp"
#include "tssd/kv.hpp"
#include "tssd/ops.hpp"
#include "tssd/params.hpp"
#include "tssd/rng.hpp"
#include "tssd/spiking.hpp"
#include "tssd/tape.hpp"
#include "tssd/tensor.hpp"

namespace tssd {

/// Conv blocks of one stage. A pooled stage halves the spatial size; the pool
/// sits between the last block's batch norm and its LIF neurons, so every
/// stage still hands binary spikes to the next one.
struct StageSpec {
  std::vector<std::size_t> channels;
  bool pool = false;

  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

/// Architecture of a staged spiking VGG-style network with a weak classifier
/// tapping the output of `attach_stage` (0-based).
struct NetworkSpec {
  std::vector<StageSpec> stages;
  std::size_t attach_stage = 2;
  std::size_t input_channels = 2;
  std::size_t input_height = 34;
  std::size_t input_width = 34;
  std::size_t num_classes = 10;
  /// Conv width of the weak head; 0 means "same as the tapped stage".
  std::size_t weak_channels = 0;

  /// Four stages [64], [128], [128,pool], [256,pool], weak head after the third.
  static NetworkSpec vgg_mini(std::size_t in_channels = 2, std::size_t size = 34,
                              std::size_t classes = 10) {
    NetworkSpec s;
    s.stages = {{{64}, false}, {{128}, false}, {{128}, true}, {{256}, true}};
    s.attach_stage = 2;
    s.input_channels = in_channels;
    s.input_height = size;
    s.input_width = size;
    s.num_classes = classes;
    return s;
  }

  /// Same topology with every channel count divided by `divisor` (min 1).
  NetworkSpec narrowed(std::size_t divisor) const {
    NetworkSpec s = *this;
    for (auto& st : s.stages) {
      for (auto& c : st.channels) c = std::max<std::size_t>(1, c / divisor);
    }
    if (s.weak_channels) s.weak_channels = std::max<std::size_t>(1, s.weak_channels / divisor);
    return s;
  }

  std::size_t stage_channels(std::size_t stage) const { return stages.at(stage).channels.back(); }

  std::size_t weak_width() const {
    return weak_channels ? weak_channels : stage_channels(attach_stage);
  }

  /// Spatial size after `stage` (inclusive).
  std::pair<std::size_t, std::size_t> stage_hw(std::size_t stage) const {
    std::size_t h = input_height, w = input_width;
    for (std::size_t i = 0; i <= stage; ++i) {
      if (stages[i].pool) {
        h /= 2;
        w /= 2;
      }
    }
    return {h, w};
  }

  void validate() const {
    if (stages.empty()) throw ConfigError("network spec: stage list is empty");
    if (stages.size() < 3) {
      throw ConfigError("network spec: need at least 3 stages for an interior weak classifier");
    }
    if (attach_stage == 0 || attach_stage >= stages.size() - 1) {
      throw ConfigError("network spec: attach_stage " + std::to_string(attach_stage) +
                        " must be interior, in [1, " + std::to_string(stages.size() - 2) + "]");
    }
    if (input_channels == 0 || input_height == 0 || input_width == 0) {
      throw ConfigError("network spec: input dimensions must be positive");
    }
    if (num_classes < 2) throw ConfigError("network spec: num_classes must be >= 2");
    std::size_t h = input_height, w = input_width;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (stages[i].channels.empty()) {
        throw ConfigError("network spec: stage " + std::to_string(i) + " has no conv blocks");
      }
      for (std::size_t c : stages[i].channels) {
        if (c == 0) throw ConfigError("network spec: channel counts must be positive");
      }
      if (stages[i].pool) {
        if (h < 2 || w < 2) {
          throw ConfigError("network spec: stage " + std::to_string(i) + " pools a " +
                            std::to_string(h) + "x" + std::to_string(w) + " map");
        }
        h /= 2;
        w /= 2;
      }
    }
  }

  /// "[64] [128] [128,pool] [256,pool]"
  std::string stages_str() const {
    std::string s;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (i) s += ' ';
      s += '[';
      for (std::size_t j = 0; j < stages[i].channels.size(); ++j) {
        if (j) s += ',';
        s += std::to_string(stages[i].channels[j]);
      }
      if (stages[i].pool) s += ",pool";
      s += ']';
    }
    return s;
  }

  static std::vector<StageSpec> parse_stages(const std::string& text) {
    std::vector<StageSpec> out;
    std::size_t pos = 0;
    while (true) {
      const auto open = text.find('[', pos);
      if (open == std::string::npos) break;
      const auto close = text.find(']', open);
      if (close == std::string::npos) throw ConfigError("network spec: unbalanced '[' in stages");
      StageSpec st;
      std::stringstream ss(text.substr(open + 1, close - open - 1));
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        tok.erase(0, tok.find_first_not_of(' '));
        tok.erase(tok.find_last_not_of(' ') + 1);
        if (tok == "pool") {
          st.pool = true;
        } else {
          try {
            st.channels.push_back(std::stoul(tok));
          } catch (const std::exception&) {
            throw ConfigError("network spec: bad stage entry '" + tok + "'");
          }
        }
      }
      out.push_back(std::move(st));
      pos = close + 1;
    }
    if (text.find_first_not_of(" []0123456789,pol", 0) != std::string::npos) {
      throw ConfigError("network spec: unexpected characters in stages '" + text + "'");
    }
    return out;
  }

  void to_kv(KeyValues& kv) const {
    kv.set("model.stages", stages_str());
    kv.set("model.attach_stage", attach_stage);
    kv.set("model.input_channels", input_channels);
    kv.set("model.input_height", input_height);
    kv.set("model.input_width", input_width);
    kv.set("model.num_classes", num_classes);
    kv.set("model.weak_channels", weak_channels);
  }

  static NetworkSpec from_kv(const KeyValues& kv, NetworkSpec base = vgg_mini()) {
    if (kv.contains("model.stages")) base.stages = parse_stages(kv.get_string("model.stages", ""));
    base.attach_stage = kv.get_uint("model.attach_stage", base.attach_stage);
    base.input_channels = kv.get_uint("model.input_channels", base.input_channels);
    base.input_height = kv.get_uint("model.input_height", base.input_height);
    base.input_width = kv.get_uint("model.input_width", base.input_width);
    base.num_classes = kv.get_uint("model.num_classes", base.num_classes);
    base.weak_channels = kv.get_uint("model.weak_channels", base.weak_channels);
    return base;
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

inline void lif_to_kv(const LIFConfig& cfg, KeyValues& kv) {
  kv.set("lif.tau", cfg.tau);
  kv.set("lif.threshold", cfg.threshold);
  kv.set("lif.surrogate_width", cfg.surrogate_width);
}

inline LIFConfig lif_from_kv(const KeyValues& kv, LIFConfig base = {}) {
  base.tau = kv.get_double("lif.tau", base.tau);
  base.threshold = kv.get_double("lif.threshold", base.threshold);
  base.surrogate_width = kv.get_double("lif.surrogate_width", base.surrogate_width);
  return base;
}

/// A batch as presented to the network: static images [B,C,H,W] (direct
/// encoding, repeated every timestep) or frame sequences [B,F,C,H,W].
template <class Real>
struct Batch {
  Tensor<Real> inputs;
  std::vector<int> labels;
  bool temporal = false;

  std::size_t size() const { return inputs.dim(0); }
};

/// Per-timestep outputs of one forward run.
template <class Real>
struct ForwardRecord {
  Var<Real> final_logits;                // [T, B, K]
  std::optional<Var<Real>> weak_logits;  // [T, B, K] when the weak head is attached
  std::vector<Tensor<Real>> stage_spikes;  // per stage [T, B, C, H, W], on request
  std::size_t timesteps = 0;
  std::size_t batch = 0;
};

/// Staged spiking network sharing one parameter set across all timesteps.
///
/// The time dimension is folded into the batch (time-major, T*B rows) for the
/// stateless layers; LIF layers unroll over it. Batch norm therefore sees the
/// activations of every timestep of the batch at once.
template <class Real>
class Network {
 public:
  static Network build(const NetworkSpec& spec, const LIFConfig& lif, std::uint64_t seed) {
    spec.validate();
    lif.validate();
    Network net;
    net.spec_ = spec;
    net.lif_ = lif;
    net.has_weak_ = true;
    Rng rng(seed);
    std::size_t in = spec.input_channels;
    for (std::size_t s = 0; s < spec.stages.size(); ++s) {
      for (std::size_t b = 0; b < spec.stages[s].channels.size(); ++b) {
        const std::size_t out = spec.stages[s].channels[b];
        net.add_conv_bn(block_name(s, b), in, out, rng, false);
        in = out;
      }
    }
    net.add_fc("head.fc", in, spec.num_classes, rng, false);
    const std::size_t tap = spec.stage_channels(spec.attach_stage);
    net.add_conv_bn("weak", tap, spec.weak_width(), rng, true);
    net.add_fc("weak.fc", spec.weak_width(), spec.num_classes, rng, true);
    return net;
  }

  /// Same network without the weak classifier parameters.
  Network strip_weak_classifier() const {
    Network out;
    out.spec_ = spec_;
    out.lif_ = lif_;
    out.has_weak_ = false;
    out.params_ = params_.without([](const auto& e) { return e.weak_head; });
    return out;
  }

  /// Runs `timesteps` steps. Static inputs are repeated each step; frame
  /// inputs must supply at least `timesteps` frames and the first ones are used.
  ForwardRecord<Real> forward(Tape<Real>& tape, const Batch<Real>& batch, std::size_t timesteps,
                              BatchNormMode mode, bool keep_stage_spikes = false) {
    if (timesteps == 0) throw ConfigError("forward: timesteps must be >= 1");
    const std::size_t b = batch.size();
    Var<Real> x = tape.constant(encode(batch, timesteps));
    ForwardRecord<Real> rec;
    rec.timesteps = timesteps;
    rec.batch = b;
    for (std::size_t s = 0; s < spec_.stages.size(); ++s) {
      const StageSpec& st = spec_.stages[s];
      for (std::size_t blk = 0; blk < st.channels.size(); ++blk) {
        const bool pool_here = st.pool && blk + 1 == st.channels.size();
        x = conv_bn_lif(tape, block_name(s, blk), x, timesteps, mode, pool_here);
      }
      if (keep_stage_spikes) rec.stage_spikes.push_back(time_split(x.value(), timesteps));
      if (has_weak_ && s == spec_.attach_stage) {
        Var<Real> w = conv_bn_lif(tape, "weak", x, timesteps, mode, false);
        rec.weak_logits = head(tape, "weak.fc", w, timesteps, b);
      }
    }
    rec.final_logits = head(tape, "head.fc", x, timesteps, b);
    timesteps_run_ += timesteps;
    return rec;
  }

  const NetworkSpec& spec() const { return spec_; }
  const LIFConfig& lif_config() const { return lif_; }
  LIFConfig& lif_config() { return lif_; }
  ParamSet<Real>& params() { return params_; }
  const ParamSet<Real>& params() const { return params_; }
  bool has_weak_head() const { return has_weak_; }

  /// Total timesteps executed by forward() since construction/reset.
  std::size_t timesteps_run() const { return timesteps_run_; }
  void reset_timestep_counter() { timesteps_run_ = 0; }

  static std::string block_name(std::size_t stage, std::size_t block) {
    return "stage" + std::to_string(stage) + ".block" + std::to_string(block);
  }

 private:
  void add_conv_bn(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool weak) {
    const std::size_t fan_in = in * 9;
    params_.add(name + ".conv.weight", kaiming_uniform(Shape{out, in, 3, 3}, fan_in, rng),
                ParamKind::kTrainable, true, weak);
    params_.add(name + ".bn.gamma", Tensor<Real>(Shape{out}, Real(1)), ParamKind::kTrainable,
                true, weak);
    params_.add(name + ".bn.beta", Tensor<Real>(Shape{out}, Real(0)), ParamKind::kTrainable,
                false, weak);
    params_.add(name + ".bn.running_mean", Tensor<Real>(Shape{out}, Real(0)), ParamKind::kBuffer,
                false, weak);
    params_.add(name + ".bn.running_var", Tensor<Real>(Shape{out}, Real(1)), ParamKind::kBuffer,
                false, weak);
  }

  void add_fc(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool weak) {
    params_.add(name + ".weight", kaiming_uniform(Shape{out, in}, in, rng), ParamKind::kTrainable,
                true, weak);
    params_.add(name + ".bias", Tensor<Real>(Shape{out}, Real(0)), ParamKind::kTrainable, true,
                weak);
  }

  static Tensor<Real> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor<Real> t(std::move(shape));
    for (Real& v : t.storage()) v = static_cast<Real>(rng.uniform(-bound, bound));
    return t;
  }

  Tensor<Real> encode(const Batch<Real>& batch, std::size_t timesteps) const {
    const Shape& s = batch.inputs.shape();
    const std::size_t c = spec_.input_channels, h = spec_.input_height, w = spec_.input_width;
    const std::size_t plane = c * h * w;
    const std::size_t b = s.empty() ? 0 : s[0];
    if (batch.labels.size() != b && !batch.labels.empty()) {
      throw ShapeError("forward: " + std::to_string(batch.labels.size()) + " labels for batch of " +
                       std::to_string(b));
    }
    Tensor<Real> out(Shape{timesteps * b, c, h, w});
    Real* dst = out.data().data();
    const Real* src = batch.inputs.data().data();
    if (!batch.temporal) {
      if (s != Shape{b, c, h, w}) detail::shape_fail("forward(static input)", s, shape_str({b, c, h, w}));
      for (std::size_t t = 0; t < timesteps; ++t) {
        std::copy(src, src + b * plane, dst + t * b * plane);
      }
    } else {
      if (s.size() != 5 || s[2] != c || s[3] != h || s[4] != w) {
        detail::shape_fail("forward(frame input)", s, "[B,F," + std::to_string(c) + "," +
                                                          std::to_string(h) + "," +
                                                          std::to_string(w) + "]");
      }
      const std::size_t frames = s[1];
      if (frames < timesteps) {
        throw DataError("forward: input supplies " + std::to_string(frames) +
                        " frames but " + std::to_string(timesteps) + " timesteps are required");
      }
      for (std::size_t t = 0; t < timesteps; ++t) {
        for (std::size_t i = 0; i < b; ++i) {
          const Real* f = src + (i * frames + t) * plane;
          std::copy(f, f + plane, dst + (t * b + i) * plane);
        }
      }
    }
    return out;
  }

  Var<Real> conv_bn_lif(Tape<Real>& tape, const std::string& name, const Var<Real>& x,
                        std::size_t timesteps, BatchNormMode mode, bool pool) {
    Var<Real> w = tape.param(params_[name + ".conv.weight"]);
    Var<Real> gamma = tape.param(params_[name + ".bn.gamma"]);
    Var<Real> beta = tape.param(params_[name + ".bn.beta"]);
    BatchNormState<Real> st{&params_[name + ".bn.running_mean"],
                            &params_[name + ".bn.running_var"]};
    Var<Real> y = batchnorm(conv2d(x, w), gamma, beta, st, mode);
    if (pool) y = avgpool2d(y);
    return lif(y, timesteps, lif_);
  }

  Var<Real> head(Tape<Real>& tape, const std::string& name, const Var<Real>& spikes,
                 std::size_t timesteps, std::size_t b) {
    Var<Real> pooled = global_avgpool(spikes);
    Var<Real> logits = linear(pooled, tape.param(params_[name + ".weight"]),
                              tape.param(params_[name + ".bias"]));
    return reshape(logits, Shape{timesteps, b, spec_.num_classes});
  }

  static Tensor<Real> time_split(const Tensor<Real>& x, std::size_t timesteps) {
    Shape s = x.shape();
    Shape out{timesteps, s[0] / timesteps};
    out.insert(out.end(), s.begin() + 1, s.end());
    return x.reshaped(std::move(out));
  }

  NetworkSpec spec_;
  LIFConfig lif_;
  ParamSet<Real> params_;
  bool has_weak_ = false;
  std::size_t timesteps_run_ = 0;
};

/// Free-function form of Network::build.
template <class Real>
Network<Real> build_network(const NetworkSpec& spec, const LIFConfig& lif, std::uint64_t seed) {
  return Network<Real>::build(spec, lif, seed);
}

template <class Real>
Network<Real> strip_weak_classifier(const Network<Real>& net) {
  return net.strip_weak_classifier();
}

}  // namespace tssd
