#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tssd/data.hpp"
#include "tssd/distill.hpp"
#include "tssd/error.hpp"
#include "tssd/kv.hpp"
#include "tssd/model.hpp"
#include "tssd/spiking.hpp"
#include "tssd/train.hpp"

namespace tssd {

/// Where training data comes from.
///
/// kind = bars | moving_bars (generated in memory), idx (image archives) or
/// evst (event recordings integrated into frames). Without a test file the
/// training set is split 9:1. `noise` is the pixel noise std for bars and the
/// per-event polarity flip probability for moving bars.
struct DataConfig {
  std::string kind = "moving_bars";
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  std::string train_events;
  std::string test_events;
  double window_ms = 10.0;
  std::size_t size = 16;  // frame / image side after binning
  std::size_t frames = 0;  // 0: as many as the teacher needs
  std::size_t n_train = 2000;
  std::size_t n_test = 400;
  std::size_t classes = 4;
  double noise = 0.0;
  double background = 0.0;  // moving bars: noise events per pixel per millisecond
  double jitter = 0.1;      // moving bars: start-position jitter, fraction of the sensor side
  std::uint64_t seed = 1;

  void validate() const {
    if (kind != "bars" && kind != "moving_bars" && kind != "idx" && kind != "evst") {
      throw ConfigError("data: unknown kind '" + kind + "' (bars, moving_bars, idx, evst)");
    }
    if (kind == "idx" && (train_images.empty() || train_labels.empty())) {
      throw ConfigError("data: idx needs data.train_images and data.train_labels");
    }
    if (kind == "evst" && train_events.empty()) throw ConfigError("data: evst needs data.train_events");
    if (!(window_ms > 0.0)) throw ConfigError("data: window_ms must be > 0");
    if (size < 4) throw ConfigError("data: size must be >= 4");
    if (!(noise >= 0.0) || !(background >= 0.0) || !(jitter >= 0.0)) {
      throw ConfigError("data: noise, background and jitter must be >= 0");
    }
  }

  void to_kv(KeyValues& kv) const {
    kv.set("data.kind", kind);
    kv.set("data.train_images", train_images);
    kv.set("data.train_labels", train_labels);
    kv.set("data.test_images", test_images);
    kv.set("data.test_labels", test_labels);
    kv.set("data.train_events", train_events);
    kv.set("data.test_events", test_events);
    kv.set("data.window_ms", window_ms);
    kv.set("data.size", size);
    kv.set("data.frames", frames);
    kv.set("data.n_train", n_train);
    kv.set("data.n_test", n_test);
    kv.set("data.classes", classes);
    kv.set("data.noise", noise);
    kv.set("data.background", background);
    kv.set("data.jitter", jitter);
    kv.set("data.seed", seed);
  }

  static DataConfig from_kv(const KeyValues& kv) { return from_kv(kv, DataConfig{}); }
  static DataConfig from_kv(const KeyValues& kv, DataConfig b) {
    b.kind = kv.get_string("data.kind", b.kind);
    b.train_images = kv.get_string("data.train_images", b.train_images);
    b.train_labels = kv.get_string("data.train_labels", b.train_labels);
    b.test_images = kv.get_string("data.test_images", b.test_images);
    b.test_labels = kv.get_string("data.test_labels", b.test_labels);
    b.train_events = kv.get_string("data.train_events", b.train_events);
    b.test_events = kv.get_string("data.test_events", b.test_events);
    b.window_ms = kv.get_double("data.window_ms", b.window_ms);
    b.size = kv.get_uint("data.size", b.size);
    b.frames = kv.get_uint("data.frames", b.frames);
    b.n_train = kv.get_uint("data.n_train", b.n_train);
    b.n_test = kv.get_uint("data.n_test", b.n_test);
    b.classes = kv.get_uint("data.classes", b.classes);
    b.noise = kv.get_double("data.noise", b.noise);
    b.background = kv.get_double("data.background", b.background);
    b.jitter = kv.get_double("data.jitter", b.jitter);
    b.seed = kv.get_uint("data.seed", b.seed);
    return b;
  }
};

template <class Real>
struct DataSplit {
  Dataset<Real> train;
  Dataset<Real> test;
};

namespace detail {

template <class Real>
DataSplit<Real> split_train(const Dataset<Real>& all, std::uint64_t seed) {
  auto [tr, te] = split_indices(all.size(), 0.1, seed);
  return {all.subset(tr), all.subset(te)};
}

}  // namespace detail

/// Moving-bar generator settings used for data.kind = moving_bars: the sensor
/// is twice the frame side and the recording lasts `frames` windows.
inline MovingBarOptions moving_bar_options(const DataConfig& d, std::size_t frames) {
  MovingBarOptions o;
  o.classes = d.classes;
  o.sensor = static_cast<std::uint16_t>(2 * d.size);
  o.duration_ms = d.window_ms * static_cast<double>(frames);
  o.speed_px_per_ms = 0.4 * static_cast<double>(o.sensor) / 32.0 * 40.0 / o.duration_ms;
  o.polarity_flip = d.noise;
  o.noise_rate = d.background;
  o.start_jitter = d.jitter;
  return o;
}

/// Materializes the train and test sets. Event data is cut to `frames`
/// windows (data.frames when set, otherwise `min_frames`).
template <class Real>
DataSplit<Real> load_datasets(const DataConfig& d, std::size_t min_frames) {
  d.validate();
  const std::size_t frames = d.frames ? d.frames : min_frames;
  if (frames < min_frames) {
    throw ConfigError("data: frames=" + std::to_string(frames) + " but the run needs " +
                      std::to_string(min_frames) + " timesteps");
  }
  if (d.kind == "bars") {
    auto all = synth_bars<Real>(d.n_train + d.n_test, d.classes, d.size, d.noise, d.seed);
    std::vector<std::size_t> tr(d.n_train), te(d.n_test);
    for (std::size_t i = 0; i < d.n_train; ++i) tr[i] = i;
    for (std::size_t i = 0; i < d.n_test; ++i) te[i] = d.n_train + i;
    return {all.subset(tr), all.subset(te)};
  }
  if (d.kind == "moving_bars") {
    const auto opt = moving_bar_options(d, frames);
    auto tr = synth_moving_bars(d.n_train, opt, d.seed);
    auto te = synth_moving_bars(d.n_test, opt, derive_seed(d.seed, 1));
    return {frames_dataset<Real>(tr, d.window_ms, d.size, d.size, frames, d.classes),
            frames_dataset<Real>(te, d.window_ms, d.size, d.size, frames, d.classes)};
  }
  if (d.kind == "idx") {
    auto train = load_idx<Real>(d.train_images, d.train_labels);
    if (d.test_images.empty()) return detail::split_train(train, d.seed);
    auto test = load_idx<Real>(d.test_images, d.test_labels);
    test.num_classes = train.num_classes = std::max(train.num_classes, test.num_classes);
    return {std::move(train), std::move(test)};
  }
  auto events = read_evst(d.train_events);
  auto train = frames_dataset<Real>(events, d.window_ms, d.size, d.size, frames);
  if (d.test_events.empty()) return detail::split_train(train, d.seed);
  auto test_events = read_evst(d.test_events);
  auto test = frames_dataset<Real>(test_events, d.window_ms, d.size, d.size, frames);
  test.num_classes = train.num_classes = std::max(train.num_classes, test.num_classes);
  return {std::move(train), std::move(test)};
}

/// Everything one training run needs. Model input geometry is derived from
/// the data section when the run is set up.
struct RunConfig {
  NetworkSpec model = NetworkSpec::vgg_mini().narrowed(4);
  LIFConfig lif;
  DistillConfig distill;
  TrainConfig train;
  DataConfig data;
  std::string output_dir = "run";
  std::string precision = "float";

  void validate() const {
    lif.validate();
    distill.validate();
    train.validate();
    data.validate();
    if (precision != "float" && precision != "double") {
      throw ConfigError("run: precision must be float or double, got '" + precision + "'");
    }
  }

  KeyValues to_kv() const {
    KeyValues kv;
    model.to_kv(kv);
    lif_to_kv(lif, kv);
    distill.to_kv(kv);
    train.to_kv(kv);
    data.to_kv(kv);
    kv.set("run.output_dir", output_dir);
    kv.set("run.precision", precision);
    return kv;
  }

  /// Overlays `kv` on `base`. Keys this configuration does not know are an
  /// error, so a typo never silently falls back to a default.
  static RunConfig from_kv(const KeyValues& kv) { return from_kv(kv, RunConfig{}); }
  static RunConfig from_kv(const KeyValues& kv, RunConfig base) {
    const KeyValues known = base.to_kv();
    for (const auto& [key, value] : kv.values()) {
      if (!known.contains(key)) throw ConfigError("config: unknown key '" + key + "'");
    }
    base.model = NetworkSpec::from_kv(kv, base.model);
    base.lif = lif_from_kv(kv, base.lif);
    base.distill = DistillConfig::from_kv(kv, base.distill);
    base.train = TrainConfig::from_kv(kv, base.train);
    base.data = DataConfig::from_kv(kv, base.data);
    base.output_dir = kv.get_string("run.output_dir", base.output_dir);
    base.precision = kv.get_string("run.precision", base.precision);
    return base;
  }
};

}  // namespace tssd
