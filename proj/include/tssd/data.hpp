#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tssd/error.hpp"
#include "tssd/model.hpp"
#include "tssd/rng.hpp"
#include "tssd/tensor.hpp"

namespace tssd {

// ---------------------------------------------------------------------------
// Datasets

/// Labelled samples held in one tensor: static images [N,C,H,W] or frame
/// sequences [N,F,C,H,W].
template <class Real>
struct Dataset {
  Tensor<Real> inputs;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  bool temporal = false;

  std::size_t size() const { return labels.size(); }

  std::size_t sample_size() const { return inputs.size() / inputs.dim(0); }

  /// Sample shape without the leading N.
  Shape sample_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }

  void validate() const {
    if (labels.empty()) throw DataError("dataset: no samples");
    if (inputs.rank() != (temporal ? 5u : 4u)) {
      throw DataError("dataset: inputs shape " + shape_str(inputs.shape()) +
                      (temporal ? " is not [N,F,C,H,W]" : " is not [N,C,H,W]"));
    }
    if (inputs.dim(0) != labels.size()) {
      throw DataError("dataset: " + std::to_string(inputs.dim(0)) + " samples but " +
                      std::to_string(labels.size()) + " labels");
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
        throw DataError("dataset: label " + std::to_string(y) + " outside [0, " +
                        std::to_string(num_classes) + ")");
      }
    }
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    Shape s = inputs.shape();
    s[0] = idx.size();
    const std::size_t row = sample_size();
    std::vector<Real> data;
    data.reserve(idx.size() * row);
    for (std::size_t i : idx) {
      auto first = inputs.storage().begin() + static_cast<std::ptrdiff_t>(i * row);
      data.insert(data.end(), first, first + static_cast<std::ptrdiff_t>(row));
      out.labels.push_back(labels.at(i));
    }
    out.inputs = Tensor<Real>(std::move(s), std::move(data));
    out.num_classes = num_classes;
    out.temporal = temporal;
    return out;
  }
};

// ---------------------------------------------------------------------------
// Augmentation

/// Horizontal flip then a crop at (dy, dx) of the 4-pixel reflect-padded
/// image; (4, 4) is the centre crop. image is [C,H,W] (H, W > 4).
template <class Real>
Tensor<Real> augment_fixed(const Tensor<Real>& image, bool flip, std::size_t dy, std::size_t dx) {
  constexpr std::ptrdiff_t kPad = 4;
  if (image.rank() != 3) throw ShapeError("augment: expected [C,H,W], got " + shape_str(image.shape()));
  const std::ptrdiff_t c = static_cast<std::ptrdiff_t>(image.dim(0));
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(image.dim(1));
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(image.dim(2));
  if (h <= kPad || w <= kPad) throw ShapeError("augment: image smaller than the crop padding");
  if (dy > 2 * kPad || dx > 2 * kPad) throw ShapeError("augment: crop offset out of range");
  auto reflect = [](std::ptrdiff_t i, std::ptrdiff_t n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * (n - 1) - i;
    return i;
  };
  Tensor<Real> out(image.shape());
  for (std::ptrdiff_t ch = 0; ch < c; ++ch) {
    for (std::ptrdiff_t y = 0; y < h; ++y) {
      const std::ptrdiff_t sy = reflect(y + static_cast<std::ptrdiff_t>(dy) - kPad, h);
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        std::ptrdiff_t sx = reflect(x + static_cast<std::ptrdiff_t>(dx) - kPad, w);
        if (flip) sx = w - 1 - sx;
        out[static_cast<std::size_t>((ch * h + y) * w + x)] =
            image[static_cast<std::size_t>((ch * h + sy) * w + sx)];
      }
    }
  }
  return out;
}

/// Random horizontal flip (p = 0.5) and random 4-pixel reflect-pad crop.
template <class Real>
Tensor<Real> augment(const Tensor<Real>& image, Rng& rng) {
  const bool flip = rng.bernoulli(0.5);
  const std::size_t dy = rng.below(9);
  const std::size_t dx = rng.below(9);
  return augment_fixed(image, flip, dy, dx);
}

/// Gathers samples `idx` into a batch. Static samples are augmented when
/// `augment_rng` is given.
template <class Real>
Batch<Real> make_batch(const Dataset<Real>& ds, std::span<const std::size_t> idx,
                       Rng* augment_rng = nullptr) {
  Batch<Real> b;
  b.temporal = ds.temporal;
  Shape s = ds.inputs.shape();
  s[0] = idx.size();
  const std::size_t row = ds.sample_size();
  std::vector<Real> data(idx.size() * row);
  const Shape sample = ds.sample_shape();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Real* src = ds.inputs.data().data() + idx[k] * row;
    if (augment_rng && !ds.temporal) {
      Tensor<Real> img(sample, std::vector<Real>(src, src + row));
      Tensor<Real> aug = augment(img, *augment_rng);
      std::copy(aug.storage().begin(), aug.storage().end(), data.begin() + static_cast<std::ptrdiff_t>(k * row));
    } else {
      std::copy(src, src + row, data.begin() + static_cast<std::ptrdiff_t>(k * row));
    }
    b.labels.push_back(ds.labels.at(idx[k]));
  }
  b.inputs = Tensor<Real>(std::move(s), std::move(data));
  return b;
}

/// Seeded shuffle of [0, n) cut into (train, test) with `test_fraction` of
/// the samples (rounded) in the test part.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) {
    throw ConfigError("split: test fraction must be in [0, 1]");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(idx));
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  std::vector<std::size_t> test(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// IDX archives

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline void put_be32(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

/// Loads an IDX image archive (magic 0x00000803 [N,H,W] or 0x00000804
/// [N,C,H,W], unsigned bytes) and its label file (0x00000801). Pixels are
/// scaled to [0, 1]. num_classes is max(label) + 1.
template <class Real>
Dataset<Real> load_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (img.size() < 4) throw DataError("idx: '" + images_path.string() + "' is truncated (no header)");
  if (lab.size() < 8) throw DataError("idx: '" + labels_path.string() + "' is truncated (no header)");
  const std::uint32_t magic = detail::be32(img, 0);
  if (magic != 0x00000803 && magic != 0x00000804) {
    throw DataError("idx: bad image magic in '" + images_path.string() + "'");
  }
  if (detail::be32(lab, 0) != 0x00000801) {
    throw DataError("idx: bad label magic in '" + labels_path.string() + "'");
  }
  const std::size_t ndims = magic & 0xFF;
  if (img.size() < 4 + 4 * ndims) throw DataError("idx: '" + images_path.string() + "' is truncated (dims)");
  Shape dims;
  for (std::size_t i = 0; i < ndims; ++i) dims.push_back(detail::be32(img, 4 + 4 * i));
  Shape shape = ndims == 3 ? Shape{dims[0], 1, dims[1], dims[2]} : dims;
  const std::size_t n_img = dims[0];
  const std::size_t n_lab = detail::be32(lab, 4);
  if (n_img != n_lab) {
    throw DataError("idx: image count " + std::to_string(n_img) + " does not match label count " +
                    std::to_string(n_lab));
  }
  if (n_img == 0) throw DataError("idx: archive holds no samples");
  const std::size_t header = 4 + 4 * ndims;
  const std::size_t pixels = numel(shape);
  if (img.size() < header + pixels) throw DataError("idx: '" + images_path.string() + "' is truncated (pixels)");
  if (lab.size() < 8 + n_lab) throw DataError("idx: '" + labels_path.string() + "' is truncated (labels)");
  Dataset<Real> ds;
  std::vector<Real> data(pixels);
  for (std::size_t i = 0; i < pixels; ++i) data[i] = static_cast<Real>(img[header + i]) / Real(255);
  ds.inputs = Tensor<Real>(shape, std::move(data));
  int max_label = 0;
  for (std::size_t i = 0; i < n_lab; ++i) {
    ds.labels.push_back(lab[8 + i]);
    max_label = std::max(max_label, ds.labels.back());
  }
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  return ds;
}

/// Writes static images (values clamped to [0,1], quantized to bytes) and
/// labels as an IDX pair. Single-channel data uses the 3-dim image form.
template <class Real>
void save_idx(const Dataset<Real>& ds, const std::filesystem::path& images_path,
              const std::filesystem::path& labels_path) {
  if (ds.temporal) throw DataError("idx: cannot store frame sequences");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw DataError("idx: cannot write '" + images_path.string() + "'");
  const Shape& s = ds.inputs.shape();
  if (s[1] == 1) {
    detail::put_be32(img, 0x00000803);
    for (std::size_t d : {s[0], s[2], s[3]}) detail::put_be32(img, static_cast<std::uint32_t>(d));
  } else {
    detail::put_be32(img, 0x00000804);
    for (std::size_t d : s) detail::put_be32(img, static_cast<std::uint32_t>(d));
  }
  for (Real v : ds.inputs.storage()) {
    const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
    img.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  detail::put_be32(lab, 0x00000801);
  detail::put_be32(lab, static_cast<std::uint32_t>(ds.labels.size()));
  for (int y : ds.labels) lab.put(static_cast<char>(static_cast<unsigned char>(y)));
}

// ---------------------------------------------------------------------------
// Event streams

struct Event {
  std::uint32_t t_us = 0;
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::uint8_t p = 0;

  friend bool operator==(const Event&, const Event&) = default;
};

/// Events of one recording, timestamps non-decreasing.
struct EventStream {
  std::vector<Event> events;
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  int label = -1;

  void validate() const {
    for (std::size_t i = 0; i < events.size(); ++i) {
      const Event& e = events[i];
      if (e.x >= width || e.y >= height) {
        throw DataError("event stream: event " + std::to_string(i) + " at (" + std::to_string(e.x) +
                        "," + std::to_string(e.y) + ") outside " + std::to_string(width) + "x" +
                        std::to_string(height) + " sensor");
      }
      if (e.p > 1) throw DataError("event stream: polarity must be 0 or 1");
      if (i && e.t_us < events[i - 1].t_us) {
        throw DataError("event stream: timestamps decrease at event " + std::to_string(i));
      }
    }
  }

  friend bool operator==(const EventStream&, const EventStream&) = default;
};

// EVST: per stream a 16-byte little-endian header
//   char[4] "EVST" | u16 version (1) | u16 width | u16 height | u16 label
//   (0xFFFF = none) | u32 count
// followed by `count` packed 9-byte records u32 t_us | u16 x | u16 y | u8 p.
// A file holds one or more streams back to back.
inline constexpr std::uint16_t kEvstVersion = 1;
inline constexpr std::size_t kEvstHeaderBytes = 16;
inline constexpr std::size_t kEvstRecordBytes = 9;

namespace detail {

template <class T>
void put_le(std::ofstream& out, T v) {
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get_le(const std::vector<unsigned char>& b, std::size_t off) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(T(b[off + i]) << (8 * i));
  return v;
}

}  // namespace detail

inline void write_evst(const std::filesystem::path& path, std::span<const EventStream> streams) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("evst: cannot write '" + path.string() + "'");
  for (const EventStream& s : streams) {
    out.write("EVST", 4);
    detail::put_le<std::uint16_t>(out, kEvstVersion);
    detail::put_le<std::uint16_t>(out, s.width);
    detail::put_le<std::uint16_t>(out, s.height);
    detail::put_le<std::uint16_t>(out, s.label < 0 ? 0xFFFF : static_cast<std::uint16_t>(s.label));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.events.size()));
    for (const Event& e : s.events) {
      detail::put_le<std::uint32_t>(out, e.t_us);
      detail::put_le<std::uint16_t>(out, e.x);
      detail::put_le<std::uint16_t>(out, e.y);
      detail::put_le<std::uint8_t>(out, e.p);
    }
  }
  if (!out) throw DataError("evst: write failed for '" + path.string() + "'");
}

inline std::vector<EventStream> read_evst(const std::filesystem::path& path) {
  const auto b = detail::read_file(path);
  if (b.empty()) throw DataError("evst: '" + path.string() + "' is empty");
  std::vector<EventStream> out;
  std::size_t off = 0;
  while (off < b.size()) {
    if (b.size() - off < kEvstHeaderBytes) throw DataError("evst: truncated header in '" + path.string() + "'");
    if (std::memcmp(b.data() + off, "EVST", 4) != 0) throw DataError("evst: bad magic in '" + path.string() + "'");
    const auto version = detail::get_le<std::uint16_t>(b, off + 4);
    if (version != kEvstVersion) throw DataError("evst: unsupported version " + std::to_string(version));
    EventStream s;
    s.width = detail::get_le<std::uint16_t>(b, off + 6);
    s.height = detail::get_le<std::uint16_t>(b, off + 8);
    const auto label = detail::get_le<std::uint16_t>(b, off + 10);
    s.label = label == 0xFFFF ? -1 : label;
    const auto count = detail::get_le<std::uint32_t>(b, off + 12);
    off += kEvstHeaderBytes;
    if ((b.size() - off) / kEvstRecordBytes < count) {
      throw DataError("evst: truncated records in '" + path.string() + "'");
    }
    s.events.resize(count);
    for (Event& e : s.events) {
      e.t_us = detail::get_le<std::uint32_t>(b, off);
      e.x = detail::get_le<std::uint16_t>(b, off + 4);
      e.y = detail::get_le<std::uint16_t>(b, off + 6);
      e.p = detail::get_le<std::uint8_t>(b, off + 8);
      off += kEvstRecordBytes;
    }
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

/// Per-window event counts, [T, 2, H, W] with the polarity as channel.
template <class Real>
struct FrameTensor {
  Tensor<Real> frames;
  double window_ms = 0.0;
  std::size_t bin_h = 1;  // sensor rows per output row (nominal)
  std::size_t bin_w = 1;

  std::size_t timesteps() const { return frames.dim(0); }
};

/// Integrates events into frames of `window_ms` each, binning sensor pixels
/// into a target_h x target_w grid by summation. Frame k covers
/// [k*window, (k+1)*window) from t = 0; the frame count is
/// ceil((t_last + 1us) / window), at least 1.
template <class Real>
FrameTensor<Real> integrate_events(const EventStream& stream, double window_ms,
                                   std::size_t target_h, std::size_t target_w) {
  if (!(window_ms > 0.0)) throw ConfigError("integrate: window_ms must be > 0");
  if (target_h == 0 || target_w == 0 || target_h > stream.height || target_w > stream.width) {
    throw ConfigError("integrate: target " + std::to_string(target_h) + "x" + std::to_string(target_w) +
                      " must be within the " + std::to_string(stream.height) + "x" +
                      std::to_string(stream.width) + " sensor");
  }
  stream.validate();
  const double window_us = window_ms * 1000.0;
  std::size_t frames = 1;
  if (!stream.events.empty()) {
    frames = static_cast<std::size_t>(std::floor(stream.events.back().t_us / window_us)) + 1;
  }
  FrameTensor<Real> out;
  out.window_ms = window_ms;
  out.bin_h = stream.height / target_h;
  out.bin_w = stream.width / target_w;
  out.frames = Tensor<Real>(Shape{frames, 2, target_h, target_w});
  for (const Event& e : stream.events) {
    const auto k = static_cast<std::size_t>(std::floor(e.t_us / window_us));
    const std::size_t yy = static_cast<std::size_t>(e.y) * target_h / stream.height;
    const std::size_t xx = static_cast<std::size_t>(e.x) * target_w / stream.width;
    out.frames[((k * 2 + e.p) * target_h + yy) * target_w + xx] += Real(1);
  }
  return out;
}

/// Integrates every stream and keeps its first `frames` frames. Streams
/// shorter than `frames` windows are rejected.
template <class Real>
Dataset<Real> frames_dataset(std::span<const EventStream> streams, double window_ms,
                             std::size_t target_h, std::size_t target_w, std::size_t frames,
                             std::size_t num_classes = 0) {
  if (streams.empty()) throw DataError("frames_dataset: no streams");
  if (frames == 0) throw ConfigError("frames_dataset: frames must be >= 1");
  Dataset<Real> ds;
  ds.temporal = true;
  const std::size_t per = frames * 2 * target_h * target_w;
  std::vector<Real> data;
  data.reserve(streams.size() * per);
  int max_label = 0;
  for (std::size_t i = 0; i < streams.size(); ++i) {
    const EventStream& s = streams[i];
    if (s.label < 0) throw DataError("frames_dataset: stream " + std::to_string(i) + " has no label");
    auto ft = integrate_events<Real>(s, window_ms, target_h, target_w);
    if (ft.timesteps() < frames) {
      throw DataError("frames_dataset: stream " + std::to_string(i) + " yields " +
                      std::to_string(ft.timesteps()) + " frames, " + std::to_string(frames) +
                      " required");
    }
    data.insert(data.end(), ft.frames.storage().begin(),
                ft.frames.storage().begin() + static_cast<std::ptrdiff_t>(per));
    ds.labels.push_back(s.label);
    max_label = std::max(max_label, s.label);
  }
  ds.inputs = Tensor<Real>(Shape{streams.size(), frames, 2, target_h, target_w}, std::move(data));
  ds.num_classes = num_classes ? num_classes : static_cast<std::size_t>(max_label) + 1;
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Oriented-bar images, [n,1,size,size] in [0,1]. Class k is a bar at angle
/// k*pi/classes through a jittered centre; additive Gaussian noise of std
/// `noise` is clipped back into [0,1]. Labels cycle 0..classes-1.
template <class Real>
Dataset<Real> synth_bars(std::size_t n, std::size_t classes, std::size_t size, double noise,
                         std::uint64_t seed) {
  if (n < 1) throw ConfigError("synth bars: n must be >= 1");
  if (classes < 2 || classes > 16) throw ConfigError("synth bars: classes must be in [2, 16]");
  if (size < 8) throw ConfigError("synth bars: size must be >= 8");
  Rng rng(seed);
  Dataset<Real> ds;
  ds.num_classes = classes;
  std::vector<Real> data(n * size * size);
  const double c0 = (static_cast<double>(size) - 1.0) / 2.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % classes);
    const double angle = std::numbers::pi * label / static_cast<double>(classes);
    const double dx = std::cos(angle), dy = std::sin(angle);
    const double jitter = static_cast<double>(size) / 6.0;
    const double cx = c0 + rng.uniform(-jitter, jitter);
    const double cy = c0 + rng.uniform(-jitter, jitter);
    const double half_thick = rng.uniform(0.7, 1.3);
    const double half_len = static_cast<double>(size) * rng.uniform(0.3, 0.45);
    Real* img = data.data() + i * size * size;
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double px = static_cast<double>(x) - cx, py = static_cast<double>(y) - cy;
        const double along = px * dx + py * dy;
        const double across = -px * dy + py * dx;
        double v = (std::abs(across) <= half_thick && std::abs(along) <= half_len) ? 1.0 : 0.0;
        if (noise > 0.0) v = std::clamp(v + noise * rng.normal(), 0.0, 1.0);
        img[y * size + x] = static_cast<Real>(v);
      }
    }
    ds.labels.push_back(label);
  }
  ds.inputs = Tensor<Real>(Shape{n, 1, size, size}, std::move(data));
  return ds;
}

struct MovingBarOptions {
  std::size_t classes = 4;        // directions, evenly spaced; class 0 moves rightward
  std::uint16_t sensor = 32;      // square sensor side
  double duration_ms = 40.0;
  double speed_px_per_ms = 0.4;   // mean speed; each sample draws in [0.75, 1.25] x
  double event_prob = 0.5;        // per covered pixel per millisecond
  double noise_rate = 0.0;        // background events per pixel per millisecond
  double polarity_flip = 0.0;     // probability a bar event gets the opposite polarity
  double start_jitter = 0.1;      // start-position jitter along the motion, fraction of the side
};

/// Bars sweeping across the sensor; the direction of motion is the class.
/// Pixels under the bar fire each millisecond with `event_prob`; the leading
/// half emits ON (p=1) events, the trailing half OFF (p=0) events.
inline std::vector<EventStream> synth_moving_bars(std::size_t n, const MovingBarOptions& opt,
                                                  std::uint64_t seed) {
  if (n < 1) throw ConfigError("synth moving-bar: n must be >= 1");
  if (opt.classes < 2 || opt.classes > 16) throw ConfigError("synth moving-bar: classes must be in [2, 16]");
  if (opt.sensor < 8) throw ConfigError("synth moving-bar: sensor must be >= 8");
  Rng rng(seed);
  std::vector<EventStream> out;
  out.reserve(n);
  const double side = opt.sensor;
  const double c0 = (side - 1.0) / 2.0;
  const auto steps = static_cast<std::size_t>(std::ceil(opt.duration_ms));
  for (std::size_t i = 0; i < n; ++i) {
    EventStream s;
    s.width = s.height = opt.sensor;
    s.label = static_cast<int>(i % opt.classes);
    const double angle = 2.0 * std::numbers::pi * s.label / static_cast<double>(opt.classes);
    const double dx = std::cos(angle), dy = std::sin(angle);
    const double speed = opt.speed_px_per_ms * rng.uniform(0.75, 1.25);
    const double travel = speed * opt.duration_ms;
    const double offset = rng.uniform(-side / 8.0, side / 8.0);
    const double start_along = -travel / 2.0 + rng.uniform(-side * opt.start_jitter, side * opt.start_jitter);
    const double half_thick = rng.uniform(1.0, 2.0);
    const double half_len = side * rng.uniform(0.25, 0.4);
    for (std::size_t ms = 0; ms < steps; ++ms) {
      const double pos = start_along + speed * static_cast<double>(ms);
      std::vector<Event> tick;
      for (std::uint16_t y = 0; y < opt.sensor; ++y) {
        for (std::uint16_t x = 0; x < opt.sensor; ++x) {
          const double px = x - c0, py = y - c0;
          const double along = px * dx + py * dy - pos;
          const double across = -px * dy + py * dx - offset;
          const bool on_bar = std::abs(along) <= half_thick && std::abs(across) <= half_len;
          if (on_bar && rng.bernoulli(opt.event_prob)) {
            std::uint8_t p = along >= 0.0 ? 1 : 0;
            if (opt.polarity_flip > 0.0 && rng.bernoulli(opt.polarity_flip)) p ^= 1;
            tick.push_back(Event{0, x, y, p});
          } else if (opt.noise_rate > 0.0 && rng.bernoulli(opt.noise_rate)) {
            tick.push_back(Event{0, x, y, static_cast<std::uint8_t>(rng.below(2))});
          }
        }
      }
      // spread the tick's events over its millisecond
      for (std::size_t k = 0; k < tick.size(); ++k) {
        tick[k].t_us = static_cast<std::uint32_t>(ms * 1000 + (k * 1000) / tick.size());
        s.events.push_back(tick[k]);
      }
    }
    // pin the recording length so every stream spans the full duration
    if (s.events.empty() || s.events.back().t_us + 1 < opt.duration_ms * 1000.0) {
      s.events.push_back(Event{static_cast<std::uint32_t>(opt.duration_ms * 1000.0) - 1, 0, 0, 0});
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace tssd
