#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "tssd/error.hpp"
#include "tssd/params.hpp"
#include "tssd/tensor.hpp"

// Checkpoint layout for a prefix P:
//
//   P.manifest  text, one line per tensor: <name> <dtype> <shape> <byte_offset>
//               dtype is f32 or f64, shape is [d0,d1,...] ([] for scalars).
//               Lines starting with '#' are comments.
//   P.bin       little-endian IEEE-754 data of all tensors, concatenated in
//               manifest order with no padding.

namespace tssd {

namespace detail {

template <class Real>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<Real, float> || std::is_same_v<Real, double>);
  return std::is_same_v<Real, float> ? "f32" : "f64";
}

template <class T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

inline Shape parse_shape(const std::string& text) {
  if (text.size() < 2 || text.front() != '[' || text.back() != ']') {
    throw DataError("checkpoint: malformed shape '" + text + "'");
  }
  Shape shape;
  std::stringstream ss(text.substr(1, text.size() - 2));
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) throw DataError("checkpoint: malformed shape '" + text + "'");
    shape.push_back(std::stoull(part));
  }
  return shape;
}

}  // namespace detail

inline std::filesystem::path manifest_path(const std::filesystem::path& prefix) {
  return prefix.string() + ".manifest";
}
inline std::filesystem::path blob_path(const std::filesystem::path& prefix) {
  return prefix.string() + ".bin";
}

/// Writes every entry of `params` (trainable and buffers).
template <class Real>
void save_checkpoint(const ParamSet<Real>& params, const std::filesystem::path& prefix) {
  std::ofstream manifest(manifest_path(prefix));
  std::ofstream blob(blob_path(prefix), std::ios::binary);
  if (!manifest || !blob) throw DataError("checkpoint: cannot write " + prefix.string());
  manifest << "# tssd checkpoint v1\n";
  std::uint64_t offset = 0;
  for (const auto& e : params) {
    manifest << e.name << ' ' << detail::dtype_name<Real>() << ' ' << shape_str(e.tensor.shape())
             << ' ' << offset << '\n';
    for (Real v : e.tensor.storage()) {
      const Real le = detail::byteswap_if_big(v);
      blob.write(reinterpret_cast<const char*>(&le), sizeof(Real));
    }
    offset += e.tensor.size() * sizeof(Real);
  }
  if (!manifest || !blob) throw DataError("checkpoint: write failed for " + prefix.string());
}

struct ManifestLine {
  std::string name;
  std::string dtype;
  Shape shape;
  std::uint64_t offset = 0;
};

inline std::vector<ManifestLine> read_manifest(const std::filesystem::path& prefix) {
  std::ifstream in(manifest_path(prefix));
  if (!in) throw DataError("checkpoint: cannot open " + manifest_path(prefix).string());
  std::vector<ManifestLine> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestLine m;
    std::string shape;
    if (!(ls >> m.name >> m.dtype >> shape >> m.offset)) {
      throw DataError("checkpoint: malformed manifest line '" + line + "'");
    }
    if (m.dtype != "f32" && m.dtype != "f64") {
      throw DataError("checkpoint: unknown dtype '" + m.dtype + "'");
    }
    m.shape = detail::parse_shape(shape);
    lines.push_back(std::move(m));
  }
  return lines;
}

/// Reads a checkpoint into a fresh set (all entries trainable, converted to Real).
template <class Real>
ParamSet<Real> load_checkpoint(const std::filesystem::path& prefix) {
  const auto lines = read_manifest(prefix);
  std::ifstream blob(blob_path(prefix), std::ios::binary | std::ios::ate);
  if (!blob) throw DataError("checkpoint: cannot open " + blob_path(prefix).string());
  const std::uint64_t blob_size = static_cast<std::uint64_t>(blob.tellg());
  std::uint64_t expected = 0;
  for (const auto& m : lines) {
    const std::uint64_t width = m.dtype == "f32" ? 4 : 8;
    if (m.offset != expected) {
      throw DataError("checkpoint: manifest offset " + std::to_string(m.offset) + " for '" +
                      m.name + "', expected " + std::to_string(expected));
    }
    expected += numel(m.shape) * width;
  }
  if (expected != blob_size) {
    throw DataError("checkpoint: blob has " + std::to_string(blob_size) +
                    " bytes, manifest describes " + std::to_string(expected));
  }
  ParamSet<Real> out;
  for (const auto& m : lines) {
    blob.seekg(static_cast<std::streamoff>(m.offset));
    std::vector<Real> data(numel(m.shape));
    for (Real& v : data) {
      if (m.dtype == "f32") {
        float f;
        blob.read(reinterpret_cast<char*>(&f), sizeof f);
        v = static_cast<Real>(detail::byteswap_if_big(f));
      } else {
        double d;
        blob.read(reinterpret_cast<char*>(&d), sizeof d);
        v = static_cast<Real>(detail::byteswap_if_big(d));
      }
    }
    if (!blob) throw DataError("checkpoint: truncated blob at '" + m.name + "'");
    out.add(m.name, Tensor<Real>(m.shape, std::move(data)));
  }
  return out;
}

/// Overwrites the values of `params` from a checkpoint. Names and shapes must
/// match one-to-one.
template <class Real>
void load_checkpoint_into(ParamSet<Real>& params, const std::filesystem::path& prefix) {
  ParamSet<Real> loaded = load_checkpoint<Real>(prefix);
  if (loaded.size() != params.size()) {
    throw DataError("checkpoint: " + std::to_string(loaded.size()) + " tensors, model has " +
                    std::to_string(params.size()));
  }
  for (auto& e : params) {
    if (!loaded.contains(e.name)) throw DataError("checkpoint: missing tensor '" + e.name + "'");
    const Tensor<Real>& src = loaded[e.name];
    if (src.shape() != e.tensor.shape()) {
      throw DataError("checkpoint: tensor '" + e.name + "' has shape " + shape_str(src.shape()) +
                      ", model expects " + shape_str(e.tensor.shape()));
    }
    e.tensor = src;
  }
}

}  // namespace tssd
