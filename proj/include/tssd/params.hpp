#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>

#include "tssd/error.hpp"
#include "tssd/tensor.hpp"

namespace tssd {

enum class ParamKind {
  kTrainable,  // updated by the optimizer
  kBuffer,     // state carried with the model (BN running statistics)
};

template <class Real>
struct ParamEntry {
  std::string name;
  Tensor<Real> tensor;
  ParamKind kind = ParamKind::kTrainable;
  bool weight_decay = true;
  bool weak_head = false;

  bool trainable() const { return kind == ParamKind::kTrainable; }
};

/// Named tensors of a model in insertion order. References returned by add()
/// stay valid for the lifetime of the set (entries live in a deque and are
/// never erased in place).
template <class Real>
class ParamSet {
 public:
  using Entry = ParamEntry<Real>;

  ParamSet() = default;
  ParamSet(const ParamSet& other) { *this = other; }
  ParamSet& operator=(const ParamSet& other) {
    if (this == &other) return *this;
    entries_.clear();
    index_.clear();
    for (const Entry& e : other.entries_) insert(e);
    return *this;
  }
  ParamSet(ParamSet&&) noexcept = default;
  ParamSet& operator=(ParamSet&&) noexcept = default;

  Tensor<Real>& add(std::string name, Tensor<Real> tensor,
                    ParamKind kind = ParamKind::kTrainable,
                    bool weight_decay = true, bool weak_head = false) {
    return insert(Entry{std::move(name), std::move(tensor), kind, weight_decay,
                        weak_head})
        .tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Entry& entry(const std::string& name) { return entries_[lookup(name)]; }
  const Entry& entry(const std::string& name) const { return entries_[lookup(name)]; }

  Tensor<Real>& operator[](const std::string& name) { return entry(name).tensor; }
  const Tensor<Real>& operator[](const std::string& name) const {
    return entry(name).tensor;
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  /// Total element count of trainable tensors.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Entry& e : entries_) {
      if (e.trainable()) n += e.tensor.size();
    }
    return n;
  }

  /// Copy without the entries matching `drop`.
  ParamSet without(const std::function<bool(const Entry&)>& drop) const {
    ParamSet out;
    for (const Entry& e : entries_) {
      if (!drop(e)) out.insert(e);
    }
    return out;
  }

  void zero_grads() {
    for (Entry& e : entries_) {
      if (e.trainable()) e.tensor.zero_grad();
    }
  }

  /// Gives every trainable tensor a grad buffer (zeros where absent).
  void ensure_grads() {
    for (Entry& e : entries_) {
      if (e.trainable() && e.tensor.grad().size() != e.tensor.size()) {
        e.tensor.zero_grad();
      }
    }
  }

 private:
  Entry& insert(Entry e) {
    if (index_.count(e.name)) throw ConfigError("param set: duplicate name '" + e.name + "'");
    index_.emplace(e.name, entries_.size());
    entries_.push_back(std::move(e));
    return entries_.back();
  }

  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("param set: no tensor named '" + name + "'");
    return it->second;
  }

  std::deque<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace tssd
