// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "ctlab/errors.hpp"

namespace ctlab {

template <typename T>
struct ParamArray {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;

  std::size_t size() const { return value.size(); }
};

/// Ordered collection of named arrays. Two sets are layout-compatible when
/// names and shapes agree position by position.
template <typename T>
class ParamSet {
 public:
  ParamArray<T>& add(std::string name, std::vector<int> shape, T fill = T(0)) {
    const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                          [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    arrays_.push_back({std::move(name), std::move(shape), std::vector<T>(n, fill)});
    return arrays_.back();
  }

  std::size_t count() const { return arrays_.size(); }
  ParamArray<T>& operator[](std::size_t i) { return arrays_[i]; }
  const ParamArray<T>& operator[](std::size_t i) const { return arrays_[i]; }
  auto begin() { return arrays_.begin(); }
  auto end() { return arrays_.end(); }
  auto begin() const { return arrays_.begin(); }
  auto end() const { return arrays_.end(); }

  const ParamArray<T>* find(const std::string& name) const {
    auto it = std::find_if(arrays_.begin(), arrays_.end(), [&](const auto& a) { return a.name == name; });
    return it == arrays_.end() ? nullptr : &*it;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& a : arrays_) n += a.size();
    return n;
  }

  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& a : arrays_) out.add(a.name, a.shape, T(0));
    return out;
  }

  void set_zero() {
    for (auto& a : arrays_) std::fill(a.value.begin(), a.value.end(), T(0));
  }

  bool same_layout(const ParamSet& o) const {
    if (o.arrays_.size() != arrays_.size()) return false;
    for (std::size_t i = 0; i < arrays_.size(); ++i) {
      if (arrays_[i].name != o.arrays_[i].name || arrays_[i].shape != o.arrays_[i].shape) return false;
    }
    return true;
  }

  void require_same_layout(const ParamSet& o, const char* what) const {
    if (!same_layout(o)) throw ShapeError(std::string(what) + ": parameter layouts differ");
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& a : arrays_) {
      auto& dst = out.add(a.name, a.shape);
      std::transform(a.value.begin(), a.value.end(), dst.value.begin(), [](T v) { return static_cast<U>(v); });
    }
    return out;
  }

  bool operator==(const ParamSet& o) const {
    if (!same_layout(o)) return false;
    for (std::size_t i = 0; i < arrays_.size(); ++i) {
      if (arrays_[i].value != o.arrays_[i].value) return false;
    }
    return true;
  }

 private:
  std::vector<ParamArray<T>> arrays_;
};

/// FNV-1a over the raw bytes of every value; used to assert that a parameter
/// set did not change.
template <typename T>
std::uint64_t fingerprint(const ParamSet<T>& p) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& a : p) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(a.value.data());
    for (std::size_t i = 0; i < a.value.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace ctlab
