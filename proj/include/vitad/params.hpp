#pragma once

#include <cstdint>
#include <cstring>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vitad/autodiff.hpp"
#include "vitad/rng.hpp"

namespace vitad {

enum class ParamGroup { encoder, fuser, decoder };

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::fuser: return "fuser";
    case ParamGroup::decoder: return "decoder";
  }
  return "?";
}

/// Named parameters in creation order. Addresses are stable for the store's
/// lifetime, so tapes and optimizer state may hold pointers into it.
template <typename T = float>
class ParamStore {
 public:
  struct Entry {
    std::unique_ptr<Parameter<T>> param;
    ParamGroup group;
  };

  Parameter<T>& add(std::string name, Tensor<T> init, ParamGroup group) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>(name, std::move(init), group == ParamGroup::encoder);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(p), group});
    return *entries_.back().param;
  }

  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  Parameter<T>& get(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ContractError("unknown parameter: " + std::string(name));
    return *entries_[it->second].param;
  }
  const Parameter<T>& get(std::string_view name) const {
    return const_cast<ParamStore*>(this)->get(name);
  }

  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<Parameter<T>*> group(ParamGroup g) const {
    std::vector<Parameter<T>*> out;
    for (const auto& e : entries_)
      if (e.group == g) out.push_back(e.param.get());
    return out;
  }

  std::vector<Parameter<T>*> trainable() const {
    std::vector<Parameter<T>*> out;
    for (const auto& e : entries_)
      if (!e.param->frozen) out.push_back(e.param.get());
    return out;
  }

  std::size_t count(ParamGroup g) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.group == g) n += e.param->value.numel();
    return n;
  }

  void set_frozen(ParamGroup g, bool frozen) {
    for (const auto& e : entries_)
      if (e.group == g) e.param->frozen = frozen;
  }

  void zero_grad() {
    for (const auto& e : entries_)
      if (!e.param->frozen) e.param->zero_grad();
  }

  /// FNV-1a over names and raw value bytes of one group.
  std::uint64_t fingerprint(ParamGroup g) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
      }
    };
    for (const auto& e : entries_) {
      if (e.group != g) continue;
      feed(e.param->name.data(), e.param->name.size());
      feed(e.param->value.raw(), e.param->value.numel() * sizeof(T));
    }
    return h;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
Tensor<T> trunc_normal_tensor(Shape shape, double std, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.trunc_normal(std));
  return t;
}

}  // namespace vitad
