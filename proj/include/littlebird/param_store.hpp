#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "littlebird/tensor.hpp"

namespace littlebird {

/// Named registry of trainable tensors. Iteration order is registration
/// order, so a model built the same way yields the same parameter sequence.
template <class S>
class ParamStoreT {
 public:
  TensorT<S>& add(const std::string& name, TensorT<S> t) {
    if (index_.count(name)) throw InputError("ParamStore: duplicate parameter name '" + name + "'");
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(t)});
    return entries_.back().tensor;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  TensorT<S>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw InputError("ParamStore: no parameter named '" + name + "'");
    return entries_[it->second].tensor;
  }
  const TensorT<S>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InputError("ParamStore: no parameter named '" + name + "'");
    return entries_[it->second].tensor;
  }

  size_t size() const { return entries_.size(); }
  const std::string& name(size_t i) const { return entries_[i].name; }
  TensorT<S>& tensor(size_t i) { return entries_[i].tensor; }
  const TensorT<S>& tensor(size_t i) const { return entries_[i].tensor; }

  Index total_elements() const {
    Index n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  struct Entry {
    std::string name;
    TensorT<S> tensor;
  };
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

using ParamStore = ParamStoreT<double>;

/// A trainable affine map x -> xW + b with weight (d_in x d_out) and bias.
template <class S>
struct LinearMapT {
  TensorT<S> weight;
  TensorT<S> bias;

  LinearMapT() = default;
  LinearMapT(ParamStoreT<S>& store, const std::string& prefix, Index d_in, Index d_out,
             SplitMix64& rng, S init_std = S(0.02)) {
    weight = store.add(prefix + ".weight", TensorT<S>::randn({d_in, d_out}, rng, init_std));
    bias = store.add(prefix + ".bias", TensorT<S>::zeros({d_out}));
  }
};

using LinearMap = LinearMapT<double>;

}  // namespace littlebird
