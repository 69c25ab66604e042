#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace metamap {

// FNV-1a over raw tensor bytes plus names; order-sensitive. Used for the
// frozen-backbone contract and for provenance checks on containers.
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a_str(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a(s.data(), s.size(), h);
}

// Named partition of every model parameter: the trainable meta-parameters
// (the meta-mapper's weights and prefix seeds) and the frozen backbone groups.
// Entries are ordered, so iteration, gradient accumulation and checksums are
// deterministic.
template <class Real>
struct ParameterSetT {
  using Named = std::pair<std::string, TensorT<Real>>;
  std::vector<Named> trainable;
  std::vector<Named> frozen;

  const TensorT<Real>& at(const std::string& name) const {
    for (const auto& [n, t] : trainable)
      if (n == name) return t;
    for (const auto& [n, t] : frozen)
      if (n == name) return t;
    throw ContractError("parameter set: no parameter named '" + name + "'");
  }

  void add_trainable(std::string name, TensorT<Real> t) {
    t.set_requires_grad(true);
    trainable.emplace_back(std::move(name), std::move(t));
  }
  void add_frozen(std::string name, TensorT<Real> t) {
    t.set_requires_grad(false);
    frozen.emplace_back(std::move(name), std::move(t));
  }

  std::vector<TensorT<Real>> trainable_tensors() const {
    std::vector<TensorT<Real>> out;
    out.reserve(trainable.size());
    for (const auto& [n, t] : trainable) out.push_back(t);
    return out;
  }

  // Functional clone: fresh leaf copies of the trainable partition; frozen
  // tensors are shared (immutable by contract). Adapting a clone never
  // mutates the original.
  ParameterSetT clone() const {
    ParameterSetT out;
    out.trainable.reserve(trainable.size());
    for (const auto& [n, t] : trainable) out.trainable.emplace_back(n, t.detach(true));
    out.frozen = frozen;
    return out;
  }

  // Same names, new tensors; used by the inner loop to assemble updated sets.
  ParameterSetT with_trainable(std::vector<TensorT<Real>> tensors) const {
    if (tensors.size() != trainable.size())
      throw ContractError("parameter set: wrong tensor count in with_trainable");
    ParameterSetT out;
    out.trainable.reserve(trainable.size());
    for (size_t i = 0; i < trainable.size(); ++i)
      out.trainable.emplace_back(trainable[i].first, std::move(tensors[i]));
    out.frozen = frozen;
    return out;
  }

  int64_t trainable_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : trainable) n += t.size();
    return n;
  }
};

template <class Real>
uint64_t checksum(const std::vector<std::pair<std::string, TensorT<Real>>>& named) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : named) {
    h = fnv1a_str(name, h);
    h = fnv1a(t.values().data(), t.values().size() * sizeof(Real), h);
  }
  return h;
}

// Named gradients of a scalar loss w.r.t. the trainable partition.
// Frozen parameters never receive an entry. With create_graph = true the
// returned gradients are differentiable (needed by the outer loop).
template <class Real>
std::map<std::string, TensorT<Real>> backward(const TensorT<Real>& loss,
                                              const ParameterSetT<Real>& params,
                                              bool create_graph = false) {
  auto gs = grad(loss, params.trainable_tensors(), create_graph);
  std::map<std::string, TensorT<Real>> out;
  for (size_t i = 0; i < params.trainable.size(); ++i) out[params.trainable[i].first] = gs[i];
  return out;
}

}  // namespace metamap
