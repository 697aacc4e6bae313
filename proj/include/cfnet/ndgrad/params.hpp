#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cfnet/ndgrad/tensor.hpp"

namespace cfnet::nd {

/// Ordered collection of named parameter tensors. Names form a dotted
/// namespace (`student.enc.stage0.w`) and are unique.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }

  // Entries whose name starts with prefix.
  std::vector<Tensor> with_prefix(const std::string& prefix) const;

  // Deep copy (independent storage).
  ParamStore clone() const;

  // Copies values of every entry under src_prefix into the matching entry
  // under dst_prefix; both sides must have identical names and shapes.
  void copy_prefix(const ParamStore& src, const std::string& src_prefix, const std::string& dst_prefix);

  void set_requires_grad(const std::string& prefix, bool on);
  void clear_grads();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// Kaiming-uniform: U(-b, b) with b = sqrt(6 / fan_in).
Tensor kaiming_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

}  // namespace cfnet::nd
