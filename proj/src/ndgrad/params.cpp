#include "cfnet/ndgrad/params.hpp"

#include <algorithm>
#include <cmath>

namespace cfnet::nd {

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw ValueError("param store: duplicate name " + name);
  value.set_requires_grad(true);
  entries_.emplace_back(name, std::move(value));
  return entries_.back().second;
}

Tensor& ParamStore::get(const std::string& name) {
  for (auto& [n, t] : entries_)
    if (n == name) return t;
  throw ValueError("param store: no parameter named " + name);
}

const Tensor& ParamStore::get(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw ValueError("param store: no parameter named " + name);
}

bool ParamStore::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::vector<Tensor> ParamStore::with_prefix(const std::string& prefix) const {
  std::vector<Tensor> out;
  for (const auto& [n, t] : entries_)
    if (n.starts_with(prefix)) out.push_back(t);
  return out;
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [n, t] : entries_) {
    auto c = t.clone();
    c.set_requires_grad(t.requires_grad());
    out.entries_.emplace_back(n, c);
  }
  return out;
}

void ParamStore::copy_prefix(const ParamStore& src, const std::string& src_prefix,
                             const std::string& dst_prefix) {
  std::size_t copied = 0;
  for (const auto& [n, t] : src.entries_) {
    if (!n.starts_with(src_prefix)) continue;
    const std::string dst = dst_prefix + n.substr(src_prefix.size());
    Tensor& target = get(dst);
    if (target.shape() != t.shape()) {
      throw ShapeError("param store: " + n + " " + to_string(t.shape()) + " cannot initialize " + dst +
                       " " + to_string(target.shape()));
    }
    std::copy(t.data().begin(), t.data().end(), target.mutable_data().begin());
    ++copied;
  }
  if (copied == 0) throw ValueError("param store: no parameters under prefix " + src_prefix);
}

void ParamStore::set_requires_grad(const std::string& prefix, bool on) {
  for (auto& [n, t] : entries_)
    if (n.starts_with(prefix)) t.set_requires_grad(on);
}

void ParamStore::clear_grads() {
  for (auto& [n, t] : entries_) t.clear_grad();
}

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<float> d(numel(shape));
  for (auto& v : d) v = static_cast<float>(dist(rng));
  return Tensor(std::move(shape), std::move(d));
}

}  // namespace cfnet::nd
