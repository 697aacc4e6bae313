#include "cfnet/pipeline/sampling.hpp"

#include <algorithm>
#include <deque>

#include "cfnet/errors.hpp"
#include "cfnet/pipeline/rng.hpp"

namespace cfnet::pipeline {

std::vector<std::size_t> oversample_plan(const std::vector<std::size_t>& indices,
                                         const std::vector<std::size_t>& labels, std::size_t num_classes,
                                         std::size_t target, std::uint64_t seed, bool allow_undersample) {
  if (indices.size() != labels.size()) throw ShapeError("oversample_plan: indices and labels differ in length");
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (labels[i] >= num_classes) throw ValueError("oversample_plan: label out of range");
    by_class[labels[i]].push_back(indices[i]);
  }
  auto rng = stream({seed, tag(StreamTag::kPlan)});
  std::vector<std::size_t> plan;
  if (target == 0) {
    plan = indices;
  } else {
    plan.reserve(num_classes * target);
    for (std::size_t k = 0; k < num_classes; ++k) {
      const auto& members = by_class[k];
      if (members.empty()) throw ValueError("oversample_plan: class " + std::to_string(k) + " has no samples");
      if (members.size() > target && !allow_undersample) {
        throw ValueError("oversample_plan: class " + std::to_string(k) + " has " + std::to_string(members.size()) +
                         " samples, more than the target " + std::to_string(target));
      }
      const std::size_t reps = target / members.size();
      for (std::size_t r = 0; r < reps; ++r) plan.insert(plan.end(), members.begin(), members.end());
      std::vector<std::size_t> rest = members;
      shuffle(rest.begin(), rest.end(), rng);
      plan.insert(plan.end(), rest.begin(), rest.begin() + static_cast<long>(target % members.size()));
    }
  }
  shuffle(plan.begin(), plan.end(), rng);
  return plan;
}

std::vector<std::vector<std::size_t>> pk_batches(const std::vector<std::size_t>& plan,
                                                 const std::vector<std::size_t>& labels, std::size_t P, std::size_t K,
                                                 std::uint64_t seed) {
  if (P < 2 || K < 2) throw ValueError("pk_batches: P and K must both be at least 2");
  std::size_t num_classes = 0;
  for (auto i : plan) {
    if (i >= labels.size()) throw ValueError("pk_batches: plan index out of range");
    num_classes = std::max(num_classes, labels[i] + 1);
  }
  std::vector<std::deque<std::size_t>> queues(num_classes);
  for (auto i : plan) queues[labels[i]].push_back(i);
  std::size_t feasible = 0;
  for (const auto& q : queues) feasible += q.size() >= K;
  if (feasible < P) {
    throw ValueError("pk_batches: need " + std::to_string(P) + " classes with at least " + std::to_string(K) +
                     " samples, found " + std::to_string(feasible));
  }
  std::vector<std::size_t> order(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) order[k] = k;
  auto rng = stream({seed, tag(StreamTag::kBatches)});
  shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> rank(num_classes);
  for (std::size_t r = 0; r < num_classes; ++r) rank[order[r]] = r;

  std::vector<std::vector<std::size_t>> batches;
  while (true) {
    std::vector<std::size_t> cand;
    for (std::size_t k = 0; k < num_classes; ++k)
      if (queues[k].size() >= K) cand.push_back(k);
    if (cand.size() < P) break;
    std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
      if (queues[a].size() != queues[b].size()) return queues[a].size() > queues[b].size();
      return rank[a] < rank[b];
    });
    std::vector<std::size_t> batch;
    batch.reserve(P * K);
    for (std::size_t j = 0; j < P; ++j) {
      auto& q = queues[cand[j]];
      for (std::size_t t = 0; t < K; ++t) {
        batch.push_back(q.front());
        q.pop_front();
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

std::vector<std::vector<std::size_t>> chunk_batches(const std::vector<std::size_t>& plan, std::size_t batch_size) {
  if (batch_size == 0) throw ValueError("chunk_batches: batch size must be positive");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < plan.size(); i += batch_size) {
    out.emplace_back(plan.begin() + static_cast<long>(i),
                     plan.begin() + static_cast<long>(std::min(plan.size(), i + batch_size)));
  }
  return out;
}

}  // namespace cfnet::pipeline
