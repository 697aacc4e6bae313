#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace cfnet::pipeline {

// indices[i] has class labels[i]. Each class is brought to exactly target
// entries: every index repeated floor(target / n_c) times plus a shuffled
// remainder, then the whole sequence is shuffled. target == 0 returns each
// index once (shuffled). A class larger than target is subsampled only when
// allow_undersample is set.
std::vector<std::size_t> oversample_plan(const std::vector<std::size_t>& indices,
                                         const std::vector<std::size_t>& labels, std::size_t num_classes,
                                         std::size_t target, std::uint64_t seed, bool allow_undersample = false);

// P distinct classes x K samples per batch, consuming the plan in order per
// class. Each batch takes the P classes with the most remaining entries (ties
// broken by a seeded class order); stops when fewer than P classes have K left.
// labels is indexed by the values stored in plan.
std::vector<std::vector<std::size_t>> pk_batches(const std::vector<std::size_t>& plan,
                                                 const std::vector<std::size_t>& labels, std::size_t P, std::size_t K,
                                                 std::uint64_t seed);

// Consecutive chunks of batch_size; the last partial chunk is kept.
std::vector<std::vector<std::size_t>> chunk_batches(const std::vector<std::size_t>& plan, std::size_t batch_size);

}  // namespace cfnet::pipeline
