#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfnet/ndgrad/tensor.hpp"

namespace cfnet::nd {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

enum class MissingGrad { kError, kSkip };

/// AdamW with decoupled weight decay and bias-corrected moments.
///
/// Parameters are registered in groups; each group scales the base learning
/// rate (differential rates for backbone vs. head).
class AdamW {
 public:
  explicit AdamW(AdamWOptions options) : opt_(options) {}

  void add_group(std::vector<std::string> names, std::vector<Tensor> params, double lr_scale = 1.0);

  // One update over every registered parameter, then clears their grads.
  // A parameter without a grad raises ValueError under kError and is left
  // untouched (no decay, no moment update) under kSkip.
  void step(MissingGrad missing = MissingGrad::kError);

  std::uint64_t steps() const { return t_; }
  const AdamWOptions& options() const { return opt_; }
  void set_lr(double lr) { opt_.lr = lr; }

  struct Slot {
    std::string name;
    Tensor param;
    std::vector<float> m, v;
    double lr_scale = 1.0;
  };
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  AdamWOptions opt_;
  std::uint64_t t_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace cfnet::nd
