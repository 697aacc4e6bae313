#pragma once

#include <optional>
#include <string_view>
#include <vector>

#include "cfnet/ndgrad/tensor.hpp"

namespace cfnet::losses {

using nd::BasicTensor;

struct LossWeights {
  double rec = 1.0;
  double con = 0.5;
  double align = 0.1;
  double sep = 0.1;
  double margin = 0.2;
  bool normalize_sep = false;  // L2-normalise features before the triplet distances

  void validate() const;
};

// Ablation presets as masks over `base`: "rec_only", "rec_con_align", "full".
LossWeights ablation_weights(std::string_view preset, const LossWeights& base = {});

// Mean squared error over every element.
template <typename T>
BasicTensor<T> l_rec(const BasicTensor<T>& pred, const BasicTensor<T>& target);
template <typename T>
BasicTensor<T> l_con(const BasicTensor<T>& teacher_out, const BasicTensor<T>& student_out);

// 1 - cos(f_T, f_S) per sample (features flattened), batch mean.
template <typename T>
BasicTensor<T> l_align(const BasicTensor<T>& f_teacher, const BasicTensor<T>& f_student, double eps = 1e-8);

// Batch-hard triplet loss, summed over anchors that have an in-batch positive.
template <typename T>
BasicTensor<T> l_sep(const BasicTensor<T>& features, const std::vector<std::size_t>& labels, double margin,
                     bool normalize = false);

template <typename T>
struct LossTerms {
  std::optional<BasicTensor<T>> rec, con, align, sep;
};

// Weighted sum; terms with zero weight are left out of the graph entirely.
template <typename T>
BasicTensor<T> compound(const LossTerms<T>& terms, const LossWeights& w);

// Mean over the batch of -alpha_y (1 - p_y)^gamma log p_y. Empty alpha means 1.
template <typename T>
BasicTensor<T> focal_loss(const BasicTensor<T>& logits, const std::vector<std::size_t>& labels, double gamma,
                          const std::vector<double>& alpha = {});

// Inverse class frequency normalised to mean 1 over classes with samples;
// absent classes get weight 1.
std::vector<double> inverse_frequency_alpha(const std::vector<std::size_t>& counts);

}  // namespace cfnet::losses
