#pragma once

#include <cstddef>
#include <optional>
#include <type_traits>
#include <vector>

#include "cfnet/ndgrad/tensor.hpp"

// Differentiable primitives. Each one checks its input shapes, computes the
// forward value, rejects non-finite results and, when a tape is active and any
// input requires a gradient, records its backward rule.
//
// Binary elementwise ops broadcast with numpy rules (right-aligned, size-1
// axes stretch).
namespace cfnet::nd {

template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& x, T factor);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value);

// [M,K]x[K,N], [B,M,K]x[K,N] or [B,M,K]x[B,K,N].
template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <typename T> BasicTensor<T> transpose(const BasicTensor<T>& x);

struct Conv2dAttrs {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// x [B,Cin,H,W], w [Cout,Cin,k,k], bias [Cout]. Output spatial size is
// floor((H + 2*pad - k) / stride) + 1.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const std::optional<std::type_identity_t<BasicTensor<T>>>& bias, Conv2dAttrs attrs);

// x [B,Cin,H,W], w [Cin,Cout,k,k], bias [Cout]. Output spatial size is
// (H - 1) * stride - 2 * pad + k.
template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                const std::optional<std::type_identity_t<BasicTensor<T>>>& bias, Conv2dAttrs attrs);

template <typename T> BasicTensor<T> relu(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> exp(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> log(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> sqrt(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> square(const BasicTensor<T>& x);
// x^exponent; x must be non-negative unless exponent is an integer.
template <typename T> BasicTensor<T> pow_scalar(const BasicTensor<T>& x, T exponent);

// Over the last axis.
template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> log_softmax(const BasicTensor<T>& x);

// [B,C,H,W] -> [B,C].
template <typename T> BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);
// Non-overlapping k x k mean pooling; H and W must be divisible by k.
template <typename T> BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, std::size_t k);

template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
// [B,...] -> [B, prod(...)].
template <typename T> BasicTensor<T> flatten(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
// Flat gather: out[i] = x.data[indices[i]], rank-1 result.
template <typename T>
BasicTensor<T> take(const BasicTensor<T>& x, const std::vector<std::size_t>& indices);

// Full reduction to a rank-0 scalar.
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x);
// Reductions over the listed axes (dropped from the result).
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x, const std::vector<std::size_t>& axes);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x, const std::vector<std::size_t>& axes);

// Euclidean norm over one axis; gradient at a zero vector is taken as zero.
template <typename T> BasicTensor<T> l2_norm(const BasicTensor<T>& x, std::size_t axis);
// x [N,D] -> [N,N] Euclidean distances; zero-distance pairs get zero gradient.
template <typename T> BasicTensor<T> pairwise_distance(const BasicTensor<T>& x);

}  // namespace cfnet::nd
