#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cfnet/errors.hpp"

namespace cfnet::nd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
class Tape;

template <typename T>
struct TapeState;

template <typename T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty when no gradient has been accumulated
  bool requires_grad = false;
  std::weak_ptr<TapeState<T>> tape;  // set when produced by a recorded primitive
  std::size_t node = 0;
  bool recorded = false;  // output of a recorded primitive (not a leaf)

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

/// Dense row-major tensor handle.
///
/// Copies share storage (handle semantics); use clone() for an independent
/// value. Parameters are leaf tensors with requires_grad set; every other
/// tensor that requires a gradient was produced by a primitive recorded on the
/// active Tape.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor();
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return s_->data.size(); }

  std::span<const T> data() const { return s_->data; }
  // Direct write access; only meaningful for leaves (parameters, inputs).
  std::span<T> mutable_data() { return s_->data; }
  T item() const;
  T at(std::size_t flat) const { return s_->data.at(flat); }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const T> grad() const { return s_->grad; }
  std::span<T> mutable_grad() { return s_->grad_buffer(); }
  void clear_grad() { s_->grad.clear(); }

  // Deep copy detached from any tape.
  BasicTensor clone() const;
  // Same data, no gradient tracking.
  BasicTensor detach() const { return clone(); }

  bool same_storage(const BasicTensor& other) const { return s_ == other.s_; }
  const std::shared_ptr<Storage<T>>& storage() const { return s_; }

 private:
  std::shared_ptr<Storage<T>> s_;
};

template <typename T>
struct TapeEntry {
  const char* primitive;
  std::vector<std::shared_ptr<Storage<T>>> inputs;
  std::shared_ptr<Storage<T>> output;
  // Reads output->grad and accumulates into the inputs that require grad.
  std::function<void(TapeEntry&)> backward;
};

template <typename T>
struct TapeState {
  std::vector<TapeEntry<T>> entries;
  bool consumed = false;
};

/// Define-by-run record of primitive applications.
///
/// A tape is filled while it is active on the current thread (see Scope).
/// Entries are appended in execution order, so every node's inputs precede it.
/// backward() may run once per recording.
template <typename T>
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();

  std::size_t size() const { return state_->entries.size(); }
  bool consumed() const { return state_->consumed; }

  void record(TapeEntry<T> entry, Storage<T>& output);

  // Populates grad on every requires_grad tensor reachable from loss.
  void backward(const BasicTensor<T>& loss);

  // Drops all entries so the tape can record a new forward pass.
  void reset();

  const std::shared_ptr<TapeState<T>>& state() const { return state_; }

 private:
  std::shared_ptr<TapeState<T>> state_;
};

/// Runs backward on the tape that recorded loss.
template <typename T>
void backward(const BasicTensor<T>& loss);

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;
using TapeF = Tape<float>;

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace cfnet::nd
