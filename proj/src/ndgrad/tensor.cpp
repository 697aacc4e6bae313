#include "cfnet/ndgrad/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace cfnet::nd {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
BasicTensor<T>::BasicTensor() : s_(std::make_shared<Storage<T>>()) {
  s_->data.assign(1, T{0});
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad)
    : s_(std::make_shared<Storage<T>>()) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + to_string(shape));
  }
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " needs " +
                     std::to_string(numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  s_->shape = std::move(shape);
  s_->data = std::move(data);
  s_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T{0}, requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> data(numel(shape), value);
  return BasicTensor(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  if (axis >= s_->shape.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " +
                     to_string(s_->shape));
  }
  return s_->shape[axis];
}

template <typename T>
T BasicTensor<T>::item() const {
  if (s_->data.size() != 1) {
    throw ShapeError("tensor: item() on non-scalar " + to_string(s_->shape));
  }
  return s_->data[0];
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool on) {
  s_->requires_grad = on;
  if (!on) s_->grad.clear();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return BasicTensor(s_->shape, s_->data, false);
}

namespace {
template <typename T>
Tape<T>*& active_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}
}  // namespace

template <typename T>
Tape<T>::Tape() : state_(std::make_shared<TapeState<T>>()) {}

template <typename T>
Tape<T>::~Tape() {
  if (active_slot<T>() == this) active_slot<T>() = nullptr;
}

template <typename T>
Tape<T>::Scope::Scope(Tape& tape) : previous_(active_slot<T>()) {
  active_slot<T>() = &tape;
}

template <typename T>
Tape<T>::Scope::~Scope() {
  active_slot<T>() = previous_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_slot<T>();
}

template <typename T>
void Tape<T>::record(TapeEntry<T> entry, Storage<T>& output) {
  if (state_->consumed) {
    throw TapeError("tape: recording after backward; call reset() first");
  }
  output.requires_grad = true;
  output.tape = state_;
  output.node = state_->entries.size();
  output.recorded = true;
  state_->entries.push_back(std::move(entry));
}

template <typename T>
void Tape<T>::backward(const BasicTensor<T>& loss) {
  if (loss.storage()->tape.lock() != state_) {
    throw TapeError("backward: loss was not recorded on this tape");
  }
  nd::backward(loss);
}

template <typename T>
void Tape<T>::reset() {
  state_ = std::make_shared<TapeState<T>>();
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  const auto& s = loss.storage();
  auto state = s->tape.lock();
  if (!state) {
    if (s->recorded) {
      throw TapeError("backward: the tape that recorded this loss no longer exists");
    }
    if (s->requires_grad && s->data.size() == 1) {
      // A leaf used directly as a loss.
      s->grad_buffer()[0] += T{1};
      return;
    }
    if (!s->requires_grad) return;  // constant loss: nothing to differentiate
    throw TapeError("backward: loss must be a scalar, got shape " + to_string(s->shape));
  }
  if (s->data.size() != 1) {
    throw TapeError("backward: loss must be a scalar, got shape " + to_string(s->shape));
  }
  if (state->consumed) {
    throw TapeError("backward: tape already consumed; re-record the forward pass");
  }
  state->consumed = true;
  s->grad.assign(1, T{1});
  for (std::size_t i = s->node + 1; i-- > 0;) {
    auto& e = state->entries[i];
    if (e.output->grad.empty()) continue;
    e.backward(e);
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class Tape<float>;
template class Tape<double>;
template void backward<float>(const BasicTensor<float>&);
template void backward<double>(const BasicTensor<double>&);

}  // namespace cfnet::nd
