#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kdasc {

/// Raised when operand shapes do not fit an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised on misuse of the gradient tape (detached loss, double backward, ...).
class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
class Tape;

/// Dense row-major tensor with shared storage.
///
/// Copies alias the same buffer, so a tensor handed to an op and the tensor
/// recorded on the tape stay the same object. Use clone() for a deep copy.
/// When requires_grad is set the gradient buffer always exists and has the
/// same shape as the data.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : impl_(std::make_shared<Impl>()) {}

  explicit BasicTensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    impl_->shape = std::move(shape);
    impl_->data.assign(numel_of(impl_->shape), fill);
    set_requires_grad(requires_grad);
  }

  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (numel_of(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    set_requires_grad(requires_grad);
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T(0)); }
  static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), T(1)); }
  static BasicTensor scalar(T v, bool requires_grad = false) {
    return BasicTensor(Shape{1}, std::vector<T>{v}, requires_grad);
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::vector<T>& data() { return impl_->data; }
  const std::vector<T>& data() const { return impl_->data; }
  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }

  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  BasicTensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on) {
      impl_->grad.assign(impl_->data.size(), T(0));
    } else {
      impl_->grad.clear();
    }
    return *this;
  }

  std::vector<T>& grad() const { return impl_->grad; }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }

  /// Position of the op that produced this tensor on the active tape, -1 for leaves.
  long tape_index() const { return impl_->tape_index; }
  std::size_t tape_generation() const { return impl_->tape_generation; }

  BasicTensor clone() const {
    BasicTensor out(shape(), data());
    return out;
  }

  /// Same data, reinterpreted under a new shape; does not participate in the tape.
  BasicTensor reshaped(Shape shape) const {
    return BasicTensor(std::move(shape), data());
  }

  bool all_finite() const {
    return std::all_of(impl_->data.begin(), impl_->data.end(),
                       [](T v) { return std::isfinite(v); });
  }

  bool same_storage(const BasicTensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    long tape_index = -1;
    std::size_t tape_generation = 0;
  };
  std::shared_ptr<Impl> impl_;

  friend class Tape<T>;
};

using Tensor = BasicTensor<float>;

/// Ordered record of executed differentiable ops.
///
/// Every op that touches a requires_grad input appends one entry holding its
/// backward closure. backward() replays entries in exact reverse order. A tape
/// can be consumed once; reset() starts a fresh recording.
template <class T>
class Tape {
 public:
  struct Entry {
    std::string op;
    std::function<void()> backward;
  };

  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

  bool recording() const { return enabled_; }
  std::size_t size() const { return entries_.size(); }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }
  bool consumed() const { return consumed_; }
  std::size_t generation() const { return generation_; }

  /// Marks `out` as produced by a differentiable op and stores its backward.
  void record(std::string op, BasicTensor<T>& out, std::function<void()> backward) {
    if (consumed_) {
      throw AutodiffError("tape already consumed by backward(); call reset() before recording " + op);
    }
    out.set_requires_grad(true);
    out.impl_->tape_index = static_cast<long>(entries_.size());
    out.impl_->tape_generation = generation_;
    entries_.push_back(Entry{std::move(op), std::move(backward)});
  }

  void reset() {
    entries_.clear();
    consumed_ = false;
    ++generation_;
  }

  void backward(BasicTensor<T>& loss) {
    if (loss.numel() != 1) {
      throw AutodiffError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad() || loss.tape_index() < 0 ||
        loss.tape_generation() != generation_ ||
        static_cast<std::size_t>(loss.tape_index()) >= entries_.size()) {
      throw AutodiffError("backward() on a loss that is not on the active tape");
    }
    if (consumed_) {
      throw AutodiffError("backward() called twice without resetting the tape");
    }
    if (!loss.all_finite()) {
      throw std::runtime_error("non-finite loss value");
    }
    loss.grad()[0] = T(1);
    consumed_ = true;
    for (long i = loss.tape_index(); i >= 0; --i) {
      entries_[static_cast<std::size_t>(i)].backward();
    }
  }

  void set_enabled(bool on) { enabled_ = on; }

 private:
  std::vector<Entry> entries_;
  bool consumed_ = false;
  bool enabled_ = true;
  std::size_t generation_ = 1;
};

/// Disables recording on the active tape for its lifetime.
template <class T = float>
class NoGradGuard {
 public:
  NoGradGuard() : prev_(Tape<T>::active().recording()) { Tape<T>::active().set_enabled(false); }
  ~NoGradGuard() { Tape<T>::active().set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
void backward(BasicTensor<T>& loss) {
  Tape<T>::active().backward(loss);
}

template <class T>
void reset_tape() {
  Tape<T>::active().reset();
}

namespace detail {

template <class T, class... Ts>
bool any_requires_grad(const BasicTensor<T>& first, const Ts&... rest) {
  return first.requires_grad() || (rest.requires_grad() || ...);
}

template <class T, class... Ts>
bool should_record(const BasicTensor<T>& first, const Ts&... rest) {
  return Tape<T>::active().recording() && any_requires_grad(first, rest...);
}

}  // namespace detail

}  // namespace kdasc
