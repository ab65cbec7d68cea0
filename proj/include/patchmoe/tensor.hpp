#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "patchmoe/errors.hpp"
#include "patchmoe/precision.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major tensor with an optional gradient accumulator.
///
/// Copies are shallow: they share value and gradient storage, like a handle.
/// reshape() returns a view over the same storage, so gradients written
/// through a view land in the original. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<real> values);

  static Tensor full(Shape shape, real value);
  static Tensor scalar(real value) { return Tensor({1}, {value}); }

  bool defined() const noexcept { return store_ != nullptr; }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept;

  std::span<real> values();
  std::span<const real> values() const;
  real& operator[](std::size_t i) { return store_->data[i]; }
  real operator[](std::size_t i) const { return store_->data[i]; }
  real item() const;

  /// Gradient buffer, zero-filled on first access. Writable through a const
  /// handle: backward closures hold copies of their inputs.
  std::span<real> grad() const;
  bool has_grad() const noexcept { return store_ && !store_->grad.empty(); }
  void zero_grad();

  bool requires_grad() const noexcept { return store_ && store_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  Tensor reshape(Shape shape) const;
  Tensor clone() const;
  /// Deep copy with gradient tracking off.
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& other) const noexcept { return store_ == other.store_; }

 private:
  struct Storage {
    std::vector<real> data;
    std::vector<real> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> store_;
  Shape shape_;
};

/// Records backward closures in execution order while alive. Ops consult
/// Tape::active() and record only when some input requires a gradient.
/// backward() replays the closures in reverse.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() noexcept;

  void record(std::function<void()> backward_fn);
  /// Seeds d(loss)/d(loss) = 1 and runs every recorded closure newest first.
  /// The tape is consumed.
  void backward(Tensor& loss);
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  std::vector<std::function<void()>> entries_;
  Tape* previous_;
};

/// Disables recording for the enclosing scope (evaluation, parameter updates).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* saved_;
};

/// The tape to record on, or nullptr when no input needs a gradient.
Tape* recording_tape(std::initializer_list<const Tensor*> inputs);

/// Throws NumericError naming `op` if any value is NaN or Inf.
void check_finite(const Tensor& t, const char* op);

}  // namespace patchmoe::inline PATCHMOE_PRECISION
