#include "patchmoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace patchmoe::inline PATCHMOE_PRECISION {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : store_(std::make_shared<Storage>()), shape_(std::move(shape)) {
  store_->data.assign(numel(shape_), real(0));
}

Tensor::Tensor(Shape shape, std::vector<real> values)
    : store_(std::make_shared<Storage>()), shape_(std::move(shape)) {
  if (values.size() != numel(shape_))
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                     to_string(shape_));
  store_->data = std::move(values);
}

Tensor Tensor::full(Shape shape, real value) {
  Tensor t(std::move(shape));
  std::fill(t.store_->data.begin(), t.store_->data.end(), value);
  return t;
}

std::size_t Tensor::size() const noexcept { return store_ ? store_->data.size() : 0; }

std::span<real> Tensor::values() { return store_->data; }
std::span<const real> Tensor::values() const { return store_->data; }

real Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
  return store_->data[0];
}

std::span<real> Tensor::grad() const {
  if (store_->grad.empty()) store_->grad.assign(store_->data.size(), real(0));
  return store_->grad;
}

void Tensor::zero_grad() {
  if (store_ && !store_->grad.empty()) std::fill(store_->grad.begin(), store_->grad.end(), real(0));
}

Tensor& Tensor::set_requires_grad(bool on) {
  store_->requires_grad = on;
  return *this;
}

Tensor Tensor::reshape(Shape shape) const {
  if (numel(shape) != size())
    throw ShapeError("reshape " + to_string(shape_) + " -> " + to_string(shape));
  Tensor view = *this;
  view.shape_ = std::move(shape);
  return view;
}

Tensor Tensor::clone() const {
  Tensor copy(shape_, store_->data);
  return copy;
}

namespace {
thread_local Tape* g_tape = nullptr;
}

Tape::Tape() : previous_(g_tape) { g_tape = this; }

Tape::~Tape() { g_tape = previous_; }

Tape* Tape::active() noexcept { return g_tape; }

void Tape::record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }

void Tape::backward(Tensor& loss) {
  if (loss.size() != 1) throw ShapeError("backward() needs a scalar loss, got " + to_string(loss.shape()));
  loss.grad()[0] += real(1);
  // Closures must not record while replaying.
  Tape* saved = g_tape;
  g_tape = nullptr;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  g_tape = saved;
  entries_.clear();
}

NoGradScope::NoGradScope() : saved_(g_tape) { g_tape = nullptr; }
NoGradScope::~NoGradScope() { g_tape = saved_; }

Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  if (g_tape == nullptr) return nullptr;
  for (const Tensor* t : inputs)
    if (t != nullptr && t->defined() && t->requires_grad()) return g_tape;
  return nullptr;
}

void check_finite(const Tensor& t, const char* op) {
  for (real v : t.values())
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
}

}  // namespace patchmoe::inline PATCHMOE_PRECISION
