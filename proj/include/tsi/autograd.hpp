#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>

#include "tsi/tensor.hpp"

namespace tsi {

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A learnable tensor together with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  /// Weight decay applies (conv/FC weights); false for biases and normalization affine terms.
  bool decay = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool wd = true) : name(std::move(n)), value(std::move(v)), decay(wd) {}

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::int64_t dim(std::int64_t axis) const { return value().dim(axis); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Computation record for reverse-mode differentiation. Nodes are appended in
/// evaluation order, so the record is topologically ordered by construction and
/// backward() replays adjoints in reverse.
template <typename T>
class Tape {
 public:
  /// Receives the adjoint of the op result and the result value itself.
  using BackwardFn = std::function<void(const Tensor<T>& grad_out, const Tensor<T>& value_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> param(Parameter<T>& p);

  /// Appends an op result. `fn` is kept only when some input requires a gradient.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn);
  Var<T> record(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn);

  bool requires_grad(const Var<T>& v) const { return nodes_[v.id()].requires_grad; }

  /// Adds `g` into the adjoint of `v`; ignored when v does not require a gradient.
  void accumulate(const Var<T>& v, const Tensor<T>& g);
  void accumulate(const Var<T>& v, Tensor<T>&& g);

  /// Zero-initialized adjoint buffer of `v` for in-place accumulation, or nullptr.
  Tensor<T>* grad_buffer(const Var<T>& v);

  /// Reverse pass from a scalar loss; parameter gradients accumulate into Parameter::grad.
  void backward(const Var<T>& loss);

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  /// Adjoint of `v` after backward(); empty when never reached.
  const Tensor<T>& grad(const Var<T>& v) const { return nodes_[v.id()].grad; }

  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    const char* op = "";
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Var<T> push(Node node);

  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(*this);
}

/// Scoped inference mode: ops record values but no adjoints.
template <typename T>
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape<T>& tape) : tape_(tape), prev_(tape.grad_enabled()) { tape.set_grad_enabled(false); }
  ~NoGradGuard() { tape_.set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<T>& tape_;
  bool prev_;
};

namespace debug {
/// Test hook: the adjoint of every op named `op` is scaled by `factor` during
/// backward(). Empty name disables it.
void set_corrupted_adjoint(std::string op, double factor = 1.5);
}  // namespace debug

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace tsi
