#include "tsi/autograd.hpp"

#include <cstring>

namespace tsi {

namespace {
std::string g_corrupted_op;
double g_corruption_factor = 1.0;
}  // namespace

namespace debug {
void set_corrupted_adjoint(std::string op, double factor) {
  g_corrupted_op = std::move(op);
  g_corruption_factor = factor;
}
}  // namespace debug

template <typename T>
Var<T> Tape<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  Node n;
  n.op = "param";
  n.value = p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
  return record(op, std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
  if (finite_checks_enabled()) value.check_finite(op);
  Node n;
  n.op = op;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (const auto& in : inputs) {
      if (in.tape_ != this) throw ContractError(std::string(op) + ": input recorded on a different tape");
      n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
    }
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

template <typename T>
void Tape<T>::accumulate(const Var<T>& v, const Tensor<T>& g) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape()) {
    throw ContractError(std::string("adjoint shape ") + shape_str(g.shape()) + " does not match value shape " +
                        shape_str(n.value.shape()) + " for op " + n.op);
  }
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void Tape<T>::accumulate(const Var<T>& v, Tensor<T>&& g) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    if (g.shape() != n.value.shape()) {
      throw ContractError(std::string("adjoint shape ") + shape_str(g.shape()) + " does not match value shape " +
                          shape_str(n.value.shape()) + " for op " + n.op);
    }
    n.grad = std::move(g);
    return;
  }
  accumulate(v, static_cast<const Tensor<T>&>(g));
}

template <typename T>
Tensor<T>* Tape<T>::grad_buffer(const Var<T>& v) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
  return &n.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (loss.tape_ != this) throw ContractError("backward: loss recorded on a different tape");
  Node& root = nodes_[loss.id()];
  if (root.value.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(root.value.shape()));
  }
  if (!root.requires_grad) return;
  root.grad = Tensor<T>(root.value.shape(), T(1));
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (!g_corrupted_op.empty() && g_corrupted_op == n.op) {
      for (auto& g : n.grad.data()) g = static_cast<T>(g * g_corruption_factor);
    }
    if (n.param) {
      Parameter<T>& p = *n.param;
      if (p.grad.empty() || p.grad.shape() != p.value.shape()) p.zero_grad();
      auto dst = p.grad.data();
      auto src = n.grad.data();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    if (n.backward) n.backward(n.grad, n.value);
    if (i != loss.id() && n.backward) n.grad = Tensor<T>();
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace tsi
