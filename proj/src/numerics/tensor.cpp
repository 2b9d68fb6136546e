#include "mv2mae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "numerics/internal.hpp"

namespace mv2mae {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace {
thread_local bool g_grad_enabled = true;
std::string g_backward_fault;
}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_mode_enabled() { return g_grad_enabled; }

void set_backward_fault(std::string primitive) { g_backward_fault = std::move(primitive); }
const std::string& backward_fault() { return g_backward_fault; }

template <class T>
Tensor<T>::Tensor() = default;

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " elements, got " +
                         std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <class T>
std::size_t Tensor<T>::dim(std::ptrdiff_t i) const {
  return impl_->shape[detail::norm_dim(i, rank(), "dim")];
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

template <class T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("at: index rank mismatch for " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t r = 0;
  for (auto i : index) {
    if (i >= impl_->shape[r]) throw std::out_of_range("at: index out of range");
    flat = flat * impl_->shape[r] + i;
    ++r;
  }
  return impl_->data[flat];
}

template <class T>
std::vector<T> Tensor<T>::grad() const {
  if (impl_->grad.empty()) return std::vector<T>(numel(), T(0));
  return impl_->grad;
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(impl_->shape, impl_->data, false);
}

namespace detail {

std::size_t norm_dim(std::ptrdiff_t dim, std::size_t rank, const char* op) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  const auto d = dim < 0 ? dim + r : dim;
  if (d < 0 || d >= r) {
    throw DimensionError(std::string(op) + ": dim " + std::to_string(dim) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(d);
}

}  // namespace detail

template <class T>
void backward(const Tensor<T>& root) {
  if (root.numel() != 1) {
    throw DimensionError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
  }
  using Impl = detail::TensorImpl<T>;
  // Iterative post-order DFS gives parents before children.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> seen;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(root.impl().get(), 0);
  seen.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->grad_fn && next < node->grad_fn->parents.size()) {
      Impl* parent = node->grad_fn->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  root.impl()->grad_buffer()[0] += T(1);
  const auto& fault = backward_fault();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = *it;
    if (!node->grad_fn || node->grad.empty()) continue;
    if (!fault.empty() && fault == node->grad_fn->op) {
      for (auto& g : node->grad) g = -g;
    }
    node->grad_fn->backward(*node);
    if (node != root.impl().get()) std::vector<T>().swap(node->grad);
  }
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> theta, double h) {
  if (!(h > 0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  std::vector<double> x(theta.begin(), theta.end());
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("relative_error: length mismatch");
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom == 0) return 0;
  return std::sqrt(diff) / denom;
}

template class Tensor<float>;
template class Tensor<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace mv2mae
