#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mv2mae {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// Raised on incompatible operand shapes; the message names both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

template <class T>
struct TensorImpl;

template <class T>
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> parents;
  // Reads the output's data and grad, accumulates into parents' grads.
  std::function<void(TensorImpl<T>& out)> backward;
};

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node<T>> grad_fn;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor handle. Copies share storage; operations build a
/// reverse-mode graph when any operand requires a gradient.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor();
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::ptrdiff_t i) const;
  std::size_t numel() const { return impl_->data.size(); }
  constexpr DType dtype() const { return dtype_of<T>(); }

  std::span<const T> data() const { return impl_->data; }
  /// In-place access for optimizers and initializers. Does not record history.
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; zeros if nothing was accumulated.
  std::vector<T> grad() const;
  void zero_grad() { impl_->grad.clear(); }

  /// Same values, no history, fresh storage.
  Tensor detach() const;
  const char* grad_fn_name() const { return impl_->grad_fn ? impl_->grad_fn->op : ""; }

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Disables graph construction on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_mode_enabled();

/// Test hook: negates the input gradients produced by the named primitive's
/// backward rule. Empty string disables injection.
void set_backward_fault(std::string primitive);
const std::string& backward_fault();

// Elementwise (numpy-style broadcasting).
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& a, T s);
template <class T> Tensor<T> square(const Tensor<T>& a);

// Reductions.
template <class T> Tensor<T> sum(const Tensor<T>& a);
template <class T> Tensor<T> mean(const Tensor<T>& a);
/// Reduces `dim` away (no keepdim).
template <class T> Tensor<T> sum(const Tensor<T>& a, std::ptrdiff_t dim);
template <class T> Tensor<T> mean(const Tensor<T>& a, std::ptrdiff_t dim);

// Linear algebra / layout.
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <class T> Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& order);
template <class T> Tensor<T> transpose(const Tensor<T>& a, std::ptrdiff_t d0, std::ptrdiff_t d1);
template <class T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::ptrdiff_t dim);

/// x[B, N, ...] -> out[B, n, ...], out[b, j] = x[b, index[b][j]].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::vector<std::size_t>>& index);
/// Inverse layout of gather_rows: out[B, n_total, d] with out[b, pos[b][j]] = rows[b, j]
/// and every other row equal to `fill` [d].
template <class T>
Tensor<T> scatter_rows(const Tensor<T>& rows, const Tensor<T>& fill,
                       const std::vector<std::vector<std::size_t>>& pos, std::size_t n_total);

// Neural primitives.
template <class T> Tensor<T> softmax(const Tensor<T>& x, std::ptrdiff_t dim);
template <class T> Tensor<T> log_softmax(const Tensor<T>& x, std::ptrdiff_t dim);
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);
/// Exact form x * Phi(x).
template <class T> Tensor<T> gelu(const Tensor<T>& x);

/// Reverse-mode accumulation from a single-element root.
template <class T> void backward(const Tensor<T>& root);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h over every coordinate.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> theta, double h);

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
double relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace mv2mae
