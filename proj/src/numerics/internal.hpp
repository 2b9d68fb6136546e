#pragma once

#include <initializer_list>

#include "mv2mae/tensor.hpp"

namespace mv2mae::detail {

std::size_t norm_dim(std::ptrdiff_t dim, std::size_t rank, const char* op);

/// Wraps freshly computed data in a tensor and, when any parent needs a
/// gradient and grad mode is on, attaches the backward rule.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::initializer_list<const Tensor<T>*> parents,
                      std::function<void(TensorImpl<T>&)> rule) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (!grad_mode_enabled()) return out;
  bool any = false;
  for (auto* p : parents) any = any || p->requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  for (auto* p : parents) node->parents.push_back(p->impl());
  node->backward = std::move(rule);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
  return out;
}

/// Same as above for a runtime-sized parent list.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op, const std::vector<Tensor<T>>& parents,
                      std::function<void(TensorImpl<T>&)> rule) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (!grad_mode_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  for (const auto& p : parents) node->parents.push_back(p.impl());
  node->backward = std::move(rule);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
  return out;
}

/// Splits `shape` around `dim` into (outer, length, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};
inline AxisSplit split_axis(const Shape& shape, std::size_t dim) {
  AxisSplit s;
  for (std::size_t i = 0; i < dim; ++i) s.outer *= shape[i];
  s.len = shape[dim];
  for (std::size_t i = dim + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace mv2mae::detail
