#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "mv2mae/tensor.hpp"
#include "numerics/internal.hpp"

namespace mv2mae {

using detail::make_result;
using detail::norm_dim;
using detail::split_axis;
using detail::TensorImpl;

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using Map = Eigen::Map<RowMat<T>>;

// Index bookkeeping for numpy-style broadcasting of two shapes.
struct Broadcast {
  enum class Kind { same, suffix_b, suffix_a, general };
  Shape out;
  Kind kind = Kind::same;
  std::size_t na = 0, nb = 0;
  std::vector<std::size_t> ia, ib;  // general only
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  bc.na = shape_numel(a);
  bc.nb = shape_numel(b);
  const std::size_t r = std::max(a.size(), b.size());
  bc.out.assign(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    bc.out[i] = std::max(da, db);
  }
  if (a == b) {
    bc.kind = Broadcast::Kind::same;
  } else if (a == bc.out && is_suffix(b, a)) {
    bc.kind = Broadcast::Kind::suffix_b;
  } else if (b == bc.out && is_suffix(a, b)) {
    bc.kind = Broadcast::Kind::suffix_a;
  } else {
    bc.kind = Broadcast::Kind::general;
    auto strides = [&](const Shape& s) {
      std::vector<std::size_t> st(r, 0);
      std::size_t acc = 1;
      for (std::size_t i = s.size(); i-- > 0;) {
        st[i + (r - s.size())] = s[i] == 1 ? 0 : acc;
        acc *= s[i];
      }
      return st;
    };
    const auto sa = strides(a), sb = strides(b);
    const std::size_t n = shape_numel(bc.out);
    bc.ia.resize(n);
    bc.ib.resize(n);
    std::vector<std::size_t> idx(r, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t o = 0; o < n; ++o) {
      bc.ia[o] = oa;
      bc.ib[o] = ob;
      for (std::size_t d = r; d-- > 0;) {
        if (++idx[d] < bc.out[d]) {
          oa += sa[d];
          ob += sb[d];
          break;
        }
        oa -= sa[d] * (idx[d] - 1);
        ob -= sb[d] * (idx[d] - 1);
        idx[d] = 0;
      }
    }
  }
  return bc;
}

template <class F>
void each(const Broadcast& bc, F&& f) {
  const std::size_t n = shape_numel(bc.out);
  switch (bc.kind) {
    case Broadcast::Kind::same:
      for (std::size_t o = 0; o < n; ++o) f(o, o, o);
      break;
    case Broadcast::Kind::suffix_b:
      for (std::size_t blk = 0; blk < n; blk += bc.nb)
        for (std::size_t j = 0; j < bc.nb; ++j) f(blk + j, blk + j, j);
      break;
    case Broadcast::Kind::suffix_a:
      for (std::size_t blk = 0; blk < n; blk += bc.na)
        for (std::size_t i = 0; i < bc.na; ++i) f(blk + i, i, blk + i);
      break;
    case Broadcast::Kind::general:
      for (std::size_t o = 0; o < n; ++o) f(o, bc.ia[o], bc.ib[o]);
      break;
  }
}

template <class T>
TensorImpl<T>& parent(TensorImpl<T>& out, std::size_t i) {
  return *out.grad_fn->parents[i];
}

enum class BinOp { add, sub, mul };

template <class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp kind, const char* op) {
  auto bc = std::make_shared<Broadcast>(plan_broadcast(a.shape(), b.shape(), op));
  std::vector<T> y(shape_numel(bc->out));
  const auto av = a.data();
  const auto bv = b.data();
  switch (kind) {
    case BinOp::add: each(*bc, [&](std::size_t o, std::size_t i, std::size_t j) { y[o] = av[i] + bv[j]; }); break;
    case BinOp::sub: each(*bc, [&](std::size_t o, std::size_t i, std::size_t j) { y[o] = av[i] - bv[j]; }); break;
    case BinOp::mul: each(*bc, [&](std::size_t o, std::size_t i, std::size_t j) { y[o] = av[i] * bv[j]; }); break;
  }
  return make_result<T>(bc->out, std::move(y), op, {&a, &b}, [bc, kind](TensorImpl<T>& out) {
    auto& pa = parent(out, 0);
    auto& pb = parent(out, 1);
    const auto& g = out.grad;
    if (pa.requires_grad) {
      auto ga = pa.grad_buffer();
      if (kind == BinOp::mul) {
        each(*bc, [&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += g[o] * pb.data[j]; });
      } else {
        each(*bc, [&](std::size_t o, std::size_t i, std::size_t) { ga[i] += g[o]; });
      }
    }
    if (pb.requires_grad) {
      auto gb = pb.grad_buffer();
      switch (kind) {
        case BinOp::add: each(*bc, [&](std::size_t o, std::size_t, std::size_t j) { gb[j] += g[o]; }); break;
        case BinOp::sub: each(*bc, [&](std::size_t o, std::size_t, std::size_t j) { gb[j] -= g[o]; }); break;
        case BinOp::mul:
          each(*bc, [&](std::size_t o, std::size_t i, std::size_t j) { gb[j] += g[o] * pa.data[i]; });
          break;
      }
    }
  });
}

}  // namespace

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::add, "add");
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::sub, "sub");
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::mul, "mul");
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> y(a.data().begin(), a.data().end());
  for (auto& v : y) v *= s;
  return make_result<T>(a.shape(), std::move(y), "scale", {&a}, [s](TensorImpl<T>& out) {
    auto g = parent(out, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * out.grad[i];
  });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  std::vector<T> y(a.data().begin(), a.data().end());
  for (auto& v : y) v *= v;
  return make_result<T>(a.shape(), std::move(y), "square", {&a}, [](TensorImpl<T>& out) {
    auto& p = parent(out, 0);
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * p.data[i] * out.grad[i];
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (auto v : a.data()) s += v;
  return make_result<T>(Shape{}, {s}, "sum", {&a}, [](TensorImpl<T>& out) {
    auto g = parent(out, 0).grad_buffer();
    for (auto& v : g) v += out.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
Tensor<T> sum(const Tensor<T>& a, std::ptrdiff_t dim) {
  const auto d = norm_dim(dim, a.rank(), "sum");
  const auto ax = split_axis(a.shape(), d);
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(d));
  std::vector<T> y(ax.outer * ax.inner, T(0));
  const auto x = a.data();
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t l = 0; l < ax.len; ++l)
      for (std::size_t i = 0; i < ax.inner; ++i) y[o * ax.inner + i] += x[(o * ax.len + l) * ax.inner + i];
  return make_result<T>(std::move(shape), std::move(y), "sum_dim", {&a}, [ax](TensorImpl<T>& out) {
    auto g = parent(out, 0).grad_buffer();
    for (std::size_t o = 0; o < ax.outer; ++o)
      for (std::size_t l = 0; l < ax.len; ++l)
        for (std::size_t i = 0; i < ax.inner; ++i) g[(o * ax.len + l) * ax.inner + i] += out.grad[o * ax.inner + i];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a, std::ptrdiff_t dim) {
  const auto d = norm_dim(dim, a.rank(), "mean");
  return scale(sum(a, static_cast<std::ptrdiff_t>(d)), T(1) / static_cast<T>(a.shape()[d]));
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const Shape ba(a.shape().begin(), a.shape().end() - 2);
  const Shape bb(b.shape().begin(), b.shape().end() - 2);
  Broadcast batch;
  try {
    batch = plan_broadcast(ba, bb, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch dimensions of " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " do not broadcast");
  }
  const std::size_t nbatch = shape_numel(batch.out);
  // Pairs of (a batch index, b batch index) per output batch.
  auto pairs = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>(nbatch);
  each(batch, [&](std::size_t o, std::size_t i, std::size_t j) { (*pairs)[o] = {i, j}; });
  // b without batch dims and a fully batched: fold a's batch into rows.
  const bool fold = bb.empty();

  Shape shape = batch.out;
  shape.push_back(m);
  shape.push_back(n);
  std::vector<T> y(nbatch * m * n);
  const T* av = a.data().data();
  const T* bv = b.data().data();
  if (fold) {
    const std::size_t rows = nbatch * m;
    Map<T>(y.data(), rows, n).noalias() = MapC<T>(av, rows, k) * MapC<T>(bv, k, n);
  } else {
    for (std::size_t o = 0; o < nbatch; ++o) {
      const auto [i, j] = (*pairs)[o];
      Map<T>(y.data() + o * m * n, m, n).noalias() = MapC<T>(av + i * m * k, m, k) * MapC<T>(bv + j * k * n, k, n);
    }
  }
  return make_result<T>(std::move(shape), std::move(y), "matmul", {&a, &b},
                        [pairs, fold, m, k, n](TensorImpl<T>& out) {
                          auto& pa = parent(out, 0);
                          auto& pb = parent(out, 1);
                          const T* g = out.grad.data();
                          const std::size_t nb = pairs->size();
                          if (fold) {
                            const std::size_t rows = nb * m;
                            if (pa.requires_grad) {
                              Map<T>(pa.grad_buffer().data(), rows, k).noalias() +=
                                  MapC<T>(g, rows, n) * MapC<T>(pb.data.data(), k, n).transpose();
                            }
                            if (pb.requires_grad) {
                              Map<T>(pb.grad_buffer().data(), k, n).noalias() +=
                                  MapC<T>(pa.data.data(), rows, k).transpose() * MapC<T>(g, rows, n);
                            }
                            return;
                          }
                          for (std::size_t o = 0; o < nb; ++o) {
                            const auto [i, j] = (*pairs)[o];
                            if (pa.requires_grad) {
                              Map<T>(pa.grad_buffer().data() + i * m * k, m, k).noalias() +=
                                  MapC<T>(g + o * m * n, m, n) * MapC<T>(pb.data.data() + j * k * n, k, n).transpose();
                            }
                            if (pb.requires_grad) {
                              Map<T>(pb.grad_buffer().data() + j * k * n, k, n).noalias() +=
                                  MapC<T>(pa.data.data() + i * m * k, m, k).transpose() * MapC<T>(g + o * m * n, m, n);
                            }
                          }
                        });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> y(a.data().begin(), a.data().end());
  return make_result<T>(std::move(shape), std::move(y), "reshape", {&a}, [](TensorImpl<T>& out) {
    auto g = parent(out, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
  });
}

template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& order) {
  const auto r = a.rank();
  if (order.size() != r) throw DimensionError("permute: order length does not match " + shape_str(a.shape()));
  std::vector<bool> used(r, false);
  for (auto o : order) {
    if (o >= r || used[o]) throw DimensionError("permute: invalid axis order for " + shape_str(a.shape()));
    used[o] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * a.shape()[i];
  Shape shape(r);
  std::vector<std::size_t> st(r);
  for (std::size_t i = 0; i < r; ++i) {
    shape[i] = a.shape()[order[i]];
    st[i] = in_stride[order[i]];
  }
  const std::size_t n = a.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t o = 0; o < n; ++o) {
    (*src)[o] = off;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < shape[d]) {
        off += st[d];
        break;
      }
      off -= st[d] * (idx[d] - 1);
      idx[d] = 0;
    }
  }
  std::vector<T> y(n);
  const auto x = a.data();
  for (std::size_t o = 0; o < n; ++o) y[o] = x[(*src)[o]];
  return make_result<T>(std::move(shape), std::move(y), "permute", {&a}, [src](TensorImpl<T>& out) {
    auto g = parent(out, 0).grad_buffer();
    for (std::size_t o = 0; o < src->size(); ++o) g[(*src)[o]] += out.grad[o];
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a, std::ptrdiff_t d0, std::ptrdiff_t d1) {
  std::vector<std::size_t> order(a.rank());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::swap(order[norm_dim(d0, a.rank(), "transpose")], order[norm_dim(d1, a.rank(), "transpose")]);
  return permute(a, order);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::ptrdiff_t dim) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const auto& ref = parts.front().shape();
  const auto d = norm_dim(dim, ref.size(), "concat");
  Shape shape = ref;
  shape[d] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == d || s[i] == ref[i];
    if (!ok) throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(ref));
    shape[d] += s[d];
  }
  const auto ax = split_axis(shape, d);
  auto widths = std::make_shared<std::vector<std::size_t>>();
  for (const auto& p : parts) widths->push_back(p.shape()[d] * ax.inner);
  const std::size_t row = ax.len * ax.inner;
  std::vector<T> y(ax.outer * row);
  std::size_t col = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto x = parts[pi].data();
    const auto w = (*widths)[pi];
    for (std::size_t o = 0; o < ax.outer; ++o) std::copy_n(x.data() + o * w, w, y.data() + o * row + col);
    col += w;
  }
  return make_result<T>(std::move(shape), std::move(y), "concat", parts, [widths, ax, row](TensorImpl<T>& out) {
    std::size_t c = 0;
    for (std::size_t pi = 0; pi < widths->size(); ++pi) {
      auto& p = parent(out, pi);
      const auto w = (*widths)[pi];
      if (p.requires_grad) {
        auto g = p.grad_buffer();
        for (std::size_t o = 0; o < ax.outer; ++o)
          for (std::size_t i = 0; i < w; ++i) g[o * w + i] += out.grad[o * row + c + i];
      }
      c += w;
    }
  });
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::vector<std::size_t>>& index) {
  if (x.rank() < 2 || index.size() != x.dim(0)) {
    throw DimensionError("gather_rows: index batch does not match " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), rows = x.dim(1);
  const std::size_t width = x.numel() / (batch * rows);
  const std::size_t n = index.empty() ? 0 : index[0].size();
  for (const auto& ix : index) {
    if (ix.size() != n) throw DimensionError("gather_rows: ragged index lists");
    for (auto i : ix)
      if (i >= rows) throw DimensionError("gather_rows: index " + std::to_string(i) + " out of range");
  }
  Shape shape = x.shape();
  shape[1] = n;
  std::vector<T> y(batch * n * width);
  const auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < n; ++j)
      std::copy_n(xv.data() + (b * rows + index[b][j]) * width, width, y.data() + (b * n + j) * width);
  auto ix = std::make_shared<std::vector<std::vector<std::size_t>>>(index);
  return make_result<T>(std::move(shape), std::move(y), "gather_rows", {&x},
                        [ix, rows, width, n](TensorImpl<T>& out) {
                          auto g = parent(out, 0).grad_buffer();
                          for (std::size_t b = 0; b < ix->size(); ++b)
                            for (std::size_t j = 0; j < n; ++j)
                              for (std::size_t c = 0; c < width; ++c)
                                g[(b * rows + (*ix)[b][j]) * width + c] += out.grad[(b * n + j) * width + c];
                        });
}

template <class T>
Tensor<T> scatter_rows(const Tensor<T>& rows, const Tensor<T>& fill, const std::vector<std::vector<std::size_t>>& pos,
                       std::size_t n_total) {
  if (rows.rank() != 3 || pos.size() != rows.dim(0)) {
    throw DimensionError("scatter_rows: rows must be [B,n,d] matching the position lists, got " +
                         shape_str(rows.shape()));
  }
  const std::size_t batch = rows.dim(0), n = rows.dim(1), d = rows.dim(2);
  if (fill.numel() != d) {
    throw DimensionError("scatter_rows: fill " + shape_str(fill.shape()) + " does not match width " +
                         std::to_string(d));
  }
  // owner[b * n_total + t] = source row j, or n for fill.
  auto owner = std::make_shared<std::vector<std::size_t>>(batch * n_total, n);
  for (std::size_t b = 0; b < batch; ++b) {
    if (pos[b].size() != n) throw DimensionError("scatter_rows: position list length differs from row count");
    for (std::size_t j = 0; j < n; ++j) {
      const auto t = pos[b][j];
      if (t >= n_total || (*owner)[b * n_total + t] != n) {
        throw DimensionError("scatter_rows: position " + std::to_string(t) + " out of range or repeated");
      }
      (*owner)[b * n_total + t] = j;
    }
  }
  std::vector<T> y(batch * n_total * d);
  const auto rv = rows.data();
  const auto fv = fill.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < n_total; ++t) {
      const auto j = (*owner)[b * n_total + t];
      const T* src = j == n ? fv.data() : rv.data() + (b * n + j) * d;
      std::copy_n(src, d, y.data() + (b * n_total + t) * d);
    }
  return make_result<T>(Shape{batch, n_total, d}, std::move(y), "scatter_rows", {&rows, &fill},
                        [owner, n, d, n_total](TensorImpl<T>& out) {
                          auto& pr = parent(out, 0);
                          auto& pf = parent(out, 1);
                          for (std::size_t bt = 0; bt < owner->size(); ++bt) {
                            const auto j = (*owner)[bt];
                            const T* g = out.grad.data() + bt * d;
                            if (j == n) {
                              if (!pf.requires_grad) continue;
                              auto gf = pf.grad_buffer();
                              for (std::size_t c = 0; c < d; ++c) gf[c] += g[c];
                            } else if (pr.requires_grad) {
                              auto gr = pr.grad_buffer();
                              const std::size_t b = bt / n_total;
                              for (std::size_t c = 0; c < d; ++c) gr[(b * n + j) * d + c] += g[c];
                            }
                          }
                        });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::ptrdiff_t dim) {
  const auto ax = split_axis(x.shape(), norm_dim(dim, x.rank(), "softmax"));
  std::vector<T> y(x.numel());
  const auto xv = x.data();
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t i = 0; i < ax.inner; ++i) {
      const std::size_t base = o * ax.len * ax.inner + i;
      T mx = xv[base];
      for (std::size_t l = 1; l < ax.len; ++l) mx = std::max(mx, xv[base + l * ax.inner]);
      T s = 0;
      for (std::size_t l = 0; l < ax.len; ++l) s += (y[base + l * ax.inner] = std::exp(xv[base + l * ax.inner] - mx));
      for (std::size_t l = 0; l < ax.len; ++l) y[base + l * ax.inner] /= s;
    }
  return make_result<T>(x.shape(), std::move(y), "softmax", {&x}, [ax](TensorImpl<T>& out) {
    auto g = parent(out, 0).grad_buffer();
    for (std::size_t o = 0; o < ax.outer; ++o)
      for (std::size_t i = 0; i < ax.inner; ++i) {
        const std::size_t base = o * ax.len * ax.inner + i;
        T dot = 0;
        for (std::size_t l = 0; l < ax.len; ++l) dot += out.grad[base + l * ax.inner] * out.data[base + l * ax.inner];
        for (std::size_t l = 0; l < ax.len; ++l) {
          const auto k = base + l * ax.inner;
          g[k] += out.data[k] * (out.grad[k] - dot);
        }
      }
  });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, std::ptrdiff_t dim) {
  const auto ax = split_axis(x.shape(), norm_dim(dim, x.rank(), "log_softmax"));
  std::vector<T> y(x.numel());
  const auto xv = x.data();
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t i = 0; i < ax.inner; ++i) {
      const std::size_t base = o * ax.len * ax.inner + i;
      T mx = xv[base];
      for (std::size_t l = 1; l < ax.len; ++l) mx = std::max(mx, xv[base + l * ax.inner]);
      T s = 0;
      for (std::size_t l = 0; l < ax.len; ++l) s += std::exp(xv[base + l * ax.inner] - mx);
      const T lse = mx + std::log(s);
      for (std::size_t l = 0; l < ax.len; ++l) y[base + l * ax.inner] = xv[base + l * ax.inner] - lse;
    }
  return make_result<T>(x.shape(), std::move(y), "log_softmax", {&x}, [ax](TensorImpl<T>& out) {
    auto g = parent(out, 0).grad_buffer();
    for (std::size_t o = 0; o < ax.outer; ++o)
      for (std::size_t i = 0; i < ax.inner; ++i) {
        const std::size_t base = o * ax.len * ax.inner + i;
        T gs = 0;
        for (std::size_t l = 0; l < ax.len; ++l) gs += out.grad[base + l * ax.inner];
        for (std::size_t l = 0; l < ax.len; ++l) {
          const auto k = base + l * ax.inner;
          g[k] += out.grad[k] - std::exp(out.data[k]) * gs;
        }
      }
  });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.dim(-1);
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                         " do not match last dim of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  // Saved per-row normalized values and inverse std.
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> y(x.numel());
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (row[c] - mu) * rs;
      (*xhat)[r * d + c] = h;
      y[r * d + c] = h * gv[c] + bv[c];
    }
  }
  return make_result<T>(x.shape(), std::move(y), "layer_norm", {&x, &gain, &bias},
                        [xhat, rstd, d, rows](TensorImpl<T>& out) {
                          auto& px = parent(out, 0);
                          auto& pg = parent(out, 1);
                          auto& pb = parent(out, 2);
                          const auto& g = out.grad;
                          if (pg.requires_grad) {
                            auto gg = pg.grad_buffer();
                            for (std::size_t k = 0; k < g.size(); ++k) gg[k % d] += g[k] * (*xhat)[k];
                          }
                          if (pb.requires_grad) {
                            auto gb = pb.grad_buffer();
                            for (std::size_t k = 0; k < g.size(); ++k) gb[k % d] += g[k];
                          }
                          if (!px.requires_grad) return;
                          auto gx = px.grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r) {
                            T m1 = 0, m2 = 0;
                            for (std::size_t c = 0; c < d; ++c) {
                              const T dh = g[r * d + c] * pg.data[c];
                              m1 += dh;
                              m2 += dh * (*xhat)[r * d + c];
                            }
                            m1 /= static_cast<T>(d);
                            m2 /= static_cast<T>(d);
                            for (std::size_t c = 0; c < d; ++c) {
                              const T dh = g[r * d + c] * pg.data[c];
                              gx[r * d + c] += (*rstd)[r] * (dh - m1 - (*xhat)[r * d + c] * m2);
                            }
                          }
                        });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  std::vector<T> y(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * T(0.5) * (T(1) + std::erf(xv[i] * inv_sqrt2));
  return make_result<T>(x.shape(), std::move(y), "gelu", {&x}, [](TensorImpl<T>& out) {
    constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
    auto& p = parent(out, 0);
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = p.data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      g[i] += out.grad[i] * (cdf + v * pdf);
    }
  });
}

#define MV2MAE_INSTANTIATE(T)                                                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> scale(const Tensor<T>&, T);                                                             \
  template Tensor<T> square(const Tensor<T>&);                                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                                 \
  template Tensor<T> sum(const Tensor<T>&, std::ptrdiff_t);                                                  \
  template Tensor<T> mean(const Tensor<T>&, std::ptrdiff_t);                                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                       \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                             \
  template Tensor<T> transpose(const Tensor<T>&, std::ptrdiff_t, std::ptrdiff_t);                            \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::ptrdiff_t);                                  \
  template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<std::vector<std::size_t>>&);            \
  template Tensor<T> scatter_rows(const Tensor<T>&, const Tensor<T>&, const std::vector<std::vector<std::size_t>>&, \
                                  std::size_t);                                                              \
  template Tensor<T> softmax(const Tensor<T>&, std::ptrdiff_t);                                              \
  template Tensor<T> log_softmax(const Tensor<T>&, std::ptrdiff_t);                                          \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                    \
  template Tensor<T> gelu(const Tensor<T>&);

MV2MAE_INSTANTIATE(float)
MV2MAE_INSTANTIATE(double)

}  // namespace mv2mae
