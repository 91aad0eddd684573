#include "udhf2/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gemm.hpp"

namespace udhf2 {
namespace {

using detail::grad_buffer;
using Impl = std::shared_ptr<TensorImpl>;

std::int64_t norm_axis(std::int64_t axis, std::int64_t rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
  }
  return axis;
}

// (outer, axis, inner) extents around `axis`.
struct AxisSplit {
  std::int64_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::int64_t axis) {
  AxisSplit r;
  for (std::int64_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  detail::require_same_dtype(a, b, op);
}

template <class T>
const T* vals(const Impl& p) {
  return p->values<T>().data();
}

template <class T>
const T* gvals(const Impl& p) {
  return p->grad->values<T>().data();
}

// Elementwise unary op with derivative expressed through input and output.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xp = x.data<T>();
    T* op = out.data<T>();
    const auto n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) op[i] = fwd(xp[i]);
    Impl xi = x.impl_ptr(), oi = out.impl_ptr();
    detail::record({&x}, out, [xi, oi, deriv, n] {
      if (!xi->requires_grad) return;
      const T* g = gvals<T>(oi);
      const T* xv = vals<T>(xi);
      const T* yv = vals<T>(oi);
      T* gx = grad_buffer<T>(*xi);
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
    });
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto n = a.numel();
    const T* ap = a.data<T>();
    const T* bp = b.data<T>();
    T* op = out.data<T>();
    for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
    Impl ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    detail::record({&a, &b}, out, [ai, bi, oi, n] {
      const T* g = gvals<T>(oi);
      if (ai->requires_grad) {
        T* ga = grad_buffer<T>(*ai);
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        T* gb = grad_buffer<T>(*bi);
        for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto n = a.numel();
    const T* ap = a.data<T>();
    const T* bp = b.data<T>();
    T* op = out.data<T>();
    for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] - bp[i];
    Impl ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    detail::record({&a, &b}, out, [ai, bi, oi, n] {
      const T* g = gvals<T>(oi);
      if (ai->requires_grad) {
        T* ga = grad_buffer<T>(*ai);
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        T* gb = grad_buffer<T>(*bi);
        for (std::int64_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto n = a.numel();
    const T* ap = a.data<T>();
    const T* bp = b.data<T>();
    T* op = out.data<T>();
    for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] * bp[i];
    Impl ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    detail::record({&a, &b}, out, [ai, bi, oi, n] {
      const T* g = gvals<T>(oi);
      const T* av = vals<T>(ai);
      const T* bv = vals<T>(bi);
      if (ai->requires_grad) {
        T* ga = grad_buffer<T>(*ai);
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
      }
      if (bi->requires_grad) {
        T* gb = grad_buffer<T>(*bi);
        for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
      }
    });
  });
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto n = a.numel();
    const T* ap = a.data<T>();
    const T* bp = b.data<T>();
    T* op = out.data<T>();
    for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] / bp[i];
    Impl ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    detail::record({&a, &b}, out, [ai, bi, oi, n] {
      const T* g = gvals<T>(oi);
      const T* bv = vals<T>(bi);
      const T* yv = vals<T>(oi);
      if (ai->requires_grad) {
        T* ga = grad_buffer<T>(*ai);
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] / bv[i];
      }
      if (bi->requires_grad) {
        T* gb = grad_buffer<T>(*bi);
        for (std::int64_t i = 0; i < n; ++i) gb[i] -= g[i] * yv[i] / bv[i];
      }
    });
  });
  return out;
}

Tensor add_scalar(const Tensor& x, double value) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T v = static_cast<T>(value);
    return unary(x, [v](T a) { return a + v; }, [](T, T) { return T(1); });
  });
}

Tensor mul_scalar(const Tensor& x, double value) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T v = static_cast<T>(value);
    return unary(x, [v](T a) { return a * v; }, [v](T, T) { return v; });
  });
}

Tensor relu(const Tensor& x) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return unary(x, [](T a) { return a > T(0) ? a : T(0); }, [](T a, T) { return a > T(0) ? T(1) : T(0); });
  });
}

Tensor gelu(const Tensor& x) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
    const T inv_sqrt2pi = static_cast<T>(0.39894228040143267794);
    return unary(
        x, [=](T a) { return T(0.5) * a * (T(1) + std::erf(a * inv_sqrt2)); },
        [=](T a, T) {
          return T(0.5) * (T(1) + std::erf(a * inv_sqrt2)) + a * inv_sqrt2pi * std::exp(T(-0.5) * a * a);
        });
  });
}

Tensor exp(const Tensor& x) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return unary(x, [](T a) { return std::exp(a); }, [](T, T y) { return y; });
  });
}

Tensor log(const Tensor& x) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return unary(x, [](T a) { return std::log(a); }, [](T a, T) { return T(1) / a; });
  });
}

Tensor sigmoid(const Tensor& x) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return unary(
        x,
        [](T a) {
          if (a >= T(0)) return T(1) / (T(1) + std::exp(-a));
          const T e = std::exp(a);
          return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
  });
}

Tensor abs(const Tensor& x) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return unary(x, [](T a) { return std::abs(a); },
                 [](T a, T) { return a > T(0) ? T(1) : (a < T(0) ? T(-1) : T(0)); });
  });
}

Tensor square(const Tensor& x) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return unary(x, [](T a) { return a * a; }, [](T a, T) { return T(2) * a; });
  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw ParameterError("clamp: lo > hi");
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T l = static_cast<T>(lo), h = static_cast<T>(hi);
    return unary(x, [=](T a) { return std::min(std::max(a, l), h); },
                 [=](T a, T) { return (a >= l && a <= h) ? T(1) : T(0); });
  });
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::zeros({}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xp = x.data<T>();
    const auto n = x.numel();
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) acc += xp[i];
    out.data<T>()[0] = acc;
    Impl xi = x.impl_ptr(), oi = out.impl_ptr();
    detail::record({&x}, out, [xi, oi, n] {
      if (!xi->requires_grad) return;
      const T g = gvals<T>(oi)[0];
      T* gx = grad_buffer<T>(*xi);
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  });
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_axis(const Tensor& x, std::int64_t axis) {
  axis = norm_axis(axis, x.rank(), "sum_axis");
  const auto sp = split_at(x.shape(), axis);
  Shape os = x.shape();
  os.erase(os.begin() + axis);
  Tensor out = Tensor::zeros(os, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xp = x.data<T>();
    T* op = out.data<T>();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t a = 0; a < sp.len; ++a)
        for (std::int64_t i = 0; i < sp.inner; ++i) op[o * sp.inner + i] += xp[(o * sp.len + a) * sp.inner + i];
    Impl xi = x.impl_ptr(), oi = out.impl_ptr();
    detail::record({&x}, out, [xi, oi, sp] {
      if (!xi->requires_grad) return;
      const T* g = gvals<T>(oi);
      T* gx = grad_buffer<T>(*xi);
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t a = 0; a < sp.len; ++a)
          for (std::int64_t i = 0; i < sp.inner; ++i) gx[(o * sp.len + a) * sp.inner + i] += g[o * sp.inner + i];
    });
  });
  return out;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  Shape target = shape;
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] == -1) {
      if (infer >= 0) throw DimensionError("reshape: more than one inferred dimension");
      infer = static_cast<int>(i);
    } else {
      known *= target[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0) {
      throw DimensionError("reshape: cannot infer dimension for " + shape_str(shape));
    }
    target[infer] = x.numel() / known;
  }
  if (shape_numel(target) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(target));
  }
  Tensor out = Tensor::zeros(target, x.dtype());
  out.impl().storage = x.impl().storage;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Impl xi = x.impl_ptr(), oi = out.impl_ptr();
    detail::record({&x}, out, [xi, oi] {
      if (!xi->requires_grad) return;
      const T* g = gvals<T>(oi);
      T* gx = grad_buffer<T>(*xi);
      const auto n = xi->numel();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  });
  return out;
}

namespace {

// Flat source index for every flat output index of a permutation.
std::vector<std::int64_t> permute_map(const Shape& in, const std::vector<std::int64_t>& order) {
  const auto r = in.size();
  std::vector<std::int64_t> in_stride(r, 1);
  for (std::int64_t i = static_cast<std::int64_t>(r) - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * in[i + 1];
  Shape out(r);
  std::vector<std::int64_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = in[order[i]];
    stride[i] = in_stride[order[i]];
  }
  const auto n = shape_numel(in);
  std::vector<std::int64_t> map(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t src = 0;
  for (std::int64_t k = 0; k < n; ++k) {
    map[k] = src;
    for (std::int64_t d = static_cast<std::int64_t>(r) - 1; d >= 0; --d) {
      if (++idx[d] < out[d]) {
        src += stride[d];
        break;
      }
      src -= stride[d] * (out[d] - 1);
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::int64_t>& order) {
  const auto r = static_cast<std::size_t>(x.rank());
  if (order.size() != r) throw DimensionError("permute: order length does not match rank");
  std::vector<bool> seen(r, false);
  for (auto o : order) {
    if (o < 0 || o >= static_cast<std::int64_t>(r) || seen[o]) throw DimensionError("permute: invalid order");
    seen[o] = true;
  }
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = x.shape()[order[i]];
  auto map = std::make_shared<std::vector<std::int64_t>>(permute_map(x.shape(), order));
  Tensor out = Tensor::zeros(os, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xp = x.data<T>();
    T* op = out.data<T>();
    const auto n = x.numel();
    for (std::int64_t k = 0; k < n; ++k) op[k] = xp[(*map)[k]];
    Impl xi = x.impl_ptr(), oi = out.impl_ptr();
    detail::record({&x}, out, [xi, oi, map, n] {
      if (!xi->requires_grad) return;
      const T* g = gvals<T>(oi);
      T* gx = grad_buffer<T>(*xi);
      for (std::int64_t k = 0; k < n; ++k) gx[(*map)[k]] += g[k];
    });
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const auto& first = parts.front();
  axis = norm_axis(axis, first.rank(), "concat");
  Shape os = first.shape();
  os[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.rank()) throw DimensionError("concat: rank mismatch");
    detail::require_same_dtype(p, first, "concat");
    for (std::int64_t d = 0; d < first.rank(); ++d) {
      if (d != axis && p.shape()[d] != first.shape()[d]) {
        throw DimensionError("concat: axis " + std::to_string(d) + " mismatch " + shape_str(p.shape()) + " vs " +
                             shape_str(first.shape()));
      }
    }
    os[axis] += p.shape()[axis];
  }
  Tensor out = Tensor::zeros(os, first.dtype());
  const auto sp = split_at(os, axis);
  dispatch(first.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* op = out.data<T>();
    std::vector<std::int64_t> lens;
    std::int64_t base = 0;
    for (const auto& p : parts) {
      const auto len = p.shape()[axis];
      const T* pp = p.data<T>();
      for (std::int64_t o = 0; o < sp.outer; ++o)
        std::copy(pp + o * len * sp.inner, pp + (o + 1) * len * sp.inner, op + (o * sp.len + base) * sp.inner);
      base += len;
      lens.push_back(len);
    }
    std::vector<Impl> ins;
    for (const auto& p : parts) ins.push_back(p.impl_ptr());
    Impl oi = out.impl_ptr();
    detail::record(parts, out, [ins, oi, lens, sp] {
      const T* g = gvals<T>(oi);
      std::int64_t base = 0;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        const auto len = lens[k];
        if (ins[k]->requires_grad) {
          T* gp = grad_buffer<T>(*ins[k]);
          for (std::int64_t o = 0; o < sp.outer; ++o) {
            const T* src = g + (o * sp.len + base) * sp.inner;
            T* dst = gp + o * len * sp.inner;
            for (std::int64_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
          }
        }
        base += len;
      }
    });
  });
  return out;
}

Tensor slice(const Tensor& x, std::int64_t axis, std::int64_t start, std::int64_t length) {
  axis = norm_axis(axis, x.rank(), "slice");
  const auto sp = split_at(x.shape(), axis);
  if (start < 0 || length < 0 || start + length > sp.len) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside axis " + std::to_string(axis) + " of length " + std::to_string(sp.len));
  }
  Shape os = x.shape();
  os[axis] = length;
  Tensor out = Tensor::zeros(os, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xp = x.data<T>();
    T* op = out.data<T>();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      const T* src = xp + (o * sp.len + start) * sp.inner;
      std::copy(src, src + length * sp.inner, op + o * length * sp.inner);
    }
    Impl xi = x.impl_ptr(), oi = out.impl_ptr();
    detail::record({&x}, out, [xi, oi, sp, start, length] {
      if (!xi->requires_grad) return;
      const T* g = gvals<T>(oi);
      T* gx = grad_buffer<T>(*xi);
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        T* dst = gx + (o * sp.len + start) * sp.inner;
        const T* src = g + o * length * sp.inner;
        for (std::int64_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
      }
    });
  });
  return out;
}

Tensor gather(const Tensor& x, std::int64_t axis, const std::vector<std::int64_t>& index, const Shape& index_shape) {
  axis = norm_axis(axis, x.rank(), "gather");
  if (index_shape.size() != x.shape().size()) throw DimensionError("gather: index rank mismatch");
  for (std::size_t d = 0; d < index_shape.size(); ++d) {
    if (static_cast<std::int64_t>(d) != axis && index_shape[d] != x.shape()[d]) {
      throw DimensionError("gather: index axis " + std::to_string(d) + " mismatch");
    }
  }
  if (static_cast<std::int64_t>(index.size()) != shape_numel(index_shape)) {
    throw DimensionError("gather: index length does not match index shape");
  }
  const auto sp = split_at(x.shape(), axis);
  const auto k = index_shape[axis];
  for (auto v : index) {
    if (v < 0 || v >= sp.len) throw DimensionError("gather: index " + std::to_string(v) + " out of range");
  }
  Tensor out = Tensor::zeros(index_shape, x.dtype());
  auto idx = std::make_shared<std::vector<std::int64_t>>(index);
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xp = x.data<T>();
    T* op = out.data<T>();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t a = 0; a < k; ++a)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const auto flat = (o * k + a) * sp.inner + i;
          op[flat] = xp[(o * sp.len + (*idx)[flat]) * sp.inner + i];
        }
    Impl xi = x.impl_ptr(), oi = out.impl_ptr();
    detail::record({&x}, out, [xi, oi, idx, sp, k] {
      if (!xi->requires_grad) return;
      const T* g = gvals<T>(oi);
      T* gx = grad_buffer<T>(*xi);
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t a = 0; a < k; ++a)
          for (std::int64_t i = 0; i < sp.inner; ++i) {
            const auto flat = (o * k + a) * sp.inner + i;
            gx[(o * sp.len + (*idx)[flat]) * sp.inner + i] += g[flat];
          }
    });
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul: expects rank-2 operands");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner axis mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  auto a3 = reshape(a, {1, a.dim(0), a.dim(1)});
  auto b3 = reshape(b, {1, b.dim(0), b.dim(1)});
  auto c = bmm(a3, b3);
  return reshape(c, {a.dim(0), b.dim(1)});
}

Tensor bmm(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() != 3 || b.rank() != 3) throw DimensionError("bmm: expects rank-3 operands");
  detail::require_same_dtype(a, b, "bmm");
  const auto batch = a.dim(0);
  if (b.dim(0) != batch) throw DimensionError("bmm: batch axis 0 mismatch");
  const auto m = ta ? a.dim(2) : a.dim(1);
  const auto k = ta ? a.dim(1) : a.dim(2);
  const auto kb = tb ? b.dim(2) : b.dim(1);
  const auto n = tb ? b.dim(1) : b.dim(2);
  if (k != kb) {
    throw DimensionError("bmm: contraction axis mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({batch, m, n}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* ap = a.data<T>();
    const T* bp = b.data<T>();
    T* cp = out.data<T>();
    for (std::int64_t s = 0; s < batch; ++s) detail::gemm(ta, tb, m, n, k, ap + s * m * k, bp + s * k * n, cp + s * m * n);
    Impl ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    detail::record({&a, &b}, out, [ai, bi, oi, batch, m, n, k, ta, tb] {
      const T* g = gvals<T>(oi);
      const T* av = vals<T>(ai);
      const T* bv = vals<T>(bi);
      if (ai->requires_grad) {
        T* ga = grad_buffer<T>(*ai);
        for (std::int64_t s = 0; s < batch; ++s) {
          if (!ta) {
            detail::gemm(false, !tb, m, k, n, g + s * m * n, bv + s * k * n, ga + s * m * k);
          } else {
            detail::gemm(tb, true, k, m, n, bv + s * k * n, g + s * m * n, ga + s * m * k);
          }
        }
      }
      if (bi->requires_grad) {
        T* gb = grad_buffer<T>(*bi);
        for (std::int64_t s = 0; s < batch; ++s) {
          if (!tb) {
            detail::gemm(!ta, false, k, n, m, av + s * m * k, g + s * m * n, gb + s * k * n);
          } else {
            detail::gemm(true, ta, n, k, m, g + s * m * n, av + s * m * k, gb + s * k * n);
          }
        }
      }
    });
  });
  return out;
}

namespace {

struct ConvGeom {
  std::int64_t n, c, h, w, o, k, oh, ow, stride, pad, groups;
  std::int64_t cg() const { return c / groups; }
  std::int64_t og() const { return o / groups; }
  std::int64_t rows() const { return cg() * k * k; }
  std::int64_t cols() const { return oh * ow; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  for (std::int64_t c = 0; c < g.cg(); ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * g.cols();
        const T* plane = x + c * g.h * g.w;
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = oy * g.stride - g.pad + ky;
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = ox * g.stride - g.pad + kx;
            row[oy * g.ow + ox] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? plane[iy * g.w + ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  for (std::int64_t c = 0; c < g.cg(); ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * g.cols();
        T* plane = x + c * g.h * g.w;
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) plane[iy * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding, int groups) {
  if (input.rank() != 4) throw DimensionError("conv2d: input must be NCHW, got " + shape_str(input.shape()));
  if (weight.rank() != 4) throw DimensionError("conv2d: weight must be OIkk, got " + shape_str(weight.shape()));
  detail::require_same_dtype(input, weight, "conv2d");
  if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
  if (padding < 0) throw ParameterError("conv2d: padding must be >= 0");
  if (groups < 1) throw ParameterError("conv2d: groups must be >= 1");
  ConvGeom g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.o = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = stride;
  g.pad = padding;
  g.groups = groups;
  if (weight.dim(3) != g.k) throw DimensionError("conv2d: weight axis 3 must equal axis 2 (square kernel)");
  if (g.c % groups != 0 || g.o % groups != 0) {
    throw DimensionError("conv2d: channel axis 1 (" + std::to_string(g.c) + ") not divisible by groups");
  }
  if (weight.dim(1) != g.cg()) {
    throw DimensionError("conv2d: channel axis 1 mismatch: input has " + std::to_string(g.c) + " channels, weight expects " +
                         std::to_string(weight.dim(1) * groups));
  }
  if (g.h + 2 * g.pad < g.k) throw DimensionError("conv2d: height axis 2 smaller than kernel");
  if (g.w + 2 * g.pad < g.k) throw DimensionError("conv2d: width axis 3 smaller than kernel");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.o)) {
    throw DimensionError("conv2d: bias axis 0 must equal output channels");
  }
  g.oh = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.k) / g.stride + 1;

  Tensor out = Tensor::zeros({g.n, g.o, g.oh, g.ow}, input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* x = input.data<T>();
    const T* wt = weight.data<T>();
    T* y = out.data<T>();
    std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(g.rows() * g.cols()));
    for (std::int64_t b = 0; b < g.n; ++b)
      for (std::int64_t gi = 0; gi < g.groups; ++gi) {
        const T* xs = x + (b * g.c + gi * g.cg()) * g.h * g.w;
        const T* src = xs;
        if (!g.pointwise()) {
          im2col(xs, g, col.data());
          src = col.data();
        }
        detail::gemm(false, false, g.og(), g.cols(), g.rows(), wt + gi * g.og() * g.rows(), src,
                     y + (b * g.o + gi * g.og()) * g.cols());
      }
    if (bias.defined()) {
      const T* bp = bias.data<T>();
      for (std::int64_t b = 0; b < g.n; ++b)
        for (std::int64_t o = 0; o < g.o; ++o) {
          T* plane = y + (b * g.o + o) * g.cols();
          for (std::int64_t i = 0; i < g.cols(); ++i) plane[i] += bp[o];
        }
    }
    Impl xi = input.impl_ptr(), wi = weight.impl_ptr(), oi = out.impl_ptr();
    Impl bi = bias.defined() ? bias.impl_ptr() : nullptr;
    detail::record({&input, &weight, &bias}, out, [xi, wi, bi, oi, g] {
      const T* dy = gvals<T>(oi);
      const T* x = vals<T>(xi);
      const T* wt = vals<T>(wi);
      if (bi && bi->requires_grad) {
        T* gb = grad_buffer<T>(*bi);
        for (std::int64_t b = 0; b < g.n; ++b)
          for (std::int64_t o = 0; o < g.o; ++o) {
            const T* plane = dy + (b * g.o + o) * g.cols();
            T acc = T(0);
            for (std::int64_t i = 0; i < g.cols(); ++i) acc += plane[i];
            gb[o] += acc;
          }
      }
      const bool need_w = wi->requires_grad;
      const bool need_x = xi->requires_grad;
      if (!need_w && !need_x) return;
      T* gw = need_w ? grad_buffer<T>(*wi) : nullptr;
      T* gx = need_x ? grad_buffer<T>(*xi) : nullptr;
      std::vector<T> col(static_cast<std::size_t>(g.rows() * g.cols()));
      for (std::int64_t b = 0; b < g.n; ++b)
        for (std::int64_t gi = 0; gi < g.groups; ++gi) {
          const T* dys = dy + (b * g.o + gi * g.og()) * g.cols();
          const std::int64_t xoff = (b * g.c + gi * g.cg()) * g.h * g.w;
          if (need_w) {
            const T* src = x + xoff;
            if (!g.pointwise()) {
              im2col(x + xoff, g, col.data());
              src = col.data();
            }
            detail::gemm(false, true, g.og(), g.rows(), g.cols(), dys, src, gw + gi * g.og() * g.rows());
          }
          if (need_x) {
            if (g.pointwise()) {
              detail::gemm(true, false, g.rows(), g.cols(), g.og(), wt + gi * g.og() * g.rows(), dys, gx + xoff);
            } else {
              std::fill(col.begin(), col.end(), T(0));
              detail::gemm(true, false, g.rows(), g.cols(), g.og(), wt + gi * g.og() * g.rows(), dys, col.data());
              col2im(col.data(), g, gx + xoff);
            }
          }
        }
    });
  });
  return out;
}

namespace {

struct Lerp {
  std::int64_t i0, i1;
  double frac;
};

// align_corners = false source coordinates, clamped at the borders.
std::vector<Lerp> lerp_table(std::int64_t in, std::int64_t out) {
  std::vector<Lerp> t(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const auto i1 = std::min(i0 + 1, in - 1);
    t[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return t;
}

}  // namespace

Tensor resize_to(const Tensor& input, std::int64_t out_h, std::int64_t out_w) {
  if (input.rank() != 4) throw DimensionError("resize: input must be NCHW, got " + shape_str(input.shape()));
  if (out_h < 1 || out_w < 1) throw ParameterError("resize: output size must be >= 1");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (out_h == h && out_w == w) {
    // Identity; keep a distinct node so callers can mutate freely.
    return add_scalar(input, 0.0);
  }
  auto ty = std::make_shared<std::vector<Lerp>>(lerp_table(h, out_h));
  auto tx = std::make_shared<std::vector<Lerp>>(lerp_table(w, out_w));
  Tensor out = Tensor::zeros({n, c, out_h, out_w}, input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* x = input.data<T>();
    T* y = out.data<T>();
    for (std::int64_t p = 0; p < n * c; ++p) {
      const T* src = x + p * h * w;
      T* dst = y + p * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const auto& ly = (*ty)[oy];
        const T fy = static_cast<T>(ly.frac);
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const auto& lx = (*tx)[ox];
          const T fx = static_cast<T>(lx.frac);
          const T top = src[ly.i0 * w + lx.i0] * (T(1) - fx) + src[ly.i0 * w + lx.i1] * fx;
          const T bot = src[ly.i1 * w + lx.i0] * (T(1) - fx) + src[ly.i1 * w + lx.i1] * fx;
          dst[oy * out_w + ox] = top * (T(1) - fy) + bot * fy;
        }
      }
    }
    Impl xi = input.impl_ptr(), oi = out.impl_ptr();
    detail::record({&input}, out, [xi, oi, ty, tx, n, c, h, w, out_h, out_w] {
      if (!xi->requires_grad) return;
      const T* g = gvals<T>(oi);
      T* gx = grad_buffer<T>(*xi);
      for (std::int64_t p = 0; p < n * c; ++p) {
        const T* src = g + p * out_h * out_w;
        T* dst = gx + p * h * w;
        for (std::int64_t oy = 0; oy < out_h; ++oy) {
          const auto& ly = (*ty)[oy];
          const T fy = static_cast<T>(ly.frac);
          for (std::int64_t ox = 0; ox < out_w; ++ox) {
            const auto& lx = (*tx)[ox];
            const T fx = static_cast<T>(lx.frac);
            const T v = src[oy * out_w + ox];
            dst[ly.i0 * w + lx.i0] += v * (T(1) - fy) * (T(1) - fx);
            dst[ly.i0 * w + lx.i1] += v * (T(1) - fy) * fx;
            dst[ly.i1 * w + lx.i0] += v * fy * (T(1) - fx);
            dst[ly.i1 * w + lx.i1] += v * fy * fx;
          }
        }
      }
    });
  });
  return out;
}

Tensor bilinear_resize(const Tensor& input, double scale) {
  if (!(scale > 0.0)) throw ParameterError("bilinear_resize: scale must be positive");
  if (input.rank() != 4) throw DimensionError("bilinear_resize: input must be NCHW");
  const auto oh = static_cast<std::int64_t>(std::floor(static_cast<double>(input.dim(2)) * scale + 1e-9));
  const auto ow = static_cast<std::int64_t>(std::floor(static_cast<double>(input.dim(3)) * scale + 1e-9));
  if (oh < 1 || ow < 1) throw ParameterError("bilinear_resize: scale produces empty output");
  return resize_to(input, oh, ow);
}

Tensor softmax(const Tensor& x, std::int64_t axis) {
  axis = norm_axis(axis, x.rank(), "softmax");
  const auto sp = split_at(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xp = x.data<T>();
    T* yp = out.data<T>();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const auto base = o * sp.len * sp.inner + i;
        T mx = xp[base];
        for (std::int64_t a = 1; a < sp.len; ++a) mx = std::max(mx, xp[base + a * sp.inner]);
        T total = T(0);
        for (std::int64_t a = 0; a < sp.len; ++a) {
          const T e = std::exp(xp[base + a * sp.inner] - mx);
          yp[base + a * sp.inner] = e;
          total += e;
        }
        for (std::int64_t a = 0; a < sp.len; ++a) yp[base + a * sp.inner] /= total;
      }
    Impl xi = x.impl_ptr(), oi = out.impl_ptr();
    detail::record({&x}, out, [xi, oi, sp] {
      if (!xi->requires_grad) return;
      const T* g = gvals<T>(oi);
      const T* y = vals<T>(oi);
      T* gx = grad_buffer<T>(*xi);
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const auto base = o * sp.len * sp.inner + i;
          T dot = T(0);
          for (std::int64_t a = 0; a < sp.len; ++a) dot += g[base + a * sp.inner] * y[base + a * sp.inner];
          for (std::int64_t a = 0; a < sp.len; ++a) {
            const auto k = base + a * sp.inner;
            gx[k] += y[k] * (g[k] - dot);
          }
        }
    });
  });
  return out;
}

Tensor log_softmax(const Tensor& x, std::int64_t axis) {
  axis = norm_axis(axis, x.rank(), "log_softmax");
  const auto sp = split_at(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xp = x.data<T>();
    T* yp = out.data<T>();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const auto base = o * sp.len * sp.inner + i;
        T mx = xp[base];
        for (std::int64_t a = 1; a < sp.len; ++a) mx = std::max(mx, xp[base + a * sp.inner]);
        T total = T(0);
        for (std::int64_t a = 0; a < sp.len; ++a) total += std::exp(xp[base + a * sp.inner] - mx);
        const T lse = mx + std::log(total);
        for (std::int64_t a = 0; a < sp.len; ++a) yp[base + a * sp.inner] = xp[base + a * sp.inner] - lse;
      }
    Impl xi = x.impl_ptr(), oi = out.impl_ptr();
    detail::record({&x}, out, [xi, oi, sp] {
      if (!xi->requires_grad) return;
      const T* g = gvals<T>(oi);
      const T* y = vals<T>(oi);
      T* gx = grad_buffer<T>(*xi);
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const auto base = o * sp.len * sp.inner + i;
          T total = T(0);
          for (std::int64_t a = 0; a < sp.len; ++a) total += g[base + a * sp.inner];
          for (std::int64_t a = 0; a < sp.len; ++a) {
            const auto k = base + a * sp.inner;
            gx[k] += g[k] - std::exp(y[k]) * total;
          }
        }
    });
  });
  return out;
}

Tensor layer_norm(const Tensor& x, std::int64_t axis, const Tensor& gamma, const Tensor& beta, double eps) {
  axis = norm_axis(axis, x.rank(), "layer_norm");
  const auto sp = split_at(x.shape(), axis);
  if (sp.len < 1) throw DimensionError("layer_norm: feature axis is empty");
  if (gamma.numel() != sp.len || beta.numel() != sp.len) {
    throw DimensionError("layer_norm: affine length must equal axis " + std::to_string(axis) + " (" +
                         std::to_string(sp.len) + ")");
  }
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  const auto groups = sp.outer * sp.inner;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(groups));
    const T* xp = x.data<T>();
    const T* gp = gamma.data<T>();
    const T* bp = beta.data<T>();
    T* yp = out.data<T>();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const auto base = o * sp.len * sp.inner + i;
        T m = T(0);
        for (std::int64_t a = 0; a < sp.len; ++a) m += xp[base + a * sp.inner];
        m /= static_cast<T>(sp.len);
        T v = T(0);
        for (std::int64_t a = 0; a < sp.len; ++a) {
          const T d = xp[base + a * sp.inner] - m;
          v += d * d;
        }
        v /= static_cast<T>(sp.len);
        const T is = T(1) / std::sqrt(v + static_cast<T>(eps));
        (*inv_std)[o * sp.inner + i] = is;
        for (std::int64_t a = 0; a < sp.len; ++a) {
          const auto k = base + a * sp.inner;
          const T xh = (xp[k] - m) * is;
          (*xhat)[k] = xh;
          yp[k] = xh * gp[a] + bp[a];
        }
      }
    Impl xi = x.impl_ptr(), gi = gamma.impl_ptr(), bi = beta.impl_ptr(), oi = out.impl_ptr();
    detail::record({&x, &gamma, &beta}, out, [xi, gi, bi, oi, xhat, inv_std, sp] {
      const T* g = gvals<T>(oi);
      const T* gam = vals<T>(gi);
      if (gi->requires_grad || bi->requires_grad) {
        T* gg = gi->requires_grad ? grad_buffer<T>(*gi) : nullptr;
        T* gb = bi->requires_grad ? grad_buffer<T>(*bi) : nullptr;
        for (std::int64_t o = 0; o < sp.outer; ++o)
          for (std::int64_t a = 0; a < sp.len; ++a)
            for (std::int64_t i = 0; i < sp.inner; ++i) {
              const auto k = (o * sp.len + a) * sp.inner + i;
              if (gg) gg[a] += g[k] * (*xhat)[k];
              if (gb) gb[a] += g[k];
            }
      }
      if (!xi->requires_grad) return;
      T* gx = grad_buffer<T>(*xi);
      const T inv_n = T(1) / static_cast<T>(sp.len);
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const auto base = o * sp.len * sp.inner + i;
          T s1 = T(0), s2 = T(0);
          for (std::int64_t a = 0; a < sp.len; ++a) {
            const auto k = base + a * sp.inner;
            const T gh = g[k] * gam[a];
            s1 += gh;
            s2 += gh * (*xhat)[k];
          }
          const T is = (*inv_std)[o * sp.inner + i];
          for (std::int64_t a = 0; a < sp.len; ++a) {
            const auto k = base + a * sp.inner;
            const T gh = g[k] * gam[a];
            gx[k] += is * (gh - s1 * inv_n - (*xhat)[k] * s2 * inv_n);
          }
        }
    });
  });
  return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean, Tensor& running_var,
                  bool training, double momentum, double eps) {
  if (x.rank() < 2) throw DimensionError("batch_norm: input needs a channel axis 1");
  const auto n = x.dim(0), c = x.dim(1);
  std::int64_t inner = 1;
  for (std::int64_t d = 2; d < x.rank(); ++d) inner *= x.dim(d);
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c) {
    throw DimensionError("batch_norm: parameter length must equal channel axis 1 (" + std::to_string(c) + ")");
  }
  const auto count = n * inner;
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
    const T* xp = x.data<T>();
    const T* gp = gamma.data<T>();
    const T* bp = beta.data<T>();
    T* rm = running_mean.data<T>();
    T* rv = running_var.data<T>();
    T* yp = out.data<T>();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T m, v;
      if (training) {
        m = T(0);
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t i = 0; i < inner; ++i) m += xp[(b * c + ch) * inner + i];
        m /= static_cast<T>(count);
        v = T(0);
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t i = 0; i < inner; ++i) {
            const T d = xp[(b * c + ch) * inner + i] - m;
            v += d * d;
          }
        v /= static_cast<T>(count);
        const T unbiased = count > 1 ? v * static_cast<T>(count) / static_cast<T>(count - 1) : v;
        const T mom = static_cast<T>(momentum);
        rm[ch] = (T(1) - mom) * rm[ch] + mom * m;
        rv[ch] = (T(1) - mom) * rv[ch] + mom * unbiased;
      } else {
        m = rm[ch];
        v = rv[ch];
      }
      const T is = T(1) / std::sqrt(v + static_cast<T>(eps));
      (*inv_std)[ch] = is;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t i = 0; i < inner; ++i) {
          const auto k = (b * c + ch) * inner + i;
          const T xh = (xp[k] - m) * is;
          (*xhat)[k] = xh;
          yp[k] = xh * gp[ch] + bp[ch];
        }
    }
    Impl xi = x.impl_ptr(), gi = gamma.impl_ptr(), bi = beta.impl_ptr(), oi = out.impl_ptr();
    detail::record({&x, &gamma, &beta}, out, [xi, gi, bi, oi, xhat, inv_std, n, c, inner, count, training] {
      const T* g = gvals<T>(oi);
      const T* gam = vals<T>(gi);
      T* gg = gi->requires_grad ? grad_buffer<T>(*gi) : nullptr;
      T* gb = bi->requires_grad ? grad_buffer<T>(*bi) : nullptr;
      T* gx = xi->requires_grad ? grad_buffer<T>(*xi) : nullptr;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        T s1 = T(0), s2 = T(0);
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t i = 0; i < inner; ++i) {
            const auto k = (b * c + ch) * inner + i;
            s1 += g[k];
            s2 += g[k] * (*xhat)[k];
          }
        if (gg) gg[ch] += s2;
        if (gb) gb[ch] += s1;
        if (!gx) continue;
        const T is = (*inv_std)[ch];
        const T inv_n = T(1) / static_cast<T>(count);
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t i = 0; i < inner; ++i) {
            const auto k = (b * c + ch) * inner + i;
            if (training) {
              gx[k] += gam[ch] * is * (g[k] - s1 * inv_n - (*xhat)[k] * s2 * inv_n);
            } else {
              gx[k] += gam[ch] * is * g[k];
            }
          }
      }
    });
  });
  return out;
}

namespace {

// Bilinear read with zero padding, plus the weights needed for backward.
template <class T>
struct Tap {
  std::int64_t idx[4];
  T w[4];
  bool valid[4];
  T ly, lx;
};

template <class T>
bool make_tap(T py, T px, std::int64_t h, std::int64_t w, Tap<T>& tap) {
  if (py <= T(-1) || py >= static_cast<T>(h) || px <= T(-1) || px >= static_cast<T>(w)) return false;
  const auto y0 = static_cast<std::int64_t>(std::floor(py));
  const auto x0 = static_cast<std::int64_t>(std::floor(px));
  tap.ly = py - static_cast<T>(y0);
  tap.lx = px - static_cast<T>(x0);
  const std::int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const std::int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const T hy = T(1) - tap.ly, hx = T(1) - tap.lx;
  const T ws[4] = {hy * hx, hy * tap.lx, tap.ly * hx, tap.ly * tap.lx};
  for (int q = 0; q < 4; ++q) {
    tap.valid[q] = ys[q] >= 0 && ys[q] < h && xs[q] >= 0 && xs[q] < w;
    tap.idx[q] = tap.valid[q] ? ys[q] * w + xs[q] : 0;
    tap.w[q] = ws[q];
  }
  return true;
}

}  // namespace

Tensor deformable_sample(const Tensor& input, const Tensor& offsets, const Tensor& modulation, int groups) {
  if (input.rank() != 4) throw DimensionError("deformable_sample: input must be NCHW");
  detail::require_same_dtype(input, offsets, "deformable_sample");
  detail::require_same_dtype(input, modulation, "deformable_sample");
  const auto n = input.dim(0), e = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (groups < 1 || e % groups != 0) {
    throw DimensionError("deformable_sample: channel axis 1 (" + std::to_string(e) + ") not divisible by groups");
  }
  const Shape off_shape{n, 2LL * groups * kDeformPoints, h, w};
  const Shape mod_shape{n, static_cast<std::int64_t>(groups) * kDeformPoints, h, w};
  if (offsets.shape() != off_shape) {
    throw DimensionError("deformable_sample: offsets must be " + shape_str(off_shape) + ", got " +
                         shape_str(offsets.shape()));
  }
  if (modulation.shape() != mod_shape) {
    throw DimensionError("deformable_sample: modulation must be " + shape_str(mod_shape) + ", got " +
                         shape_str(modulation.shape()));
  }
  const auto eg = e / groups;
  const auto hw = h * w;
  Tensor out = Tensor::zeros(input.shape(), input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* x = input.data<T>();
    const T* off = offsets.data<T>();
    const T* mod = modulation.data<T>();
    T* y = out.data<T>();
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t t = 0; t < groups; ++t)
        for (int p = 0; p < kDeformPoints; ++p) {
          const int ky = p / 3 - 1, kx = p % 3 - 1;
          const auto q = t * kDeformPoints + p;
          const T* dx = off + (b * 2 * groups * kDeformPoints + 2 * q) * hw;
          const T* dy = dx + hw;
          const T* m = mod + (b * groups * kDeformPoints + q) * hw;
          for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t s = 0; s < w; ++s) {
              const auto pix = r * w + s;
              Tap<T> tap;
              if (!make_tap<T>(static_cast<T>(r + ky) + dy[pix], static_cast<T>(s + kx) + dx[pix], h, w, tap)) continue;
              for (std::int64_t ch = 0; ch < eg; ++ch) {
                const auto plane = (b * e + t * eg + ch) * hw;
                T v = T(0);
                for (int c4 = 0; c4 < 4; ++c4)
                  if (tap.valid[c4]) v += tap.w[c4] * x[plane + tap.idx[c4]];
                y[plane + pix] += m[pix] * v;
              }
            }
        }
    Impl xi = input.impl_ptr(), oi_off = offsets.impl_ptr(), mi = modulation.impl_ptr(), oi = out.impl_ptr();
    detail::record({&input, &offsets, &modulation}, out, [xi, oi_off, mi, oi, n, e, h, w, groups, eg, hw] {
      const T* g = gvals<T>(oi);
      const T* x = vals<T>(xi);
      const T* off = vals<T>(oi_off);
      const T* mod = vals<T>(mi);
      T* gx = xi->requires_grad ? grad_buffer<T>(*xi) : nullptr;
      T* goff = oi_off->requires_grad ? grad_buffer<T>(*oi_off) : nullptr;
      T* gmod = mi->requires_grad ? grad_buffer<T>(*mi) : nullptr;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t t = 0; t < groups; ++t)
          for (int p = 0; p < kDeformPoints; ++p) {
            const int ky = p / 3 - 1, kx = p % 3 - 1;
            const auto q = t * kDeformPoints + p;
            const auto dx_base = (b * 2 * groups * kDeformPoints + 2 * q) * hw;
            const auto dy_base = dx_base + hw;
            const auto m_base = (b * groups * kDeformPoints + q) * hw;
            for (std::int64_t r = 0; r < h; ++r)
              for (std::int64_t s = 0; s < w; ++s) {
                const auto pix = r * w + s;
                Tap<T> tap;
                if (!make_tap<T>(static_cast<T>(r + ky) + off[dy_base + pix], static_cast<T>(s + kx) + off[dx_base + pix],
                                 h, w, tap)) {
                  continue;
                }
                const T mval = mod[m_base + pix];
                T gm = T(0), gcy = T(0), gcx = T(0);
                for (std::int64_t ch = 0; ch < eg; ++ch) {
                  const auto plane = (b * e + t * eg + ch) * hw;
                  const T go = g[plane + pix];
                  if (go == T(0)) continue;
                  T corner[4];
                  T v = T(0);
                  for (int c4 = 0; c4 < 4; ++c4) {
                    corner[c4] = tap.valid[c4] ? x[plane + tap.idx[c4]] : T(0);
                    v += tap.w[c4] * corner[c4];
                  }
                  gm += go * v;
                  // d(bilinear)/dy and /dx from the four corners.
                  const T dvy = (T(1) - tap.lx) * (corner[2] - corner[0]) + tap.lx * (corner[3] - corner[1]);
                  const T dvx = (T(1) - tap.ly) * (corner[1] - corner[0]) + tap.ly * (corner[3] - corner[2]);
                  gcy += go * mval * dvy;
                  gcx += go * mval * dvx;
                  if (gx) {
                    for (int c4 = 0; c4 < 4; ++c4)
                      if (tap.valid[c4]) gx[plane + tap.idx[c4]] += go * mval * tap.w[c4];
                  }
                }
                if (gmod) gmod[m_base + pix] += gm;
                if (goff) {
                  goff[dx_base + pix] += gcx;
                  goff[dy_base + pix] += gcy;
                }
              }
          }
    });
  });
  return out;
}

}  // namespace udhf2
