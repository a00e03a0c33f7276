#include "attnreg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace attnreg {
namespace {

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw DimensionError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                         dtype_name(b.dtype()) + ")");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_same_dtype(a, b, op);
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void require_2d(const Tensor& a, const char* op) {
  if (a.ndim() != 2)
    throw DimensionError(std::string(op) + ": expected a 2-d tensor, got " + shape_str(a.shape()));
}

Tensor finish(Tensor t, const char* op) {
  require_finite(t, op);
  return t;
}

template <class T>
Tensor make(Shape shape, std::vector<T> data) {
  return Tensor::from_vector(std::move(shape), std::move(data));
}

// C[m,n] += A[m,k] B[k,n]
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <class T>
std::vector<T> transpose_buf(std::size_t rows, std::size_t cols, const T* src) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
  return out;
}

template <class F>
Tensor map_unary(const Tensor& x, F&& f) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    std::vector<T> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = f(src[i]);
    return make<T>(x.shape(), std::move(out));
  });
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F&& f) {
  return dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>();
    auto y = b.data<T>();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
    return make<T>(a.shape(), std::move(out));
  });
}

std::size_t row_length(const Tensor& x, const Tensor& row, const char* op) {
  require_2d(x, op);
  require_same_dtype(x, row, op);
  if (row.numel() != x.dim(1))
    throw DimensionError(std::string(op) + ": row of " + std::to_string(row.numel()) +
                         " elements does not broadcast over " + shape_str(x.shape()));
  return x.dim(1);
}

// Sums x [m,n] over rows into a tensor shaped like `like`.
Tensor column_sums(const Tensor& x, const Tensor& like) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto m = x.dim(0), n = x.dim(1);
    auto src = x.data<T>();
    std::vector<T> out(n, T(0));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j] += src[i * n + j];
    return make<T>(like.shape(), std::move(out));
  });
}

// One separable blur pass along rows (axis 1) or columns (axis 0).
template <class T>
std::vector<T> blur_pass(std::span<const T> src, std::size_t h, std::size_t w,
                         const std::vector<double>& taps, bool along_cols, bool adjoint) {
  const long r = static_cast<long>(taps.size() / 2);
  std::vector<T> out(src.size(), T(0));
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t idx = i * w + j;
      for (long k = -r; k <= r; ++k) {
        const T wk = static_cast<T>(taps[static_cast<std::size_t>(k + r)]);
        std::size_t nb;
        if (along_cols)
          nb = reflect_index(static_cast<long>(i) + k, h) * w + j;
        else
          nb = i * w + reflect_index(static_cast<long>(j) + k, w);
        if (adjoint)
          out[nb] += wk * src[idx];
        else
          out[idx] += wk * src[nb];
      }
    }
  }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  require_same_dtype(a, b, "matmul");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> c(m * n, T(0));
    gemm_nn<T>(m, k, n, a.data<T>().data(), b.data<T>().data(), c.data());
    return make<T>({m, n}, std::move(c));
  });
  out = finish(std::move(out), "matmul");
  return record_op(std::move(out), {&a, &b},
                   [a = a.detached(), b = b.detached()](const Tensor& g, const std::vector<bool>& needs) {
                     std::vector<Tensor> grads(2);
                     if (needs[0]) grads[0] = matmul_nt(g, b);
                     if (needs[1]) grads[1] = matmul(transpose(a), g);
                     return grads;
                   });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  require_same_dtype(a, b, "matmul_nt");
  if (a.dim(1) != b.dim(1))
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out = dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto bt = transpose_buf<T>(n, k, b.data<T>().data());
    std::vector<T> c(m * n, T(0));
    gemm_nn<T>(m, k, n, a.data<T>().data(), bt.data(), c.data());
    return make<T>({m, n}, std::move(c));
  });
  out = finish(std::move(out), "matmul_nt");
  return record_op(std::move(out), {&a, &b},
                   [a = a.detached(), b = b.detached()](const Tensor& g, const std::vector<bool>& needs) {
                     std::vector<Tensor> grads(2);
                     if (needs[0]) grads[0] = matmul(g, b);
                     if (needs[1]) grads[1] = matmul(transpose(g), a);
                     return grads;
                   });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const auto m = a.dim(0), n = a.dim(1);
  Tensor out = dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return make<T>({n, m}, transpose_buf<T>(m, n, a.data<T>().data()));
  });
  return record_op(std::move(out), {&a}, [](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{transpose(g)};
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = finish(map_binary(a, b, [](auto x, auto y) { return x + y; }), "add");
  return record_op(std::move(out), {&a, &b}, [](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{g, g};
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = finish(map_binary(a, b, [](auto x, auto y) { return x - y; }), "sub");
  return record_op(std::move(out), {&a, &b}, [](const Tensor& g, const std::vector<bool>& needs) {
    std::vector<Tensor> grads(2);
    grads[0] = g;
    if (needs[1]) grads[1] = scale(g, -1.0);
    return grads;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = finish(map_binary(a, b, [](auto x, auto y) { return x * y; }), "mul");
  return record_op(std::move(out), {&a, &b},
                   [a = a.detached(), b = b.detached()](const Tensor& g, const std::vector<bool>& needs) {
                     std::vector<Tensor> grads(2);
                     if (needs[0]) grads[0] = mul(g, b);
                     if (needs[1]) grads[1] = mul(g, a);
                     return grads;
                   });
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = finish(map_unary(a, [s](auto x) { return static_cast<decltype(x)>(x * s); }), "scale");
  return record_op(std::move(out), {&a}, [s](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{scale(g, s)};
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out =
      finish(map_unary(a, [s](auto x) { return static_cast<decltype(x)>(x + s); }), "add_scalar");
  return record_op(std::move(out), {&a}, [](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{g};
  });
}

Tensor silu(const Tensor& x) {
  Tensor out = finish(map_unary(x,
                                [](auto v) {
                                  using T = decltype(v);
                                  return v / (T(1) + std::exp(-v));
                                }),
                      "silu");
  return record_op(std::move(out), {&x}, [x = x.detached()](const Tensor& g, const std::vector<bool>&) {
    Tensor d = map_unary(x, [](auto v) {
      using T = decltype(v);
      const T s = T(1) / (T(1) + std::exp(-v));
      return s * (T(1) + v * (T(1) - s));
    });
    return std::vector<Tensor>{mul(g, d)};
  });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  const auto n = row_length(x, row, "add_row");
  Tensor out = dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    auto r = row.data<T>();
    std::vector<T> o(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) o[i] = src[i] + r[i % n];
    return make<T>(x.shape(), std::move(o));
  });
  out = finish(std::move(out), "add_row");
  return record_op(std::move(out), {&x, &row},
                   [row = row.detached()](const Tensor& g, const std::vector<bool>& needs) {
                     std::vector<Tensor> grads(2);
                     grads[0] = g;
                     if (needs[1]) grads[1] = column_sums(g, row);
                     return grads;
                   });
}

Tensor mul_row(const Tensor& x, const Tensor& row) {
  const auto n = row_length(x, row, "mul_row");
  Tensor out = dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    auto r = row.data<T>();
    std::vector<T> o(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) o[i] = src[i] * r[i % n];
    return make<T>(x.shape(), std::move(o));
  });
  out = finish(std::move(out), "mul_row");
  return record_op(std::move(out), {&x, &row},
                   [x = x.detached(), row = row.detached()](const Tensor& g, const std::vector<bool>& needs) {
                     std::vector<Tensor> grads(2);
                     if (needs[0]) grads[0] = mul_row(g, row);
                     if (needs[1]) grads[1] = column_sums(mul(g, x), row);
                     return grads;
                   });
}

Tensor softmax_rows(const Tensor& x, double scale_factor) {
  require_2d(x, "softmax_rows");
  if (!(scale_factor > 0)) throw std::invalid_argument("softmax_rows: scale must be positive");
  require_finite(x, "softmax_rows input");
  const auto m = x.dim(0), n = x.dim(1);
  Tensor out = dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    const T s = static_cast<T>(scale_factor);
    std::vector<T> y(src.size());
    for (std::size_t i = 0; i < m; ++i) {
      const T* row = src.data() + i * n;
      T* dst = y.data() + i * n;
      T mx = row[0];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        dst[j] = std::exp(s * (row[j] - mx));
        total += dst[j];
      }
      const T inv = T(1) / total;
      for (std::size_t j = 0; j < n; ++j) dst[j] *= inv;
    }
    return make<T>(x.shape(), std::move(y));
  });
  out = finish(std::move(out), "softmax_rows");
  const Tensor saved = out.detached();
  return record_op(std::move(out), {&x},
                   [y = saved, scale_factor](const Tensor& g, const std::vector<bool>&) {
                     Tensor dx = dispatch(y.dtype(), [&](auto tag) {
                       using T = decltype(tag);
                       const auto m = y.dim(0), n = y.dim(1);
                       auto yv = y.data<T>();
                       auto gv = g.data<T>();
                       std::vector<T> d(yv.size());
                       for (std::size_t i = 0; i < m; ++i) {
                         T dot = 0;
                         for (std::size_t j = 0; j < n; ++j) dot += gv[i * n + j] * yv[i * n + j];
                         for (std::size_t j = 0; j < n; ++j)
                           d[i * n + j] = static_cast<T>(scale_factor) * yv[i * n + j] *
                                          (gv[i * n + j] - dot);
                       }
                       return make<T>(y.shape(), std::move(d));
                     });
                     return std::vector<Tensor>{std::move(dx)};
                   });
}

Tensor layer_norm_rows(const Tensor& x, double eps) {
  require_2d(x, "layer_norm_rows");
  const auto m = x.dim(0), n = x.dim(1);
  // Output and per-row inverse std are both needed by the backward pass.
  Tensor inv_std;
  Tensor out = dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    std::vector<T> y(src.size());
    std::vector<T> istd(m);
    for (std::size_t i = 0; i < m; ++i) {
      const T* row = src.data() + i * n;
      T mu = 0;
      for (std::size_t j = 0; j < n; ++j) mu += row[j];
      mu /= static_cast<T>(n);
      T var = 0;
      for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<T>(n);
      const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
      istd[i] = is;
      for (std::size_t j = 0; j < n; ++j) y[i * n + j] = (row[j] - mu) * is;
    }
    inv_std = make<T>({m}, std::move(istd));
    return make<T>(x.shape(), std::move(y));
  });
  out = finish(std::move(out), "layer_norm_rows");
  const Tensor saved = out.detached();
  return record_op(
      std::move(out), {&x},
      [y = saved, inv_std](const Tensor& g, const std::vector<bool>&) {
        Tensor dx = dispatch(y.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const auto m = y.dim(0), n = y.dim(1);
          auto yv = y.data<T>();
          auto gv = g.data<T>();
          auto is = inv_std.data<T>();
          std::vector<T> d(yv.size());
          for (std::size_t i = 0; i < m; ++i) {
            T mg = 0, mgy = 0;
            for (std::size_t j = 0; j < n; ++j) {
              mg += gv[i * n + j];
              mgy += gv[i * n + j] * yv[i * n + j];
            }
            mg /= static_cast<T>(n);
            mgy /= static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j)
              d[i * n + j] = is[i] * (gv[i * n + j] - mg - yv[i * n + j] * mgy);
          }
          return make<T>(y.shape(), std::move(d));
        });
        return std::vector<Tensor>{std::move(dx)};
      });
}

Tensor sum(const Tensor& x) {
  Tensor out = dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    const T total = std::accumulate(src.begin(), src.end(), T(0));
    return make<T>({1}, std::vector<T>{total});
  });
  out = finish(std::move(out), "sum");
  return record_op(std::move(out), {&x}, [shape = x.shape()](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{Tensor::full(shape, g.item(), g.dtype())};
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  const Tensor d = sub(a, b);
  return mean(mul(d, d));
}

Tensor reshape(const Tensor& x, Shape shape) {
  Tensor out = x.detached().with_shape(std::move(shape));
  return record_op(std::move(out), {&x}, [shape = x.shape()](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{g.with_shape(shape)};
  });
}

Tensor avg_pool2d(const Tensor& x, std::size_t factor) {
  require_2d(x, "avg_pool2d");
  const auto h = x.dim(0), w = x.dim(1);
  if (factor == 0 || h % factor != 0 || w % factor != 0)
    throw DimensionError("avg_pool2d: " + shape_str(x.shape()) + " not divisible by factor " +
                         std::to_string(factor));
  const auto oh = h / factor, ow = w / factor;
  const double inv = 1.0 / static_cast<double>(factor * factor);
  Tensor out = dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    std::vector<T> o(oh * ow, T(0));
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) o[(i / factor) * ow + j / factor] += src[i * w + j];
    for (auto& v : o) v *= static_cast<T>(inv);
    return make<T>({oh, ow}, std::move(o));
  });
  out = finish(std::move(out), "avg_pool2d");
  return record_op(std::move(out), {&x}, [h, w, factor, inv](const Tensor& g, const std::vector<bool>&) {
    Tensor dx = dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto gv = g.data<T>();
      const auto ow = w / factor;
      std::vector<T> d(h * w);
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
          d[i * w + j] = gv[(i / factor) * ow + j / factor] * static_cast<T>(inv);
      return make<T>({h, w}, std::move(d));
    });
    return std::vector<Tensor>{std::move(dx)};
  });
}

std::size_t reflect_index(long i, std::size_t n) {
  const long len = static_cast<long>(n);
  const long period = 2 * len;
  long k = i % period;
  if (k < 0) k += period;
  return static_cast<std::size_t>(k < len ? k : period - 1 - k);
}

std::vector<double> gaussian_kernel(double sigma) {
  if (sigma < 0) throw std::invalid_argument("gaussian_kernel: negative sigma");
  if (sigma == 0) return {1.0};
  const auto radius = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (long k = -radius; k <= radius; ++k) {
    const double v = std::exp(-static_cast<double>(k * k) / (2.0 * sigma * sigma));
    taps[static_cast<std::size_t>(k + radius)] = v;
    total += v;
  }
  for (auto& v : taps) v /= total;
  return taps;
}

Tensor gaussian_blur2d(const Tensor& x, double sigma) {
  require_2d(x, "gaussian_blur2d");
  if (sigma < 0) throw std::invalid_argument("gaussian_blur2d: negative sigma");
  if (sigma == 0) return x;
  const auto taps = gaussian_kernel(sigma);
  const auto h = x.dim(0), w = x.dim(1);
  Tensor out = dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto rows = blur_pass<T>(x.data<T>(), h, w, taps, false, false);
    auto both = blur_pass<T>(std::span<const T>(rows), h, w, taps, true, false);
    return make<T>({h, w}, std::move(both));
  });
  out = finish(std::move(out), "gaussian_blur2d");
  return record_op(std::move(out), {&x}, [taps, h, w](const Tensor& g, const std::vector<bool>&) {
    Tensor dx = dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto cols = blur_pass<T>(g.data<T>(), h, w, taps, true, true);
      auto both = blur_pass<T>(std::span<const T>(cols), h, w, taps, false, true);
      return make<T>({h, w}, std::move(both));
    });
    return std::vector<Tensor>{std::move(dx)};
  });
}

Tensor pool_tokens(const Tensor& x, std::size_t grid, std::size_t factor) {
  require_2d(x, "pool_tokens");
  if (x.dim(0) != grid * grid || factor == 0 || grid % factor != 0)
    throw DimensionError("pool_tokens: " + shape_str(x.shape()) + " is not a " +
                         std::to_string(grid) + "-grid divisible by " + std::to_string(factor));
  const auto c = x.dim(1), og = grid / factor;
  const double inv = 1.0 / static_cast<double>(factor * factor);
  Tensor out = dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    std::vector<T> o(og * og * c, T(0));
    for (std::size_t r = 0; r < grid; ++r)
      for (std::size_t col = 0; col < grid; ++col) {
        const T* s = src.data() + (r * grid + col) * c;
        T* d = o.data() + ((r / factor) * og + col / factor) * c;
        for (std::size_t k = 0; k < c; ++k) d[k] += s[k];
      }
    for (auto& v : o) v *= static_cast<T>(inv);
    return make<T>({og * og, c}, std::move(o));
  });
  out = finish(std::move(out), "pool_tokens");
  return record_op(std::move(out), {&x}, [grid, factor, inv](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{scale(upsample_tokens(g, grid / factor, factor), inv)};
  });
}

Tensor upsample_tokens(const Tensor& x, std::size_t grid, std::size_t factor) {
  require_2d(x, "upsample_tokens");
  if (x.dim(0) != grid * grid || factor == 0)
    throw DimensionError("upsample_tokens: " + shape_str(x.shape()) + " is not a " +
                         std::to_string(grid) + "-grid");
  const auto c = x.dim(1), og = grid * factor;
  Tensor out = dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    std::vector<T> o(og * og * c);
    for (std::size_t r = 0; r < og; ++r)
      for (std::size_t col = 0; col < og; ++col) {
        const T* s = src.data() + ((r / factor) * grid + col / factor) * c;
        std::copy(s, s + c, o.data() + (r * og + col) * c);
      }
    return make<T>({og * og, c}, std::move(o));
  });
  return record_op(std::move(out), {&x}, [og, factor](const Tensor& g, const std::vector<bool>&) {
    // Adjoint of nearest upsampling is block summation.
    return std::vector<Tensor>{scale(pool_tokens(g, og, factor), static_cast<double>(factor * factor))};
  });
}

Tensor patchify(const Tensor& image, std::size_t patch) {
  require_2d(image, "patchify");
  const auto h = image.dim(0), w = image.dim(1);
  if (patch == 0 || h % patch != 0 || w % patch != 0)
    throw DimensionError("patchify: " + shape_str(image.shape()) + " not divisible by patch " +
                         std::to_string(patch));
  const auto gh = h / patch, gw = w / patch, pp = patch * patch;
  Tensor out = dispatch(image.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = image.data<T>();
    std::vector<T> o(h * w);
    for (std::size_t r = 0; r < gh; ++r)
      for (std::size_t c = 0; c < gw; ++c)
        for (std::size_t i = 0; i < patch; ++i)
          for (std::size_t j = 0; j < patch; ++j)
            o[(r * gw + c) * pp + i * patch + j] = src[(r * patch + i) * w + c * patch + j];
    return make<T>({gh * gw, pp}, std::move(o));
  });
  return record_op(std::move(out), {&image}, [h, w, patch](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{unpatchify(g, h, w, patch)};
  });
}

Tensor unpatchify(const Tensor& tokens, std::size_t height, std::size_t width, std::size_t patch) {
  require_2d(tokens, "unpatchify");
  if (patch == 0 || height % patch != 0 || width % patch != 0 ||
      tokens.dim(0) != (height / patch) * (width / patch) || tokens.dim(1) != patch * patch)
    throw DimensionError("unpatchify: " + shape_str(tokens.shape()) + " does not tile " +
                         std::to_string(height) + "x" + std::to_string(width));
  const auto gw = width / patch, pp = patch * patch;
  Tensor out = dispatch(tokens.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = tokens.data<T>();
    std::vector<T> o(height * width);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x)
        o[y * width + x] = src[((y / patch) * gw + x / patch) * pp + (y % patch) * patch + x % patch];
    return make<T>({height, width}, std::move(o));
  });
  return record_op(std::move(out), {&tokens}, [patch](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{patchify(g, patch)};
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  require_2d(table, "gather_rows");
  const auto rows = table.dim(0), c = table.dim(1);
  for (auto id : ids)
    if (id >= rows)
      throw DimensionError("gather_rows: id " + std::to_string(id) + " out of range for " +
                           shape_str(table.shape()));
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  Tensor out = dispatch(table.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = table.data<T>();
    std::vector<T> o(idv.size() * c);
    for (std::size_t i = 0; i < idv.size(); ++i)
      std::copy(src.begin() + static_cast<long>(idv[i] * c),
                src.begin() + static_cast<long>((idv[i] + 1) * c), o.begin() + static_cast<long>(i * c));
    return make<T>({idv.size(), c}, std::move(o));
  });
  return record_op(std::move(out), {&table}, [idv, rows, c](const Tensor& g, const std::vector<bool>&) {
    Tensor dt = dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto gv = g.data<T>();
      std::vector<T> d(rows * c, T(0));
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t k = 0; k < c; ++k) d[idv[i] * c + k] += gv[i * c + k];
      return make<T>({rows, c}, std::move(d));
    });
    return std::vector<Tensor>{std::move(dt)};
  });
}

}  // namespace attnreg
