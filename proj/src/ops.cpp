#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

#include "cmcrl/ops.hpp"
#include "cmcrl/parallel.hpp"

namespace cmcrl {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

// y_i = f(x_i); backward: dx_i += dfdx(x_i, y_i) * g_i
template <class F, class G>
Tensor map_unary(const Tensor& x, const char* name, F fwd, G dfdx) {
  Tensor y = make_op_output(x.shape(), x.dtype(), name, {x},
                            [x, dfdx](TensorImpl& self) mutable {
                              dispatch(self.dtype, [&](auto tag) {
                                using T = decltype(tag);
                                auto* p = x.node();
                                p->ensure_grad();
                                const T* g = self.gbuf<T>().data();
                                const T* yv = self.buf<T>().data();
                                const T* xv = p->buf<T>().data();
                                T* dx = p->gbuf<T>().data();
                                int64_t n = self.numel();
                                for (int64_t i = 0; i < n; ++i) {
                                  dx[i] += static_cast<T>(
                                      dfdx(static_cast<double>(xv[i]), static_cast<double>(yv[i])) *
                                      static_cast<double>(g[i]));
                                }
                              });
                            });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    T* yv = y.data<T>();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) yv[i] = static_cast<T>(fwd(static_cast<double>(xv[i])));
  });
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  check_same_dtype(a, b, "add");
  Tensor y = make_op_output(a.shape(), a.dtype(), "add", {a, b}, [a, b](TensorImpl& self) {
    dispatch(self.dtype, [&](auto tag) {
      using T = decltype(tag);
      const T* g = self.gbuf<T>().data();
      int64_t n = self.numel();
      for (TensorImpl* p : {a.node(), b.node()}) {
        if (!p->requires_grad) continue;
        p->ensure_grad();
        T* d = p->template gbuf<T>().data();
        for (int64_t i = 0; i < n; ++i) d[i] += g[i];
      }
    });
  });
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* av = a.data<T>();
    const T* bv = b.data<T>();
    T* yv = y.data<T>();
    for (int64_t i = 0; i < a.numel(); ++i) yv[i] = av[i] + bv[i];
  });
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  check_same_dtype(a, b, "sub");
  Tensor y = make_op_output(a.shape(), a.dtype(), "sub", {a, b}, [a, b](TensorImpl& self) {
    dispatch(self.dtype, [&](auto tag) {
      using T = decltype(tag);
      const T* g = self.gbuf<T>().data();
      int64_t n = self.numel();
      if (a.node()->requires_grad) {
        a.node()->ensure_grad();
        T* d = a.node()->gbuf<T>().data();
        for (int64_t i = 0; i < n; ++i) d[i] += g[i];
      }
      if (b.node()->requires_grad) {
        b.node()->ensure_grad();
        T* d = b.node()->gbuf<T>().data();
        for (int64_t i = 0; i < n; ++i) d[i] -= g[i];
      }
    });
  });
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* av = a.data<T>();
    const T* bv = b.data<T>();
    T* yv = y.data<T>();
    for (int64_t i = 0; i < a.numel(); ++i) yv[i] = av[i] - bv[i];
  });
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  check_same_dtype(a, b, "mul");
  Tensor y = make_op_output(a.shape(), a.dtype(), "mul", {a, b}, [a, b](TensorImpl& self) {
    dispatch(self.dtype, [&](auto tag) {
      using T = decltype(tag);
      const T* g = self.gbuf<T>().data();
      const T* av = a.node()->buf<T>().data();
      const T* bv = b.node()->buf<T>().data();
      int64_t n = self.numel();
      if (a.node()->requires_grad) {
        a.node()->ensure_grad();
        T* d = a.node()->gbuf<T>().data();
        for (int64_t i = 0; i < n; ++i) d[i] += g[i] * bv[i];
      }
      if (b.node()->requires_grad) {
        b.node()->ensure_grad();
        T* d = b.node()->gbuf<T>().data();
        for (int64_t i = 0; i < n; ++i) d[i] += g[i] * av[i];
      }
    });
  });
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* av = a.data<T>();
    const T* bv = b.data<T>();
    T* yv = y.data<T>();
    for (int64_t i = 0; i < a.numel(); ++i) yv[i] = av[i] * bv[i];
  });
  return y;
}

Tensor add_scalar(const Tensor& x, double s) {
  return map_unary(x, "add_scalar", [s](double v) { return v + s; },
                   [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double s) {
  return map_unary(x, "mul_scalar", [s](double v) { return v * s; },
                   [s](double, double) { return s; });
}

Tensor rsub_scalar(double s, const Tensor& x) {
  return map_unary(x, "rsub_scalar", [s](double v) { return s - v; },
                   [](double, double) { return -1.0; });
}

Tensor mul_scalar_tensor(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) {
    throw DimensionError("mul_scalar_tensor: scale must be scalar, got " + shape_str(s.shape()));
  }
  check_same_dtype(x, s, "mul_scalar_tensor");
  Tensor y = make_op_output(x.shape(), x.dtype(), "mul_scalar_tensor", {x, s},
                            [x, s](TensorImpl& self) {
                              dispatch(self.dtype, [&](auto tag) {
                                using T = decltype(tag);
                                const T* g = self.gbuf<T>().data();
                                const T sv = s.node()->buf<T>()[0];
                                const T* xv = x.node()->buf<T>().data();
                                int64_t n = self.numel();
                                if (x.node()->requires_grad) {
                                  x.node()->ensure_grad();
                                  T* d = x.node()->gbuf<T>().data();
                                  for (int64_t i = 0; i < n; ++i) d[i] += g[i] * sv;
                                }
                                if (s.node()->requires_grad) {
                                  s.node()->ensure_grad();
                                  T acc = 0;
                                  for (int64_t i = 0; i < n; ++i) acc += g[i] * xv[i];
                                  s.node()->gbuf<T>()[0] += acc;
                                }
                              });
                            });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T sv = s.data<T>()[0];
    const T* xv = x.data<T>();
    T* yv = y.data<T>();
    for (int64_t i = 0; i < x.numel(); ++i) yv[i] = xv[i] * sv;
  });
  return y;
}

Tensor neg(const Tensor& x) {
  return map_unary(x, "neg", [](double v) { return -v; },
                   [](double, double) { return -1.0; });
}

Tensor relu(const Tensor& x) {
  return map_unary(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
                   [](double xv, double) { return xv > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return map_unary(x, "leaky_relu", [slope](double v) { return v > 0.0 ? v : slope * v; },
                   [slope](double xv, double) { return xv > 0.0 ? 1.0 : slope; });
}

Tensor tanh(const Tensor& x) {
  return map_unary(x, "tanh", [](double v) { return std::tanh(v); },
                   [](double, double yv) { return 1.0 - yv * yv; });
}

Tensor exp(const Tensor& x) {
  return map_unary(x, "exp", [](double v) { return std::exp(v); },
                   [](double, double yv) { return yv; });
}

Tensor log(const Tensor& x) {
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    for (int64_t i = 0; i < x.numel(); ++i) {
      if (!(xv[i] > T(0))) {
        throw DomainError("log: input must be strictly positive, got " +
                          std::to_string(static_cast<double>(xv[i])) + " at index " +
                          std::to_string(i));
      }
    }
  });
  return map_unary(x, "log", [](double v) { return std::log(v); },
                   [](double xv, double) { return 1.0 / xv; });
}

Tensor sqrt(const Tensor& x) {
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    for (int64_t i = 0; i < x.numel(); ++i) {
      if (xv[i] < T(0)) {
        throw DomainError("sqrt: negative input at index " + std::to_string(i));
      }
    }
  });
  return map_unary(x, "sqrt", [](double v) { return std::sqrt(v); },
                   [](double, double yv) { return 0.5 / yv; });
}

Tensor pow(const Tensor& x, double p) {
  bool p_integral = p == std::floor(p);
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    for (int64_t i = 0; i < x.numel(); ++i) {
      double v = static_cast<double>(xv[i]);
      if (v < 0.0 && !p_integral) {
        throw DomainError("pow: negative base with non-integral exponent at index " +
                          std::to_string(i));
      }
      if (v == 0.0 && p < 0.0) {
        throw DomainError("pow: zero base with negative exponent at index " + std::to_string(i));
      }
    }
  });
  return map_unary(x, "pow", [p](double v) { return std::pow(v, p); },
                   [p](double xv, double) {
                     return xv == 0.0 ? 0.0 : p * std::pow(xv, p - 1.0);
                   });
}

Tensor reciprocal(const Tensor& x) {
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    for (int64_t i = 0; i < x.numel(); ++i) {
      if (xv[i] == T(0)) throw DomainError("reciprocal: zero at index " + std::to_string(i));
    }
  });
  return map_unary(x, "reciprocal", [](double v) { return 1.0 / v; },
                   [](double, double yv) { return -yv * yv; });
}

Tensor sum(const Tensor& x) {
  Tensor y = make_op_output({1}, x.dtype(), "sum", {x}, [x](TensorImpl& self) {
    dispatch(self.dtype, [&](auto tag) {
      using T = decltype(tag);
      const T g = self.gbuf<T>()[0];
      x.node()->ensure_grad();
      T* d = x.node()->gbuf<T>().data();
      for (int64_t i = 0; i < x.numel(); ++i) d[i] += g;
    });
  });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    T acc = 0;
    for (int64_t i = 0; i < x.numel(); ++i) acc += xv[i];
    y.data<T>()[0] = acc;
  });
  return y;
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

namespace {

// Treat the last axis as rows of width `width`.
std::pair<int64_t, int64_t> rows_and_width(const Tensor& x, const char* op) {
  if (x.rank() < 1) throw DimensionError(std::string(op) + ": rank must be >= 1");
  int64_t width = x.shape().back();
  return {x.numel() / width, width};
}

Shape drop_last_axis(const Tensor& x) {
  Shape s(x.shape().begin(), x.shape().end() - 1);
  if (s.empty()) s = {1};
  return s;
}

}  // namespace

Tensor sum_lastdim(const Tensor& x) {
  auto [rows, width] = rows_and_width(x, "sum_lastdim");
  Tensor y = make_op_output(drop_last_axis(x), x.dtype(), "sum_lastdim", {x},
                            [x, rows = rows, width = width](TensorImpl& self) {
                              dispatch(self.dtype, [&](auto tag) {
                                using T = decltype(tag);
                                const T* g = self.gbuf<T>().data();
                                x.node()->ensure_grad();
                                T* d = x.node()->gbuf<T>().data();
                                for (int64_t r = 0; r < rows; ++r) {
                                  for (int64_t j = 0; j < width; ++j) d[r * width + j] += g[r];
                                }
                              });
                            });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    T* yv = y.data<T>();
    for (int64_t r = 0; r < rows; ++r) {
      T acc = 0;
      for (int64_t j = 0; j < width; ++j) acc += xv[r * width + j];
      yv[r] = acc;
    }
  });
  return y;
}

Tensor max_lastdim(const Tensor& x) {
  auto [rows, width] = rows_and_width(x, "max_lastdim");
  // Ties route the full gradient to the first maximum.
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(rows));
  Tensor y = make_op_output(drop_last_axis(x), x.dtype(), "max_lastdim", {x},
                            [x, argmax, rows = rows, width = width](TensorImpl& self) {
                              dispatch(self.dtype, [&](auto tag) {
                                using T = decltype(tag);
                                const T* g = self.gbuf<T>().data();
                                x.node()->ensure_grad();
                                T* d = x.node()->gbuf<T>().data();
                                for (int64_t r = 0; r < rows; ++r) {
                                  d[r * width + (*argmax)[static_cast<size_t>(r)]] += g[r];
                                }
                              });
                            });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    T* yv = y.data<T>();
    for (int64_t r = 0; r < rows; ++r) {
      const T* row = xv + r * width;
      int64_t best = 0;
      for (int64_t j = 1; j < width; ++j) {
        if (row[j] > row[best]) best = j;
      }
      (*argmax)[static_cast<size_t>(r)] = best;
      yv[r] = row[best];
    }
  });
  return y;
}

Tensor softmax_lastdim(const Tensor& x) {
  auto [rows, width] = rows_and_width(x, "softmax_lastdim");
  Tensor y = make_op_output(x.shape(), x.dtype(), "softmax_lastdim", {x},
                            [x, rows = rows, width = width](TensorImpl& self) {
                              dispatch(self.dtype, [&](auto tag) {
                                using T = decltype(tag);
                                const T* g = self.gbuf<T>().data();
                                const T* yv = self.buf<T>().data();
                                x.node()->ensure_grad();
                                T* d = x.node()->gbuf<T>().data();
                                for (int64_t r = 0; r < rows; ++r) {
                                  const T* gr = g + r * width;
                                  const T* yr = yv + r * width;
                                  T dot = 0;
                                  for (int64_t j = 0; j < width; ++j) dot += gr[j] * yr[j];
                                  T* dr = d + r * width;
                                  for (int64_t j = 0; j < width; ++j) dr[j] += yr[j] * (gr[j] - dot);
                                }
                              });
                            });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    T* yv = y.data<T>();
    parallel_for(rows, [&](int64_t r0, int64_t r1) {
      for (int64_t r = r0; r < r1; ++r) {
        const T* row = xv + r * width;
        T* out = yv + r * width;
        T m = row[0];
        for (int64_t j = 1; j < width; ++j) m = std::max(m, row[j]);
        T s = 0;
        for (int64_t j = 0; j < width; ++j) {
          out[j] = static_cast<T>(std::exp(static_cast<double>(row[j] - m)));
          s += out[j];
        }
        T inv = T(1) / s;
        for (int64_t j = 0; j < width; ++j) out[j] *= inv;
      }
    });
  });
  return y;
}

Tensor logsumexp_lastdim(const Tensor& x) {
  auto [rows, width] = rows_and_width(x, "logsumexp_lastdim");
  Tensor y = make_op_output(drop_last_axis(x), x.dtype(), "logsumexp_lastdim", {x},
                            [x, rows = rows, width = width](TensorImpl& self) {
                              dispatch(self.dtype, [&](auto tag) {
                                using T = decltype(tag);
                                const T* g = self.gbuf<T>().data();
                                const T* yv = self.buf<T>().data();
                                const T* xv = x.node()->buf<T>().data();
                                x.node()->ensure_grad();
                                T* d = x.node()->gbuf<T>().data();
                                for (int64_t r = 0; r < rows; ++r) {
                                  const T* xr = xv + r * width;
                                  T* dr = d + r * width;
                                  for (int64_t j = 0; j < width; ++j) {
                                    dr[j] += static_cast<T>(
                                        std::exp(static_cast<double>(xr[j] - yv[r])) *
                                        static_cast<double>(g[r]));
                                  }
                                }
                              });
                            });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    T* yv = y.data<T>();
    for (int64_t r = 0; r < rows; ++r) {
      const T* row = xv + r * width;
      T m = row[0];
      for (int64_t j = 1; j < width; ++j) m = std::max(m, row[j]);
      double s = 0;
      for (int64_t j = 0; j < width; ++j) s += std::exp(static_cast<double>(row[j] - m));
      yv[r] = static_cast<T>(static_cast<double>(m) + std::log(s));
    }
  });
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  Tensor y = make_op_output(shape, x.dtype(), "reshape", {x}, [x](TensorImpl& self) {
    dispatch(self.dtype, [&](auto tag) {
      using T = decltype(tag);
      const T* g = self.gbuf<T>().data();
      x.node()->ensure_grad();
      T* d = x.node()->gbuf<T>().data();
      for (int64_t i = 0; i < self.numel(); ++i) d[i] += g[i];
    });
  });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::memcpy(y.data<T>(), x.data<T>(), sizeof(T) * static_cast<size_t>(x.numel()));
  });
  return y;
}

namespace {

Tensor concat2d(const Tensor& a, const Tensor& b, int axis, const char* name) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError(std::string(name) + ": expects 2D tensors");
  }
  check_same_dtype(a, b, name);
  int other = 1 - axis;
  if (a.shape()[static_cast<size_t>(other)] != b.shape()[static_cast<size_t>(other)]) {
    throw DimensionError(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " do not align");
  }
  Shape out = a.shape();
  out[static_cast<size_t>(axis)] += b.shape()[static_cast<size_t>(axis)];

  int64_t ra = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor y = make_op_output(out, a.dtype(), name, {a, b},
                            [a, b, axis, ra, ca, cb](TensorImpl& self) {
                              dispatch(self.dtype, [&](auto tag) {
                                using T = decltype(tag);
                                const T* g = self.gbuf<T>().data();
                                int64_t cols = self.shape[1];
                                auto scatter = [&](TensorImpl* p, int64_t row0, int64_t col0,
                                                   int64_t r, int64_t c) {
                                  if (!p->requires_grad) return;
                                  p->ensure_grad();
                                  T* d = p->gbuf<T>().data();
                                  for (int64_t i = 0; i < r; ++i) {
                                    for (int64_t j = 0; j < c; ++j) {
                                      d[i * c + j] += g[(row0 + i) * cols + col0 + j];
                                    }
                                  }
                                };
                                if (axis == 0) {
                                  scatter(a.node(), 0, 0, ra, ca);
                                  scatter(b.node(), ra, 0, self.shape[0] - ra, ca);
                                } else {
                                  scatter(a.node(), 0, 0, ra, ca);
                                  scatter(b.node(), 0, ca, ra, cb);
                                }
                              });
                            });
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* yv = y.data<T>();
    const T* av = a.data<T>();
    const T* bv = b.data<T>();
    if (axis == 0) {
      std::memcpy(yv, av, sizeof(T) * static_cast<size_t>(a.numel()));
      std::memcpy(yv + a.numel(), bv, sizeof(T) * static_cast<size_t>(b.numel()));
    } else {
      int64_t cols = ca + cb;
      for (int64_t i = 0; i < ra; ++i) {
        std::memcpy(yv + i * cols, av + i * ca, sizeof(T) * static_cast<size_t>(ca));
        std::memcpy(yv + i * cols + ca, bv + i * cb, sizeof(T) * static_cast<size_t>(cb));
      }
    }
  });
  return y;
}

}  // namespace

Tensor concat_rows(const Tensor& a, const Tensor& b) { return concat2d(a, b, 0, "concat_rows"); }
Tensor concat_cols(const Tensor& a, const Tensor& b) { return concat2d(a, b, 1, "concat_cols"); }

namespace {
std::atomic<uint64_t> g_l2_zero_guard{0};
}

uint64_t l2_normalize_zero_guard_count() { return g_l2_zero_guard.load(); }

Tensor l2_normalize_rows(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("l2_normalize_rows: expects (rows, dim)");
  int64_t rows = x.dim(0), width = x.dim(1);
  constexpr double kGuard = 1e-12;
  // Saved inverse lengths for the backward pass.
  auto inv_norm = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  Tensor y = make_op_output(x.shape(), x.dtype(), "l2_normalize_rows", {x},
                            [x, inv_norm, rows, width](TensorImpl& self) {
                              dispatch(self.dtype, [&](auto tag) {
                                using T = decltype(tag);
                                const T* g = self.gbuf<T>().data();
                                const T* yv = self.buf<T>().data();
                                x.node()->ensure_grad();
                                T* d = x.node()->gbuf<T>().data();
                                for (int64_t r = 0; r < rows; ++r) {
                                  const T* gr = g + r * width;
                                  const T* yr = yv + r * width;
                                  double inv = (*inv_norm)[static_cast<size_t>(r)];
                                  double dot = 0;
                                  for (int64_t j = 0; j < width; ++j) {
                                    dot += static_cast<double>(gr[j]) * static_cast<double>(yr[j]);
                                  }
                                  T* dr = d + r * width;
                                  for (int64_t j = 0; j < width; ++j) {
                                    dr[j] += static_cast<T>(
                                        inv * (static_cast<double>(gr[j]) -
                                               dot * static_cast<double>(yr[j])));
                                  }
                                }
                              });
                            });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    T* yv = y.data<T>();
    for (int64_t r = 0; r < rows; ++r) {
      const T* row = xv + r * width;
      double ss = 0;
      for (int64_t j = 0; j < width; ++j) {
        ss += static_cast<double>(row[j]) * static_cast<double>(row[j]);
      }
      double norm = std::sqrt(ss);
      if (norm == 0.0) g_l2_zero_guard.fetch_add(1);
      double inv = 1.0 / (norm + kGuard);
      (*inv_norm)[static_cast<size_t>(r)] = inv;
      T* out = yv + r * width;
      for (int64_t j = 0; j < width; ++j) out[j] = static_cast<T>(row[j] * inv);
    }
  });
  return y;
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& index) {
  if (x.rank() != 2) throw DimensionError("gather_rows: expects (rows, cols)");
  int64_t rows = x.dim(0), width = x.dim(1);
  if (static_cast<int64_t>(index.size()) != rows) {
    throw DimensionError("gather_rows: index count " + std::to_string(index.size()) +
                         " != rows " + std::to_string(rows));
  }
  for (int64_t r = 0; r < rows; ++r) {
    if (index[static_cast<size_t>(r)] < 0 || index[static_cast<size_t>(r)] >= width) {
      throw ContractError("gather_rows: index out of range at row " + std::to_string(r));
    }
  }
  auto idx = std::make_shared<std::vector<int64_t>>(index);
  Tensor y = make_op_output({rows}, x.dtype(), "gather_rows", {x},
                            [x, idx, rows, width](TensorImpl& self) {
                              dispatch(self.dtype, [&](auto tag) {
                                using T = decltype(tag);
                                const T* g = self.gbuf<T>().data();
                                x.node()->ensure_grad();
                                T* d = x.node()->gbuf<T>().data();
                                for (int64_t r = 0; r < rows; ++r) {
                                  d[r * width + (*idx)[static_cast<size_t>(r)]] += g[r];
                                }
                              });
                            });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    T* yv = y.data<T>();
    for (int64_t r = 0; r < rows; ++r) yv[r] = xv[r * width + index[static_cast<size_t>(r)]];
  });
  return y;
}

Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int64_t>& labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be (batch, classes)");
  Tensor lse = logsumexp_lastdim(logits);
  Tensor picked = gather_rows(logits, labels);
  return mean(sub(lse, picked));
}

}  // namespace cmcrl
