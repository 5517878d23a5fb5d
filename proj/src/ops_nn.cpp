#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <vector>

#include "cmcrl/gemm.hpp"
#include "cmcrl/ops.hpp"
#include "cmcrl/parallel.hpp"

namespace cmcrl {

namespace {

// One entry point over the three kernels; the double-transpose case is
// materialized through a scratch buffer.
template <class T>
void gemm_any(bool ta, bool tb, int64_t m, int64_t n, int64_t k, const T* A,
              const T* B, T* C, bool accumulate) {
  if (!ta && !tb) {
    gemm_nn(m, n, k, A, B, C, accumulate);
  } else if (!ta && tb) {
    gemm_nt(m, n, k, A, B, C, accumulate);
  } else if (ta && !tb) {
    gemm_tn(m, n, k, A, B, C, accumulate);
  } else {
    // C = Aᵀ·Bᵀ = (B·A)ᵀ with A: k×m, B: n×k.
    std::vector<T> tmp(static_cast<size_t>(n * m));
    gemm_nn(n, m, k, B, A, tmp.data(), false);
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < n; ++j) {
        T v = tmp[static_cast<size_t>(j * m + i)];
        C[i * n + j] = accumulate ? C[i * n + j] + v : v;
      }
    }
  }
}

struct MatDims {
  int64_t m, n, k;
};

MatDims check_matmul_dims(const Shape& a, const Shape& b, bool ta, bool tb,
                          const char* op) {
  int64_t m = ta ? a[1] : a[0];
  int64_t k = ta ? a[0] : a[1];
  int64_t k2 = tb ? b[1] : b[0];
  int64_t n = tb ? b[0] : b[1];
  if (k != k2) {
    throw DimensionError(std::string(op) + ": inner dimensions disagree, " + shape_str(a) +
                         (ta ? "ᵀ" : "") + " x " + shape_str(b) + (tb ? "ᵀ" : ""));
  }
  return {m, n, k};
}

// Shared gradient formulas for C = op_a(A)·op_b(B); accumulates into dA/dB.
template <class T>
void matmul_backward(bool ta, bool tb, int64_t m, int64_t n, int64_t k,
                     const T* A, const T* B, const T* dC, T* dA, T* dB) {
  if (dA) {
    if (!ta) {
      gemm_any<T>(false, !tb, m, k, n, dC, B, dA, true);
    } else {
      gemm_any<T>(tb, true, k, m, n, B, dC, dA, true);
    }
  }
  if (dB) {
    if (!tb) {
      gemm_any<T>(!ta, false, k, n, m, A, dC, dB, true);
    } else {
      gemm_any<T>(true, ta, n, k, m, dC, A, dB, true);
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul: expects matrices, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  check_same_dtype(a, b, "matmul");
  auto [m, n, k] = check_matmul_dims(a.shape(), b.shape(), trans_a, trans_b, "matmul");
  Tensor y = make_op_output({m, n}, a.dtype(), "matmul", {a, b},
                            [a, b, trans_a, trans_b, m = m, n = n, k = k](TensorImpl& self) {
                              dispatch(self.dtype, [&](auto tag) {
                                using T = decltype(tag);
                                const T* dC = self.gbuf<T>().data();
                                T* dA = nullptr;
                                T* dB = nullptr;
                                if (a.node()->requires_grad) {
                                  a.node()->ensure_grad();
                                  dA = a.node()->gbuf<T>().data();
                                }
                                if (b.node()->requires_grad) {
                                  b.node()->ensure_grad();
                                  dB = b.node()->gbuf<T>().data();
                                }
                                matmul_backward(trans_a, trans_b, m, n, k,
                                                a.node()->buf<T>().data(),
                                                b.node()->buf<T>().data(), dC, dA, dB);
                              });
                            });
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    gemm_any<T>(trans_a, trans_b, m, n, k, a.data<T>(), b.data<T>(), y.data<T>(), false);
  });
  return y;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 3 || b.rank() != 3) {
    throw DimensionError("bmm: expects rank-3 tensors, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  check_same_dtype(a, b, "bmm");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("bmm: batch sizes disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  int64_t batch = a.dim(0);
  Shape sa{a.dim(1), a.dim(2)}, sb{b.dim(1), b.dim(2)};
  auto [m, n, k] = check_matmul_dims(sa, sb, trans_a, trans_b, "bmm");
  int64_t a_step = a.dim(1) * a.dim(2);
  int64_t b_step = b.dim(1) * b.dim(2);
  int64_t y_step = m * n;
  Tensor y = make_op_output(
      {batch, m, n}, a.dtype(), "bmm", {a, b},
      [a, b, trans_a, trans_b, batch, a_step, b_step, y_step, m = m, n = n,
       k = k](TensorImpl& self) {
        dispatch(self.dtype, [&](auto tag) {
          using T = decltype(tag);
          const T* dC = self.gbuf<T>().data();
          T* dA = nullptr;
          T* dB = nullptr;
          if (a.node()->requires_grad) {
            a.node()->ensure_grad();
            dA = a.node()->gbuf<T>().data();
          }
          if (b.node()->requires_grad) {
            b.node()->ensure_grad();
            dB = b.node()->gbuf<T>().data();
          }
          const T* A = a.node()->buf<T>().data();
          const T* B = b.node()->buf<T>().data();
          parallel_for(batch, [&](int64_t s0, int64_t s1) {
            for (int64_t s = s0; s < s1; ++s) {
              matmul_backward(trans_a, trans_b, m, n, k, A + s * a_step, B + s * b_step,
                              dC + s * y_step, dA ? dA + s * a_step : nullptr,
                              dB ? dB + s * b_step : nullptr);
            }
          });
        });
      });
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* A = a.data<T>();
    const T* B = b.data<T>();
    T* C = y.data<T>();
    parallel_for(batch, [&](int64_t s0, int64_t s1) {
      for (int64_t s = s0; s < s1; ++s) {
        gemm_any<T>(trans_a, trans_b, m, n, k, A + s * a_step, B + s * b_step, C + s * y_step,
                    false);
      }
    });
  });
  return y;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2) {
    throw DimensionError("linear: x and weight must be matrices, got " + shape_str(x.shape()) +
                         " and " + shape_str(weight.shape()));
  }
  check_same_dtype(x, weight, "linear");
  int64_t batch = x.dim(0), din = x.dim(1), dout = weight.dim(0);
  if (weight.dim(1) != din) {
    throw DimensionError("linear: weight " + shape_str(weight.shape()) + " does not accept " +
                         std::to_string(din) + " input features");
  }
  if (bias.defined()) {
    if (bias.rank() != 1 || bias.dim(0) != dout) {
      throw DimensionError("linear: bias " + shape_str(bias.shape()) + " must be (" +
                           std::to_string(dout) + ")");
    }
    check_same_dtype(x, bias, "linear");
  }
  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  Tensor y = make_op_output(
      {batch, dout}, x.dtype(), "linear", std::move(parents),
      [x, weight, bias, batch, din, dout](TensorImpl& self) {
        dispatch(self.dtype, [&](auto tag) {
          using T = decltype(tag);
          const T* g = self.gbuf<T>().data();
          if (x.node()->requires_grad) {
            x.node()->ensure_grad();
            // dx = dY·W
            gemm_nn(batch, din, dout, g, weight.node()->buf<T>().data(),
                    x.node()->gbuf<T>().data(), true);
          }
          if (weight.node()->requires_grad) {
            weight.node()->ensure_grad();
            // dW = dYᵀ·x
            gemm_tn(dout, din, batch, g, x.node()->buf<T>().data(),
                    weight.node()->gbuf<T>().data(), true);
          }
          if (bias.defined() && bias.node()->requires_grad) {
            bias.node()->ensure_grad();
            T* db = bias.node()->gbuf<T>().data();
            for (int64_t j = 0; j < dout; ++j) {
              T acc = 0;
              for (int64_t i = 0; i < batch; ++i) acc += g[i * dout + j];
              db[j] += acc;
            }
          }
        });
      });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    gemm_nt(batch, dout, din, x.data<T>(), weight.data<T>(), y.data<T>(), false);
    if (bias.defined()) {
      const T* bv = bias.data<T>();
      T* yv = y.data<T>();
      for (int64_t i = 0; i < batch; ++i) {
        for (int64_t j = 0; j < dout; ++j) yv[i * dout + j] += bv[j];
      }
    }
  });
  return y;
}

namespace {

// Unrolls k×k patches of one (C,H,W) sample into Ho·Wo columns of a matrix
// with C·k·k rows and row stride `ldc`. Several samples can be unrolled side
// by side into one wide matrix so a single gemm covers the whole group.
template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t k, int64_t stride, int64_t pad,
            int64_t Ho, int64_t Wo, T* cols, int64_t ldc) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        T* dst = cols + ((c * k + ki) * k + kj) * ldc;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) {
            std::fill(dst + oh * Wo, dst + (oh + 1) * Wo, T(0));
            continue;
          }
          const T* src = x + (c * H + ih) * W;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            int64_t iw = ow * stride - pad + kj;
            dst[oh * Wo + ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-adds one sample's Ho·Wo columns (row stride `ldc`) back onto its
// (C,H,W) gradient buffer.
template <class T>
void col2im_add(const T* cols, int64_t C, int64_t H, int64_t W, int64_t k, int64_t stride,
                int64_t pad, int64_t Ho, int64_t Wo, T* dx, int64_t ldc) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        const T* src = cols + ((c * k + ki) * k + kj) * ldc;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          T* dst = dx + (c * H + ih) * W;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            int64_t iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) dst[iw] += src[oh * Wo + ow];
          }
        }
      }
    }
  }
}

// Small spatial outputs make per-sample column matrices too narrow to keep
// the gemm tile kernels busy, so samples are unrolled in groups. The group is
// capped so the shared column buffer stays modest; large spatial outputs are
// wide already and keep a group of one.
inline int64_t conv_group(int64_t B, int64_t P, int64_t ckk, int64_t elem_size) {
  constexpr int64_t kTargetCols = 4096;
  constexpr int64_t kBufBytesCap = int64_t{16} << 20;
  if (P >= kTargetCols) return 1;
  int64_t g = std::min(B, (kTargetCols + P - 1) / P);
  int64_t cap = kBufBytesCap / std::max<int64_t>(1, ckk * P * elem_size);
  return std::max<int64_t>(1, std::min(g, cap));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias, int stride, int pad) {
  if (x.rank() != 4 || kernels.rank() != 4) {
    throw DimensionError("conv2d: expects x (B,C,H,W) and kernels (Cout,Cin,k,k), got " +
                         shape_str(x.shape()) + " and " + shape_str(kernels.shape()));
  }
  check_same_dtype(x, kernels, "conv2d");
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (pad < 0) throw ContractError("conv2d: pad must be >= 0, got " + std::to_string(pad));
  int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Cout = kernels.dim(0), k = kernels.dim(2);
  if (kernels.dim(2) != kernels.dim(3)) {
    throw DimensionError("conv2d: kernels must be square, got " + shape_str(kernels.shape()));
  }
  if (kernels.dim(1) != Cin) {
    throw DimensionError("conv2d: input has " + std::to_string(Cin) +
                         " channels but kernels expect " + std::to_string(kernels.dim(1)));
  }
  if (k > H + 2 * pad || k > W + 2 * pad) {
    throw DimensionError("conv2d: kernel size " + std::to_string(k) + " exceeds padded input " +
                         shape_str(x.shape()) + " with pad " + std::to_string(pad));
  }
  if (bias.defined()) {
    if (bias.rank() != 1 || bias.dim(0) != Cout) {
      throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " must be (" +
                           std::to_string(Cout) + ")");
    }
    check_same_dtype(x, bias, "conv2d");
  }
  int64_t Ho = (H + 2 * pad - k) / stride + 1;
  int64_t Wo = (W + 2 * pad - k) / stride + 1;
  int64_t P = Ho * Wo;
  int64_t ckk = Cin * k * k;

  std::vector<Tensor> parents{x, kernels};
  if (bias.defined()) parents.push_back(bias);
  Tensor y = make_op_output(
      {B, Cout, Ho, Wo}, x.dtype(), "conv2d", std::move(parents),
      [x, kernels, bias, B, Cin, H, W, Cout, k, stride, pad, Ho, Wo, P, ckk](TensorImpl& self) {
        dispatch(self.dtype, [&](auto tag) {
          using T = decltype(tag);
          const T* g = self.gbuf<T>().data();
          const T* wv = kernels.node()->buf<T>().data();
          const T* xv = x.node()->buf<T>().data();
          const int64_t grp = conv_group(B, P, ckk, sizeof(T));
          const int64_t ngroups = (B + grp - 1) / grp;
          // Incoming grads are laid out (sample, channel, pixel); the grouped
          // gemms want channel-major rows spanning the whole group.
          auto gather_group = [&](int64_t s0, int64_t gs, std::vector<T>& gcols) {
            const int64_t gp = gs * P;
            gcols.resize(static_cast<size_t>(Cout * gp));
            for (int64_t c = 0; c < Cout; ++c) {
              for (int64_t s = 0; s < gs; ++s) {
                std::memcpy(gcols.data() + c * gp + s * P, g + ((s0 + s) * Cout + c) * P,
                            static_cast<size_t>(P) * sizeof(T));
              }
            }
          };
          if (x.node()->requires_grad) {
            x.node()->ensure_grad();
            T* dx = x.node()->gbuf<T>().data();
            parallel_for(ngroups, [&](int64_t g0, int64_t g1) {
              std::vector<T> dcols, gcols;
              for (int64_t gi = g0; gi < g1; ++gi) {
                const int64_t s0 = gi * grp;
                const int64_t gs = std::min(B, s0 + grp) - s0;
                const int64_t gp = gs * P;
                const T* gsrc = g + s0 * Cout * P;
                if (gs > 1) {
                  gather_group(s0, gs, gcols);
                  gsrc = gcols.data();
                }
                dcols.resize(static_cast<size_t>(ckk * gp));
                gemm_tn(ckk, gp, Cout, wv, gsrc, dcols.data(), false);
                for (int64_t s = 0; s < gs; ++s) {
                  col2im_add(dcols.data() + s * P, Cin, H, W, k, stride, pad, Ho, Wo,
                             dx + (s0 + s) * Cin * H * W, gp);
                }
              }
            });
          }
          if (kernels.node()->requires_grad) {
            kernels.node()->ensure_grad();
            T* dw = kernels.node()->gbuf<T>().data();
            // Groups accumulate serially in index order, and each group's
            // columns follow the same ascending (sample, pixel) order, so the
            // reduction order never depends on the thread count or the group
            // width.
            std::vector<T> cols, gcols;
            for (int64_t gi = 0; gi < ngroups; ++gi) {
              const int64_t s0 = gi * grp;
              const int64_t gs = std::min(B, s0 + grp) - s0;
              const int64_t gp = gs * P;
              cols.resize(static_cast<size_t>(ckk * gp));
              for (int64_t s = 0; s < gs; ++s) {
                im2col(xv + (s0 + s) * Cin * H * W, Cin, H, W, k, stride, pad, Ho, Wo,
                       cols.data() + s * P, gp);
              }
              const T* gsrc = g + s0 * Cout * P;
              if (gs > 1) {
                gather_group(s0, gs, gcols);
                gsrc = gcols.data();
              }
              gemm_nt(Cout, ckk, gp, gsrc, cols.data(), dw, true);
            }
          }
          if (bias.defined() && bias.node()->requires_grad) {
            bias.node()->ensure_grad();
            T* db = bias.node()->gbuf<T>().data();
            for (int64_t c = 0; c < Cout; ++c) {
              T acc = 0;
              for (int64_t s = 0; s < B; ++s) {
                const T* row = g + (s * Cout + c) * P;
                for (int64_t p = 0; p < P; ++p) acc += row[p];
              }
              db[c] += acc;
            }
          }
        });
      });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    const T* wv = kernels.data<T>();
    T* yv = y.data<T>();
    const int64_t grp = conv_group(B, P, ckk, sizeof(T));
    const int64_t ngroups = (B + grp - 1) / grp;
    parallel_for(ngroups, [&](int64_t g0, int64_t g1) {
      std::vector<T> cols, ytmp;
      for (int64_t gi = g0; gi < g1; ++gi) {
        const int64_t s0 = gi * grp;
        const int64_t gs = std::min(B, s0 + grp) - s0;
        const int64_t gp = gs * P;
        cols.resize(static_cast<size_t>(ckk * gp));
        for (int64_t s = 0; s < gs; ++s) {
          im2col(xv + (s0 + s) * Cin * H * W, Cin, H, W, k, stride, pad, Ho, Wo,
                 cols.data() + s * P, gp);
        }
        if (gs == 1) {
          gemm_nn(Cout, P, ckk, wv, cols.data(), yv + s0 * Cout * P, false);
          continue;
        }
        ytmp.resize(static_cast<size_t>(Cout * gp));
        gemm_nn(Cout, gp, ckk, wv, cols.data(), ytmp.data(), false);
        for (int64_t s = 0; s < gs; ++s) {
          for (int64_t c = 0; c < Cout; ++c) {
            std::memcpy(yv + ((s0 + s) * Cout + c) * P, ytmp.data() + c * gp + s * P,
                        static_cast<size_t>(P) * sizeof(T));
          }
        }
      }
    });
    if (bias.defined()) {
      const T* bv = bias.data<T>();
      for (int64_t s = 0; s < B; ++s) {
        for (int64_t c = 0; c < Cout; ++c) {
          T* row = yv + (s * Cout + c) * P;
          for (int64_t p = 0; p < P; ++p) row[p] += bv[c];
        }
      }
    }
  });
  return y;
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    double momentum, double eps) {
  if (x.rank() != 4) {
    throw DimensionError("batch_norm2d: expects (B,C,H,W), got " + shape_str(x.shape()));
  }
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  for (const Tensor* t : {&gamma, &beta, static_cast<const Tensor*>(&running_mean),
                          static_cast<const Tensor*>(&running_var)}) {
    if (t->rank() != 1 || t->dim(0) != C) {
      throw DimensionError("batch_norm2d: per-channel parameter " + shape_str(t->shape()) +
                           " must be (" + std::to_string(C) + ")");
    }
  }
  check_same_dtype(x, gamma, "batch_norm2d");
  int64_t M = B * H * W;
  if (training && M < 2) {
    throw ContractError("batch_norm2d: training mode needs at least 2 values per channel");
  }
  int64_t hw = H * W;

  auto mu = std::make_shared<std::vector<double>>(static_cast<size_t>(C));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(C));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    if (training) {
      parallel_for(C, [&](int64_t c0, int64_t c1) {
        for (int64_t c = c0; c < c1; ++c) {
          double s = 0;
          for (int64_t b = 0; b < B; ++b) {
            const T* p = xv + (b * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) s += static_cast<double>(p[i]);
          }
          double m = s / static_cast<double>(M);
          double v = 0;
          for (int64_t b = 0; b < B; ++b) {
            const T* p = xv + (b * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) {
              double d = static_cast<double>(p[i]) - m;
              v += d * d;
            }
          }
          v /= static_cast<double>(M);
          (*mu)[static_cast<size_t>(c)] = m;
          (*inv_std)[static_cast<size_t>(c)] = 1.0 / std::sqrt(v + eps);
          // Running buffers track the unbiased variance.
          double unbiased = v * static_cast<double>(M) / static_cast<double>(M - 1);
          double rm = running_mean.value_at(c);
          double rv = running_var.value_at(c);
          running_mean.set_value_at(c, (1.0 - momentum) * rm + momentum * m);
          running_var.set_value_at(c, (1.0 - momentum) * rv + momentum * unbiased);
        }
      });
    } else {
      for (int64_t c = 0; c < C; ++c) {
        (*mu)[static_cast<size_t>(c)] = running_mean.value_at(c);
        (*inv_std)[static_cast<size_t>(c)] =
            1.0 / std::sqrt(running_var.value_at(c) + eps);
      }
    }
  });

  Tensor y = make_op_output(
      x.shape(), x.dtype(), "batch_norm2d", {x, gamma, beta},
      [x, gamma, beta, mu, inv_std, training, B, C, hw, M](TensorImpl& self) {
        dispatch(self.dtype, [&](auto tag) {
          using T = decltype(tag);
          const T* g = self.gbuf<T>().data();
          const T* xv = x.node()->buf<T>().data();
          const T* gv = gamma.node()->buf<T>().data();
          bool need_dx = x.node()->requires_grad;
          bool need_dg = gamma.node()->requires_grad;
          bool need_db = beta.node()->requires_grad;
          if (need_dx) x.node()->ensure_grad();
          if (need_dg) gamma.node()->ensure_grad();
          if (need_db) beta.node()->ensure_grad();
          parallel_for(C, [&](int64_t c0, int64_t c1) {
            for (int64_t c = c0; c < c1; ++c) {
              double m = (*mu)[static_cast<size_t>(c)];
              double istd = (*inv_std)[static_cast<size_t>(c)];
              double sum_dy = 0, sum_dy_xhat = 0;
              for (int64_t b = 0; b < B; ++b) {
                const T* gp = g + (b * C + c) * hw;
                const T* xp = xv + (b * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                  double dy = static_cast<double>(gp[i]);
                  double xhat = (static_cast<double>(xp[i]) - m) * istd;
                  sum_dy += dy;
                  sum_dy_xhat += dy * xhat;
                }
              }
              if (need_db) beta.node()->gbuf<T>()[static_cast<size_t>(c)] += static_cast<T>(sum_dy);
              if (need_dg) {
                gamma.node()->gbuf<T>()[static_cast<size_t>(c)] += static_cast<T>(sum_dy_xhat);
              }
              if (!need_dx) continue;
              T* dxp = x.node()->gbuf<T>().data();
              double scale = static_cast<double>(gv[c]) * istd;
              double mean_dy = sum_dy / static_cast<double>(M);
              double mean_dy_xhat = sum_dy_xhat / static_cast<double>(M);
              for (int64_t b = 0; b < B; ++b) {
                const T* gp = g + (b * C + c) * hw;
                const T* xp = xv + (b * C + c) * hw;
                T* dp = dxp + (b * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                  double dy = static_cast<double>(gp[i]);
                  if (training) {
                    double xhat = (static_cast<double>(xp[i]) - m) * istd;
                    dp[i] += static_cast<T>(scale * (dy - mean_dy - xhat * mean_dy_xhat));
                  } else {
                    dp[i] += static_cast<T>(scale * dy);
                  }
                }
              }
            }
          });
        });
      });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    const T* gv = gamma.data<T>();
    const T* bv = beta.data<T>();
    T* yv = y.data<T>();
    parallel_for(B * C, [&](int64_t i0, int64_t i1) {
      for (int64_t bc = i0; bc < i1; ++bc) {
        int64_t c = bc % C;
        double m = (*mu)[static_cast<size_t>(c)];
        double istd = (*inv_std)[static_cast<size_t>(c)];
        double scale = static_cast<double>(gv[c]) * istd;
        double shift = static_cast<double>(bv[c]) - scale * m;
        const T* xp = xv + bc * hw;
        T* yp = yv + bc * hw;
        for (int64_t i = 0; i < hw; ++i) {
          yp[i] = static_cast<T>(scale * static_cast<double>(xp[i]) + shift);
        }
      }
    });
  });
  return y;
}

Tensor upsample_nearest2x(const Tensor& x) {
  if (x.rank() != 4) {
    throw DimensionError("upsample_nearest2x: expects (B,C,H,W), got " + shape_str(x.shape()));
  }
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor y = make_op_output({B, C, 2 * H, 2 * W}, x.dtype(), "upsample_nearest2x", {x},
                            [x, B, C, H, W](TensorImpl& self) {
                              dispatch(self.dtype, [&](auto tag) {
                                using T = decltype(tag);
                                const T* g = self.gbuf<T>().data();
                                x.node()->ensure_grad();
                                T* dx = x.node()->gbuf<T>().data();
                                int64_t W2 = 2 * W;
                                for (int64_t bc = 0; bc < B * C; ++bc) {
                                  const T* gp = g + bc * 4 * H * W;
                                  T* dp = dx + bc * H * W;
                                  for (int64_t i = 0; i < H; ++i) {
                                    for (int64_t j = 0; j < W; ++j) {
                                      dp[i * W + j] += gp[(2 * i) * W2 + 2 * j] +
                                                       gp[(2 * i) * W2 + 2 * j + 1] +
                                                       gp[(2 * i + 1) * W2 + 2 * j] +
                                                       gp[(2 * i + 1) * W2 + 2 * j + 1];
                                    }
                                  }
                                }
                              });
                            });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    T* yv = y.data<T>();
    int64_t W2 = 2 * W;
    parallel_for(B * C, [&](int64_t i0, int64_t i1) {
      for (int64_t bc = i0; bc < i1; ++bc) {
        const T* xp = xv + bc * H * W;
        T* yp = yv + bc * 4 * H * W;
        for (int64_t i = 0; i < H; ++i) {
          for (int64_t j = 0; j < W; ++j) {
            T v = xp[i * W + j];
            yp[(2 * i) * W2 + 2 * j] = v;
            yp[(2 * i) * W2 + 2 * j + 1] = v;
            yp[(2 * i + 1) * W2 + 2 * j] = v;
            yp[(2 * i + 1) * W2 + 2 * j + 1] = v;
          }
        }
      }
    });
  });
  return y;
}

Tensor avg_pool2x(const Tensor& x) {
  if (x.rank() != 4) {
    throw DimensionError("avg_pool2x: expects (B,C,H,W), got " + shape_str(x.shape()));
  }
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw DimensionError("avg_pool2x: spatial extents must be even, got " + shape_str(x.shape()));
  }
  int64_t Ho = H / 2, Wo = W / 2;
  Tensor y = make_op_output({B, C, Ho, Wo}, x.dtype(), "avg_pool2x", {x},
                            [x, B, C, H, W, Ho, Wo](TensorImpl& self) {
                              dispatch(self.dtype, [&](auto tag) {
                                using T = decltype(tag);
                                const T* g = self.gbuf<T>().data();
                                x.node()->ensure_grad();
                                T* dx = x.node()->gbuf<T>().data();
                                for (int64_t bc = 0; bc < B * C; ++bc) {
                                  const T* gp = g + bc * Ho * Wo;
                                  T* dp = dx + bc * H * W;
                                  for (int64_t i = 0; i < Ho; ++i) {
                                    for (int64_t j = 0; j < Wo; ++j) {
                                      T q = gp[i * Wo + j] / T(4);
                                      dp[(2 * i) * W + 2 * j] += q;
                                      dp[(2 * i) * W + 2 * j + 1] += q;
                                      dp[(2 * i + 1) * W + 2 * j] += q;
                                      dp[(2 * i + 1) * W + 2 * j + 1] += q;
                                    }
                                  }
                                }
                              });
                            });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    T* yv = y.data<T>();
    parallel_for(B * C, [&](int64_t i0, int64_t i1) {
      for (int64_t bc = i0; bc < i1; ++bc) {
        const T* xp = xv + bc * H * W;
        T* yp = yv + bc * Ho * Wo;
        for (int64_t i = 0; i < Ho; ++i) {
          for (int64_t j = 0; j < Wo; ++j) {
            yp[i * Wo + j] = (xp[(2 * i) * W + 2 * j] + xp[(2 * i) * W + 2 * j + 1] +
                              xp[(2 * i + 1) * W + 2 * j] + xp[(2 * i + 1) * W + 2 * j + 1]) /
                             T(4);
          }
        }
      }
    });
  });
  return y;
}

namespace {

Tensor reduce_hw(const Tensor& x, bool take_mean, const char* name) {
  if (x.rank() != 4) {
    throw DimensionError(std::string(name) + ": expects (B,C,H,W), got " + shape_str(x.shape()));
  }
  int64_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  double w = take_mean ? 1.0 / static_cast<double>(hw) : 1.0;
  Tensor y = make_op_output({B, C}, x.dtype(), name, {x}, [x, B, C, hw, w](TensorImpl& self) {
    dispatch(self.dtype, [&](auto tag) {
      using T = decltype(tag);
      const T* g = self.gbuf<T>().data();
      x.node()->ensure_grad();
      T* dx = x.node()->gbuf<T>().data();
      for (int64_t bc = 0; bc < B * C; ++bc) {
        T v = static_cast<T>(static_cast<double>(g[bc]) * w);
        T* dp = dx + bc * hw;
        for (int64_t i = 0; i < hw; ++i) dp[i] += v;
      }
    });
  });
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>();
    T* yv = y.data<T>();
    for (int64_t bc = 0; bc < B * C; ++bc) {
      T acc = 0;
      const T* xp = xv + bc * hw;
      for (int64_t i = 0; i < hw; ++i) acc += xp[i];
      yv[bc] = static_cast<T>(static_cast<double>(acc) * w);
    }
  });
  return y;
}

}  // namespace

Tensor mean_hw(const Tensor& x) { return reduce_hw(x, true, "mean_hw"); }
Tensor sum_hw(const Tensor& x) { return reduce_hw(x, false, "sum_hw"); }

}  // namespace cmcrl
