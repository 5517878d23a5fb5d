#include "cmcrl/gemm.hpp"

#include <algorithm>
#include <cstring>

#include "cmcrl/parallel.hpp"

namespace cmcrl {

namespace {

// Register-blocked tile sizes: MR output rows by NR output columns are
// accumulated in locals with compile-time extents so the compiler keeps the
// whole tile in vector registers. Each C element still sums its reduction
// index in ascending order, so the result is bit-identical to the
// straightforward triple loop (zero coefficients multiply through per IEEE
// rules rather than being skipped).
constexpr int kMR = 6;
template <class T>
constexpr int64_t kNR = 256 / sizeof(T);  // four 64-byte lines of columns

// c[0..n) += a * b[0..n)
template <class T>
inline void axpy(int64_t n, T a, const T* __restrict b, T* __restrict c) {
  for (int64_t j = 0; j < n; ++j) c[j] += a * b[j];
}

template <class T>
inline T dot(int64_t n, const T* __restrict a, const T* __restrict b) {
  T acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0;
  int64_t j = 0;
  for (; j + 4 <= n; j += 4) {
    acc0 += a[j] * b[j];
    acc1 += a[j + 1] * b[j + 1];
    acc2 += a[j + 2] * b[j + 2];
    acc3 += a[j + 3] * b[j + 3];
  }
  T acc = (acc0 + acc1) + (acc2 + acc3);
  for (; j < n; ++j) acc += a[j] * b[j];
  return acc;
}

// C tile (MR x NR) += A * B for one reduction sweep. a_at(i, t) abstracts the
// A layout so the same kernel serves NN (row-major) and TN (transposed).
template <class T, int MR, int64_t NR, class AAt>
inline void tile_update(int64_t k, AAt a_at, const T* __restrict b, int64_t ldb, T* __restrict c,
                        int64_t ldc) {
  T acc[MR][NR];
  for (int i = 0; i < MR; ++i) {
    for (int64_t j = 0; j < NR; ++j) acc[i][j] = c[i * ldc + j];
  }
  for (int64_t t = 0; t < k; ++t) {
    const T* __restrict brow = b + t * ldb;
    for (int i = 0; i < MR; ++i) {
      const T av = a_at(i, t);
      for (int64_t j = 0; j < NR; ++j) acc[i][j] += av * brow[j];
    }
  }
  for (int i = 0; i < MR; ++i) {
    for (int64_t j = 0; j < NR; ++j) c[i * ldc + j] = acc[i][j];
  }
}

template <class T, int64_t NR, class AAt>
inline void tile_update_any(int mr, int64_t k, AAt a_at, const T* b, int64_t ldb, T* c,
                            int64_t ldc) {
  switch (mr) {
    case 6: tile_update<T, 6, NR>(k, a_at, b, ldb, c, ldc); break;
    case 5: tile_update<T, 5, NR>(k, a_at, b, ldb, c, ldc); break;
    case 4: tile_update<T, 4, NR>(k, a_at, b, ldb, c, ldc); break;
    case 3: tile_update<T, 3, NR>(k, a_at, b, ldb, c, ldc); break;
    case 2: tile_update<T, 2, NR>(k, a_at, b, ldb, c, ldc); break;
    default: tile_update<T, 1, NR>(k, a_at, b, ldb, c, ldc); break;
  }
}

// One band of up to kMR C rows: wide tiles, then a narrow tile, then a
// scalar tail, all sweeping the same ascending reduction order.
template <class T, class AAt>
inline void row_band(int mr, int64_t n, int64_t k, AAt a_at, const T* b, int64_t ldb, T* c,
                     int64_t ldc) {
  constexpr int64_t NR = kNR<T>;
  constexpr int64_t NR2 = NR / 4;  // one vector register of columns
  int64_t j = 0;
  for (; j + NR <= n; j += NR) tile_update_any<T, NR>(mr, k, a_at, b + j, ldb, c + j, ldc);
  for (; j + NR2 <= n; j += NR2) tile_update_any<T, NR2>(mr, k, a_at, b + j, ldb, c + j, ldc);
  if (j < n) {
    for (int bi = 0; bi < mr; ++bi) {
      for (int64_t t = 0; t < k; ++t) axpy(n - j, a_at(bi, t), b + t * ldb + j, c + bi * ldc + j);
    }
  }
}

}  // namespace

template <class T>
void gemm_nn(int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C,
             bool accumulate) {
  parallel_for(m, [&](int64_t i0, int64_t i1) {
    if (!accumulate) {
      for (int64_t i = i0; i < i1; ++i) std::fill(C + i * n, C + i * n + n, T(0));
    }
    for (int64_t i = i0; i < i1; i += kMR) {
      const int mr = static_cast<int>(std::min<int64_t>(kMR, i1 - i));
      auto a_at = [&](int64_t bi, int64_t t) { return A[(i + bi) * k + t]; };
      row_band<T>(mr, n, k, a_at, B, n, C + i * n, n);
    }
  });
}

template <class T>
void gemm_nt(int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C,
             bool accumulate) {
  // Tiny problems: straight dot products beat the packing overhead.
  if (m * n * k < 32 * 1024) {
    parallel_for(m, [&](int64_t i0, int64_t i1) {
      for (int64_t i = i0; i < i1; ++i) {
        const T* a = A + i * k;
        T* c = C + i * n;
        for (int64_t j = 0; j < n; ++j) {
          T v = dot(k, a, B + j * k);
          c[j] = accumulate ? c[j] + v : v;
        }
      }
    });
    return;
  }
  // Repack k-blocks of B^T row-major, then reuse the NN tile kernel. Blocks
  // ascend in k and each block sweeps k ascending, preserving the summation
  // order of the plain triple loop.
  if (!accumulate) {
    for (int64_t i = 0; i < m; ++i) std::fill(C + i * n, C + i * n + n, T(0));
  }
  constexpr int64_t KC = 256;
  static thread_local std::vector<T> pack;
  pack.resize(static_cast<size_t>(std::min(KC, k) * n));
  for (int64_t t0 = 0; t0 < k; t0 += KC) {
    const int64_t kc = std::min(KC, k - t0);
    T* pk = pack.data();
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = B + j * k + t0;
      for (int64_t tt = 0; tt < kc; ++tt) pk[tt * n + j] = brow[tt];
    }
    parallel_for(m, [&](int64_t i0, int64_t i1) {
      for (int64_t i = i0; i < i1; i += kMR) {
        const int mr = static_cast<int>(std::min<int64_t>(kMR, i1 - i));
        auto a_at = [&](int64_t bi, int64_t t) { return A[(i + bi) * k + t0 + t]; };
        row_band<T>(mr, n, kc, a_at, pk, n, C + i * n, n);
      }
    });
  }
}

template <class T>
void gemm_tn(int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C,
             bool accumulate) {
  parallel_for(m, [&](int64_t i0, int64_t i1) {
    if (!accumulate) {
      for (int64_t i = i0; i < i1; ++i) std::fill(C + i * n, C + i * n + n, T(0));
    }
    for (int64_t i = i0; i < i1; i += kMR) {
      const int mr = static_cast<int>(std::min<int64_t>(kMR, i1 - i));
      auto a_at = [&](int64_t bi, int64_t t) { return A[t * m + i + bi]; };
      row_band<T>(mr, n, k, a_at, B, n, C + i * n, n);
    }
  });
}

template void gemm_nn<float>(int64_t, int64_t, int64_t, const float*,
                             const float*, float*, bool);
template void gemm_nn<double>(int64_t, int64_t, int64_t, const double*,
                              const double*, double*, bool);
template void gemm_nt<float>(int64_t, int64_t, int64_t, const float*,
                             const float*, float*, bool);
template void gemm_nt<double>(int64_t, int64_t, int64_t, const double*,
                              const double*, double*, bool);
template void gemm_tn<float>(int64_t, int64_t, int64_t, const float*,
                             const float*, float*, bool);
template void gemm_tn<double>(int64_t, int64_t, int64_t, const double*,
                              const double*, double*, bool);

}  // namespace cmcrl
