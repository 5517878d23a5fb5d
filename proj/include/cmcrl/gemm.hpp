#pragma once

#include <cstdint>

namespace cmcrl {

// Row-major dense kernels. Every output element is reduced in a fixed order
// that never depends on the thread count or the matrix extents of *other*
// rows, so results are bit-reproducible for any thread configuration.

// C[m x n] = (accumulate ? C : 0) + A[m x k] * B[k x n]
template <class T>
void gemm_nn(int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C,
             bool accumulate = false);

// C[m x n] = (accumulate ? C : 0) + A[m x k] * B[n x k]^T
template <class T>
void gemm_nt(int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C,
             bool accumulate = false);

// C[m x n] = (accumulate ? C : 0) + A[k x m]^T * B[k x n]
template <class T>
void gemm_tn(int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C,
             bool accumulate = false);

}  // namespace cmcrl
