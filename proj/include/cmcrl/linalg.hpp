#pragma once

#include <cstdint>
#include <vector>

namespace cmcrl {

// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations
// (64-bit, deterministic sweep order). a is n×n row-major and is validated
// for symmetry within sym_tol. On return w holds eigenvalues in ascending
// order and V holds the matching eigenvectors in its columns, so
// a = V · diag(w) · Vᵀ.
void jacobi_eigh(const std::vector<double>& a, int64_t n, std::vector<double>& w,
                 std::vector<double>& V, double sym_tol = 1e-8);

// C[n×n] = A·B for square row-major matrices (64-bit helper for the metric
// code; the tensor GEMM kernels are not needed here).
std::vector<double> matmul_square(const std::vector<double>& A, const std::vector<double>& B,
                                  int64_t n);

// Symmetric square root via eigendecomposition; negative eigenvalues from
// roundoff are clamped to zero before the root.
std::vector<double> sym_sqrt(const std::vector<double>& a, int64_t n);

}  // namespace cmcrl
