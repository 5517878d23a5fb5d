#include "cmcrl/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cmcrl/error.hpp"

namespace cmcrl {

void jacobi_eigh(const std::vector<double>& a, int64_t n, std::vector<double>& w,
                 std::vector<double>& V, double sym_tol) {
  if (n <= 0 || static_cast<int64_t>(a.size()) != n * n) {
    throw DimensionError("jacobi_eigh: matrix buffer does not hold " + std::to_string(n) + "x" +
                         std::to_string(n));
  }
  double scale = 0.0;
  for (double v : a) scale = std::max(scale, std::fabs(v));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = i + 1; j < n; ++j) {
      if (std::fabs(a[i * n + j] - a[j * n + i]) > sym_tol * std::max(1.0, scale)) {
        throw ContractError("jacobi_eigh: matrix is not symmetric at (" + std::to_string(i) +
                            "," + std::to_string(j) + ")");
      }
    }
  }

  std::vector<double> m = a;
  // Symmetrize exactly so roundoff in the input cannot bias the sweeps.
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = i + 1; j < n; ++j) {
      double avg = 0.5 * (m[i * n + j] + m[j * n + i]);
      m[i * n + j] = avg;
      m[j * n + i] = avg;
    }
  }
  V.assign(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i) V[i * n + i] = 1.0;

  const int max_sweeps = 128;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = i + 1; j < n; ++j) off += m[i * n + j] * m[i * n + j];
    }
    if (std::sqrt(off) <= 1e-14 * std::max(1.0, scale)) break;

    for (int64_t p = 0; p < n - 1; ++p) {
      for (int64_t q = p + 1; q < n; ++q) {
        double apq = m[p * n + q];
        if (apq == 0.0) continue;
        double app = m[p * n + p];
        double aqq = m[q * n + q];
        double tau = (aqq - app) / (2.0 * apq);
        double t = (tau >= 0.0 ? 1.0 : -1.0) /
                   (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = t * c;

        for (int64_t k = 0; k < n; ++k) {
          double mkp = m[k * n + p];
          double mkq = m[k * n + q];
          m[k * n + p] = c * mkp - s * mkq;
          m[k * n + q] = s * mkp + c * mkq;
        }
        for (int64_t k = 0; k < n; ++k) {
          double mpk = m[p * n + k];
          double mqk = m[q * n + k];
          m[p * n + k] = c * mpk - s * mqk;
          m[q * n + k] = s * mpk + c * mqk;
        }
        for (int64_t k = 0; k < n; ++k) {
          double vkp = V[k * n + p];
          double vkq = V[k * n + q];
          V[k * n + p] = c * vkp - s * vkq;
          V[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }

  // Ascending eigenvalue order with the matching column permutation.
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), int64_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t x, int64_t y) { return m[x * n + x] < m[y * n + y]; });
  w.resize(static_cast<size_t>(n));
  std::vector<double> Vs(static_cast<size_t>(n * n));
  for (int64_t j = 0; j < n; ++j) {
    w[static_cast<size_t>(j)] = m[order[static_cast<size_t>(j)] * n + order[static_cast<size_t>(j)]];
    for (int64_t i = 0; i < n; ++i) {
      Vs[i * n + j] = V[i * n + order[static_cast<size_t>(j)]];
    }
  }
  V = std::move(Vs);
}

std::vector<double> matmul_square(const std::vector<double>& A, const std::vector<double>& B,
                                  int64_t n) {
  std::vector<double> C(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t t = 0; t < n; ++t) {
      double av = A[i * n + t];
      if (av == 0.0) continue;
      const double* brow = B.data() + t * n;
      double* crow = C.data() + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return C;
}

std::vector<double> sym_sqrt(const std::vector<double>& a, int64_t n) {
  std::vector<double> w, V;
  jacobi_eigh(a, n, w, V);
  std::vector<double> out(static_cast<size_t>(n * n), 0.0);
  for (int64_t k = 0; k < n; ++k) {
    double lam = w[static_cast<size_t>(k)];
    double root = lam > 0.0 ? std::sqrt(lam) : 0.0;
    if (root == 0.0) continue;
    for (int64_t i = 0; i < n; ++i) {
      double vik = V[i * n + k] * root;
      if (vik == 0.0) continue;
      for (int64_t j = 0; j < n; ++j) out[i * n + j] += vik * V[j * n + k];
    }
  }
  return out;
}

}  // namespace cmcrl
