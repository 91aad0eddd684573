#include "gemm.hpp"

#include <vector>

#ifdef UDHF2_HAVE_CBLAS
#include <cblas.h>
#endif

namespace udhf2::detail {
namespace {

#ifndef UDHF2_HAVE_CBLAS
template <class T>
void gemm_ref(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c) {
  std::vector<T> bt;
  if (tb) {
    bt.resize(static_cast<std::size_t>(k * n));
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    b = bt.data();
  }
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = ta ? a[p * m + i] : a[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}
#endif

}  // namespace

void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, const float* a, const float* b,
          float* c) {
  if (m == 0 || n == 0 || k == 0) return;
#ifdef UDHF2_HAVE_CBLAS
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0f, a, static_cast<int>(ta ? m : k), b,
              static_cast<int>(tb ? k : n), 1.0f, c, static_cast<int>(n));
#else
  gemm_ref(ta, tb, m, n, k, a, b, c);
#endif
}

void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, const double* a, const double* b,
          double* c) {
  if (m == 0 || n == 0 || k == 0) return;
#ifdef UDHF2_HAVE_CBLAS
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0, a, static_cast<int>(ta ? m : k), b,
              static_cast<int>(tb ? k : n), 1.0, c, static_cast<int>(n));
#else
  gemm_ref(ta, tb, m, n, k, a, b, c);
#endif
}

}  // namespace udhf2::detail
