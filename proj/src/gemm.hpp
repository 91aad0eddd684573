#pragma once

#include <cstdint>

namespace udhf2::detail {

/// C(MxN) += op(A)(MxK) * op(B)(KxN), all row-major. A is stored (KxM) when
/// `ta`, B is stored (NxK) when `tb`.
void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, const float* a, const float* b,
          float* c);
void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, const double* a, const double* b,
          double* c);

}  // namespace udhf2::detail
