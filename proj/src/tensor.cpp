#include "wavg/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <mutex>

#include "wavg/errors.hpp"

namespace wavg {

namespace {

// Multi-threaded BLAS would make reductions depend on scheduling; runs are
// parallelized at the seed level instead.
void pin_blas_threads() {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

}  // namespace

Tensor2::Tensor2(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != rows * cols) {
    throw InputError("Tensor2: data length does not equal rows x cols");
  }
}

bool Tensor2::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

Tensor2 take_rows(const Tensor2& src, std::span<const std::size_t> indices) {
  Tensor2 out(indices.size(), src.cols);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= src.rows) throw InputError("take_rows: index out of range");
    std::copy_n(src.data.begin() + static_cast<std::ptrdiff_t>(indices[i] * src.cols), src.cols,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * src.cols));
  }
  return out;
}

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* out,
          bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill_n(out, m * n, 0.0);
    return;
  }
  pin_blas_threads();
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0, a, static_cast<int>(k), b, static_cast<int>(n),
              accumulate ? 1.0 : 0.0, out, static_cast<int>(n));
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* out, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill_n(out, m * n, 0.0);
    return;
  }
  pin_blas_threads();
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0, a, static_cast<int>(m), b, static_cast<int>(n),
              accumulate ? 1.0 : 0.0, out, static_cast<int>(n));
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* out, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill_n(out, m * n, 0.0);
    return;
  }
  pin_blas_threads();
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0, a, static_cast<int>(k), b, static_cast<int>(k),
              accumulate ? 1.0 : 0.0, out, static_cast<int>(n));
}

}  // namespace wavg
