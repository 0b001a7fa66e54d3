#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace wavg {

// Dense row-major matrix of doubles. Rows are samples, columns features.
struct Tensor2 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor2() = default;
  Tensor2(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Tensor2(std::size_t r, std::size_t c, std::vector<double> values);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool all_finite() const;

  friend bool operator==(const Tensor2&, const Tensor2&) = default;
};

// Gathers the given rows of `src` into a new tensor, preserving order.
Tensor2 take_rows(const Tensor2& src, std::span<const std::size_t> indices);

// out = a * b (+ out if accumulate). `a` is (m x k), `b` is (k x n), both
// row-major raw buffers. Backed by BLAS dgemm.
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* out,
          bool accumulate = false);
// out = a^T * b, where `a` is (k x m) and `b` is (k x n).
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* out, bool accumulate = false);
// out = a * b^T, where `a` is (m x k) and `b` is (n x k).
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* out, bool accumulate = false);

}  // namespace wavg
