#include "dilink/kernels.hpp"

#include <omp.h>

#include <cmath>
#include <string>

namespace dilink::kernels {

namespace {

void check_inner(std::size_t lhs, std::size_t rhs, const char* op) {
  if (lhs != rhs) {
    throw ShapeError(std::string(op) + ": inner dimensions " + std::to_string(lhs) + " and " + std::to_string(rhs) +
                     " differ");
  }
}

// Row i of C = A * B. Shared by the serial and parallel paths so the
// accumulation order is identical.
inline void matmul_row(const Tensor& a, const Tensor& b, Tensor& c, std::size_t i) {
  const std::size_t k_dim = a.cols();
  const std::size_t n = b.cols();
  double* out = c.data().data() + i * n;
  for (std::size_t k = 0; k < k_dim; ++k) {
    const double aik = a.at(i, k);
    if (aik == 0.0) continue;
    const double* brow = b.data().data() + k * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += aik * brow[j];
  }
}

// Row i of C = A^T * B, i indexes columns of A.
inline void matmul_tn_row(const Tensor& a, const Tensor& b, Tensor& c, std::size_t i) {
  const std::size_t k_dim = a.rows();
  const std::size_t n = b.cols();
  double* out = c.data().data() + i * n;
  for (std::size_t k = 0; k < k_dim; ++k) {
    const double aki = a.at(k, i);
    if (aki == 0.0) continue;
    const double* brow = b.data().data() + k * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += aki * brow[j];
  }
}

inline void matmul_nt_row(const Tensor& a, const Tensor& b, Tensor& c, std::size_t i) {
  const std::size_t n = b.rows();
  for (std::size_t j = 0; j < n; ++j) c.at(i, j) = dot(a.row(i), b.row(j));
}

inline double pair_distance(const Tensor& rows, const std::pair<std::size_t, std::size_t>& p) {
  return euclidean_distance(rows.row(p.first), rows.row(p.second));
}

}  // namespace

int max_threads() { return omp_get_max_threads(); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_inner(a.cols(), b.rows(), "matmul");
  Tensor c({a.rows(), b.cols()});
  const auto m = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static) if (m * static_cast<std::ptrdiff_t>(b.size()) > 32768)
  for (std::ptrdiff_t i = 0; i < m; ++i) matmul_row(a, b, c, static_cast<std::size_t>(i));
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  check_inner(a.rows(), b.rows(), "matmul_tn");
  Tensor c({a.cols(), b.cols()});
  const auto m = static_cast<std::ptrdiff_t>(a.cols());
#pragma omp parallel for schedule(static) if (static_cast<std::ptrdiff_t>(a.size() * b.cols()) > 32768)
  for (std::ptrdiff_t i = 0; i < m; ++i) matmul_tn_row(a, b, c, static_cast<std::size_t>(i));
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_inner(a.cols(), b.cols(), "matmul_nt");
  Tensor c({a.rows(), b.rows()});
  const auto m = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static) if (static_cast<std::ptrdiff_t>(a.size() * b.rows()) > 32768)
  for (std::ptrdiff_t i = 0; i < m; ++i) matmul_nt_row(a, b, c, static_cast<std::size_t>(i));
  return c;
}

std::vector<double> pair_distances(const Tensor& rows, std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  std::vector<double> out(pairs.size());
  const auto n = static_cast<std::ptrdiff_t>(pairs.size());
#pragma omp parallel for schedule(static) if (n > 4096)
  for (std::ptrdiff_t k = 0; k < n; ++k) out[static_cast<std::size_t>(k)] = pair_distance(rows, pairs[k]);
  return out;
}

namespace reference {

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_inner(a.cols(), b.rows(), "matmul");
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i) matmul_row(a, b, c, i);
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  check_inner(a.rows(), b.rows(), "matmul_tn");
  Tensor c({a.cols(), b.cols()});
  for (std::size_t i = 0; i < a.cols(); ++i) matmul_tn_row(a, b, c, i);
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_inner(a.cols(), b.cols(), "matmul_nt");
  Tensor c({a.rows(), b.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i) matmul_nt_row(a, b, c, i);
  return c;
}

std::vector<double> pair_distances(const Tensor& rows, std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(pair_distance(rows, p));
  return out;
}

}  // namespace reference

}  // namespace dilink::kernels
