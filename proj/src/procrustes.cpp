#include "dilink/procrustes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dilink/kernels.hpp"

namespace dilink::procrustes {

namespace {

double column_dot(const Tensor& a, std::size_t p, std::size_t q) {
  double s = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) s += a.at(r, p) * a.at(r, q);
  return s;
}

void rotate_columns(Tensor& a, std::size_t p, std::size_t q, double c, double s) {
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double x = a.at(r, p);
    const double y = a.at(r, q);
    a.at(r, p) = c * x - s * y;
    a.at(r, q) = s * x + c * y;
  }
}

// Fills the columns of `u` not flagged in `have` with unit vectors orthogonal
// to every other column (modified Gram-Schmidt against the standard basis).
void complete_basis(Tensor& u, std::vector<bool>& have) {
  const std::size_t m = u.rows();
  for (std::size_t j = 0; j < u.cols(); ++j) {
    if (have[j]) continue;
    std::vector<double> best;
    double best_norm = -1.0;
    for (std::size_t k = 0; k < m; ++k) {
      std::vector<double> cand(m, 0.0);
      cand[k] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t c = 0; c < u.cols(); ++c) {
          if (!have[c]) continue;
          double d = 0.0;
          for (std::size_t r = 0; r < m; ++r) d += cand[r] * u.at(r, c);
          for (std::size_t r = 0; r < m; ++r) cand[r] -= d * u.at(r, c);
        }
      }
      const double n = l2_norm(cand);
      if (n > best_norm) {
        best_norm = n;
        best = std::move(cand);
      }
    }
    for (std::size_t r = 0; r < m; ++r) u.at(r, j) = best[r] / best_norm;
    have[j] = true;
  }
}

}  // namespace

Svd svd(const Tensor& m) {
  if (m.rank() != 2) throw ShapeError("svd expects a matrix, got " + shape_to_string(m.shape()));
  m.require_finite("svd input");
  const std::size_t rows = m.rows();
  const std::size_t n = m.cols();
  if (rows < n) throw ShapeError("svd expects rows >= cols, got " + shape_to_string(m.shape()));

  Tensor a = m;
  Tensor v = identity(n);
  constexpr double eps = std::numeric_limits<double>::epsilon();
  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = column_dot(a, p, p);
        const double beta = column_dot(a, q, q);
        const double gamma = column_dot(a, p, q);
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate_columns(a, p, q, c, s);
        rotate_columns(v, p, q, c, s);
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(column_dot(a, j, j));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  Svd out{Tensor({rows, n}), std::vector<double>(n), Tensor({n, n})};
  const double smax = n ? sigma[order[0]] : 0.0;
  const double cutoff = smax * static_cast<double>(rows) * eps;
  std::vector<bool> have(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    for (std::size_t r = 0; r < n; ++r) out.v.at(r, k) = v.at(r, j);
    if (sigma[j] > cutoff && sigma[j] > 0.0) {
      out.sigma[k] = sigma[j];
      for (std::size_t r = 0; r < rows; ++r) out.u.at(r, k) = a.at(r, j) / sigma[j];
      have[k] = true;
    } else {
      out.sigma[k] = 0.0;
    }
  }
  complete_basis(out.u, have);

  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t r = 0; r < rows; ++r) {
      const double x = out.u.at(r, k);
      if (std::abs(x) <= 1e-14) continue;
      if (x < 0.0) {
        for (std::size_t i = 0; i < rows; ++i) out.u.at(i, k) = -out.u.at(i, k);
        for (std::size_t i = 0; i < n; ++i) out.v.at(i, k) = -out.v.at(i, k);
      }
      break;
    }
  }
  return out;
}

Tensor nearest_orthogonal(const Tensor& m) {
  if (m.rank() != 2 || m.rows() != m.cols()) throw ShapeError("nearest_orthogonal expects a square matrix");
  const Svd d = svd(m);
  return kernels::matmul_nt(d.u, d.v);
}

Tensor fit(const Tensor& s, const Tensor& g) {
  if (s.rank() != 2 || g.rank() != 2 || s.shape() != g.shape()) {
    throw ShapeError("procrustes fit expects equal N x D inputs, got " + shape_to_string(s.shape()) + " and " +
                     shape_to_string(g.shape()));
  }
  if (s.rows() == 0) throw ShapeError("procrustes fit needs at least one row");
  s.require_finite("procrustes fit (S)");
  g.require_finite("procrustes fit (G)");
  return nearest_orthogonal(kernels::matmul_tn(s, g));
}

Tensor project(const Tensor& s, const Tensor& r) {
  if (r.rank() != 2 || r.rows() != r.cols() || s.cols() != r.rows()) {
    throw ShapeError("procrustes project: S has " + std::to_string(s.cols()) + " columns, R is " +
                     shape_to_string(r.shape()));
  }
  if (s.rank() == 1) return kernels::matmul(s.reshaped({1, s.size()}), r).reshaped({r.cols()});
  return kernels::matmul(s, r);
}

double orthogonality_error(const Tensor& r) {
  return frobenius_distance(kernels::matmul_tn(r, r), identity(r.cols()));
}

}  // namespace dilink::procrustes
