#pragma once

#include <vector>

#include "dilink/tensor.hpp"

namespace dilink::procrustes {

/// M = U diag(sigma) V^T with U [m x n], V [n x n], sigma descending.
struct Svd {
  Tensor u;
  std::vector<double> sigma;
  Tensor v;
};

/// One-sided Jacobi SVD of an m x n matrix, m >= n. Columns of U belonging to
/// zero singular values are completed to an orthonormal set. Each U column's
/// first nonzero component is made non-negative (V flipped alongside).
Svd svd(const Tensor& m);

/// Orthogonal matrix nearest to a square `m` in Frobenius norm: U V^T.
Tensor nearest_orthogonal(const Tensor& m);

/// R minimizing ||R - S^T G||_F over orthogonal R. S and G are N x D.
Tensor fit(const Tensor& s, const Tensor& g);

/// S R.
Tensor project(const Tensor& s, const Tensor& r);

/// ||R^T R - I||_F.
double orthogonality_error(const Tensor& r);

}  // namespace dilink::procrustes
