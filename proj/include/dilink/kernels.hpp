#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "dilink/tensor.hpp"

// Dense kernels used on the hot paths. The top-level functions are
// OpenMP-parallel; `reference::` holds the serial versions they are tested
// against. Both produce bit-identical results: each output element is
// accumulated by exactly one thread in the same order.
namespace dilink::kernels {

/// C = A * B.
Tensor matmul(const Tensor& a, const Tensor& b);
/// C = A^T * B.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// C = A * B^T.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

/// Euclidean distance between rows `pairs[k].first` and `pairs[k].second` of `rows`.
std::vector<double> pair_distances(const Tensor& rows, std::span<const std::pair<std::size_t, std::size_t>> pairs);

int max_threads();

namespace reference {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);
std::vector<double> pair_distances(const Tensor& rows, std::span<const std::pair<std::size_t, std::size_t>> pairs);

}  // namespace reference

}  // namespace dilink::kernels
