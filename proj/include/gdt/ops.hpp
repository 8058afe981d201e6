#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "gdt/tensor.hpp"

// Differentiable kernels. Every function records a backward rule on the active
// tape when at least one input requires gradients; otherwise it is a plain
// forward evaluation.

namespace gdt {

/// c[i][j] = sum_l a[i][l] * b[l][j] for a:[m x k], b:[k x n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// x:[n x in] * weight:[in x out] + bias:[out], bias added to every row.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);

/// Numerically stable softmax along `axis` (max subtracted before exponentiation).
Tensor softmax(const Tensor& x, std::size_t axis);

/// Normalizes each row over the last axis, then applies per-feature gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

/// GELU, tanh approximation.
Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);

/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

/// Rows of table:[v x e] picked by index, giving [n x e].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);

/// Interleaves equally shaped [n x e] tensors row by row:
/// out row (i * parts + p) = parts[p] row i.
Tensor interleave_rows(std::span<const Tensor> parts);

/// Rows offset, offset + stride, ... of x:[n x e].
Tensor select_rows(const Tensor& x, std::size_t stride, std::size_t offset);

/// Multi-head scaled dot-product attention over `n_seq` independent sequences.
///
/// q, k, v are [n_seq * seq_len x embed]; heads split the embedding evenly.
/// Query i of a sequence attends to key j only when j <= i and key_mask[j] is set
/// (mask indexed per row). A query with no admissible key yields a zero row.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_seq,
                        std::size_t n_heads, std::span<const std::uint8_t> key_mask);

/// Mean of squared error over the rows flagged in row_mask and all columns.
Tensor masked_mse(const Tensor& pred, const Tensor& target, std::span<const std::uint8_t> row_mask);

}  // namespace gdt
