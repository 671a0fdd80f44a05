#pragma once

#include <cstddef>
#include <vector>

#include "feederclip/tape.hpp"

namespace feederclip {

// Differentiable ops on rank-2 tensors. Scalar results are rank 0. Shape
// mismatches throw std::invalid_argument naming the op and both shapes.

Var matmul(Var a, Var b);
Var transpose(Var a);
/// Element-wise sum. `b` may also be a 1xC row broadcast over the rows of `a`,
/// or both may be scalars.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
/// Multiplies every entry of `a` by the scalar variable `factor`.
Var scale(Var a, Var factor);

Var relu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var exp(Var a);

Var row_softmax(Var a);
Var l2_normalize_rows(Var a);
/// Mean over rows: RxC -> 1xC.
Var mean_pool_rows(Var a);
/// Mean over consecutive row groups of `rows_per_segment`: (S*n)xC -> SxC.
Var segment_mean_rows(Var a, std::size_t rows_per_segment);

/// Applies block_i (n_i x n_i) to the i-th consecutive group of n_i rows of x.
/// The blocks are constants and must outlive the tape.
Var block_propagate(const std::vector<const Tensor*>& blocks, Var x);

/// Row means of gathered rows: out[i] = mean_k table[indices[i][k]].
Var embedding_mean(Var table, const std::vector<std::vector<std::size_t>>& indices);

/// Mean over rows of softmax cross-entropy against integer labels. Entries with
/// a nonzero `excluded` flag (row-major, same size as logits) are dropped from
/// that row's partition function.
Var cross_entropy_with_logits(Var logits, const std::vector<std::size_t>& labels,
                              const std::vector<unsigned char>& excluded = {});

/// Mean of (optionally weighted) binary cross-entropy on logits.
Var binary_cross_entropy_with_logits(Var logits, const Tensor& targets,
                                     const Tensor& weights = {});

Var mse(Var a, Var b);

/// 0.5 * sum(mu^2 + exp(logvar) - logvar - 1) per sample, mean over samples,
/// where a sample spans `rows_per_sample` consecutive rows.
Var gaussian_kl_to_standard(Var mu, Var logvar, std::size_t rows_per_sample = 1);

}  // namespace feederclip
