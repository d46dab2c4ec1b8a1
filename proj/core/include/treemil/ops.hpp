#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "treemil/tensor.hpp"

namespace treemil {

// Dense reverse-mode ops. Every op either works elementwise on identically
// shaped operands or documents its broadcasting rule; shape violations throw
// ShapeError naming the op and both shapes. Gradients are exact analytic
// expressions (checked against central finite differences in the tests).

// a + b. Shapes must match, or b may be rank-1 with length == a's last axis,
// in which case b is broadcast along the last axis (bias add).
Tensor add(const Tensor& a, const Tensor& b);

// Elementwise product; shapes must match exactly.
Tensor multiply(const Tensor& a, const Tensor& b);

// scale * a + shift, elementwise with scalar constants.
Tensor affine(const Tensor& a, double scale, double shift);

// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// Natural log; caller is responsible for keeping inputs positive
// (see clamp).
Tensor log(const Tensor& a);

// Clamp into [lo, hi]. Gradient passes through strictly inside the interval
// and is zero where the clamp binds.
Tensor clamp(const Tensor& a, double lo, double hi);

// Softmax along the designated axis. Outputs are non-negative and sum to 1
// along that axis.
Tensor softmax(const Tensor& a, std::size_t axis);

// Reductions to a scalar over all elements.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Elementwise max across a set of identically shaped tensors. Gradient flows
// only to the argmax element per coordinate; ties break toward the lowest
// set index.
Tensor max_reduce(std::span<const Tensor> xs);

// Elementwise mean across a set of identically shaped tensors.
Tensor mean_reduce(std::span<const Tensor> xs);

// Concatenate along axis 0. All inputs must share rank and trailing axes.
Tensor concat_rows(std::span<const Tensor> xs);

// Rows [begin, end) of a rank-1 or rank-2 tensor.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);

// Row gather by index list; an index may repeat. Backward scatter-adds.
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx);

// Rows of a where mask is nonzero, in order. mask.size() == a rows.
Tensor masked_select_rows(const Tensor& a, const std::vector<std::uint8_t>& mask);

enum class Reduce { Max, Mean };

// Pool the listed rows of a [m,d] matrix into a single [1,d] row.
// Max ties break toward the earliest listed row.
Tensor reduce_rows(const Tensor& a, const std::vector<std::size_t>& idx, Reduce kind);

// Grouped masked max over consecutive row blocks: rows of a [m,d] are grouped
// into m/group blocks; output row i is the elementwise max over the non-masked
// rows of block i (ties toward the lowest row), or zeros if the whole block is
// masked. pad.size() == m; nonzero entries are excluded from the max.
Tensor group_max_rows(const Tensor& a, std::size_t group,
                      const std::vector<std::uint8_t>& pad);

// Zero out the rows whose mask entry is nonzero; gradient is likewise zeroed.
Tensor mask_rows(const Tensor& a, const std::vector<std::uint8_t>& pad);

// 1-d convolution over the time axis, stride 1, odd kernel width, symmetric
// zero padding, so the output has the same length as the input. The result is
// time-major: input [channels, time], kernel [filters, channels, width],
// bias [filters] -> output [time, filters].
Tensor conv1d_same(const Tensor& input, const Tensor& kernel, const Tensor& bias);

// Per-row layer normalisation of a [n,d] matrix with learned gain and shift.
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Multi-head attention over per-node index sets. q, k, v are [B*n, d] with B
// consecutive blocks of n rows; sets[i] lists the rows (within a block)
// attended by node i and applies to every block with the block offset added.
// Head h uses the column slice [h*d/heads, (h+1)*d/heads). Rows with an empty
// set produce zeros. Logits are scaled by 1/sqrt(d/heads).
Tensor neighborhood_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                              std::shared_ptr<const std::vector<std::vector<std::uint32_t>>> sets,
                              std::size_t batch, std::size_t heads);

} // namespace treemil
