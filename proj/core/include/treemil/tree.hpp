#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "treemil/tensor.hpp"

namespace treemil {

// Geometry of the N-ary hierarchy over one window. Level 1 is the root,
// level `levels` holds the padded_len leaves; level s has ary^(s-1) slots,
// each covering ary^(levels-s) consecutive time steps.
struct TreeConfig {
    std::size_t ary = 2;        // children per node (N)
    std::size_t window_len = 0; // true time steps (T)
    std::size_t levels = 0;     // S
    std::size_t padded_len = 0; // ary^(levels-1), >= window_len, minimal
};

// levels = ceil(log_ary(window_len)) + 1; padded_len = ary^(levels-1).
TreeConfig make_tree_config(std::size_t ary, std::size_t window_len);

std::size_t level_size(const TreeConfig& cfg, std::size_t level);
// Global node ids order levels top-down, so the root is id 0 and the leaves
// occupy the tail. Levels and in-level indices are 1-based like the tree
// coordinates; ids are 0-based.
std::size_t level_offset(const TreeConfig& cfg, std::size_t level);
std::size_t node_count(const TreeConfig& cfg);
std::size_t global_id(const TreeConfig& cfg, std::size_t level, std::size_t index);

// Inclusive 1-based leaf span covered by node (level, index).
std::pair<std::size_t, std::size_t> node_span(const TreeConfig& cfg, std::size_t level,
                                              std::size_t index);

// A node is padded exactly when every leaf it covers lies beyond window_len,
// which matches the recursive rule: a leaf is padded iff its time index
// exceeds window_len, an inner node iff all of its children are padded.
bool node_is_pad(const TreeConfig& cfg, std::size_t level, std::size_t index);

// Pad flags for all nodes in global-id order.
std::vector<std::uint8_t> tree_pad_mask(const TreeConfig& cfg);

// Pad flags for one level.
std::vector<std::uint8_t> level_pad_mask(const TreeConfig& cfg, std::size_t level);

// Leaf embedding parameters: one width-3 linear convolution over the input
// channels plus a fixed sinusoidal position table. The table is deterministic
// from (padded_len, dim) and never trained.
struct EmbeddingParams {
    Tensor conv_kernel; // [dim, channels, width]
    Tensor conv_bias;   // [dim]
    Tensor pos_table;   // [padded_len, dim], constant
};

Tensor make_positional_table(std::size_t padded_len, std::size_t dim);

// Leaf t (1-based, t <= window_len) = conv output at t + position encoding
// at t; leaves beyond window_len are zero vectors (they are pad-masked).
// window is [channels, window_len]; result is [padded_len, dim].
// Non-finite window values raise DataError.
Tensor embed_leaves(const Tensor& window, const EmbeddingParams& params,
                    const TreeConfig& cfg);

// All node embeddings of one window, levels stacked top-down.
struct TreeEmbedding {
    TreeConfig cfg;
    Tensor nodes;                  // [node_count, dim]
    std::vector<std::uint8_t> pad; // per node, global-id order
};

// Bottom-up construction: each parent is the elementwise max over its
// non-padded children; a parent whose children are all padded is itself
// padded with a zero embedding. Padded children are excluded from the max
// rather than contributing zeros, so negative coordinates survive.
TreeEmbedding build_tree(const Tensor& leaves, const TreeConfig& cfg);

} // namespace treemil
