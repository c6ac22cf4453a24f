#pragma once

#include <cstdint>
#include <vector>

#include "ctrlgen/tensor.hpp"

namespace ctrlgen {

enum class MaskMode { ar, flow };

// Block-causal attention mask. Control tokens form a prefix block that only
// attends within itself; generation rows always see the full control block.
// In AR mode generation block k sees generation blocks <= k (intra-block
// attention included); in flow mode generation rows see all generation rows.
struct AttentionMask {
    MaskMode mode = MaskMode::flow;
    int control_len = 0;
    std::vector<int> block_sizes;  // generation blocks, in order
    int rows = 0, cols = 0;        // rows == cols == control_len + sum(blocks)
    std::vector<std::uint8_t> allowed;

    bool is_allowed(int r, int c) const { return allowed[static_cast<std::size_t>(r) * cols + c] != 0; }
    const std::uint8_t* row(int r) const { return allowed.data() + static_cast<std::size_t>(r) * cols; }

    // Sub-mask of rows [row_start, row_start+nrows) x cols [0, ncols).
    AttentionMask slice(int row_start, int nrows, int ncols) const;
};

AttentionMask build_block_causal_mask(int control_len, const std::vector<int>& gen_blocks, MaskMode mode);

}  // namespace ctrlgen
