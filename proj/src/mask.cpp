#include "ctrlgen/mask.hpp"

namespace ctrlgen {

AttentionMask AttentionMask::slice(int row_start, int nrows, int ncols) const {
    AttentionMask out;
    out.mode = mode;
    out.rows = nrows;
    out.cols = ncols;
    out.allowed.resize(static_cast<std::size_t>(nrows) * ncols);
    for (int r = 0; r < nrows; ++r)
        for (int c = 0; c < ncols; ++c)
            out.allowed[static_cast<std::size_t>(r) * ncols + c] = allowed[static_cast<std::size_t>(r + row_start) * cols + c];
    return out;
}

AttentionMask build_block_causal_mask(int control_len, const std::vector<int>& gen_blocks, MaskMode mode) {
    if (control_len < 0) throw ValueError("control length must be >= 0");
    int gen_total = 0;
    for (int b : gen_blocks) {
        if (b <= 0) throw ValueError("generation block sizes must be positive");
        gen_total += b;
    }
    if (gen_total == 0) throw ValueError("empty generation sequence");

    AttentionMask m;
    m.mode = mode;
    m.control_len = control_len;
    m.block_sizes = gen_blocks;
    m.rows = m.cols = control_len + gen_total;
    m.allowed.assign(static_cast<std::size_t>(m.rows) * m.cols, 0);

    auto set = [&](int r, int c) { m.allowed[static_cast<std::size_t>(r) * m.cols + c] = 1; };

    // control rows: control columns only
    for (int r = 0; r < control_len; ++r)
        for (int c = 0; c < control_len; ++c) set(r, c);

    // generation rows: all control columns, plus generation columns by mode
    std::vector<int> block_of(static_cast<std::size_t>(gen_total));
    {
        int pos = 0;
        for (std::size_t k = 0; k < gen_blocks.size(); ++k)
            for (int i = 0; i < gen_blocks[k]; ++i) block_of[static_cast<std::size_t>(pos++)] = static_cast<int>(k);
    }
    for (int gr = 0; gr < gen_total; ++gr) {
        const int r = control_len + gr;
        for (int c = 0; c < control_len; ++c) set(r, c);
        for (int gc = 0; gc < gen_total; ++gc) {
            const bool ok = (mode == MaskMode::flow) || (block_of[static_cast<std::size_t>(gc)] <= block_of[static_cast<std::size_t>(gr)]);
            if (ok) set(r, control_len + gc);
        }
    }
    return m;
}

}  // namespace ctrlgen
