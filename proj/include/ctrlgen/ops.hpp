#pragma once

#include <vector>

#include "ctrlgen/mask_fwd.hpp"
#include "ctrlgen/tensor.hpp"

namespace ctrlgen::ops {

// Elementwise / shape
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_bias(const Tensor& mat, const Tensor& bias);  // [T,C] + [C]
Tensor gelu(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);

// Normalisation / distributions
Tensor softmax(const Tensor& x, int axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Lookup / gather
Tensor embedding(const Tensor& table, const std::vector<int>& ids);
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& x, int start, int len);

// Reductions / losses
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& pred, const Tensor& target);
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);  // mean NLL over rows

// Multi-head attention with an optional mask (nullptr = all allowed).
// mask is validated against (tq, tk); a query row with no allowed key is an
// error. Output row i is a convex combination of V rows the mask allows.
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionMask* mask, int heads);

}  // namespace ctrlgen::ops
