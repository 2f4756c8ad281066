// Single-query attention pooling of denoised support rows.
//
//   AttnPool(X) = MLP(softmax((W_q q) . (W_k x_i) / sqrt(width)) * W_v x_i)
//
// Positive and negative halves are pooled by separate parameter sets and
// concatenated into the latent z.
#pragma once

#include "fskgc/autodiff.hpp"

#include <string>
#include <utility>

namespace fskgc {

struct PoolerParams {
    Param* q = nullptr;      // learnable query, width w
    Param* W_q = nullptr;    // w x w
    Param* W_k = nullptr;    // w x w
    Param* W_v = nullptr;    // w x w
    Param* mlp_w1 = nullptr; // w x w
    Param* mlp_b1 = nullptr; // w
    Param* mlp_w2 = nullptr; // w x w
    Param* mlp_b2 = nullptr; // w
    int width = 0;

    static PoolerParams create(ParamRegistry& reg, const std::string& prefix, int width, Rng& rng) {
        if (width < 1) throw ConfigError("PoolerParams: width must be >= 1");
        PoolerParams p;
        p.width = width;
        p.q = &reg.create(prefix + ".q", {width}, rng);
        p.W_q = &reg.create(prefix + ".W_q", {width, width}, rng);
        p.W_k = &reg.create(prefix + ".W_k", {width, width}, rng);
        p.W_v = &reg.create(prefix + ".W_v", {width, width}, rng);
        p.mlp_w1 = &reg.create(prefix + ".mlp_w1", {width, width}, rng);
        p.mlp_b1 = &reg.create_zeros(prefix + ".mlp_b1", {width});
        p.mlp_w2 = &reg.create(prefix + ".mlp_w2", {width, width}, rng);
        p.mlp_b2 = &reg.create_zeros(prefix + ".mlp_b2", {width});
        return p;
    }
};

// Softmax over scaled query-key dots, one weight per row of X.
inline Val attn_weights(Tape& t, const PoolerParams& p, Val X) {
    const Tensor& xv = t.value(X);
    if (xv.rank() != 2 || xv.rows() < 1)
        throw ContractError("attn_pool: need a non-empty row matrix, got shape " + shape_str(xv.shape));
    if (xv.cols() != p.width)
        throw DimensionError("attn_pool: row width " + std::to_string(xv.cols()) + ", pooler expects " +
                             std::to_string(p.width));
    const Val q_proj = matvec(t, t.leaf(*p.W_q), t.leaf(*p.q));
    const Val keys = linear(t, X, t.leaf(*p.W_k), std::nullopt);
    const Val scores = scale(t, matvec(t, keys, q_proj), 1.0 / std::sqrt(static_cast<double>(p.width)));
    return softmax(t, scores);
}

inline Val attn_pool(Tape& t, const PoolerParams& p, Val X) {
    const Val weights = attn_weights(t, p, X);
    const Val values = linear(t, X, t.leaf(*p.W_v), std::nullopt);
    const Val pooled = tmatvec(t, values, weights);
    const Val hidden = leaky_relu(t, add(t, matvec(t, t.leaf(*p.mlp_w1), pooled), t.leaf(*p.mlp_b1)), kLeakySlope);
    return add(t, matvec(t, t.leaf(*p.mlp_w2), hidden), t.leaf(*p.mlp_b2));
}

// Split the 2k denoised rows into halves, pool each, concatenate.
inline Val pool_pos_neg(Tape& t, const PoolerParams& pos, const PoolerParams& neg, Val z0_hat, int k) {
    const Tensor& zv = t.value(z0_hat);
    if (k < 1) throw ContractError("pool_pos_neg: k must be >= 1");
    if (zv.rank() != 2 || zv.rows() != 2 * k)
        throw ContractError("pool_pos_neg: expected " + std::to_string(2 * k) + " rows, got shape " +
                            shape_str(zv.shape));
    auto halves = split(t, z0_hat, {k, k}, 0);
    return concat(t, {attn_pool(t, pos, halves[0]), attn_pool(t, neg, halves[1])});
}

}  // namespace fskgc
