// Relation representation from the positive support set.
//
// The k support rows of z_0 run through a bidirectional LSTM; hidden states
// are attention-pooled and projected:
//   gamma_t = softmax_t(w . h_t)
//   r'      = W_out (sum_t gamma_t h_t)
#pragma once

#include "fskgc/autodiff.hpp"

#include <string>
#include <vector>

namespace fskgc {

struct LstmCellParams {
    Param *W_i = nullptr, *U_i = nullptr, *b_i = nullptr;
    Param *W_f = nullptr, *U_f = nullptr, *b_f = nullptr;
    Param *W_g = nullptr, *U_g = nullptr, *b_g = nullptr;
    Param *W_o = nullptr, *U_o = nullptr, *b_o = nullptr;
    int input = 0;
    int hidden = 0;

    static LstmCellParams create(ParamRegistry& reg, const std::string& prefix, int input, int hidden, Rng& rng) {
        if (input < 1 || hidden < 1) throw ConfigError("LstmCellParams: input and hidden sizes must be >= 1");
        LstmCellParams p;
        p.input = input;
        p.hidden = hidden;
        auto gate = [&](const char* g, Param*& W, Param*& U, Param*& b) {
            W = &reg.create(prefix + ".W_" + g, {hidden, input}, rng);
            U = &reg.create(prefix + ".U_" + g, {hidden, hidden}, rng);
            b = &reg.create_zeros(prefix + ".b_" + g, {hidden});
        };
        gate("i", p.W_i, p.U_i, p.b_i);
        gate("f", p.W_f, p.U_f, p.b_f);
        gate("g", p.W_g, p.U_g, p.b_g);
        gate("o", p.W_o, p.U_o, p.b_o);
        return p;
    }
};

struct LstmState {
    Val h;
    Val c;
};

inline LstmState lstm_cell(Tape& t, const LstmCellParams& p, Val x, Val h_prev, Val c_prev) {
    auto pre = [&](Param* W, Param* U, Param* b) {
        return add(t, add(t, matvec(t, t.leaf(*W), x), matvec(t, t.leaf(*U), h_prev)), t.leaf(*b));
    };
    const Val i = sigmoid_op(t, pre(p.W_i, p.U_i, p.b_i));
    const Val f = sigmoid_op(t, pre(p.W_f, p.U_f, p.b_f));
    const Val g = tanh_op(t, pre(p.W_g, p.U_g, p.b_g));
    const Val o = sigmoid_op(t, pre(p.W_o, p.U_o, p.b_o));
    const Val c = add(t, mul(t, f, c_prev), mul(t, i, g));
    return {mul(t, o, tanh_op(t, c)), c};
}

struct RelationLearnerParams {
    LstmCellParams fwd;
    LstmCellParams bwd;
    Param* w = nullptr;      // 2m
    Param* W_out = nullptr;  // d_r x 2m
    int hidden = 0;

    static RelationLearnerParams create(ParamRegistry& reg, int input, int hidden, int out_dim, Rng& rng) {
        RelationLearnerParams p;
        p.hidden = hidden;
        p.fwd = LstmCellParams::create(reg, "relation.fwd", input, hidden, rng);
        p.bwd = LstmCellParams::create(reg, "relation.bwd", input, hidden, rng);
        p.w = &reg.create("relation.w", {2 * hidden}, rng);
        p.W_out = &reg.create("relation.W_out", {out_dim, 2 * hidden}, rng);
        return p;
    }
};

// Bi-LSTM over support rows: h_t = concat(forward_t, backward_t), width 2m.
inline std::vector<Val> encode_support(Tape& t, const RelationLearnerParams& p, Val z0_pos) {
    const Tensor& z = t.value(z0_pos);
    if (z.rank() != 2 || z.rows() < 1)
        throw ContractError("encode_support: need a non-empty support matrix, got shape " + shape_str(z.shape));
    const int k = z.rows();

    const Val zero = t.constant(Tensor({p.hidden}));
    std::vector<Val> fwd(static_cast<size_t>(k)), bwd(static_cast<size_t>(k));
    LstmState s{zero, zero};
    for (int i = 0; i < k; ++i) {
        s = lstm_cell(t, p.fwd, row(t, z0_pos, i), s.h, s.c);
        fwd[static_cast<size_t>(i)] = s.h;
    }
    s = {zero, zero};
    for (int i = k - 1; i >= 0; --i) {
        s = lstm_cell(t, p.bwd, row(t, z0_pos, i), s.h, s.c);
        bwd[static_cast<size_t>(i)] = s.h;
    }
    std::vector<Val> out(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) out[static_cast<size_t>(i)] = concat(t, {fwd[static_cast<size_t>(i)], bwd[static_cast<size_t>(i)]});
    return out;
}

inline Val support_attention(Tape& t, const RelationLearnerParams& p, const std::vector<Val>& hidden) {
    if (hidden.empty()) throw ContractError("support_attention: no hidden states");
    const Val w = t.leaf(*p.w);
    std::vector<Val> scores;
    scores.reserve(hidden.size());
    for (Val h : hidden) scores.push_back(dot(t, w, h));
    return softmax(t, concat(t, scores));
}

inline Val pool_relation(Tape& t, const RelationLearnerParams& p, const std::vector<Val>& hidden) {
    const Val gamma = support_attention(t, p, hidden);
    const Val pooled = tmatvec(t, stack_rows(t, hidden), gamma);
    return matvec(t, t.leaf(*p.W_out), pooled);
}

// z0 rows of the positive support set -> r'.
inline Val encode_relation(Tape& t, const RelationLearnerParams& p, Val z0_pos) {
    return pool_relation(t, p, encode_support(t, p, z0_pos));
}

}  // namespace fskgc
