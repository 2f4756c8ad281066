// Translation scoring of query triples against the episode latent.
//
//   h' = h + W_h z,  t' = t + W_t z
//   Score(h, r, t) = -|| h' + r' - t' ||_2
//
// Margin loss is the mean hinge over paired positive/negative scores; the
// total training loss adds the diffusion MSE without weighting.
#pragma once

#include "fskgc/autodiff.hpp"

#include <utility>
#include <vector>

namespace fskgc {

struct ScorerParams {
    Param* W_h = nullptr;  // d x |z|
    Param* W_t = nullptr;  // d x |z|

    static ScorerParams create(ParamRegistry& reg, int d, int z_width, Rng& rng) {
        if (d < 1 || z_width < 1) throw ConfigError("ScorerParams: dimensions must be >= 1");
        ScorerParams p;
        p.W_h = &reg.create("scorer.W_h", {d, z_width}, rng);
        p.W_t = &reg.create("scorer.W_t", {d, z_width}, rng);
        return p;
    }
};

inline std::pair<Val, Val> project_entities(Tape& t, const ScorerParams& p, Val head, Val tail, Val z) {
    const Val h2 = add(t, head, matvec(t, t.leaf(*p.W_h), z));
    const Val t2 = add(t, tail, matvec(t, t.leaf(*p.W_t), z));
    return {h2, t2};
}

inline Val score(Tape& t, Val head_p, Val r_prime, Val tail_p) {
    return scale(t, norm2(t, sub(t, add(t, head_p, r_prime), tail_p)), -1.0);
}

// (1/N) sum_i max(0, delta - (pos_i - neg_i))
inline Val margin_loss(Tape& t, const std::vector<Val>& pos, const std::vector<Val>& neg, double delta) {
    if (pos.empty() || pos.size() != neg.size())
        throw ContractError("margin_loss: need equal nonzero counts, got " + std::to_string(pos.size()) + " and " +
                            std::to_string(neg.size()));
    std::vector<Val> hinges;
    hinges.reserve(pos.size());
    const Val d = t.constant_scalar(delta);
    for (size_t i = 0; i < pos.size(); ++i) hinges.push_back(relu(t, sub(t, d, sub(t, pos[i], neg[i]))));
    return mean(t, concat(t, hinges));
}

inline Val total_loss(Tape& t, Val margin, Val mse) { return add(t, margin, mse); }

}  // namespace fskgc
