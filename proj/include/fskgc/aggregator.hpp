// Neighbor-attention entity encoder.
//
// Each entity is updated from its background neighborhood:
//   m_uv   = W_r [h_u; e_uv; h_v]          per-edge message
//   alpha  = softmax_u LeakyReLU(w . [h_v; m_uv])
//   h'_v   = sum_u alpha_uv m_uv + W_loop h_v
// Two rounds with shared parameters give every entity 2-hop reach. Triples
// are represented as the concatenation of the encoded head and tail.
#pragma once

#include "fskgc/autodiff.hpp"
#include "fskgc/kg_data.hpp"

#include <unordered_map>

namespace fskgc {

struct AggregatorParams {
    Param* W_r = nullptr;     // d x 3d
    Param* w = nullptr;       // 2d
    Param* W_loop = nullptr;  // d x d

    static AggregatorParams create(ParamRegistry& reg, int d, Rng& rng) {
        AggregatorParams p;
        p.W_r = &reg.create("aggregator.W_r", {d, 3 * d}, rng);
        p.w = &reg.create("aggregator.w", {2 * d}, rng);
        p.W_loop = &reg.create("aggregator.W_loop", {d, d}, rng);
        return p;
    }
};

namespace detail {

inline Val edge_message(Tape& t, const AggregatorParams& p, Val h_u, Val e_uv, Val h_v) {
    return matvec(t, t.leaf(*p.W_r), concat(t, {h_u, e_uv, h_v}));
}

}  // namespace detail

// First-round messages for one entity, straight from the embedding store.
inline std::vector<Val> compute_messages(Tape& t, const AggregatorParams& p, int v, const NeighborGraph& g,
                                         const EmbeddingStore& store) {
    const Val ents = t.leaf(*store.entities);
    const Val rels = t.leaf(*store.relations);
    const Val h_v = row(t, ents, v);
    std::vector<Val> out;
    out.reserve(g.neighbors(v).size());
    for (const auto& [rel, u] : g.neighbors(v))
        out.push_back(detail::edge_message(t, p, row(t, ents, u), row(t, rels, rel), h_v));
    return out;
}

// Softmax over LeakyReLU-scored (center, message) pairs.
inline Val attention_coefficients(Tape& t, const AggregatorParams& p, Val h_v, const std::vector<Val>& messages) {
    if (messages.empty()) throw ContractError("attention_coefficients: entity has no messages");
    const Val w = t.leaf(*p.w);
    std::vector<Val> scores;
    scores.reserve(messages.size());
    for (Val m : messages) scores.push_back(leaky_relu(t, dot(t, w, concat(t, {h_v, m})), kLeakySlope));
    return softmax(t, concat(t, scores));
}

namespace detail {

inline Val aggregate_from(Tape& t, const AggregatorParams& p, Val h_v, const std::vector<Val>& messages) {
    const Val self = matvec(t, t.leaf(*p.W_loop), h_v);
    if (messages.empty()) return self;
    const Val alpha = attention_coefficients(t, p, h_v, messages);
    return add(t, tmatvec(t, stack_rows(t, messages), alpha), self);
}

}  // namespace detail

// Single aggregation round for one entity over store embeddings.
inline Val aggregate_entity(Tape& t, const AggregatorParams& p, int v, const NeighborGraph& g,
                            const EmbeddingStore& store) {
    return detail::aggregate_from(t, p, row(t, t.leaf(*store.entities), v), compute_messages(t, p, v, g, store));
}

// Per-episode encoder. Memoizes each (round, entity) value so shared
// neighborhoods are computed once per tape.
class EntityEncoder {
public:
    EntityEncoder(Tape& t, const AggregatorParams& p, const NeighborGraph& g, const EmbeddingStore& store,
                  int rounds = 2)
        : tape_(t), params_(p), graph_(g), store_(store), rounds_(rounds) {
        if (rounds_ < 0) throw ContractError("EntityEncoder: rounds must be >= 0");
    }

    // Final-round representation h'_v.
    Val encode(int entity) { return rep(entity, rounds_); }

    // concat(h'_head, h'_tail), width 2d.
    Val encode_pair(const Triple& triple) {
        return concat(tape_, {encode(triple.head), encode(triple.tail)});
    }

    // One row per triple, order preserved; (n, 2d).
    Val encode_triples(const std::vector<Triple>& triples) {
        if (triples.empty()) throw ContractError("encode_triples: no triples");
        std::vector<Val> rows;
        rows.reserve(triples.size());
        for (const Triple& tr : triples) rows.push_back(encode_pair(tr));
        return stack_rows(tape_, rows);
    }

private:
    Val rep(int entity, int round) {
        if (entity < 0 || entity >= graph_.entity_count())
            throw DataError("EntityEncoder: entity id " + std::to_string(entity) + " out of range");
        if (round == 0) return row(tape_, tape_.leaf(*store_.entities), entity);
        const uint64_t key = (static_cast<uint64_t>(round) << 32) | static_cast<uint64_t>(entity);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;

        const Val h_v = rep(entity, round - 1);
        const Val rels = tape_.leaf(*store_.relations);
        std::vector<Val> messages;
        for (const auto& [rel, u] : graph_.neighbors(entity))
            messages.push_back(detail::edge_message(tape_, params_, rep(u, round - 1), row(tape_, rels, rel), h_v));
        const Val out = detail::aggregate_from(tape_, params_, h_v, messages);
        cache_.emplace(key, out);
        return out;
    }

    Tape& tape_;
    const AggregatorParams& params_;
    const NeighborGraph& graph_;
    const EmbeddingStore& store_;
    int rounds_;
    std::unordered_map<uint64_t, Val> cache_;
};

}  // namespace fskgc
