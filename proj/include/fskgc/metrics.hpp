// Ranking metrics for tail prediction.
//
// A query (h, r, ?) is scored against a candidate list; the rank of the true
// tail is 1-based. Filtered ranking removes candidates that are known true
// tails for (h, r) other than the query tail itself. Ties are broken by
// candidate entity id ascending, so ranks are deterministic.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "fskgc/kg_data.hpp"
#include "fskgc/numerics.hpp"

namespace fskgc {

struct ScoredCandidate {
    int entity = -1;
    double score = 0.0;
};

// Rank of `target` among `scored` (which must contain it), higher score first,
// ties broken by entity id ascending.
inline int rank_of(const std::vector<ScoredCandidate>& scored, int target) {
    const ScoredCandidate* self = nullptr;
    for (const ScoredCandidate& c : scored)
        if (c.entity == target) self = &c;
    if (self == nullptr) throw ContractError("rank_of: target entity not in candidate list");
    int rank = 1;
    for (const ScoredCandidate& c : scored) {
        if (c.entity == target) continue;
        if (c.score > self->score || (c.score == self->score && c.entity < target)) ++rank;
    }
    return rank;
}

// Candidate list for one query: the relation's pool plus the true tail, with
// other known true tails removed when `filtered`. The true tail is always
// included exactly once.
inline std::vector<int> query_candidates(const Dataset& ds, const Triple& query, bool filtered) {
    std::vector<int> out;
    for (int c : ds.candidates_for(query.relation)) {
        if (c == query.tail) continue;
        if (filtered && ds.is_true(query.head, query.relation, c)) continue;
        out.push_back(c);
    }
    out.push_back(query.tail);
    return out;
}

struct Metrics {
    double mrr = 0.0;
    double hits1 = 0.0;
    double hits5 = 0.0;
    double hits10 = 0.0;
    long n_queries = 0;
};

inline Metrics compute_metrics(const std::vector<int>& ranks) {
    if (ranks.empty()) throw ContractError("compute_metrics: no ranks");
    Metrics m;
    for (int r : ranks) {
        if (r < 1) throw ContractError("compute_metrics: rank " + std::to_string(r) + " is not 1-based");
        m.mrr += 1.0 / r;
        m.hits1 += r <= 1 ? 1.0 : 0.0;
        m.hits5 += r <= 5 ? 1.0 : 0.0;
        m.hits10 += r <= 10 ? 1.0 : 0.0;
    }
    const double n = static_cast<double>(ranks.size());
    m.mrr /= n;
    m.hits1 /= n;
    m.hits5 /= n;
    m.hits10 /= n;
    m.n_queries = static_cast<long>(ranks.size());
    return m;
}

}  // namespace fskgc
