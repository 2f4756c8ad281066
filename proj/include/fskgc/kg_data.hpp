// Knowledge-graph dataset loading, neighborhood structure and few-shot
// episode sampling.
//
// Expected directory layout (the common few-shot KGC distribution format):
//   path_graph                    background triples, TSV head<TAB>rel<TAB>tail
//   train_tasks.json              relation -> [[h, r, t], ...]
//   dev_tasks.json (or valid_tasks.json), test_tasks.json
//   rel2candidates.json           optional, relation -> [tail entity, ...]
//   ent2ids / rel2ids             optional, name -> id (fixes vocab order)
#pragma once

#include "fskgc/autodiff.hpp"
#include "fskgc/numerics.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace fskgc {

struct Triple {
    int head = -1;
    int relation = -1;
    int tail = -1;
    bool operator==(const Triple&) const = default;
};

enum class Split { train = 0, valid = 1, test = 2 };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::valid: return "valid";
        default: return "test";
    }
}

// Triples of one task relation, in file order.
struct TaskRelation {
    int relation = -1;
    std::vector<Triple> triples;
};

class Dataset {
public:
    std::vector<std::string> entity_names;
    std::vector<std::string> relation_names;
    std::vector<Triple> background;
    std::array<std::vector<TaskRelation>, 3> splits;

    int entity_count() const { return static_cast<int>(entity_names.size()); }
    int relation_count() const { return static_cast<int>(relation_names.size()); }
    const std::vector<TaskRelation>& split(Split s) const { return splits[static_cast<size_t>(s)]; }

    int entity_id(const std::string& name) const {
        auto it = entity_ids_.find(name);
        if (it == entity_ids_.end()) throw DataError("unknown entity '" + name + "'");
        return it->second;
    }
    int relation_id(const std::string& name) const {
        auto it = relation_ids_.find(name);
        if (it == relation_ids_.end()) throw DataError("unknown relation '" + name + "'");
        return it->second;
    }

    bool is_true(int h, int r, int t) const {
        auto it = true_tails_.find(pair_key(h, r));
        if (it == true_tails_.end()) return false;
        return std::binary_search(it->second.begin(), it->second.end(), t);
    }

    const std::vector<int>& true_tails(int h, int r) const {
        static const std::vector<int> empty;
        auto it = true_tails_.find(pair_key(h, r));
        return it == true_tails_.end() ? empty : it->second;
    }

    // Candidate tails of a task relation; either from rel2candidates or the
    // type-prefix fallback computed at load.
    const std::vector<int>& candidates_for(int relation) const {
        auto it = candidates_.find(relation);
        if (it == candidates_.end())
            throw DataError("no candidate set for relation '" + relation_names[static_cast<size_t>(relation)] + "'");
        return it->second;
    }

    // --- construction helpers (used by the loader and the synthetic writer) ---

    int intern_entity(const std::string& name) {
        auto it = entity_ids_.find(name);
        if (it != entity_ids_.end()) return it->second;
        if (locked_vocab_) throw DataError("unknown entity '" + name + "' (not in ent2ids)");
        const int id = static_cast<int>(entity_names.size());
        entity_names.push_back(name);
        entity_ids_[name] = id;
        return id;
    }

    int intern_relation(const std::string& name) {
        auto it = relation_ids_.find(name);
        if (it != relation_ids_.end()) return it->second;
        if (locked_vocab_) throw DataError("unknown relation '" + name + "' (not in rel2ids)");
        const int id = static_cast<int>(relation_names.size());
        relation_names.push_back(name);
        relation_ids_[name] = id;
        return id;
    }

    void lock_vocab() { locked_vocab_ = true; }

    void add_true(int h, int r, int t) { pending_true_.push_back(Triple{h, r, t}); }

    void set_candidates(int relation, std::vector<int> cands) { candidates_[relation] = std::move(cands); }
    bool has_candidates(int relation) const { return candidates_.count(relation) > 0; }

    void finalize() {
        for (const Triple& tr : pending_true_) true_tails_[pair_key(tr.head, tr.relation)].push_back(tr.tail);
        pending_true_.clear();
        for (auto& [k, tails] : true_tails_) {
            std::sort(tails.begin(), tails.end());
            tails.erase(std::unique(tails.begin(), tails.end()), tails.end());
        }
        check_disjoint_partitions();
    }

private:
    static uint64_t pair_key(int h, int r) { return (static_cast<uint64_t>(h) << 24) | static_cast<uint64_t>(r); }

    void check_disjoint_partitions() const {
        std::unordered_map<int, Split> seen;
        for (Split s : {Split::train, Split::valid, Split::test}) {
            for (const TaskRelation& tr : split(s)) {
                auto it = seen.find(tr.relation);
                if (it != seen.end())
                    throw DataError("task relation '" + relation_names[static_cast<size_t>(tr.relation)] +
                                    "' appears in both " + split_name(it->second) + " and " + split_name(s));
                seen[tr.relation] = s;
            }
        }
    }

    std::unordered_map<std::string, int> entity_ids_;
    std::unordered_map<std::string, int> relation_ids_;
    std::unordered_map<uint64_t, std::vector<int>> true_tails_;
    std::unordered_map<int, std::vector<int>> candidates_;
    std::vector<Triple> pending_true_;
    bool locked_vocab_ = false;
};

namespace detail {

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw DataError("cannot open '" + p.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed JSON in '" + p.string() + "': " + e.what());
    }
    return j;
}

// Entity names in this corpus look like "concept:person:alice"; the type
// prefix is everything before the last colon.
inline std::string type_prefix(const std::string& name) {
    auto pos = name.rfind(':');
    return pos == std::string::npos ? std::string() : name.substr(0, pos);
}

}  // namespace detail

// Load the standard layout. Vocabulary order: ent2ids/rel2ids when present,
// otherwise first appearance (background file, then task files with sorted
// relation keys, then candidates), which makes loading idempotent.
inline Dataset load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    Dataset ds;

    const fs::path graph_path = dir / "path_graph";
    if (!fs::exists(graph_path)) throw DataError("missing background triple file '" + graph_path.string() + "'");

    auto task_path = [&](const char* base, const char* alt) -> fs::path {
        fs::path p = dir / base;
        if (fs::exists(p)) return p;
        if (alt) {
            fs::path q = dir / alt;
            if (fs::exists(q)) return q;
        }
        return p;
    };
    const fs::path train_path = task_path("train_tasks.json", nullptr);
    const fs::path valid_path = task_path("dev_tasks.json", "valid_tasks.json");
    const fs::path test_path = task_path("test_tasks.json", nullptr);
    for (const fs::path& p : {train_path, valid_path, test_path})
        if (!fs::exists(p)) throw DataError("missing task file '" + p.string() + "'");

    if (fs::exists(dir / "ent2ids")) {
        nlohmann::json e2i = detail::read_json_file(dir / "ent2ids");
        std::vector<std::pair<int, std::string>> by_id;
        for (auto& [name, id] : e2i.items()) by_id.emplace_back(id.get<int>(), name);
        std::sort(by_id.begin(), by_id.end());
        for (auto& [id, name] : by_id) ds.intern_entity(name);
    }
    if (fs::exists(dir / "rel2ids")) {
        nlohmann::json r2i = detail::read_json_file(dir / "rel2ids");
        std::vector<std::pair<int, std::string>> by_id;
        for (auto& [name, id] : r2i.items()) by_id.emplace_back(id.get<int>(), name);
        std::sort(by_id.begin(), by_id.end());
        for (auto& [id, name] : by_id) ds.intern_relation(name);
    }
    if (fs::exists(dir / "ent2ids") && fs::exists(dir / "rel2ids")) ds.lock_vocab();

    {
        std::ifstream in(graph_path);
        std::string line;
        long line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            const auto t1 = line.find('\t');
            const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
            if (t2 == std::string::npos)
                throw DataError("malformed line " + std::to_string(line_no) + " in '" + graph_path.string() + "'");
            std::string tail = line.substr(t2 + 1);
            if (!tail.empty() && tail.back() == '\r') tail.pop_back();
            Triple tr;
            tr.head = ds.intern_entity(line.substr(0, t1));
            tr.relation = ds.intern_relation(line.substr(t1 + 1, t2 - t1 - 1));
            tr.tail = ds.intern_entity(tail);
            ds.background.push_back(tr);
            ds.add_true(tr.head, tr.relation, tr.tail);
        }
    }

    const std::array<fs::path, 3> split_paths = {train_path, valid_path, test_path};
    for (size_t s = 0; s < 3; ++s) {
        nlohmann::json tasks = detail::read_json_file(split_paths[s]);
        if (!tasks.is_object())
            throw DataError("task file '" + split_paths[s].string() + "' must be a JSON object");
        for (auto& [rel_name, triples] : tasks.items()) {  // nlohmann iterates keys sorted
            TaskRelation tr;
            tr.relation = ds.intern_relation(rel_name);
            for (const auto& item : triples) {
                if (!item.is_array() || item.size() != 3)
                    throw DataError("task triple for '" + rel_name + "' is not a [head, relation, tail] triple");
                Triple t;
                t.head = ds.intern_entity(item[0].get<std::string>());
                t.relation = tr.relation;
                t.tail = ds.intern_entity(item[2].get<std::string>());
                tr.triples.push_back(t);
                ds.add_true(t.head, t.relation, t.tail);
            }
            ds.splits[s].push_back(std::move(tr));
        }
    }

    fs::path cand_path = dir / "rel2candidates.json";
    if (!fs::exists(cand_path)) cand_path = dir / "rel2candidates";
    if (fs::exists(cand_path)) {
        nlohmann::json r2c = detail::read_json_file(cand_path);
        if (!r2c.is_object()) throw DataError("candidate file '" + cand_path.string() + "' must be a JSON object");
        for (auto& [rel_name, cands] : r2c.items()) {
            const int rel = ds.intern_relation(rel_name);
            std::vector<int> ids;
            for (const auto& c : cands) ids.push_back(ds.intern_entity(c.get<std::string>()));
            ds.set_candidates(rel, std::move(ids));
        }
    }

    // Type-prefix fallback for task relations without a candidate file entry.
    std::unordered_map<std::string, std::vector<int>> prefix_groups;
    bool grouped = false;
    for (Split s : {Split::train, Split::valid, Split::test}) {
        for (const TaskRelation& tr : ds.split(s)) {
            if (ds.has_candidates(tr.relation)) continue;
            if (!grouped) {
                for (int e = 0; e < ds.entity_count(); ++e)
                    prefix_groups[detail::type_prefix(ds.entity_names[static_cast<size_t>(e)])].push_back(e);
                grouped = true;
            }
            std::unordered_set<std::string> prefixes;
            for (const Triple& t : tr.triples) prefixes.insert(detail::type_prefix(ds.entity_names[static_cast<size_t>(t.tail)]));
            std::vector<int> cands;
            bool untyped = prefixes.count(std::string()) > 0;
            if (untyped) {
                cands.resize(static_cast<size_t>(ds.entity_count()));
                std::iota(cands.begin(), cands.end(), 0);
            } else {
                for (const auto& p : prefixes) {
                    auto it = prefix_groups.find(p);
                    if (it != prefix_groups.end()) cands.insert(cands.end(), it->second.begin(), it->second.end());
                }
                std::sort(cands.begin(), cands.end());
                cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
            }
            ds.set_candidates(tr.relation, std::move(cands));
        }
    }

    ds.finalize();
    return ds;
}

// ---------------------------------------------------------------------------
// Neighborhood structure
// ---------------------------------------------------------------------------

// Per-entity (relation, neighbor) adjacency over background triples, both
// directions, truncated to max_neighbors by a per-entity seeded draw.
class NeighborGraph {
public:
    const std::vector<std::pair<int, int>>& neighbors(int entity) const {
        return adj_[static_cast<size_t>(entity)];
    }
    int entity_count() const { return static_cast<int>(adj_.size()); }

    std::vector<std::vector<std::pair<int, int>>> adj_;
};

inline NeighborGraph build_neighbor_graph(const Dataset& ds, int max_neighbors, uint64_t seed) {
    if (max_neighbors < 1) throw ContractError("build_neighbor_graph: max_neighbors must be >= 1");
    NeighborGraph g;
    g.adj_.resize(static_cast<size_t>(ds.entity_count()));
    for (const Triple& t : ds.background) {
        g.adj_[static_cast<size_t>(t.head)].emplace_back(t.relation, t.tail);
        if (t.tail != t.head) g.adj_[static_cast<size_t>(t.tail)].emplace_back(t.relation, t.head);
    }
    Rng base(seed);
    for (size_t e = 0; e < g.adj_.size(); ++e) {
        auto& lst = g.adj_[e];
        if (static_cast<int>(lst.size()) <= max_neighbors) continue;
        Rng local = base.fork(e);
        auto keep = local.sample_indices(static_cast<int>(lst.size()), max_neighbors);
        std::vector<std::pair<int, int>> kept;
        kept.reserve(static_cast<size_t>(max_neighbors));
        for (int i : keep) kept.push_back(lst[static_cast<size_t>(i)]);
        lst = std::move(kept);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

// One few-shot task. Extended support order is positives then negatives.
struct EpisodeTask {
    int relation = -1;
    std::vector<Triple> support_pos;
    std::vector<Triple> support_neg;
    std::vector<Triple> query_pos;
    std::vector<Triple> query_neg;
    std::vector<int> candidates;
};

// Replace the tail with a uniform draw from the relation's candidate pool,
// excluding the current tail and anything known to be true for (head, rel).
inline Triple corrupt_tail(const Triple& triple, const Dataset& ds, Rng& rng) {
    const std::vector<int>& pool = ds.candidates_for(triple.relation);
    std::vector<int> valid;
    valid.reserve(pool.size());
    for (int c : pool)
        if (c != triple.tail && !ds.is_true(triple.head, triple.relation, c)) valid.push_back(c);
    if (valid.empty())
        throw DataError("corrupt_tail: no valid negative tail for relation '" +
                        ds.relation_names[static_cast<size_t>(triple.relation)] + "'");
    Triple out = triple;
    out.tail = valid[static_cast<size_t>(rng.uniform_int(static_cast<int>(valid.size())))];
    return out;
}

inline EpisodeTask sample_episode(const Dataset& ds, const TaskRelation& task, int k, int n_query, Rng& rng) {
    const int n = static_cast<int>(task.triples.size());
    if (n < k + 1)
        throw DataError("sample_episode: relation '" + ds.relation_names[static_cast<size_t>(task.relation)] +
                        "' has " + std::to_string(n) + " triples, needs at least " + std::to_string(k + 1));
    EpisodeTask ep;
    ep.relation = task.relation;
    auto order = rng.sample_indices(n, n);
    for (int i = 0; i < k; ++i) ep.support_pos.push_back(task.triples[static_cast<size_t>(order[static_cast<size_t>(i)])]);
    const int q = std::min(n_query, n - k);
    for (int i = 0; i < q; ++i) ep.query_pos.push_back(task.triples[static_cast<size_t>(order[static_cast<size_t>(k + i)])]);
    for (const Triple& s : ep.support_pos) ep.support_neg.push_back(corrupt_tail(s, ds, rng));
    for (const Triple& qp : ep.query_pos) ep.query_neg.push_back(corrupt_tail(qp, ds, rng));
    ep.candidates = ds.candidates_for(task.relation);
    return ep;
}

// Deterministic evaluation episode: first k triples are the support set, the
// remainder are queries.
inline EpisodeTask eval_episode(const Dataset& ds, const TaskRelation& task, int k, Rng& rng) {
    const int n = static_cast<int>(task.triples.size());
    if (n < k + 1)
        throw DataError("eval_episode: relation '" + ds.relation_names[static_cast<size_t>(task.relation)] +
                        "' has " + std::to_string(n) + " triples, needs at least " + std::to_string(k + 1));
    EpisodeTask ep;
    ep.relation = task.relation;
    ep.support_pos.assign(task.triples.begin(), task.triples.begin() + k);
    ep.query_pos.assign(task.triples.begin() + k, task.triples.end());
    for (const Triple& s : ep.support_pos) ep.support_neg.push_back(corrupt_tail(s, ds, rng));
    ep.candidates = ds.candidates_for(task.relation);
    return ep;
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

struct EmbeddingStore {
    Param* entities = nullptr;   // |E| x d
    Param* relations = nullptr;  // |R| x d
    int dim = 0;

    static EmbeddingStore create(ParamRegistry& reg, const Dataset& ds, int dim, Rng& rng) {
        EmbeddingStore s;
        s.dim = dim;
        s.entities = &reg.create("embeddings.entity", {ds.entity_count(), dim}, rng);
        s.relations = &reg.create("embeddings.relation", {ds.relation_count(), dim}, rng);
        return s;
    }
};

struct PretrainedStats {
    int entities_from_file = 0;
    int relations_from_file = 0;
    int entities_defaulted = 0;
    int relations_defaulted = 0;
};

// File is JSON (name -> vector) or TSV (name<TAB>v1<TAB>...<TAB>vd). Names
// are matched against both vocabularies; rows not covered keep their
// default initialization.
inline PretrainedStats load_pretrained_embeddings(const std::filesystem::path& path, const Dataset& ds,
                                                  EmbeddingStore& store) {
    std::unordered_map<std::string, std::vector<double>> vectors;
    if (path.extension() == ".json") {
        nlohmann::json j = detail::read_json_file(path);
        for (auto& [name, arr] : j.items()) vectors[name] = arr.get<std::vector<double>>();
    } else {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open '" + path.string() + "'");
        std::string line;
        long line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos)
                throw DataError("malformed line " + std::to_string(line_no) + " in '" + path.string() + "'");
            std::vector<double> vec;
            size_t pos = tab + 1;
            while (pos <= line.size()) {
                const auto next = line.find('\t', pos);
                const std::string tok = line.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
                if (!tok.empty()) vec.push_back(std::stod(tok));
                if (next == std::string::npos) break;
                pos = next + 1;
            }
            vectors[line.substr(0, tab)] = std::move(vec);
        }
    }

    PretrainedStats stats;
    auto fill = [&](Param& matrix, const std::vector<std::string>& names, int& loaded, int& defaulted) {
        for (size_t i = 0; i < names.size(); ++i) {
            auto it = vectors.find(names[i]);
            if (it == vectors.end()) {
                ++defaulted;
                continue;
            }
            if (static_cast<int>(it->second.size()) != store.dim)
                throw DataError("pretrained vector for '" + names[i] + "' has dimension " +
                                std::to_string(it->second.size()) + ", expected " + std::to_string(store.dim));
            for (int j = 0; j < store.dim; ++j) matrix.value.at(static_cast<int>(i), j) = it->second[static_cast<size_t>(j)];
            ++loaded;
        }
    };
    fill(*store.entities, ds.entity_names, stats.entities_from_file, stats.entities_defaulted);
    fill(*store.relations, ds.relation_names, stats.relations_from_file, stats.relations_defaulted);
    return stats;
}

}  // namespace fskgc
