// Synthetic few-shot KGC fixture with planted structure.
//
// Entities come in two kinds: subjects, which sit on an integer line and are
// connected by fixed-offset background relations, and a reserved block of
// value entities with no background edges. Every structured task relation
// maps each of its subject heads to one designated value entity, so a 5-shot
// support set reveals the answer exactly and a correct model can rank that
// value first for held-out queries. Splits use disjoint relation names but
// draw designated values from the pool covered by the train tasks; values a
// model only ever sees as negatives would otherwise be unrankable for
// held-out relations. Candidate pools contain every value entity plus random
// subject fillers, and a couple of noise relations with inconsistent tails
// keep training honest. The pool is kept small on purpose: episode negatives
// are drawn from it, and a pool dominated by filler subjects would almost
// never produce the value-vs-value negatives that force a model to separate
// the designated value from its rivals.
#pragma once

#include "fskgc/kg_data.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace fskgc {

struct SynthConfig {
    int n_entities = 200;  // subjects plus value entities
    int n_values = 8;      // answer entities, never used as heads
    std::vector<int> background_offsets = {1, 2, 3, 4};
    int train_tasks = 8;
    int noise_train_relations = 2;
    int valid_tasks = 3;
    int test_tasks = 3;
    int triples_per_task = 30;
    int candidate_pool = 16;
    uint64_t seed = 7;
};

struct SynthManifest {
    int entities = 0;
    int relations = 0;
    long background_triples = 0;
    int relations_per_split[3] = {0, 0, 0};
    long triples_per_split[3] = {0, 0, 0};
};

namespace detail {

inline std::string synth_entity(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ent:line:e%03d", i);
    return buf;
}

inline std::string synth_value(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ent:val:v%02d", i);
    return buf;
}

}  // namespace detail

// Writes path_graph, the three task files, rel2candidates.json and
// manifest.json into dir. Fully determined by cfg.seed.
inline SynthManifest write_synthetic_dataset(const std::filesystem::path& dir, const SynthConfig& cfg) {
    namespace fs = std::filesystem;
    const int n_subjects = cfg.n_entities - cfg.n_values;
    if (n_subjects < 32) throw ConfigError("write_synthetic_dataset: need at least 32 subject entities");
    if (cfg.n_values < cfg.train_tasks)
        throw ConfigError("write_synthetic_dataset: need one value entity per train task");
    if (cfg.valid_tasks > cfg.train_tasks || cfg.test_tasks > cfg.train_tasks)
        throw ConfigError("write_synthetic_dataset: held-out splits reuse train values, so they cannot have more tasks");
    if (cfg.triples_per_task > n_subjects)
        throw ConfigError("write_synthetic_dataset: more triples per task than subject heads");
    fs::create_directories(dir);
    Rng rng(cfg.seed);
    SynthManifest man;
    man.entities = cfg.n_entities;

    {
        std::ofstream out(dir / "path_graph");
        for (size_t r = 0; r < cfg.background_offsets.size(); ++r) {
            const int off = cfg.background_offsets[r];
            for (int h = 0; h + off < n_subjects; ++h) {
                out << detail::synth_entity(h) << '\t' << "bg:step" << std::to_string(r) << '\t'
                    << detail::synth_entity(h + off) << '\n';
                ++man.background_triples;
            }
        }
    }
    man.relations = static_cast<int>(cfg.background_offsets.size());

    // Distinct designated value per train task; valid/test tasks reuse values
    // from that pool (distinct within their split).
    const std::vector<int> train_values = rng.sample_indices(cfg.n_values, cfg.train_tasks);

    nlohmann::json candidates = nlohmann::json::object();
    auto make_task = [&](const std::string& name, int value, Rng& r) {
        nlohmann::json triples = nlohmann::json::array();
        for (int h : r.sample_indices(n_subjects, cfg.triples_per_task)) {
            const int t = value >= 0 ? value : r.uniform_int(cfg.n_values);
            triples.push_back({detail::synth_entity(h), name, detail::synth_value(t)});
        }
        std::set<std::string> pool;
        for (int v = 0; v < cfg.n_values; ++v) pool.insert(detail::synth_value(v));
        while (static_cast<int>(pool.size()) < cfg.candidate_pool)
            pool.insert(detail::synth_entity(r.uniform_int(n_subjects)));
        nlohmann::json cand = nlohmann::json::array();
        for (const auto& e : pool) cand.push_back(e);
        candidates[name] = std::move(cand);
        return triples;
    };

    const int split_tasks[3] = {cfg.train_tasks, cfg.valid_tasks, cfg.test_tasks};
    const char* split_file[3] = {"train_tasks.json", "dev_tasks.json", "test_tasks.json"};
    const char* split_tag[3] = {"train", "valid", "test"};
    for (int s = 0; s < 3; ++s) {
        nlohmann::json tasks = nlohmann::json::object();
        Rng split_rng = rng.fork(static_cast<uint64_t>(100 + s));
        const std::vector<int> picks = split_rng.sample_indices(cfg.train_tasks, split_tasks[s]);
        for (int idx = 0; idx < split_tasks[s]; ++idx) {
            const int value = train_values[static_cast<size_t>(picks[static_cast<size_t>(idx)])];
            char name[48];
            std::snprintf(name, sizeof name, "task:%s:v%02d:r%d", split_tag[s], value, idx);
            tasks[name] = make_task(name, value, split_rng);
        }
        if (s == 0) {
            for (int i = 0; i < cfg.noise_train_relations; ++i) {
                const std::string name = std::string("task:train:noise:r") + std::to_string(i);
                tasks[name] = make_task(name, -1, split_rng);
            }
        }
        man.relations_per_split[s] = static_cast<int>(tasks.size());
        for (const auto& [k, v] : tasks.items()) man.triples_per_split[s] += static_cast<long>(v.size());
        man.relations += man.relations_per_split[s];
        std::ofstream out(dir / split_file[s]);
        out << tasks.dump(1) << '\n';
    }

    {
        std::ofstream out(dir / "rel2candidates.json");
        out << candidates.dump(1) << '\n';
    }
    {
        nlohmann::json j;
        j["entities"] = man.entities;
        j["relations"] = man.relations;
        j["background_triples"] = man.background_triples;
        for (int s = 0; s < 3; ++s) {
            j["splits"][split_tag[s]]["relations"] = man.relations_per_split[s];
            j["splits"][split_tag[s]]["triples"] = man.triples_per_split[s];
        }
        j["seed"] = cfg.seed;
        std::ofstream out(dir / "manifest.json");
        out << j.dump(1) << '\n';
    }
    return man;
}

}  // namespace fskgc
