// Training loop: adaptive-moment gradient steps on the episode loss, periodic
// validation, best-MRR checkpointing, early stopping, NaN abort. Everything
// is deterministic given the run config seed.
#pragma once

#include <cmath>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "fskgc/autodiff.hpp"
#include "fskgc/checkpoint.hpp"
#include "fskgc/kg_data.hpp"
#include "fskgc/metrics.hpp"
#include "fskgc/model.hpp"
#include "fskgc/numerics.hpp"

namespace fskgc {

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long t = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    void init(const ParamRegistry& reg) {
        m.clear();
        v.clear();
        for (size_t i = 0; i < reg.size(); ++i) {
            m.emplace_back(reg[i].value.shape);
            v.emplace_back(reg[i].value.shape);
        }
        t = 0;
    }

    // One update from the gradients currently accumulated in the registry.
    void step(ParamRegistry& reg, double lr) {
        if (m.size() != reg.size()) throw ContractError("AdamState: not initialized for this registry");
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t i = 0; i < reg.size(); ++i) {
            Param& p = reg[i];
            for (size_t j = 0; j < p.value.data.size(); ++j) {
                const double g = p.grad.data[j];
                m[i].data[j] = beta1 * m[i].data[j] + (1.0 - beta1) * g;
                v[i].data[j] = beta2 * v[i].data[j] + (1.0 - beta2) * g * g;
                p.value.data[j] -= lr * (m[i].data[j] / c1) / (std::sqrt(v[i].data[j] / c2) + eps);
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Evaluation over a split
// ---------------------------------------------------------------------------

// Evaluate every relation in the split with at least few+1 triples: first
// `few` triples form the support set, the rest are queries. Per-relation rng
// streams keep results independent of relation iteration order.
inline Metrics evaluate_split(const Model& m, const Dataset& ds, const NeighborGraph& g, Split split,
                              uint64_t eval_seed, std::map<std::string, Metrics>* per_relation = nullptr) {
    const Rng base(eval_seed);
    std::vector<int> all_ranks;
    for (const TaskRelation& task : ds.splits[static_cast<size_t>(split)]) {
        if (static_cast<int>(task.triples.size()) < m.cfg.few + 1) continue;
        Rng ep_rng = base.fork(2 * static_cast<uint64_t>(task.relation));
        Rng sample_rng = base.fork(2 * static_cast<uint64_t>(task.relation) + 1);
        const EpisodeTask ep = eval_episode(ds, task, m.cfg.few, ep_rng);
        const std::vector<int> ranks = evaluate_episode(m, ds, g, ep, sample_rng);
        if (per_relation)
            (*per_relation)[ds.relation_names[static_cast<size_t>(task.relation)]] = compute_metrics(ranks);
        all_ranks.insert(all_ranks.end(), ranks.begin(), ranks.end());
    }
    if (all_ranks.empty())
        throw DataError("evaluate_split: no relation in split '" + std::string(split_name(split)) + "' has at least " +
                        std::to_string(m.cfg.few + 1) + " triples");
    return compute_metrics(all_ranks);
}

// Canonical metrics report; keys are sorted so identical runs serialize
// byte-identically.
inline nlohmann::json metrics_json(const RunConfig& cfg, const std::string& split, const Metrics& m,
                                   const std::map<std::string, Metrics>& per_relation) {
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [name, pm] : per_relation)
        per[name] = {{"mrr", pm.mrr},   {"hits1", pm.hits1},          {"hits5", pm.hits5},
                     {"hits10", pm.hits10}, {"n_queries", pm.n_queries}};
    return nlohmann::json{{"variant", variant_name(cfg.variant)},
                          {"split", split},
                          {"mrr", m.mrr},
                          {"hits1", m.hits1},
                          {"hits5", m.hits5},
                          {"hits10", m.hits10},
                          {"n_queries", m.n_queries},
                          {"per_relation", per},
                          {"config_hash", config_hash(cfg)},
                          {"seed", cfg.seed}};
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
    long steps_run = 0;
    double best_mrr = 0.0;
    long best_step = -1;
    bool early_stopped = false;
    std::vector<std::pair<long, double>> history;  // (step, validation MRR)
};

// Runs up to cfg.max_steps batched episode steps. Validation every
// cfg.eval_interval steps; the best-MRR parameters go to checkpoint_path
// (skipped when empty). Stops early after cfg.patience evals without
// improvement. Throws DomainError if the loss goes non-finite.
inline TrainResult train(Model& model, const Dataset& ds, const NeighborGraph& g,
                         const std::string& checkpoint_path = "", std::ostream* log = nullptr) {
    const RunConfig& cfg = model.cfg;
    std::vector<const TaskRelation*> tasks;
    for (const TaskRelation& task : ds.splits[static_cast<size_t>(Split::train)])
        if (static_cast<int>(task.triples.size()) >= cfg.few + 1) tasks.push_back(&task);
    if (tasks.empty())
        throw DataError("train: no training relation has at least " + std::to_string(cfg.few + 1) + " triples");

    const Rng base(cfg.seed);
    Rng task_rng = base.fork(11);
    Rng episode_rng = base.fork(12);
    Rng diffusion_rng = base.fork(13);
    const uint64_t eval_seed = splitmix64(cfg.seed ^ 0x5eedu);

    AdamState adam;
    adam.init(model.reg);
    TrainResult res;
    int evals_since_best = 0;

    for (long step = 1; step <= cfg.max_steps; ++step) {
        model.reg.zero_grad();
        double batch_loss = 0.0, batch_margin = 0.0, batch_mse = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const TaskRelation& task = *tasks[static_cast<size_t>(task_rng.uniform_int(static_cast<int>(tasks.size())))];
            const EpisodeTask ep = sample_episode(ds, task, cfg.few, cfg.n_query, episode_rng);
            Tape tape;
            const EpisodeLosses losses = forward_episode_train(tape, model, g, ep, diffusion_rng);
            const double lv = tape.value(losses.total).at(0);
            if (!std::isfinite(lv))
                throw DomainError("train: loss is not finite at step " + std::to_string(step) + " (relation '" +
                                  ds.relation_names[static_cast<size_t>(task.relation)] + "', loss " +
                                  std::to_string(lv) + "); lower lr or check the data");
            batch_loss += lv / cfg.batch_size;
            batch_margin += tape.value(losses.margin).at(0) / cfg.batch_size;
            batch_mse += tape.value(losses.mse).at(0) / cfg.batch_size;
            tape.backward_accumulate(scale(tape, losses.total, 1.0 / cfg.batch_size));
        }
        adam.step(model.reg, cfg.lr);
        res.steps_run = step;

        if (step % cfg.eval_interval == 0 || step == cfg.max_steps) {
            const Metrics valid = evaluate_split(model, ds, g, Split::valid, eval_seed);
            res.history.emplace_back(step, valid.mrr);
            if (log)
                (*log) << "step " << step << " loss " << batch_loss << " margin " << batch_margin << " mse "
                       << batch_mse << " valid_mrr " << valid.mrr << "\n";
            if (valid.mrr > res.best_mrr || res.best_step < 0) {
                res.best_mrr = valid.mrr;
                res.best_step = step;
                evals_since_best = 0;
                if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, cfg, model.reg, step, valid.mrr);
            } else if (++evals_since_best >= cfg.patience) {
                res.early_stopped = true;
                break;
            }
        }
    }
    return res;
}

}  // namespace fskgc
