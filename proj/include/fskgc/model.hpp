// Full few-shot completion model: entity encoder, relation learner, latent
// denoiser over the extended support set, pooled episode latent, and the
// translation scorer. Ablation variants reroute pieces of this chain:
//
//   full            everything on
//   no_recd         per-row MLP replaces the diffusion denoiser (no MSE term)
//   no_attnpool     mean pooling replaces attention pooling
//   no_recd_attnpool  both of the above
//   no_support_neg  extended set is positives only; single pooler, |z| = 2d
//   no_posneg_sep   labels dropped from the condition; one pooler over all
//                   2k rows, |z| = 2d
#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "fskgc/aggregator.hpp"
#include "fskgc/autodiff.hpp"
#include "fskgc/diffusion.hpp"
#include "fskgc/kg_data.hpp"
#include "fskgc/metrics.hpp"
#include "fskgc/numerics.hpp"
#include "fskgc/pooler.hpp"
#include "fskgc/relation_learner.hpp"
#include "fskgc/scorer.hpp"

namespace fskgc {

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

enum class Variant { full, no_recd, no_attnpool, no_recd_attnpool, no_support_neg, no_posneg_sep };

inline const std::vector<std::pair<Variant, std::string>>& variant_table() {
    static const std::vector<std::pair<Variant, std::string>> table = {
        {Variant::full, "full"},
        {Variant::no_recd, "no_recd"},
        {Variant::no_attnpool, "no_attnpool"},
        {Variant::no_recd_attnpool, "no_recd_attnpool"},
        {Variant::no_support_neg, "no_support_neg"},
        {Variant::no_posneg_sep, "no_posneg_sep"},
    };
    return table;
}

inline std::string variant_name(Variant v) {
    for (const auto& [var, name] : variant_table())
        if (var == v) return name;
    throw ContractError("variant_name: unknown variant");
}

inline Variant parse_variant(const std::string& name) {
    for (const auto& [var, n] : variant_table())
        if (n == name) return var;
    throw ConfigError("unknown variant '" + name + "'");
}

struct RunConfig {
    std::string dataset_dir;
    Variant variant = Variant::full;
    int few = 5;         // support triples per episode
    int n_query = 3;     // training queries per episode
    int batch_size = 64;
    double lr = 1e-3;
    double margin = 1.0;
    int t_steps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int dim = 100;
    int unet_base = 64;  // first encoder width of the noise predictor
    int max_neighbors = 50;
    long max_steps = 2000;
    int eval_interval = 200;
    int patience = 10;   // evals without MRR improvement before stopping
    bool filtered = true;
    uint64_t seed = 1;

    bool use_diffusion() const { return variant != Variant::no_recd && variant != Variant::no_recd_attnpool; }
    bool use_attn_pool() const { return variant != Variant::no_attnpool && variant != Variant::no_recd_attnpool; }
    bool use_support_neg() const { return variant != Variant::no_support_neg; }
    bool labels_in_condition() const { return variant != Variant::no_posneg_sep; }
    // Two pooled halves (positive, negative) vs one pooled vector.
    bool split_pooling() const { return use_support_neg() && variant != Variant::no_posneg_sep; }
    int z_width() const { return split_pooling() ? 4 * dim : 2 * dim; }
    int cond_width() const { return 3 * dim + (labels_in_condition() ? 2 : 0); }
};

inline void validate(const RunConfig& c) {
    if (c.few < 1) throw ConfigError("config: few must be >= 1");
    if (c.n_query < 1) throw ConfigError("config: n_query must be >= 1");
    if (c.batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    if (!(c.lr > 0.0)) throw ConfigError("config: lr must be > 0");
    if (c.margin < 0.0) throw ConfigError("config: margin must be >= 0");
    if (c.t_steps < 1) throw ConfigError("config: t_steps must be >= 1");
    if (!(c.beta_start > 0.0) || !(c.beta_end < 1.0) || c.beta_start > c.beta_end)
        throw ConfigError("config: beta range must satisfy 0 < beta_start <= beta_end < 1");
    if (c.dim < 1) throw ConfigError("config: dim must be >= 1");
    if (c.unet_base < 4) throw ConfigError("config: unet_base must be >= 4");
    if (c.max_neighbors < 1) throw ConfigError("config: max_neighbors must be >= 1");
    if (c.max_steps < 0) throw ConfigError("config: max_steps must be >= 0");
    if (c.eval_interval < 1) throw ConfigError("config: eval_interval must be >= 1");
    if (c.patience < 1) throw ConfigError("config: patience must be >= 1");
}

inline nlohmann::json to_json(const RunConfig& c) {
    return nlohmann::json{{"dataset_dir", c.dataset_dir},
                          {"variant", variant_name(c.variant)},
                          {"few", c.few},
                          {"n_query", c.n_query},
                          {"batch_size", c.batch_size},
                          {"lr", c.lr},
                          {"margin", c.margin},
                          {"t_steps", c.t_steps},
                          {"beta_start", c.beta_start},
                          {"beta_end", c.beta_end},
                          {"dim", c.dim},
                          {"unet_base", c.unet_base},
                          {"max_neighbors", c.max_neighbors},
                          {"max_steps", c.max_steps},
                          {"eval_interval", c.eval_interval},
                          {"patience", c.patience},
                          {"filtered", c.filtered},
                          {"seed", c.seed}};
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig c;
    try {
        c.dataset_dir = j.at("dataset_dir").get<std::string>();
        c.variant = parse_variant(j.at("variant").get<std::string>());
        c.few = j.at("few").get<int>();
        c.n_query = j.at("n_query").get<int>();
        c.batch_size = j.at("batch_size").get<int>();
        c.lr = j.at("lr").get<double>();
        c.margin = j.at("margin").get<double>();
        c.t_steps = j.at("t_steps").get<int>();
        c.beta_start = j.at("beta_start").get<double>();
        c.beta_end = j.at("beta_end").get<double>();
        c.dim = j.at("dim").get<int>();
        c.unet_base = j.at("unet_base").get<int>();
        c.max_neighbors = j.at("max_neighbors").get<int>();
        c.max_steps = j.at("max_steps").get<long>();
        c.eval_interval = j.at("eval_interval").get<int>();
        c.patience = j.at("patience").get<int>();
        c.filtered = j.at("filtered").get<bool>();
        c.seed = j.at("seed").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    validate(c);
    return c;
}

// FNV-1a over the canonical JSON dump; stable across runs and platforms.
inline std::string config_hash(const RunConfig& c) {
    const std::string s = to_json(c).dump();
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[19];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// ---------------------------------------------------------------------------
// MLP denoiser (no_recd variants): per-row 2d -> 2d -> 2d
// ---------------------------------------------------------------------------

struct MlpDenoiserParams {
    Param* w1 = nullptr;
    Param* b1 = nullptr;
    Param* w2 = nullptr;
    Param* b2 = nullptr;

    static MlpDenoiserParams create(ParamRegistry& reg, int width, Rng& rng) {
        if (width < 1) throw ConfigError("MlpDenoiserParams: width must be >= 1");
        MlpDenoiserParams p;
        p.w1 = &reg.create("denoise_mlp.w1", {width, width}, rng);
        p.b1 = &reg.create_zeros("denoise_mlp.b1", {width});
        p.w2 = &reg.create("denoise_mlp.w2", {width, width}, rng);
        p.b2 = &reg.create_zeros("denoise_mlp.b2", {width});
        return p;
    }
};

inline Val mlp_denoise(Tape& t, const MlpDenoiserParams& p, Val rows) {
    const Val h = leaky_relu(t, linear(t, rows, t.leaf(*p.w1), t.leaf(*p.b1)), kLeakySlope);
    return linear(t, h, t.leaf(*p.w2), t.leaf(*p.b2));
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

struct Model {
    RunConfig cfg;
    ParamRegistry reg;
    DiffusionSchedule schedule;
    EmbeddingStore store;
    AggregatorParams agg;
    RelationLearnerParams rel;
    NoisePredictorParams unet;  // only populated when cfg.use_diffusion()
    MlpDenoiserParams mlp;      // only populated otherwise
    PoolerParams pool_pos;      // the sole pooler when !cfg.split_pooling()
    PoolerParams pool_neg;      // only populated when cfg.split_pooling()
    ScorerParams scorer;
};

inline Model build_model(const Dataset& ds, const RunConfig& cfg) {
    validate(cfg);
    Model m;
    m.cfg = cfg;
    m.schedule = build_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end);
    Rng rng(cfg.seed);
    const int d = cfg.dim;
    m.store = EmbeddingStore::create(m.reg, ds, d, rng);
    m.agg = AggregatorParams::create(m.reg, d, rng);
    m.rel = RelationLearnerParams::create(m.reg, 2 * d, d, d, rng);
    if (cfg.use_diffusion())
        m.unet = NoisePredictorParams::create(m.reg, 2 * d, cfg.cond_width(), rng, cfg.unet_base);
    else
        m.mlp = MlpDenoiserParams::create(m.reg, 2 * d, rng);
    if (cfg.split_pooling()) {
        m.pool_pos = PoolerParams::create(m.reg, "pooler.pos", 2 * d, rng);
        m.pool_neg = PoolerParams::create(m.reg, "pooler.neg", 2 * d, rng);
    } else {
        m.pool_pos = PoolerParams::create(m.reg, "pooler", 2 * d, rng);
    }
    m.scorer = ScorerParams::create(m.reg, d, cfg.z_width(), rng);
    return m;
}

// ---------------------------------------------------------------------------
// Episode forward pass
// ---------------------------------------------------------------------------

// Wiring facts recorded during a forward pass, for ablation assertions.
struct EpisodeTrace {
    int extended_rows = 0;       // support rows entering the latent path
    int condition_rows = 0;      // rows of the denoiser condition (0 without diffusion)
    int condition_width = 0;
    int z_width = 0;             // pooled episode latent width
    int diffusion_t = 0;         // sampled step during training (0 without diffusion)
    bool labels_in_condition = false;
    bool used_diffusion = false;
    bool used_attn_pool = false;
    Tensor sampled_latent;       // reverse-sampler output rows (empty without diffusion)
};

struct EpisodeLosses {
    Val total;
    Val margin;
    Val mse;  // constant zero when the diffusion branch is off
    std::vector<Val> pos_scores;
    std::vector<Val> neg_scores;
};

namespace detail {

// Pool the denoised support rows into the episode latent z.
inline Val pool_latent(Tape& t, const Model& m, Val z0_hat, int k, EpisodeTrace* trace) {
    const RunConfig& cfg = m.cfg;
    Val z;
    if (cfg.split_pooling()) {
        if (cfg.use_attn_pool()) {
            z = pool_pos_neg(t, m.pool_pos, m.pool_neg, z0_hat, k);
        } else {
            auto halves = split(t, z0_hat, {k, k}, 0);
            z = concat(t, {mean_rows(t, halves[0]), mean_rows(t, halves[1])});
        }
    } else {
        z = cfg.use_attn_pool() ? attn_pool(t, m.pool_pos, z0_hat) : mean_rows(t, z0_hat);
    }
    if (trace) {
        trace->used_attn_pool = cfg.use_attn_pool();
        trace->z_width = t.value(z).shape[0];
    }
    return z;
}

// Extended support set and its positive/negative labels, in row order.
inline std::pair<std::vector<Triple>, std::vector<bool>> extended_support(const RunConfig& cfg,
                                                                          const EpisodeTask& ep) {
    if (ep.support_pos.empty()) throw ContractError("forward_episode: no support triples");
    std::vector<Triple> ext = ep.support_pos;
    std::vector<bool> labels(ext.size(), true);
    if (cfg.use_support_neg()) {
        if (ep.support_neg.size() != ep.support_pos.size())
            throw ContractError("forward_episode: support_neg size " + std::to_string(ep.support_neg.size()) +
                                " does not match support_pos size " + std::to_string(ep.support_pos.size()));
        ext.insert(ext.end(), ep.support_neg.begin(), ep.support_neg.end());
        labels.insert(labels.end(), ep.support_neg.size(), false);
    }
    return {std::move(ext), std::move(labels)};
}

}  // namespace detail

// Training pass over one episode; rng drives the diffusion MSE draw (t, eps)
// and the latent sample. The episode latent is produced by the same reverse
// sampler used at evaluation and enters the tape as a constant: the margin
// loss trains the pooler and scorer against the latents they will actually
// see, while the noise predictor itself is trained by the MSE term.
// `frozen_latent` substitutes for the sampler's output; finite-difference
// checks pass it so every evaluation sees the identical constant the tape saw.
inline EpisodeLosses forward_episode_train(Tape& t, const Model& m, const NeighborGraph& g, const EpisodeTask& ep,
                                           Rng& rng, EpisodeTrace* trace = nullptr,
                                           const Tensor* frozen_latent = nullptr) {
    const RunConfig& cfg = m.cfg;
    if (ep.query_pos.empty() || ep.query_pos.size() != ep.query_neg.size())
        throw ContractError("forward_episode_train: need paired query pos/neg triples");

    EntityEncoder enc(t, m.agg, g, m.store);
    auto [ext, labels] = detail::extended_support(cfg, ep);
    const int k = static_cast<int>(ep.support_pos.size());

    const Val z0 = enc.encode_triples(ext);
    const Val z0_pos = cfg.use_support_neg() ? slice_rows(t, z0, 0, k) : z0;
    const Val r_prime = encode_relation(t, m.rel, z0_pos);

    if (trace) {
        trace->extended_rows = static_cast<int>(ext.size());
        trace->used_diffusion = cfg.use_diffusion();
        trace->labels_in_condition = cfg.use_diffusion() && cfg.labels_in_condition();
    }

    Val z0_hat;
    Val mse;
    if (cfg.use_diffusion()) {
        const Val cond = cfg.labels_in_condition() ? build_condition(t, r_prime, z0, labels)
                                                   : build_condition(t, r_prime, z0);
        const int step = 1 + rng.uniform_int(m.schedule.T);
        const Tensor eps = rng.normal_tensor(t.value(z0).shape);
        mse = diffusion_loss_at(t, m.unet, z0, cond, step, eps, m.schedule).loss;
        const Tensor latent =
            frozen_latent ? *frozen_latent : sample_latent(m.unet, t.value(cond), m.schedule, rng);
        z0_hat = t.constant(latent);
        if (trace) {
            trace->condition_rows = t.value(cond).rows();
            trace->condition_width = t.value(cond).cols();
            trace->diffusion_t = step;
            trace->sampled_latent = latent;
        }
    } else {
        z0_hat = mlp_denoise(t, m.mlp, z0);
        mse = t.constant_scalar(0.0);
    }

    const Val z = detail::pool_latent(t, m, z0_hat, k, trace);

    EpisodeLosses out;
    for (size_t i = 0; i < ep.query_pos.size(); ++i) {
        const Triple& qp = ep.query_pos[i];
        const Triple& qn = ep.query_neg[i];
        auto [hp, tp] = project_entities(t, m.scorer, enc.encode(qp.head), enc.encode(qp.tail), z);
        out.pos_scores.push_back(score(t, hp, r_prime, tp));
        auto [hn, tn] = project_entities(t, m.scorer, enc.encode(qn.head), enc.encode(qn.tail), z);
        out.neg_scores.push_back(score(t, hn, r_prime, tn));
    }
    out.margin = margin_loss(t, out.pos_scores, out.neg_scores, cfg.margin);
    out.mse = mse;
    out.total = total_loss(t, out.margin, out.mse);
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor matvec_plain(const Tensor& W, const Tensor& x) {
    Tensor y({W.rows()});
    for (int i = 0; i < W.rows(); ++i) {
        double acc = 0.0;
        for (int j = 0; j < W.cols(); ++j) acc += W.at(i, j) * x.at(j);
        y.at(i) = acc;
    }
    return y;
}

}  // namespace detail

// Rank every positive query of an eval episode. The episode latent is sampled
// once (full reverse pass of the denoiser) and reused across all candidates.
inline std::vector<int> evaluate_episode(const Model& m, const Dataset& ds, const NeighborGraph& g,
                                         const EpisodeTask& ep, Rng& rng, EpisodeTrace* trace = nullptr) {
    const RunConfig& cfg = m.cfg;
    if (ep.query_pos.empty()) throw ContractError("evaluate_episode: no queries");

    Tape t;
    EntityEncoder enc(t, m.agg, g, m.store);
    auto [ext, labels] = detail::extended_support(cfg, ep);
    const int k = static_cast<int>(ep.support_pos.size());

    const Val z0 = enc.encode_triples(ext);
    const Val z0_pos = cfg.use_support_neg() ? slice_rows(t, z0, 0, k) : z0;
    const Val r_prime = encode_relation(t, m.rel, z0_pos);

    if (trace) {
        trace->extended_rows = static_cast<int>(ext.size());
        trace->used_diffusion = cfg.use_diffusion();
        trace->labels_in_condition = cfg.use_diffusion() && cfg.labels_in_condition();
    }

    Val z0_hat;
    if (cfg.use_diffusion()) {
        const Val cond = cfg.labels_in_condition() ? build_condition(t, r_prime, z0, labels)
                                                   : build_condition(t, r_prime, z0);
        if (trace) {
            trace->condition_rows = t.value(cond).rows();
            trace->condition_width = t.value(cond).cols();
        }
        z0_hat = t.constant(sample_latent(m.unet, t.value(cond), m.schedule, rng));
    } else {
        z0_hat = mlp_denoise(t, m.mlp, z0);
    }

    const Tensor z = t.value(detail::pool_latent(t, m, z0_hat, k, trace));
    const Tensor r = t.value(r_prime);
    const Tensor Whz = detail::matvec_plain(m.scorer.W_h->value, z);
    const Tensor Wtz = detail::matvec_plain(m.scorer.W_t->value, z);

    std::vector<int> ranks;
    ranks.reserve(ep.query_pos.size());
    for (const Triple& q : ep.query_pos) {
        const Tensor h = t.value(enc.encode(q.head));
        Tensor base({m.cfg.dim});
        for (int j = 0; j < m.cfg.dim; ++j) base.at(j) = h.at(j) + Whz.at(j) + r.at(j);

        std::vector<ScoredCandidate> scored;
        for (int c : query_candidates(ds, q, cfg.filtered)) {
            const Tensor tc = t.value(enc.encode(c));
            double sq = 0.0;
            for (int j = 0; j < m.cfg.dim; ++j) {
                const double diff = base.at(j) - (tc.at(j) + Wtz.at(j));
                sq += diff * diff;
            }
            scored.push_back({c, -std::sqrt(sq)});
        }
        ranks.push_back(rank_of(scored, q.tail));
    }
    return ranks;
}

}  // namespace fskgc
