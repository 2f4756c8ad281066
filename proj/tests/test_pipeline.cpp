#include "fskgc/checkpoint.hpp"
#include "fskgc/checks.hpp"
#include "fskgc/metrics.hpp"
#include "fskgc/model.hpp"
#include "fskgc/synth.hpp"
#include "fskgc/train.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

using namespace fskgc;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("fskgc_pipeline_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Small synthetic world shared by the model-level tests.
SynthConfig small_synth() {
    SynthConfig sc;
    sc.n_entities = 64;
    sc.triples_per_task = 12;
    sc.candidate_pool = 20;
    sc.seed = 11;
    return sc;
}

struct World {
    Dataset ds;
    NeighborGraph graph;
};

const World& small_world() {
    static World w = [] {
        fs::path dir = fresh_dir("world");
        write_synthetic_dataset(dir, small_synth());
        World out{load_dataset(dir), {}};
        out.graph = build_neighbor_graph(out.ds, 6, 5);
        return out;
    }();
    return w;
}

RunConfig small_config(Variant v = Variant::full) {
    RunConfig cfg;
    cfg.variant = v;
    cfg.few = 5;
    cfg.n_query = 2;
    cfg.batch_size = 2;
    cfg.lr = 1e-3;
    cfg.t_steps = 8;
    cfg.dim = 8;
    cfg.max_neighbors = 6;
    cfg.max_steps = 4;
    cfg.eval_interval = 2;
    cfg.seed = 21;
    return cfg;
}

void zero_all(ParamRegistry& reg) {
    for (size_t i = 0; i < reg.size(); ++i)
        std::fill(reg[i].value.data.begin(), reg[i].value.data.end(), 0.0);
}

EpisodeTask train_episode(const Dataset& ds, const RunConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    const TaskRelation& task = ds.splits[0].at(0);
    return sample_episode(ds, task, cfg.few, cfg.n_query, rng);
}

}  // namespace

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

TEST_CASE("compute_metrics on hand-checked rank lists") {
    const Metrics perfect = compute_metrics({1, 1, 1});
    CHECK(perfect.mrr == 1.0);
    CHECK(perfect.hits1 == 1.0);
    CHECK(perfect.hits10 == 1.0);
    CHECK(perfect.n_queries == 3);

    const Metrics single = compute_metrics({4});
    CHECK(single.mrr == 0.25);
    CHECK(single.hits1 == 0.0);
    CHECK(single.hits5 == 1.0);
    CHECK(single.hits10 == 1.0);

    const Metrics mixed = compute_metrics({1, 2, 11});
    CHECK(mixed.mrr == Catch::Approx((1.0 + 0.5 + 1.0 / 11.0) / 3.0));
    CHECK(mixed.hits1 == Catch::Approx(1.0 / 3.0));
    CHECK(mixed.hits5 == Catch::Approx(2.0 / 3.0));
    CHECK(mixed.hits10 == Catch::Approx(2.0 / 3.0));
}

TEST_CASE("compute_metrics rejects empty and non-positive ranks") {
    CHECK_THROWS_AS(compute_metrics({}), ContractError);
    CHECK_THROWS_AS(compute_metrics({1, 0}), ContractError);
    CHECK_THROWS_AS(compute_metrics({-3}), ContractError);
}

TEST_CASE("compute_metrics matches a brute-force oracle on 10k random ranks") {
    Rng rng(404);
    std::vector<int> ranks;
    for (int i = 0; i < 10000; ++i) ranks.push_back(1 + rng.uniform_int(100));

    double mrr = 0, h1 = 0, h5 = 0, h10 = 0;
    for (int r : ranks) {
        mrr += 1.0 / r;
        h1 += r <= 1;
        h5 += r <= 5;
        h10 += r <= 10;
    }
    const double n = static_cast<double>(ranks.size());
    const Metrics m = compute_metrics(ranks);
    CHECK(m.mrr == mrr / n);
    CHECK(m.hits1 == h1 / n);
    CHECK(m.hits5 == h5 / n);
    CHECK(m.hits10 == h10 / n);
    CHECK(m.n_queries == 10000);
}

TEST_CASE("metric invariants hold on random rank vectors") {
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<int> ranks;
        const int n = 1 + rng.uniform_int(40);
        for (int i = 0; i < n; ++i) ranks.push_back(1 + rng.uniform_int(30));
        const Metrics m = compute_metrics(ranks);
        CHECK(m.hits1 <= m.hits5);
        CHECK(m.hits5 <= m.hits10);
        CHECK(m.mrr >= m.hits1);
        CHECK(m.mrr <= 1.0);
        CHECK(m.hits10 <= 1.0);
    }
}

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

TEST_CASE("rank_of basic cases") {
    CHECK(rank_of({{7, 0.3}}, 7) == 1);
    CHECK(rank_of({{1, 0.1}, {2, 0.9}, {3, 0.5}}, 2) == 1);
    CHECK(rank_of({{1, 0.1}, {2, 0.9}, {3, 0.5}}, 1) == 3);
    CHECK_THROWS_AS(rank_of({{1, 0.1}}, 2), ContractError);
}

TEST_CASE("rank_of breaks ties by entity id ascending") {
    // Same score everywhere: rank is the position among ids.
    std::vector<ScoredCandidate> tied = {{5, 1.0}, {2, 1.0}, {9, 1.0}};
    CHECK(rank_of(tied, 2) == 1);
    CHECK(rank_of(tied, 5) == 2);
    CHECK(rank_of(tied, 9) == 3);
}

TEST_CASE("rank_of matches a sort oracle on 1000 random candidate lists") {
    Rng rng(913);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 2 + rng.uniform_int(20);
        std::vector<ScoredCandidate> scored;
        auto ids = rng.sample_indices(200, n);
        for (int i = 0; i < n; ++i)
            scored.push_back({ids[static_cast<size_t>(i)], 0.5 * rng.uniform_int(5) - 1.0});
        const int target = scored[static_cast<size_t>(rng.uniform_int(n))].entity;

        auto sorted = scored;
        std::sort(sorted.begin(), sorted.end(), [](const ScoredCandidate& a, const ScoredCandidate& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.entity < b.entity;
        });
        int oracle = 0;
        for (size_t i = 0; i < sorted.size(); ++i)
            if (sorted[i].entity == target) oracle = static_cast<int>(i) + 1;
        CHECK(rank_of(scored, target) == oracle);
    }
}

TEST_CASE("query_candidates filters known true tails but keeps the query tail") {
    Dataset ds;
    const int h = ds.intern_entity("ent:x:h");
    const int t1 = ds.intern_entity("ent:x:t1");
    const int t2 = ds.intern_entity("ent:x:t2");
    const int other = ds.intern_entity("ent:x:o");
    const int r = ds.intern_relation("rel:q");
    ds.add_true(h, r, t1);
    ds.add_true(h, r, t2);
    ds.set_candidates(r, {t1, t2, other});
    ds.finalize();

    const Triple q{h, r, t1};
    auto filtered = query_candidates(ds, q, true);
    std::set<int> fset(filtered.begin(), filtered.end());
    CHECK(fset == std::set<int>{t1, other});
    CHECK(std::count(filtered.begin(), filtered.end(), t1) == 1);

    auto raw = query_candidates(ds, q, false);
    std::set<int> rset(raw.begin(), raw.end());
    CHECK(rset == std::set<int>{t1, t2, other});
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

TEST_CASE("variant names round-trip and reject unknowns") {
    for (const auto& [v, name] : variant_table()) CHECK(parse_variant(variant_name(v)) == v);
    CHECK_THROWS_AS(parse_variant("no_such_variant"), ConfigError);
}

TEST_CASE("config validation rejects out-of-range values") {
    RunConfig bad = small_config();
    bad.few = 0;
    CHECK_THROWS_AS(validate(bad), ConfigError);
    bad = small_config();
    bad.lr = 0.0;
    CHECK_THROWS_AS(validate(bad), ConfigError);
    bad = small_config();
    bad.beta_start = 0.05;
    bad.beta_end = 0.01;
    CHECK_THROWS_AS(validate(bad), ConfigError);
    bad = small_config();
    bad.t_steps = 0;
    CHECK_THROWS_AS(validate(bad), ConfigError);
    bad = small_config();
    bad.dim = 0;
    CHECK_THROWS_AS(validate(bad), ConfigError);
}

TEST_CASE("config JSON round-trip preserves every field") {
    RunConfig c = small_config(Variant::no_posneg_sep);
    c.dataset_dir = "/tmp/somewhere";
    c.filtered = false;
    c.seed = 987654321;
    const RunConfig back = config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK(config_hash(back) == config_hash(c));
}

TEST_CASE("config hash is stable and sensitive") {
    const RunConfig a = small_config();
    RunConfig b = small_config();
    CHECK(config_hash(a) == config_hash(b));
    b.lr = 2e-3;
    CHECK(config_hash(a) != config_hash(b));
    CHECK(config_hash(a).size() == 16);
}

TEST_CASE("variant flags drive latent and condition widths") {
    RunConfig c = small_config();
    const int d = c.dim;
    CHECK(c.z_width() == 4 * d);
    CHECK(c.cond_width() == 3 * d + 2);

    c.variant = Variant::no_support_neg;
    CHECK(c.z_width() == 2 * d);
    CHECK(c.cond_width() == 3 * d + 2);

    c.variant = Variant::no_posneg_sep;
    CHECK(c.z_width() == 2 * d);
    CHECK(c.cond_width() == 3 * d);

    c.variant = Variant::no_recd;
    CHECK(!c.use_diffusion());
    CHECK(c.use_attn_pool());
    c.variant = Variant::no_recd_attnpool;
    CHECK(!c.use_diffusion());
    CHECK(!c.use_attn_pool());
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

TEST_CASE("build_model creates the parameter groups each variant needs") {
    const World& w = small_world();

    Model full = build_model(w.ds, small_config());
    CHECK(full.reg.find("unet.mid.conv_w") != nullptr);
    CHECK(full.reg.find("denoise_mlp.w1") == nullptr);
    CHECK(full.reg.find("pooler.pos.q") != nullptr);
    CHECK(full.reg.find("pooler.neg.q") != nullptr);
    CHECK(full.scorer.W_h->value.shape == std::vector<int>{8, 32});

    Model norecd = build_model(w.ds, small_config(Variant::no_recd));
    CHECK(norecd.reg.find("unet.mid.conv_w") == nullptr);
    CHECK(norecd.reg.find("denoise_mlp.w1") != nullptr);

    Model noneg = build_model(w.ds, small_config(Variant::no_support_neg));
    CHECK(noneg.reg.find("pooler.q") != nullptr);
    CHECK(noneg.reg.find("pooler.pos.q") == nullptr);
    CHECK(noneg.reg.find("pooler.neg.q") == nullptr);
    CHECK(noneg.scorer.W_h->value.shape == std::vector<int>{8, 16});

    Model nosep = build_model(w.ds, small_config(Variant::no_posneg_sep));
    CHECK(nosep.reg.find("pooler.q") != nullptr);
    CHECK(nosep.unet.cond_width == 24);
    CHECK(nosep.scorer.W_h->value.shape == std::vector<int>{8, 16});
}

TEST_CASE("every variant runs a training forward pass with finite losses") {
    const World& w = small_world();
    for (const auto& [variant, name] : variant_table()) {
        INFO("variant " << name);
        const RunConfig cfg = small_config(variant);
        Model m = build_model(w.ds, cfg);
        const EpisodeTask ep = train_episode(w.ds, cfg, 31);
        Tape tape;
        Rng rng(5);
        const EpisodeLosses losses = forward_episode_train(tape, m, w.graph, ep, rng);
        CHECK(std::isfinite(tape.value(losses.total).at(0)));
        CHECK(std::isfinite(tape.value(losses.margin).at(0)));
        CHECK(std::isfinite(tape.value(losses.mse).at(0)));
        CHECK(tape.value(losses.margin).at(0) >= 0.0);
        CHECK(tape.value(losses.mse).at(0) >= 0.0);
        CHECK(losses.pos_scores.size() == ep.query_pos.size());
    }
}

TEST_CASE("episode traces expose the wiring of each variant") {
    const World& w = small_world();
    const int d = 8, k = 5;

    auto trace_for = [&](Variant v) {
        const RunConfig cfg = small_config(v);
        Model m = build_model(w.ds, cfg);
        const EpisodeTask ep = train_episode(w.ds, cfg, 31);
        Tape tape;
        Rng rng(5);
        EpisodeTrace tr;
        forward_episode_train(tape, m, w.graph, ep, rng, &tr);
        return tr;
    };

    const EpisodeTrace full = trace_for(Variant::full);
    CHECK(full.extended_rows == 2 * k);
    CHECK(full.condition_rows == 2 * k);
    CHECK(full.condition_width == 3 * d + 2);
    CHECK(full.z_width == 4 * d);
    CHECK(full.labels_in_condition);
    CHECK(full.used_diffusion);
    CHECK(full.used_attn_pool);
    CHECK(full.diffusion_t >= 1);
    CHECK(full.diffusion_t <= 8);

    const EpisodeTrace noneg = trace_for(Variant::no_support_neg);
    CHECK(noneg.extended_rows == k);
    CHECK(noneg.condition_rows == k);
    CHECK(noneg.z_width == 2 * d);
    CHECK(noneg.z_width * 2 == full.z_width);

    const EpisodeTrace nosep = trace_for(Variant::no_posneg_sep);
    CHECK(nosep.extended_rows == 2 * k);
    CHECK(nosep.condition_width == 3 * d);
    CHECK(!nosep.labels_in_condition);
    CHECK(nosep.z_width == 2 * d);

    const EpisodeTrace norecd = trace_for(Variant::no_recd);
    CHECK(!norecd.used_diffusion);
    CHECK(norecd.condition_rows == 0);
    CHECK(norecd.diffusion_t == 0);
    CHECK(norecd.used_attn_pool);

    const EpisodeTrace nort = trace_for(Variant::no_recd_attnpool);
    CHECK(!nort.used_diffusion);
    CHECK(!nort.used_attn_pool);
    CHECK(nort.z_width == 4 * d);

    const EpisodeTrace nopool = trace_for(Variant::no_attnpool);
    CHECK(nopool.used_diffusion);
    CHECK(!nopool.used_attn_pool);
    CHECK(nopool.z_width == 4 * d);
}

// End-to-end compositional oracle: a two-entity world, k = 1, d = 2, MLP
// denoiser variant so every stage (aggregator, relation learner, denoiser,
// pooler, scorer) can be recomputed with plain double loops.
TEST_CASE("query scores match a manual composition of all module oracles") {
    Dataset ds;
    const int a = ds.intern_entity("ent:p:a");
    const int b = ds.intern_entity("ent:q:b");
    const int bg = ds.intern_relation("rel:bg");
    const int r = ds.intern_relation("rel:task");
    ds.background.push_back({a, bg, b});
    ds.add_true(a, bg, b);
    ds.add_true(a, r, b);
    ds.set_candidates(r, {a, b});
    ds.finalize();
    const NeighborGraph g = build_neighbor_graph(ds, 4, 1);

    RunConfig cfg = small_config(Variant::no_recd);
    cfg.dim = 2;
    cfg.few = 1;
    cfg.n_query = 1;
    Model m = build_model(ds, cfg);

    EpisodeTask ep;
    ep.relation = r;
    ep.support_pos = {{a, r, b}};
    ep.support_neg = {{a, r, a}};
    ep.query_pos = {{a, r, b}};
    ep.query_neg = {{a, r, a}};

    Tape tape;
    Rng rng(5);
    const EpisodeLosses losses = forward_episode_train(tape, m, g, ep, rng);

    // Plain-double helpers.
    using Vec = std::vector<double>;
    auto mat = [&](const char* name) { return m.reg.at(name).value; };
    auto matv = [](const Tensor& W, const Vec& x) {
        Vec y(static_cast<size_t>(W.rows()), 0.0);
        for (int i = 0; i < W.rows(); ++i)
            for (int j = 0; j < W.cols(); ++j) y[static_cast<size_t>(i)] += W.at(i, j) * x[static_cast<size_t>(j)];
        return y;
    };
    auto cat = [](std::initializer_list<Vec> parts) {
        Vec out;
        for (const Vec& p : parts) out.insert(out.end(), p.begin(), p.end());
        return out;
    };
    auto addv = [](const Vec& x, const Vec& y) {
        Vec out(x.size());
        for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
        return out;
    };
    auto smax = [](Vec s) {
        double mx = *std::max_element(s.begin(), s.end()), z = 0;
        for (double& v : s) z += (v = std::exp(v - mx));
        for (double& v : s) v /= z;
        return s;
    };
    auto leaky = [](Vec x) {
        for (double& v : x) v = v > 0 ? v : kLeakySlope * v;
        return x;
    };
    auto dotv = [](const Vec& x, const Vec& y) {
        double s = 0;
        for (size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
        return s;
    };
    auto trow = [](const Tensor& T, int i) {
        Vec out(static_cast<size_t>(T.cols()));
        for (int j = 0; j < T.cols(); ++j) out[static_cast<size_t>(j)] = T.at(i, j);
        return out;
    };

    const Tensor E = mat("embeddings.entity");
    const Tensor R = mat("embeddings.relation");
    const Tensor Wr = mat("aggregator.W_r");
    const Tensor Wloop = mat("aggregator.W_loop");
    Vec agg_w(static_cast<size_t>(mat("aggregator.w").shape[0]));
    for (size_t i = 0; i < agg_w.size(); ++i) agg_w[i] = mat("aggregator.w").data[i];

    // Two rounds of neighbor attention, mirroring the encoder.
    auto agg_round = [&](int v, const std::vector<Vec>& prev) {
        const Vec& h_v = prev[static_cast<size_t>(v)];
        std::vector<Vec> msgs;
        Vec scores;
        for (const auto& [rel, u] : g.neighbors(v)) {
            Vec msg = matv(Wr, cat({prev[static_cast<size_t>(u)], trow(R, rel), h_v}));
            double s = dotv(agg_w, cat({h_v, msg}));
            scores.push_back(s > 0 ? s : kLeakySlope * s);
            msgs.push_back(std::move(msg));
        }
        Vec out = matv(Wloop, h_v);
        if (!msgs.empty()) {
            const Vec alpha = smax(scores);
            for (size_t i = 0; i < msgs.size(); ++i)
                for (size_t j = 0; j < out.size(); ++j) out[j] += alpha[i] * msgs[i][j];
        }
        return out;
    };
    std::vector<Vec> h0 = {trow(E, 0), trow(E, 1)};
    std::vector<Vec> h1 = {agg_round(0, h0), agg_round(1, h0)};
    std::vector<Vec> h2 = {agg_round(0, h1), agg_round(1, h1)};

    const Vec row_pos = cat({h2[static_cast<size_t>(a)], h2[static_cast<size_t>(b)]});
    const Vec row_neg = cat({h2[static_cast<size_t>(a)], h2[static_cast<size_t>(a)]});

    // Bi-directional recurrent relation encoding of the single positive row.
    auto lstm_step = [&](const std::string& prefix, const Vec& x) {
        auto gate = [&](const char* gname, auto act) {
            Vec pre = matv(mat((prefix + ".W_" + gname).c_str()), x);
            const Tensor& bias = mat((prefix + ".b_" + gname).c_str());
            for (size_t i = 0; i < pre.size(); ++i) pre[i] = act(pre[i] + bias.data[i]);
            return pre;  // zero initial state: U terms vanish
        };
        auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
        auto th = [](double v) { return std::tanh(v); };
        const Vec i = gate("i", sig), gg = gate("g", th), o = gate("o", sig);
        Vec h(i.size());
        for (size_t j = 0; j < h.size(); ++j) h[j] = o[j] * std::tanh(i[j] * gg[j]);
        return h;
    };
    const Vec hidden = cat({lstm_step("relation.fwd", row_pos), lstm_step("relation.bwd", row_pos)});
    const Vec r_prime = matv(mat("relation.W_out"), hidden);  // gamma = softmax of one score = 1

    // Per-row MLP denoiser.
    auto denoise = [&](const Vec& x) {
        Vec h = matv(mat("denoise_mlp.w1"), x);
        for (size_t i = 0; i < h.size(); ++i) h[i] += mat("denoise_mlp.b1").data[i];
        h = leaky(std::move(h));
        Vec y = matv(mat("denoise_mlp.w2"), h);
        for (size_t i = 0; i < y.size(); ++i) y[i] += mat("denoise_mlp.b2").data[i];
        return y;
    };
    const Vec y_pos = denoise(row_pos), y_neg = denoise(row_neg);

    // Attention pooling of a single row reduces to its transformed values.
    auto pool_one = [&](const std::string& prefix, const Vec& x) {
        Vec pooled = matv(mat((prefix + ".W_v").c_str()), x);
        Vec h = matv(mat((prefix + ".mlp_w1").c_str()), pooled);
        for (size_t i = 0; i < h.size(); ++i) h[i] += mat((prefix + ".mlp_b1").c_str()).data[i];
        h = leaky(std::move(h));
        Vec z = matv(mat((prefix + ".mlp_w2").c_str()), h);
        for (size_t i = 0; i < z.size(); ++i) z[i] += mat((prefix + ".mlp_b2").c_str()).data[i];
        return z;
    };
    const Vec z = cat({pool_one("pooler.pos", y_pos), pool_one("pooler.neg", y_neg)});

    auto score_of = [&](int head, int tail) {
        const Vec hp = addv(h2[static_cast<size_t>(head)], matv(mat("scorer.W_h"), z));
        const Vec tp = addv(h2[static_cast<size_t>(tail)], matv(mat("scorer.W_t"), z));
        double sq = 0;
        for (size_t j = 0; j < hp.size(); ++j) {
            const double dd = hp[j] + r_prime[j] - tp[j];
            sq += dd * dd;
        }
        return -std::sqrt(sq);
    };
    const double s_pos = score_of(a, b);
    const double s_neg = score_of(a, a);

    CHECK(tape.value(losses.pos_scores[0]).at(0) == Catch::Approx(s_pos).margin(1e-10));
    CHECK(tape.value(losses.neg_scores[0]).at(0) == Catch::Approx(s_neg).margin(1e-10));
    const double hinge = std::max(0.0, cfg.margin - (s_pos - s_neg));
    CHECK(tape.value(losses.total).at(0) == Catch::Approx(hinge).margin(1e-10));
}

TEST_CASE("a split with one task and one guaranteed-rank-1 query gives MRR 1") {
    Dataset ds;
    const int a = ds.intern_entity("ent:p:a");
    const int b = ds.intern_entity("ent:q:b");
    const int c = ds.intern_entity("ent:q:c");
    const int e = ds.intern_entity("ent:p:e");
    const int f = ds.intern_entity("ent:q:f");
    const int bg = ds.intern_relation("rel:bg");
    const int r = ds.intern_relation("rel:task");
    ds.background.push_back({a, bg, b});
    ds.background.push_back({e, bg, f});
    ds.add_true(a, bg, b);
    ds.add_true(e, bg, f);
    ds.add_true(a, r, b);
    ds.add_true(a, r, c);  // filtered out of the query's candidates
    ds.add_true(e, r, f);
    ds.set_candidates(r, {b, c});
    TaskRelation task;
    task.relation = r;
    task.triples = {{e, r, f}, {a, r, b}};
    ds.splits[1].push_back(task);
    ds.finalize();
    const NeighborGraph g = build_neighbor_graph(ds, 4, 1);

    RunConfig cfg = small_config();
    cfg.dim = 4;
    cfg.few = 1;
    Model m = build_model(ds, cfg);
    std::map<std::string, Metrics> per;
    const Metrics valid = evaluate_split(m, ds, g, Split::valid, 5, &per);
    CHECK(valid.mrr == 1.0);
    CHECK(valid.hits1 == 1.0);
    CHECK(valid.n_queries == 1);
    CHECK(per.at("rel:task").mrr == 1.0);
}

TEST_CASE("zero parameters give margin = delta and a replayable diffusion MSE") {
    const World& w = small_world();
    const RunConfig cfg = small_config();
    Model m = build_model(w.ds, cfg);
    zero_all(m.reg);

    const EpisodeTask ep = train_episode(w.ds, cfg, 31);
    Tape tape;
    Rng rng(999);
    const EpisodeLosses losses = forward_episode_train(tape, m, w.graph, ep, rng);

    // All activations collapse to zero, so pos and neg scores are both zero
    // and every hinge is exactly the margin.
    CHECK(tape.value(losses.margin).at(0) == cfg.margin);
    for (Val s : losses.pos_scores) CHECK(tape.value(s).at(0) == 0.0);

    // The noise predictor outputs zero, so the MSE is the mean squared norm
    // of the replayed noise draw.
    Rng replay(999);
    (void)replay.uniform_int(cfg.t_steps);
    const int rows = 2 * cfg.few;
    const Tensor eps = replay.normal_tensor({rows, 2 * cfg.dim});
    double expect = 0.0;
    for (double e : eps.data) expect += e * e;
    expect *= 1.0 / rows;
    CHECK(tape.value(losses.mse).at(0) == Catch::Approx(expect).epsilon(1e-14));
    CHECK(tape.value(losses.total).at(0) == Catch::Approx(cfg.margin + expect).epsilon(1e-14));
}

TEST_CASE("one optimizer step touches every module group") {
    const World& w = small_world();
    const RunConfig cfg = small_config();
    Model m = build_model(w.ds, cfg);

    std::vector<Tensor> before;
    for (size_t i = 0; i < m.reg.size(); ++i) before.push_back(m.reg[i].value);

    const EpisodeTask ep = train_episode(w.ds, cfg, 31);
    Tape tape;
    Rng rng(5);
    const EpisodeLosses losses = forward_episode_train(tape, m, w.graph, ep, rng);
    backward(tape, losses.total, m.reg);
    AdamState adam;
    adam.init(m.reg);
    adam.step(m.reg, cfg.lr);

    const std::vector<std::string> groups = {"embeddings.", "aggregator.", "relation.",
                                             "unet.",       "pooler.",     "scorer."};
    for (const std::string& g : groups) {
        bool changed = false;
        for (size_t i = 0; i < m.reg.size(); ++i) {
            if (m.reg[i].name.rfind(g, 0) != 0) continue;
            for (size_t j = 0; j < before[i].data.size(); ++j)
                if (m.reg[i].value.data[j] != before[i].data[j]) changed = true;
        }
        INFO("group " << g);
        CHECK(changed);
    }
}

TEST_CASE("repeated steps on a frozen episode drive the loss down") {
    const World& w = small_world();
    RunConfig cfg = small_config();
    cfg.lr = 5e-3;
    Model m = build_model(w.ds, cfg);
    const EpisodeTask ep = train_episode(w.ds, cfg, 31);

    AdamState adam;
    adam.init(m.reg);
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 60; ++step) {
        Tape tape;
        Rng rng(7);  // same diffusion draw every step
        const EpisodeLosses losses = forward_episode_train(tape, m, w.graph, ep, rng);
        last = tape.value(losses.total).at(0);
        if (step == 0) first = last;
        backward(tape, losses.total, m.reg);
        adam.step(m.reg, cfg.lr);
    }
    CHECK(last < first);
    CHECK(last < 0.8 * first);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

TEST_CASE("evaluate_episode returns deterministic in-range ranks") {
    const World& w = small_world();
    const RunConfig cfg = small_config();
    Model m = build_model(w.ds, cfg);

    const TaskRelation& task = w.ds.splits[1].at(0);
    Rng ep_rng(3);
    const EpisodeTask ep = eval_episode(w.ds, task, cfg.few, ep_rng);

    Rng s1(17), s2(17), s3(18);
    const auto ranks1 = evaluate_episode(m, w.ds, w.graph, ep, s1);
    const auto ranks2 = evaluate_episode(m, w.ds, w.graph, ep, s2);
    CHECK(ranks1 == ranks2);
    CHECK(ranks1.size() == ep.query_pos.size());
    for (size_t i = 0; i < ranks1.size(); ++i) {
        const int n_cands = static_cast<int>(query_candidates(w.ds, ep.query_pos[i], cfg.filtered).size());
        CHECK(ranks1[i] >= 1);
        CHECK(ranks1[i] <= n_cands);
    }
    // A different sampling stream may give different ranks, but must stay valid.
    const auto ranks3 = evaluate_episode(m, w.ds, w.graph, ep, s3);
    CHECK(ranks3.size() == ranks1.size());
}

TEST_CASE("evaluate_split aggregates every eligible relation") {
    const World& w = small_world();
    const RunConfig cfg = small_config();
    Model m = build_model(w.ds, cfg);

    std::map<std::string, Metrics> per;
    const Metrics valid = evaluate_split(m, w.ds, w.graph, Split::valid, 99, &per);

    long expect_queries = 0;
    int eligible = 0;
    for (const TaskRelation& task : w.ds.splits[1]) {
        if (static_cast<int>(task.triples.size()) < cfg.few + 1) continue;
        ++eligible;
        expect_queries += static_cast<long>(task.triples.size()) - cfg.few;
    }
    CHECK(valid.n_queries == expect_queries);
    CHECK(static_cast<int>(per.size()) == eligible);
    CHECK(valid.hits1 <= valid.hits5);
    CHECK(valid.hits5 <= valid.hits10);
    CHECK(valid.mrr >= valid.hits1);

    long per_total = 0;
    for (const auto& [name, pm] : per) per_total += pm.n_queries;
    CHECK(per_total == valid.n_queries);

    // Same seed, same result; metrics are pure given the model.
    const Metrics again = evaluate_split(m, w.ds, w.graph, Split::valid, 99);
    CHECK(again.mrr == valid.mrr);
}

TEST_CASE("evaluate_split rejects a split with no usable relations") {
    const World& w = small_world();
    RunConfig cfg = small_config();
    cfg.few = 40;  // more support than any synthetic task has
    Model m = build_model(w.ds, cfg);
    CHECK_THROWS_AS(evaluate_split(m, w.ds, w.graph, Split::valid, 1), DataError);
}

TEST_CASE("metrics_json has the full schema") {
    const RunConfig cfg = small_config();
    std::map<std::string, Metrics> per;
    per["rel:a"] = compute_metrics({1, 2});
    const nlohmann::json j = metrics_json(cfg, "valid", compute_metrics({1, 2, 3}), per);
    for (const char* key : {"variant", "split", "mrr", "hits1", "hits5", "hits10", "n_queries", "per_relation",
                            "config_hash", "seed"})
        CHECK(j.contains(key));
    CHECK(j["variant"] == "full");
    CHECK(j["split"] == "valid");
    CHECK(j["n_queries"] == 3);
    CHECK(j["per_relation"].contains("rel:a"));
    CHECK(j["per_relation"]["rel:a"]["n_queries"] == 2);
    CHECK(j["config_hash"] == config_hash(cfg));
    // Empty per-relation map still serializes as an object.
    const nlohmann::json j2 = metrics_json(cfg, "test", compute_metrics({1}), {});
    CHECK(j2["per_relation"].is_object());
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

TEST_CASE("checkpoint round-trips parameters exactly") {
    const World& w = small_world();
    const RunConfig cfg = small_config();
    Model m = build_model(w.ds, cfg);
    const fs::path dir = fresh_dir("ckpt");
    const std::string path = (dir / "model.ckpt").string();

    std::vector<Tensor> saved;
    for (size_t i = 0; i < m.reg.size(); ++i) saved.push_back(m.reg[i].value);
    save_checkpoint(path, cfg, m.reg, 42, 0.625);

    // Perturb, then restore.
    for (size_t i = 0; i < m.reg.size(); ++i)
        for (double& x : m.reg[i].value.data) x += 1.0;
    load_checkpoint_params(path, m.reg);
    for (size_t i = 0; i < m.reg.size(); ++i) CHECK(m.reg[i].value.data == saved[i].data);

    const CheckpointHeader h = read_checkpoint_header(path);
    CHECK(h.version == kCheckpointVersion);
    CHECK(h.step == 42);
    CHECK(h.best_mrr == 0.625);
    CHECK(to_json(h.cfg) == to_json(cfg));
}

TEST_CASE("checkpoint loading rejects missing, mismatched and truncated files") {
    const World& w = small_world();
    const RunConfig cfg = small_config();
    Model m = build_model(w.ds, cfg);
    const fs::path dir = fresh_dir("ckpt_bad");

    CHECK_THROWS_AS(read_checkpoint_header((dir / "absent.ckpt").string()), DataError);
    CHECK_THROWS_AS(load_checkpoint_params((dir / "absent.ckpt").string(), m.reg), DataError);

    {
        std::ofstream out(dir / "badver.ckpt", std::ios::binary);
        out << R"({"version":99,"step":0,"best_mrr":0,"config":{},"params":[]})" << "\n";
    }
    CHECK_THROWS_AS(read_checkpoint_header((dir / "badver.ckpt").string()), DataError);
    CHECK_THROWS_AS(load_checkpoint_params((dir / "badver.ckpt").string(), m.reg), DataError);

    {
        std::ofstream out(dir / "garbage.ckpt", std::ios::binary);
        out << "not json at all\n";
    }
    CHECK_THROWS_AS(read_checkpoint_header((dir / "garbage.ckpt").string()), DataError);

    // Valid manifest, payload cut short.
    const std::string full_path = (dir / "full.ckpt").string();
    save_checkpoint(full_path, cfg, m.reg, 1, 0.0);
    const std::string bytes = read_file(full_path);
    {
        std::ofstream out(dir / "short.ckpt", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 64));
    }
    CHECK_THROWS_AS(load_checkpoint_params((dir / "short.ckpt").string(), m.reg), DataError);

    // Registry shaped differently than the checkpoint.
    RunConfig other = cfg;
    other.dim = 4;
    Model m2 = build_model(w.ds, other);
    CHECK_THROWS_AS(load_checkpoint_params(full_path, m2.reg), DataError);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TEST_CASE("identical seeds give byte-identical checkpoints and histories") {
    const World& w = small_world();
    const fs::path dir = fresh_dir("determinism");

    auto run = [&](const std::string& tag, uint64_t seed) {
        RunConfig cfg = small_config();
        cfg.seed = seed;
        Model m = build_model(w.ds, cfg);
        const std::string path = (dir / (tag + ".ckpt")).string();
        const TrainResult res = train(m, w.ds, w.graph, path);
        return std::make_pair(res, path);
    };

    const auto [res_a, path_a] = run("a", 21);
    const auto [res_b, path_b] = run("b", 21);
    CHECK(res_a.history == res_b.history);
    CHECK(res_a.best_mrr == res_b.best_mrr);
    CHECK(res_a.best_step == res_b.best_step);
    const std::string bytes_a = read_file(path_a);
    CHECK(!bytes_a.empty());
    CHECK(bytes_a == read_file(path_b));

    const auto [res_c, path_c] = run("c", 22);
    CHECK(bytes_a != read_file(path_c));
}

TEST_CASE("train reports eval history and a best step") {
    const World& w = small_world();
    RunConfig cfg = small_config();
    cfg.max_steps = 6;
    cfg.eval_interval = 2;
    Model m = build_model(w.ds, cfg);

    std::ostringstream log;
    const TrainResult res = train(m, w.ds, w.graph, "", &log);
    CHECK(res.steps_run == 6);
    CHECK(res.history.size() == 3);
    CHECK(res.best_step >= 1);
    double best = 0.0;
    for (const auto& [step, mrr] : res.history) best = std::max(best, mrr);
    CHECK(res.best_mrr == best);
    CHECK(log.str().find("valid_mrr") != std::string::npos);
}

TEST_CASE("train aborts with a diagnostic when the loss is not finite") {
    const World& w = small_world();
    const RunConfig cfg = small_config();
    Model m = build_model(w.ds, cfg);
    m.reg.at("embeddings.entity").value.data[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_MATCHES(train(m, w.ds, w.graph), DomainError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("not finite")));
}

TEST_CASE("gradient-check suite passes for every module and composed loss") {
    std::ostringstream log;
    const auto results = run_gradcheck_suite(29, 2, &log);
    REQUIRE(all_passed(results));
    std::set<std::string> names;
    for (const auto& r : results) {
        names.insert(r.name);
        INFO(r.name << " max_rel_err " << r.max_rel_err);
        CHECK(r.max_rel_err <= r.tolerance);
    }
    CHECK(names == std::set<std::string>{"primitives", "aggregator", "relation_learner", "diffusion", "pooler",
                                         "scorer", "episode_full", "episode_no_recd"});
    // The primitives check holds itself to the tight numerics tolerance.
    for (const auto& r : results)
        if (r.name == "primitives") CHECK(r.tolerance == 1e-6);
}

TEST_CASE("train requires usable training relations") {
    const World& w = small_world();
    RunConfig cfg = small_config();
    cfg.few = 40;
    Model m = build_model(w.ds, cfg);
    CHECK_THROWS_AS(train(m, w.ds, w.graph), DataError);
}
