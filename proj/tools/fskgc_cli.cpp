// Command-line front end: train / eval / ablate / gen-synth / grad-check.
//
// Exit codes: 0 success, 1 runtime failure (bad data, missing files, NaN
// abort, failed checks), 2 usage errors.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "fskgc/checkpoint.hpp"
#include "fskgc/checks.hpp"
#include "fskgc/kg_data.hpp"
#include "fskgc/model.hpp"
#include "fskgc/synth.hpp"
#include "fskgc/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Model/run flags shared by train and ablate (eval reads most of its config
// from the checkpoint). Values land in `staged`; only flags the user actually
// passed override the base config.
struct ModelFlags {
    fskgc::RunConfig staged;
    std::string variant = "full";
    std::string config_file;
    CLI::Option* o_dataset = nullptr;
    CLI::Option* o_few = nullptr;
    CLI::Option* o_nquery = nullptr;
    CLI::Option* o_batch = nullptr;
    CLI::Option* o_lr = nullptr;
    CLI::Option* o_margin = nullptr;
    CLI::Option* o_tsteps = nullptr;
    CLI::Option* o_dim = nullptr;
    CLI::Option* o_unet_base = nullptr;
    CLI::Option* o_neighbors = nullptr;
    CLI::Option* o_steps = nullptr;
    CLI::Option* o_evalint = nullptr;
    CLI::Option* o_patience = nullptr;
    CLI::Option* o_seed = nullptr;
    CLI::Option* o_variant = nullptr;
    CLI::Option* o_unfiltered = nullptr;
    bool unfiltered = false;
};

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
    cmd->add_option("--config", f.config_file, "JSON config file; explicit flags override its values");
    f.o_dataset = cmd->add_option("--dataset-dir", f.staged.dataset_dir, "dataset directory");
    f.o_few = cmd->add_option("--few", f.staged.few, "support triples per episode");
    f.o_nquery = cmd->add_option("--n-query", f.staged.n_query, "training queries per episode");
    f.o_batch = cmd->add_option("--batch-size", f.staged.batch_size, "episodes per optimizer step");
    f.o_lr = cmd->add_option("--lr", f.staged.lr, "learning rate");
    f.o_margin = cmd->add_option("--margin", f.staged.margin, "ranking margin");
    f.o_tsteps = cmd->add_option("--t-steps", f.staged.t_steps, "diffusion steps T");
    f.o_dim = cmd->add_option("--dim", f.staged.dim, "embedding width d");
    f.o_unet_base = cmd->add_option("--unet-base", f.staged.unet_base, "first encoder width of the noise predictor");
    f.o_neighbors = cmd->add_option("--max-neighbors", f.staged.max_neighbors, "neighbor cap per entity");
    f.o_steps = cmd->add_option("--max-steps", f.staged.max_steps, "training steps");
    f.o_evalint = cmd->add_option("--eval-interval", f.staged.eval_interval, "steps between validations");
    f.o_patience = cmd->add_option("--patience", f.staged.patience, "validations without improvement before stopping");
    f.o_seed = cmd->add_option("--seed", f.staged.seed, "run seed");
    f.o_variant = cmd->add_option("--variant", f.variant,
                                  "model variant: full, no_recd, no_attnpool, no_recd_attnpool, "
                                  "no_support_neg, no_posneg_sep");
    f.o_unfiltered = cmd->add_flag("--unfiltered", f.unfiltered, "rank against raw candidate lists");
}

fskgc::RunConfig resolve_config(const ModelFlags& f) {
    fskgc::RunConfig cfg;
    if (!f.config_file.empty()) {
        std::ifstream in(f.config_file);
        if (!in) throw fskgc::ConfigError("cannot open config file '" + f.config_file + "'");
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw fskgc::ConfigError("config file '" + f.config_file + "': " + e.what());
        }
        cfg = fskgc::config_from_json(j);
    }
    if (f.o_dataset->count()) cfg.dataset_dir = f.staged.dataset_dir;
    if (f.o_few->count()) cfg.few = f.staged.few;
    if (f.o_nquery->count()) cfg.n_query = f.staged.n_query;
    if (f.o_batch->count()) cfg.batch_size = f.staged.batch_size;
    if (f.o_lr->count()) cfg.lr = f.staged.lr;
    if (f.o_margin->count()) cfg.margin = f.staged.margin;
    if (f.o_tsteps->count()) cfg.t_steps = f.staged.t_steps;
    if (f.o_dim->count()) cfg.dim = f.staged.dim;
    if (f.o_unet_base->count()) cfg.unet_base = f.staged.unet_base;
    if (f.o_neighbors->count()) cfg.max_neighbors = f.staged.max_neighbors;
    if (f.o_steps->count()) cfg.max_steps = f.staged.max_steps;
    if (f.o_evalint->count()) cfg.eval_interval = f.staged.eval_interval;
    if (f.o_patience->count()) cfg.patience = f.staged.patience;
    if (f.o_seed->count()) cfg.seed = f.staged.seed;
    if (f.o_variant->count()) cfg.variant = fskgc::parse_variant(f.variant);
    if (f.o_unfiltered->count()) cfg.filtered = !f.unfiltered;
    if (cfg.dataset_dir.empty())
        throw fskgc::ConfigError("no dataset: pass --dataset-dir or a config file that sets dataset_dir");
    fskgc::validate(cfg);
    return cfg;
}

fskgc::Split parse_split(const std::string& s) {
    if (s == "train") return fskgc::Split::train;
    if (s == "valid") return fskgc::Split::valid;
    if (s == "test") return fskgc::Split::test;
    throw fskgc::ConfigError("unknown split '" + s + "' (expected train, valid or test)");
}

uint64_t eval_stream(const fskgc::RunConfig& cfg) { return fskgc::splitmix64(cfg.seed ^ 0x5eedu); }

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw fskgc::DataError("cannot write '" + path.string() + "'");
    out << text;
}

void emit_metrics(const fskgc::RunConfig& cfg, const std::string& split_str, const fskgc::Metrics& m,
                  const std::map<std::string, fskgc::Metrics>& per, const fs::path& out_file) {
    const std::string text = fskgc::metrics_json(cfg, split_str, m, per).dump(2) + "\n";
    std::cout << text;
    fs::create_directories(out_file.parent_path());
    write_text(out_file, text);
}

fskgc::Metrics eval_with_params(const fskgc::Model& model, const fskgc::Dataset& ds, const fskgc::NeighborGraph& g,
                                fskgc::Split split, std::map<std::string, fskgc::Metrics>& per) {
    return fskgc::evaluate_split(model, ds, g, split, eval_stream(model.cfg), &per);
}

int run_train(const ModelFlags& flags, const std::string& out_dir) {
    const fskgc::RunConfig cfg = resolve_config(flags);
    fs::create_directories(out_dir);
    const fskgc::Dataset ds = fskgc::load_dataset(cfg.dataset_dir);
    const fskgc::NeighborGraph graph = fskgc::build_neighbor_graph(ds, cfg.max_neighbors, cfg.seed);
    fskgc::Model model = fskgc::build_model(ds, cfg);

    write_text(fs::path(out_dir) / "config.json", fskgc::to_json(cfg).dump(2) + "\n");
    const std::string ckpt = (fs::path(out_dir) / "best.ckpt").string();
    const fskgc::TrainResult res = fskgc::train(model, ds, graph, ckpt, &std::cerr);

    json summary = {{"variant", fskgc::variant_name(cfg.variant)},
                    {"steps_run", res.steps_run},
                    {"best_step", res.best_step},
                    {"best_mrr", res.best_mrr},
                    {"early_stopped", res.early_stopped},
                    {"checkpoint", ckpt},
                    {"config_hash", fskgc::config_hash(cfg)},
                    {"seed", cfg.seed}};
    const std::string text = summary.dump(2) + "\n";
    std::cout << text;
    write_text(fs::path(out_dir) / "train_summary.json", text);
    return 0;
}

int run_eval(const std::string& checkpoint, const std::string& split_str, const std::string& dataset_override,
             const std::string& out_dir) {
    const fskgc::CheckpointHeader header = fskgc::read_checkpoint_header(checkpoint);
    fskgc::RunConfig cfg = header.cfg;
    if (!dataset_override.empty()) cfg.dataset_dir = dataset_override;
    const fskgc::Dataset ds = fskgc::load_dataset(cfg.dataset_dir);
    const fskgc::NeighborGraph graph = fskgc::build_neighbor_graph(ds, cfg.max_neighbors, cfg.seed);
    fskgc::Model model = fskgc::build_model(ds, cfg);
    fskgc::load_checkpoint_params(checkpoint, model.reg);

    std::map<std::string, fskgc::Metrics> per;
    const fskgc::Metrics m = eval_with_params(model, ds, graph, parse_split(split_str), per);
    emit_metrics(cfg, split_str, m, per, fs::path(out_dir) / ("metrics_" + split_str + ".json"));
    return 0;
}

int run_ablate(const ModelFlags& flags, const std::string& split_str, const std::string& out_dir) {
    if (!flags.o_variant->count())
        throw fskgc::ConfigError("ablate requires --variant");
    const fskgc::RunConfig cfg = resolve_config(flags);
    fs::create_directories(out_dir);
    const fskgc::Dataset ds = fskgc::load_dataset(cfg.dataset_dir);
    const fskgc::NeighborGraph graph = fskgc::build_neighbor_graph(ds, cfg.max_neighbors, cfg.seed);
    fskgc::Model model = fskgc::build_model(ds, cfg);

    const std::string ckpt = (fs::path(out_dir) / (fskgc::variant_name(cfg.variant) + ".ckpt")).string();
    const fskgc::TrainResult res = fskgc::train(model, ds, graph, ckpt, &std::cerr);
    // Evaluate the best parameters seen, not the last step's.
    if (res.best_step >= 0) fskgc::load_checkpoint_params(ckpt, model.reg);

    std::map<std::string, fskgc::Metrics> per;
    const fskgc::Metrics m = eval_with_params(model, ds, graph, parse_split(split_str), per);
    emit_metrics(cfg, split_str, m, per,
                 fs::path(out_dir) / ("metrics_" + fskgc::variant_name(cfg.variant) + "_" + split_str + ".json"));
    return 0;
}

int run_gen_synth(const std::string& out_dir, int entities, int relations, int triples_per_task, int candidate_pool,
                  uint64_t seed) {
    fskgc::SynthConfig sc;
    sc.n_entities = entities;
    sc.triples_per_task = triples_per_task;
    sc.candidate_pool = candidate_pool;
    sc.seed = seed;
    // Relation count decomposes as background(4) + train tasks(8) + noise +
    // valid(3) + test(3); --relations adjusts the noise-task count.
    const int fixed = 18;
    if (relations < fixed)
        throw fskgc::ConfigError("gen-synth: --relations must be >= " + std::to_string(fixed));
    sc.noise_train_relations = relations - fixed;
    const fskgc::SynthManifest man = fskgc::write_synthetic_dataset(out_dir, sc);
    json j = {{"out_dir", out_dir},
              {"entities", man.entities},
              {"relations", man.relations},
              {"background_triples", man.background_triples},
              {"splits",
               {{"train", {{"relations", man.relations_per_split[0]}, {"triples", man.triples_per_split[0]}}},
                {"valid", {{"relations", man.relations_per_split[1]}, {"triples", man.triples_per_split[1]}}},
                {"test", {{"relations", man.relations_per_split[2]}, {"triples", man.triples_per_split[2]}}}}},
              {"seed", seed}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

int run_grad_check(uint64_t seed, int coords) {
    const auto results = fskgc::run_gradcheck_suite(seed, coords, &std::cout);
    const bool ok = fskgc::all_passed(results);
    std::cout << (ok ? "grad-check: all checks passed" : "grad-check: FAILURES") << "\n";
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot knowledge-graph completion with a relation-conditioned denoising latent"};
    app.require_subcommand(1);

    ModelFlags train_flags;
    std::string train_out = "run";
    CLI::App* cmd_train = app.add_subcommand("train", "train a model and keep the best-MRR checkpoint");
    add_model_flags(cmd_train, train_flags);
    cmd_train->add_option("--out-dir", train_out, "output directory");

    std::string eval_ckpt, eval_split = "test", eval_dataset, eval_out = "run";
    CLI::App* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    cmd_eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    cmd_eval->add_option("--split", eval_split, "train, valid or test");
    cmd_eval->add_option("--dataset-dir", eval_dataset, "override the checkpoint's dataset directory");
    cmd_eval->add_option("--out-dir", eval_out, "output directory");

    ModelFlags ablate_flags;
    std::string ablate_out = "run", ablate_split = "valid";
    CLI::App* cmd_ablate = app.add_subcommand("ablate", "train and evaluate one model variant");
    add_model_flags(cmd_ablate, ablate_flags);
    cmd_ablate->add_option("--out-dir", ablate_out, "output directory");
    cmd_ablate->add_option("--split", ablate_split, "split to report");

    std::string synth_out;
    int synth_entities = 200, synth_relations = 20, synth_triples = 30, synth_pool = 48;
    uint64_t synth_seed = 7;
    CLI::App* cmd_synth = app.add_subcommand("gen-synth", "write the deterministic synthetic dataset");
    cmd_synth->add_option("--out-dir", synth_out, "dataset directory to create")->required();
    cmd_synth->add_option("--entities", synth_entities, "entity count");
    cmd_synth->add_option("--relations", synth_relations, "total relation count");
    cmd_synth->add_option("--triples-per-task", synth_triples, "triples per task relation");
    cmd_synth->add_option("--candidate-pool", synth_pool, "candidate list size per relation");
    cmd_synth->add_option("--seed", synth_seed, "generator seed");

    uint64_t check_seed = 29;
    int check_coords = 4;
    CLI::App* cmd_check = app.add_subcommand("grad-check", "finite-difference gradient checks");
    cmd_check->add_option("--seed", check_seed, "check seed");
    cmd_check->add_option("--coords", check_coords, "sampled coordinates per parameter in composed checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand(cmd_train)) return run_train(train_flags, train_out);
        if (app.got_subcommand(cmd_eval)) return run_eval(eval_ckpt, eval_split, eval_dataset, eval_out);
        if (app.got_subcommand(cmd_ablate)) return run_ablate(ablate_flags, ablate_split, ablate_out);
        if (app.got_subcommand(cmd_synth))
            return run_gen_synth(synth_out, synth_entities, synth_relations, synth_triples, synth_pool, synth_seed);
        if (app.got_subcommand(cmd_check)) return run_grad_check(check_seed, check_coords);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
