// Checkpoint format: one JSON manifest line (version, run config, step,
// best validation MRR, parameter names and shapes in registry order),
// followed by every parameter's values as raw little-endian float64.
//
// Loading validates the version and that parameter names and shapes match
// the registry the values are restored into. Identical runs produce
// byte-identical files.
#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "fskgc/autodiff.hpp"
#include "fskgc/model.hpp"
#include "fskgc/numerics.hpp"

namespace fskgc {

inline constexpr int kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written as native float64 and assumes a little-endian host");

struct CheckpointHeader {
    int version = 0;
    long step = 0;
    double best_mrr = 0.0;
    RunConfig cfg;
};

inline void save_checkpoint(const std::string& path, const RunConfig& cfg, const ParamRegistry& reg, long step,
                            double best_mrr) {
    nlohmann::json params = nlohmann::json::array();
    for (size_t i = 0; i < reg.size(); ++i)
        params.push_back({{"name", reg[i].name}, {"shape", reg[i].value.shape}});
    const nlohmann::json manifest = {{"version", kCheckpointVersion},
                                     {"step", step},
                                     {"best_mrr", best_mrr},
                                     {"config", to_json(cfg)},
                                     {"config_hash", config_hash(cfg)},
                                     {"params", params}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + path + "'");
    out << manifest.dump() << '\n';
    for (size_t i = 0; i < reg.size(); ++i) {
        const Tensor& v = reg[i].value;
        out.write(reinterpret_cast<const char*>(v.data.data()),
                  static_cast<std::streamsize>(v.data.size() * sizeof(double)));
    }
    if (!out) throw DataError("failed while writing checkpoint '" + path + "'");
}

namespace detail {

inline nlohmann::json read_manifest_line(std::ifstream& in, const std::string& path) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("checkpoint '" + path + "' has no manifest line");
    try {
        return nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint '" + path + "' manifest is not valid JSON: " + e.what());
    }
}

}  // namespace detail

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    const nlohmann::json m = detail::read_manifest_line(in, path);
    CheckpointHeader h;
    try {
        h.version = m.at("version").get<int>();
        if (h.version != kCheckpointVersion)
            throw DataError("checkpoint '" + path + "' has version " + std::to_string(h.version) + ", expected " +
                            std::to_string(kCheckpointVersion));
        h.step = m.at("step").get<long>();
        h.best_mrr = m.at("best_mrr").get<double>();
        h.cfg = config_from_json(m.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint '" + path + "' manifest is malformed: " + e.what());
    }
    return h;
}

// Restore parameter values; the registry must already hold the same
// parameters (same names, shapes, order) as when the checkpoint was saved.
inline void load_checkpoint_params(const std::string& path, ParamRegistry& reg) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    const nlohmann::json m = detail::read_manifest_line(in, path);
    if (m.value("version", -1) != kCheckpointVersion)
        throw DataError("checkpoint '" + path + "' version mismatch");
    const nlohmann::json& params = m.at("params");
    if (params.size() != reg.size())
        throw DataError("checkpoint '" + path + "' holds " + std::to_string(params.size()) + " parameters, registry has " +
                        std::to_string(reg.size()));
    for (size_t i = 0; i < reg.size(); ++i) {
        const std::string name = params[i].at("name").get<std::string>();
        const std::vector<int> shape = params[i].at("shape").get<std::vector<int>>();
        if (name != reg[i].name || shape != reg[i].value.shape)
            throw DataError("checkpoint '" + path + "' parameter " + std::to_string(i) + " is '" + name +
                            "', registry expects '" + reg[i].name + "'");
    }
    for (size_t i = 0; i < reg.size(); ++i) {
        Tensor& v = reg[i].value;
        in.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(v.data.size() * sizeof(double)));
        if (!in) throw DataError("checkpoint '" + path + "' payload is truncated at parameter '" + reg[i].name + "'");
    }
}

}  // namespace fskgc
