#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "b2r/dataset.hpp"
#include "b2r/util.hpp"

namespace b2r {

inline constexpr const char* kDatasetFormatVersion = "b2r-ds-1";

// ---------------------------------------------------------------------------
// Manifest sidecar (<dataset path> + ".manifest.json")
// ---------------------------------------------------------------------------

struct DatasetManifest {
    std::string format_version = kDatasetFormatVersion;
    std::string env_id;
    std::optional<double> kappa;      // filter budget; unset for raw datasets
    std::string strategy = "none";    // realignment strategy, or "none"
    std::size_t total = 0;            // trajectories seen before filtering
    std::size_t kept = 0;
    std::size_t dropped = 0;
    std::uint64_t seed = 0;
    bool empty_warning = false;
    std::size_t rand_residual_to_last = 0;
    std::size_t rand_insufficient_eligible = 0;
    std::vector<double> skipped_kappas; // multi-target budgets with no survivors

    void validate() const {
        require(format_version == kDatasetFormatVersion, "manifest: format version '",
                format_version, "' != '", kDatasetFormatVersion, "'");
        require(kept + dropped == total, "manifest: kept ", kept, " + dropped ", dropped,
                " != total ", total);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format_version"] = format_version;
        j["env_id"] = env_id;
        if (kappa.has_value()) {
            j["kappa"] = *kappa;
        } else {
            j["kappa"] = nullptr;
        }
        j["strategy"] = strategy;
        j["counts"] = {{"total", total}, {"kept", kept}, {"dropped", dropped}};
        j["seed"] = seed;
        j["warnings"] = {{"empty", empty_warning},
                         {"rand_residual_to_last", rand_residual_to_last},
                         {"rand_insufficient_eligible", rand_insufficient_eligible},
                         {"skipped_kappas", skipped_kappas}};
        return j;
    }

    static DatasetManifest from_json(const nlohmann::json& j) {
        DatasetManifest m;
        m.format_version = j.at("format_version").get<std::string>();
        m.env_id = j.at("env_id").get<std::string>();
        if (!j.at("kappa").is_null()) {
            m.kappa = j.at("kappa").get<double>();
        }
        m.strategy = j.at("strategy").get<std::string>();
        m.total = j.at("counts").at("total").get<std::size_t>();
        m.kept = j.at("counts").at("kept").get<std::size_t>();
        m.dropped = j.at("counts").at("dropped").get<std::size_t>();
        m.seed = j.at("seed").get<std::uint64_t>();
        const nlohmann::json& w = j.at("warnings");
        m.empty_warning = w.at("empty").get<bool>();
        m.rand_residual_to_last = w.at("rand_residual_to_last").get<std::size_t>();
        m.rand_insufficient_eligible = w.at("rand_insufficient_eligible").get<std::size_t>();
        m.skipped_kappas = w.at("skipped_kappas").get<std::vector<double>>();
        m.validate();
        return m;
    }
};

inline std::string manifest_path_for(const std::string& dataset_path) {
    return dataset_path + ".manifest.json";
}

// ---------------------------------------------------------------------------
// Trajectory records (JSON Lines, one trajectory per line)
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json trajectory_to_json(const AnnotatedTrajectory& at) {
    const std::size_t h = at.horizon();
    nlohmann::json states = nlohmann::json::array();
    nlohmann::json actions = nlohmann::json::array();
    nlohmann::json rewards = nlohmann::json::array();
    nlohmann::json costs = nlohmann::json::array();
    for (std::size_t t = 0; t < h; ++t) {
        const Transition& tr = at.traj.transitions()[t];
        states.push_back(tr.state);
        actions.push_back(tr.action);
        rewards.push_back(tr.reward);
        costs.push_back(tr.cost);
    }
    nlohmann::json j;
    j["states"] = std::move(states);
    j["actions"] = std::move(actions);
    j["rewards"] = std::move(rewards);
    j["costs"] = std::move(costs);
    j["rtg"] = at.rtg;
    j["ctg"] = at.ctg;
    if (at.kappa_tag.has_value()) {
        j["kappa_tag"] = *at.kappa_tag;
    }
    return j;
}

inline AnnotatedTrajectory trajectory_from_json(const nlohmann::json& j, std::size_t record) {
    for (const char* key : {"states", "actions", "rewards", "costs", "rtg", "ctg"}) {
        require(j.contains(key), "dataset record ", record, ": missing field '", key, "'");
    }
    const auto states = j.at("states").get<std::vector<std::vector<double>>>();
    const auto actions = j.at("actions").get<std::vector<std::vector<double>>>();
    const auto rewards = j.at("rewards").get<std::vector<double>>();
    const auto costs = j.at("costs").get<std::vector<double>>();
    const std::size_t h = states.size();
    require(h > 0, "dataset record ", record, ": empty trajectory");
    require(actions.size() == h && rewards.size() == h && costs.size() == h,
            "dataset record ", record, ": field lengths disagree (states ", h, ", actions ",
            actions.size(), ", rewards ", rewards.size(), ", costs ", costs.size(), ")");
    std::vector<Transition> steps;
    steps.reserve(h);
    for (std::size_t t = 0; t < h; ++t) {
        require(std::isfinite(rewards[t]) && std::isfinite(costs[t]), "dataset record ", record,
                ": non-finite reward/cost at step ", t);
        steps.push_back(Transition{states[t], actions[t], rewards[t], costs[t]});
    }

    AnnotatedTrajectory at{Trajectory(std::move(steps)),
                           j.at("rtg").get<std::vector<double>>(),
                           j.at("ctg").get<std::vector<double>>(),
                           0.0,
                           0.0,
                           std::nullopt};
    if (j.contains("kappa_tag")) {
        at.kappa_tag = j.at("kappa_tag").get<double>();
    }
    // Same right-to-left accumulation as annotate(), so totals land on the
    // identical bits after a round-trip.
    double r = 0.0;
    double c = 0.0;
    for (std::size_t t = h; t-- > 0;) {
        r += at.traj.transitions()[t].reward;
        c += at.traj.transitions()[t].cost;
    }
    at.total_return = r;
    at.total_cost = c;
    at.validate();
    return at;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Save / load
// ---------------------------------------------------------------------------

inline void save_dataset(const std::string& path, const std::vector<AnnotatedTrajectory>& dataset,
                         const DatasetManifest& manifest) {
    manifest.validate();
    require(manifest.kept == dataset.size(), "save_dataset: manifest kept ", manifest.kept,
            " != dataset size ", dataset.size());

    std::ofstream out(path, std::ios::binary); // binary: byte-identical across platforms
    require(out.good(), "save_dataset: cannot open '", path, "' for writing");
    for (const AnnotatedTrajectory& at : dataset) {
        out << detail::trajectory_to_json(at).dump() << '\n';
    }
    require(out.good(), "save_dataset: write failed for '", path, "'");
    out.close();

    std::ofstream mout(manifest_path_for(path), std::ios::binary);
    require(mout.good(), "save_dataset: cannot open manifest sidecar for '", path, "'");
    mout << manifest.to_json().dump(2) << '\n';
    require(mout.good(), "save_dataset: manifest write failed for '", path, "'");
}

struct LoadedDataset {
    std::vector<AnnotatedTrajectory> dataset;
    DatasetManifest manifest;
};

inline LoadedDataset load_dataset(const std::string& path) {
    std::ifstream min(manifest_path_for(path), std::ios::binary);
    require(min.good(), "load_dataset: missing manifest sidecar '", manifest_path_for(path), "'");
    nlohmann::json mj;
    try {
        min >> mj;
    } catch (const nlohmann::json::exception& e) {
        fail("load_dataset: malformed manifest '", manifest_path_for(path), "': ", e.what());
    }
    LoadedDataset out{{}, DatasetManifest::from_json(mj)};

    std::ifstream in(path, std::ios::binary);
    require(in.good(), "load_dataset: cannot open '", path, "'");
    std::string line;
    std::size_t record = 0;
    std::optional<std::size_t> state_dim;
    std::optional<std::size_t> action_dim;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail("dataset record ", record, ": malformed JSON: ", e.what());
        }
        AnnotatedTrajectory at = detail::trajectory_from_json(j, record);
        if (!state_dim.has_value()) {
            state_dim = at.traj.state_dim();
            action_dim = at.traj.action_dim();
        } else {
            require(at.traj.state_dim() == *state_dim && at.traj.action_dim() == *action_dim,
                    "dataset record ", record, ": dimensions (", at.traj.state_dim(), ", ",
                    at.traj.action_dim(), ") disagree with earlier records (", *state_dim, ", ",
                    *action_dim, ")");
        }
        out.dataset.push_back(std::move(at));
        ++record;
    }
    require(out.dataset.size() == out.manifest.kept, "load_dataset: ", out.dataset.size(),
            " records but manifest says kept = ", out.manifest.kept);
    return out;
}

} // namespace b2r
