#pragma once

// Command-line front end for the offline safe-RL pipeline: generate behavior
// data on the toy environments, filter and realign it against a cost budget,
// clone the behavior with the transformer policy, roll the policy out with
// budget-tracking conditioning, and verify the safety/performance bounds.
//
// Conventions shared by every subcommand:
//   - precedence: built-in defaults < --config JSON file < command-line flags
//   - the B2R_SEED environment variable supplies --seed when neither the
//     command line nor the config file sets it
//   - exit code 0 on success, 1 on domain errors (bad data, failed checks,
//     unreadable files), 2 on usage errors (unknown flags, missing arguments)
//   - identical config + seed => byte-identical primary output artifacts

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "b2r/checkpoint.hpp"
#include "b2r/cmdp.hpp"
#include "b2r/dataset.hpp"
#include "b2r/eval.hpp"
#include "b2r/model.hpp"
#include "b2r/rng.hpp"
#include "b2r/serialize.hpp"
#include "b2r/theory.hpp"
#include "b2r/train.hpp"
#include "b2r/util.hpp"

namespace b2r::cli {

// ---------------------------------------------------------------------------
// Config-file support
// ---------------------------------------------------------------------------

// Applies values from a JSON config file to every option the user did not
// pass explicitly, giving the precedence defaults < config file < flags.
// Keys use the long flag name without the leading dashes, e.g. {"kappa": 5}.
class ConfigBinder {
public:
    void attach(CLI::App* sub) {
        sub->add_option("--config", config_path_,
                        "JSON object with defaults for any long flag of this subcommand "
                        "(explicit flags win)");
    }

    template <typename T>
    void bind(CLI::Option* opt, std::string key, T* field) {
        known_keys_.push_back(key);
        appliers_.push_back([this, opt, key = std::move(key), field] {
            if (opt->count() == 0 && cfg_.contains(key)) {
                try {
                    *field = cfg_.at(key).get<T>();
                } catch (const nlohmann::json::exception& e) {
                    fail("config: key '", key, "' has the wrong type: ", e.what());
                }
            }
        });
    }

    template <typename T>
    void bind(CLI::Option* opt, std::string key, std::optional<T>* field) {
        known_keys_.push_back(key);
        appliers_.push_back([this, opt, key = std::move(key), field] {
            if (opt->count() == 0 && cfg_.contains(key)) {
                try {
                    *field = cfg_.at(key).get<T>();
                } catch (const nlohmann::json::exception& e) {
                    fail("config: key '", key, "' has the wrong type: ", e.what());
                }
            }
        });
    }

    // Like bind, but the value must arrive from either the command line or
    // the config file; omitting both is a usage error.
    template <typename T>
    void bind_required(CLI::Option* opt, std::string key, T* field) {
        opt->description(opt->get_description() + " [required]");
        required_.emplace_back(opt, key);
        bind(opt, std::move(key), field);
    }

    // Seed precedence: --seed flag > config "seed" > B2R_SEED env > default.
    void bind_seed(CLI::Option* opt, std::uint64_t* field) {
        known_keys_.push_back("seed");
        appliers_.push_back([this, opt, field] {
            if (opt->count() > 0) {
                return;
            }
            if (cfg_.contains("seed")) {
                try {
                    *field = cfg_.at("seed").get<std::uint64_t>();
                } catch (const nlohmann::json::exception& e) {
                    fail("config: key 'seed' has the wrong type: ", e.what());
                }
                return;
            }
            if (const char* env = std::getenv("B2R_SEED")) {
                *field = parse_env_seed(env);
            }
        });
    }

    // Call at the start of the subcommand callback, before using any value.
    void apply() {
        if (!config_path_.empty()) {
            std::ifstream is(config_path_, std::ios::binary);
            require(static_cast<bool>(is), "config: cannot open '", config_path_, "'");
            try {
                is >> cfg_;
            } catch (const nlohmann::json::exception& e) {
                fail("config: malformed JSON in '", config_path_, "': ", e.what());
            }
            require(cfg_.is_object(), "config: '", config_path_, "' must hold a JSON object");
            for (const auto& item : cfg_.items()) {
                bool known = false;
                for (const std::string& k : known_keys_) {
                    known = known || k == item.key();
                }
                require(known, "config: unknown key '", item.key(), "' in '", config_path_, "'");
            }
        }
        for (const auto& f : appliers_) {
            f();
        }
        for (const auto& [opt, key] : required_) {
            if (opt->count() == 0 && !cfg_.contains(key)) {
                throw CLI::RequiredError("--" + key);
            }
        }
    }

private:
    static std::uint64_t parse_env_seed(const std::string& s) {
        std::size_t pos = 0;
        std::uint64_t v = 0;
        try {
            v = std::stoull(s, &pos);
        } catch (const std::exception&) {
            fail("B2R_SEED: '", s, "' is not an unsigned integer");
        }
        require(pos == s.size(), "B2R_SEED: '", s, "' is not an unsigned integer");
        return v;
    }

    std::string config_path_;
    nlohmann::json cfg_ = nlohmann::json::object();
    std::vector<std::string> known_keys_;
    std::vector<std::function<void()>> appliers_;
    std::vector<std::pair<CLI::Option*, std::string>> required_;
};

// ---------------------------------------------------------------------------
// Shared flag groups
// ---------------------------------------------------------------------------

struct ModelFlags {
    ModelConfig cfg;

    void attach(CLI::App* sub, ConfigBinder& binder) {
        binder.bind(sub->add_option("--hidden", cfg.hidden_dim, "transformer hidden width"),
                    "hidden", &cfg.hidden_dim);
        binder.bind(sub->add_option("--heads", cfg.n_heads, "attention heads"), "heads",
                    &cfg.n_heads);
        binder.bind(sub->add_option("--layers", cfg.n_layers, "transformer blocks"), "layers",
                    &cfg.n_layers);
        binder.bind(sub->add_option("--context", cfg.context_k,
                                    "context length K in timesteps (window holds 4K-1 tokens)"),
                    "context", &cfg.context_k);
        binder.bind(sub->add_option("--dropout", cfg.dropout, "dropout rate during training"),
                    "dropout", &cfg.dropout);
        binder.bind(sub->add_option("--mlp-ratio", cfg.mlp_ratio, "MLP width / hidden width"),
                    "mlp-ratio", &cfg.mlp_ratio);
        binder.bind(sub->add_option("--rope-base", cfg.rope_base,
                                    "rotary position embedding base frequency"),
                    "rope-base", &cfg.rope_base);
    }
};

struct TrainFlags {
    TrainConfig cfg;

    void attach(CLI::App* sub, ConfigBinder& binder) {
        binder.bind(sub->add_option("--lr", cfg.learning_rate, "AdamW learning rate"), "lr",
                    &cfg.learning_rate);
        binder.bind(sub->add_option("--batch", cfg.batch_size, "windows per optimizer step"),
                    "batch", &cfg.batch_size);
        binder.bind(sub->add_option("--grad-clip", cfg.grad_clip_norm,
                                    "global gradient-norm ceiling"),
                    "grad-clip", &cfg.grad_clip_norm);
        binder.bind(sub->add_option("--steps-per-epoch", cfg.steps_per_epoch,
                                    "optimizer steps per epoch"),
                    "steps-per-epoch", &cfg.steps_per_epoch);
        binder.bind(sub->add_option("--epochs", cfg.epochs, "training epochs (0 = no-op)"),
                    "epochs", &cfg.epochs);
        binder.bind(sub->add_option("--weight-decay", cfg.weight_decay,
                                    "decoupled weight decay"),
                    "weight-decay", &cfg.weight_decay);
    }
};

// ---------------------------------------------------------------------------
// Behavior policies for data generation
// ---------------------------------------------------------------------------

namespace detail {

// Segmented cruise controller for the velocity env: the episode is cut into
// 2-4 spans, each holding a target speed drawn from U[6, 13]; the action is a
// noisy proportional controller toward the active target. Targets above the
// cost threshold (10) make the controller linger in the penalized band, so
// episode costs spread from 0 to most of the horizon.
inline Trajectory generate_velocity_trajectory(Env& env, std::size_t horizon, Rng& rng) {
    const std::size_t n_segments = 2 + rng.index(3);
    std::vector<std::size_t> ends; // exclusive end step of each segment
    for (std::size_t i = 0; i + 1 < n_segments; ++i) {
        ends.push_back(1 + rng.index(horizon > 1 ? horizon - 1 : 1));
    }
    ends.push_back(horizon);
    std::sort(ends.begin(), ends.end());
    std::vector<double> targets;
    for (std::size_t i = 0; i < n_segments; ++i) {
        targets.push_back(rng.uniform(6.0, 13.0));
    }

    std::vector<Transition> steps;
    std::vector<double> state = env.reset();
    std::size_t segment = 0;
    for (std::size_t t = 0; t < horizon; ++t) {
        while (segment + 1 < ends.size() && t >= ends[segment]) {
            ++segment;
        }
        const double v = state[0];
        const double a =
            std::clamp(1.5 * (targets[segment] - v) + rng.uniform(-0.2, 0.2), -1.0, 1.0);
        const StepResult sr = env.step({a});
        steps.push_back(Transition{state, {a}, sr.reward, sr.cost});
        state = sr.state;
        if (sr.done) {
            break;
        }
    }
    return Trajectory(std::move(steps));
}

// Chain env behavior: uniform random continuous commands (decoded into
// left/stay/right by the env), giving walks of varied return and hazard time.
inline Trajectory generate_chain_trajectory(Env& env, std::size_t horizon, Rng& rng) {
    std::vector<Transition> steps;
    std::vector<double> state = env.reset();
    for (std::size_t t = 0; t < horizon; ++t) {
        const double a = rng.uniform(-1.0, 1.0);
        const StepResult sr = env.step({a});
        steps.push_back(Transition{state, {a}, sr.reward, sr.cost});
        state = sr.state;
        if (sr.done) {
            break;
        }
    }
    return Trajectory(std::move(steps));
}

inline Trajectory generate_trajectory(Env& env, std::size_t horizon, Rng& rng) {
    if (env.spec().id == "velocity") {
        return generate_velocity_trajectory(env, horizon, rng);
    }
    return generate_chain_trajectory(env, horizon, rng);
}

// Loads a dataset and fails with the record path in the message.
inline LoadedDataset load_or_fail(const std::string& path) {
    return load_dataset(path);
}

// Either an explicit --target-return or the best return in --data.
inline double resolve_target_return(const std::optional<double>& explicit_target,
                                    const std::string& data_path) {
    if (explicit_target.has_value()) {
        return *explicit_target;
    }
    if (!data_path.empty()) {
        return default_target_return(load_or_fail(data_path).dataset);
    }
    throw CLI::ValidationError("target return",
                               "pass --target-return or --data to derive it from a dataset");
}

// Environment id resolution: explicit flag wins, then the checkpoint's tag.
inline std::string resolve_env_id(const std::string& flag_env, const std::string& ckpt_env) {
    if (!flag_env.empty()) {
        return flag_env;
    }
    if (!ckpt_env.empty()) {
        return ckpt_env;
    }
    throw CLI::ValidationError("env",
                               "checkpoint does not record an environment; pass --env");
}

} // namespace detail

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
    ConfigBinder binder;
    std::string env_id = "velocity";
    std::string out_path;
    std::size_t n_trajectories = 200;
    std::size_t horizon = 0; // 0 = env default
    std::uint64_t seed = 0;

    void attach(CLI::App& app) {
        CLI::App* sub = app.add_subcommand(
            "gen-data", "Generate a raw behavior dataset on a toy environment");
        binder.attach(sub);
        binder.bind(sub->add_option("--env", env_id, "environment id: velocity | chain"), "env",
                    &env_id);
        binder.bind_required(sub->add_option("--out", out_path, "output dataset path (JSON lines)"),
                             "out", &out_path);
        binder.bind(sub->add_option("--n", n_trajectories, "number of trajectories"), "n",
                    &n_trajectories);
        binder.bind(sub->add_option("--horizon", horizon,
                                    "episode length cap (0 = environment maximum)"),
                    "horizon", &horizon);
        binder.bind_seed(sub->add_option("--seed", seed, "generation seed"), &seed);
        sub->callback([this] { run(); });
    }

    void run() {
        binder.apply();
        require(n_trajectories > 0, "gen-data: --n must be positive");
        std::unique_ptr<Env> env = make_env(env_id);
        const std::size_t h =
            horizon > 0 ? horizon : static_cast<std::size_t>(env->spec().max_horizon);

        std::vector<AnnotatedTrajectory> dataset;
        dataset.reserve(n_trajectories);
        for (std::size_t i = 0; i < n_trajectories; ++i) {
            Rng rng(Rng::derive(seed, i).next_u64());
            dataset.push_back(annotate(detail::generate_trajectory(*env, h, rng)));
        }

        DatasetManifest m;
        m.env_id = env_id;
        m.total = m.kept = n_trajectories;
        m.seed = seed;
        save_dataset(out_path, dataset, m);
        std::cout << "wrote " << n_trajectories << " trajectories to " << out_path << " (env "
                  << env_id << ", seed " << seed << ")\n";
    }
};

// ---------------------------------------------------------------------------
// filter
// ---------------------------------------------------------------------------

struct FilterArgs {
    ConfigBinder binder;
    std::string in_path;
    std::string out_path;
    double kappa = 0.0;

    void attach(CLI::App& app) {
        CLI::App* sub = app.add_subcommand(
            "filter", "Keep only trajectories whose total cost is at most the budget");
        binder.attach(sub);
        binder.bind_required(sub->add_option("--in", in_path, "input dataset path"), "in",
                             &in_path);
        binder.bind_required(sub->add_option("--out", out_path, "output dataset path"), "out",
                             &out_path);
        binder.bind_required(sub->add_option("--kappa", kappa, "cost budget (inclusive)"),
                             "kappa", &kappa);
        sub->callback([this] { run(); });
    }

    void run() {
        binder.apply();
        LoadedDataset in = detail::load_or_fail(in_path);
        const FilterResult r = filter_safe(in.dataset, CostBudget(kappa));

        DatasetManifest m = in.manifest;
        m.kappa = kappa;
        m.total = in.dataset.size();
        m.kept = r.kept.size();
        m.dropped = r.dropped;
        m.empty_warning = r.empty_warning;
        save_dataset(out_path, r.kept, m);
        std::cout << "kept " << m.kept << " of " << m.total << " trajectories (dropped "
                  << m.dropped << ") -> " << out_path << '\n';
        if (r.empty_warning) {
            std::cout << "warning: no trajectory satisfies the budget " << kappa << '\n';
        }
    }
};

// ---------------------------------------------------------------------------
// realign
// ---------------------------------------------------------------------------

struct RealignArgs {
    ConfigBinder binder;
    std::string in_path;
    std::string out_path;
    std::string strategy = "shift";
    std::string rand_mode = "discrete";
    double kappa = 0.0;
    std::uint64_t seed = 0;

    void attach(CLI::App& app) {
        CLI::App* sub = app.add_subcommand(
            "realign", "Rewrite cost-to-go sequences so every trajectory starts at the budget");
        binder.attach(sub);
        binder.bind_required(sub->add_option("--in", in_path,
                                             "input dataset path (already filtered)"),
                             "in", &in_path);
        binder.bind_required(sub->add_option("--out", out_path, "output dataset path"), "out",
                             &out_path);
        binder.bind(sub->add_option("--strategy", strategy,
                                    "realignment strategy: shift | avg | rand | scale"),
                    "strategy", &strategy);
        binder.bind_required(sub->add_option("--kappa", kappa, "cost budget"), "kappa", &kappa);
        binder.bind(sub->add_option("--rand-mode", rand_mode,
                                    "rand strategy increment mode: discrete | continuous"),
                    "rand-mode", &rand_mode);
        binder.bind_seed(sub->add_option("--seed", seed, "seed for the rand strategy"), &seed);
        sub->callback([this] { run(); });
    }

    void run() {
        binder.apply();
        LoadedDataset in = detail::load_or_fail(in_path);

        RealignmentSpec spec(realign_strategy_from_string(strategy), CostBudget(kappa));
        if (rand_mode == "discrete") {
            spec.rand_mode = RandMode::discrete;
        } else if (rand_mode == "continuous") {
            spec.rand_mode = RandMode::continuous;
        } else {
            fail("realign: unknown --rand-mode '", rand_mode,
                 "' (expected discrete|continuous)");
        }
        spec.rng_seed = seed;

        RealignStats stats;
        const std::vector<AnnotatedTrajectory> out = realign_dataset(in.dataset, spec, &stats);

        DatasetManifest m = in.manifest;
        m.kappa = kappa;
        m.strategy = strategy;
        m.total = m.kept = out.size();
        m.dropped = 0;
        m.seed = seed;
        m.empty_warning = out.empty();
        m.rand_residual_to_last = stats.rand_residual_to_last;
        m.rand_insufficient_eligible = stats.rand_insufficient_eligible;
        save_dataset(out_path, out, m);
        std::cout << "realigned " << out.size() << " trajectories with " << strategy
                  << " at kappa " << kappa << " -> " << out_path << '\n';
    }
};

// ---------------------------------------------------------------------------
// train / train-boundary
// ---------------------------------------------------------------------------

struct TrainArgs {
    ConfigBinder binder;
    ModelFlags model;
    TrainFlags trainer;
    std::string data_path;
    std::string checkpoint_path;
    std::string loss_csv_path;
    std::string env_id; // optional override; default comes from the manifest
    std::optional<double> kappa;
    std::uint64_t seed = 0;

    void attach(CLI::App& app) {
        CLI::App* sub = app.add_subcommand(
            "train", "Behavior-clone the transformer policy on a realigned dataset");
        binder.attach(sub);
        binder.bind_required(sub->add_option("--data", data_path, "realigned dataset path"),
                             "data", &data_path);
        binder.bind_required(sub->add_option("--out", checkpoint_path, "checkpoint output path"),
                             "out", &checkpoint_path);
        binder.bind(sub->add_option("--loss-csv", loss_csv_path,
                                    "optional per-step loss curve CSV"),
                    "loss-csv", &loss_csv_path);
        binder.bind(sub->add_option("--env", env_id,
                                    "environment id to stamp into the checkpoint "
                                    "(default: dataset manifest)"),
                    "env", &env_id);
        binder.bind(sub->add_option("--kappa", kappa,
                                    "cost budget (default: dataset manifest)"),
                    "kappa", &kappa);
        model.attach(sub, binder);
        trainer.attach(sub, binder);
        binder.bind_seed(sub->add_option("--seed", seed, "training seed"), &seed);
        sub->callback([this] { run(); });
    }

    void run() {
        binder.apply();
        LoadedDataset in = detail::load_or_fail(data_path);
        if (!kappa.has_value()) {
            require(in.manifest.kappa.has_value(),
                    "train: dataset manifest records no kappa; pass --kappa");
            kappa = *in.manifest.kappa;
        }
        trainer.cfg.seed = seed;

        TrainOutputs out;
        out.checkpoint_path = checkpoint_path;
        out.loss_csv_path = loss_csv_path;
        out.env_id = env_id.empty() ? in.manifest.env_id : env_id;

        const TrainReport report = train(in.dataset, *kappa, model.cfg, trainer.cfg, out);
        std::cout << "trained " << report.executed_steps() << " steps in "
                  << report.wall_time_seconds << " s";
        if (!report.loss_curve.empty()) {
            std::cout << "; final loss " << report.loss_curve.back();
        }
        std::cout << "; checkpoint -> " << checkpoint_path << '\n';
    }
};

struct TrainBoundaryArgs {
    ConfigBinder binder;
    ModelFlags model;
    TrainFlags trainer;
    std::string data_path;
    std::string checkpoint_path;
    std::string loss_csv_path;
    std::string env_id;
    double kappa = 0.0;
    double eps = 2.0;
    std::uint64_t seed = 0;

    void attach(CLI::App& app) {
        CLI::App* sub = app.add_subcommand(
            "train-boundary",
            "Baseline: clone only trajectories whose cost lies in a band around the budget, "
            "keeping raw cost-to-go tokens");
        binder.attach(sub);
        binder.bind_required(sub->add_option("--data", data_path, "raw (unfiltered) dataset path"),
                             "data", &data_path);
        binder.bind_required(sub->add_option("--out", checkpoint_path, "checkpoint output path"),
                             "out", &checkpoint_path);
        binder.bind(sub->add_option("--loss-csv", loss_csv_path,
                                    "optional per-step loss curve CSV"),
                    "loss-csv", &loss_csv_path);
        binder.bind(sub->add_option("--env", env_id,
                                    "environment id to stamp into the checkpoint "
                                    "(default: dataset manifest)"),
                    "env", &env_id);
        binder.bind_required(sub->add_option("--kappa", kappa, "cost budget"), "kappa", &kappa);
        binder.bind(sub->add_option("--eps", eps, "band half-width around the budget"), "eps",
                    &eps);
        model.attach(sub, binder);
        trainer.attach(sub, binder);
        binder.bind_seed(sub->add_option("--seed", seed, "training seed"), &seed);
        sub->callback([this] { run(); });
    }

    void run() {
        binder.apply();
        LoadedDataset in = detail::load_or_fail(data_path);
        trainer.cfg.seed = seed;

        TrainOutputs out;
        out.checkpoint_path = checkpoint_path;
        out.loss_csv_path = loss_csv_path;
        out.env_id = env_id.empty() ? in.manifest.env_id : env_id;

        const TrainReport report =
            train_boundary_baseline(in.dataset, kappa, eps, model.cfg, trainer.cfg, out);
        std::cout << "trained " << report.executed_steps() << " steps in "
                  << report.wall_time_seconds << " s";
        if (!report.loss_curve.empty()) {
            std::cout << "; final loss " << report.loss_curve.back();
        }
        std::cout << "; checkpoint -> " << checkpoint_path << '\n';
    }
};

// ---------------------------------------------------------------------------
// rollout / eval
// ---------------------------------------------------------------------------

struct RolloutArgs {
    ConfigBinder binder;
    std::string checkpoint_path;
    std::string env_id;
    std::string data_path; // optional, to derive the target return
    std::string out_path;  // optional JSON artifact
    std::string mode = "mean";
    double kappa = 0.0;
    std::optional<double> target_return;
    std::size_t horizon = 0;
    std::uint64_t seed = 0;

    void attach(CLI::App& app) {
        CLI::App* sub = app.add_subcommand(
            "rollout", "Run one budget-conditioned episode and report the token streams");
        binder.attach(sub);
        binder.bind_required(sub->add_option("--checkpoint", checkpoint_path,
                                             "policy checkpoint path"),
                             "checkpoint", &checkpoint_path);
        binder.bind(sub->add_option("--env", env_id,
                                    "environment id (default: checkpoint tag)"),
                    "env", &env_id);
        binder.bind_required(sub->add_option("--kappa", kappa,
                                             "cost budget / initial cost-to-go"),
                             "kappa", &kappa);
        binder.bind(sub->add_option("--target-return", target_return,
                                    "initial return-to-go conditioning"),
                    "target-return", &target_return);
        binder.bind(sub->add_option("--data", data_path,
                                    "dataset whose best return supplies --target-return"),
                    "data", &data_path);
        binder.bind(sub->add_option("--horizon", horizon, "episode cap (0 = environment maximum)"),
                    "horizon", &horizon);
        binder.bind(sub->add_option("--mode", mode, "action selection: mean | sample"), "mode",
                    &mode);
        binder.bind(sub->add_option("--out", out_path, "optional rollout JSON path"), "out",
                    &out_path);
        binder.bind_seed(sub->add_option("--seed", seed, "episode seed (sample mode)"), &seed);
        sub->callback([this] { run(); });
    }

    void run() {
        binder.apply();
        const LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
        const std::string env = detail::resolve_env_id(env_id, ckpt.env_id);
        std::unique_ptr<Env> e = make_env(env);

        RolloutConfig rc;
        rc.kappa = kappa;
        rc.target_return = detail::resolve_target_return(target_return, data_path);
        rc.max_horizon = horizon;
        rc.mode = action_mode_from_string(mode);
        rc.seeds = {seed};
        rc.validate();

        Rng rng(seed);
        const RolloutResult rr = rollout(ckpt.params, *e, rc, rng);
        const double ret = cumulative_return(rr.trajectory);
        const double cost = cumulative_cost(rr.trajectory);
        const bool violated = cost > kappa;

        if (!out_path.empty()) {
            nlohmann::json j{{"env", env},
                             {"kappa", kappa},
                             {"target_return", rc.target_return},
                             {"mode", mode},
                             {"seed", seed},
                             {"length", rr.trajectory.horizon()},
                             {"total_return", ret},
                             {"total_cost", cost},
                             {"violated", violated},
                             {"rtg_stream", rr.rtg_stream},
                             {"ctg_stream", rr.ctg_stream}};
            std::ofstream os(out_path, std::ios::binary | std::ios::trunc);
            require(static_cast<bool>(os), "rollout: cannot open '", out_path,
                    "' for writing");
            os << j.dump(2) << '\n';
            require(static_cast<bool>(os), "rollout: write to '", out_path, "' failed");
        }
        std::cout << "return " << ret << ", cost " << cost << ", length "
                  << rr.trajectory.horizon() << (violated ? " (violated)" : " (within budget)");
        if (!out_path.empty()) {
            std::cout << " -> " << out_path;
        }
        std::cout << '\n';
    }
};

struct EvalArgs {
    ConfigBinder binder;
    std::string checkpoint_path;
    std::string env_id;
    std::string data_path;
    std::string out_path;
    std::string episodes_csv_path;
    std::string mode = "mean";
    std::string label = "b2r";
    double kappa = 0.0;
    std::optional<double> target_return;
    std::size_t episodes = 10;
    std::vector<std::uint64_t> seeds = {0};

    void attach(CLI::App& app) {
        CLI::App* sub = app.add_subcommand(
            "eval", "Evaluate a policy over repeated episodes and write the summary JSON");
        binder.attach(sub);
        binder.bind_required(sub->add_option("--checkpoint", checkpoint_path,
                                             "policy checkpoint path"),
                             "checkpoint", &checkpoint_path);
        binder.bind(sub->add_option("--env", env_id,
                                    "environment id (default: checkpoint tag)"),
                    "env", &env_id);
        binder.bind_required(sub->add_option("--kappa", kappa,
                                             "cost budget / initial cost-to-go"),
                             "kappa", &kappa);
        binder.bind(sub->add_option("--target-return", target_return,
                                    "initial return-to-go conditioning"),
                    "target-return", &target_return);
        binder.bind(sub->add_option("--data", data_path,
                                    "dataset whose best return supplies --target-return"),
                    "data", &data_path);
        binder.bind(sub->add_option("--episodes", episodes, "episodes per seed"), "episodes",
                    &episodes);
        binder.bind(sub->add_option("--seeds", seeds, "episode seeds (comma separated)")
                        ->delimiter(','),
                    "seeds", &seeds);
        binder.bind(sub->add_option("--mode", mode, "action selection: mean | sample"), "mode",
                    &mode);
        binder.bind(sub->add_option("--label", label,
                                    "method label recorded for the report table"),
                    "label", &label);
        binder.bind_required(sub->add_option("--out", out_path, "summary JSON output path"),
                             "out", &out_path);
        binder.bind(sub->add_option("--episodes-csv", episodes_csv_path,
                                    "optional per-episode CSV path"),
                    "episodes-csv", &episodes_csv_path);
        sub->callback([this] { run(); });
    }

    void run() {
        binder.apply();
        const LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
        const std::string env = detail::resolve_env_id(env_id, ckpt.env_id);
        std::unique_ptr<Env> e = make_env(env);

        RolloutConfig rc;
        rc.kappa = kappa;
        rc.target_return = detail::resolve_target_return(target_return, data_path);
        rc.n_episodes = episodes;
        rc.seeds = seeds;
        rc.mode = action_mode_from_string(mode);
        rc.validate();

        const EvalSummary summary = evaluate(ckpt.params, *e, rc);

        nlohmann::json j = summary.to_json();
        j["task"] = env;
        j["method"] = label;
        std::ofstream os(out_path, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(os), "eval: cannot open '", out_path, "' for writing");
        os << j.dump(2) << '\n';
        require(static_cast<bool>(os), "eval: write to '", out_path, "' failed");

        if (!episodes_csv_path.empty()) {
            write_episode_csv(episodes_csv_path, summary);
        }
        std::cout << summary.episodes.size() << " episodes: normalized reward "
                  << summary.norm_reward << ", normalized cost " << summary.norm_cost
                  << ", violation rate " << summary.violation_rate << ", "
                  << (summary.safe ? "safe" : "unsafe") << " -> " << out_path << '\n';
    }
};

// ---------------------------------------------------------------------------
// verify-theorem1 / verify-theorem2
// ---------------------------------------------------------------------------

struct VerifyTheorem1Args {
    ConfigBinder binder;
    TheoryConfig cfg;
    std::string out_path;

    void attach(CLI::App& app) {
        CLI::App* sub = app.add_subcommand(
            "verify-theorem1",
            "Monte Carlo check of the safety bounds for budget-conditioned rollouts");
        binder.attach(sub);
        binder.bind(sub->add_option("--sigma", cfg.sigma, "per-step mean absolute cost error"),
                    "sigma", &cfg.sigma);
        binder.bind(sub->add_option("--delta", cfg.delta, "planning margin"), "delta",
                    &cfg.delta);
        binder.bind(sub->add_option("--c-max", cfg.c_max, "per-step cost ceiling"), "c-max",
                    &cfg.c_max);
        binder.bind(sub->add_option("--horizon", cfg.horizon, "episode length"), "horizon",
                    &cfg.horizon);
        binder.bind(sub->add_option("--kappa", cfg.kappa, "cost budget"), "kappa", &cfg.kappa);
        binder.bind(sub->add_option("--trials", cfg.n_trials, "Monte Carlo trials"), "trials",
                    &cfg.n_trials);
        binder.bind(sub->add_option("--out", out_path, "optional report JSON path"), "out",
                    &out_path);
        binder.bind_seed(sub->add_option("--seed", cfg.seed, "simulation seed"), &cfg.seed);
        sub->callback([this] { run(); });
    }

    void run() {
        binder.apply();
        const Theorem1Report rep = simulate_theorem1(cfg);
        if (!out_path.empty()) {
            write_theorem1_report(out_path, rep);
        }
        std::cout << "analytic: Pr[C <= kappa] >= " << rep.bounds.prob_bound
                  << ", E[C] <= " << rep.bounds.expected_cost_bound << '\n';
        std::cout << "empirical over " << rep.n_trials << " trials: safe rate "
                  << rep.empirical_safe_rate << " (" << rep.violations << " violations), mean cost "
                  << rep.empirical_mean_cost << '\n';
        if (!out_path.empty()) {
            std::cout << "report -> " << out_path << '\n';
        }
        require(rep.prob_clause_ok, "theorem 1: probability clause failed (safe rate ",
                rep.empirical_safe_rate, " below bound ", rep.bounds.prob_bound,
                " minus 3 standard errors)");
        require(rep.mean_clause_ok, "theorem 1: expectation clause failed (mean cost ",
                rep.empirical_mean_cost, " above bound ", rep.bounds.expected_cost_bound,
                " plus 3 standard errors)");
        std::cout << "both clauses hold\n";
    }
};

struct VerifyTheorem2Args {
    ConfigBinder binder;
    std::string data_path;
    std::string out_path;
    double kappa = 0.0;
    double eps = 0.5;

    void attach(CLI::App& app) {
        CLI::App* sub = app.add_subcommand(
            "verify-theorem2",
            "Compare the best return over the safe region vs the boundary band on a dataset");
        binder.attach(sub);
        binder.bind_required(sub->add_option("--data", data_path, "dataset path"), "data",
                             &data_path);
        binder.bind_required(sub->add_option("--kappa", kappa, "cost budget"), "kappa", &kappa);
        binder.bind(sub->add_option("--eps", eps, "band half-width"), "eps", &eps);
        binder.bind(sub->add_option("--out", out_path, "optional result JSON path"), "out",
                    &out_path);
        sub->callback([this] { run(); });
    }

    void run() {
        binder.apply();
        LoadedDataset in = detail::load_or_fail(data_path);
        const Theorem2Result r = verify_theorem2(in.dataset, kappa, eps);
        if (!out_path.empty()) {
            std::ofstream os(out_path, std::ios::binary | std::ios::trunc);
            require(static_cast<bool>(os), "verify-theorem2: cannot open '", out_path,
                    "' for writing");
            os << r.to_json().dump(2) << '\n';
            require(static_cast<bool>(os), "verify-theorem2: write to '", out_path,
                    "' failed");
        }
        if (r.region_empty) {
            std::cout << "safe region is empty (no trajectory with cost <= " << kappa
                      << "); claim holds vacuously\n";
            return;
        }
        std::cout << "best return: safe region " << r.r_max_region << " (" << r.region_count
                  << " trajectories), boundary band ";
        if (r.boundary_count == 0) {
            std::cout << "empty";
        } else {
            std::cout << r.r_max_boundary << " (" << r.boundary_count << " trajectories)";
        }
        std::cout << '\n';
        require(r.holds, "theorem 2: region best ", r.r_max_region,
                " fell below boundary best ", r.r_max_boundary);
        std::cout << "region >= boundary holds\n";
    }
};

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportArgs {
    ConfigBinder binder;
    std::vector<std::string> inputs;
    std::string out_path;

    void attach(CLI::App& app) {
        CLI::App* sub = app.add_subcommand(
            "report", "Aggregate eval summary JSONs into a task/method results CSV");
        binder.attach(sub);
        sub->add_option("inputs", inputs, "eval summary JSON files")->required();
        binder.bind_required(sub->add_option("--out", out_path, "output CSV path"), "out",
                             &out_path);
        sub->callback([this] { run(); });
    }

    void run() {
        binder.apply();
        std::string csv = "task,method,reward,cost,safe\n";
        for (const std::string& path : inputs) {
            std::ifstream is(path, std::ios::binary);
            require(static_cast<bool>(is), "report: cannot open '", path, "'");
            nlohmann::json j;
            try {
                is >> j;
            } catch (const nlohmann::json::exception& e) {
                fail("report: malformed JSON in '", path, "': ", e.what());
            }
            for (const char* key :
                 {"task", "method", "normalized_reward", "normalized_cost", "safe"}) {
                require(j.contains(key), "report: '", path, "' is missing field '", key, "'");
            }
            const std::string task = j.at("task").get<std::string>();
            const std::string method = j.at("method").get<std::string>();
            require(task.find(',') == std::string::npos &&
                        method.find(',') == std::string::npos,
                    "report: task/method labels must not contain commas ('", task, "', '",
                    method, "')");
            csv += task;
            csv += ',';
            csv += method;
            csv += ',';
            csv += nlohmann::json(j.at("normalized_reward").get<double>()).dump();
            csv += ',';
            csv += nlohmann::json(j.at("normalized_cost").get<double>()).dump();
            csv += ',';
            csv += j.at("safe").get<bool>() ? '1' : '0';
            csv += '\n';
        }
        std::ofstream os(out_path, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(os), "report: cannot open '", out_path, "' for writing");
        os << csv;
        require(static_cast<bool>(os), "report: write to '", out_path, "' failed");
        std::cout << "wrote " << inputs.size() << " rows -> " << out_path << '\n';
    }
};

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv) {
    CLI::App app{
        "Boundary-to-region offline safe RL: dataset pipeline, transformer behavior "
        "cloning, budget-conditioned rollouts, and safety-bound verification"};
    app.require_subcommand(1);

    GenDataArgs gen_data;
    FilterArgs filter;
    RealignArgs realign;
    TrainArgs train;
    TrainBoundaryArgs train_boundary;
    RolloutArgs rollout;
    EvalArgs eval;
    VerifyTheorem1Args theorem1;
    VerifyTheorem2Args theorem2;
    ReportArgs report;

    gen_data.attach(app);
    filter.attach(app);
    realign.attach(app);
    train.attach(app);
    train_boundary.attach(app);
    rollout.attach(app);
    eval.attach(app);
    theorem1.attach(app);
    theorem2.attach(app);
    report.attach(app);

    try {
        app.parse(argc, argv);
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e); // prints the usage message
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

} // namespace b2r::cli
