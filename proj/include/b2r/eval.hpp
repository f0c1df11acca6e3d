#pragma once

// Autoregressive deployment loop and evaluation metrics.
//
// A rollout starts from (R_hat_0, C_hat_0) = (target_return, kappa) and after
// every step decrements both by the realized reward and cost. The streams are
// maintained as R_hat_t = R_0 - D^r_t and C_hat_t = kappa - D^c_t with D the
// plain running sums, so the telescoping identity C_hat_t = kappa - sum_{i<t} c_i
// holds bitwise at every step. Deployment CTG is never clamped: once the
// budget is spent the policy sees negative values.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "b2r/cmdp.hpp"
#include "b2r/model.hpp"
#include "b2r/rng.hpp"
#include "b2r/util.hpp"

namespace b2r {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct RolloutConfig {
    double kappa = 0.0;         // initial cost-to-go budget
    double target_return = 0.0; // initial return-to-go
    std::size_t max_horizon = 0; // 0 = use the env's max horizon
    std::size_t n_episodes = 1;
    std::vector<std::uint64_t> seeds = {0};
    ActionMode mode = ActionMode::mean;

    void validate() const {
        require(kappa >= 0.0, "rollout config: kappa must be non-negative");
        require(std::isfinite(target_return), "rollout config: target return must be finite");
        require(n_episodes >= 1, "rollout config: n_episodes must be >= 1");
        require(!seeds.empty(), "rollout config: at least one seed required");
    }
};

// Default conditioning target: the best return among the given trajectories
// (typically D_safe).
inline double default_target_return(const std::vector<AnnotatedTrajectory>& dataset) {
    require(!dataset.empty(), "default target return: empty dataset");
    double best = dataset.front().total_return;
    for (const AnnotatedTrajectory& at : dataset) {
        best = std::max(best, at.total_return);
    }
    return best;
}

// ---------------------------------------------------------------------------
// Rollout
// ---------------------------------------------------------------------------

struct RolloutResult {
    Trajectory trajectory;
    std::vector<double> rtg_stream; // R_hat_0 .. R_hat_H (length H+1)
    std::vector<double> ctg_stream; // C_hat_0 .. C_hat_H

    RolloutResult(Trajectory t, std::vector<double> r, std::vector<double> c)
        : trajectory(std::move(t)), rtg_stream(std::move(r)), ctg_stream(std::move(c)) {}
};

namespace detail {

inline TokenWindow deployment_window(const std::vector<double>& rtgs,
                                     const std::vector<double>& ctgs,
                                     const std::vector<std::vector<double>>& states,
                                     const std::vector<std::vector<double>>& actions,
                                     std::size_t t, std::size_t K, std::size_t s_dim,
                                     std::size_t a_dim) {
    TokenWindow w;
    w.k = K;
    w.rtg.assign(K, 0.0);
    w.ctg.assign(K, 0.0);
    w.states.assign(K, std::vector<double>(s_dim, 0.0));
    w.actions.assign(K - 1, std::vector<double>(a_dim, 0.0));
    w.valid.assign(K, 0);
    for (std::size_t i = 0; i < K; ++i) {
        const std::ptrdiff_t u = static_cast<std::ptrdiff_t>(t) -
                                 static_cast<std::ptrdiff_t>(K) + 1 +
                                 static_cast<std::ptrdiff_t>(i);
        if (u < 0) {
            continue;
        }
        const auto uu = static_cast<std::size_t>(u);
        w.rtg[i] = rtgs[uu];
        w.ctg[i] = ctgs[uu];
        w.states[i] = states[uu];
        if (i + 1 < K) {
            w.actions[i] = actions[uu];
        }
        w.valid[i] = 1;
    }
    return w;
}

} // namespace detail

inline RolloutResult rollout(const PolicyParams& policy, Env& env, const RolloutConfig& cfg,
                             Rng& rng) {
    cfg.validate();
    const EnvSpec& spec = env.spec();
    require(policy.state_dim == static_cast<std::size_t>(spec.state_dim) &&
                policy.action_dim == static_cast<std::size_t>(spec.action_dim),
            "rollout: policy trained for state/action dims ", policy.state_dim, "/",
            policy.action_dim, " but env '", spec.id, "' has ", spec.state_dim, "/",
            spec.action_dim);
    const std::size_t horizon =
        cfg.max_horizon == 0 ? static_cast<std::size_t>(spec.max_horizon) : cfg.max_horizon;
    require(horizon >= 1, "rollout: horizon must be >= 1");
    const std::size_t K = policy.config.context_k;

    std::vector<double> rtgs = {cfg.target_return};
    std::vector<double> ctgs = {cfg.kappa};
    std::vector<std::vector<double>> states = {env.reset()};
    std::vector<std::vector<double>> actions;
    std::vector<Transition> transitions;
    double reward_sum = 0.0;
    double cost_sum = 0.0;

    for (std::size_t t = 0; t < horizon; ++t) {
        const TokenWindow w = detail::deployment_window(rtgs, ctgs, states, actions, t, K,
                                                        spec.state_dim, spec.action_dim);
        const std::vector<double> a =
            sample_action(policy, w, cfg.mode, rng, spec.action_low, spec.action_high);
        StepResult sr;
        try {
            sr = env.step(a);
        } catch (const std::exception& e) {
            fail("rollout: env step failed at timestep ", t, ": ", e.what());
        }
        transitions.push_back(Transition{states[t], a, sr.reward, sr.cost});
        actions.push_back(a);
        reward_sum += sr.reward;
        cost_sum += sr.cost;
        rtgs.push_back(cfg.target_return - reward_sum);
        ctgs.push_back(cfg.kappa - cost_sum);
        states.push_back(sr.state);
        if (sr.done) {
            break;
        }
    }
    return RolloutResult(Trajectory(std::move(transitions)), std::move(rtgs), std::move(ctgs));
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline constexpr double kEpsStability = 0.1;

// (R - r_min) / (r_max - r_min) on a 0-100 scale.
inline double normalized_reward(double total_return, const EnvSpec& spec) {
    require(spec.reward_max > spec.reward_min, "normalized reward: env '", spec.id,
            "' has reward_max ", spec.reward_max, " <= reward_min ", spec.reward_min);
    return (total_return - spec.reward_min) / (spec.reward_max - spec.reward_min) * 100.0;
}

// Same quantity on a 0-1 scale (reported alongside the 0-100 convention).
inline double normalized_reward_unit(double total_return, const EnvSpec& spec) {
    return normalized_reward(total_return, spec) / 100.0;
}

// (C + eps) / (kappa + eps); below 1 marks a constraint-satisfying policy.
inline double normalized_cost(double total_cost, double kappa, double eps = kEpsStability) {
    require(eps > 0.0, "normalized cost: eps must be positive");
    require(kappa >= 0.0, "normalized cost: kappa must be non-negative");
    return (total_cost + eps) / (kappa + eps);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EpisodeResult {
    std::size_t episode = 0; // index within its seed
    std::uint64_t seed = 0;
    double total_return = 0.0;
    double total_cost = 0.0;
    std::size_t length = 0;
    bool violated = false; // total_cost > kappa
};

struct EvalSummary {
    double kappa = 0.0;
    double target_return = 0.0;
    double eps_stability = kEpsStability;
    std::string action_mode;
    std::vector<EpisodeResult> episodes;
    double mean_return = 0.0;
    double std_return = 0.0;
    double mean_cost = 0.0;
    double std_cost = 0.0;
    double norm_reward = 0.0;      // 0-100 scale
    double norm_reward_unit = 0.0; // 0-1 scale
    double norm_cost = 0.0;
    double violation_rate = 0.0;
    bool safe = false; // normalized cost < 1

    nlohmann::json to_json() const {
        nlohmann::json eps = nlohmann::json::array();
        for (const EpisodeResult& e : episodes) {
            eps.push_back({{"episode", e.episode},
                           {"seed", e.seed},
                           {"return", e.total_return},
                           {"cost", e.total_cost},
                           {"length", e.length},
                           {"violated", e.violated}});
        }
        return {{"kappa", kappa},
                {"target_return", target_return},
                {"eps_stability", eps_stability},
                {"action_mode", action_mode},
                {"n_episodes", episodes.size()},
                {"mean_return", mean_return},
                {"std_return", std_return},
                {"mean_cost", mean_cost},
                {"std_cost", std_cost},
                {"normalized_reward", norm_reward},
                {"normalized_reward_unit", norm_reward_unit},
                {"normalized_cost", norm_cost},
                {"violation_rate", violation_rate},
                {"safe", safe},
                {"episodes", eps}};
    }
};

inline EvalSummary evaluate(const PolicyParams& policy, Env& env, const RolloutConfig& cfg,
                            double eps_stability = kEpsStability) {
    cfg.validate();
    EvalSummary s;
    s.kappa = cfg.kappa;
    s.target_return = cfg.target_return;
    s.eps_stability = eps_stability;
    s.action_mode = cfg.mode == ActionMode::mean ? "mean" : "sample";

    for (std::uint64_t seed : cfg.seeds) {
        for (std::size_t ep = 0; ep < cfg.n_episodes; ++ep) {
            Rng rng(Rng::derive(seed, ep).next_u64());
            const RolloutResult rr = rollout(policy, env, cfg, rng);
            EpisodeResult er;
            er.episode = ep;
            er.seed = seed;
            er.total_return = cumulative_return(rr.trajectory);
            er.total_cost = cumulative_cost(rr.trajectory);
            er.length = rr.trajectory.horizon();
            er.violated = er.total_cost > cfg.kappa;
            s.episodes.push_back(er);
        }
    }

    std::vector<double> returns, costs;
    std::size_t violations = 0;
    for (const EpisodeResult& e : s.episodes) {
        returns.push_back(e.total_return);
        costs.push_back(e.total_cost);
        violations += e.violated ? 1 : 0;
    }
    s.mean_return = mean(returns);
    s.std_return = sample_std(returns);
    s.mean_cost = mean(costs);
    s.std_cost = sample_std(costs);
    s.norm_reward = normalized_reward(s.mean_return, env.spec());
    s.norm_reward_unit = normalized_reward_unit(s.mean_return, env.spec());
    s.norm_cost = normalized_cost(s.mean_cost, cfg.kappa, eps_stability);
    s.violation_rate =
        static_cast<double>(violations) / static_cast<double>(s.episodes.size());
    s.safe = s.norm_cost < 1.0;
    return s;
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

inline void write_eval_summary(const std::string& path, const EvalSummary& summary) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(os), "eval summary: cannot open '", path, "' for writing");
    os << summary.to_json().dump(2) << '\n';
    os.flush();
    require(static_cast<bool>(os), "eval summary: write to '", path, "' failed");
}

inline EvalSummary load_eval_summary(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), "eval summary: cannot open '", path, "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        fail("eval summary: malformed JSON in '", path, "': ", e.what());
    }
    EvalSummary s;
    s.kappa = j.at("kappa").get<double>();
    s.target_return = j.at("target_return").get<double>();
    s.eps_stability = j.at("eps_stability").get<double>();
    s.action_mode = j.at("action_mode").get<std::string>();
    s.mean_return = j.at("mean_return").get<double>();
    s.std_return = j.at("std_return").get<double>();
    s.mean_cost = j.at("mean_cost").get<double>();
    s.std_cost = j.at("std_cost").get<double>();
    s.norm_reward = j.at("normalized_reward").get<double>();
    s.norm_reward_unit = j.at("normalized_reward_unit").get<double>();
    s.norm_cost = j.at("normalized_cost").get<double>();
    s.violation_rate = j.at("violation_rate").get<double>();
    s.safe = j.at("safe").get<bool>();
    for (const nlohmann::json& e : j.at("episodes")) {
        EpisodeResult er;
        er.episode = e.at("episode").get<std::size_t>();
        er.seed = e.at("seed").get<std::uint64_t>();
        er.total_return = e.at("return").get<double>();
        er.total_cost = e.at("cost").get<double>();
        er.length = e.at("length").get<std::size_t>();
        er.violated = e.at("violated").get<bool>();
        s.episodes.push_back(er);
    }
    return s;
}

inline void write_episode_csv(const std::string& path, const EvalSummary& summary) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(os), "episode csv: cannot open '", path, "' for writing");
    os << "episode,seed,return,cost,violated\n";
    for (const EpisodeResult& e : summary.episodes) {
        os << e.episode << ',' << e.seed << ',' << nlohmann::json(e.total_return).dump() << ','
           << nlohmann::json(e.total_cost).dump() << ',' << (e.violated ? 1 : 0) << '\n';
    }
    os.flush();
    require(static_cast<bool>(os), "episode csv: write to '", path, "' failed");
}

} // namespace b2r
