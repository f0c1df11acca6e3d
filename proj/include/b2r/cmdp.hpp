#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "b2r/util.hpp"

namespace b2r {

// ---------------------------------------------------------------------------
// CMDP domain types
// ---------------------------------------------------------------------------

struct Transition {
    std::vector<double> state;
    std::vector<double> action;
    double reward = 0.0;
    double cost = 0.0;
};

// Nonempty, dimension-consistent sequence of transitions. Immutable after
// construction; the horizon is the transition count.
class Trajectory {
public:
    explicit Trajectory(std::vector<Transition> transitions)
        : transitions_(std::move(transitions)) {
        require(!transitions_.empty(), "Trajectory: must contain at least one transition");
        const std::size_t sdim = transitions_.front().state.size();
        const std::size_t adim = transitions_.front().action.size();
        for (std::size_t t = 0; t < transitions_.size(); ++t) {
            const Transition& tr = transitions_[t];
            require(tr.state.size() == sdim && tr.action.size() == adim,
                    "Trajectory: inconsistent dimensions at step ", t, " (state ", tr.state.size(),
                    " vs ", sdim, ", action ", tr.action.size(), " vs ", adim, ")");
            require(tr.cost >= 0.0, "Trajectory: negative cost ", tr.cost, " at step ", t);
        }
    }

    const std::vector<Transition>& transitions() const { return transitions_; }
    std::size_t horizon() const { return transitions_.size(); }
    std::size_t state_dim() const { return transitions_.front().state.size(); }
    std::size_t action_dim() const { return transitions_.front().action.size(); }

private:
    std::vector<Transition> transitions_;
};

struct EnvSpec {
    std::string id;
    int state_dim = 0;
    int action_dim = 0;
    std::vector<double> action_low;
    std::vector<double> action_high;
    double c_max = 1.0;          // per-step cost bound
    int max_horizon = 1;
    double reward_min = 0.0;     // empirical anchors for normalized reward
    double reward_max = 1.0;

    void validate() const {
        require(state_dim > 0 && action_dim > 0, "EnvSpec ", id, ": nonpositive dims");
        require(action_low.size() == static_cast<std::size_t>(action_dim) &&
                    action_high.size() == static_cast<std::size_t>(action_dim),
                "EnvSpec ", id, ": action bounds dim mismatch");
        for (int i = 0; i < action_dim; ++i) {
            require(action_low[i] < action_high[i], "EnvSpec ", id, ": action_low >= action_high at dim ", i);
        }
        require(c_max > 0.0, "EnvSpec ", id, ": C_max must be positive");
        require(max_horizon >= 1, "EnvSpec ", id, ": max_horizon must be >= 1");
    }
};

struct CostBudget {
    double kappa = 0.0;

    explicit CostBudget(double k) : kappa(k) {
        require(kappa >= 0.0, "CostBudget: kappa must be nonnegative, got ", kappa);
    }
};

// ---------------------------------------------------------------------------
// Trajectory accounting
// ---------------------------------------------------------------------------

inline double cumulative_return(const Trajectory& traj) {
    KahanSum s;
    for (const Transition& tr : traj.transitions()) {
        s.add(tr.reward);
    }
    return s.value();
}

inline double cumulative_cost(const Trajectory& traj) {
    KahanSum s;
    for (const Transition& tr : traj.transitions()) {
        s.add(tr.cost);
    }
    return s.value();
}

// ---------------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------------

struct StepResult {
    std::vector<double> state;
    double reward = 0.0;
    double cost = 0.0;
    bool done = false;
};

// Minimal episodic interface; one instance per rollout worker.
class Env {
public:
    virtual ~Env() = default;
    virtual const EnvSpec& spec() const = 0;
    virtual std::vector<double> reset() = 0;
    virtual StepResult step(const std::vector<double>& action) = 0;
};

// 1-D cruise scenario: accelerate/brake, rewarded for speed, unit cost
// whenever the next velocity exceeds the limit.
//   v' = clamp(v + a*dt, 0, v_max); reward = v'*dt; cost = 1 iff v' > v_limit
class VelocityEnv final : public Env {
public:
    static constexpr double kDt = 0.1;
    static constexpr double kVMax = 15.0;
    static constexpr double kVLimit = 10.0;
    static constexpr int kHorizon = 200;

    explicit VelocityEnv(double initial_velocity = 0.0) : v0_(initial_velocity) {
        require(v0_ >= 0.0 && v0_ <= kVMax, "velocity env: initial velocity ", v0_,
                " outside [0, ", kVMax, "]");
        v_ = v0_;
        spec_.id = "velocity";
        spec_.state_dim = 1;
        spec_.action_dim = 1;
        spec_.action_low = {-1.0};
        spec_.action_high = {1.0};
        spec_.c_max = 1.0;
        spec_.max_horizon = kHorizon;
        spec_.reward_min = 0.0;
        spec_.reward_max = kVMax * kDt * kHorizon;
    }

    const EnvSpec& spec() const override { return spec_; }

    std::vector<double> reset() override {
        v_ = v0_;
        t_ = 0;
        return {v_};
    }

    StepResult step(const std::vector<double>& action) override {
        require(action.size() == 1, "velocity step: action dim ", action.size(), " != 1");
        const double a = action[0];
        require(std::abs(a) <= 1.0 + 1e-12, "velocity step: |action| = ", std::abs(a), " exceeds bound 1");
        const double v_next = std::clamp(v_ + a * kDt, 0.0, kVMax);
        v_ = v_next;
        ++t_;
        StepResult r;
        r.state = {v_};
        r.reward = v_next * kDt;
        r.cost = (v_next > kVLimit) ? 1.0 : 0.0; // strictly above the limit
        r.done = t_ >= kHorizon;
        return r;
    }

    double velocity() const { return v_; }

private:
    EnvSpec spec_;
    double v0_ = 0.0;
    double v_ = 0.0;
    int t_ = 0;
};

// Deterministic chain walk over states {0..N-1}. Reward is the landing state
// index over N; cost 1 whenever the agent acts while inside the hazard set.
// Small and fully enumerable, which is what the theory oracles need.
class ChainEnv final : public Env {
public:
    enum class Action { left = -1, stay = 0, right = 1 };

    ChainEnv(int n_states, std::vector<int> hazard_states, int horizon)
        : n_(n_states), horizon_(horizon), hazard_(static_cast<std::size_t>(n_states), 0) {
        require(n_ >= 2, "chain env: need at least 2 states, got ", n_);
        require(horizon_ >= 1, "chain env: horizon must be >= 1");
        for (int h : hazard_states) {
            require(h >= 0 && h < n_, "chain env: hazard state ", h, " outside {0..", n_ - 1, "}");
            hazard_[static_cast<std::size_t>(h)] = 1;
        }
        spec_.id = "chain";
        spec_.state_dim = 1;
        spec_.action_dim = 1;
        spec_.action_low = {-1.0};
        spec_.action_high = {1.0};
        spec_.c_max = 1.0;
        spec_.max_horizon = horizon_;
        spec_.reward_min = 0.0;
        spec_.reward_max = static_cast<double>(horizon_) * static_cast<double>(n_ - 1) / n_;
    }

    static Action action_from_token(int token) {
        switch (token) {
            case -1: return Action::left;
            case 0: return Action::stay;
            case 1: return Action::right;
            default: fail("chain env: invalid action token ", token, " (expected -1, 0, or 1)");
        }
    }

    // Continuous command -> token by thirds of [-1, 1]; total mapping so the
    // Gaussian policy head can drive the chain.
    static Action decode(double a) {
        if (a < -1.0 / 3.0) {
            return Action::left;
        }
        if (a > 1.0 / 3.0) {
            return Action::right;
        }
        return Action::stay;
    }

    const EnvSpec& spec() const override { return spec_; }

    std::vector<double> reset() override {
        state_ = 0;
        t_ = 0;
        return {static_cast<double>(state_)};
    }

    StepResult step(const std::vector<double>& action) override {
        require(action.size() == 1, "chain step: action dim ", action.size(), " != 1");
        return step(decode(action[0]));
    }

    StepResult step(Action a) {
        const double cost = hazard_[static_cast<std::size_t>(state_)] ? 1.0 : 0.0;
        const int next = std::clamp(state_ + static_cast<int>(a), 0, n_ - 1);
        state_ = next;
        ++t_;
        StepResult r;
        r.state = {static_cast<double>(state_)};
        r.reward = static_cast<double>(next) / n_;
        r.cost = cost;
        r.done = t_ >= horizon_;
        return r;
    }

    int state() const { return state_; }
    int n_states() const { return n_; }

private:
    int n_;
    int horizon_;
    std::vector<std::uint8_t> hazard_;
    EnvSpec spec_;
    int state_ = 0;
    int t_ = 0;
};

inline std::unique_ptr<Env> make_env(const std::string& id) {
    if (id == "velocity") {
        return std::make_unique<VelocityEnv>();
    }
    if (id == "chain") {
        return std::make_unique<ChainEnv>(5, std::vector<int>{4}, 40);
    }
    fail("unknown env id '", id, "' (expected 'velocity' or 'chain')");
}

} // namespace b2r
