#pragma once

// Behavior-cloning trainer: adaptive-moment optimizer with decoupled weight
// decay, global gradient-norm clipping, seeded batch sampling, and checkpoint
// plus loss-log emission. Also hosts the boundary-band baseline trainer that
// keeps raw CTG tokens and trains only on trajectories whose total cost lies
// within [kappa - eps, kappa + eps].

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "b2r/checkpoint.hpp"
#include "b2r/dataset.hpp"
#include "b2r/model.hpp"
#include "b2r/rng.hpp"
#include "b2r/util.hpp"

namespace b2r {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 64;
    double grad_clip_norm = 0.25;
    std::size_t steps_per_epoch = 500;
    std::size_t epochs = 20;
    std::uint64_t seed = 0;
    double weight_decay = 1e-4;
    std::size_t eval_every = 1;          // epochs between early-stop evaluations
    std::size_t early_stop_patience = 3; // consecutive non-improving evals; 0 disables

    void validate() const {
        require(learning_rate > 0.0, "train config: learning rate must be positive");
        require(batch_size > 0, "train config: batch size must be positive");
        require(grad_clip_norm > 0.0, "train config: grad clip norm must be positive");
        require(steps_per_epoch > 0, "train config: steps per epoch must be positive");
        require(weight_decay >= 0.0, "train config: weight decay must be non-negative");
        require(eval_every > 0, "train config: eval_every must be positive");
        // epochs == 0 is a legal no-op run
    }
};

struct TrainReport {
    std::vector<double> loss_curve; // one entry per executed optimizer step
    PolicyParams params;
    double wall_time_seconds = 0.0;
    std::uint64_t seed = 0;
    bool early_stopped = false;
    std::size_t executed_steps() const { return loss_curve.size(); }
};

// Optional artifact paths and hooks; empty path means "do not write".
struct TrainOutputs {
    std::string checkpoint_path;
    std::string loss_csv_path;
    std::string env_id;
    // Higher-is-better score evaluated every eval_every epochs; drives early
    // stopping when early_stop_patience > 0.
    std::function<double(const PolicyParams&)> eval_score;
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Scales all gradients so their global l2 norm is at most max_norm; returns
// the pre-clip norm.
inline double clip_global_norm(const std::vector<nn::Tensor>& params, double max_norm) {
    require(max_norm > 0.0, "clip_global_norm: max_norm must be positive");
    KahanSum sq;
    for (const nn::Tensor& p : params) {
        for (double g : p.grad()) {
            sq.add(g * g);
        }
    }
    const double norm = std::sqrt(sq.value());
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (const nn::Tensor& p : params) {
            nn::Tensor handle = p;
            for (double& g : handle.grad()) {
                g *= s;
            }
        }
    }
    return norm;
}

// Adam with decoupled weight decay (applied uniformly to every parameter; at
// the learning rates used here the distinction between decaying and exempting
// norms/biases is immaterial, so we keep the simpler rule).
class AdamW {
  public:
    AdamW(std::vector<nn::Tensor> params, double lr, double weight_decay,
          double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2),
          eps_(eps) {
        require(lr_ > 0.0 && eps_ > 0.0 && wd_ >= 0.0, "adamw: bad hyperparameters");
        require(b1_ >= 0.0 && b1_ < 1.0 && b2_ >= 0.0 && b2_ < 1.0, "adamw: betas must be in [0,1)");
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const nn::Tensor& p : params_) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            nn::Tensor p = params_[i];
            const std::vector<double>& g = p.grad();
            std::vector<double>& val = p.value();
            for (std::size_t j = 0; j < g.size(); ++j) {
                m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g[j];
                v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g[j] * g[j];
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                val[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * val[j]);
            }
        }
    }

    std::size_t steps_taken() const { return t_; }

  private:
    std::vector<nn::Tensor> params_;
    double lr_, wd_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

struct TrainingBatch {
    std::vector<TokenWindow> windows;
    std::vector<std::vector<double>> targets;                 // action at each window's end
    std::vector<std::pair<std::size_t, std::size_t>> indices; // (trajectory, timestep)
};

// Uniform over (trajectory, timestep) pairs, with replacement.
inline TrainingBatch sample_batch(const std::vector<AnnotatedTrajectory>& dataset,
                                  std::size_t batch_size, std::size_t K, Rng& rng) {
    require(!dataset.empty(), "sample_batch: empty dataset");
    require(batch_size > 0, "sample_batch: batch size must be positive");
    std::vector<std::size_t> offsets(dataset.size() + 1, 0);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        offsets[i + 1] = offsets[i] + dataset[i].horizon();
    }
    const std::size_t total = offsets.back();

    TrainingBatch batch;
    batch.windows.reserve(batch_size);
    batch.targets.reserve(batch_size);
    batch.indices.reserve(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) {
        const std::size_t flat = rng.index(total);
        const auto it = std::upper_bound(offsets.begin(), offsets.end(), flat);
        const std::size_t traj = static_cast<std::size_t>(it - offsets.begin()) - 1;
        const std::size_t t = flat - offsets[traj];
        batch.windows.push_back(tokenize(dataset[traj], t, K));
        batch.targets.push_back(dataset[traj].traj.transitions()[t].action);
        batch.indices.emplace_back(traj, t);
    }
    return batch;
}

inline TrainingBatch sample_batch(const std::vector<AnnotatedTrajectory>& dataset,
                                  std::size_t batch_size, std::size_t K, std::uint64_t seed) {
    Rng rng(seed);
    return sample_batch(dataset, batch_size, K, rng);
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

inline void write_loss_csv(const std::string& path, const std::vector<double>& curve) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(os), "loss log: cannot open '", path, "' for writing");
    os << "step,loss\n";
    for (std::size_t i = 0; i < curve.size(); ++i) {
        os << i << ',' << nlohmann::json(curve[i]).dump() << '\n';
    }
    os.flush();
    require(static_cast<bool>(os), "loss log: write to '", path, "' failed");
}

namespace detail {

inline TrainReport train_core(const std::vector<AnnotatedTrajectory>& dataset, double kappa,
                              const ModelConfig& model_cfg, const TrainConfig& tc,
                              const TrainOutputs& out) {
    model_cfg.validate();
    tc.validate();
    require(!dataset.empty(), "train: empty dataset");
    const auto t0 = std::chrono::steady_clock::now();

    const std::size_t s_dim = dataset.front().traj.state_dim();
    const std::size_t a_dim = dataset.front().traj.action_dim();
    PolicyParams params = PolicyParams::init(model_cfg, s_dim, a_dim,
                                             Rng::derive(tc.seed, 0).next_u64());
    params.norm = compute_norm_stats(dataset, kappa);

    Rng batch_rng(Rng::derive(tc.seed, 1).next_u64());
    Rng dropout_rng(Rng::derive(tc.seed, 2).next_u64());
    const std::vector<nn::Tensor> leaves = params.all();
    AdamW opt(leaves, tc.learning_rate, tc.weight_decay);

    TrainReport report;
    report.seed = tc.seed;
    report.loss_curve.reserve(tc.steps_per_epoch * tc.epochs);

    double best_score = -std::numeric_limits<double>::infinity();
    std::size_t evals_since_best = 0;

    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        for (std::size_t s = 0; s < tc.steps_per_epoch; ++s) {
            const TrainingBatch batch =
                sample_batch(dataset, tc.batch_size, model_cfg.context_k, batch_rng);
            nn::Tape tape;
            nn::Tensor loss;
            try {
                loss = policy_nll(tape, params, batch.windows, batch.targets, true, &dropout_rng);
            } catch (const DomainError& e) {
                fail("train: aborted at step ", report.loss_curve.size(), ": ", e.what());
            }
            const double loss_val = loss.value()[0];
            require(std::isfinite(loss_val), "train: non-finite loss at step ",
                    report.loss_curve.size());
            nn::zero_grads(leaves);
            tape.backward(loss);
            clip_global_norm(leaves, tc.grad_clip_norm);
            opt.step();
            report.loss_curve.push_back(loss_val);
        }
        if (out.eval_score && tc.early_stop_patience > 0 && (epoch + 1) % tc.eval_every == 0) {
            const double score = out.eval_score(params);
            if (score > best_score) {
                best_score = score;
                evals_since_best = 0;
            } else if (++evals_since_best >= tc.early_stop_patience) {
                report.early_stopped = true;
                break;
            }
        }
    }

    report.params = std::move(params);
    report.wall_time_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!out.loss_csv_path.empty()) {
        write_loss_csv(out.loss_csv_path, report.loss_curve);
    }
    if (!out.checkpoint_path.empty()) {
        save_checkpoint(out.checkpoint_path, report.params, out.env_id);
    }
    return report;
}

} // namespace detail

// Trains on a dataset that must already be filtered to C(tau) <= kappa and
// realigned so every ctg[0] equals kappa.
inline TrainReport train(const std::vector<AnnotatedTrajectory>& dataset, double kappa,
                         const ModelConfig& model_cfg, const TrainConfig& tc,
                         const TrainOutputs& out = {}) {
    require(kappa >= 0.0, "train: kappa must be non-negative");
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        require(dataset[i].total_cost <= kappa + 1e-9, "train: trajectory ", i,
                " has cost ", dataset[i].total_cost, " above the budget ", kappa,
                " — dataset must be filtered first");
        require(std::abs(dataset[i].ctg[0] - kappa) <= 1e-9, "train: trajectory ", i,
                " has initial ctg ", dataset[i].ctg[0], ", expected the budget ", kappa,
                " — dataset must be realigned first");
    }
    return detail::train_core(dataset, kappa, model_cfg, tc, out);
}

// Selects the band {tau : C(tau) in [kappa - eps, kappa + eps]} from an
// unfiltered dataset. Exposed separately so tests can check membership.
inline FilterResult select_boundary_band(const std::vector<AnnotatedTrajectory>& dataset,
                                         double kappa, double eps) {
    require(eps > 0.0, "boundary band: epsilon must be positive");
    FilterResult r;
    r.total = dataset.size();
    for (const AnnotatedTrajectory& at : dataset) {
        if (at.total_cost >= kappa - eps && at.total_cost <= kappa + eps) {
            r.kept.push_back(at);
        } else {
            ++r.dropped;
        }
    }
    r.empty_warning = r.kept.empty();
    return r;
}

// Baseline: identical model and loop, but supervision comes only from the
// cost band around kappa and the CTG tokens stay raw (no realignment).
inline TrainReport train_boundary_baseline(const std::vector<AnnotatedTrajectory>& dataset,
                                           double kappa, double eps,
                                           const ModelConfig& model_cfg, const TrainConfig& tc,
                                           const TrainOutputs& out = {}) {
    require(kappa >= 0.0, "boundary baseline: kappa must be non-negative");
    const FilterResult band = select_boundary_band(dataset, kappa, eps);
    require(!band.kept.empty(),
            "boundary baseline: no trajectory has cost within [kappa - eps, kappa + eps] for kappa ",
            kappa, " and eps ", eps);
    return detail::train_core(band.kept, kappa, model_cfg, tc, out);
}

} // namespace b2r
