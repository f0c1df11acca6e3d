#pragma once

// Decision-transformer-style policy over (RTG, CTG, state, action) tokens.
//
// Each timestep contributes four tokens in order (rtg, ctg, state, action);
// the final timestep omits its action, which is the prediction target, so a
// window of K timesteps becomes L = 4K - 1 tokens. The action distribution is
// read at the final state token: a Gaussian with learned state-independent
// log-std per action dimension.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "b2r/dataset.hpp"
#include "b2r/rng.hpp"
#include "b2r/tensor.hpp"
#include "b2r/util.hpp"

namespace b2r {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    std::size_t hidden_dim = 128;
    std::size_t n_heads = 8;
    std::size_t n_layers = 3;
    double dropout = 0.1;
    std::size_t context_k = 10; // timesteps per window
    std::size_t mlp_ratio = 4;
    double rope_base = 10000.0;

    void validate() const {
        require(hidden_dim > 0 && n_heads > 0 && n_layers > 0 && context_k > 0 && mlp_ratio > 0,
                "model config: all dimensions must be positive");
        require(hidden_dim % n_heads == 0, "model config: hidden_dim ", hidden_dim,
                " not divisible by n_heads ", n_heads);
        require((hidden_dim / n_heads) % 2 == 0, "model config: head dim ",
                hidden_dim / n_heads, " must be even for rotary encoding");
        require(dropout >= 0.0 && dropout < 1.0, "model config: dropout ", dropout,
                " outside [0, 1)");
        require(rope_base > 0.0, "model config: rope base must be positive");
    }

    std::size_t tokens_per_window() const { return 4 * context_k - 1; }

    nlohmann::json to_json() const {
        return {{"hidden_dim", hidden_dim}, {"n_heads", n_heads},   {"n_layers", n_layers},
                {"dropout", dropout},       {"context_k", context_k}, {"mlp_ratio", mlp_ratio},
                {"rope_base", rope_base}};
    }
    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.dropout = j.at("dropout").get<double>();
        c.context_k = j.at("context_k").get<std::size_t>();
        c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
        c.rope_base = j.at("rope_base").get<double>();
        c.validate();
        return c;
    }
};

// Token normalization fitted on the training dataset. CTG is divided by a
// single scale (the training budget kappa) so deployment budgets land on the
// same footing as supervision.
struct NormStats {
    std::vector<double> state_mean;
    std::vector<double> state_std; // floored away from zero
    double rtg_mean = 0.0;
    double rtg_std = 1.0;
    double ctg_scale = 1.0;

    nlohmann::json to_json() const {
        return {{"state_mean", state_mean},
                {"state_std", state_std},
                {"rtg_mean", rtg_mean},
                {"rtg_std", rtg_std},
                {"ctg_scale", ctg_scale}};
    }
    static NormStats from_json(const nlohmann::json& j) {
        NormStats s;
        s.state_mean = j.at("state_mean").get<std::vector<double>>();
        s.state_std = j.at("state_std").get<std::vector<double>>();
        s.rtg_mean = j.at("rtg_mean").get<double>();
        s.rtg_std = j.at("rtg_std").get<double>();
        s.ctg_scale = j.at("ctg_scale").get<double>();
        return s;
    }
};

inline NormStats compute_norm_stats(const std::vector<AnnotatedTrajectory>& dataset,
                                    std::optional<double> kappa) {
    require(!dataset.empty(), "norm stats: empty dataset");
    const std::size_t s_dim = dataset.front().traj.state_dim();
    NormStats ns;
    ns.state_mean.assign(s_dim, 0.0);
    ns.state_std.assign(s_dim, 0.0);

    std::vector<KahanSum> mean_acc(s_dim);
    KahanSum rtg_acc;
    std::size_t n = 0;
    for (const AnnotatedTrajectory& at : dataset) {
        for (std::size_t t = 0; t < at.horizon(); ++t) {
            for (std::size_t j = 0; j < s_dim; ++j) {
                mean_acc[j].add(at.traj.transitions()[t].state[j]);
            }
            rtg_acc.add(at.rtg[t]);
            ++n;
        }
    }
    for (std::size_t j = 0; j < s_dim; ++j) {
        ns.state_mean[j] = mean_acc[j].value() / static_cast<double>(n);
    }
    ns.rtg_mean = rtg_acc.value() / static_cast<double>(n);

    std::vector<KahanSum> var_acc(s_dim);
    KahanSum rtg_var;
    for (const AnnotatedTrajectory& at : dataset) {
        for (std::size_t t = 0; t < at.horizon(); ++t) {
            for (std::size_t j = 0; j < s_dim; ++j) {
                const double d = at.traj.transitions()[t].state[j] - ns.state_mean[j];
                var_acc[j].add(d * d);
            }
            const double d = at.rtg[t] - ns.rtg_mean;
            rtg_var.add(d * d);
        }
    }
    for (std::size_t j = 0; j < s_dim; ++j) {
        ns.state_std[j] = std::max(std::sqrt(var_acc[j].value() / static_cast<double>(n)), 1e-6);
    }
    ns.rtg_std = std::max(std::sqrt(rtg_var.value() / static_cast<double>(n)), 1e-6);

    double scale = 1.0;
    if (kappa.has_value() && *kappa > 0.0) {
        scale = *kappa;
    } else {
        for (const AnnotatedTrajectory& at : dataset) {
            scale = std::max(scale, std::abs(at.ctg[0]));
        }
    }
    ns.ctg_scale = scale;
    return ns;
}

// ---------------------------------------------------------------------------
// Token windows
// ---------------------------------------------------------------------------

struct TokenWindow {
    std::size_t k = 0;                             // context length
    std::vector<double> rtg;                       // K, padded slots 0
    std::vector<double> ctg;                       // K
    std::vector<std::vector<double>> states;       // K x s_dim
    std::vector<std::vector<double>> actions;      // (K-1) x a_dim, prior actions
    std::vector<std::uint8_t> valid;               // K, 1 = real timestep

    void validate() const {
        require(k >= 1, "token window: K must be >= 1");
        require(rtg.size() == k && ctg.size() == k && states.size() == k &&
                    actions.size() == k - 1 && valid.size() == k,
                "token window: inconsistent lengths for K = ", k);
        require(valid[k - 1] == 1, "token window: current timestep must be real");
        for (std::size_t i = 0; i + 1 < k; ++i) {
            require(valid[i] <= valid[i + 1], "token window: padding must be a left prefix");
            if (valid[i]) {
                require(ctg[i] >= ctg[i + 1] - 1e-9, "token window: ctg increases at slot ", i);
            }
        }
    }
};

// Window ending at timestep t: slots cover timesteps t-K+1 .. t, left-padded
// with zeros where the episode has not started.
inline TokenWindow tokenize(const AnnotatedTrajectory& at, std::size_t t, std::size_t K) {
    require(t < at.horizon(), "tokenize: timestep ", t, " out of range for horizon ",
            at.horizon());
    require(K >= 1, "tokenize: K must be >= 1");
    const std::size_t s_dim = at.traj.state_dim();
    const std::size_t a_dim = at.traj.action_dim();

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
        w.rtg[i] = at.rtg[uu];
        w.ctg[i] = at.ctg[uu];
        w.states[i] = at.traj.transitions()[uu].state;
        if (i + 1 < K) {
            w.actions[i] = at.traj.transitions()[uu].action;
        }
        w.valid[i] = 1;
    }
    w.validate();
    return w;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct PolicyParams {
    struct Block {
        nn::Tensor ln1_g, ln1_b;
        nn::Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        nn::Tensor ln2_g, ln2_b;
        nn::Tensor w_mlp1, b_mlp1, w_mlp2, b_mlp2;
    };

    ModelConfig config;
    NormStats norm;
    std::size_t state_dim = 0;
    std::size_t action_dim = 0;

    nn::Tensor type_embed;            // [4, d]: rtg, ctg, state, action
    nn::Tensor w_rtg, b_rtg;          // [1, d], [1, d]
    nn::Tensor w_ctg, b_ctg;
    nn::Tensor w_state, b_state;      // [s_dim, d]
    nn::Tensor w_action, b_action;    // [a_dim, d]
    std::vector<Block> blocks;
    nn::Tensor lnf_g, lnf_b;
    nn::Tensor w_head, b_head;        // [d, a_dim]
    nn::Tensor log_std;               // [1, a_dim], clamped to [-5, 2] in use

    static constexpr double kLogStdMin = -5.0;
    static constexpr double kLogStdMax = 2.0;

    static PolicyParams init(const ModelConfig& cfg, std::size_t state_dim,
                             std::size_t action_dim, std::uint64_t seed) {
        cfg.validate();
        require(state_dim > 0 && action_dim > 0, "policy init: zero state/action dim");
        Rng rng(seed);
        const std::size_t d = cfg.hidden_dim;
        auto randn = [&rng](std::vector<std::size_t> shape, const std::string& name) {
            std::size_t n = 1;
            for (std::size_t s : shape) {
                n *= s;
            }
            std::vector<double> v(n);
            for (double& x : v) {
                x = rng.gauss(0.0, 0.02);
            }
            return nn::Tensor::leaf(std::move(shape), std::move(v), true, name);
        };
        auto fill = [](std::vector<std::size_t> shape, double value, const std::string& name) {
            std::size_t n = 1;
            for (std::size_t s : shape) {
                n *= s;
            }
            return nn::Tensor::leaf(std::move(shape), std::vector<double>(n, value), true, name);
        };

        PolicyParams p;
        p.config = cfg;
        p.state_dim = state_dim;
        p.action_dim = action_dim;
        p.norm.state_mean.assign(state_dim, 0.0); // identity normalization until fitted
        p.norm.state_std.assign(state_dim, 1.0);
        p.type_embed = randn({4, d}, "type_embed");
        p.w_rtg = randn({1, d}, "w_rtg");
        p.b_rtg = fill({1, d}, 0.0, "b_rtg");
        p.w_ctg = randn({1, d}, "w_ctg");
        p.b_ctg = fill({1, d}, 0.0, "b_ctg");
        p.w_state = randn({state_dim, d}, "w_state");
        p.b_state = fill({1, d}, 0.0, "b_state");
        p.w_action = randn({action_dim, d}, "w_action");
        p.b_action = fill({1, d}, 0.0, "b_action");
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            const std::string pre = str("block", l, ".");
            Block b;
            b.ln1_g = fill({d}, 1.0, pre + "ln1_g");
            b.ln1_b = fill({d}, 0.0, pre + "ln1_b");
            b.wq = randn({d, d}, pre + "wq");
            b.bq = fill({1, d}, 0.0, pre + "bq");
            b.wk = randn({d, d}, pre + "wk");
            b.bk = fill({1, d}, 0.0, pre + "bk");
            b.wv = randn({d, d}, pre + "wv");
            b.bv = fill({1, d}, 0.0, pre + "bv");
            b.wo = randn({d, d}, pre + "wo");
            b.bo = fill({1, d}, 0.0, pre + "bo");
            b.ln2_g = fill({d}, 1.0, pre + "ln2_g");
            b.ln2_b = fill({d}, 0.0, pre + "ln2_b");
            b.w_mlp1 = randn({d, cfg.mlp_ratio * d}, pre + "w_mlp1");
            b.b_mlp1 = fill({1, cfg.mlp_ratio * d}, 0.0, pre + "b_mlp1");
            b.w_mlp2 = randn({cfg.mlp_ratio * d, d}, pre + "w_mlp2");
            b.b_mlp2 = fill({1, d}, 0.0, pre + "b_mlp2");
            p.blocks.push_back(std::move(b));
        }
        p.lnf_g = fill({d}, 1.0, "lnf_g");
        p.lnf_b = fill({d}, 0.0, "lnf_b");
        p.w_head = randn({d, action_dim}, "w_head");
        p.b_head = fill({1, action_dim}, 0.0, "b_head");
        p.log_std = fill({1, action_dim}, 0.0, "log_std");
        return p;
    }

    std::vector<nn::Tensor> all() const {
        std::vector<nn::Tensor> out = {type_embed, w_rtg, b_rtg, w_ctg, b_ctg,
                                       w_state,    b_state, w_action, b_action};
        for (const Block& b : blocks) {
            for (const nn::Tensor& t : {b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv,
                                        b.wo, b.bo, b.ln2_g, b.ln2_b, b.w_mlp1, b.b_mlp1,
                                        b.w_mlp2, b.b_mlp2}) {
                out.push_back(t);
            }
        }
        out.push_back(lnf_g);
        out.push_back(lnf_b);
        out.push_back(w_head);
        out.push_back(b_head);
        out.push_back(log_std);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const nn::Tensor& t : all()) {
            n += t.size();
        }
        return n;
    }
};

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct ForwardResult {
    nn::Tensor mu_last; // [B, a_dim] at the final state token of each window
    nn::Tensor mu_all;  // [B*K, a_dim] at every state token (padded slots are meaningless)
    nn::Tensor log_std; // [1, a_dim], clamped
};

// `dropout_rng` supplies the dropout streams when training; pass nullptr (or
// training = false) for the deterministic inference path.
inline ForwardResult policy_forward(nn::Tape& tape, const PolicyParams& p,
                                    const std::vector<TokenWindow>& batch, bool training = false,
                                    Rng* dropout_rng = nullptr) {
    require(!batch.empty(), "policy forward: empty batch");
    const std::size_t K = p.config.context_k;
    const std::size_t B = batch.size();
    const std::size_t L = p.config.tokens_per_window();
    const std::size_t d = p.config.hidden_dim;
    const bool use_dropout = training && p.config.dropout > 0.0;
    require(!use_dropout || dropout_rng != nullptr,
            "policy forward: training with dropout requires an rng");
    require(p.norm.state_mean.size() == p.state_dim && p.norm.state_std.size() == p.state_dim,
            "policy forward: normalization stats sized for ", p.norm.state_mean.size(),
            " state dims, model has ", p.state_dim);
    require(p.norm.rtg_std > 0.0 && p.norm.ctg_scale > 0.0,
            "policy forward: normalization scales must be positive");

    // flatten the batch into per-type input matrices
    std::vector<double> rtg_in(B * K, 0.0);
    std::vector<double> ctg_in(B * K, 0.0);
    std::vector<double> state_in(B * K * p.state_dim, 0.0);
    std::vector<double> action_in(B * (K - 1) * p.action_dim, 0.0);
    std::vector<std::uint8_t> key_valid(B * L, 0);
    std::vector<int> positions(B * L, 0);
    std::vector<std::size_t> type_idx(B * L, 0);
    std::vector<std::size_t> dst_rtg(B * K), dst_ctg(B * K), dst_state(B * K);
    std::vector<std::size_t> dst_action(B * (K - 1));
    std::vector<std::size_t> last_state_rows(B);
    std::vector<std::size_t> all_state_rows(B * K);

    for (std::size_t b = 0; b < B; ++b) {
        const TokenWindow& w = batch[b];
        w.validate();
        require(w.k == K, "policy forward: window K ", w.k, " != config K ", K);
        require(w.states[0].size() == p.state_dim && w.actions.empty() == (K == 1),
                "policy forward: window dims do not match the model");
        if (K > 1) {
            require(w.actions[0].size() == p.action_dim,
                    "policy forward: window action dim ", w.actions[0].size(), " != ",
                    p.action_dim);
        }
        for (std::size_t u = 0; u < K; ++u) {
            const std::size_t row = b * L + 4 * u;
            const bool is_valid = w.valid[u] != 0;
            // normalized token payloads; padded slots stay exactly zero
            if (is_valid) {
                rtg_in[b * K + u] = (w.rtg[u] - p.norm.rtg_mean) / p.norm.rtg_std;
                ctg_in[b * K + u] = w.ctg[u] / p.norm.ctg_scale;
                for (std::size_t j = 0; j < p.state_dim; ++j) {
                    state_in[(b * K + u) * p.state_dim + j] =
                        (w.states[u][j] - p.norm.state_mean[j]) / p.norm.state_std[j];
                }
                if (u + 1 < K) {
                    for (std::size_t j = 0; j < p.action_dim; ++j) {
                        action_in[(b * (K - 1) + u) * p.action_dim + j] = w.actions[u][j];
                    }
                }
            }
            dst_rtg[b * K + u] = row;
            dst_ctg[b * K + u] = row + 1;
            dst_state[b * K + u] = row + 2;
            if (u + 1 < K) {
                dst_action[b * (K - 1) + u] = row + 3;
            }
            const std::size_t slot_tokens = (u + 1 < K) ? 4 : 3;
            for (std::size_t j = 0; j < slot_tokens; ++j) {
                key_valid[row + j] = is_valid ? 1 : 0;
                positions[row + j] = static_cast<int>(u);
                type_idx[row + j] = j;
            }
            all_state_rows[b * K + u] = row + 2;
        }
        last_state_rows[b] = b * L + 4 * (K - 1) + 2;
    }

    auto constant = [](std::vector<std::size_t> shape, std::vector<double> v,
                       const std::string& name) {
        return nn::Tensor::leaf(std::move(shape), std::move(v), false, name);
    };

    nn::Tensor rtg_tok = tape.add_rowvec(
        tape.matmul(constant({B * K, 1}, std::move(rtg_in), "rtg_in"), p.w_rtg), p.b_rtg);
    nn::Tensor ctg_tok = tape.add_rowvec(
        tape.matmul(constant({B * K, 1}, std::move(ctg_in), "ctg_in"), p.w_ctg), p.b_ctg);
    nn::Tensor state_tok = tape.add_rowvec(
        tape.matmul(constant({B * K, p.state_dim}, std::move(state_in), "state_in"), p.w_state),
        p.b_state);

    nn::Tensor x = tape.add(tape.scatter_rows(rtg_tok, dst_rtg, B * L),
                            tape.scatter_rows(ctg_tok, dst_ctg, B * L));
    x = tape.add(x, tape.scatter_rows(state_tok, dst_state, B * L));
    if (K > 1) {
        nn::Tensor action_tok = tape.add_rowvec(
            tape.matmul(constant({B * (K - 1), p.action_dim}, std::move(action_in), "action_in"),
                        p.w_action),
            p.b_action);
        x = tape.add(x, tape.scatter_rows(action_tok, dst_action, B * L));
    }
    x = tape.add(x, tape.embed_lookup(p.type_embed, type_idx));
    if (use_dropout) {
        x = tape.dropout(x, p.config.dropout, *dropout_rng);
    }

    const std::size_t head_dim = d / p.config.n_heads;
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        const PolicyParams::Block& blk = p.blocks[l];
        nn::Tensor h = tape.layer_norm(x, blk.ln1_g, blk.ln1_b);
        nn::Tensor q = tape.add_rowvec(tape.matmul(h, blk.wq), blk.bq);
        nn::Tensor k = tape.add_rowvec(tape.matmul(h, blk.wk), blk.bk);
        nn::Tensor v = tape.add_rowvec(tape.matmul(h, blk.wv), blk.bv);
        q = tape.apply_rope(q, positions, p.config.rope_base, head_dim);
        k = tape.apply_rope(k, positions, p.config.rope_base, head_dim);
        nn::Tensor att = tape.causal_attention(q, k, v, B, L, p.config.n_heads, key_valid);
        att = tape.add_rowvec(tape.matmul(att, blk.wo), blk.bo);
        if (use_dropout) {
            att = tape.dropout(att, p.config.dropout, *dropout_rng);
        }
        x = tape.add(x, att);

        nn::Tensor m = tape.layer_norm(x, blk.ln2_g, blk.ln2_b);
        m = tape.gelu(tape.add_rowvec(tape.matmul(m, blk.w_mlp1), blk.b_mlp1));
        m = tape.add_rowvec(tape.matmul(m, blk.w_mlp2), blk.b_mlp2);
        if (use_dropout) {
            m = tape.dropout(m, p.config.dropout, *dropout_rng);
        }
        x = tape.add(x, m);
        nn::require_finite(x, str("policy forward: block ", l));
    }

    x = tape.layer_norm(x, p.lnf_g, p.lnf_b);
    nn::Tensor mu_rows = tape.add_rowvec(tape.matmul(x, p.w_head), p.b_head);
    nn::require_finite(mu_rows, "policy forward: action head");

    ForwardResult out;
    out.mu_last = tape.gather_rows(mu_rows, last_state_rows);
    out.mu_all = tape.gather_rows(mu_rows, all_state_rows);
    out.log_std = tape.clamp(p.log_std, PolicyParams::kLogStdMin, PolicyParams::kLogStdMax);
    return out;
}

// ---------------------------------------------------------------------------
// Loss and sampling
// ---------------------------------------------------------------------------

inline constexpr double kHalfLog2Pi = 0.9189385332046727418; // 0.5 * ln(2*pi)

// Mean over the batch of -log N(target; mu, diag sigma^2), one target action
// per window (the action at the window's final timestep).
inline nn::Tensor policy_nll(nn::Tape& tape, const PolicyParams& p,
                             const std::vector<TokenWindow>& batch,
                             const std::vector<std::vector<double>>& targets,
                             bool training = false, Rng* dropout_rng = nullptr) {
    require(!batch.empty() && batch.size() == targets.size(), "policy nll: ", batch.size(),
            " windows vs ", targets.size(), " targets");
    const std::size_t B = batch.size();
    const std::size_t a_dim = p.action_dim;
    std::vector<double> flat(B * a_dim);
    for (std::size_t b = 0; b < B; ++b) {
        require(targets[b].size() == a_dim, "policy nll: target dim ", targets[b].size(),
                " != ", a_dim);
        for (std::size_t j = 0; j < a_dim; ++j) {
            flat[b * a_dim + j] = targets[b][j];
        }
    }

    ForwardResult fwd = policy_forward(tape, p, batch, training, dropout_rng);
    nn::Tensor tgt = nn::Tensor::leaf({B, a_dim}, std::move(flat), false, "targets");
    nn::Tensor diff = tape.sub(tgt, fwd.mu_last);
    nn::Tensor sq = tape.mul(diff, diff);
    nn::Tensor inv_var = tape.exp(tape.scale(fwd.log_std, -2.0)); // [1, a_dim]
    nn::Tensor quad = tape.scale(tape.sum(tape.mul_rowvec(sq, inv_var)), 0.5);
    nn::Tensor log_sigma_term = tape.scale(tape.sum(fwd.log_std), static_cast<double>(B));
    nn::Tensor total = tape.add_const(tape.add(quad, log_sigma_term),
                                      kHalfLog2Pi * static_cast<double>(B * a_dim));
    return tape.scale(total, 1.0 / static_cast<double>(B));
}

enum class ActionMode { mean, sample };

inline ActionMode action_mode_from_string(const std::string& s) {
    if (s == "mean") return ActionMode::mean;
    if (s == "sample") return ActionMode::sample;
    fail("unknown action mode '", s, "' (expected mean|sample)");
}

inline std::vector<double> sample_action(const PolicyParams& p, const TokenWindow& window,
                                         ActionMode mode, Rng& rng,
                                         const std::vector<double>& action_low,
                                         const std::vector<double>& action_high) {
    require(action_low.size() == p.action_dim && action_high.size() == p.action_dim,
            "sample_action: bounds dim mismatch");
    nn::Tape tape;
    ForwardResult fwd = policy_forward(tape, p, {window}, false, nullptr);
    std::vector<double> a(p.action_dim);
    for (std::size_t j = 0; j < p.action_dim; ++j) {
        double x = fwd.mu_last.value()[j];
        if (mode == ActionMode::sample) {
            const double sigma = std::exp(fwd.log_std.value()[j]);
            x += sigma * rng.gauss(0.0, 1.0);
        }
        a[j] = std::clamp(x, action_low[j], action_high[j]);
    }
    return a;
}

} // namespace b2r
