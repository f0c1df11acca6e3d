// Tests for the token-window policy: tokenization, forward pass, Gaussian
// negative log-likelihood, action sampling, and checkpoint round-trips.

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include <unistd.h>

#include "b2r/checkpoint.hpp"
#include "b2r/dataset.hpp"
#include "b2r/model.hpp"
#include "b2r/tensor.hpp"

using namespace b2r;

namespace {

// Deterministic synthetic trajectory with recognizable per-timestep values.
AnnotatedTrajectory make_annotated(std::size_t horizon, std::size_t s_dim = 2,
                                   std::size_t a_dim = 1) {
    std::vector<Transition> steps;
    for (std::size_t t = 0; t < horizon; ++t) {
        Transition tr;
        for (std::size_t j = 0; j < s_dim; ++j) {
            tr.state.push_back(0.5 * static_cast<double>(t) + 0.1 * static_cast<double>(j));
        }
        for (std::size_t j = 0; j < a_dim; ++j) {
            tr.action.push_back(std::sin(0.7 * static_cast<double>(t + j)));
        }
        tr.reward = 1.0 + 0.25 * static_cast<double>(t);
        tr.cost = (t % 2 == 0) ? 1.0 : 0.0;
        steps.push_back(std::move(tr));
    }
    return annotate(Trajectory(std::move(steps)));
}

ModelConfig tiny_config(std::size_t K) {
    ModelConfig cfg;
    cfg.hidden_dim = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.dropout = 0.0;
    cfg.context_k = K;
    return cfg;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& stem) {
        path = (std::filesystem::temp_directory_path() /
                (stem + "-" + std::to_string(::getpid()) + ".bin"))
                   .string();
    }
    ~TempFile() {
        std::error_code ec;
        std::filesystem::remove(path, ec);
        std::filesystem::remove(checkpoint_sidecar_path(path), ec);
    }
};

} // namespace

TEST_CASE("model config validation") {
    ModelConfig cfg = tiny_config(4);
    REQUIRE_NOTHROW(cfg.validate());

    SECTION("hidden not divisible by heads") {
        cfg.n_heads = 3;
        REQUIRE_THROWS_AS(cfg.validate(), DomainError);
    }
    SECTION("odd head dim") {
        cfg.hidden_dim = 6;
        cfg.n_heads = 2; // head dim 3
        REQUIRE_THROWS_AS(cfg.validate(), DomainError);
    }
    SECTION("dropout out of range") {
        cfg.dropout = 1.0;
        REQUIRE_THROWS_AS(cfg.validate(), DomainError);
    }
    SECTION("json round trip") {
        cfg.dropout = 0.15;
        cfg.context_k = 7;
        const ModelConfig back = ModelConfig::from_json(cfg.to_json());
        REQUIRE(back.hidden_dim == cfg.hidden_dim);
        REQUIRE(back.n_heads == cfg.n_heads);
        REQUIRE(back.n_layers == cfg.n_layers);
        REQUIRE(back.dropout == cfg.dropout);
        REQUIRE(back.context_k == cfg.context_k);
        REQUIRE(back.mlp_ratio == cfg.mlp_ratio);
        REQUIRE(back.rope_base == cfg.rope_base);
    }
}

TEST_CASE("tokenize windows") {
    const AnnotatedTrajectory at = make_annotated(12);

    SECTION("early timestep is left padded") {
        const TokenWindow w = tokenize(at, 0, 10);
        REQUIRE(w.k == 10);
        std::size_t real = 0;
        for (std::uint8_t v : w.valid) {
            real += v;
        }
        REQUIRE(real == 1);
        REQUIRE(w.valid[9] == 1);
        for (std::size_t i = 0; i < 9; ++i) {
            REQUIRE(w.valid[i] == 0);
            REQUIRE(w.rtg[i] == 0.0);
            REQUIRE(w.ctg[i] == 0.0);
            for (double s : w.states[i]) {
                REQUIRE(s == 0.0);
            }
        }
        REQUIRE(w.rtg[9] == at.rtg[0]);
        REQUIRE(w.ctg[9] == at.ctg[0]);
        REQUIRE(w.states[9] == at.traj.transitions()[0].state);
    }

    SECTION("full window carries the exact slice") {
        const std::size_t K = 4;
        const std::size_t t = 7;
        const TokenWindow w = tokenize(at, t, K);
        for (std::size_t i = 0; i < K; ++i) {
            const std::size_t u = t - K + 1 + i;
            REQUIRE(w.valid[i] == 1);
            REQUIRE(w.rtg[i] == at.rtg[u]);
            REQUIRE(w.ctg[i] == at.ctg[u]);
            REQUIRE(w.states[i] == at.traj.transitions()[u].state);
            if (i + 1 < K) {
                REQUIRE(w.actions[i] == at.traj.transitions()[u].action);
            }
        }
        // the final action is the prediction target, not an input
        REQUIRE(w.actions.size() == K - 1);
    }

    SECTION("partially padded window") {
        const TokenWindow w = tokenize(at, 2, 5);
        REQUIRE(w.valid == std::vector<std::uint8_t>({0, 0, 1, 1, 1}));
        REQUIRE(w.rtg[2] == at.rtg[0]);
        REQUIRE(w.ctg[4] == at.ctg[2]);
    }

    SECTION("timestep out of range") {
        REQUIRE_THROWS_WITH(tokenize(at, 12, 4), Catch::Matchers::ContainsSubstring("out of range"));
    }

    SECTION("K = 1 has no prior actions") {
        const TokenWindow w = tokenize(at, 5, 1);
        REQUIRE(w.actions.empty());
        REQUIRE(w.rtg[0] == at.rtg[5]);
    }

    SECTION("window validation rejects increasing ctg") {
        TokenWindow w = tokenize(at, 7, 4);
        w.ctg[1] = w.ctg[2] - 1.0; // force an increase between valid slots
        REQUIRE_THROWS_WITH(w.validate(), Catch::Matchers::ContainsSubstring("ctg increases"));
    }
}

TEST_CASE("parameter initialization") {
    const ModelConfig cfg = tiny_config(2);
    const PolicyParams p = PolicyParams::init(cfg, 2, 1, 42);

    SECTION("hand-counted parameter total") {
        // type 32; rtg/ctg projections 32; state 24; action 16; one block
        // 872 (= 2*16 layer norms + 288 attention + 552 mlp); final norm 16;
        // head 9; log_std 1.
        REQUIRE(p.parameter_count() == 1002);
    }

    SECTION("biases zero, gains one, log_std zero") {
        for (double v : p.b_state.value()) {
            REQUIRE(v == 0.0);
        }
        for (double v : p.blocks[0].ln1_g.value()) {
            REQUIRE(v == 1.0);
        }
        REQUIRE(p.log_std.value()[0] == 0.0);
    }

    SECTION("weights are small and seed-reproducible") {
        for (double v : p.w_head.value()) {
            REQUIRE(std::abs(v) < 0.2); // 10 sigma of the 0.02 init
        }
        const PolicyParams q = PolicyParams::init(cfg, 2, 1, 42);
        REQUIRE(q.type_embed.value() == p.type_embed.value());
        const PolicyParams r = PolicyParams::init(cfg, 2, 1, 43);
        REQUIRE(r.type_embed.value() != p.type_embed.value());
    }

    SECTION("every parameter has a unique name") {
        std::vector<std::string> names;
        for (const nn::Tensor& t : p.all()) {
            names.push_back(t.name());
        }
        std::sort(names.begin(), names.end());
        REQUIRE(std::adjacent_find(names.begin(), names.end()) == names.end());
    }
}

TEST_CASE("policy forward") {
    const AnnotatedTrajectory at = make_annotated(12);
    const ModelConfig cfg = tiny_config(4);
    PolicyParams p = PolicyParams::init(cfg, 2, 1, 7);
    p.norm = compute_norm_stats({at}, 6.0);

    SECTION("fresh init keeps action means small") {
        std::vector<TokenWindow> batch = {tokenize(at, 7, 4), tokenize(at, 1, 4)};
        nn::Tape tape;
        const ForwardResult fwd = policy_forward(tape, p, batch);
        REQUIRE(fwd.mu_last.shape() == std::vector<std::size_t>({2, 1}));
        REQUIRE(fwd.mu_all.shape() == std::vector<std::size_t>({8, 1}));
        for (double v : fwd.mu_last.value()) {
            REQUIRE(std::isfinite(v));
            REQUIRE(std::abs(v) < 1.0);
        }
        REQUIRE(fwd.log_std.value()[0] == 0.0);
    }

    SECTION("inference is deterministic") {
        std::vector<TokenWindow> batch = {tokenize(at, 9, 4)};
        nn::Tape t1, t2;
        const ForwardResult a = policy_forward(t1, p, batch);
        const ForwardResult b = policy_forward(t2, p, batch);
        REQUIRE(a.mu_last.value() == b.mu_last.value());
    }

    SECTION("future tokens cannot influence earlier action means") {
        const TokenWindow base = tokenize(at, 7, 4);
        nn::Tape t1;
        const std::vector<double> mu_base = policy_forward(t1, p, {base}).mu_all.value();

        // perturbing the action at slot 1 may only affect slots 2 and 3
        TokenWindow bumped = base;
        bumped.actions[1][0] += 0.5;
        nn::Tape t2;
        const std::vector<double> mu_bump = policy_forward(t2, p, {bumped}).mu_all.value();
        REQUIRE(mu_bump[0] == mu_base[0]);
        REQUIRE(mu_bump[1] == mu_base[1]);
        REQUIRE(mu_bump[2] != mu_base[2]);
        REQUIRE(mu_bump[3] != mu_base[3]);

        // perturbing the final rtg token may only affect the final slot
        TokenWindow rtg_bump = base;
        rtg_bump.rtg[3] += 1.0;
        nn::Tape t3;
        const std::vector<double> mu_rtg = policy_forward(t3, p, {rtg_bump}).mu_all.value();
        REQUIRE(mu_rtg[0] == mu_base[0]);
        REQUIRE(mu_rtg[1] == mu_base[1]);
        REQUIRE(mu_rtg[2] == mu_base[2]);
        REQUIRE(mu_rtg[3] != mu_base[3]);
    }

    SECTION("conditioning tokens matter") {
        const TokenWindow base = tokenize(at, 7, 4);
        TokenWindow other = base;
        other.ctg[3] *= 0.25;
        nn::Tape t1, t2;
        const double mu0 = policy_forward(t1, p, {base}).mu_last.value()[0];
        const double mu1 = policy_forward(t2, p, {other}).mu_last.value()[0];
        REQUIRE(mu0 != mu1);
    }

    SECTION("padded windows produce finite outputs") {
        std::vector<TokenWindow> batch = {tokenize(at, 0, 4), tokenize(at, 2, 4)};
        nn::Tape tape;
        const ForwardResult fwd = policy_forward(tape, p, batch);
        for (double v : fwd.mu_last.value()) {
            REQUIRE(std::isfinite(v));
        }
    }

    SECTION("window size must match the model") {
        std::vector<TokenWindow> batch = {tokenize(at, 7, 5)};
        nn::Tape tape;
        REQUIRE_THROWS_WITH(policy_forward(tape, p, batch),
                            Catch::Matchers::ContainsSubstring("window K"));
    }

    SECTION("state dim must match the model") {
        const AnnotatedTrajectory wide = make_annotated(8, 3, 1);
        std::vector<TokenWindow> batch = {tokenize(wide, 4, 4)};
        nn::Tape tape;
        REQUIRE_THROWS_AS(policy_forward(tape, p, batch), DomainError);
    }

    SECTION("non-finite parameters are diagnosed with a location") {
        PolicyParams bad = p;
        bad.blocks[0].w_mlp2.value()[3] = std::numeric_limits<double>::quiet_NaN();
        nn::Tape tape;
        REQUIRE_THROWS_WITH(policy_forward(tape, bad, {tokenize(at, 7, 4)}),
                            Catch::Matchers::ContainsSubstring("block 0"));
    }

    SECTION("K = 1 model works") {
        const ModelConfig c1 = tiny_config(1);
        PolicyParams p1 = PolicyParams::init(c1, 2, 1, 3);
        p1.norm = p.norm;
        nn::Tape tape;
        const ForwardResult fwd = policy_forward(tape, p1, {tokenize(at, 5, 1)});
        REQUIRE(fwd.mu_last.size() == 1);
        REQUIRE(std::isfinite(fwd.mu_last.value()[0]));
    }

    SECTION("dropout training path is seeded") {
        ModelConfig cd = tiny_config(4);
        cd.dropout = 0.2;
        PolicyParams pd = PolicyParams::init(cd, 2, 1, 7);
        pd.norm = p.norm;
        std::vector<TokenWindow> batch = {tokenize(at, 7, 4)};
        auto run = [&](std::uint64_t seed) {
            Rng rng(seed);
            nn::Tape tape;
            return policy_forward(tape, pd, batch, true, &rng).mu_last.value();
        };
        REQUIRE(run(5) == run(5));
        REQUIRE(run(5) != run(6));
        nn::Tape tape;
        REQUIRE_THROWS_WITH(policy_forward(tape, pd, batch, true, nullptr),
                            Catch::Matchers::ContainsSubstring("requires an rng"));
    }
}

TEST_CASE("gaussian nll") {
    const AnnotatedTrajectory at = make_annotated(12, 2, 2);
    const ModelConfig cfg = tiny_config(3);
    PolicyParams p = PolicyParams::init(cfg, 2, 2, 11);
    p.norm = compute_norm_stats({at}, 6.0);
    const std::vector<TokenWindow> batch = {tokenize(at, 5, 3), tokenize(at, 8, 3)};

    SECTION("target equal to the mean with unit sigma gives the entropy floor") {
        nn::Tape probe;
        const ForwardResult fwd = policy_forward(probe, p, batch);
        std::vector<std::vector<double>> targets = {
            {fwd.mu_last.value()[0], fwd.mu_last.value()[1]},
            {fwd.mu_last.value()[2], fwd.mu_last.value()[3]}};
        nn::Tape tape;
        const nn::Tensor loss = policy_nll(tape, p, batch, targets);
        REQUIRE(loss.value()[0] == Catch::Approx(kHalfLog2Pi * 2.0).epsilon(1e-14));
    }

    SECTION("matches a direct evaluation of the density") {
        const std::vector<std::vector<double>> targets = {{0.3, -0.2}, {-0.1, 0.4}};
        nn::Tape probe;
        const ForwardResult fwd = policy_forward(probe, p, batch);
        double expected = 0.0;
        for (std::size_t b = 0; b < 2; ++b) {
            for (std::size_t j = 0; j < 2; ++j) {
                const double mu = fwd.mu_last.value()[b * 2 + j];
                const double s = fwd.log_std.value()[j];
                const double z = targets[b][j] - mu;
                expected += kHalfLog2Pi + s + 0.5 * z * z * std::exp(-2.0 * s);
            }
        }
        expected /= 2.0;
        nn::Tape tape;
        const nn::Tensor loss = policy_nll(tape, p, batch, targets);
        REQUIRE(loss.value()[0] == Catch::Approx(expected).epsilon(1e-12));
    }

    SECTION("batch order does not change the loss") {
        const std::vector<std::vector<double>> targets = {{0.3, -0.2}, {-0.1, 0.4}};
        nn::Tape t1, t2;
        const double a = policy_nll(t1, p, batch, targets).value()[0];
        const std::vector<TokenWindow> swapped = {batch[1], batch[0]};
        const std::vector<std::vector<double>> tswap = {targets[1], targets[0]};
        const double b = policy_nll(t2, p, swapped, tswap).value()[0];
        REQUIRE(a == Catch::Approx(b).margin(1e-12));
    }

    SECTION("target count must match the batch") {
        nn::Tape tape;
        REQUIRE_THROWS_AS(policy_nll(tape, p, batch, {{0.1, 0.2}}), DomainError);
    }

    SECTION("gradients match finite differences across the whole model") {
        const ModelConfig small = tiny_config(2);
        PolicyParams sp = PolicyParams::init(small, 2, 1, 99);
        sp.norm = compute_norm_stats({at}, 6.0);
        const std::vector<TokenWindow> wins = {tokenize(make_annotated(6), 3, 2),
                                               tokenize(make_annotated(6), 1, 2)};
        const std::vector<std::vector<double>> targets = {{0.25}, {-0.4}};
        auto loss_fn = [&](nn::Tape& tape) { return policy_nll(tape, sp, wins, targets); };
        const nn::GradCheckReport rep = nn::gradient_check(loss_fn, sp.all(), 1e-5, 1e-4);
        INFO("max rel error " << rep.max_rel_error << " over " << rep.coords_checked
                              << " coordinates");
        for (const nn::GradCheckIssue& f : rep.failures) {
            INFO(f.param << "[" << f.coord << "] analytic " << f.analytic << " fd " << f.fd);
        }
        REQUIRE(rep.passed);
    }
}

TEST_CASE("action sampling") {
    const AnnotatedTrajectory at = make_annotated(12);
    const ModelConfig cfg = tiny_config(4);
    PolicyParams p = PolicyParams::init(cfg, 2, 1, 21);
    p.norm = compute_norm_stats({at}, 6.0);
    const TokenWindow w = tokenize(at, 7, 4);
    const std::vector<double> lo = {-1.0};
    const std::vector<double> hi = {1.0};

    SECTION("mean mode returns the clamped mean") {
        nn::Tape tape;
        const double mu = policy_forward(tape, p, {w}).mu_last.value()[0];
        Rng rng(1);
        const std::vector<double> a = sample_action(p, w, ActionMode::mean, rng, lo, hi);
        REQUIRE(a[0] == std::clamp(mu, -1.0, 1.0));

        const std::vector<double> tight_lo = {mu + 0.5};
        const std::vector<double> tight_hi = {mu + 0.6};
        const std::vector<double> clamped =
            sample_action(p, w, ActionMode::mean, rng, tight_lo, tight_hi);
        REQUIRE(clamped[0] == tight_lo[0]);
    }

    SECTION("sample mode is seed-deterministic and respects bounds") {
        Rng r1(77), r2(77), r3(78);
        const auto a = sample_action(p, w, ActionMode::sample, r1, lo, hi);
        const auto b = sample_action(p, w, ActionMode::sample, r2, lo, hi);
        const auto c = sample_action(p, w, ActionMode::sample, r3, lo, hi);
        REQUIRE(a == b);
        REQUIRE(a != c);
        for (int i = 0; i < 50; ++i) {
            const auto s = sample_action(p, w, ActionMode::sample, r1, lo, hi);
            REQUIRE(s[0] >= -1.0);
            REQUIRE(s[0] <= 1.0);
        }
    }

    SECTION("mode parsing") {
        REQUIRE(action_mode_from_string("mean") == ActionMode::mean);
        REQUIRE(action_mode_from_string("sample") == ActionMode::sample);
        REQUIRE_THROWS_AS(action_mode_from_string("greedy"), DomainError);
    }
}

TEST_CASE("checkpoint round trip") {
    const AnnotatedTrajectory at = make_annotated(10);
    const ModelConfig cfg = tiny_config(3);
    PolicyParams p = PolicyParams::init(cfg, 2, 1, 5);
    p.norm = compute_norm_stats({at}, 4.0);

    TempFile tmp("b2r-ckpt-test");

    SECTION("weights, config, and stats survive, forward is bitwise stable") {
        save_checkpoint(tmp.path, p, "velocity");
        const LoadedCheckpoint lc = load_checkpoint(tmp.path);
        REQUIRE(lc.env_id == "velocity");
        REQUIRE(lc.params.config.hidden_dim == cfg.hidden_dim);
        REQUIRE(lc.params.config.context_k == cfg.context_k);
        REQUIRE(lc.params.state_dim == 2);
        REQUIRE(lc.params.action_dim == 1);
        REQUIRE(lc.params.norm.state_mean == p.norm.state_mean);
        REQUIRE(lc.params.norm.ctg_scale == p.norm.ctg_scale);

        const std::vector<nn::Tensor> orig = p.all();
        const std::vector<nn::Tensor> back = lc.params.all();
        REQUIRE(orig.size() == back.size());
        for (std::size_t i = 0; i < orig.size(); ++i) {
            REQUIRE(back[i].name() == orig[i].name());
            REQUIRE(back[i].value() == orig[i].value());
        }

        const TokenWindow w = tokenize(at, 6, 3);
        nn::Tape t1, t2;
        REQUIRE(policy_forward(t1, p, {w}).mu_last.value() ==
                policy_forward(t2, lc.params, {w}).mu_last.value());
    }

    SECTION("missing sidecar is reported") {
        save_checkpoint(tmp.path, p);
        std::filesystem::remove(checkpoint_sidecar_path(tmp.path));
        REQUIRE_THROWS_WITH(load_checkpoint(tmp.path),
                            Catch::Matchers::ContainsSubstring("sidecar"));
    }

    SECTION("header version mismatch is reported") {
        save_checkpoint(tmp.path, p);
        std::fstream f(tmp.path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(0);
        f.write("b2r-ckpt-0", 10); // same length, different version
        f.close();
        REQUIRE_THROWS_WITH(load_checkpoint(tmp.path),
                            Catch::Matchers::ContainsSubstring("header"));
    }

    SECTION("truncated tensor data is reported") {
        save_checkpoint(tmp.path, p);
        const auto size = std::filesystem::file_size(tmp.path);
        std::filesystem::resize_file(tmp.path, size - 16);
        REQUIRE_THROWS_WITH(load_checkpoint(tmp.path),
                            Catch::Matchers::ContainsSubstring("truncated"));
    }

    SECTION("sidecar architecture must match the tensor file") {
        save_checkpoint(tmp.path, p);
        const std::string side_path = checkpoint_sidecar_path(tmp.path);
        std::ifstream in(side_path);
        nlohmann::json side = nlohmann::json::parse(in);
        in.close();
        side["model"]["n_layers"] = 2;
        std::ofstream out(side_path, std::ios::trunc);
        out << side.dump(2);
        out.close();
        REQUIRE_THROWS_AS(load_checkpoint(tmp.path), DomainError);
    }
}

TEST_CASE("norm stats") {
    SECTION("velocity-style dataset statistics") {
        const AnnotatedTrajectory a = make_annotated(6);
        const AnnotatedTrajectory b = make_annotated(9);
        const NormStats ns = compute_norm_stats({a, b}, 5.0);
        REQUIRE(ns.state_mean.size() == 2);
        REQUIRE(ns.ctg_scale == 5.0);
        REQUIRE(ns.state_std[0] > 0.0);
        REQUIRE(ns.rtg_std > 0.0);

        // hand-check the mean of state coordinate 0: 0.5 * t over both trajectories
        double sum = 0.0;
        for (std::size_t t = 0; t < 6; ++t) {
            sum += 0.5 * static_cast<double>(t);
        }
        for (std::size_t t = 0; t < 9; ++t) {
            sum += 0.5 * static_cast<double>(t);
        }
        REQUIRE(ns.state_mean[0] == Catch::Approx(sum / 15.0).epsilon(1e-12));
    }

    SECTION("zero kappa falls back to the ctg magnitude") {
        const AnnotatedTrajectory a = make_annotated(6);
        const NormStats ns = compute_norm_stats({a}, 0.0);
        REQUIRE(ns.ctg_scale == std::max(1.0, std::abs(a.ctg[0])));
    }

    SECTION("constant state coordinate gets a floored std") {
        std::vector<Transition> steps(4);
        for (std::size_t t = 0; t < 4; ++t) {
            steps[t].state = {3.0};
            steps[t].action = {0.0};
            steps[t].reward = 1.0;
            steps[t].cost = 0.0;
        }
        const AnnotatedTrajectory at = annotate(Trajectory(std::move(steps)));
        const NormStats ns = compute_norm_stats({at}, 1.0);
        REQUIRE(ns.state_std[0] == 1e-6);
    }
}
