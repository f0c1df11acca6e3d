// End-to-end tests of the command-line binary: every subcommand is exercised
// through an actual subprocess so flag parsing, exit codes, artifact formats,
// and determinism are checked exactly as a user sees them.

#include <catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "b2r/cmdp.hpp"
#include "b2r/dataset.hpp"
#include "b2r/serialize.hpp"

using namespace b2r;

namespace {

#ifndef B2R_CLI_PATH
#define B2R_CLI_PATH "b2r"
#endif

const char* cli_path() {
    if (const char* env = std::getenv("B2R_CLI_BIN")) {
        return env;
    }
    return B2R_CLI_PATH;
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

struct CmdResult {
    int code = -1;
    std::string out;
    std::string err;
};

// Runs `b2r <args>` through the shell, capturing exit code and both streams.
// env_prefix lets tests set environment variables, e.g. "B2R_SEED=42 ".
CmdResult run_cli(const std::string& args, const std::string& env_prefix = "") {
    static int counter = 0;
    const std::string base = "/tmp/b2r_cli_io_" + std::to_string(::getpid()) + "_" +
                             std::to_string(counter++);
    const std::string out_path = base + ".out";
    const std::string err_path = base + ".err";
    const std::string cmd = env_prefix + std::string(cli_path()) + " " + args + " > " + out_path +
                            " 2> " + err_path;
    const int rc = std::system(cmd.c_str());
    CmdResult r;
    r.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = slurp(out_path);
    r.err = slurp(err_path);
    std::filesystem::remove(out_path);
    std::filesystem::remove(err_path);
    return r;
}

struct TempDir {
    std::string path;
    TempDir() {
        std::string tmpl = "/tmp/b2r_cli_XXXXXX";
        char* p = ::mkdtemp(tmpl.data());
        REQUIRE(p != nullptr);
        path = p;
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return path + "/" + name; }
};

AnnotatedTrajectory fixture_traj(const std::vector<double>& rewards,
                                 const std::vector<double>& costs) {
    std::vector<Transition> steps;
    for (std::size_t t = 0; t < rewards.size(); ++t) {
        steps.push_back(Transition{{static_cast<double>(t)}, {0.1}, rewards[t], costs[t]});
    }
    return annotate(Trajectory(std::move(steps)));
}

// Three trajectories with (return, cost) = (10, 4), (8, 5), (12, 7).
void write_fixture(const std::string& path) {
    std::vector<AnnotatedTrajectory> ds;
    ds.push_back(fixture_traj({4, 3, 3}, {1, 1, 2}));
    ds.push_back(fixture_traj({3, 3, 2}, {2, 2, 1}));
    ds.push_back(fixture_traj({5, 4, 3}, {3, 3, 1}));
    DatasetManifest m;
    m.env_id = "fixture";
    m.total = m.kept = 3;
    save_dataset(path, ds, m);
}

} // namespace

TEST_CASE("help lists every flag of every subcommand") {
    const std::map<std::string, std::vector<std::string>> expected = {
        {"gen-data", {"--config", "--env", "--out", "--n", "--horizon", "--seed"}},
        {"filter", {"--config", "--in", "--out", "--kappa"}},
        {"realign",
         {"--config", "--in", "--out", "--strategy", "--kappa", "--rand-mode", "--seed"}},
        {"train",
         {"--config", "--data", "--out", "--loss-csv", "--env", "--kappa", "--hidden", "--heads",
          "--layers", "--context", "--dropout", "--mlp-ratio", "--rope-base", "--lr", "--batch",
          "--grad-clip", "--steps-per-epoch", "--epochs", "--weight-decay", "--seed"}},
        {"train-boundary",
         {"--config", "--data", "--out", "--loss-csv", "--env", "--kappa", "--eps", "--hidden",
          "--heads", "--layers", "--context", "--dropout", "--mlp-ratio", "--rope-base", "--lr",
          "--batch", "--grad-clip", "--steps-per-epoch", "--epochs", "--weight-decay",
          "--seed"}},
        {"rollout",
         {"--config", "--checkpoint", "--env", "--kappa", "--target-return", "--data",
          "--horizon", "--mode", "--out", "--seed"}},
        {"eval",
         {"--config", "--checkpoint", "--env", "--kappa", "--target-return", "--data",
          "--episodes", "--seeds", "--mode", "--label", "--out", "--episodes-csv"}},
        {"verify-theorem1",
         {"--config", "--sigma", "--delta", "--c-max", "--horizon", "--kappa", "--trials",
          "--out", "--seed"}},
        {"verify-theorem2", {"--config", "--data", "--kappa", "--eps", "--out"}},
        {"report", {"--config", "--out"}},
    };

    const CmdResult top = run_cli("--help");
    REQUIRE(top.code == 0);
    for (const auto& [sub, flags] : expected) {
        INFO("subcommand " << sub);
        REQUIRE(top.out.find(sub) != std::string::npos);
        const CmdResult r = run_cli(sub + " --help");
        REQUIRE(r.code == 0);
        REQUIRE(r.out.find("--help") != std::string::npos);
        for (const std::string& flag : flags) {
            INFO("flag " << flag);
            REQUIRE(r.out.find(flag) != std::string::npos);
        }
    }
    // report also documents its positional inputs
    REQUIRE(run_cli("report --help").out.find("inputs") != std::string::npos);
}

TEST_CASE("usage errors exit with code 2") {
    REQUIRE(run_cli("").code == 2);                           // no subcommand
    REQUIRE(run_cli("frobnicate").code == 2);                 // unknown subcommand
    const CmdResult unknown = run_cli("filter --bogus-flag 1");
    REQUIRE(unknown.code == 2); // unknown flag named in the message
    REQUIRE(unknown.err.find("bogus-flag") != std::string::npos);
    const CmdResult missing = run_cli("filter --in /tmp/x --out /tmp/y");
    REQUIRE(missing.code == 2); // missing required --kappa
    REQUIRE(missing.err.find("kappa") != std::string::npos);
}

TEST_CASE("filter keeps the under-budget trajectories of the fixture") {
    TempDir dir;
    const std::string raw = dir.file("raw.jsonl");
    write_fixture(raw);

    SECTION("kappa 5 keeps costs 4 and 5, drops 7") {
        const CmdResult r =
            run_cli("filter --in " + raw + " --out " + dir.file("safe.jsonl") + " --kappa 5");
        REQUIRE(r.code == 0);
        const LoadedDataset out = load_dataset(dir.file("safe.jsonl"));
        REQUIRE(out.manifest.total == 3);
        REQUIRE(out.manifest.kept == 2);
        REQUIRE(out.manifest.dropped == 1);
        REQUIRE(out.dataset.size() == 2);
        REQUIRE(out.dataset[0].total_cost == 4.0);
        REQUIRE(out.dataset[1].total_cost == 5.0);
        REQUIRE(out.manifest.kappa.has_value());
        REQUIRE(*out.manifest.kappa == 5.0);
    }

    SECTION("an empty result is a warning, not an error") {
        const CmdResult r =
            run_cli("filter --in " + raw + " --out " + dir.file("none.jsonl") + " --kappa 1");
        REQUIRE(r.code == 0);
        REQUIRE(r.out.find("warning") != std::string::npos);
        const LoadedDataset out = load_dataset(dir.file("none.jsonl"));
        REQUIRE(out.dataset.empty());
        REQUIRE(out.manifest.empty_warning);
    }
}

TEST_CASE("realign then filter is idempotent on the records") {
    TempDir dir;
    write_fixture(dir.file("raw.jsonl"));
    REQUIRE(run_cli("filter --in " + dir.file("raw.jsonl") + " --out " + dir.file("safe.jsonl") +
                    " --kappa 5")
                .code == 0);
    REQUIRE(run_cli("realign --in " + dir.file("safe.jsonl") + " --out " +
                    dir.file("realigned.jsonl") + " --strategy shift --kappa 5")
                .code == 0);
    // realignment rewrites CTG tokens, not costs, so a second filter keeps all
    REQUIRE(run_cli("filter --in " + dir.file("realigned.jsonl") + " --out " +
                    dir.file("refiltered.jsonl") + " --kappa 5")
                .code == 0);
    const LoadedDataset again = load_dataset(dir.file("refiltered.jsonl"));
    REQUIRE(again.manifest.kept == 2);
    REQUIRE(again.manifest.dropped == 0);
    REQUIRE(slurp(dir.file("refiltered.jsonl")) == slurp(dir.file("realigned.jsonl")));
    for (const AnnotatedTrajectory& at : again.dataset) {
        REQUIRE(at.ctg[0] == Catch::Approx(5.0).margin(1e-9));
    }
}

TEST_CASE("domain errors exit with code 1 and a specific message") {
    TempDir dir;

    SECTION("missing input file") {
        const CmdResult r =
            run_cli("filter --in " + dir.file("nope.jsonl") + " --out /tmp/x --kappa 1");
        REQUIRE(r.code == 1);
        REQUIRE(r.err.find("missing manifest") != std::string::npos);
    }

    SECTION("dataset format version mismatch") {
        write_fixture(dir.file("raw.jsonl"));
        std::string manifest = slurp(dir.file("raw.jsonl") + ".manifest.json");
        const std::size_t at = manifest.find("b2r-ds-1");
        REQUIRE(at != std::string::npos);
        manifest.replace(at, 8, "b2r-ds-9");
        std::ofstream(dir.file("raw.jsonl") + ".manifest.json", std::ios::binary) << manifest;
        const CmdResult r =
            run_cli("filter --in " + dir.file("raw.jsonl") + " --out /tmp/x --kappa 1");
        REQUIRE(r.code == 1);
        REQUIRE(r.err.find("format version") != std::string::npos);
    }

    SECTION("realigning an unfiltered dataset") {
        write_fixture(dir.file("raw.jsonl"));
        const CmdResult r = run_cli("realign --in " + dir.file("raw.jsonl") +
                                    " --out /tmp/x --strategy shift --kappa 5");
        REQUIRE(r.code == 1);
        REQUIRE(r.err.find("filtering must run first") != std::string::npos);
    }

    SECTION("scale realignment rejects zero-cost trajectories") {
        std::vector<AnnotatedTrajectory> ds;
        ds.push_back(fixture_traj({1, 1}, {0, 0}));
        DatasetManifest m;
        m.env_id = "fixture";
        m.total = m.kept = 1;
        save_dataset(dir.file("zero.jsonl"), ds, m);
        const CmdResult r = run_cli("realign --in " + dir.file("zero.jsonl") +
                                    " --out /tmp/x --strategy scale --kappa 5");
        REQUIRE(r.code == 1);
        REQUIRE(r.err.find("inapplicable") != std::string::npos);
    }
}

TEST_CASE("config file fills defaults and flags override it") {
    TempDir dir;
    write_fixture(dir.file("raw.jsonl"));
    const std::string cfg = dir.file("cfg.json");
    std::ofstream(cfg, std::ios::binary)
        << nlohmann::json{{"in", dir.file("raw.jsonl")},
                          {"out", dir.file("safe.jsonl")},
                          {"kappa", 5.0}}
               .dump();

    SECTION("config alone satisfies required flags") {
        REQUIRE(run_cli("filter --config " + cfg).code == 0);
        REQUIRE(load_dataset(dir.file("safe.jsonl")).manifest.kept == 2);
    }

    SECTION("explicit flag beats the config value") {
        REQUIRE(run_cli("filter --config " + cfg + " --kappa 4").code == 0);
        REQUIRE(load_dataset(dir.file("safe.jsonl")).manifest.kept == 1);
    }

    SECTION("unknown config keys are rejected") {
        const std::string bad = dir.file("bad.json");
        std::ofstream(bad, std::ios::binary) << R"({"in": "x", "owt": "y", "kappa": 1})";
        const CmdResult r = run_cli("filter --config " + bad);
        REQUIRE(r.code == 1);
        REQUIRE(r.err.find("unknown key 'owt'") != std::string::npos);
    }

    SECTION("malformed config JSON is rejected") {
        const std::string bad = dir.file("broken.json");
        std::ofstream(bad, std::ios::binary) << "{not json";
        const CmdResult r = run_cli("filter --config " + bad);
        REQUIRE(r.code == 1);
        REQUIRE(r.err.find("malformed") != std::string::npos);
    }
}

TEST_CASE("B2R_SEED supplies the seed when no flag or config sets it") {
    TempDir dir;
    const std::string base = "gen-data --env chain --n 3 --out ";

    REQUIRE(run_cli(base + dir.file("a.jsonl"), "B2R_SEED=42 ").code == 0);
    REQUIRE(run_cli(base + dir.file("b.jsonl"), "B2R_SEED=42 ").code == 0);
    REQUIRE(slurp(dir.file("a.jsonl")) == slurp(dir.file("b.jsonl")));
    REQUIRE(load_dataset(dir.file("a.jsonl")).manifest.seed == 42);

    // an explicit flag wins over the environment
    REQUIRE(run_cli(base + dir.file("c.jsonl") + " --seed 7", "B2R_SEED=42 ").code == 0);
    REQUIRE(load_dataset(dir.file("c.jsonl")).manifest.seed == 7);
    REQUIRE(slurp(dir.file("c.jsonl")) != slurp(dir.file("a.jsonl")));

    const CmdResult bad = run_cli(base + dir.file("d.jsonl"), "B2R_SEED=oops ");
    REQUIRE(bad.code == 1);
    REQUIRE(bad.err.find("B2R_SEED") != std::string::npos);
}

TEST_CASE("generated datasets are deterministic per seed") {
    TempDir dir;
    // full horizon: short episodes never leave the initial full-throttle ramp,
    // where every target produces the same saturated action sequence
    REQUIRE(run_cli("gen-data --env velocity --n 6 --seed 3 --out " + dir.file("a.jsonl"))
                .code == 0);
    REQUIRE(run_cli("gen-data --env velocity --n 6 --seed 3 --out " + dir.file("b.jsonl"))
                .code == 0);
    REQUIRE(run_cli("gen-data --env velocity --n 6 --seed 4 --out " + dir.file("c.jsonl"))
                .code == 0);
    REQUIRE(slurp(dir.file("a.jsonl")) == slurp(dir.file("b.jsonl")));
    REQUIRE(slurp(dir.file("a.jsonl")) != slurp(dir.file("c.jsonl")));

    const LoadedDataset a = load_dataset(dir.file("a.jsonl"));
    REQUIRE(a.dataset.size() == 6);
    for (const AnnotatedTrajectory& at : a.dataset) {
        REQUIRE(at.horizon() == 200);
        REQUIRE(at.traj.state_dim() == 1);
    }

    // --horizon caps the episode length
    REQUIRE(run_cli("gen-data --env velocity --n 2 --seed 3 --horizon 50 --out " +
                    dir.file("short.jsonl"))
                .code == 0);
    REQUIRE(load_dataset(dir.file("short.jsonl")).dataset.front().horizon() == 50);
}

TEST_CASE("full pipeline on the chain env produces consistent artifacts") {
    TempDir dir;
    const std::string model_flags =
        " --hidden 8 --heads 2 --layers 1 --context 2 --dropout 0.0"
        " --batch 4 --steps-per-epoch 8 --epochs 1 --lr 1e-3";

    REQUIRE(run_cli("gen-data --env chain --n 30 --seed 11 --out " + dir.file("raw.jsonl"))
                .code == 0);
    REQUIRE(run_cli("filter --in " + dir.file("raw.jsonl") + " --out " + dir.file("safe.jsonl") +
                    " --kappa 6")
                .code == 0);
    const LoadedDataset safe = load_dataset(dir.file("safe.jsonl"));
    REQUIRE(!safe.dataset.empty());

    REQUIRE(run_cli("realign --in " + dir.file("safe.jsonl") + " --out " + dir.file("re.jsonl") +
                    " --strategy shift --kappa 6")
                .code == 0);
    REQUIRE(run_cli("train --data " + dir.file("re.jsonl") + " --out " + dir.file("p.ckpt") +
                    " --loss-csv " + dir.file("loss.csv") + model_flags + " --seed 5")
                .code == 0);
    REQUIRE(std::filesystem::exists(dir.file("p.ckpt")));
    REQUIRE(std::filesystem::exists(dir.file("p.ckpt.json")));
    {
        std::ifstream is(dir.file("loss.csv"));
        std::string header;
        REQUIRE(std::getline(is, header));
        REQUIRE(header == "step,loss");
    }
    // the checkpoint remembers the env it was trained for
    const nlohmann::json sidecar = nlohmann::json::parse(slurp(dir.file("p.ckpt.json")));
    REQUIRE(sidecar.at("env_id").get<std::string>() == "chain");

    SECTION("rollout writes the budget streams") {
        const CmdResult r = run_cli("rollout --checkpoint " + dir.file("p.ckpt") +
                                    " --kappa 6 --data " + dir.file("safe.jsonl") +
                                    " --mode mean --out " + dir.file("roll.json"));
        REQUIRE(r.code == 0);
        const nlohmann::json j = nlohmann::json::parse(slurp(dir.file("roll.json")));
        REQUIRE(j.at("env").get<std::string>() == "chain");
        const auto ctg = j.at("ctg_stream").get<std::vector<double>>();
        REQUIRE(ctg.size() == j.at("length").get<std::size_t>() + 1);
        REQUIRE(ctg.front() == 6.0);
        REQUIRE(j.at("total_cost").get<double>() ==
                Catch::Approx(6.0 - ctg.back()).margin(1e-12));
    }

    SECTION("eval summary carries the report fields and is deterministic") {
        const std::string eval_cmd = "eval --checkpoint " + dir.file("p.ckpt") +
                                     " --kappa 6 --data " + dir.file("safe.jsonl") +
                                     " --episodes 2 --seeds 0,1 --mode sample --label b2r" +
                                     " --out ";
        REQUIRE(run_cli(eval_cmd + dir.file("eval_a.json")).code == 0);
        REQUIRE(run_cli(eval_cmd + dir.file("eval_b.json")).code == 0);
        REQUIRE(slurp(dir.file("eval_a.json")) == slurp(dir.file("eval_b.json")));

        const nlohmann::json j = nlohmann::json::parse(slurp(dir.file("eval_a.json")));
        REQUIRE(j.at("task").get<std::string>() == "chain");
        REQUIRE(j.at("method").get<std::string>() == "b2r");
        REQUIRE(j.contains("violation_rate"));
        REQUIRE(j.contains("normalized_reward"));
        REQUIRE(j.contains("normalized_cost"));
        REQUIRE(j.at("n_episodes").get<std::size_t>() == 4);

        // aggregate into the results table
        const CmdResult rep = run_cli("report " + dir.file("eval_a.json") + " " +
                                      dir.file("eval_b.json") + " --out " + dir.file("res.csv"));
        REQUIRE(rep.code == 0);
        std::istringstream csv(slurp(dir.file("res.csv")));
        std::string line;
        REQUIRE(std::getline(csv, line));
        REQUIRE(line == "task,method,reward,cost,safe");
        REQUIRE(std::getline(csv, line));
        REQUIRE(line.rfind("chain,b2r,", 0) == 0);
        const char safe_flag = j.at("safe").get<bool>() ? '1' : '0';
        REQUIRE(line.back() == safe_flag);
        REQUIRE(std::getline(csv, line)); // second row present
        REQUIRE(!std::getline(csv, line)); // and nothing else
    }

    SECTION("report rejects files missing the table fields") {
        std::ofstream(dir.file("bogus.json"), std::ios::binary) << R"({"task": "chain"})";
        const CmdResult r =
            run_cli("report " + dir.file("bogus.json") + " --out " + dir.file("x.csv"));
        REQUIRE(r.code == 1);
        REQUIRE(r.err.find("missing field") != std::string::npos);
    }
}

TEST_CASE("theorem verification subcommands") {
    TempDir dir;

    SECTION("theorem 1 simulation reports both clauses") {
        const CmdResult r = run_cli(
            "verify-theorem1 --sigma 0.01 --delta 2 --c-max 1 --horizon 100 --kappa 10"
            " --trials 2000 --seed 3 --out " +
            dir.file("thm1.json"));
        REQUIRE(r.code == 0);
        REQUIRE(r.out.find("both clauses hold") != std::string::npos);
        const nlohmann::json j = nlohmann::json::parse(slurp(dir.file("thm1.json")));
        REQUIRE(j.contains("clauses"));
        REQUIRE(j.at("clauses").at("probability").get<bool>());
        REQUIRE(j.at("clauses").at("expected_cost").get<bool>());
    }

    SECTION("theorem 1 rejects configs breaking the accuracy assumption") {
        const CmdResult r =
            run_cli("verify-theorem1 --sigma 0.5 --delta 2 --horizon 100 --kappa 10");
        REQUIRE(r.code == 1);
        REQUIRE(r.err.find("sigma*H") != std::string::npos);
    }

    SECTION("theorem 2 on the fixture reproduces the hand-computed maxima") {
        write_fixture(dir.file("raw.jsonl"));
        const CmdResult r = run_cli("verify-theorem2 --data " + dir.file("raw.jsonl") +
                                    " --kappa 5 --eps 0.5 --out " + dir.file("thm2.json"));
        REQUIRE(r.code == 0);
        REQUIRE(r.out.find("holds") != std::string::npos);
        const nlohmann::json j = nlohmann::json::parse(slurp(dir.file("thm2.json")));
        REQUIRE(j.at("r_max_region").get<double>() == 10.0);
        REQUIRE(j.at("r_max_boundary").get<double>() == 8.0);
        REQUIRE(j.at("holds").get<bool>());
    }
}
