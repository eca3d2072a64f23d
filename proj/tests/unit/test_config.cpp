#include "pg/config.hpp"
#include "pg/error.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

using namespace pg;

TEST_CASE("key = value parsing with comments and blank lines", "[config]") {
    const KeyValues kv = parse_key_values("# run settings\n\nseed = 7\n  router.k=1   # inline\nexpert.lr = 0.002\n");
    CHECK(kv.size() == 3);
    CHECK(kv.at("seed") == "7");
    CHECK(kv.at("router.k") == "1");
    CHECK(kv.at("expert.lr") == "0.002");
    CHECK_THROWS_AS(parse_key_values("seed 7\n"), ConfigError);
    CHECK_THROWS_AS(parse_key_values(" = 7\n"), ConfigError);
}

TEST_CASE("applying keys sets fields and reseeds", "[config]") {
    RunConfig cfg;
    apply_config(cfg, {{"seed", "9"}, {"router.k", "1"}, {"expert.lr", "0.002"}, {"run.joint", "false"},
                       {"eval.norm", "sum"}, {"suite.train_size", "50"}});
    CHECK(cfg.seed == 9);
    CHECK(cfg.suite.seed == 9);
    CHECK(cfg.backbone.seed == 9);
    CHECK(cfg.k == 1);
    CHECK(cfg.expert.adamw.lr == 0.002);
    CHECK_FALSE(cfg.joint);
    CHECK(cfg.norm == ScoreNorm::sum);
    CHECK(cfg.suite.train_size == 50);
}

TEST_CASE("bad keys and values are rejected", "[config][errors]") {
    RunConfig cfg;
    CHECK_THROWS_AS(apply_config(cfg, {{"router.kk", "1"}}), ConfigError);
    CHECK_THROWS_AS(apply_config(cfg, {{"router.k", "two"}}), ConfigError);
    CHECK_THROWS_AS(apply_config(cfg, {{"router.k", "2x"}}), ConfigError);
    CHECK_THROWS_AS(apply_config(cfg, {{"expert.lr", "fast"}}), ConfigError);
    CHECK_THROWS_AS(apply_config(cfg, {{"run.joint", "maybe"}}), ConfigError);
    CHECK_THROWS_AS(read_config_file("/nonexistent/pg.cfg"), ConfigError);
}

TEST_CASE("later sources win over earlier ones", "[config]") {
    const auto path = std::filesystem::temp_directory_path() / "pg_test_precedence.cfg";
    {
        std::ofstream os(path);
        os << "seed = 4\nrouter.k = 1\nexpert.steps = 10\n";
    }
    RunConfig cfg;
    KeyValues kv = read_config_file(path);
    kv["router.k"] = "3";  // a command-line override
    apply_config(cfg, kv);
    CHECK(cfg.seed == 4);
    CHECK(cfg.k == 3);
    CHECK(cfg.expert.steps == 10);
    CHECK(cfg.expert.gate_steps == RunConfig{}.expert.gate_steps);
    std::filesystem::remove(path);
}

TEST_CASE("the snapshot round-trips through the parser", "[config]") {
    RunConfig cfg;
    apply_config(cfg, {{"seed", "3"}, {"expert.warmup_ratio", "0.1"}, {"backbone.d_model", "32"}});
    const KeyValues snap = config_snapshot(cfg);
    CHECK(snap.at("expert.warmup_ratio") == "0.10000000000000001");
    RunConfig back;
    apply_config(back, parse_key_values(format_key_values(snap)));
    CHECK(config_snapshot(back) == snap);
}
