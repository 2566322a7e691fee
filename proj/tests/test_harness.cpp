#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mmlora/checkpoint.hpp"
#include "mmlora/harness.hpp"

using namespace mmlora;
using harness::json;
using harness::MetricRow;
using harness::RunReport;

namespace {

namespace fs = std::filesystem;

struct TmpDir {
    fs::path dir;
    TmpDir() {
        dir = fs::temp_directory_path() / ("mmlora_harness_" + std::to_string(::getpid()) + "_" +
                                           std::to_string(counter()++));
        fs::create_directories(dir);
    }
    ~TmpDir() { fs::remove_all(dir); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

// a config small enough for sub-second pipelines
json tiny_config(const std::string& out_dir) {
    json c;
    c["name"] = "tiny";
    c["data"] = {{"preset", "laziness"}, {"classes", 4}, {"dim", 12},   {"n_train", 120},
                 {"n_val", 40},          {"n_test", 80}, {"seed", 21},
                 {"unique_strength", json::array({1.2, 0.5})}};
    c["model"] = json::array({{{"kind", "mlp"}, {"hidden", 12}}, {{"kind", "mlp"}, {"hidden", 12}}});
    c["pipelines"] = json::array({"umft", "late_fusion", "ume", "mmlora", "joint_full_ft",
                                  "linear_eval_suite"});
    c["mmlora"] = {{"rank", 1}, {"selection", json::array({1, 2})}, {"placement", "encoder_only"}};
    c["optimizer"] = {{"default", {{"epochs", 3}, {"batch_size", 32}}}};
    c["seeds"] = json::array({1, 2});
    c["output_dir"] = out_dir;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

const MetricRow& find_row(const RunReport& r, const std::string& pipeline, const std::string& seed,
                          const std::string& metric) {
    for (const MetricRow& row : r.rows) {
        if (row.pipeline == pipeline && row.seed == seed && row.metric == metric) return row;
    }
    FAIL("missing row ", pipeline, "/", seed, "/", metric);
    static MetricRow dummy;
    return dummy;
}

}  // namespace

TEST_CASE("config validation names the failing field") {
    TmpDir tmp;
    json c = tiny_config((tmp.dir / "out").string());
    SUBCASE("empty pipelines") {
        c["pipelines"] = json::array();
        CHECK_THROWS_WITH_AS(harness::run(c), doctest::Contains("pipelines"), ConfigError);
    }
    SUBCASE("unknown pipeline") {
        c["pipelines"] = json::array({"umft", "bogus"});
        CHECK_THROWS_WITH_AS(harness::run(c), doctest::Contains("bogus"), ConfigError);
    }
    SUBCASE("dependency requires umft") {
        c["pipelines"] = json::array({"mmlora"});
        CHECK_THROWS_WITH_AS(harness::run(c), doctest::Contains("umft"), ConfigError);
    }
    SUBCASE("bad rank") {
        c["mmlora"]["rank"] = 0;
        CHECK_THROWS_WITH_AS(harness::run(c), doctest::Contains("mmlora.rank"), ConfigError);
    }
    SUBCASE("bad selection id") {
        c["mmlora"]["selection"] = json::array({3});
        CHECK_THROWS_WITH_AS(harness::run(c), doctest::Contains("mmlora.selection"), ConfigError);
    }
    SUBCASE("bad data field") {
        c["data"]["n_train"] = 0;
        CHECK_THROWS_WITH_AS(harness::run(c), doctest::Contains("n_train"), ConfigError);
    }
    SUBCASE("unknown optimizer field") {
        c["optimizer"]["default"]["lr"] = 0.1;
        CHECK_THROWS_WITH_AS(harness::run(c), doctest::Contains("optimizer.default.lr"), ConfigError);
    }
}

TEST_CASE("dotted overrides") {
    json c = tiny_config("unused");
    harness::apply_overrides(c, {"--mmlora.rank", "4", "--data.seed", "99", "--name", "patched"});
    CHECK(c["mmlora"]["rank"] == 4);
    CHECK(c["data"]["seed"] == 99);
    CHECK(c["name"] == "patched");
    CHECK_THROWS_AS(harness::apply_overrides(c, {"--mmlora.rank"}), ConfigError);
    CHECK_THROWS_AS(harness::apply_overrides(c, {"rank", "4"}), ConfigError);
}

TEST_CASE("run: table structure, checkpoints, and determinism") {
    TmpDir tmp;
    const std::string out1 = (tmp.dir / "run1").string();
    json c = tiny_config(out1);
    RunReport r = harness::run(c);

    SUBCASE("rows exist for every pipeline and seed plus aggregates") {
        for (const std::string seed : {"1", "2", "mean", "sd"}) {
            find_row(r, "umft", seed, "m1_test_accuracy");
            find_row(r, "umft", seed, "m2_test_accuracy");
            find_row(r, "late_fusion", seed, "test_accuracy");
            find_row(r, "ume", seed, "test_accuracy");
            find_row(r, "mmlora", seed, "test_accuracy");
            find_row(r, "joint_full_ft", seed, "test_accuracy");
            find_row(r, "linear_eval_suite", seed, "umft_m1_linear_eval");
            find_row(r, "linear_eval_suite", seed, "late_fusion_m2_linear_eval");
            find_row(r, "linear_eval_suite", seed, "mmlora_m1_linear_eval");
        }
        // aggregates recompute from the per-seed rows exactly
        const double m1 = find_row(r, "mmlora", "1", "test_accuracy").value;
        const double m2 = find_row(r, "mmlora", "2", "test_accuracy").value;
        CHECK(find_row(r, "mmlora", "mean", "test_accuracy").value == (m1 + m2) / 2.0);
    }
    SUBCASE("per-seed checkpoints land on disk and reload") {
        for (const std::string stem : {"umft", "late_fusion", "mmlora", "joint_full_ft"}) {
            const fs::path p = fs::path(out1) / "seed1" / (stem + ".mmlf");
            REQUIRE_MESSAGE(fs::exists(p), p.string());
            train::TrainedBundle b = ckpt::load(p.string());
            CHECK(b.models.size() == 2);
        }
    }
    SUBCASE("csv schema and exact re-parse") {
        const std::string csv = slurp(fs::path(out1) / "report.csv");
        std::stringstream ss(csv);
        std::string header;
        std::getline(ss, header);
        CHECK(header == "pipeline,seed,metric,value");
        std::size_t n = 0;
        std::string line;
        while (std::getline(ss, line)) {
            std::stringstream ls(line);
            std::string pipeline, seed, metric, value;
            REQUIRE(std::getline(ls, pipeline, ','));
            REQUIRE(std::getline(ls, seed, ','));
            REQUIRE(std::getline(ls, metric, ','));
            REQUIRE(std::getline(ls, value));
            CHECK(std::stod(value) == find_row(r, pipeline, seed, metric).value);
            ++n;
        }
        CHECK(n == r.rows.size());
    }
    SUBCASE("markdown has one row per pipeline-metric aggregate") {
        const std::string md = slurp(fs::path(out1) / "report.md");
        std::set<std::pair<std::string, std::string>> keys;
        for (const MetricRow& row : r.rows) {
            if (row.seed == "mean") keys.insert({row.pipeline, row.metric});
        }
        std::size_t table_rows = 0;
        std::stringstream ss(md);
        std::string line;
        while (std::getline(ss, line)) {
            if (line.size() > 1 && line[0] == '|' && line.find("pipeline") == std::string::npos &&
                line.find("---") == std::string::npos) {
                ++table_rows;
            }
        }
        CHECK(table_rows == keys.size());
    }
    SUBCASE("re-running the identical config reproduces identical csv bytes") {
        const std::string csv1 = slurp(fs::path(out1) / "report.csv");
        const std::string jsonl1 = slurp(fs::path(out1) / "report.jsonl");
        const std::string ck1 = slurp(fs::path(out1) / "seed1" / "mmlora.mmlf");
        harness::run(c);  // same config, same output directory
        CHECK(slurp(fs::path(out1) / "report.csv") == csv1);
        CHECK(slurp(fs::path(out1) / "report.jsonl") == jsonl1);
        CHECK(slurp(fs::path(out1) / "seed1" / "mmlora.mmlf") == ck1);
    }
}

TEST_CASE("rank_sweep emits one pipeline per rank plus the ume reference") {
    TmpDir tmp;
    json c = tiny_config((tmp.dir / "sweep").string());
    c["seeds"] = json::array({1});
    RunReport r = harness::rank_sweep(c, {1, 2, 2, 4});  // duplicate deduplicated
    find_row(r, "ume", "1", "test_accuracy");
    find_row(r, "mmlora_r1", "1", "test_accuracy");
    find_row(r, "mmlora_r2", "1", "test_accuracy");
    find_row(r, "mmlora_r4", "1", "test_accuracy");
    for (const MetricRow& row : r.rows) CHECK(row.pipeline != "mmlora_r3");
    // adapter budget grows with rank
    const double p1 = find_row(r, "mmlora_r1", "1", "trainable_params").value;
    const double p4 = find_row(r, "mmlora_r4", "1", "trainable_params").value;
    CHECK(p4 == doctest::Approx(4.0 * p1));
    CHECK_THROWS_AS(harness::rank_sweep(c, {}), ConfigError);
    json no_mmlora = c;
    no_mmlora["pipelines"] = json::array({"umft", "ume"});
    CHECK_THROWS_WITH_AS(harness::rank_sweep(no_mmlora, {1}), doctest::Contains("mmlora"),
                         ConfigError);
}

TEST_CASE("ablation_suite emits every cell sharing the umft checkpoints") {
    TmpDir tmp;
    json c = tiny_config((tmp.dir / "ablate").string());
    c["seeds"] = json::array({1});
    RunReport r = harness::ablation_suite(c);
    for (const std::string cell :
         {"mmlora_m1_only", "mmlora_m2_only", "mmlora_both", "mmlora_with_umft",
          "mmlora_without_umft", "mmlora_head_only", "mmlora_encoder_only",
          "mmlora_encoder_and_head", "ume"}) {
        find_row(r, cell, "1", "test_accuracy");
    }
    // default config: both == with_umft == encoder_only (same selection and placement)
    CHECK(find_row(r, "mmlora_both", "1", "test_accuracy").value ==
          find_row(r, "mmlora_with_umft", "1", "test_accuracy").value);
    CHECK(find_row(r, "mmlora_both", "1", "test_accuracy").value ==
          find_row(r, "mmlora_encoder_only", "1", "test_accuracy").value);
}

TEST_CASE("cli_main") {
    TmpDir tmp;
    const std::string cfg_path = (tmp.dir / "cfg.json").string();
    json c = tiny_config((tmp.dir / "cli_out").string());
    c["pipelines"] = json::array({"umft", "ume", "mmlora"});
    std::ofstream(cfg_path) << c.dump(2);

    SUBCASE("run exits 0 and writes reports") {
        CHECK(harness::cli_main({"run", "--config", cfg_path}) == 0);
        CHECK(fs::exists(tmp.dir / "cli_out" / "report.csv"));
    }
    SUBCASE("config errors exit 1") {
        CHECK(harness::cli_main({"run", "--config", (tmp.dir / "missing.json").string()}) == 1);
        CHECK(harness::cli_main({"run", "--config", cfg_path, "--mmlora.rank", "0"}) == 1);
        CHECK(harness::cli_main({"bogus-subcommand"}) == 1);
    }
    SUBCASE("inspect and export-merged round-trip through the cli") {
        REQUIRE(harness::cli_main({"run", "--config", cfg_path}) == 0);
        const std::string ck = (tmp.dir / "cli_out" / "seed1" / "mmlora.mmlf").string();
        CHECK(harness::cli_main({"inspect", ck}) == 0);
        const std::string merged = (tmp.dir / "merged.mmlf").string();
        CHECK(harness::cli_main({"export-merged", ck, merged}) == 0);
        train::TrainedBundle b = ckpt::load(merged);
        for (const auto& m : b.models) CHECK(m->adapters().empty());
        CHECK(harness::cli_main({"inspect", (tmp.dir / "nope.mmlf").string()}) == 2);
    }
    SUBCASE("training faults exit 2") {
        json bad = c;
        bad["optimizer"]["default"]["kind"] = "sgd";
        bad["optimizer"]["default"]["learning_rate"] = 1e80;
        const std::string bad_path = (tmp.dir / "bad.json").string();
        std::ofstream(bad_path) << bad.dump();
        CHECK(harness::cli_main({"run", "--config", bad_path}) == 2);
    }
}
