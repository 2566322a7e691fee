// Configuration-driven experiment runner.
//
// A run executes the requested pipelines per seed in dependency order
// (umft first, joint stages after it, linear evaluation last), collects
// (pipeline, seed, metric, value) rows, aggregates mean and sample standard
// deviation across seeds, and emits CSV / markdown / JSON-lines reports.
// Re-running an identical config reproduces identical CSV bytes.
#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "mmlora/training.hpp"

namespace mmlora::harness {

using json = nlohmann::json;

struct MetricRow {
    std::string pipeline;
    std::string seed;  // "1", "2", ... or "mean" / "sd"
    std::string metric;
    double value = 0.0;
};

struct StageTime {
    std::string stage;
    double seconds = 0.0;
};

struct RunReport {
    std::string name;
    std::vector<MetricRow> rows;
    std::vector<StageTime> timings;
    json config_echo;
};

// the shipped experiment: laziness preset, two mlp encoders, all pipelines
json default_config();
json load_config_file(const std::string& path);

// applies "--a.b.c value" pairs onto the config object; values parse as JSON
// when possible and fall back to strings
void apply_overrides(json& config, const std::vector<std::string>& extra_args);

std::uint64_t config_hash(const json& config);

RunReport run(const json& config);
RunReport rank_sweep(const json& config, std::vector<int> ranks);
RunReport ablation_suite(const json& config);

std::string report_csv(const RunReport& report);
std::string report_markdown(const RunReport& report);
std::string report_jsonl(const RunReport& report);
// writes report.csv / report.md / report.jsonl under out_dir
void emit_report(const RunReport& report, const std::string& out_dir);

// full command-line entry; returns the process exit code
// (0 ok, 1 config error, 2 training/runtime fault)
int cli_main(const std::vector<std::string>& args);

}  // namespace mmlora::harness
