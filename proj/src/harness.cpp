#include "mmlora/harness.hpp"

#include <algorithm>
#include <cmath>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "mmlora/checkpoint.hpp"
#include "mmlora/rng.hpp"
#include "mmlora/synthdata.hpp"

namespace mmlora::harness {

namespace fs = std::filesystem;
using nn::ModelConfig;
using synth::Splits;
using synth::SynthConfig;
using train::OptimizerConfig;
using train::TrainedBundle;

namespace {

const std::vector<std::string> kPipelineOrder = {"umft",   "late_fusion",   "ume",
                                                 "mmlora", "joint_full_ft", "linear_eval_suite"};

double json_number(const json& j, const std::string& path) {
    if (!j.is_number()) throw ConfigError(path + ": expected a number");
    return j.get<double>();
}

int json_int(const json& j, const std::string& path) {
    if (!j.is_number_integer()) throw ConfigError(path + ": expected an integer");
    return j.get<int>();
}

SynthConfig parse_data(const json& config) {
    SynthConfig c;
    if (!config.contains("data")) return synth::preset("laziness");
    const json& d = config.at("data");
    if (!d.is_object()) throw ConfigError("data: expected an object");
    if (d.contains("preset")) {
        if (!d.at("preset").is_string()) throw ConfigError("data.preset: expected a string");
        c = synth::preset(d.at("preset").get<std::string>());
    }
    for (const auto& [key, value] : d.items()) {
        const std::string path = "data." + key;
        if (key == "preset") continue;
        if (key == "classes") c.classes = json_int(value, path);
        else if (key == "dim") c.dim = json_int(value, path);
        else if (key == "modalities") c.modalities = json_int(value, path);
        else if (key == "n_train") c.n_train = json_int(value, path);
        else if (key == "n_val") c.n_val = json_int(value, path);
        else if (key == "n_test") c.n_test = json_int(value, path);
        else if (key == "unique_strength") {
            if (!value.is_array()) throw ConfigError(path + ": expected an array");
            c.unique_strength.clear();
            for (const auto& v : value) c.unique_strength.push_back(json_number(v, path));
        } else if (key == "paired_strength") c.paired_strength = json_number(value, path);
        else if (key == "nuisance_scale") c.nuisance_scale = json_number(value, path);
        else if (key == "noise_scale") c.noise_scale = json_number(value, path);
        else if (key == "seed") c.seed = static_cast<std::uint64_t>(json_number(value, path));
        else if (key == "export_csv") { /* handled by run */ }
        else throw ConfigError(path + ": unknown field");
    }
    c.validate();
    return c;
}

std::vector<ModelConfig> parse_models(const json& config, const SynthConfig& data) {
    std::vector<ModelConfig> out;
    json models = config.value("model", json::array());
    if (!models.is_array()) throw ConfigError("model: expected an array of per-modality objects");
    for (int i = 0; i < data.modalities; ++i) {
        ModelConfig m;
        m.input_dim = data.dim;
        m.classes = data.classes;
        if (i < static_cast<int>(models.size())) {
            const json& jm = models.at(i);
            const std::string path = "model[" + std::to_string(i) + "]";
            if (!jm.is_object()) throw ConfigError(path + ": expected an object");
            const std::string kind = jm.value("kind", std::string("mlp"));
            if (kind == "mlp") m.kind = nn::EncoderKind::mlp;
            else if (kind == "tiny_transformer") m.kind = nn::EncoderKind::tiny_transformer;
            else throw ConfigError(path + ".kind: unknown encoder kind '" + kind + "'");
            if (jm.contains("hidden")) m.hidden = json_int(jm.at("hidden"), path + ".hidden");
            if (jm.contains("tokens")) m.tokens = json_int(jm.at("tokens"), path + ".tokens");
            if (jm.contains("token_width")) {
                m.token_width = json_int(jm.at("token_width"), path + ".token_width");
            }
            if (jm.contains("ff_dim")) m.ff_dim = json_int(jm.at("ff_dim"), path + ".ff_dim");
        }
        out.push_back(m);
    }
    return out;
}

std::vector<std::string> parse_pipelines(const json& config) {
    if (!config.contains("pipelines")) throw ConfigError("pipelines: missing");
    const json& p = config.at("pipelines");
    if (!p.is_array() || p.empty()) {
        throw ConfigError("pipelines: must be a non-empty array of pipeline names");
    }
    std::set<std::string> requested;
    for (const auto& v : p) {
        if (!v.is_string()) throw ConfigError("pipelines: entries must be strings");
        const std::string name = v.get<std::string>();
        if (std::find(kPipelineOrder.begin(), kPipelineOrder.end(), name) == kPipelineOrder.end()) {
            throw ConfigError("pipelines: unknown pipeline '" + name + "'");
        }
        requested.insert(name);
    }
    for (const std::string& dependent : {"ume", "mmlora", "joint_full_ft", "linear_eval_suite"}) {
        if (requested.count(dependent) && !requested.count("umft")) {
            throw ConfigError("pipelines: '" + dependent + "' requires 'umft' in the same run");
        }
    }
    std::vector<std::string> ordered;
    for (const std::string& name : kPipelineOrder) {
        if (requested.count(name)) ordered.push_back(name);
    }
    return ordered;
}

struct MmloraSpec {
    int rank = 1;
    nn::LoRASelection selection;
};

MmloraSpec parse_mmlora(const json& config, const SynthConfig& data) {
    MmloraSpec spec;
    for (int i = 1; i <= data.modalities; ++i) spec.selection.modalities.push_back(i);
    spec.selection.placement = nn::Placement::encoder_only;
    if (!config.contains("mmlora")) return spec;
    const json& m = config.at("mmlora");
    if (!m.is_object()) throw ConfigError("mmlora: expected an object");
    if (m.contains("rank")) {
        spec.rank = json_int(m.at("rank"), "mmlora.rank");
        if (spec.rank < 1) throw ConfigError("mmlora.rank: must be >= 1");
    }
    if (m.contains("selection")) {
        if (!m.at("selection").is_array() || m.at("selection").empty()) {
            throw ConfigError("mmlora.selection: must be a non-empty array of modality ids");
        }
        spec.selection.modalities.clear();
        for (const auto& v : m.at("selection")) {
            const int id = json_int(v, "mmlora.selection");
            if (id < 1 || id > data.modalities) {
                throw ConfigError("mmlora.selection: modality id " + std::to_string(id) +
                                  " out of range");
            }
            spec.selection.modalities.push_back(id);
        }
    }
    if (m.contains("placement")) {
        if (!m.at("placement").is_string()) throw ConfigError("mmlora.placement: expected a string");
        spec.selection.placement = nn::placement_from_name(m.at("placement").get<std::string>());
    }
    return spec;
}

void apply_optimizer_block(OptimizerConfig& o, const json& block, const std::string& path) {
    if (!block.is_object()) throw ConfigError(path + ": expected an object");
    for (const auto& [key, value] : block.items()) {
        const std::string p = path + "." + key;
        if (key == "kind") o.kind = train::opt_kind_from_name(value.get<std::string>());
        else if (key == "learning_rate") o.learning_rate = json_number(value, p);
        else if (key == "beta1") o.beta1 = json_number(value, p);
        else if (key == "beta2") o.beta2 = json_number(value, p);
        else if (key == "betas") {
            if (!value.is_array() || value.size() != 2) throw ConfigError(p + ": expected [b1, b2]");
            o.beta1 = json_number(value.at(0), p);
            o.beta2 = json_number(value.at(1), p);
        } else if (key == "eps") o.eps = json_number(value, p);
        else if (key == "weight_decay") o.weight_decay = json_number(value, p);
        else if (key == "epochs") o.epochs = json_int(value, p);
        else if (key == "batch_size") o.batch_size = json_int(value, p);
        else throw ConfigError(p + ": unknown field");
    }
}

OptimizerConfig resolve_optimizer(const json& config, const std::string& pipeline) {
    OptimizerConfig o;  // desk-scale defaults: adamw, 1e-3, wd 0.01, 50 epochs, batch 64
    if (config.contains("optimizer")) {
        const json& blocks = config.at("optimizer");
        if (!blocks.is_object()) throw ConfigError("optimizer: expected an object");
        if (blocks.contains("default")) apply_optimizer_block(o, blocks.at("default"), "optimizer.default");
        if (blocks.contains(pipeline)) {
            apply_optimizer_block(o, blocks.at(pipeline), "optimizer." + pipeline);
        }
    }
    o.validate();
    return o;
}

std::vector<std::uint64_t> parse_seeds(const json& config) {
    std::vector<std::uint64_t> seeds;
    const json s = config.value("seeds", json::array({1, 2, 3, 4, 5}));
    if (!s.is_array() || s.empty()) throw ConfigError("seeds: must be a non-empty array");
    for (const auto& v : s) {
        if (!v.is_number_integer()) throw ConfigError("seeds: entries must be integers");
        seeds.push_back(v.get<std::uint64_t>());
    }
    return seeds;
}

fs::path resolve_output_dir(const json& config, const std::string& name) {
    std::string dir = config.value("output_dir", "runs/" + name);
    fs::path p(dir);
    if (p.is_relative()) {
        if (const char* root = std::getenv("MMLORA_OUTPUT_ROOT")) p = fs::path(root) / p;
    }
    return p;
}

class StageTimer {
  public:
    explicit StageTimer(std::vector<StageTime>& sink) : sink_(sink) {}
    template <typename F>
    auto time(const std::string& stage, F&& f) {
        const auto start = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(f())>) {
            f();
            record(stage, start);
        } else {
            auto out = f();
            record(stage, start);
            return out;
        }
    }

  private:
    void record(const std::string& stage, std::chrono::steady_clock::time_point start) {
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        for (StageTime& t : sink_) {
            if (t.stage == stage) {
                t.seconds += secs;
                return;
            }
        }
        sink_.push_back({stage, secs});
    }
    std::vector<StageTime>& sink_;
};

void append_aggregates(RunReport& report, std::size_t seed_count) {
    // mean and sample sd per (pipeline, metric), in first-appearance order
    std::vector<std::pair<std::string, std::string>> keys;
    std::map<std::pair<std::string, std::string>, std::vector<double>> values;
    for (const MetricRow& r : report.rows) {
        if (r.seed == "mean" || r.seed == "sd") continue;
        const auto key = std::make_pair(r.pipeline, r.metric);
        if (!values.count(key)) keys.push_back(key);
        values[key].push_back(r.value);
    }
    for (const auto& key : keys) {
        const std::vector<double>& v = values[key];
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double sd = 0.0;
        if (v.size() > 1) {
            for (double x : v) sd += (x - mean) * (x - mean);
            sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
        }
        report.rows.push_back({key.first, "mean", key.second, mean});
        report.rows.push_back({key.first, "sd", key.second, sd});
    }
    (void)seed_count;
}

struct RunContext {
    SynthConfig data_cfg;
    std::vector<ModelConfig> model_cfgs;
    MmloraSpec mmlora;
    std::vector<std::uint64_t> seeds;
    Splits data;
    fs::path out_dir;
    bool write_checkpoints = true;
    std::uint64_t cfg_hash = 0;
};

RunContext make_context(const json& config, const std::string& default_name) {
    RunContext ctx;
    ctx.data_cfg = parse_data(config);
    ctx.model_cfgs = parse_models(config, ctx.data_cfg);
    ctx.mmlora = parse_mmlora(config, ctx.data_cfg);
    ctx.seeds = parse_seeds(config);
    ctx.cfg_hash = config_hash(config);
    ctx.out_dir = resolve_output_dir(config, config.value("name", default_name));
    ctx.write_checkpoints = config.value("export", json::object()).value("checkpoints", true);
    ctx.data = synth::generate(ctx.data_cfg);
    return ctx;
}

void maybe_save(const RunContext& ctx, const TrainedBundle& b, std::uint64_t seed,
                const std::string& stem) {
    if (!ctx.write_checkpoints) return;
    const fs::path dir = ctx.out_dir / ("seed" + std::to_string(seed));
    ckpt::save(b, (dir / (stem + ".mmlf")).string());
}

TrainedBundle make_umft(const RunContext& ctx, const json& config, std::uint64_t seed) {
    TrainedBundle b =
        train::umft_bundle(ctx.model_cfgs, ctx.data, resolve_optimizer(config, "umft"), seed);
    b.provenance.config_hash = ctx.cfg_hash;
    b.provenance.seeds = {seed};
    return b;
}

TrainedBundle make_mmlora(const RunContext& ctx, const json& config, const TrainedBundle& base,
                          const nn::LoRASelection& sel, int rank, std::uint64_t seed,
                          bool clamp_rank = false) {
    OptimizerConfig o = resolve_optimizer(config, "mmlora");
    o.seed = derive_seed(seed, "mmlora");
    nn::LoraAttachOptions attach;
    attach.clamp_rank = clamp_rank;
    TrainedBundle b = train::mmlora_train(base, sel, rank, ctx.data, o, attach);
    b.provenance.config_hash = ctx.cfg_hash;
    b.provenance.seeds = {seed};
    return b;
}

double test_accuracy(const RunContext& ctx, const TrainedBundle& b) {
    return train::evaluate(train::bundle_predictor(b), ctx.data.test).top1;
}

double val_accuracy(const RunContext& ctx, const TrainedBundle& b) {
    return train::evaluate(train::bundle_predictor(b), ctx.data.val).top1;
}

}  // namespace

json default_config() {
    json c;
    c["name"] = "laziness-main";
    c["data"] = {{"preset", "laziness"}};
    c["model"] = json::array({{{"kind", "mlp"}, {"hidden", 64}}, {{"kind", "mlp"}, {"hidden", 64}}});
    c["pipelines"] =
        json::array({"umft", "late_fusion", "ume", "mmlora", "joint_full_ft", "linear_eval_suite"});
    c["mmlora"] = {{"rank", 1}, {"selection", json::array({1, 2})}, {"placement", "encoder_only"}};
    c["seeds"] = json::array({1, 2, 3, 4, 5});
    return c;
}

json load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open '" + path + "'");
    json c;
    try {
        f >> c;
    } catch (const json::parse_error& e) {
        throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
    }
    if (!c.is_object()) throw ConfigError("config: top level must be an object");
    return c;
}

void apply_overrides(json& config, const std::vector<std::string>& extra_args) {
    for (std::size_t i = 0; i < extra_args.size(); i += 2) {
        const std::string& key = extra_args[i];
        if (key.size() < 3 || key.substr(0, 2) != "--") {
            throw ConfigError("overrides: expected --dotted.path, got '" + key + "'");
        }
        if (i + 1 >= extra_args.size()) {
            throw ConfigError("overrides: missing value for '" + key + "'");
        }
        const std::string& raw = extra_args[i + 1];
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::parse_error&) {
            value = raw;  // plain string
        }
        json* node = &config;
        std::string path = key.substr(2);
        std::size_t pos = 0;
        while (true) {
            const std::size_t dot = path.find('.', pos);
            const std::string part = path.substr(pos, dot - pos);
            if (part.empty()) throw ConfigError("overrides: bad path '" + key + "'");
            if (dot == std::string::npos) {
                (*node)[part] = value;
                break;
            }
            node = &(*node)[part];
            pos = dot + 1;
        }
    }
}

std::uint64_t config_hash(const json& config) {
    const std::string dump = config.dump();
    return fnv1a(dump.data(), dump.size());
}

RunReport run(const json& config) {
    RunContext ctx = make_context(config, "experiment");
    const std::vector<std::string> pipelines = parse_pipelines(config);

    RunReport report;
    report.name = config.value("name", std::string("experiment"));
    report.config_echo = config;
    StageTimer timer(report.timings);

    if (config.value("data", json::object()).value("export_csv", false)) {
        synth::export_csv(ctx.data.train, (ctx.out_dir / "data").string(), "train");
        synth::export_csv(ctx.data.val, (ctx.out_dir / "data").string(), "val");
        synth::export_csv(ctx.data.test, (ctx.out_dir / "data").string(), "test");
    }

    for (std::uint64_t seed : ctx.seeds) {
        const std::string seed_tag = std::to_string(seed);
        TrainedBundle umft, fusion, mmlora;
        bool have_mmlora = false;

        for (const std::string& pipeline : pipelines) {
            if (pipeline == "umft") {
                umft = timer.time("umft", [&] { return make_umft(ctx, config, seed); });
                maybe_save(ctx, umft, seed, "umft");
                for (std::size_t m = 0; m < umft.models.size(); ++m) {
                    const std::string tag = "m" + std::to_string(m + 1);
                    auto single = [&](const std::vector<Matrix>& xs) {
                        return umft.models[m]->probs_eval(xs[m]);
                    };
                    report.rows.push_back({pipeline, seed_tag, tag + "_val_accuracy",
                                           train::evaluate(single, ctx.data.val).top1});
                    report.rows.push_back({pipeline, seed_tag, tag + "_test_accuracy",
                                           train::evaluate(single, ctx.data.test).top1});
                }
            } else if (pipeline == "late_fusion") {
                fusion = timer.time("late_fusion", [&] {
                    TrainedBundle b = train::fresh_bundle(ctx.model_cfgs, seed);
                    train::attach_fusion_head(b, derive_seed(seed, "fusion"));
                    OptimizerConfig o = resolve_optimizer(config, "late_fusion");
                    o.seed = derive_seed(seed, "late_fusion");
                    train::train_late_fusion(b, ctx.data, o);
                    b.provenance.config_hash = ctx.cfg_hash;
                    b.provenance.seeds = {seed};
                    return b;
                });
                maybe_save(ctx, fusion, seed, "late_fusion");
                report.rows.push_back({pipeline, seed_tag, "val_accuracy", val_accuracy(ctx, fusion)});
                report.rows.push_back({pipeline, seed_tag, "test_accuracy", test_accuracy(ctx, fusion)});
            } else if (pipeline == "ume") {
                timer.time("ume", [&] {
                    auto pred = [&](const std::vector<Matrix>& xs) {
                        return train::ume_probs(umft.const_model_ptrs(), xs);
                    };
                    report.rows.push_back(
                        {pipeline, seed_tag, "test_accuracy", train::evaluate(pred, ctx.data.test).top1});
                });
            } else if (pipeline == "mmlora") {
                mmlora = timer.time("mmlora", [&] {
                    return make_mmlora(ctx, config, umft, ctx.mmlora.selection, ctx.mmlora.rank, seed);
                });
                have_mmlora = true;
                maybe_save(ctx, mmlora, seed, "mmlora");
                report.rows.push_back({pipeline, seed_tag, "test_accuracy", test_accuracy(ctx, mmlora)});
                report.rows.push_back({pipeline, seed_tag, "trainable_params",
                                       static_cast<double>(train::trainable_scalar_count(mmlora))});
                report.rows.push_back({pipeline, seed_tag, "total_params",
                                       static_cast<double>(train::total_scalar_count(mmlora))});
            } else if (pipeline == "joint_full_ft") {
                TrainedBundle ft = timer.time("joint_full_ft", [&] {
                    OptimizerConfig o = resolve_optimizer(config, "joint_full_ft");
                    o.seed = derive_seed(seed, "joint_full_ft");
                    return train::joint_full_finetune(umft, ctx.data, o);
                });
                maybe_save(ctx, ft, seed, "joint_full_ft");
                report.rows.push_back({pipeline, seed_tag, "test_accuracy", test_accuracy(ctx, ft)});
                report.rows.push_back({pipeline, seed_tag, "trainable_params",
                                       static_cast<double>(train::trainable_scalar_count(ft))});
            } else if (pipeline == "linear_eval_suite") {
                timer.time("linear_eval_suite", [&] {
                    struct Probe {
                        const char* tag;
                        const TrainedBundle* bundle;
                        bool available;
                    };
                    const bool have_fusion = fusion.models.size() > 0;
                    Probe probes[] = {{"umft", &umft, true},
                                      {"late_fusion", &fusion, have_fusion},
                                      {"mmlora", &mmlora, have_mmlora}};
                    for (const Probe& probe : probes) {
                        if (!probe.available) continue;
                        for (std::size_t m = 0; m < probe.bundle->models.size(); ++m) {
                            OptimizerConfig o = resolve_optimizer(config, "linear_eval_suite");
                            o.seed = derive_seed(seed, std::string("linear_eval/") + probe.tag, m + 1);
                            const double acc = train::linear_eval(*probe.bundle->models[m], ctx.data,
                                                                  static_cast<int>(m) + 1, o);
                            report.rows.push_back({pipeline, seed_tag,
                                                   std::string(probe.tag) + "_m" + std::to_string(m + 1) +
                                                       "_linear_eval",
                                                   acc});
                        }
                    }
                });
            }
        }
    }

    append_aggregates(report, ctx.seeds.size());
    emit_report(report, ctx.out_dir.string());
    return report;
}

RunReport rank_sweep(const json& config, std::vector<int> ranks) {
    const std::vector<std::string> pipelines = parse_pipelines(config);
    if (std::find(pipelines.begin(), pipelines.end(), "mmlora") == pipelines.end()) {
        throw ConfigError("rank_sweep: 'mmlora' must be in pipelines");
    }
    if (ranks.empty()) throw ConfigError("rank_sweep: empty rank list");
    std::vector<int> unique_ranks;
    for (int r : ranks) {
        if (r < 1) throw ConfigError("rank_sweep: ranks must be >= 1");
        if (std::find(unique_ranks.begin(), unique_ranks.end(), r) != unique_ranks.end()) {
            std::cerr << "warning: duplicate rank " << r << " ignored\n";
            continue;
        }
        unique_ranks.push_back(r);
    }

    RunContext ctx = make_context(config, "rank-sweep");
    RunReport report;
    report.name = config.value("name", std::string("experiment")) + "-rank-sweep";
    report.config_echo = config;
    report.config_echo["ranks"] = unique_ranks;
    StageTimer timer(report.timings);

    for (std::uint64_t seed : ctx.seeds) {
        const std::string seed_tag = std::to_string(seed);
        TrainedBundle umft = timer.time("umft", [&] { return make_umft(ctx, config, seed); });
        maybe_save(ctx, umft, seed, "umft");
        auto ume_pred = [&](const std::vector<Matrix>& xs) {
            return train::ume_probs(umft.const_model_ptrs(), xs);
        };
        report.rows.push_back(
            {"ume", seed_tag, "test_accuracy", train::evaluate(ume_pred, ctx.data.test).top1});
        for (int rank : unique_ranks) {
            TrainedBundle b = timer.time("mmlora", [&] {
                return make_mmlora(ctx, config, umft, ctx.mmlora.selection, rank, seed,
                                   /*clamp_rank=*/true);
            });
            const std::string pipeline = "mmlora_r" + std::to_string(rank);
            report.rows.push_back({pipeline, seed_tag, "test_accuracy", test_accuracy(ctx, b)});
            report.rows.push_back({pipeline, seed_tag, "trainable_params",
                                   static_cast<double>(train::trainable_scalar_count(b))});
        }
    }

    append_aggregates(report, ctx.seeds.size());
    emit_report(report, ctx.out_dir.string());
    return report;
}

RunReport ablation_suite(const json& config) {
    RunContext ctx = make_context(config, "ablation");
    if (ctx.data_cfg.modalities != 2) {
        throw ConfigError("ablation_suite: requires a two-modality config");
    }

    RunReport report;
    report.name = config.value("name", std::string("experiment")) + "-ablation";
    report.config_echo = config;
    StageTimer timer(report.timings);

    struct Cell {
        std::string pipeline;
        nn::LoRASelection selection;
        bool from_umft;
    };

    for (std::uint64_t seed : ctx.seeds) {
        const std::string seed_tag = std::to_string(seed);
        TrainedBundle umft = timer.time("umft", [&] { return make_umft(ctx, config, seed); });
        maybe_save(ctx, umft, seed, "umft");
        // the models umft itself started from, for the no-umft arm
        TrainedBundle fresh = train::fresh_bundle(ctx.model_cfgs, seed);

        auto ume_pred = [&](const std::vector<Matrix>& xs) {
            return train::ume_probs(umft.const_model_ptrs(), xs);
        };
        report.rows.push_back(
            {"ume", seed_tag, "test_accuracy", train::evaluate(ume_pred, ctx.data.test).top1});

        const nn::Placement base_placement = ctx.mmlora.selection.placement;
        std::vector<Cell> cells;
        auto sel = [&](std::vector<int> mods, nn::Placement p) {
            nn::LoRASelection s;
            s.modalities = std::move(mods);
            s.placement = p;
            return s;
        };
        cells.push_back({"mmlora_m1_only", sel({1}, base_placement), true});
        cells.push_back({"mmlora_m2_only", sel({2}, base_placement), true});
        cells.push_back({"mmlora_both", sel({1, 2}, base_placement), true});
        cells.push_back({"mmlora_with_umft", ctx.mmlora.selection, true});
        cells.push_back({"mmlora_without_umft", ctx.mmlora.selection, false});
        cells.push_back({"mmlora_head_only", sel(ctx.mmlora.selection.modalities, nn::Placement::head_only), true});
        cells.push_back(
            {"mmlora_encoder_only", sel(ctx.mmlora.selection.modalities, nn::Placement::encoder_only), true});
        cells.push_back({"mmlora_encoder_and_head",
                         sel(ctx.mmlora.selection.modalities, nn::Placement::encoder_and_head), true});

        // identical cells share one training run
        std::map<std::string, double> cache;
        for (const Cell& cell : cells) {
            std::string key = cell.from_umft ? "umft|" : "fresh|";
            key += nn::placement_name(cell.selection.placement);
            for (int id : cell.selection.modalities) key += "," + std::to_string(id);
            double acc;
            if (cache.count(key)) {
                acc = cache.at(key);
            } else {
                TrainedBundle b = timer.time("mmlora_cells", [&] {
                    return make_mmlora(ctx, config, cell.from_umft ? umft : fresh, cell.selection,
                                       ctx.mmlora.rank, seed);
                });
                acc = test_accuracy(ctx, b);
                cache[key] = acc;
            }
            report.rows.push_back({cell.pipeline, seed_tag, "test_accuracy", acc});
        }
    }

    append_aggregates(report, ctx.seeds.size());
    emit_report(report, ctx.out_dir.string());
    return report;
}

std::string report_csv(const RunReport& report) {
    std::string out = "pipeline,seed,metric,value\n";
    char buf[64];
    for (const MetricRow& r : report.rows) {
        std::snprintf(buf, sizeof(buf), "%.17g", r.value);
        out += r.pipeline + "," + r.seed + "," + r.metric + "," + buf + "\n";
    }
    return out;
}

std::string report_markdown(const RunReport& report) {
    // one row per (pipeline, metric): mean +- sd over seeds
    std::vector<std::pair<std::string, std::string>> keys;
    std::map<std::pair<std::string, std::string>, std::pair<double, double>> agg;
    std::map<std::pair<std::string, std::string>, int> counts;
    for (const MetricRow& r : report.rows) {
        const auto key = std::make_pair(r.pipeline, r.metric);
        if (r.seed == "mean") {
            if (!agg.count(key)) keys.push_back(key);
            agg[key].first = r.value;
        } else if (r.seed == "sd") {
            agg[key].second = r.value;
        } else {
            counts[key]++;
        }
    }
    std::ostringstream md;
    md << "# " << report.name << "\n\n";
    md << "| pipeline | metric | mean | sd | seeds |\n";
    md << "|---|---|---|---|---|\n";
    char buf[64];
    for (const auto& key : keys) {
        std::snprintf(buf, sizeof(buf), "%.4f", agg[key].first);
        md << "| " << key.first << " | " << key.second << " | " << buf;
        std::snprintf(buf, sizeof(buf), "%.4f", agg[key].second);
        md << " | " << buf << " | " << counts[key] << " |\n";
    }
    if (!report.timings.empty()) {
        md << "\n## wall-clock per stage\n\n";
        for (const StageTime& t : report.timings) {
            std::snprintf(buf, sizeof(buf), "%.2f", t.seconds);
            md << "- " << t.stage << ": " << buf << " s\n";
        }
    }
    return md.str();
}

std::string report_jsonl(const RunReport& report) {
    std::string out;
    for (const MetricRow& r : report.rows) {
        json line = {{"pipeline", r.pipeline}, {"seed", r.seed}, {"metric", r.metric}, {"value", r.value}};
        out += line.dump() + "\n";
    }
    return out;
}

void emit_report(const RunReport& report, const std::string& out_dir) {
    fs::create_directories(out_dir);
    auto write = [&](const std::string& name, const std::string& content) {
        std::ofstream f(fs::path(out_dir) / name, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("emit_report: cannot write " + name + " in " + out_dir);
        f << content;
    };
    write("report.csv", report_csv(report));
    write("report.md", report_markdown(report));
    write("report.jsonl", report_jsonl(report));
}

// ---- command line -----------------------------------------------------------

namespace {

struct CliArgs {
    std::string config_path;
    std::string out_dir;
    std::string ranks = "1,2,4,8,64";
    std::vector<std::string> extras;
};

json build_config(const CliArgs& args) {
    json config = args.config_path.empty() ? default_config() : load_config_file(args.config_path);
    apply_overrides(config, args.extras);
    if (!args.out_dir.empty()) config["output_dir"] = args.out_dir;
    return config;
}

std::vector<int> parse_rank_list(const std::string& s) {
    std::vector<int> ranks;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        try {
            ranks.push_back(std::stoi(part));
        } catch (const std::exception&) {
            throw ConfigError("ranks: '" + part + "' is not an integer");
        }
    }
    return ranks;
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
    const std::string usage =
        "usage: mmlora <run|rank-sweep|ablate|inspect|export-merged> [options]\n"
        "  run           --config FILE [--out DIR] [--dotted.path value ...]\n"
        "  rank-sweep    --config FILE [--ranks 1,2,4,8,64] [--out DIR] [overrides]\n"
        "  ablate        --config FILE [--out DIR] [overrides]\n"
        "  inspect       CHECKPOINT\n"
        "  export-merged CHECKPOINT OUTPUT [--dtype f64|f32]\n"
        "omitting --config uses the shipped laziness experiment\n";
    try {
        if (args.empty()) {
            std::cerr << usage;
            return 1;
        }
        const std::string& cmd = args[0];
        if (cmd == "inspect") {
            if (args.size() != 2) throw ConfigError("inspect: expected one checkpoint path");
            std::cout << ckpt::format_inspect(ckpt::inspect(args[1]));
            return 0;
        }
        if (cmd == "export-merged") {
            std::vector<std::string> rest(args.begin() + 1, args.end());
            Dtype dtype = Dtype::f64;
            for (auto it = rest.begin(); it != rest.end();) {
                if (*it == "--dtype") {
                    if (std::next(it) == rest.end()) throw ConfigError("export-merged: --dtype needs a value");
                    const std::string v = *std::next(it);
                    if (v == "f64") dtype = Dtype::f64;
                    else if (v == "f32") dtype = Dtype::f32;
                    else throw ConfigError("export-merged: unknown dtype '" + v + "'");
                    it = rest.erase(it, it + 2);
                } else {
                    ++it;
                }
            }
            if (rest.size() != 2) throw ConfigError("export-merged: expected CHECKPOINT and OUTPUT");
            ckpt::export_merged(ckpt::load(rest[0]), rest[1], dtype);
            std::cout << "wrote " << rest[1] << "\n";
            return 0;
        }
        if (cmd != "run" && cmd != "rank-sweep" && cmd != "ablate") {
            std::cerr << usage;
            return 1;
        }

        CliArgs cli;
        for (std::size_t i = 1; i < args.size(); ++i) {
            if (args[i] == "--config") {
                if (++i >= args.size()) throw ConfigError("--config needs a value");
                cli.config_path = args[i];
            } else if (args[i] == "--out") {
                if (++i >= args.size()) throw ConfigError("--out needs a value");
                cli.out_dir = args[i];
            } else if (args[i] == "--ranks" && cmd == "rank-sweep") {
                if (++i >= args.size()) throw ConfigError("--ranks needs a value");
                cli.ranks = args[i];
            } else {
                cli.extras.push_back(args[i]);
            }
        }
        const json config = build_config(cli);
        RunReport report;
        if (cmd == "run") {
            report = run(config);
        } else if (cmd == "rank-sweep") {
            report = rank_sweep(config, parse_rank_list(cli.ranks));
        } else {
            report = ablation_suite(config);
        }
        std::cout << report_markdown(report);
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const TrainFault& e) {
        std::cerr << "training fault: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace mmlora::harness
