// SPDX-License-Identifier: Apache-2.0
#include "diffpo/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "diffpo/errors.hpp"

namespace diffpo {

using nlohmann::json;
namespace fs = std::filesystem;

Arch TrainConfig::arch() const {
    Arch a;
    a.data_dim = oracle.d;
    a.cond_count = oracle.condition_count();
    a.t_embed_dim = t_embed_dim;
    a.hidden = hidden;
    return a;
}

NoiseSchedule TrainConfig::schedule() const {
    const double bmin = beta_min > 0.0 ? beta_min : default_beta_min(T);
    const double bmax = beta_max > 0.0 ? beta_max : default_beta_max(T);
    return make_schedule(T, bmin, bmax);
}

DpoConfig TrainConfig::dpo_config() const {
    DpoConfig d;
    d.beta = dpo_beta;
    d.T = T;
    d.sampler = make_sampler(sampler_kind, sampler_kind == SamplerKind::uniform ? 1.0 : gamma, T);
    d.schedule = make_scale_schedule(schedule(), alpha);
    return d;
}

// ----------------------------- config parsing -----------------------------

namespace {

struct Collector {
    std::vector<std::string> errors;
    void fail(const std::string& path, const std::string& msg) { errors.push_back(path + ": " + msg); }
};

json oracle_to_json(const OracleSpec& spec) {
    json j;
    j["d"] = spec.d;
    j["kappa"] = spec.kappa;
    j["conditions"] = json::array();
    for (const auto& cond : spec.conditions) {
        json jc;
        jc["mu_star"] = cond.mu_star;
        jc["mixture"] = json::array();
        for (const auto& comp : cond.mixture) {
            jc["mixture"].push_back(
                {{"weight", comp.weight}, {"mean", comp.mean}, {"cov", comp.cov}});
        }
        j["conditions"].push_back(jc);
    }
    return j;
}

OracleSpec oracle_from_json(const json& j, Collector& err) {
    OracleSpec spec;
    if (j.is_string()) {
        if (j.get<std::string>() == "default") {
            return default_oracle_spec();
        }
        err.fail("oracle", "unknown preset '" + j.get<std::string>() + "' (expected \"default\")");
        return spec;
    }
    try {
        spec.d = j.at("d").get<int>();
        spec.kappa = j.at("kappa").get<double>();
        for (const auto& jc : j.at("conditions")) {
            ConditionSpec cond;
            cond.mu_star = jc.at("mu_star").get<std::vector<double>>();
            for (const auto& jm : jc.at("mixture")) {
                MixtureComponent comp;
                comp.weight = jm.at("weight").get<double>();
                comp.mean = jm.at("mean").get<std::vector<double>>();
                comp.cov = jm.at("cov").get<std::vector<double>>();
                cond.mixture.push_back(std::move(comp));
            }
            spec.conditions.push_back(std::move(cond));
        }
    } catch (const json::exception& e) {
        err.fail("oracle", e.what());
    }
    return spec;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (j.contains(key)) {
        return j.at(key).get<T>();
    }
    return fallback;
}

}  // namespace

ValidationResult validate_config(const std::string& raw_text) {
    ValidationResult result;
    Collector err;
    json j;
    try {
        j = json::parse(raw_text);
    } catch (const json::parse_error& e) {
        result.errors.push_back(std::string("config: ") + e.what());
        return result;
    }

    TrainConfig cfg;
    try {
        cfg.seed = get_or<std::uint64_t>(j, "seed", cfg.seed);
        cfg.out_dir = get_or<std::string>(j, "out_dir", cfg.out_dir);
        if (j.contains("diffusion")) {
            const json& d = j["diffusion"];
            cfg.T = get_or<int>(d, "T", cfg.T);
            cfg.beta_min = get_or<double>(d, "beta_min", 0.0);
            cfg.beta_max = get_or<double>(d, "beta_max", 0.0);
        }
        if (j.contains("arch")) {
            const json& a = j["arch"];
            cfg.hidden = get_or<std::vector<int>>(a, "hidden", cfg.hidden);
            cfg.t_embed_dim = get_or<int>(a, "t_embed_dim", cfg.t_embed_dim);
        }
        cfg.oracle = j.contains("oracle") ? oracle_from_json(j["oracle"], err)
                                          : default_oracle_spec();
        if (j.contains("data")) {
            const json& d = j["data"];
            cfg.data.pairs_path = get_or<std::string>(d, "pairs_path", "");
            cfg.data.n_pairs = get_or<int>(d, "n_pairs", cfg.data.n_pairs);
            cfg.data.pairs_seed = get_or<std::uint64_t>(d, "pairs_seed", cfg.data.pairs_seed);
            cfg.data.n_pretrain = get_or<int>(d, "n_pretrain", cfg.data.n_pretrain);
            cfg.data.pretrain_seed =
                get_or<std::uint64_t>(d, "pretrain_seed", cfg.data.pretrain_seed);
        }
        const std::string objective = get_or<std::string>(j, "objective", "dpo");
        if (objective == "sft") {
            cfg.objective = Objective::sft;
        } else if (objective == "dpo") {
            cfg.objective = Objective::dpo;
        } else {
            err.fail("objective", "must be \"sft\" or \"dpo\", got \"" + objective + "\"");
        }
        if (j.contains("dpo")) {
            const json& d = j["dpo"];
            cfg.dpo_beta = get_or<double>(d, "beta", cfg.dpo_beta);
            if (d.contains("sampler")) {
                const json& s = d["sampler"];
                const std::string kind = get_or<std::string>(s, "kind", "uniform");
                if (kind == "uniform") {
                    cfg.sampler_kind = SamplerKind::uniform;
                } else if (kind == "categorical") {
                    cfg.sampler_kind = SamplerKind::categorical;
                } else {
                    err.fail("dpo.sampler.kind", "must be \"uniform\" or \"categorical\"");
                }
                cfg.gamma = get_or<double>(s, "gamma", cfg.gamma);
            }
            if (d.contains("schedule")) {
                cfg.alpha = get_or<double>(d["schedule"], "alpha", cfg.alpha);
            }
        }
        if (j.contains("reference")) {
            const json& r = j["reference"];
            const std::string mode = get_or<std::string>(r, "mode", "frozen");
            try {
                cfg.reference.mode = reference_mode_from_string(mode);
            } catch (const ConfigError& e) {
                err.fail("reference.mode", e.what());
            }
            cfg.reference.tau = get_or<int>(r, "tau", cfg.reference.tau);
            cfg.reference.delta = get_or<double>(r, "delta", cfg.reference.delta);
            cfg.reference.monitor_batch_size =
                get_or<int>(r, "monitor_batch_size", cfg.reference.monitor_batch_size);
            cfg.reference.monitor_t_samples =
                get_or<int>(r, "monitor_t_samples", cfg.reference.monitor_t_samples);
        }
        if (j.contains("optimizer")) {
            const json& o = j["optimizer"];
            cfg.optimizer.lr = get_or<double>(o, "lr", cfg.optimizer.lr);
            cfg.optimizer.beta1 = get_or<double>(o, "beta1", cfg.optimizer.beta1);
            cfg.optimizer.beta2 = get_or<double>(o, "beta2", cfg.optimizer.beta2);
            cfg.optimizer.eps = get_or<double>(o, "eps", cfg.optimizer.eps);
        }
        cfg.total_steps = get_or<long>(j, "total_steps", cfg.total_steps);
        cfg.batch_size = get_or<int>(j, "batch_size", cfg.batch_size);
        cfg.checkpoint_every = get_or<long>(j, "checkpoint_every", cfg.checkpoint_every);
    } catch (const json::exception& e) {
        err.fail("config", e.what());
        result.errors = std::move(err.errors);
        return result;
    }

    // Range checks, aggregated so every violation is reported at once.
    if (cfg.out_dir.empty()) {
        err.fail("out_dir", "must not be empty");
    }
    if (cfg.T < 2) {
        err.fail("diffusion.T", "must be >= 2");
    }
    if (cfg.beta_min < 0.0 || cfg.beta_min >= 1.0 || cfg.beta_max < 0.0 || cfg.beta_max >= 1.0) {
        err.fail("diffusion.beta_min/beta_max", "betas must lie in (0,1) when given");
    } else if (cfg.beta_min > 0.0 && cfg.beta_max > 0.0 && cfg.beta_min > cfg.beta_max) {
        err.fail("diffusion.beta_min", "must not exceed diffusion.beta_max");
    } else if (cfg.T >= 2 && cfg.beta_max == 0.0 && default_beta_max(cfg.T) >= 1.0) {
        err.fail("diffusion.T",
                 "the default beta schedule scales as 1000/T and leaves (0,1) for T <= 20; set "
                 "beta_min/beta_max explicitly");
    }
    if (cfg.hidden.empty()) {
        err.fail("arch.hidden", "must contain at least one layer width");
    }
    for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
        if (cfg.hidden[i] < 1) {
            err.fail("arch.hidden[" + std::to_string(i) + "]", "must be >= 1");
        }
    }
    if (cfg.t_embed_dim < 2 || cfg.t_embed_dim % 2 != 0) {
        err.fail("arch.t_embed_dim", "must be an even integer >= 2");
    }
    if (!(cfg.dpo_beta > 0.0)) {
        err.fail("dpo.beta", "must be > 0");
    }
    if (!(cfg.gamma > 0.0) || cfg.gamma > 1.0) {
        err.fail("dpo.sampler.gamma", "must lie in (0,1], got " + std::to_string(cfg.gamma));
    }
    if (cfg.alpha < 0.0) {
        err.fail("dpo.schedule.alpha", "must be >= 0");
    }
    if (cfg.reference.tau < 1) {
        err.fail("reference.tau", "must be >= 1, got " + std::to_string(cfg.reference.tau));
    }
    if (!(cfg.reference.delta > 0.0)) {
        err.fail("reference.delta", "must be > 0");
    }
    if (cfg.reference.monitor_batch_size < 1) {
        err.fail("reference.monitor_batch_size", "must be >= 1");
    }
    if (cfg.reference.monitor_t_samples < 1) {
        err.fail("reference.monitor_t_samples", "must be >= 1");
    }
    if (!(cfg.optimizer.lr > 0.0)) {
        err.fail("optimizer.lr", "must be > 0");
    }
    if (cfg.optimizer.beta1 < 0.0 || cfg.optimizer.beta1 >= 1.0 || cfg.optimizer.beta2 < 0.0 ||
        cfg.optimizer.beta2 >= 1.0) {
        err.fail("optimizer.beta1/beta2", "moment decays must lie in [0,1)");
    }
    if (cfg.total_steps < 1) {
        err.fail("total_steps", "must be >= 1");
    }
    if (cfg.batch_size < 1) {
        err.fail("batch_size", "must be >= 1");
    }
    if (cfg.checkpoint_every < 0) {
        err.fail("checkpoint_every", "must be >= 0");
    }
    if (!cfg.data.pairs_path.empty() && !fs::exists(cfg.data.pairs_path)) {
        err.fail("data.pairs_path", "file not found: " + cfg.data.pairs_path);
    }
    if (cfg.data.pairs_path.empty() && cfg.data.n_pairs < 1) {
        err.fail("data.n_pairs", "must be >= 1");
    }
    if (cfg.data.n_pretrain < 1) {
        err.fail("data.n_pretrain", "must be >= 1");
    }
    if (err.errors.empty()) {
        try {
            (void)oracle_spec_hash(cfg.oracle);
            (void)cfg.arch();
        } catch (const std::exception& e) {
            err.fail("oracle", e.what());
        }
    }

    result.errors = std::move(err.errors);
    if (result.errors.empty()) {
        result.config = std::move(cfg);
    }
    return result;
}

std::string serialize_config(const TrainConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["out_dir"] = cfg.out_dir;
    j["diffusion"] = {{"T", cfg.T}, {"beta_min", cfg.beta_min}, {"beta_max", cfg.beta_max}};
    j["arch"] = {{"hidden", cfg.hidden}, {"t_embed_dim", cfg.t_embed_dim}};
    j["oracle"] = oracle_to_json(cfg.oracle);
    j["data"] = {{"pairs_path", cfg.data.pairs_path},
                 {"n_pairs", cfg.data.n_pairs},
                 {"pairs_seed", cfg.data.pairs_seed},
                 {"n_pretrain", cfg.data.n_pretrain},
                 {"pretrain_seed", cfg.data.pretrain_seed}};
    j["objective"] = cfg.objective == Objective::sft ? "sft" : "dpo";
    j["dpo"] = {{"beta", cfg.dpo_beta},
                {"sampler",
                 {{"kind", cfg.sampler_kind == SamplerKind::uniform ? "uniform" : "categorical"},
                  {"gamma", cfg.gamma}}},
                {"schedule", {{"alpha", cfg.alpha}}}};
    j["reference"] = {{"mode", to_string(cfg.reference.mode)},
                      {"tau", cfg.reference.tau},
                      {"delta", cfg.reference.delta},
                      {"monitor_batch_size", cfg.reference.monitor_batch_size},
                      {"monitor_t_samples", cfg.reference.monitor_t_samples}};
    j["optimizer"] = {{"lr", cfg.optimizer.lr},
                      {"beta1", cfg.optimizer.beta1},
                      {"beta2", cfg.optimizer.beta2},
                      {"eps", cfg.optimizer.eps}};
    j["total_steps"] = cfg.total_steps;
    j["batch_size"] = cfg.batch_size;
    j["checkpoint_every"] = cfg.checkpoint_every;
    return j.dump(2);
}

TrainConfig load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw IoError("load_config_file: cannot open " + path);
    }
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    ValidationResult res = validate_config(text);
    if (!res.ok()) {
        std::string joined = "invalid config " + path + ":";
        for (const auto& e : res.errors) {
            joined += "\n  " + e;
        }
        throw ConfigError(joined);
    }
    return *res.config;
}

// ----------------------------- run loops -----------------------------

namespace {

class MetricsWriter {
public:
    explicit MetricsWriter(const std::string& path) : os_(path, std::ios::trunc), path_(path) {
        if (!os_) {
            throw IoError("metrics: cannot open " + path);
        }
    }

    void line(long step, const char* kind, const json& payload) {
        json j;
        j["step"] = step;
        j["kind"] = kind;
        j["payload"] = payload;
        os_ << j.dump() << "\n";
    }

    void close() {
        os_.flush();
        if (!os_) {
            throw IoError("metrics: write failed for " + path_);
        }
        os_.close();
    }

private:
    std::ofstream os_;
    std::string path_;
};

struct RunPaths {
    std::string metrics;
    std::string config;
    std::string final_ckpt;
    std::string ref_ckpt;
    std::string run_info;
};

RunPaths prepare_out_dir(const TrainConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    RunPaths p;
    p.metrics = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
    p.config = (fs::path(cfg.out_dir) / "config.json").string();
    p.final_ckpt = (fs::path(cfg.out_dir) / "final.ckpt").string();
    p.ref_ckpt = (fs::path(cfg.out_dir) / "ref_final.ckpt").string();
    p.run_info = (fs::path(cfg.out_dir) / "run_info.json").string();
    return p;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) {
        throw IoError("cannot open " + path);
    }
    os << text;
}

// Wall time is non-deterministic and must stay out of the metrics stream,
// which is byte-identical across reruns of one config.
void write_run_info(const std::string& path, double wall_seconds, long steps) {
    json j;
    j["wall_seconds"] = wall_seconds;
    j["steps"] = steps;
    write_text(path, j.dump(2) + "\n");
}

std::vector<std::size_t> draw_batch_indices(Rng& rng, std::size_t dataset_size, int batch_size) {
    std::vector<std::size_t> idx(static_cast<std::size_t>(batch_size));
    for (auto& i : idx) {
        i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(dataset_size) - 1));
    }
    return idx;
}

}  // namespace

std::vector<PreferencePair> resolve_pairs(const TrainConfig& cfg) {
    if (!cfg.data.pairs_path.empty()) {
        return load_pairs(cfg.data.pairs_path);
    }
    return gen_preference_pairs(cfg.oracle, cfg.data.n_pairs, cfg.data.pairs_seed);
}

RunArtifacts pretrain(const TrainConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    const NoiseSchedule schedule = cfg.schedule();
    const std::vector<Sample> dataset =
        gen_pretrain_dataset(cfg.oracle, cfg.data.n_pretrain, cfg.data.pretrain_seed);

    DenoiserParams params = init_denoiser(cfg.arch(), derive_seed(cfg.seed, kStreamInit));
    OptimizerState opt = make_optimizer(params, cfg.optimizer.lr, cfg.optimizer.beta1,
                                        cfg.optimizer.beta2, cfg.optimizer.eps);
    Rng train_rng(derive_seed(cfg.seed, kStreamTrain));
    const TimestepSampler uniform = make_sampler(SamplerKind::uniform, 1.0, cfg.T);

    const RunPaths paths = prepare_out_dir(cfg);
    write_text(paths.config, serialize_config(cfg) + "\n");
    MetricsWriter metrics(paths.metrics);

    RunArtifacts artifacts;
    artifacts.out_dir = cfg.out_dir;
    artifacts.metrics_path = paths.metrics;
    artifacts.config_path = paths.config;

    double last_loss = 0.0;
    for (long step = 1; step <= cfg.total_steps; ++step) {
        std::vector<Sample> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (std::size_t i : draw_batch_indices(train_rng, dataset.size(), cfg.batch_size)) {
            batch.push_back(dataset[i]);
        }
        double loss_value = 0.0;
        GradVector grads;
        try {
            auto [v, g] = grad(params, [&](Tape& tape) {
                return ddpm_loss_node(tape, schedule, batch, uniform, [](int) { return 1.0; },
                                      train_rng);
            });
            loss_value = v;
            grads = std::move(g);
        } catch (const NumericError&) {
            // keep the last good parameters on disk, then surface the failure
            save_checkpoint(paths.final_ckpt, params);
            metrics.close();
            throw;
        }
        adam_step(params, grads, opt);
        last_loss = loss_value;
        metrics.line(step, "train", json{{"loss", loss_value}});
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            save_checkpoint(
                (fs::path(cfg.out_dir) / ("step_" + std::to_string(step) + ".ckpt")).string(),
                params);
        }
    }
    save_checkpoint(paths.final_ckpt, params);
    metrics.close();

    artifacts.checkpoint_path = paths.final_ckpt;
    artifacts.final_loss = last_loss;
    artifacts.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_run_info(paths.run_info, artifacts.wall_seconds, cfg.total_steps);
    return artifacts;
}

RunArtifacts finetune_with_manager(const TrainConfig& cfg, const DenoiserParams& init_params,
                                   ReferenceManager* manager) {
    const auto t0 = std::chrono::steady_clock::now();
    const NoiseSchedule schedule = cfg.schedule();
    const DpoConfig dpo = cfg.dpo_config();
    const std::vector<PreferencePair> pairs = resolve_pairs(cfg);
    if (pairs.empty()) {
        throw InputError("finetune: no preference pairs available");
    }

    DenoiserParams params = snapshot(init_params);
    const DenoiserParams frozen_ref = snapshot(init_params);  // used when manager is null
    OptimizerState opt = make_optimizer(params, cfg.optimizer.lr, cfg.optimizer.beta1,
                                        cfg.optimizer.beta2, cfg.optimizer.eps);
    Rng train_rng(derive_seed(cfg.seed, kStreamTrain));
    Rng monitor_rng(derive_seed(cfg.seed, kStreamMonitor));

    const RunPaths paths = prepare_out_dir(cfg);
    write_text(paths.config, serialize_config(cfg) + "\n");
    MetricsWriter metrics(paths.metrics);

    RunArtifacts artifacts;
    artifacts.out_dir = cfg.out_dir;
    artifacts.metrics_path = paths.metrics;
    artifacts.config_path = paths.config;

    double last_loss = 0.0;
    for (long step = 1; step <= cfg.total_steps; ++step) {
        std::vector<const PreferencePair*> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (std::size_t i : draw_batch_indices(train_rng, pairs.size(), cfg.batch_size)) {
            batch.push_back(&pairs[i]);
        }
        const DenoiserParams& ref = manager != nullptr ? manager->ref_params() : frozen_ref;

        double loss_value = 0.0;
        double margin_sum = 0.0;
        GradVector grads;
        try {
            auto [v, g] = grad(params, [&](Tape& tape) {
                Tape::Value total = tape.constant(0.0);
                for (const PreferencePair* pair : batch) {
                    if (cfg.objective == Objective::dpo) {
                        PairLossDiag diag;
                        total = tape.add(total, dpo_pair_loss_node(tape, ref, schedule, *pair, dpo,
                                                                   train_rng, &diag));
                        margin_sum += diag.margin;
                    } else {
                        total = tape.add(total, sft_loss_node(tape, schedule, *pair, dpo, train_rng));
                    }
                }
                return tape.mul_const(total, 1.0 / static_cast<double>(batch.size()));
            });
            loss_value = v;
            grads = std::move(g);
        } catch (const NumericError&) {
            save_checkpoint(paths.final_ckpt, params);
            if (manager != nullptr) {
                save_checkpoint(paths.ref_ckpt, manager->ref_params());
            }
            metrics.close();
            throw;
        }
        adam_step(params, grads, opt);
        last_loss = loss_value;

        json payload{{"loss", loss_value}};
        if (cfg.objective == Objective::dpo) {
            payload["margin"] = margin_sum / static_cast<double>(cfg.batch_size);
        }
        metrics.line(step, "train", payload);

        if (manager != nullptr) {
            std::vector<Sample> monitor;
            const int m = std::min<int>(cfg.reference.monitor_batch_size, cfg.batch_size);
            monitor.reserve(static_cast<std::size_t>(m));
            for (int i = 0; i < m; ++i) {
                monitor.push_back(Sample{batch[static_cast<std::size_t>(i)]->x_w,
                                         batch[static_cast<std::size_t>(i)]->c});
            }
            const UpdateAction action =
                manager->maybe_update(step, params, schedule, monitor, monitor_rng);
            if (action != UpdateAction::no_op) {
                const DivergenceEvent& ev = manager->inspect().history.back();
                metrics.line(step, "divergence",
                             json{{"divergence", ev.divergence}, {"action", to_string(ev.action)}});
            }
        }

        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            save_checkpoint(
                (fs::path(cfg.out_dir) / ("step_" + std::to_string(step) + ".ckpt")).string(),
                params);
        }
    }
    save_checkpoint(paths.final_ckpt, params);
    if (manager != nullptr) {
        save_checkpoint(paths.ref_ckpt, manager->ref_params());
        artifacts.ref_checkpoint_path = paths.ref_ckpt;
        artifacts.divergence_events = manager->inspect().history;
    }
    metrics.close();

    artifacts.checkpoint_path = paths.final_ckpt;
    artifacts.final_loss = last_loss;
    artifacts.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_run_info(paths.run_info, artifacts.wall_seconds, cfg.total_steps);
    return artifacts;
}

RunArtifacts finetune(const TrainConfig& cfg, const std::string& init_checkpoint) {
    const DenoiserParams init_params = load_checkpoint(init_checkpoint);
    if (!(init_params.arch == cfg.arch())) {
        throw ConfigError("finetune: checkpoint arch does not match config arch (" +
                          init_checkpoint + ")");
    }
    ReferenceManager manager(cfg.reference, init_params);
    return finetune_with_manager(cfg, init_params, &manager);
}

}  // namespace diffpo
