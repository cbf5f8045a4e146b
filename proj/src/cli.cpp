// SPDX-License-Identifier: Apache-2.0
#include "diffpo/cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "diffpo/errors.hpp"
#include "diffpo/eval.hpp"
#include "diffpo/trainer.hpp"

namespace diffpo::cli {

namespace fs = std::filesystem;

namespace {

NoiseSchedule resolve_schedule(int T, double beta_min, double beta_max) {
    const double bmin = beta_min > 0.0 ? beta_min : default_beta_min(T);
    const double bmax = beta_max > 0.0 ? beta_max : default_beta_max(T);
    return make_schedule(T, bmin, bmax);
}

OracleSpec resolve_oracle(const std::string& spec_arg) {
    if (spec_arg == "default") {
        return default_oracle_spec();
    }
    // anything else is a path to a config file whose "oracle" object is used
    if (!fs::exists(spec_arg)) {
        throw IoError("--spec: no such preset or file: " + spec_arg);
    }
    const TrainConfig cfg = load_config_file(spec_arg);
    return cfg.oracle;
}

struct GenDataArgs {
    std::string spec = "default";
    int pairs = 5000;
    std::uint64_t seed = 0;
    std::string out = "pairs.jsonl";
};

int cmd_gen_data(const GenDataArgs& a) {
    const OracleSpec oracle = resolve_oracle(a.spec);
    const auto pairs = gen_preference_pairs(oracle, a.pairs, a.seed);
    save_pairs(a.out, pairs, oracle.d, oracle.condition_count());
    std::printf("wrote %zu pairs to %s\n", pairs.size(), a.out.c_str());
    return 0;
}

struct TrainArgs {
    std::string config;
    std::string checkpoint;  // finetune only
    std::string out;         // optional out_dir override
    std::int64_t seed = -1;  // optional seed override
};

TrainConfig load_train_config(const TrainArgs& a) {
    TrainConfig cfg = load_config_file(a.config);
    if (!a.out.empty()) {
        cfg.out_dir = a.out;
    }
    if (a.seed >= 0) {
        cfg.seed = static_cast<std::uint64_t>(a.seed);
    }
    return cfg;
}

int cmd_pretrain(const TrainArgs& a) {
    const TrainConfig cfg = load_train_config(a);
    const RunArtifacts art = pretrain(cfg);
    std::printf("pretrain done: final_loss=%.6f checkpoint=%s\n", art.final_loss,
                art.checkpoint_path.c_str());
    return 0;
}

int cmd_finetune(const TrainArgs& a) {
    const TrainConfig cfg = load_train_config(a);
    if (a.checkpoint.empty()) {
        throw ConfigError("finetune: --checkpoint is required");
    }
    if (!fs::exists(a.checkpoint)) {
        throw IoError("finetune: checkpoint not found: " + a.checkpoint);
    }
    const RunArtifacts art = finetune(cfg, a.checkpoint);
    std::printf("finetune done: final_loss=%.6f checkpoint=%s divergence_events=%zu\n",
                art.final_loss, art.checkpoint_path.c_str(), art.divergence_events.size());
    return 0;
}

struct EvalArgs {
    std::string checkpoint;
    std::string baseline;
    std::string pairs_file;
    std::string spec = "default";
    std::string out = "report";
    int T = 100;
    double beta_min = 0.0;
    double beta_max = 0.0;
    std::uint64_t seed = 0;
    int eval_seeds = 64;
    int t_draws = 5;
    int bins = 10;
    int profile_samples = 256;
};

int cmd_eval(const EvalArgs& a) {
    for (const std::string& p : {a.checkpoint, a.baseline}) {
        if (!fs::exists(p)) {
            throw IoError("eval: checkpoint not found: " + p);
        }
    }
    const OracleSpec oracle = resolve_oracle(a.spec);
    const NoiseSchedule schedule = resolve_schedule(a.T, a.beta_min, a.beta_max);
    const DenoiserParams model = load_checkpoint(a.checkpoint);
    const DenoiserParams baseline = load_checkpoint(a.baseline);

    std::vector<int> conditions(static_cast<std::size_t>(oracle.condition_count()));
    for (int c = 0; c < oracle.condition_count(); ++c) {
        conditions[static_cast<std::size_t>(c)] = c;
    }
    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(a.eval_seeds));
    for (int i = 0; i < a.eval_seeds; ++i) {
        seeds[static_cast<std::size_t>(i)] = derive_seed(a.seed, 1000 + static_cast<std::uint64_t>(i));
    }

    EvalReport report;
    report.win = win_rate(model, baseline, schedule, conditions, seeds, oracle);

    std::vector<PreferencePair> pairs;
    if (!a.pairs_file.empty()) {
        pairs = load_pairs(a.pairs_file);
    } else {
        pairs = gen_preference_pairs(oracle, 1000, derive_seed(a.seed, kStreamEval));
    }
    Rng acc_rng(derive_seed(a.seed, kStreamEval + 1));
    report.accuracy =
        implicit_accuracy_detail(make_predictor(model), make_predictor(baseline), schedule, pairs,
                                 a.t_draws, acc_rng);

    const std::vector<Sample> monitor =
        gen_pretrain_dataset(oracle, a.profile_samples, derive_seed(a.seed, kStreamEval + 2));
    Rng prof_rng(derive_seed(a.seed, kStreamEval + 3));
    report.divergence_bins =
        divergence_profile(model, baseline, schedule, monitor, a.bins, 4, prof_rng).rows;
    Rng reward_rng(derive_seed(a.seed, kStreamEval + 4));
    std::vector<PreferencePair> reward_pairs = pairs;
    if (reward_pairs.size() > 200) {
        reward_pairs.resize(200);
    }
    report.reward_bins =
        reward_scale_profile(model, baseline, schedule, reward_pairs, a.bins, 2, reward_rng);

    report.model_checkpoint = a.checkpoint;
    report.baseline_checkpoint = a.baseline;
    report.seeds = seeds;
    report.oracle_hash = oracle_spec_hash(oracle);
    report.T = a.T;
    emit_report(report, a.out);
    std::printf("win_rate=%.4f (n=%ld, ties=%ld, excluded=%ld) implicit_accuracy=%.4f -> %s\n",
                report.win.rate, report.win.n, report.win.ties, report.win.excluded,
                report.accuracy.accuracy, a.out.c_str());
    return 0;
}

struct ProfileArgs {
    std::string checkpoint;
    std::string baseline;
    std::string spec = "default";
    std::string out = "profile";
    int T = 100;
    double beta_min = 0.0;
    double beta_max = 0.0;
    std::uint64_t seed = 0;
    int bins = 10;
    int samples = 256;
    int draws = 4;
};

int cmd_profile(const ProfileArgs& a) {
    for (const std::string& p : {a.checkpoint, a.baseline}) {
        if (!fs::exists(p)) {
            throw IoError("profile: checkpoint not found: " + p);
        }
    }
    const OracleSpec oracle = resolve_oracle(a.spec);
    const NoiseSchedule schedule = resolve_schedule(a.T, a.beta_min, a.beta_max);
    const DenoiserParams ref = load_checkpoint(a.checkpoint);
    const DenoiserParams init = load_checkpoint(a.baseline);
    const std::vector<Sample> monitor =
        gen_pretrain_dataset(oracle, a.samples, derive_seed(a.seed, kStreamEval));

    Rng rng(derive_seed(a.seed, kStreamEval + 1));
    const ProfileTable table = divergence_profile(ref, init, schedule, monitor, a.bins, a.draws, rng);

    fs::create_directories(a.out);
    const std::string path = (fs::path(a.out) / "divergence_profile.csv").string();
    std::ofstream os(path, std::ios::trunc);
    if (!os) {
        throw IoError("profile: cannot open " + path);
    }
    os << profile_csv(table.rows);
    std::printf("pooled divergence |mean|=%.8f over %d bins -> %s\n", table.pooled_abs, a.bins,
                path.c_str());
    return 0;
}

struct SchedulesArgs {
    int T = 100;
    double beta_min = 0.0;
    double beta_max = 0.0;
    double alpha = 1.0;
    double gamma = 0.9;
    std::string out = "schedules.csv";
};

int cmd_schedules(const SchedulesArgs& a) {
    const NoiseSchedule schedule = resolve_schedule(a.T, a.beta_min, a.beta_max);
    const ScaleSchedule lambda = make_scale_schedule(schedule, a.alpha);
    const TimestepSampler sampler = make_sampler(SamplerKind::categorical, a.gamma, a.T);

    std::ofstream os(a.out, std::ios::trunc);
    if (!os) {
        throw IoError("schedules: cannot open " + a.out);
    }
    os << "t,snr,lambda,sampler_prob\n";
    char buf[160];
    for (int t = 1; t <= a.T; ++t) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", t, schedule.snr_at(t),
                      lambda.at(t), sampler.probs[static_cast<std::size_t>(t) - 1]);
        os << buf;
    }
    if (!os) {
        throw IoError("schedules: write failed for " + a.out);
    }
    std::printf("wrote %d rows to %s\n", a.T, a.out.c_str());
    return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"desk-scale diffusion preference optimization lab"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "generate oracle-labeled preference pairs");
    gen_cmd->add_option("--spec", gen.spec, "oracle spec: 'default' or a config file")
        ->capture_default_str();
    gen_cmd->add_option("--pairs", gen.pairs, "number of pairs")->capture_default_str();
    gen_cmd->add_option("--seed", gen.seed, "generation seed")->capture_default_str();
    gen_cmd->add_option("--out", gen.out, "output JSONL path")->capture_default_str();

    TrainArgs pre;
    auto* pre_cmd = app.add_subcommand("pretrain", "train the base model on the oracle world");
    pre_cmd->add_option("--config", pre.config, "config JSON path")->required();
    pre_cmd->add_option("--out", pre.out, "override out_dir");
    pre_cmd->add_option("--seed", pre.seed, "override seed");

    TrainArgs fin;
    auto* fin_cmd = app.add_subcommand("finetune", "preference fine-tuning from a checkpoint");
    fin_cmd->add_option("--config", fin.config, "config JSON path")->required();
    fin_cmd->add_option("--checkpoint", fin.checkpoint, "initial (pretrained) checkpoint")
        ->required();
    fin_cmd->add_option("--out", fin.out, "override out_dir");
    fin_cmd->add_option("--seed", fin.seed, "override seed");

    EvalArgs ev;
    auto* ev_cmd = app.add_subcommand("eval", "matched-seed win rate and implicit-reward accuracy");
    ev_cmd->add_option("--checkpoint", ev.checkpoint, "model checkpoint")->required();
    ev_cmd->add_option("--baseline-checkpoint", ev.baseline, "baseline checkpoint")->required();
    ev_cmd->add_option("--pairs-file", ev.pairs_file, "held-out pairs JSONL (generated if absent)");
    ev_cmd->add_option("--spec", ev.spec, "oracle spec: 'default' or a config file")
        ->capture_default_str();
    ev_cmd->add_option("--out", ev.out, "report directory")->capture_default_str();
    ev_cmd->add_option("--T", ev.T, "diffusion steps")->capture_default_str();
    ev_cmd->add_option("--beta-min", ev.beta_min, "first-step beta (0: default for T)");
    ev_cmd->add_option("--beta-max", ev.beta_max, "last-step beta (0: default for T)");
    ev_cmd->add_option("--seed", ev.seed, "evaluation seed")->capture_default_str();
    ev_cmd->add_option("--eval-seeds", ev.eval_seeds, "sampling seeds per condition")
        ->capture_default_str();
    ev_cmd->add_option("--t-draws", ev.t_draws, "timestep draws per pair")->capture_default_str();
    ev_cmd->add_option("--bins", ev.bins, "timestep bins")->capture_default_str();

    ProfileArgs prof;
    auto* prof_cmd = app.add_subcommand("profile", "per-timestep-bin divergence table");
    prof_cmd->add_option("--checkpoint", prof.checkpoint, "reference checkpoint")->required();
    prof_cmd->add_option("--baseline-checkpoint", prof.baseline, "initial checkpoint")->required();
    prof_cmd->add_option("--spec", prof.spec, "oracle spec: 'default' or a config file")
        ->capture_default_str();
    prof_cmd->add_option("--out", prof.out, "output directory")->capture_default_str();
    prof_cmd->add_option("--T", prof.T, "diffusion steps")->capture_default_str();
    prof_cmd->add_option("--beta-min", prof.beta_min, "first-step beta (0: default for T)");
    prof_cmd->add_option("--beta-max", prof.beta_max, "last-step beta (0: default for T)");
    prof_cmd->add_option("--seed", prof.seed, "monitor seed")->capture_default_str();
    prof_cmd->add_option("--bins", prof.bins, "timestep bins")->capture_default_str();
    prof_cmd->add_option("--samples", prof.samples, "monitor samples")->capture_default_str();
    prof_cmd->add_option("--draws", prof.draws, "draws per sample per bin")->capture_default_str();

    SchedulesArgs sch;
    auto* sch_cmd =
        app.add_subcommand("schedules", "emit t, SNR, lambda(t) and sampler probabilities as CSV");
    sch_cmd->add_option("--T", sch.T, "diffusion steps")->capture_default_str();
    sch_cmd->add_option("--beta-min", sch.beta_min, "first-step beta (0: default for T)");
    sch_cmd->add_option("--beta-max", sch.beta_max, "last-step beta (0: default for T)");
    sch_cmd->add_option("--alpha", sch.alpha, "scale-range hyperparameter")->capture_default_str();
    sch_cmd->add_option("--gamma", sch.gamma, "sampler discount factor")->capture_default_str();
    sch_cmd->add_option("--out", sch.out, "output CSV path")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e, std::cout, std::cerr);
        return 1;
    }

    try {
        if (gen_cmd->parsed()) return cmd_gen_data(gen);
        if (pre_cmd->parsed()) return cmd_pretrain(pre);
        if (fin_cmd->parsed()) return cmd_finetune(fin);
        if (ev_cmd->parsed()) return cmd_eval(ev);
        if (prof_cmd->parsed()) return cmd_profile(prof);
        if (sch_cmd->parsed()) return cmd_schedules(sch);
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 2;
    } catch (const SamplingError& e) {
        std::cerr << "sampling error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 1;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace diffpo::cli
