// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <limits>

#include "diffpo/errors.hpp"
#include "diffpo/trainer.hpp"

using namespace diffpo;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

// Small fast configuration for loop tests.
TrainConfig tiny_config(const std::string& out_dir) {
    TrainConfig cfg;
    cfg.seed = 7;
    cfg.out_dir = out_dir;
    cfg.T = 20;
    cfg.beta_min = 1e-3;
    cfg.beta_max = 0.25;
    cfg.hidden = {16, 16};
    cfg.oracle = default_oracle_spec();
    cfg.data.n_pairs = 128;
    cfg.data.pairs_seed = 50;
    cfg.data.n_pretrain = 256;
    cfg.data.pretrain_seed = 51;
    cfg.objective = Objective::dpo;
    cfg.dpo_beta = 100.0;
    cfg.sampler_kind = SamplerKind::uniform;
    cfg.gamma = 0.9;
    cfg.alpha = 0.0;
    cfg.reference.mode = ReferenceMode::frozen;
    cfg.reference.tau = 8;
    cfg.reference.delta = 0.5;
    cfg.optimizer.lr = 1e-3;
    cfg.total_steps = 30;
    cfg.batch_size = 16;
    return cfg;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::path("trainer_test_tmp") / name) {
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all("trainer_test_tmp", ec);
    }
    std::string str(const std::string& sub = "") const { return (path / sub).string(); }
};

}  // namespace

TEST_CASE("config validation reports every violation with its field path") {
    const std::string bad = R"({
        "reference": {"tau": 0},
        "dpo": {"sampler": {"kind": "categorical", "gamma": 1.5}},
        "total_steps": 0
    })";
    const ValidationResult res = validate_config(bad);
    CHECK(!res.ok());
    CHECK(res.errors.size() == 3);
    bool saw_tau = false, saw_gamma = false, saw_steps = false;
    for (const std::string& e : res.errors) {
        saw_tau = saw_tau || e.find("reference.tau") != std::string::npos;
        saw_gamma = saw_gamma || (e.find("sampler.gamma") != std::string::npos &&
                                  e.find("(0,1]") != std::string::npos);
        saw_steps = saw_steps || e.find("total_steps") != std::string::npos;
    }
    CHECK(saw_tau);
    CHECK(saw_gamma);
    CHECK(saw_steps);
    CHECK(!res.config.has_value());
}

TEST_CASE("malformed json yields a parse error, not a crash") {
    const ValidationResult res = validate_config("{not json");
    CHECK(!res.ok());
    REQUIRE(res.errors.size() == 1);
    CHECK(res.errors[0].find("config:") == 0);
}

TEST_CASE("missing pairs file is reported at validation time") {
    const ValidationResult res =
        validate_config(R"({"data": {"pairs_path": "does_not_exist.jsonl"}})");
    CHECK(!res.ok());
    REQUIRE(res.errors.size() == 1);
    CHECK(res.errors[0].find("data.pairs_path") != std::string::npos);
    CHECK(res.errors[0].find("does_not_exist.jsonl") != std::string::npos);
}

TEST_CASE("default config round-trips through serialize and parse") {
    TrainConfig cfg;
    cfg.oracle = default_oracle_spec();
    const std::string text = serialize_config(cfg);
    const ValidationResult res = validate_config(text);
    REQUIRE(res.ok());
    CHECK(serialize_config(*res.config) == text);
}

TEST_CASE("an empty object resolves to the default config") {
    const ValidationResult res = validate_config("{}");
    REQUIRE(res.ok());
    TrainConfig defaults;
    defaults.oracle = default_oracle_spec();
    CHECK(serialize_config(*res.config) == serialize_config(defaults));
}

TEST_CASE("pretrain is bit-identical across reruns of the same config") {
    TempDir tmp("pre_det");
    TrainConfig cfg = tiny_config(tmp.str("a"));
    cfg.total_steps = 2;
    const RunArtifacts a = pretrain(cfg);
    cfg.out_dir = tmp.str("b");
    const RunArtifacts b = pretrain(cfg);
    CHECK(slurp(a.checkpoint_path) == slurp(b.checkpoint_path));
    CHECK(slurp(a.metrics_path) == slurp(b.metrics_path));
}

TEST_CASE("pretrain reduces the diffusion loss on the default world") {
    TempDir tmp("pre_progress");
    TrainConfig cfg = tiny_config(tmp.str("run"));
    cfg.total_steps = 400;
    cfg.batch_size = 32;
    const RunArtifacts art = pretrain(cfg);

    // first recorded loss sits at the zero-predictor value E||eps||^2 = d
    std::ifstream is(art.metrics_path);
    std::string first_line;
    std::getline(is, first_line);
    const auto j = nlohmann::json::parse(first_line);
    REQUIRE(j["kind"] == "train");
    const double first_loss = j["payload"]["loss"].get<double>();
    CHECK(std::abs(first_loss - 2.0) < 4.0 * std::sqrt(2.0 * 2.0 / 32.0));
    CHECK(art.final_loss < first_loss);
}

TEST_CASE("finetune with frozen mode equals the manager-free loop bit for bit") {
    TempDir tmp("ft_frozen");
    TrainConfig cfg = tiny_config(tmp.str("managed"));
    cfg.reference.mode = ReferenceMode::frozen;

    const DenoiserParams init = init_denoiser(cfg.arch(), 99);
    ReferenceManager manager(cfg.reference, init);
    const RunArtifacts managed = finetune_with_manager(cfg, init, &manager);

    cfg.out_dir = tmp.str("bare");
    const RunArtifacts bare = finetune_with_manager(cfg, init, nullptr);

    CHECK(slurp(managed.checkpoint_path) == slurp(bare.checkpoint_path));
    CHECK(slurp(managed.metrics_path) == slurp(bare.metrics_path));
}

TEST_CASE("update_freeze with tau beyond the horizon equals frozen mode") {
    TempDir tmp("ft_tau");
    TrainConfig cfg = tiny_config(tmp.str("frozen"));
    cfg.reference.mode = ReferenceMode::frozen;
    const DenoiserParams init = init_denoiser(cfg.arch(), 99);
    {
        ReferenceManager manager(cfg.reference, init);
        finetune_with_manager(cfg, init, &manager);
    }
    TrainConfig cfg2 = cfg;
    cfg2.out_dir = tmp.str("never_fires");
    cfg2.reference.mode = ReferenceMode::update_freeze;
    cfg2.reference.tau = static_cast<int>(cfg.total_steps) + 1;
    {
        ReferenceManager manager(cfg2.reference, init);
        finetune_with_manager(cfg2, init, &manager);
    }
    CHECK(slurp(tmp.str("frozen/final.ckpt")) == slurp(tmp.str("never_fires/final.ckpt")));
    CHECK(slurp(tmp.str("frozen/metrics.jsonl")) == slurp(tmp.str("never_fires/metrics.jsonl")));
}

TEST_CASE("two seeds give different trajectories that both complete") {
    TempDir tmp("ft_seeds");
    TrainConfig cfg = tiny_config(tmp.str("s1"));
    cfg.reference.mode = ReferenceMode::update_freeze;
    cfg.reference.tau = 8;
    const DenoiserParams init = init_denoiser(cfg.arch(), 99);
    ReferenceManager m1(cfg.reference, init);
    const RunArtifacts a = finetune_with_manager(cfg, init, &m1);

    TrainConfig cfg2 = cfg;
    cfg2.seed = cfg.seed + 1;
    cfg2.out_dir = tmp.str("s2");
    ReferenceManager m2(cfg2.reference, init);
    const RunArtifacts b = finetune_with_manager(cfg2, init, &m2);

    CHECK(slurp(a.checkpoint_path) != slurp(b.checkpoint_path));
    CHECK(a.final_loss != b.final_loss);
}

TEST_CASE("metrics steps increase and divergence events only land on tau multiples") {
    TempDir tmp("ft_metrics");
    TrainConfig cfg = tiny_config(tmp.str("run"));
    cfg.reference.mode = ReferenceMode::update_freeze;
    cfg.reference.tau = 8;
    cfg.total_steps = 40;
    const DenoiserParams init = init_denoiser(cfg.arch(), 99);
    ReferenceManager manager(cfg.reference, init);
    const RunArtifacts art = finetune_with_manager(cfg, init, &manager);

    std::ifstream is(art.metrics_path);
    std::string line;
    long prev_step = 0;
    long divergence_events = 0;
    while (std::getline(is, line)) {
        const auto j = nlohmann::json::parse(line);
        const long step = j["step"].get<long>();
        CHECK(step >= prev_step);  // train and divergence lines share a step
        prev_step = step;
        if (j["kind"] == "divergence") {
            ++divergence_events;
            CHECK(step % cfg.reference.tau == 0);
        }
    }
    CHECK(divergence_events == 5);
    CHECK(art.divergence_events.size() == 5);
}

TEST_CASE("finetune runs from a checkpoint file and validates the arch") {
    TempDir tmp("ft_ckpt");
    TrainConfig cfg = tiny_config(tmp.str("pre"));
    cfg.total_steps = 5;
    const RunArtifacts pre = pretrain(cfg);

    cfg.out_dir = tmp.str("ft");
    const RunArtifacts ft = finetune(cfg, pre.checkpoint_path);
    CHECK(fs::exists(ft.checkpoint_path));
    CHECK(fs::exists(ft.ref_checkpoint_path));

    TrainConfig mismatched = cfg;
    mismatched.hidden = {8};
    mismatched.out_dir = tmp.str("bad");
    CHECK_THROWS_AS(finetune(mismatched, pre.checkpoint_path), ConfigError);
}

TEST_CASE("finetune aborts on a non-finite loss and retains a checkpoint") {
    TempDir tmp("ft_abort");
    TrainConfig cfg = tiny_config(tmp.str("run"));
    DenoiserParams poisoned = init_denoiser(cfg.arch(), 99);
    poisoned.values[5] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(finetune_with_manager(cfg, poisoned, nullptr), NumericError);
    CHECK(fs::exists(tmp.str("run/final.ckpt")));
    CHECK(fs::exists(tmp.str("run/metrics.jsonl")));
}

TEST_CASE("pairs resolve from a file when a path is configured") {
    TempDir tmp("pairs_file");
    const OracleSpec spec = default_oracle_spec();
    const auto pairs = gen_preference_pairs(spec, 64, 123);
    const std::string path = tmp.str("pairs.jsonl");
    save_pairs(path, pairs, spec.d, spec.condition_count());

    TrainConfig cfg = tiny_config(tmp.str("run"));
    cfg.data.pairs_path = path;
    const auto resolved = resolve_pairs(cfg);
    REQUIRE(resolved.size() == 64);
    CHECK(resolved[0].x_w == pairs[0].x_w);
}
