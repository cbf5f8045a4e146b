// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "diffpo/denoiser.hpp"
#include "diffpo/objectives.hpp"
#include "diffpo/preference.hpp"
#include "diffpo/reference.hpp"

namespace diffpo {

enum class Objective { sft, dpo };

struct DataConfig {
    std::string pairs_path;  // when set, pairs are loaded instead of generated
    int n_pairs = 8192;
    std::uint64_t pairs_seed = 1001;
    int n_pretrain = 8192;
    std::uint64_t pretrain_seed = 2002;
};

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Declarative experiment description. One config drives either pretraining
/// (objective-independent fields) or preference fine-tuning.
struct TrainConfig {
    std::uint64_t seed = 1;
    std::string out_dir = "run";
    int T = 100;
    double beta_min = 0.0;  // 0 means: derive the default for T
    double beta_max = 0.0;
    std::vector<int> hidden = {64, 64};
    int t_embed_dim = 8;
    OracleSpec oracle;
    DataConfig data;
    Objective objective = Objective::dpo;
    double dpo_beta = 500.0;
    SamplerKind sampler_kind = SamplerKind::uniform;
    double gamma = 0.9;
    double alpha = 0.0;
    ReferencePolicy reference;
    OptimizerConfig optimizer;
    long total_steps = 2000;
    int batch_size = 64;
    long checkpoint_every = 0;  // 0: final checkpoint only

    Arch arch() const;
    NoiseSchedule schedule() const;
    DpoConfig dpo_config() const;
};

/// Parse + validate; either a complete config or the full list of
/// violations, each prefixed with its field path.
struct ValidationResult {
    std::optional<TrainConfig> config;
    std::vector<std::string> errors;
    bool ok() const { return errors.empty(); }
};

ValidationResult validate_config(const std::string& raw_text);

/// Canonical JSON echo of a resolved config; validate_config(serialize(c))
/// reproduces c exactly.
std::string serialize_config(const TrainConfig& cfg);

/// validate_config over a file; throws ConfigError with all messages joined.
TrainConfig load_config_file(const std::string& path);

struct RunArtifacts {
    std::string out_dir;
    std::string checkpoint_path;      // final training checkpoint
    std::string ref_checkpoint_path;  // final reference (finetune only)
    std::string metrics_path;         // JSON Lines {step, kind, payload}
    std::string config_path;          // resolved config echo
    double final_loss = 0.0;
    double wall_seconds = 0.0;  // kept out of the metrics stream
    std::vector<DivergenceEvent> divergence_events;
};

/// Train the base model with the plain diffusion objective (uniform t,
/// weighting 1) on the oracle's pretraining distribution.
RunArtifacts pretrain(const TrainConfig& cfg);

/// Preference fine-tuning from a pretrained checkpoint: per step, one pair
/// batch, mean pair loss, one optimizer step, then the reference-manager
/// policy step. Deterministic per (config, seed).
RunArtifacts finetune(const TrainConfig& cfg, const std::string& init_checkpoint);

/// Loop entry with explicit initial parameters; `manager` may be null, in
/// which case the reference stays pinned to the initial parameters and no
/// policy step runs.
RunArtifacts finetune_with_manager(const TrainConfig& cfg, const DenoiserParams& init_params,
                                   ReferenceManager* manager);

/// Pairs for a config: loaded from data.pairs_path when set, generated from
/// the oracle otherwise.
std::vector<PreferencePair> resolve_pairs(const TrainConfig& cfg);

}  // namespace diffpo
