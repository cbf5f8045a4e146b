// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "diffpo/denoiser.hpp"
#include "diffpo/diffusion.hpp"
#include "diffpo/preference.hpp"
#include "diffpo/rng.hpp"

namespace diffpo {

enum class SamplerKind { uniform, categorical };

/// Distribution over training timesteps. Categorical weights decay
/// geometrically, probs[t] proportional to gamma^t, which oversamples low t.
struct TimestepSampler {
    SamplerKind kind = SamplerKind::uniform;
    double gamma = 1.0;
    std::vector<double> probs;  // length T, sums to 1

    int draw(Rng& rng) const;
};

/// Per-timestep reward scale lambda(t) = 1 + alpha * minmax_norm(1/sqrt(SNR(t))).
/// Equals 1 at t = 1 (highest SNR) and 1 + alpha at t = T.
struct ScaleSchedule {
    double alpha = 0.0;
    std::vector<double> values;  // length T

    double at(int t) const { return values[static_cast<std::size_t>(t) - 1]; }
};

struct DpoConfig {
    double beta = 500.0;
    int T = 0;
    TimestepSampler sampler;
    ScaleSchedule schedule;
};

TimestepSampler make_sampler(SamplerKind kind, double gamma, int T);
ScaleSchedule make_scale_schedule(const NoiseSchedule& schedule, double alpha);

/// Timestep-wise implicit reward:
///   r_t(x0) = -(||eps - theta(x_t,t,c)||^2 - ||eps - ref(x_t,t,c)||^2),
/// both models evaluated on the same (t, eps, x_t). Positive when theta
/// denoises x0 better than ref at t.
double implicit_reward(const Predictor& theta, const Predictor& ref,
                       const NoiseSchedule& schedule, const Sample& x0, int t,
                       const std::vector<double>& eps);
double implicit_reward(const DenoiserParams& theta, const DenoiserParams& ref,
                       const NoiseSchedule& schedule, const Sample& x0, int t,
                       const std::vector<double>& eps);

struct PairLossDiag {
    int t = 0;
    double r_w = 0.0;
    double r_l = 0.0;
    double margin = 0.0;
};

/// -log sigmoid(coeff * margin), computed as softplus(-coeff * margin).
double pair_loss_from_margin(double margin, double coeff);

/// One preference-pair loss: draws a single t from cfg.sampler and
/// independent noise per arm (order: t, eps_w, eps_l), then
///   loss = -log sigmoid(beta * T * lambda(t) * (r_w - r_l)).
double dpo_pair_loss(const DenoiserParams& theta, const DenoiserParams& ref,
                     const NoiseSchedule& schedule, const PreferencePair& pair,
                     const DpoConfig& cfg, Rng& rng, PairLossDiag* diag = nullptr);

/// Plain diffusion loss on the winner only, weighting identically 1 and t
/// drawn from cfg.sampler.
double sft_loss(const DenoiserParams& theta, const NoiseSchedule& schedule,
                const PreferencePair& pair, const DpoConfig& cfg, Rng& rng);

// Tape builders used by the training loop. The tape must be bound to theta.
// Each consumes the same rng draws, in the same order, as its plain
// counterpart, so plain and taped values agree exactly.
Tape::Value dpo_pair_loss_node(Tape& tape, const DenoiserParams& ref,
                               const NoiseSchedule& schedule, const PreferencePair& pair,
                               const DpoConfig& cfg, Rng& rng, PairLossDiag* diag = nullptr);
Tape::Value sft_loss_node(Tape& tape, const NoiseSchedule& schedule, const PreferencePair& pair,
                          const DpoConfig& cfg, Rng& rng);
Tape::Value ddpm_loss_node(Tape& tape, const NoiseSchedule& schedule,
                           const std::vector<Sample>& batch, const TimestepSampler& sampler,
                           const Weighting& weighting, Rng& rng);

}  // namespace diffpo
