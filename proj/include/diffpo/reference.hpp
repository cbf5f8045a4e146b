// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "diffpo/denoiser.hpp"
#include "diffpo/diffusion.hpp"

namespace diffpo {

enum class ReferenceMode { frozen, update_unregularized, update_freeze, update_reinit };

enum class UpdateAction { no_op, updated, skipped_frozen, reinitialized };

const char* to_string(ReferenceMode mode);
const char* to_string(UpdateAction action);
ReferenceMode reference_mode_from_string(const std::string& s);

struct ReferencePolicy {
    ReferenceMode mode = ReferenceMode::frozen;
    int tau = 64;               // steps between update attempts
    double delta = 0.05;        // divergence threshold against the initial model
    int monitor_batch_size = 16;
    int monitor_t_samples = 4;
};

struct DivergenceEvent {
    long step = 0;
    double divergence = 0.0;
    UpdateAction action = UpdateAction::no_op;
};

struct ReferenceState {
    DenoiserParams ref_params;
    DenoiserParams init_params;  // never mutated after construction
    bool frozen = false;
    double last_divergence = 0.0;
    std::vector<DivergenceEvent> history;
};

enum class KlWeighting { plain, gaussian_prefactor };

/// Forward-process divergence estimate between two parameter sets:
/// |mean over (item, t-draw) of (||eps - ref(x_t)||^2 - ||eps - init(x_t)||^2) * w(t)|
/// with the same (t, eps) fed to both models; t uniform, t_samples draws per
/// item, draw order per item: t then the noise components. w(t) = 1 for
/// KlWeighting::plain; gaussian_prefactor applies the per-step Gaussian KL
/// coefficient T * beta_t / (2 alpha_t (1 - alpha_bar_t)) instead.
double estimate_divergence(const Predictor& ref, const Predictor& init,
                           const NoiseSchedule& schedule, const std::vector<Sample>& monitor,
                           int t_samples, Rng& rng, KlWeighting weighting = KlWeighting::plain);
double estimate_divergence(const DenoiserParams& ref, const DenoiserParams& init,
                           const NoiseSchedule& schedule, const std::vector<Sample>& monitor,
                           int t_samples, Rng& rng, KlWeighting weighting = KlWeighting::plain);

/// Owns the reference parameters during training and applies the update
/// policy every tau steps. The candidate (current theta) is measured against
/// the initial model before installation, so an installed reference always
/// satisfied the divergence bound at installation time.
class ReferenceManager {
public:
    ReferenceManager(ReferencePolicy policy, const DenoiserParams& init_params);

    /// Policy step. At steps that are multiples of tau (and mode != frozen)
    /// estimates the candidate divergence and applies the mode's rule;
    /// otherwise a no_op that leaves the state untouched.
    UpdateAction maybe_update(long step, const DenoiserParams& theta,
                              const NoiseSchedule& schedule, const std::vector<Sample>& monitor,
                              Rng& rng);

    /// Same transition logic with an injected divergence estimate; the
    /// callback runs only when this update step actually measures.
    UpdateAction maybe_update_with(long step, const DenoiserParams& theta,
                                   const std::function<double()>& estimate);

    const ReferenceState& inspect() const { return state_; }
    const DenoiserParams& ref_params() const { return state_.ref_params; }
    const ReferencePolicy& policy() const { return policy_; }

private:
    ReferencePolicy policy_;
    ReferenceState state_;
    long last_step_ = -1;
};

}  // namespace diffpo
