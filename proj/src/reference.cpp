// SPDX-License-Identifier: Apache-2.0
#include "diffpo/reference.hpp"

#include <cmath>

#include "diffpo/errors.hpp"

namespace diffpo {

const char* to_string(ReferenceMode mode) {
    switch (mode) {
        case ReferenceMode::frozen: return "frozen";
        case ReferenceMode::update_unregularized: return "update_unregularized";
        case ReferenceMode::update_freeze: return "update_freeze";
        case ReferenceMode::update_reinit: return "update_reinit";
    }
    return "?";
}

const char* to_string(UpdateAction action) {
    switch (action) {
        case UpdateAction::no_op: return "no_op";
        case UpdateAction::updated: return "updated";
        case UpdateAction::skipped_frozen: return "skipped_frozen";
        case UpdateAction::reinitialized: return "reinitialized";
    }
    return "?";
}

ReferenceMode reference_mode_from_string(const std::string& s) {
    if (s == "frozen") return ReferenceMode::frozen;
    if (s == "update_unregularized") return ReferenceMode::update_unregularized;
    if (s == "update_freeze") return ReferenceMode::update_freeze;
    if (s == "update_reinit") return ReferenceMode::update_reinit;
    throw ConfigError("unknown reference mode '" + s + "'");
}

namespace {

double kl_weight(const NoiseSchedule& schedule, int t, KlWeighting weighting) {
    if (weighting == KlWeighting::plain) {
        return 1.0;
    }
    const double a = schedule.alpha_at(t);
    const double ab = schedule.alpha_bar_at(t);
    const double beta = 1.0 - a;
    return static_cast<double>(schedule.T) * beta / (2.0 * a * (1.0 - ab));
}

template <typename PredictW, typename PredictI>
double estimate_divergence_impl(const PredictW& ref, const PredictI& init,
                                const NoiseSchedule& schedule,
                                const std::vector<Sample>& monitor, int t_samples, Rng& rng,
                                KlWeighting weighting) {
    if (monitor.empty()) {
        throw InputError("estimate_divergence: empty monitor set");
    }
    if (t_samples < 1) {
        throw InputError("estimate_divergence: t_samples must be >= 1");
    }
    double total = 0.0;
    long n = 0;
    for (const Sample& item : monitor) {
        for (int k = 0; k < t_samples; ++k) {
            const int t = rng.uniform_int(1, schedule.T);
            const std::vector<double> eps = rng.normal_vec(item.x.size());
            const NoisedSample noised = forward_sample(schedule, item, t, eps);
            const std::vector<double> pr = ref(noised.x_t, t, item.c);
            const std::vector<double> pi = init(noised.x_t, t, item.c);
            double err_ref = 0.0;
            double err_init = 0.0;
            for (std::size_t i = 0; i < eps.size(); ++i) {
                const double dr = eps[i] - pr[i];
                const double di = eps[i] - pi[i];
                err_ref += dr * dr;
                err_init += di * di;
            }
            total += (err_ref - err_init) * kl_weight(schedule, t, weighting);
            ++n;
        }
    }
    const double estimate = std::abs(total / static_cast<double>(n));
    if (!std::isfinite(estimate)) {
        throw NumericError("estimate_divergence: non-finite estimate");
    }
    return estimate;
}

}  // namespace

double estimate_divergence(const Predictor& ref, const Predictor& init,
                           const NoiseSchedule& schedule, const std::vector<Sample>& monitor,
                           int t_samples, Rng& rng, KlWeighting weighting) {
    return estimate_divergence_impl(ref, init, schedule, monitor, t_samples, rng, weighting);
}

double estimate_divergence(const DenoiserParams& ref, const DenoiserParams& init,
                           const NoiseSchedule& schedule, const std::vector<Sample>& monitor,
                           int t_samples, Rng& rng, KlWeighting weighting) {
    const auto pr = [&ref](const std::vector<double>& x_t, int t, int c) {
        return predict_eps(ref, x_t, t, c);
    };
    const auto pi = [&init](const std::vector<double>& x_t, int t, int c) {
        return predict_eps(init, x_t, t, c);
    };
    return estimate_divergence_impl(pr, pi, schedule, monitor, t_samples, rng, weighting);
}

ReferenceManager::ReferenceManager(ReferencePolicy policy, const DenoiserParams& init_params)
    : policy_(std::move(policy)) {
    if (policy_.tau < 1) {
        throw ConfigError("ReferencePolicy: tau must be >= 1");
    }
    if (!(policy_.delta > 0.0)) {
        throw ConfigError("ReferencePolicy: delta must be > 0");
    }
    if (policy_.monitor_batch_size < 1 || policy_.monitor_t_samples < 1) {
        throw ConfigError("ReferencePolicy: monitor sizes must be >= 1");
    }
    state_.init_params = snapshot(init_params);
    state_.ref_params = snapshot(init_params);
}

UpdateAction ReferenceManager::maybe_update(long step, const DenoiserParams& theta,
                                            const NoiseSchedule& schedule,
                                            const std::vector<Sample>& monitor, Rng& rng) {
    return maybe_update_with(step, theta, [&]() {
        return estimate_divergence(theta, state_.init_params, schedule, monitor,
                                   policy_.monitor_t_samples, rng);
    });
}

UpdateAction ReferenceManager::maybe_update_with(long step, const DenoiserParams& theta,
                                                 const std::function<double()>& estimate) {
    if (step <= last_step_) {
        throw InputError("ReferenceManager: step must increase across calls");
    }
    last_step_ = step;

    if (policy_.mode == ReferenceMode::frozen || step % policy_.tau != 0) {
        return UpdateAction::no_op;
    }

    if (policy_.mode == ReferenceMode::update_freeze && state_.frozen) {
        state_.history.push_back({step, state_.last_divergence, UpdateAction::skipped_frozen});
        return UpdateAction::skipped_frozen;
    }

    const double div = estimate();
    if (!std::isfinite(div)) {
        throw NumericError("ReferenceManager: non-finite divergence at step " +
                           std::to_string(step));
    }

    UpdateAction action = UpdateAction::no_op;
    switch (policy_.mode) {
        case ReferenceMode::frozen:
            break;  // unreachable, gated above
        case ReferenceMode::update_unregularized:
            state_.ref_params = snapshot(theta);
            action = UpdateAction::updated;
            break;
        case ReferenceMode::update_freeze:
            if (div <= policy_.delta) {
                state_.ref_params = snapshot(theta);
                action = UpdateAction::updated;
            } else {
                state_.frozen = true;  // absorbing: the reference never moves again
                action = UpdateAction::skipped_frozen;
            }
            break;
        case ReferenceMode::update_reinit:
            if (div <= policy_.delta) {
                state_.ref_params = snapshot(theta);
                action = UpdateAction::updated;
            } else {
                state_.ref_params = snapshot(state_.init_params);
                action = UpdateAction::reinitialized;
            }
            break;
    }
    state_.last_divergence = div;
    state_.history.push_back({step, div, action});
    return action;
}

}  // namespace diffpo
