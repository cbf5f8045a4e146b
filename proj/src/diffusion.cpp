// SPDX-License-Identifier: Apache-2.0
#include "diffpo/diffusion.hpp"

#include <cmath>
#include <string>

#include "diffpo/errors.hpp"

namespace diffpo {

bool all_finite(const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

NoiseSchedule make_schedule(int T, double beta_min, double beta_max) {
    if (T < 2) {
        throw ConfigError("make_schedule: T must be >= 2, got " + std::to_string(T));
    }
    if (!(beta_min > 0.0 && beta_min < 1.0) || !(beta_max > 0.0 && beta_max < 1.0)) {
        throw ConfigError("make_schedule: betas must lie in (0,1)");
    }
    if (beta_min > beta_max) {
        throw ConfigError("make_schedule: beta_min must not exceed beta_max");
    }

    NoiseSchedule s;
    s.T = T;
    s.alpha.resize(static_cast<std::size_t>(T));
    s.alpha_bar.resize(static_cast<std::size_t>(T));
    s.snr.resize(static_cast<std::size_t>(T));

    double running = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double beta =
            beta_min + (static_cast<double>(t - 1) / static_cast<double>(T - 1)) * (beta_max - beta_min);
        const double a = 1.0 - beta;
        running *= a;
        s.alpha[static_cast<std::size_t>(t) - 1] = a;
        s.alpha_bar[static_cast<std::size_t>(t) - 1] = running;
        s.snr[static_cast<std::size_t>(t) - 1] = running / (1.0 - running);
    }
    return s;
}

double default_beta_min(int T) { return 1e-4 * (1000.0 / static_cast<double>(T)); }
double default_beta_max(int T) { return 0.02 * (1000.0 / static_cast<double>(T)); }

NoisedSample forward_sample(const NoiseSchedule& schedule, const Sample& x0, int t,
                            const std::vector<double>& eps) {
    if (t < 1 || t > schedule.T) {
        throw InputError("forward_sample: timestep " + std::to_string(t) + " outside {1.." +
                         std::to_string(schedule.T) + "}");
    }
    if (eps.size() != x0.x.size()) {
        throw InputError("forward_sample: noise dimension " + std::to_string(eps.size()) +
                         " does not match data dimension " + std::to_string(x0.x.size()));
    }
    const double ab = schedule.alpha_bar_at(t);
    const double signal = std::sqrt(ab);
    const double noise = std::sqrt(1.0 - ab);

    NoisedSample out;
    out.t = t;
    out.eps = eps;
    out.x_t.resize(x0.x.size());
    for (std::size_t i = 0; i < x0.x.size(); ++i) {
        out.x_t[i] = signal * x0.x[i] + noise * eps[i];
    }
    return out;
}

TimestepDraw uniform_timesteps(int T) {
    return [T](Rng& rng) { return rng.uniform_int(1, T); };
}

double ddpm_loss(const Predictor& predict, const NoiseSchedule& schedule,
                 const std::vector<Sample>& batch, const TimestepDraw& t_sampler,
                 const Weighting& weighting, Rng& rng) {
    if (batch.empty()) {
        throw InputError("ddpm_loss: empty batch");
    }
    double total = 0.0;
    for (const Sample& item : batch) {
        const int t = t_sampler(rng);
        const std::vector<double> eps = rng.normal_vec(item.x.size());
        const NoisedSample noised = forward_sample(schedule, item, t, eps);
        const std::vector<double> pred = predict(noised.x_t, t, item.c);
        if (pred.size() != eps.size()) {
            throw InputError("ddpm_loss: predictor output dimension mismatch");
        }
        double err = 0.0;
        for (std::size_t i = 0; i < eps.size(); ++i) {
            const double d = eps[i] - pred[i];
            err += d * d;
        }
        total += weighting(t) * err;
    }
    return total * (1.0 / static_cast<double>(batch.size()));
}

Sample ancestral_sample(const Predictor& predict, const NoiseSchedule& schedule, int dim,
                        int c, Rng& rng) {
    const int T = schedule.T;
    std::vector<double> x = rng.normal_vec(static_cast<std::size_t>(dim));  // x_T ~ N(0, I)
    for (int t = T; t >= 1; --t) {
        const std::vector<double> eps_hat = predict(x, t, c);
        const double a = schedule.alpha_at(t);
        const double ab = schedule.alpha_bar_at(t);
        const double ab_prev = (t > 1) ? schedule.alpha_bar_at(t - 1) : 1.0;
        const double mean_scale = 1.0 / std::sqrt(a);
        const double eps_coef = (1.0 - a) / std::sqrt(1.0 - ab);
        const double sigma2 = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - a);
        const double sigma = std::sqrt(sigma2);
        for (std::size_t i = 0; i < x.size(); ++i) {
            double v = mean_scale * (x[i] - eps_coef * eps_hat[i]);
            if (t > 1) {
                v += sigma * rng.normal();
            }
            x[i] = v;
        }
        if (!all_finite(x)) {
            throw SamplingError("ancestral_sample: non-finite state at timestep " + std::to_string(t), t);
        }
    }
    return Sample{std::move(x), c};
}

}  // namespace diffpo
