// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "diffpo/rng.hpp"

namespace diffpo {

/// Per-timestep tables of a discrete forward process, 1-based timesteps
/// t in {1..T} stored at index t-1.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> alpha;      // per-step retention factor, in (0,1)
    std::vector<double> alpha_bar;  // cumulative product of alpha, strictly decreasing
    std::vector<double> snr;        // alpha_bar / (1 - alpha_bar), strictly decreasing

    double alpha_at(int t) const { return alpha[static_cast<std::size_t>(t) - 1]; }
    double alpha_bar_at(int t) const { return alpha_bar[static_cast<std::size_t>(t) - 1]; }
    double snr_at(int t) const { return snr[static_cast<std::size_t>(t) - 1]; }
};

/// A clean data point with its condition id.
struct Sample {
    std::vector<double> x;
    int c = 0;
};

/// A noised data point, carrying the timestep and the drawn noise.
struct NoisedSample {
    std::vector<double> x_t;
    int t = 0;
    std::vector<double> eps;
};

/// Noise predictor interface: (x_t, t, c) -> estimated noise.
using Predictor = std::function<std::vector<double>(const std::vector<double>& x_t, int t, int c)>;

/// Timestep sampler interface: rng -> t in {1..T}.
using TimestepDraw = std::function<int(Rng&)>;

/// Per-timestep loss weighting, t -> weight.
using Weighting = std::function<double(int)>;

/// Linear variance schedule: beta ramps from beta_min to beta_max over T steps,
/// alpha[t] = 1 - beta[t]. Requires T >= 2 and 0 < beta_min <= beta_max < 1.
NoiseSchedule make_schedule(int T, double beta_min, double beta_max);

/// Default betas for a given T: the standard 1000-step values scaled by
/// 1000/T so that the terminal alpha_bar stays roughly constant across T.
double default_beta_min(int T);
double default_beta_max(int T);

/// Closed-form forward marginal draw:
/// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
NoisedSample forward_sample(const NoiseSchedule& schedule, const Sample& x0, int t,
                            const std::vector<double>& eps);

/// Mean over the batch of weighting(t) * ||eps - predict(x_t, t, c)||^2 with
/// per-item independent (t, eps) draws. Draw order per item: t, then the
/// noise components, so a fixed seed fixes the value exactly.
double ddpm_loss(const Predictor& predict, const NoiseSchedule& schedule,
                 const std::vector<Sample>& batch, const TimestepDraw& t_sampler,
                 const Weighting& weighting, Rng& rng);

/// Uniform draw over {1..T}.
TimestepDraw uniform_timesteps(int T);

/// Posterior-mean ancestral sampler: x_T ~ N(0, I), then for t = T..1
///   x_{t-1} = (x_t - (1-alpha_t)/sqrt(1-alpha_bar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z
/// with sigma_t^2 = (1-alpha_bar_{t-1})/(1-alpha_bar_t) * (1-alpha_t) and z = 0 at t = 1.
/// `dim` is the data dimension of the chain state.
/// Throws SamplingError naming the timestep if the chain goes non-finite.
Sample ancestral_sample(const Predictor& predict, const NoiseSchedule& schedule, int dim,
                        int c, Rng& rng);

bool all_finite(const std::vector<double>& v);

}  // namespace diffpo
