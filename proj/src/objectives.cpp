// SPDX-License-Identifier: Apache-2.0
#include "diffpo/objectives.hpp"

#include <cmath>
#include <string>

#include "diffpo/errors.hpp"

namespace diffpo {

int TimestepSampler::draw(Rng& rng) const {
    const int T = static_cast<int>(probs.size());
    if (kind == SamplerKind::uniform) {
        return rng.uniform_int(1, T);
    }
    const double u = rng.uniform01();
    double cum = 0.0;
    for (int t = 1; t <= T; ++t) {
        cum += probs[static_cast<std::size_t>(t) - 1];
        if (u < cum) {
            return t;
        }
    }
    return T;  // u landed in rounding slack past the last cumulative sum
}

TimestepSampler make_sampler(SamplerKind kind, double gamma, int T) {
    if (T < 1) {
        throw ConfigError("make_sampler: T must be >= 1");
    }
    if (!(gamma > 0.0) || gamma > 1.0) {
        throw ConfigError("make_sampler: gamma must lie in (0,1], got " + std::to_string(gamma));
    }
    TimestepSampler s;
    s.kind = kind;
    s.gamma = gamma;
    s.probs.resize(static_cast<std::size_t>(T));
    if (kind == SamplerKind::uniform || gamma == 1.0) {
        const double p = 1.0 / static_cast<double>(T);
        for (auto& v : s.probs) {
            v = p;
        }
        return s;
    }
    double total = 0.0;
    double w = 1.0;
    for (int t = 1; t <= T; ++t) {
        w *= gamma;  // gamma^t
        s.probs[static_cast<std::size_t>(t) - 1] = w;
        total += w;
    }
    for (auto& v : s.probs) {
        v /= total;
    }
    return s;
}

ScaleSchedule make_scale_schedule(const NoiseSchedule& schedule, double alpha) {
    if (alpha < 0.0) {
        throw ConfigError("make_scale_schedule: alpha must be >= 0");
    }
    const int T = schedule.T;
    std::vector<double> w(static_cast<std::size_t>(T));
    double wmin = std::numeric_limits<double>::infinity();
    double wmax = -std::numeric_limits<double>::infinity();
    for (int t = 1; t <= T; ++t) {
        const double v = 1.0 / std::sqrt(schedule.snr_at(t));
        w[static_cast<std::size_t>(t) - 1] = v;
        wmin = std::min(wmin, v);
        wmax = std::max(wmax, v);
    }
    if (!(wmax > wmin)) {
        throw ConfigError("make_scale_schedule: degenerate schedule, SNR is constant over t");
    }
    ScaleSchedule out;
    out.alpha = alpha;
    out.values.resize(static_cast<std::size_t>(T));
    for (int t = 1; t <= T; ++t) {
        const double normed = (w[static_cast<std::size_t>(t) - 1] - wmin) / (wmax - wmin);
        out.values[static_cast<std::size_t>(t) - 1] = 1.0 + alpha * normed;
    }
    return out;
}

namespace {

double squared_error(const std::vector<double>& eps, const std::vector<double>& pred) {
    double acc = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const double d = eps[i] - pred[i];
        acc += d * d;
    }
    return acc;
}

}  // namespace

double implicit_reward(const Predictor& theta, const Predictor& ref,
                       const NoiseSchedule& schedule, const Sample& x0, int t,
                       const std::vector<double>& eps) {
    const NoisedSample noised = forward_sample(schedule, x0, t, eps);
    const double err_theta = squared_error(eps, theta(noised.x_t, t, x0.c));
    const double err_ref = squared_error(eps, ref(noised.x_t, t, x0.c));
    const double r = -(err_theta - err_ref);
    if (!std::isfinite(r)) {
        throw NumericError("implicit_reward: non-finite value at t=" + std::to_string(t));
    }
    return r;
}

double implicit_reward(const DenoiserParams& theta, const DenoiserParams& ref,
                       const NoiseSchedule& schedule, const Sample& x0, int t,
                       const std::vector<double>& eps) {
    const NoisedSample noised = forward_sample(schedule, x0, t, eps);
    const double err_theta = squared_error(eps, predict_eps(theta, noised.x_t, t, x0.c));
    const double err_ref = squared_error(eps, predict_eps(ref, noised.x_t, t, x0.c));
    const double r = -(err_theta - err_ref);
    if (!std::isfinite(r)) {
        throw NumericError("implicit_reward: non-finite value at t=" + std::to_string(t));
    }
    return r;
}

double pair_loss_from_margin(double margin, double coeff) {
    return stable_softplus(-coeff * margin);
}

Tape::Value dpo_pair_loss_node(Tape& tape, const DenoiserParams& ref,
                               const NoiseSchedule& schedule, const PreferencePair& pair,
                               const DpoConfig& cfg, Rng& rng, PairLossDiag* diag) {
    const int t = cfg.sampler.draw(rng);
    const std::vector<double> eps_w = rng.normal_vec(pair.x_w.size());
    const std::vector<double> eps_l = rng.normal_vec(pair.x_l.size());

    const Sample w_sample{pair.x_w, pair.c};
    const Sample l_sample{pair.x_l, pair.c};
    const NoisedSample noised_w = forward_sample(schedule, w_sample, t, eps_w);
    const NoisedSample noised_l = forward_sample(schedule, l_sample, t, eps_l);

    // theta through the tape, ref as constants
    const Tape::Vec pred_w = tape.predict_eps_node(noised_w.x_t, t, pair.c);
    const Tape::Vec pred_l = tape.predict_eps_node(noised_l.x_t, t, pair.c);
    const Tape::Value err_theta_w = tape.sq_dist(pred_w, eps_w);
    const Tape::Value err_theta_l = tape.sq_dist(pred_l, eps_l);
    const double err_ref_w = squared_error(eps_w, predict_eps(ref, noised_w.x_t, t, pair.c));
    const double err_ref_l = squared_error(eps_l, predict_eps(ref, noised_l.x_t, t, pair.c));

    // margin = r_w - r_l = (err_ref_w - err_theta_w) - (err_ref_l - err_theta_l)
    const Tape::Value r_w = tape.add_const(tape.neg(err_theta_w), err_ref_w);
    const Tape::Value r_l = tape.add_const(tape.neg(err_theta_l), err_ref_l);
    const Tape::Value margin = tape.sub(r_w, r_l);
    const double coeff = cfg.beta * static_cast<double>(cfg.T) * cfg.schedule.at(t);
    const Tape::Value z = tape.mul_const(margin, coeff);
    const Tape::Value loss = tape.softplus(tape.neg(z));

    if (diag != nullptr) {
        diag->t = t;
        diag->r_w = tape.value(r_w);
        diag->r_l = tape.value(r_l);
        diag->margin = tape.value(margin);
    }
    if (!std::isfinite(tape.value(loss))) {
        throw NumericError("dpo_pair_loss: non-finite loss at t=" + std::to_string(t) +
                           " margin=" + std::to_string(tape.value(margin)));
    }
    return loss;
}

double dpo_pair_loss(const DenoiserParams& theta, const DenoiserParams& ref,
                     const NoiseSchedule& schedule, const PreferencePair& pair,
                     const DpoConfig& cfg, Rng& rng, PairLossDiag* diag) {
    Tape tape(theta);
    const Tape::Value loss = dpo_pair_loss_node(tape, ref, schedule, pair, cfg, rng, diag);
    return tape.value(loss);
}

Tape::Value sft_loss_node(Tape& tape, const NoiseSchedule& schedule, const PreferencePair& pair,
                          const DpoConfig& cfg, Rng& rng) {
    const std::vector<Sample> batch{Sample{pair.x_w, pair.c}};
    return ddpm_loss_node(tape, schedule, batch, cfg.sampler, [](int) { return 1.0; }, rng);
}

double sft_loss(const DenoiserParams& theta, const NoiseSchedule& schedule,
                const PreferencePair& pair, const DpoConfig& cfg, Rng& rng) {
    Tape tape(theta);
    const Tape::Value loss = sft_loss_node(tape, schedule, pair, cfg, rng);
    return tape.value(loss);
}

Tape::Value ddpm_loss_node(Tape& tape, const NoiseSchedule& schedule,
                           const std::vector<Sample>& batch, const TimestepSampler& sampler,
                           const Weighting& weighting, Rng& rng) {
    if (batch.empty()) {
        throw InputError("ddpm_loss_node: empty batch");
    }
    Tape::Value total = tape.constant(0.0);
    for (const Sample& item : batch) {
        const int t = sampler.draw(rng);
        const std::vector<double> eps = rng.normal_vec(item.x.size());
        const NoisedSample noised = forward_sample(schedule, item, t, eps);
        const Tape::Vec pred = tape.predict_eps_node(noised.x_t, t, item.c);
        const Tape::Value err = tape.sq_dist(pred, eps);
        total = tape.add(total, tape.mul_const(err, weighting(t)));
    }
    return tape.mul_const(total, 1.0 / static_cast<double>(batch.size()));
}

}  // namespace diffpo
