// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "diffpo/denoiser.hpp"
#include "diffpo/diffusion.hpp"
#include "diffpo/preference.hpp"

namespace diffpo {

/// Generator interface used by win-rate comparisons: (condition, rng) -> sample.
using SampleFn = std::function<Sample(int c, Rng& rng)>;

struct ComparisonRecord {
    int c = 0;
    std::uint64_t seed = 0;
    double reward_a = 0.0;
    double reward_b = 0.0;
    int outcome = 0;  // 1 a wins, -1 b wins, 0 tie
};

struct WinRateResult {
    double rate = 0.0;  // wins / n, ties count as non-wins
    long n = 0;
    long wins = 0;
    long ties = 0;
    long excluded = 0;  // sampling failures, reported separately
    std::vector<ComparisonRecord> comparisons;
};

/// Matched-seed win rate of generator a against generator b: for every
/// (condition, seed) both generators draw with identically seeded rng
/// streams; a wins on strictly higher oracle reward.
WinRateResult win_rate(const SampleFn& model_a, const SampleFn& model_b,
                       const std::vector<int>& conditions, const std::vector<std::uint64_t>& seeds,
                       const OracleSpec& oracle);

/// Ancestral-sampling generators from denoiser parameters.
SampleFn ancestral_sampler(const DenoiserParams& params, const NoiseSchedule& schedule);

WinRateResult win_rate(const DenoiserParams& model_a, const DenoiserParams& model_b,
                       const NoiseSchedule& schedule, const std::vector<int>& conditions,
                       const std::vector<std::uint64_t>& seeds, const OracleSpec& oracle);

struct AccuracyResult {
    double accuracy = 0.0;  // strict r_w > r_l over (pair, t-draw)
    long wins = 0;
    long ties = 0;
    long n = 0;
    double tie_fraction() const { return n > 0 ? static_cast<double>(ties) / n : 0.0; }
};

/// Fraction of (pair, t-draw) comparisons where the implicit reward ranks the
/// winner strictly above the loser. Per draw: t uniform over {1..T}, then
/// independent noise per arm (winner first).
AccuracyResult implicit_accuracy_detail(const Predictor& theta, const Predictor& ref,
                                        const NoiseSchedule& schedule,
                                        const std::vector<PreferencePair>& pairs, int t_draws,
                                        Rng& rng);
double implicit_accuracy(const DenoiserParams& theta, const DenoiserParams& ref,
                         const NoiseSchedule& schedule, const std::vector<PreferencePair>& pairs,
                         int t_draws, Rng& rng);

struct ProfileRow {
    int bin = 0;
    int t_lo = 0;
    int t_hi = 0;
    long n = 0;
    double mean_diff = 0.0;  // signed mean of (loss_ref - loss_init) in the bin
    double abs_mean = 0.0;   // |mean_diff|
};

struct ProfileTable {
    std::vector<ProfileRow> rows;
    double pooled_mean = 0.0;  // signed mean over all draws
    double pooled_abs = 0.0;   // |pooled_mean|
};

/// Per-timestep-bin divergence between two models under the forward process.
/// Bins partition {1..T}; within each bin, every sample contributes
/// draws_per_sample draws with t uniform in the bin (draw order per draw:
/// t, then noise). The pooled row over one bin with the same rng seed equals
/// the global divergence estimate exactly.
ProfileTable divergence_profile(const Predictor& ref, const Predictor& init,
                                const NoiseSchedule& schedule, const std::vector<Sample>& samples,
                                int bins, int draws_per_sample, Rng& rng);
ProfileTable divergence_profile(const DenoiserParams& ref, const DenoiserParams& init,
                                const NoiseSchedule& schedule, const std::vector<Sample>& samples,
                                int bins, int draws_per_sample, Rng& rng);

struct RewardScaleRow {
    int bin = 0;
    int t_lo = 0;
    int t_hi = 0;
    long n = 0;
    double mean_abs_reward = 0.0;  // mean |r_t| pooled over winner and loser arms
};

/// Mean implicit-reward magnitude per timestep bin over preference pairs.
std::vector<RewardScaleRow> reward_scale_profile(const DenoiserParams& theta,
                                                 const DenoiserParams& ref,
                                                 const NoiseSchedule& schedule,
                                                 const std::vector<PreferencePair>& pairs,
                                                 int bins, int draws_per_pair, Rng& rng);

struct EvalReport {
    WinRateResult win;
    AccuracyResult accuracy;
    std::vector<ProfileRow> divergence_bins;
    std::vector<RewardScaleRow> reward_bins;
    // metadata
    std::string model_checkpoint;
    std::string baseline_checkpoint;
    std::vector<std::uint64_t> seeds;
    std::uint64_t oracle_hash = 0;
    int T = 0;
};

/// CSV renderings (header row + one row per bin), shared by emit_report and
/// the profile subcommand.
std::string profile_csv(const std::vector<ProfileRow>& rows);
std::string reward_profile_csv(const std::vector<RewardScaleRow>& rows);

/// Writes report.json plus CSV tables (comparisons.csv, divergence_profile.csv,
/// reward_scale_profile.csv) into the directory. Byte output is a pure
/// function of the report.
void emit_report(const EvalReport& report, const std::string& dir);

/// Inverse of emit_report; restores every field.
EvalReport parse_report(const std::string& dir);

}  // namespace diffpo
