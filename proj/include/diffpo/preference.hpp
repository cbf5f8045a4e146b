// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "diffpo/diffusion.hpp"
#include "diffpo/rng.hpp"

namespace diffpo {

/// One component of a per-condition Gaussian mixture.
struct MixtureComponent {
    double weight = 1.0;
    std::vector<double> mean;
    std::vector<double> cov;  // row-major d x d, positive definite
};

struct ConditionSpec {
    std::vector<MixtureComponent> mixture;
    std::vector<double> mu_star;  // preferred mode
};

/// Synthetic world: per-condition base mixtures for data generation and a
/// quadratic reward peaked at each condition's preferred mode.
struct OracleSpec {
    int d = 2;
    double kappa = 1.0;  // reward sharpness
    std::vector<ConditionSpec> conditions;

    int condition_count() const { return static_cast<int>(conditions.size()); }
};

/// The default 2-D world: 8 conditions, base Gaussian (sigma 0.3) centered on
/// the unit circle, preferred mode at the same angle at radius 1.5. The
/// reward peak sits outside the data distribution, so preference training has
/// to move mass outward to gain reward.
OracleSpec default_oracle_spec();

/// Cheap content hash of a spec, for report metadata.
std::uint64_t oracle_spec_hash(const OracleSpec& spec);

struct PreferencePair {
    int c = 0;
    std::vector<double> x_w;
    std::vector<double> x_l;
    double reward_w = 0.0;
    double reward_l = 0.0;
};

/// -kappa * ||x - mu_star_c||^2; 0 at the preferred mode, negative elsewhere.
double oracle_reward(const OracleSpec& spec, int c, const std::vector<double>& x);

/// Draw one point from condition c's base mixture.
std::vector<double> sample_base(const OracleSpec& spec, int c, Rng& rng);

/// Condition-balanced draws from the base mixtures (item i gets condition
/// i mod C); per-item rng streams derived from (seed, i).
std::vector<Sample> gen_pretrain_dataset(const OracleSpec& spec, int n, std::uint64_t seed);

/// Two independent base draws per pair, ranked by oracle reward. Exact ties
/// trigger a redraw (at most 16 attempts).
std::vector<PreferencePair> gen_preference_pairs(const OracleSpec& spec, int n_pairs,
                                                 std::uint64_t seed);

// JSON Lines persistence. First line is a header
//   {"format":"diffpo-pairs","version":1,"d":...,"C":...}
// followed by one pair per line
//   {"c":...,"x_w":[...],"x_l":[...],"r_w":...,"r_l":...}.
// Numeric values round-trip exactly.
void save_pairs(const std::string& path, const std::vector<PreferencePair>& pairs, int d, int C);
std::vector<PreferencePair> load_pairs(const std::string& path);

}  // namespace diffpo
