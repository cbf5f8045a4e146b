// SPDX-License-Identifier: Apache-2.0
#include "diffpo/preference.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>

#include "diffpo/errors.hpp"

namespace diffpo {

using nlohmann::json;

OracleSpec default_oracle_spec() {
    constexpr int kConditions = 8;
    constexpr double kSigma = 0.3;
    constexpr double kBaseRadius = 1.0;
    constexpr double kPreferredRadius = 1.5;
    OracleSpec spec;
    spec.d = 2;
    spec.kappa = 1.0;
    spec.conditions.resize(kConditions);
    for (int c = 0; c < kConditions; ++c) {
        const double angle = 2.0 * 3.14159265358979323846 * c / kConditions;
        const double ca = std::cos(angle);
        const double sa = std::sin(angle);
        MixtureComponent comp;
        comp.weight = 1.0;
        comp.mean = {kBaseRadius * ca, kBaseRadius * sa};
        comp.cov = {kSigma * kSigma, 0.0, 0.0, kSigma * kSigma};
        spec.conditions[static_cast<std::size_t>(c)].mixture = {comp};
        spec.conditions[static_cast<std::size_t>(c)].mu_star = {kPreferredRadius * ca,
                                                                kPreferredRadius * sa};
    }
    return spec;
}

std::uint64_t oracle_spec_hash(const OracleSpec& spec) {
    // FNV-1a over a canonical text rendering.
    json j;
    j["d"] = spec.d;
    j["kappa"] = spec.kappa;
    for (const auto& cond : spec.conditions) {
        json jc;
        jc["mu_star"] = cond.mu_star;
        for (const auto& comp : cond.mixture) {
            jc["mixture"].push_back({{"w", comp.weight}, {"mean", comp.mean}, {"cov", comp.cov}});
        }
        j["conditions"].push_back(jc);
    }
    const std::string text = j.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

double oracle_reward(const OracleSpec& spec, int c, const std::vector<double>& x) {
    if (c < 0 || c >= spec.condition_count()) {
        throw InputError("oracle_reward: condition " + std::to_string(c) + " out of range");
    }
    const std::vector<double>& mu = spec.conditions[static_cast<std::size_t>(c)].mu_star;
    double d2 = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        const double d = x[i] - mu[i];
        d2 += d * d;
    }
    return -spec.kappa * d2;
}

namespace {

// Lower-triangular Cholesky factor of a row-major d x d matrix.
std::vector<double> cholesky(const std::vector<double>& cov, int d) {
    std::vector<double> l(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j <= i; ++j) {
            double acc = cov[static_cast<std::size_t>(i) * d + j];
            for (int k = 0; k < j; ++k) {
                acc -= l[static_cast<std::size_t>(i) * d + k] * l[static_cast<std::size_t>(j) * d + k];
            }
            if (i == j) {
                if (acc <= 0.0) {
                    throw ConfigError("oracle spec: covariance is not positive definite");
                }
                l[static_cast<std::size_t>(i) * d + j] = std::sqrt(acc);
            } else {
                l[static_cast<std::size_t>(i) * d + j] = acc / l[static_cast<std::size_t>(j) * d + j];
            }
        }
    }
    return l;
}

void validate_spec(const OracleSpec& spec) {
    if (spec.d < 1 || spec.conditions.empty() || spec.kappa <= 0.0) {
        throw ConfigError("oracle spec: d >= 1, kappa > 0 and at least one condition required");
    }
    for (const auto& cond : spec.conditions) {
        if (static_cast<int>(cond.mu_star.size()) != spec.d || cond.mixture.empty()) {
            throw ConfigError("oracle spec: each condition needs mu_star of dim d and a mixture");
        }
        double wsum = 0.0;
        for (const auto& comp : cond.mixture) {
            if (static_cast<int>(comp.mean.size()) != spec.d ||
                comp.cov.size() != static_cast<std::size_t>(spec.d) * spec.d) {
                throw ConfigError("oracle spec: component shape mismatch");
            }
            wsum += comp.weight;
        }
        if (std::abs(wsum - 1.0) > 1e-9) {
            throw ConfigError("oracle spec: mixture weights must sum to 1");
        }
    }
}

}  // namespace

std::vector<double> sample_base(const OracleSpec& spec, int c, Rng& rng) {
    const ConditionSpec& cond = spec.conditions[static_cast<std::size_t>(c)];
    std::size_t pick = 0;
    if (cond.mixture.size() > 1) {
        const double u = rng.uniform01();
        double cum = 0.0;
        for (std::size_t i = 0; i < cond.mixture.size(); ++i) {
            cum += cond.mixture[i].weight;
            if (u < cum) {
                pick = i;
                break;
            }
            pick = i;
        }
    }
    const MixtureComponent& comp = cond.mixture[pick];
    const std::vector<double> l = cholesky(comp.cov, spec.d);
    const std::vector<double> z = rng.normal_vec(static_cast<std::size_t>(spec.d));
    std::vector<double> x(comp.mean);
    for (int i = 0; i < spec.d; ++i) {
        for (int j = 0; j <= i; ++j) {
            x[static_cast<std::size_t>(i)] += l[static_cast<std::size_t>(i) * spec.d + j] * z[static_cast<std::size_t>(j)];
        }
    }
    return x;
}

std::vector<Sample> gen_pretrain_dataset(const OracleSpec& spec, int n, std::uint64_t seed) {
    validate_spec(spec);
    if (n <= 0) {
        throw InputError("gen_pretrain_dataset: n must be positive");
    }
    const int C = spec.condition_count();
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int c = i % C;
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        out.push_back(Sample{sample_base(spec, c, rng), c});
    }
    return out;
}

std::vector<PreferencePair> gen_preference_pairs(const OracleSpec& spec, int n_pairs,
                                                 std::uint64_t seed) {
    validate_spec(spec);
    if (n_pairs <= 0) {
        throw InputError("gen_preference_pairs: n_pairs must be positive");
    }
    constexpr int kTieRedrawLimit = 16;
    const int C = spec.condition_count();
    std::vector<PreferencePair> out;
    out.reserve(static_cast<std::size_t>(n_pairs));
    for (int i = 0; i < n_pairs; ++i) {
        const int c = i % C;
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        PreferencePair pair;
        pair.c = c;
        int attempt = 0;
        for (;; ++attempt) {
            if (attempt >= kTieRedrawLimit) {
                throw NumericError("gen_preference_pairs: tie redraw limit reached for pair " +
                                   std::to_string(i));
            }
            std::vector<double> a = sample_base(spec, c, rng);
            std::vector<double> b = sample_base(spec, c, rng);
            const double ra = oracle_reward(spec, c, a);
            const double rb = oracle_reward(spec, c, b);
            if (ra == rb) {
                continue;  // measure-zero tie, redraw both
            }
            if (ra > rb) {
                pair.x_w = std::move(a);
                pair.x_l = std::move(b);
                pair.reward_w = ra;
                pair.reward_l = rb;
            } else {
                pair.x_w = std::move(b);
                pair.x_l = std::move(a);
                pair.reward_w = rb;
                pair.reward_l = ra;
            }
            break;
        }
        out.push_back(std::move(pair));
    }
    return out;
}

void save_pairs(const std::string& path, const std::vector<PreferencePair>& pairs, int d, int C) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) {
        throw IoError("save_pairs: cannot open " + path);
    }
    json header;
    header["format"] = "diffpo-pairs";
    header["version"] = 1;
    header["d"] = d;
    header["C"] = C;
    os << header.dump() << "\n";
    for (const auto& p : pairs) {
        json line;
        line["c"] = p.c;
        line["x_w"] = p.x_w;
        line["x_l"] = p.x_l;
        line["r_w"] = p.reward_w;
        line["r_l"] = p.reward_l;
        os << line.dump() << "\n";
    }
    if (!os) {
        throw IoError("save_pairs: write failed for " + path);
    }
}

std::vector<PreferencePair> load_pairs(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw IoError("load_pairs: cannot open " + path);
    }
    std::vector<PreferencePair> out;
    std::string line;
    long line_no = 0;
    bool have_header = false;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError("load_pairs: " + path + " line " + std::to_string(line_no) + ": " +
                                 e.what(),
                             line_no);
        }
        if (!have_header) {
            if (!j.contains("format") || j["format"] != "diffpo-pairs" || !j.contains("version") ||
                j["version"] != 1) {
                throw ParseError("load_pairs: " + path + " line 1: missing or unsupported header",
                                 line_no);
            }
            have_header = true;
            continue;
        }
        try {
            PreferencePair p;
            p.c = j.at("c").get<int>();
            p.x_w = j.at("x_w").get<std::vector<double>>();
            p.x_l = j.at("x_l").get<std::vector<double>>();
            p.reward_w = j.at("r_w").get<double>();
            p.reward_l = j.at("r_l").get<double>();
            out.push_back(std::move(p));
        } catch (const json::exception& e) {
            throw ParseError("load_pairs: " + path + " line " + std::to_string(line_no) + ": " +
                                 e.what(),
                             line_no);
        }
    }
    return out;
}

}  // namespace diffpo
