// SPDX-License-Identifier: Apache-2.0
#include "diffpo/eval.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "diffpo/errors.hpp"
#include "diffpo/objectives.hpp"

namespace diffpo {

using nlohmann::json;
namespace fs = std::filesystem;

WinRateResult win_rate(const SampleFn& model_a, const SampleFn& model_b,
                       const std::vector<int>& conditions, const std::vector<std::uint64_t>& seeds,
                       const OracleSpec& oracle) {
    if (seeds.empty() || conditions.empty()) {
        throw InputError("win_rate: conditions and seeds must be non-empty");
    }
    WinRateResult res;
    for (int c : conditions) {
        for (std::uint64_t seed : seeds) {
            // Both generators consume identically seeded streams; the stream
            // depends only on (seed, condition), never on the opposing model.
            Rng rng_a(derive_seed(seed, static_cast<std::uint64_t>(c)));
            Rng rng_b(derive_seed(seed, static_cast<std::uint64_t>(c)));
            Sample sa, sb;
            try {
                sa = model_a(c, rng_a);
                sb = model_b(c, rng_b);
            } catch (const SamplingError&) {
                res.excluded += 1;
                continue;
            }
            const double ra = oracle_reward(oracle, c, sa.x);
            const double rb = oracle_reward(oracle, c, sb.x);
            ComparisonRecord rec;
            rec.c = c;
            rec.seed = seed;
            rec.reward_a = ra;
            rec.reward_b = rb;
            rec.outcome = ra > rb ? 1 : (rb > ra ? -1 : 0);
            res.comparisons.push_back(rec);
            res.n += 1;
            if (rec.outcome == 1) {
                res.wins += 1;
            } else if (rec.outcome == 0) {
                res.ties += 1;
            }
        }
    }
    res.rate = res.n > 0 ? static_cast<double>(res.wins) / static_cast<double>(res.n) : 0.0;
    return res;
}

SampleFn ancestral_sampler(const DenoiserParams& params, const NoiseSchedule& schedule) {
    const int dim = params.arch.data_dim;
    return [params, schedule, dim](int c, Rng& rng) {
        return ancestral_sample(make_predictor(params), schedule, dim, c, rng);
    };
}

WinRateResult win_rate(const DenoiserParams& model_a, const DenoiserParams& model_b,
                       const NoiseSchedule& schedule, const std::vector<int>& conditions,
                       const std::vector<std::uint64_t>& seeds, const OracleSpec& oracle) {
    return win_rate(ancestral_sampler(model_a, schedule), ancestral_sampler(model_b, schedule),
                    conditions, seeds, oracle);
}

AccuracyResult implicit_accuracy_detail(const Predictor& theta, const Predictor& ref,
                                        const NoiseSchedule& schedule,
                                        const std::vector<PreferencePair>& pairs, int t_draws,
                                        Rng& rng) {
    if (pairs.empty() || t_draws < 1) {
        throw InputError("implicit_accuracy: pairs non-empty and t_draws >= 1 required");
    }
    AccuracyResult res;
    for (const PreferencePair& pair : pairs) {
        for (int k = 0; k < t_draws; ++k) {
            const int t = rng.uniform_int(1, schedule.T);
            const std::vector<double> eps_w = rng.normal_vec(pair.x_w.size());
            const std::vector<double> eps_l = rng.normal_vec(pair.x_l.size());
            const double r_w =
                implicit_reward(theta, ref, schedule, Sample{pair.x_w, pair.c}, t, eps_w);
            const double r_l =
                implicit_reward(theta, ref, schedule, Sample{pair.x_l, pair.c}, t, eps_l);
            res.n += 1;
            if (r_w > r_l) {
                res.wins += 1;
            } else if (r_w == r_l) {
                res.ties += 1;
            }
        }
    }
    res.accuracy = static_cast<double>(res.wins) / static_cast<double>(res.n);
    return res;
}

double implicit_accuracy(const DenoiserParams& theta, const DenoiserParams& ref,
                         const NoiseSchedule& schedule, const std::vector<PreferencePair>& pairs,
                         int t_draws, Rng& rng) {
    return implicit_accuracy_detail(make_predictor(theta), make_predictor(ref), schedule, pairs,
                                    t_draws, rng)
        .accuracy;
}

namespace {

struct BinRange {
    int lo;
    int hi;
};

std::vector<BinRange> partition_timesteps(int T, int bins) {
    if (bins < 1 || bins > T) {
        throw InputError("profile: bins must lie in [1, T]");
    }
    std::vector<BinRange> ranges;
    ranges.reserve(static_cast<std::size_t>(bins));
    for (int b = 0; b < bins; ++b) {
        const int lo = b * T / bins + 1;
        const int hi = (b + 1) * T / bins;
        ranges.push_back({lo, hi});
    }
    return ranges;
}

double loss_diff_draw(const Predictor& ref, const Predictor& init, const NoiseSchedule& schedule,
                      const Sample& item, int t, const std::vector<double>& eps) {
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
    return err_ref - err_init;
}

}  // namespace

ProfileTable divergence_profile(const Predictor& ref, const Predictor& init,
                                const NoiseSchedule& schedule, const std::vector<Sample>& samples,
                                int bins, int draws_per_sample, Rng& rng) {
    if (samples.empty() || draws_per_sample < 1) {
        throw InputError("divergence_profile: samples non-empty and draws_per_sample >= 1 required");
    }
    const std::vector<BinRange> ranges = partition_timesteps(schedule.T, bins);
    ProfileTable table;
    double pooled_sum = 0.0;
    long pooled_n = 0;
    for (int b = 0; b < bins; ++b) {
        const BinRange r = ranges[static_cast<std::size_t>(b)];
        double sum = 0.0;
        long n = 0;
        for (const Sample& item : samples) {
            for (int k = 0; k < draws_per_sample; ++k) {
                const int t = rng.uniform_int(r.lo, r.hi);
                const std::vector<double> eps = rng.normal_vec(item.x.size());
                sum += loss_diff_draw(ref, init, schedule, item, t, eps);
                ++n;
            }
        }
        ProfileRow row;
        row.bin = b;
        row.t_lo = r.lo;
        row.t_hi = r.hi;
        row.n = n;
        row.mean_diff = sum / static_cast<double>(n);
        row.abs_mean = std::abs(row.mean_diff);
        table.rows.push_back(row);
        pooled_sum += sum;
        pooled_n += n;
    }
    table.pooled_mean = pooled_sum / static_cast<double>(pooled_n);
    table.pooled_abs = std::abs(table.pooled_mean);
    return table;
}

ProfileTable divergence_profile(const DenoiserParams& ref, const DenoiserParams& init,
                                const NoiseSchedule& schedule, const std::vector<Sample>& samples,
                                int bins, int draws_per_sample, Rng& rng) {
    return divergence_profile(make_predictor(ref), make_predictor(init), schedule, samples, bins,
                              draws_per_sample, rng);
}

std::vector<RewardScaleRow> reward_scale_profile(const DenoiserParams& theta,
                                                 const DenoiserParams& ref,
                                                 const NoiseSchedule& schedule,
                                                 const std::vector<PreferencePair>& pairs,
                                                 int bins, int draws_per_pair, Rng& rng) {
    if (pairs.empty() || draws_per_pair < 1) {
        throw InputError("reward_scale_profile: pairs non-empty and draws_per_pair >= 1 required");
    }
    const std::vector<BinRange> ranges = partition_timesteps(schedule.T, bins);
    std::vector<RewardScaleRow> rows;
    for (int b = 0; b < bins; ++b) {
        const BinRange r = ranges[static_cast<std::size_t>(b)];
        double sum = 0.0;
        long n = 0;
        for (const PreferencePair& pair : pairs) {
            for (int k = 0; k < draws_per_pair; ++k) {
                const int t = rng.uniform_int(r.lo, r.hi);
                const std::vector<double> eps_w = rng.normal_vec(pair.x_w.size());
                const std::vector<double> eps_l = rng.normal_vec(pair.x_l.size());
                sum += std::abs(
                    implicit_reward(theta, ref, schedule, Sample{pair.x_w, pair.c}, t, eps_w));
                sum += std::abs(
                    implicit_reward(theta, ref, schedule, Sample{pair.x_l, pair.c}, t, eps_l));
                n += 2;
            }
        }
        RewardScaleRow row;
        row.bin = b;
        row.t_lo = r.lo;
        row.t_hi = r.hi;
        row.n = n;
        row.mean_abs_reward = sum / static_cast<double>(n);
        rows.push_back(row);
    }
    return rows;
}

// ----------------------------- report io -----------------------------

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc | std::ios::binary);
    if (!os) {
        throw IoError("emit_report: cannot open " + path);
    }
    os << text;
    if (!os) {
        throw IoError("emit_report: write failed for " + path);
    }
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("parse_report: cannot open " + path);
    }
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text, long expected_cols,
                                                const std::string& path) {
    std::vector<std::vector<std::string>> rows;
    std::size_t pos = 0;
    long line_no = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) {
            end = text.size();
        }
        const std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> cells;
        std::size_t cell_start = 0;
        for (;;) {
            const std::size_t comma = line.find(',', cell_start);
            if (comma == std::string::npos) {
                cells.push_back(line.substr(cell_start));
                break;
            }
            cells.push_back(line.substr(cell_start, comma - cell_start));
            cell_start = comma + 1;
        }
        if (static_cast<long>(cells.size()) != expected_cols) {
            throw ParseError("parse_report: " + path + " line " + std::to_string(line_no) +
                                 ": expected " + std::to_string(expected_cols) + " columns",
                             line_no);
        }
        rows.push_back(std::move(cells));
    }
    return rows;
}

}  // namespace

std::string profile_csv(const std::vector<ProfileRow>& rows) {
    std::string csv = "bin,t_lo,t_hi,n,mean_diff,abs_mean\n";
    for (const auto& row : rows) {
        csv += std::to_string(row.bin) + "," + std::to_string(row.t_lo) + "," +
               std::to_string(row.t_hi) + "," + std::to_string(row.n) + "," +
               fmt_double(row.mean_diff) + "," + fmt_double(row.abs_mean) + "\n";
    }
    return csv;
}

std::string reward_profile_csv(const std::vector<RewardScaleRow>& rows) {
    std::string csv = "bin,t_lo,t_hi,n,mean_abs_reward\n";
    for (const auto& row : rows) {
        csv += std::to_string(row.bin) + "," + std::to_string(row.t_lo) + "," +
               std::to_string(row.t_hi) + "," + std::to_string(row.n) + "," +
               fmt_double(row.mean_abs_reward) + "\n";
    }
    return csv;
}

void emit_report(const EvalReport& report, const std::string& dir) {
    fs::create_directories(dir);

    json j;
    j["format"] = "diffpo-report";
    j["version"] = 1;
    j["win_rate"] = {{"rate", report.win.rate}, {"n", report.win.n},       {"wins", report.win.wins},
                     {"ties", report.win.ties}, {"excluded", report.win.excluded}};
    j["implicit_accuracy"] = {{"accuracy", report.accuracy.accuracy},
                              {"wins", report.accuracy.wins},
                              {"ties", report.accuracy.ties},
                              {"n", report.accuracy.n}};
    j["metadata"] = {{"model_checkpoint", report.model_checkpoint},
                     {"baseline_checkpoint", report.baseline_checkpoint},
                     {"seeds", report.seeds},
                     {"oracle_hash", report.oracle_hash},
                     {"T", report.T}};
    write_file((fs::path(dir) / "report.json").string(), j.dump(2) + "\n");
    write_file((fs::path(dir) / "divergence_profile.csv").string(),
               profile_csv(report.divergence_bins));
    write_file((fs::path(dir) / "reward_scale_profile.csv").string(),
               reward_profile_csv(report.reward_bins));

    std::string csv = "condition,seed,reward_a,reward_b,outcome\n";
    for (const auto& rec : report.win.comparisons) {
        csv += std::to_string(rec.c) + "," + std::to_string(rec.seed) + "," +
               fmt_double(rec.reward_a) + "," + fmt_double(rec.reward_b) + "," +
               std::to_string(rec.outcome) + "\n";
    }
    write_file((fs::path(dir) / "comparisons.csv").string(), csv);
}

EvalReport parse_report(const std::string& dir) {
    EvalReport report;
    json j;
    try {
        j = json::parse(read_file((fs::path(dir) / "report.json").string()));
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("parse_report: report.json: ") + e.what());
    }
    if (!j.contains("format") || j["format"] != "diffpo-report" || j["version"] != 1) {
        throw ParseError("parse_report: missing or unsupported report header");
    }
    report.win.rate = j["win_rate"]["rate"].get<double>();
    report.win.n = j["win_rate"]["n"].get<long>();
    report.win.wins = j["win_rate"]["wins"].get<long>();
    report.win.ties = j["win_rate"]["ties"].get<long>();
    report.win.excluded = j["win_rate"]["excluded"].get<long>();
    report.accuracy.accuracy = j["implicit_accuracy"]["accuracy"].get<double>();
    report.accuracy.wins = j["implicit_accuracy"]["wins"].get<long>();
    report.accuracy.ties = j["implicit_accuracy"]["ties"].get<long>();
    report.accuracy.n = j["implicit_accuracy"]["n"].get<long>();
    report.model_checkpoint = j["metadata"]["model_checkpoint"].get<std::string>();
    report.baseline_checkpoint = j["metadata"]["baseline_checkpoint"].get<std::string>();
    report.seeds = j["metadata"]["seeds"].get<std::vector<std::uint64_t>>();
    report.oracle_hash = j["metadata"]["oracle_hash"].get<std::uint64_t>();
    report.T = j["metadata"]["T"].get<int>();

    {
        const std::string path = (fs::path(dir) / "divergence_profile.csv").string();
        auto rows = parse_csv(read_file(path), 6, path);
        for (std::size_t i = 1; i < rows.size(); ++i) {  // rows[0] is the header
            ProfileRow row;
            row.bin = std::stoi(rows[i][0]);
            row.t_lo = std::stoi(rows[i][1]);
            row.t_hi = std::stoi(rows[i][2]);
            row.n = std::stol(rows[i][3]);
            row.mean_diff = std::strtod(rows[i][4].c_str(), nullptr);
            row.abs_mean = std::strtod(rows[i][5].c_str(), nullptr);
            report.divergence_bins.push_back(row);
        }
    }
    {
        const std::string path = (fs::path(dir) / "reward_scale_profile.csv").string();
        auto rows = parse_csv(read_file(path), 5, path);
        for (std::size_t i = 1; i < rows.size(); ++i) {
            RewardScaleRow row;
            row.bin = std::stoi(rows[i][0]);
            row.t_lo = std::stoi(rows[i][1]);
            row.t_hi = std::stoi(rows[i][2]);
            row.n = std::stol(rows[i][3]);
            row.mean_abs_reward = std::strtod(rows[i][4].c_str(), nullptr);
            report.reward_bins.push_back(row);
        }
    }
    {
        const std::string path = (fs::path(dir) / "comparisons.csv").string();
        auto rows = parse_csv(read_file(path), 5, path);
        for (std::size_t i = 1; i < rows.size(); ++i) {
            ComparisonRecord rec;
            rec.c = std::stoi(rows[i][0]);
            rec.seed = std::stoull(rows[i][1]);
            rec.reward_a = std::strtod(rows[i][2].c_str(), nullptr);
            rec.reward_b = std::strtod(rows[i][3].c_str(), nullptr);
            rec.outcome = std::stoi(rows[i][4]);
            report.win.comparisons.push_back(rec);
        }
    }
    return report;
}

}  // namespace diffpo
