#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "probeql/core.hpp"

// Latency model for sequential vs parallel exploration: per-stage component
// times (planner, generator, executor, proposer, verifier), k1 parallel plans
// with Normal-distributed execution attempts, and a Monte Carlo estimator.

namespace probeql {

struct InvalidSpec : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LatencyModelSpec {
    double t_plan_component = 18.9;      // seconds
    double t_generate_component = 20.4;  // per attempt
    double t_exec_component = 2.4;       // per attempt
    double t_propose_component = 51.8;
    double t_verify_component = 10.6;
    int k1 = 3;           // parallel plans
    double k2_mu = 8.0;   // attempts per plan
    double k2_sigma = 2.0;
    std::pair<double, double> comm_delay_range{0.05, 0.20};  // fraction per max stage
    int trials = 10000;
    double jitter_sigma = 0.25;  // log-normal spread on every component draw

    void validate() const {
        auto positive = [](double v, const char* name) {
            if (!(v > 0.0)) throw InvalidSpec(std::string("latency spec '") + name +
                                              "' must be > 0");
        };
        positive(t_plan_component, "t_plan_component");
        positive(t_generate_component, "t_generate_component");
        positive(t_exec_component, "t_exec_component");
        positive(t_propose_component, "t_propose_component");
        positive(t_verify_component, "t_verify_component");
        if (k1 < 1) throw InvalidSpec("latency spec 'k1' must be >= 1");
        if (k2_sigma < 0.0) throw InvalidSpec("latency spec 'k2_sigma' must be >= 0");
        if (jitter_sigma < 0.0) throw InvalidSpec("latency spec 'jitter_sigma' must be >= 0");
        if (comm_delay_range.first < 0.0 || comm_delay_range.second > 1.0 ||
            comm_delay_range.first > comm_delay_range.second)
            throw InvalidSpec("latency spec comm delay range must be ordered within [0,1]");
        if (trials < 1) throw InvalidSpec("latency spec 'trials' must be >= 1");
    }
};

// One trial's underlying draws, shared between both modes so the paired
// dominance property (parallel <= sequential) holds sample by sample.
struct TrialDraws {
    std::vector<double> plan_times;               // per plan i
    std::vector<std::vector<double>> gen_times;   // per plan i, attempt j (gen+exec)
    double propose_time = 0.0;
    double verify_time = 0.0;
    double comm_plan = 0.0;  // fractional delay on the plan max stage
    double comm_gen = 0.0;   // fractional delay on the generate max stage
};

namespace detail {

inline double lognormal_factor(std::mt19937_64& rng, double sigma) {
    if (sigma <= 0.0) return 1.0;
    std::normal_distribution<double> normal(0.0, sigma);
    return std::exp(normal(rng));
}

// Round half up, clamp to at least one execution attempt.
inline int discretize_attempts(double x) {
    return std::max(1, static_cast<int>(std::floor(x + 0.5)));
}

}  // namespace detail

inline TrialDraws draw_trial(const LatencyModelSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    TrialDraws d;
    d.plan_times.reserve(static_cast<std::size_t>(spec.k1));
    for (int i = 0; i < spec.k1; ++i)
        d.plan_times.push_back(spec.t_plan_component *
                               detail::lognormal_factor(rng, spec.jitter_sigma));

    std::normal_distribution<double> k2(spec.k2_mu, spec.k2_sigma);
    double per_attempt = spec.t_generate_component + spec.t_exec_component;
    for (int i = 0; i < spec.k1; ++i) {
        int attempts = spec.k2_sigma > 0.0 ? detail::discretize_attempts(k2(rng))
                                           : detail::discretize_attempts(spec.k2_mu);
        std::vector<double> row;
        row.reserve(static_cast<std::size_t>(attempts));
        for (int j = 0; j < attempts; ++j)
            row.push_back(per_attempt * detail::lognormal_factor(rng, spec.jitter_sigma));
        d.gen_times.push_back(std::move(row));
    }

    d.propose_time =
        spec.t_propose_component * detail::lognormal_factor(rng, spec.jitter_sigma);
    d.verify_time =
        spec.t_verify_component * detail::lognormal_factor(rng, spec.jitter_sigma);

    std::uniform_real_distribution<double> comm(spec.comm_delay_range.first,
                                                spec.comm_delay_range.second);
    d.comm_plan = comm(rng);
    d.comm_gen = comm(rng);
    return d;
}

// Sequential exploration: every plan and every attempt runs back to back,
// then one propose + verify pass.
inline double sequential_time(const TrialDraws& d) {
    double total = 0.0;
    for (double t : d.plan_times) total += t;
    for (const auto& row : d.gen_times)
        for (double t : row) total += t;
    return total + d.propose_time + d.verify_time;
}

// Parallel exploration: plans run concurrently, then all attempts run
// concurrently; each max stage pays a fractional communication delay, never
// exceeding the sequential cost of the same stage.
inline double parallel_time(const TrialDraws& d) {
    double plan_max = 0.0, plan_sum = 0.0;
    for (double t : d.plan_times) {
        plan_max = std::max(plan_max, t);
        plan_sum += t;
    }
    double gen_max = 0.0, gen_sum = 0.0;
    for (const auto& row : d.gen_times) {
        for (double t : row) {
            gen_max = std::max(gen_max, t);
            gen_sum += t;
        }
    }
    double plan_stage = std::min(plan_max * (1.0 + d.comm_plan), plan_sum);
    double gen_stage = std::min(gen_max * (1.0 + d.comm_gen), gen_sum);
    return plan_stage + gen_stage + d.propose_time + d.verify_time;
}

inline double sequential_time(const LatencyModelSpec& spec, std::mt19937_64& rng) {
    return sequential_time(draw_trial(spec, rng));
}
inline double parallel_time(const LatencyModelSpec& spec, std::mt19937_64& rng) {
    return parallel_time(draw_trial(spec, rng));
}

struct LatencyEstimate {
    double seq_mean = 0.0;
    double par_mean = 0.0;
    double ratio = 0.0;
    std::pair<double, double> seq_ci95{0.0, 0.0};
    std::pair<double, double> par_ci95{0.0, 0.0};
    int trials = 0;
    std::vector<double> seq_samples;
    std::vector<double> par_samples;
};

inline LatencyEstimate estimate(const LatencyModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    LatencyEstimate est;
    est.trials = spec.trials;
    est.seq_samples.reserve(static_cast<std::size_t>(spec.trials));
    est.par_samples.reserve(static_cast<std::size_t>(spec.trials));

    // Per-trial substreams keep the estimate independent of evaluation order.
    for (int t = 0; t < spec.trials; ++t) {
        std::mt19937_64 rng(seed + static_cast<std::uint64_t>(t) * 0x9e3779b97f4a7c15ULL);
        TrialDraws draws = draw_trial(spec, rng);
        est.seq_samples.push_back(sequential_time(draws));
        est.par_samples.push_back(parallel_time(draws));
    }

    auto stats = [&](const std::vector<double>& xs) {
        double mean = 0.0;
        for (double x : xs) mean += x;
        mean /= static_cast<double>(xs.size());
        double var = 0.0;
        if (xs.size() > 1) {
            for (double x : xs) var += (x - mean) * (x - mean);
            var /= static_cast<double>(xs.size() - 1);
        }
        double half = 1.96 * std::sqrt(var / static_cast<double>(xs.size()));
        return std::pair<double, std::pair<double, double>>{
            mean, {mean - half, mean + half}};
    };
    auto [sm, sci] = stats(est.seq_samples);
    auto [pm, pci] = stats(est.par_samples);
    est.seq_mean = sm;
    est.seq_ci95 = sci;
    est.par_mean = pm;
    est.par_ci95 = pci;
    est.ratio = pm > 0.0 ? sm / pm : 0.0;
    return est;
}

// ---------------------------------------------------------------------------
// Spec file: flat "key = value" lines matching the component-time names.

inline LatencyModelSpec parse_latency_spec_text(const std::string& text) {
    LatencyModelSpec spec;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string s = detail::trim(line);
        if (s.empty() || s[0] == '#') continue;
        auto eq = s.find('=');
        if (eq == std::string::npos)
            throw InvalidSpec("latency spec line " + std::to_string(lineno) +
                              ": expected key = value");
        std::string key = detail::trim(s.substr(0, eq));
        std::string value = detail::trim(s.substr(eq + 1));
        try {
            if (key == "t_plan_component") spec.t_plan_component = std::stod(value);
            else if (key == "t_generate_component") spec.t_generate_component = std::stod(value);
            else if (key == "t_exec_component") spec.t_exec_component = std::stod(value);
            else if (key == "t_propose_component") spec.t_propose_component = std::stod(value);
            else if (key == "t_verify_component") spec.t_verify_component = std::stod(value);
            else if (key == "k1") spec.k1 = std::stoi(value);
            else if (key == "k2_mu") spec.k2_mu = std::stod(value);
            else if (key == "k2_sigma") spec.k2_sigma = std::stod(value);
            else if (key == "comm_delay_min") spec.comm_delay_range.first = std::stod(value);
            else if (key == "comm_delay_max") spec.comm_delay_range.second = std::stod(value);
            else if (key == "trials") spec.trials = std::stoi(value);
            else if (key == "jitter_sigma") spec.jitter_sigma = std::stod(value);
            else throw InvalidSpec("unknown latency spec key '" + key + "'");
        } catch (const InvalidSpec&) {
            throw;
        } catch (const std::exception&) {
            throw InvalidSpec("latency spec key '" + key + "' has invalid value '" +
                              value + "'");
        }
    }
    spec.validate();
    return spec;
}

inline LatencyModelSpec load_latency_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidSpec("cannot open latency spec file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_latency_spec_text(ss.str());
}

}  // namespace probeql
