#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "probeql/bench.hpp"
#include "probeql/core.hpp"
#include "probeql/executor.hpp"
#include "probeql/http_backend.hpp"
#include "probeql/latency.hpp"
#include "probeql/llm.hpp"
#include "probeql/planner.hpp"
#include "probeql/scheduler.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitBackend = 3;

struct BackendSelector {
    std::string kind;  // "scripted" | "http"
    std::string target;
};

BackendSelector parse_backend(const std::string& value) {
    auto colon = value.find(':');
    if (colon == std::string::npos)
        throw probeql::ConfigError(
            "backend must be scripted:<path> or http:<endpoint>, got '" + value + "'");
    BackendSelector sel{value.substr(0, colon), value.substr(colon + 1)};
    if (sel.kind != "scripted" && sel.kind != "http")
        throw probeql::ConfigError("unknown backend kind '" + sel.kind + "'");
    if (sel.target.empty())
        throw probeql::ConfigError("backend selector '" + value + "' has no target");
    return sel;
}

std::shared_ptr<probeql::Backend> make_backend(const BackendSelector& sel) {
    if (sel.kind == "scripted") {
        if (!std::filesystem::exists(sel.target))
            throw probeql::BackendError("script file not found: " + sel.target);
        return probeql::load_script(sel.target);
    }
    return std::make_shared<probeql::HttpBackend>(
        probeql::HttpBackend::Options{sel.target});
}

// Flag values mirror RunConfig keys; only flags the user passed override the
// config file.
struct ConfigOverrides {
    std::optional<int> num_workers, max_planner_iters, max_testcase_iters,
        max_proposer_iters, max_retries, request_timeout_secs, exec_max_length,
        exec_max_rows, task_concurrency, exec_timeout_secs;
    std::optional<double> llm_temperature, verifier_temperature, requests_per_second;
    std::optional<std::string> plan_branches, exec_branches;
    std::optional<std::string> model_plan, model_generate, model_propose, model_verify;
    bool use_gold_schema = false, no_verifier = false, direct_sql = false,
         sequential = false;

    void apply(probeql::RunConfig& cfg) const {
        auto set = [](auto& dst, const auto& src) {
            if (src) dst = *src;
        };
        set(cfg.num_workers, num_workers);
        set(cfg.max_planner_iters, max_planner_iters);
        set(cfg.max_testcase_iters, max_testcase_iters);
        set(cfg.max_proposer_iters, max_proposer_iters);
        set(cfg.max_retries, max_retries);
        set(cfg.request_timeout_secs, request_timeout_secs);
        set(cfg.exec_max_length, exec_max_length);
        set(cfg.exec_max_rows, exec_max_rows);
        set(cfg.task_concurrency, task_concurrency);
        set(cfg.exec_timeout_secs, exec_timeout_secs);
        set(cfg.llm_temperature, llm_temperature);
        set(cfg.verifier_temperature, verifier_temperature);
        set(cfg.requests_per_second, requests_per_second);
        if (plan_branches)
            cfg.plan_branch_limit =
                probeql::detail::parse_branch_limit(*plan_branches, "plan_branch_limit");
        if (exec_branches)
            cfg.exec_branch_limit =
                probeql::detail::parse_branch_limit(*exec_branches, "exec_branch_limit");
        if (model_plan) cfg.model_per_role["plan"] = *model_plan;
        if (model_generate) cfg.model_per_role["generate"] = *model_generate;
        if (model_propose) cfg.model_per_role["propose"] = *model_propose;
        if (model_verify) cfg.model_per_role["verify"] = *model_verify;
        if (use_gold_schema) cfg.use_gold_schema = true;
        if (no_verifier) cfg.use_semantic_verifier = false;
        if (direct_sql) cfg.planner_direct_sql = true;
        if (sequential) cfg.sequential_mode = true;
        cfg.validate();
    }
};

void add_config_flags(CLI::App* cmd, ConfigOverrides& ov) {
    cmd->add_option("--num-workers", ov.num_workers, "Probe-level worker pool size");
    cmd->add_option("--max-planner-iters", ov.max_planner_iters);
    cmd->add_option("--max-testcase-iters", ov.max_testcase_iters);
    cmd->add_option("--max-proposer-iters", ov.max_proposer_iters);
    cmd->add_option("--max-retries", ov.max_retries);
    cmd->add_option("--request-timeout-secs", ov.request_timeout_secs);
    cmd->add_option("--exec-max-length", ov.exec_max_length);
    cmd->add_option("--exec-max-rows", ov.exec_max_rows);
    cmd->add_option("--task-concurrency", ov.task_concurrency);
    cmd->add_option("--exec-timeout-secs", ov.exec_timeout_secs);
    cmd->add_option("--llm-temperature", ov.llm_temperature);
    cmd->add_option("--verifier-temperature", ov.verifier_temperature);
    cmd->add_option("--requests-per-second", ov.requests_per_second);
    cmd->add_option("--plan-branches", ov.plan_branches,
                    "Plan branch limit (integer or 'unlimited')");
    cmd->add_option("--exec-branches", ov.exec_branches,
                    "Execution branch limit (integer or 'unlimited')");
    cmd->add_option("--model-plan", ov.model_plan);
    cmd->add_option("--model-generate", ov.model_generate);
    cmd->add_option("--model-propose", ov.model_propose);
    cmd->add_option("--model-verify", ov.model_verify);
    cmd->add_flag("--use-gold-schema", ov.use_gold_schema,
                  "Use dataset-provided gold schemas instead of schema linking");
    cmd->add_flag("--no-verifier", ov.no_verifier, "Disable the semantic verifier");
    cmd->add_flag("--direct-sql", ov.direct_sql,
                  "Planner submits the final SQL directly (proposer bypass)");
    cmd->add_flag("--sequential", ov.sequential, "Sequential exploration mode");
}

int cmd_run(const std::string& dataset_path, const std::string& config_path,
            const std::string& backend_value, const std::string& out_dir,
            const std::string& db_dir, const std::string& prompts_dir,
            std::uint64_t seed, const ConfigOverrides& overrides) {
    probeql::RunConfig cfg;
    std::vector<probeql::Task> tasks;
    BackendSelector selector;
    probeql::PromptLibrary library = probeql::PromptLibrary::defaults();
    try {
        if (!config_path.empty()) cfg = probeql::load_config(config_path);
        overrides.apply(cfg);
        tasks = probeql::load_dataset(dataset_path);
        selector = parse_backend(backend_value);
        library = probeql::PromptLibrary::load(prompts_dir);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }

    probeql::RunEnvironment env;
    try {
        env.backend = make_backend(selector);
    } catch (const std::exception& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return kExitBackend;
    }
    env.adapter = std::make_shared<probeql::SqliteAdapter>(
        db_dir, cfg.num_workers, std::chrono::seconds(cfg.exec_timeout_secs));
    env.library = library;
    env.seed = seed;

    auto out = std::filesystem::path(out_dir);
    std::filesystem::create_directories(out / "predictions");
    std::filesystem::create_directories(out / "reports");

    std::vector<probeql::TaskRunRecord> records;
    try {
        records = probeql::run_dataset(tasks, cfg, env, (out / "transcripts").string());
    } catch (const probeql::RetriesExhausted& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return kExitBackend;
    } catch (const probeql::BackendError& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return kExitBackend;
    }

    for (const auto& rec : records) {
        std::ofstream sql_out(out / "predictions" / (rec.instance_id + ".sql"),
                              std::ios::trunc);
        if (rec.final_sql) sql_out << *rec.final_sql << "\n";
    }

    probeql::json telemetry;
    telemetry["summary"] = probeql::run_summary(records);
    probeql::json recs = probeql::json::array();
    for (const auto& r : records) recs.push_back(probeql::record_to_json(r));
    telemetry["records"] = recs;
    {
        std::ofstream tfile(out / "telemetry.json", std::ios::trunc);
        tfile << telemetry.dump(2) << "\n";
    }
    {
        std::ofstream cfile(out / "reports" / "config.resolved", std::ios::trunc);
        cfile << probeql::serialize_config(cfg);
    }

    std::size_t ok = 0;
    for (const auto& r : records) ok += r.succeeded ? 1 : 0;
    std::cout << "ran " << records.size() << " tasks, " << ok << " succeeded; outputs in "
              << out_dir << "\n";
    return 0;
}

int cmd_score(const std::string& dataset_path, const std::string& golds_path,
              const std::vector<std::string>& run_dirs, const std::string& db_dir,
              const std::string& report_path) {
    std::vector<probeql::Task> tasks;
    std::map<std::string, probeql::GoldEntry> golds;
    std::vector<std::vector<probeql::TaskRunRecord>> runs;
    try {
        tasks = probeql::load_dataset(dataset_path);
        golds = probeql::load_golds(golds_path);
        for (const auto& dir : run_dirs)
            runs.push_back(probeql::load_telemetry(
                (std::filesystem::path(dir) / "telemetry.json").string()));
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }

    auto adapter = std::make_shared<probeql::SqliteAdapter>(db_dir);
    probeql::ScoreReport report;
    try {
        report = probeql::score_dataset(tasks, runs, golds, adapter);
    } catch (const std::exception& e) {
        std::cerr << "scoring error: " << e.what() << "\n";
        return kExitConfig;
    }

    std::cout << "instances: " << report.instances.size() << "\n"
              << "EX (consensus of " << report.k << "): " << report.ex << "\n"
              << "EX@" << report.k << ": " << report.ex_at_k << "\n"
              << "avg wall minutes: " << report.avg_wall_minutes << "\n";

    if (!report_path.empty()) {
        std::ofstream csv(report_path, std::ios::trunc);
        csv << "instance_id,ex,ex_any,detail\n";
        for (const auto& inst : report.instances)
            csv << inst.instance_id << "," << (inst.ex ? 1 : 0) << ","
                << (inst.ex_any ? 1 : 0) << "," << inst.detail << "\n";
        csv << "TOTAL," << report.ex << "," << report.ex_at_k << ",avg_wall_minutes="
            << report.avg_wall_minutes << "\n";
    }
    return 0;
}

int cmd_simulate_latency(const std::string& spec_path, std::uint64_t seed, int trials,
                         const std::string& csv_path) {
    probeql::LatencyModelSpec spec;
    try {
        if (!spec_path.empty()) spec = probeql::load_latency_spec(spec_path);
        if (trials > 0) spec.trials = trials;
        spec.validate();
    } catch (const std::exception& e) {
        std::cerr << "spec error: " << e.what() << "\n";
        return kExitConfig;
    }

    probeql::LatencyEstimate est = probeql::estimate(spec, seed);
    std::cout << "trials: " << est.trials << "\n"
              << "seq_mean: " << est.seq_mean << " s  (ci95 " << est.seq_ci95.first
              << " .. " << est.seq_ci95.second << ")\n"
              << "par_mean: " << est.par_mean << " s  (ci95 " << est.par_ci95.first
              << " .. " << est.par_ci95.second << ")\n"
              << "ratio (seq/par): " << est.ratio << "\n";

    if (!csv_path.empty()) {
        std::ofstream csv(csv_path, std::ios::trunc);
        csv << "mode,trial,seconds\n";
        for (int t = 0; t < est.trials; ++t)
            csv << "sequential," << t << "," << est.seq_samples[static_cast<std::size_t>(t)]
                << "\n";
        for (int t = 0; t < est.trials; ++t)
            csv << "parallel," << t << "," << est.par_samples[static_cast<std::size_t>(t)]
                << "\n";
        csv << "summary,seq_mean," << est.seq_mean << "\n";
        csv << "summary,par_mean," << est.par_mean << "\n";
        csv << "summary,ratio," << est.ratio << "\n";
    }
    return 0;
}

int cmd_plan_metrics(const std::string& suites_path, double jaccard_threshold,
                     const std::vector<std::string>& extra_markers) {
    std::ifstream in(suites_path);
    if (!in) {
        std::cerr << "config error: cannot open probe suite file: " << suites_path << "\n";
        return kExitConfig;
    }
    probeql::PlanMetricsOptions opts;
    if (jaccard_threshold > 0) opts.jaccard_threshold = jaccard_threshold;
    for (const auto& m : extra_markers) opts.cross_reference_markers.push_back(m);

    std::cout << "suite_id,num_test_cases,self_containment_rate,overlap_rate\n";
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (probeql::detail::trim(line).empty()) continue;
        probeql::json j = probeql::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("probes") ||
            !j["probes"].is_array()) {
            std::cerr << "config error: line " << lineno
                      << ": expected {\"suite_id\", \"probes\": [...]}\n";
            return kExitConfig;
        }
        std::vector<probeql::Probe> probes;
        for (const auto& p : j["probes"]) {
            probeql::Probe probe;
            probe.text = p.get<std::string>();
            probes.push_back(std::move(probe));
        }
        probeql::PlanMetrics m = probeql::plan_metrics(probes, opts);
        std::cout << j.value("suite_id", "suite-" + std::to_string(lineno)) << ","
                  << m.num_test_cases << "," << m.self_containment_rate << ","
                  << m.overlap_rate << "\n";
    }
    return 0;
}

int cmd_replay(const std::string& transcript_path) {
    std::ifstream in(transcript_path);
    if (!in) {
        std::cerr << "config error: cannot open transcript: " << transcript_path << "\n";
        return kExitConfig;
    }
    std::vector<probeql::json> events;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (probeql::detail::trim(line).empty()) continue;
        probeql::json j = probeql::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("event") ||
            !j.contains("payload")) {
            std::cerr << "config error: transcript line " << lineno << " is malformed\n";
            return kExitConfig;
        }
        events.push_back(std::move(j));
    }
    if (events.empty() || events.back()["event"] != "task_end") {
        std::cerr << "config error: transcript is truncated (no task_end event)\n";
        return kExitConfig;
    }

    bool limit_hit = false;
    for (const auto& e : events) {
        const std::string event = e["event"].get<std::string>();
        const probeql::json& p = e["payload"];
        if (event == "task_start") {
            std::cout << "Task " << p.value("instance_id", "?") << " on db "
                      << p.value("db", "?") << "\n  question: "
                      << p.value("question", "") << "\n";
        } else if (event == "plan") {
            std::cout << "Plan: " << p["probes"].size() << " probes\n";
            for (const auto& probe : p["probes"])
                std::cout << "  - [" << probe.value("probe_id", "?") << "] "
                          << probe.value("text", "") << "\n";
        } else if (event == "schema_link") {
            std::cout << "Schema link: " << p["tables"].size() << " tables\n";
        } else if (event == "generate") {
            std::cout << "Generate " << p.value("probe_id", "?") << ": "
                      << p["candidates"].size() << " candidates, "
                      << p.value("iterations", 0) << " turns";
            if (p.value("recursion_hit", false)) {
                std::cout << " [recursion limit hit]";
                limit_hit = true;
            }
            if (p.contains("insufficient"))
                std::cout << " [not enough information: "
                          << p["insufficient"].get<std::string>() << "]";
            std::cout << "\n";
            for (const auto& c : p["candidates"]) {
                std::cout << "    " << (c.value("exploration", false) ? "[explore] " : "")
                          << c.value("sql", "");
                if (c.contains("feedback"))
                    std::cout << "  => " << c["feedback"].value("kind", "?");
                std::cout << "\n";
            }
        } else if (event == "evidence") {
            std::cout << "Evidence clusters: exploratory=" << p.value("exploratory", 0)
                      << " failures=" << p.value("failures", 0)
                      << " successes=" << p.value("successes", 0)
                      << " finals=" << p.value("finals", 0) << "\n";
        } else if (event == "propose") {
            std::cout << "Proposal (" << p.value("iterations", 0) << " turns): "
                      << p.value("sql", "") << "\n  feedback: "
                      << p["feedback"].value("kind", "?");
            if (p.contains("verdict"))
                std::cout << ", verdict: "
                          << (p["verdict"].value("correct", false) ? "correct"
                                                                   : "incorrect");
            if (p.value("recursion_hit", false)) {
                std::cout << " [recursion limit hit]";
                limit_hit = true;
            }
            std::cout << "\n";
        } else if (event == "decision") {
            std::cout << "Planner decision: " << p.value("kind", "?") << "\n";
        } else if (event == "fallback") {
            std::cout << "Budget fallback: source=" << p.value("source", "?") << "\n";
            limit_hit = true;
        } else if (event == "final_execution") {
            std::cout << "Final execution: " << p.value("kind", "?") << "\n";
        } else if (event == "error") {
            std::cout << "Error: " << p.value("message", "") << "\n";
        } else if (event == "task_end") {
            std::cout << "Result: " << (p.value("succeeded", false) ? "succeeded" : "failed");
            if (p.contains("final_sql") && p["final_sql"].is_string())
                std::cout << "\n  final SQL: " << p["final_sql"].get<std::string>();
            std::cout << "\n";
            if (p.contains("counters")) {
                const auto& c = p["counters"];
                if (c.value("planner_recursion_hit", 0) ||
                    c.value("generator_recursion_hit", 0) ||
                    c.value("proposer_recursion_hit", 0))
                    limit_hit = true;
            }
        }
    }
    if (limit_hit) std::cout << "NOTE: an iteration/recursion limit was hit in this run\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Probe-driven text-to-SQL agent harness"};
    app.require_subcommand(1);

    // run
    auto* run = app.add_subcommand("run", "Run the agent over a dataset");
    std::string dataset, config_path, backend_value, out_dir = "out", db_dir = "fixtures",
                prompts_dir;
    std::uint64_t seed = 0;
    ConfigOverrides overrides;
    run->add_option("--dataset", dataset, "JSONL task file")->required();
    run->add_option("--config", config_path, "Run config file");
    run->add_option("--backend", backend_value,
                    "scripted:<path> or http:<endpoint>")->required();
    run->add_option("--out", out_dir, "Output directory");
    run->add_option("--db-dir", db_dir, "Directory of fixture databases");
    run->add_option("--prompts", prompts_dir, "Prompt template directory");
    run->add_option("--seed", seed, "Run seed");
    add_config_flags(run, overrides);

    // score
    auto* score = app.add_subcommand("score", "Score run outputs against golds");
    std::string score_dataset_path, golds_path, report_path;
    std::vector<std::string> run_dirs;
    std::string score_db_dir = "fixtures";
    score->add_option("--dataset", score_dataset_path)->required();
    score->add_option("--golds", golds_path, "JSONL gold file")->required();
    score->add_option("--run", run_dirs, "Run output directory (repeat for EX@k)")
        ->required();
    score->add_option("--db-dir", score_db_dir);
    score->add_option("--report", report_path, "CSV report path");

    // simulate-latency
    auto* sim = app.add_subcommand("simulate-latency",
                                   "Monte Carlo sequential vs parallel latency");
    std::string spec_path, csv_path;
    std::uint64_t sim_seed = 42;
    int sim_trials = 0;
    sim->add_option("--spec", spec_path, "Latency spec file (defaults if omitted)");
    sim->add_option("--seed", sim_seed);
    sim->add_option("--trials", sim_trials, "Override trial count");
    sim->add_option("--csv", csv_path, "Per-trial CSV output");

    // plan-metrics
    auto* pm = app.add_subcommand("plan-metrics", "Score probe suites (SCR/OR/#TC)");
    std::string suites_path;
    double jaccard = 0.0;
    std::vector<std::string> extra_markers;
    pm->add_option("--suites", suites_path, "JSONL file of {suite_id, probes}")
        ->required();
    pm->add_option("--jaccard-threshold", jaccard);
    pm->add_option("--marker", extra_markers, "Extra cross-reference marker (repeatable)");

    // replay
    auto* replay = app.add_subcommand("replay", "Render a task transcript as a report");
    std::string transcript_path;
    replay->add_option("--transcript", transcript_path)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed())
            return cmd_run(dataset, config_path, backend_value, out_dir, db_dir,
                           prompts_dir, seed, overrides);
        if (score->parsed())
            return cmd_score(score_dataset_path, golds_path, run_dirs, score_db_dir,
                             report_path);
        if (sim->parsed()) return cmd_simulate_latency(spec_path, sim_seed, sim_trials, csv_path);
        if (pm->parsed()) return cmd_plan_metrics(suites_path, jaccard, extra_markers);
        if (replay->parsed()) return cmd_replay(transcript_path);
    } catch (const probeql::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
