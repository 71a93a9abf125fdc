#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "probeql/clock.hpp"
#include "probeql/core.hpp"
#include "probeql/executor.hpp"
#include "probeql/generator.hpp"
#include "probeql/llm.hpp"
#include "probeql/planner.hpp"
#include "probeql/prompts.hpp"
#include "probeql/proposer.hpp"

// Parallel-exploration engine: per-task pipeline wiring (plan, generate-all,
// propose, planner decision loop) over bounded pools, with counter and
// transcript accounting.

namespace probeql {

struct TaskRunRecord {
    std::string instance_id;
    std::optional<std::string> final_sql;
    bool succeeded = false;
    std::chrono::milliseconds wall_millis{0};
    std::map<std::string, std::int64_t> counters;
    std::optional<std::string> error;
    // Deterministic event log; sequence numbers stand in for timestamps so
    // golden transcripts stay byte-identical across worker interleavings.
    json transcript = json::array();
};

// Shared services for one run: one backend, one clock, one global throttle.
struct RunEnvironment {
    std::shared_ptr<Backend> backend;
    std::shared_ptr<Clock> clock = system_clock();
    std::shared_ptr<Throttle> throttle;
    std::shared_ptr<ExecutionAdapter> adapter;
    PromptLibrary library = PromptLibrary::defaults();
    std::uint64_t seed = 0;
};

namespace detail {

// Per-task, gateway-observer-backed call accounting keyed by request role.
struct CallCounters {
    std::mutex mu;
    std::int64_t llm_calls = 0;
    std::int64_t planner_calls = 0;
    std::int64_t generator_calls = 0;
    std::int64_t schema_link_calls = 0;
    std::int64_t proposer_calls = 0;
    std::int64_t verifier_calls = 0;
    std::int64_t generation_tokens = 0;
    std::int64_t reasoning_tokens = 0;

    void observe(const ChatRequest& req, const ChatResponse& resp) {
        std::lock_guard<std::mutex> lock(mu);
        ++llm_calls;
        generation_tokens += resp.usage.completion_tokens;
        reasoning_tokens += resp.usage.reasoning_tokens;
        switch (req.role_tag) {
            case Role::Plan: ++planner_calls; break;
            case Role::Generate:
                if (req.stream_key.rfind("link:", 0) == 0) ++schema_link_calls;
                else ++generator_calls;
                break;
            case Role::Propose: ++proposer_calls; break;
            case Role::Verify: ++verifier_calls; break;
        }
    }
};

inline json feedback_to_json(const ExecutionFeedback& fb) {
    json j;
    j["kind"] = to_string(fb.kind);
    j["message"] = fb.message;
    j["row_count"] = fb.row_count;
    if (fb.result_preview) j["preview"] = *fb.result_preview;
    return j;
}

inline json candidate_to_json(const SqlCandidate& c) {
    json j;
    j["sql"] = c.sql;
    j["description"] = c.description;
    j["exploration"] = c.exploration;
    j["probe_id"] = c.probe_id;
    if (c.feedback) j["feedback"] = feedback_to_json(*c.feedback);
    return j;
}

inline json verdict_to_json(const Verdict& v) {
    json j;
    j["correct"] = v.correct;
    j["explanation"] = v.explanation;
    j["back_translated_query"] = v.back_translated_query;
    return j;
}

}  // namespace detail

class TaskRunner {
public:
    TaskRunner(const RunConfig& cfg, RunEnvironment& env) : cfg_(cfg), env_(env) {
        if (!env_.throttle)
            env_.throttle = std::make_shared<Throttle>(cfg.requests_per_second);
    }

    TaskRunRecord run(const Task& task) {
        TaskRunRecord record;
        record.instance_id = task.instance_id;
        auto started = env_.clock->now();

        detail::CallCounters calls;
        Gateway gateway(env_.backend, cfg_, env_.clock, env_.seed, env_.throttle);
        gateway.set_observer([&calls](const ChatRequest& req, const ChatResponse& resp) {
            calls.observe(req, resp);
        });

        Pipeline pipeline{task, cfg_, env_, gateway, record};
        try {
            pipeline.run();
        } catch (const std::exception& e) {
            record.error = e.what();
            record.succeeded = false;
            pipeline.log("error", json{{"message", e.what()}});
        }

        finalize_counters(record, calls, pipeline);
        auto wall = env_.clock->now() - started;
        record.wall_millis = std::max(std::chrono::milliseconds(1),
                                      std::chrono::duration_cast<std::chrono::milliseconds>(wall));
        pipeline.log("task_end", json{{"succeeded", record.succeeded},
                                      {"final_sql", record.final_sql
                                                        ? json(*record.final_sql)
                                                        : json(nullptr)},
                                      {"counters", record.counters}});
        return record;
    }

private:
    // One task's pipeline: owns the planner state and evidence accumulators.
    struct Pipeline {
        const Task& task;
        const RunConfig& cfg;
        RunEnvironment& env;
        Gateway& gateway;
        TaskRunRecord& record;

        PlannerState state;
        std::vector<SqlCandidate> all_candidates;
        std::map<std::string, std::string> final_selection;
        std::int64_t probes_generated = 0;
        std::int64_t parallel_plans = 0;
        std::int64_t sql_executions = 0;
        bool generator_recursion = false;
        bool proposer_recursion = false;
        bool planner_recursion = false;
        int next_seq = 0;

        void log(const std::string& event, json payload) {
            json entry;
            entry["seq"] = next_seq++;
            entry["event"] = event;
            entry["payload"] = std::move(payload);
            record.transcript.push_back(std::move(entry));
        }

        void run() {
            log("task_start", json{{"instance_id", task.instance_id},
                                   {"db", task.db_ref},
                                   {"question", task.question}});

            Planner planner(gateway, env.library, cfg);
            TestCaseGenerator generator(gateway, env.library, cfg);
            SchemaLinker linker(gateway, env.library, cfg);
            Proposer proposer(gateway, env.library, cfg);
            DbHandle db{task.db_ref, env.adapter};

            state.task = task;
            state.probes = planner.plan(task);
            parallel_plans = static_cast<std::int64_t>(state.probes.size());
            {
                json probes = json::array();
                for (const auto& p : state.probes)
                    probes.push_back(json{{"probe_id", p.probe_id}, {"text", p.text}});
                log("plan", json{{"probes", probes}});
            }

            SchemaContext ctx = linker.link(db, task);
            log("schema_link", json{{"tables", table_names(ctx)}});

            std::vector<Probe> pending = state.probes;
            EvidenceBundle bundle;

            for (;;) {
                if (!pending.empty()) {
                    run_generation(generator, pending, ctx, db);
                    pending.clear();
                }
                bundle = cluster_evidence(state.probes, all_candidates, final_selection);
                log("evidence", json{{"exploratory", bundle.exploratory.size()},
                                     {"failures", bundle.failures.size()},
                                     {"successes", bundle.successes.size()},
                                     {"finals", bundle.finals.size()}});

                if (!cfg.planner_direct_sql && !bundle.empty()) run_proposal(proposer, bundle, db);

                Decision decision;
                try {
                    decision = planner.step(state, bundle);
                } catch (const IterationLimit&) {
                    planner_recursion = true;
                    fallback(bundle, db);
                    return;
                }

                switch (decision.kind) {
                    case Decision::Kind::MoreProbes: {
                        pending = decision.probes;
                        parallel_plans = std::max(
                            parallel_plans, static_cast<std::int64_t>(pending.size()));
                        json probes = json::array();
                        for (const auto& p : pending)
                            probes.push_back(
                                json{{"probe_id", p.probe_id}, {"text", p.text}});
                        log("decision", json{{"kind", "more_probes"}, {"probes", probes}});
                        break;
                    }
                    case Decision::Kind::Propose:
                        log("decision", json{{"kind", "propose"}});
                        break;
                    case Decision::Kind::Finish:
                        log("decision",
                            json{{"kind", "finish"}, {"final_sql", decision.final_sql}});
                        accept_final(decision.final_sql, db);
                        return;
                }
            }
        }

        void run_generation(const TestCaseGenerator& generator,
                            const std::vector<Probe>& pending, const SchemaContext& ctx,
                            const DbHandle& db) {
            std::vector<GeneratorOutcome> outcomes = generator.run_all(pending, ctx, db);
            probes_generated += static_cast<std::int64_t>(pending.size());
            for (std::size_t i = 0; i < outcomes.size(); ++i) {
                const auto& out = outcomes[i];
                for (auto& p : state.probes) {
                    if (p.probe_id != out.probe_id) continue;
                    p.status = (out.error || out.insufficient) ? ProbeStatus::Failed
                                                               : ProbeStatus::Generated;
                }
                all_candidates.insert(all_candidates.end(), out.candidates.begin(),
                                      out.candidates.end());
                sql_executions += static_cast<std::int64_t>(out.candidates.size());
                if (out.final) final_selection[out.probe_id] = *out.final;
                if (out.recursion_hit) generator_recursion = true;

                json j;
                j["probe_id"] = out.probe_id;
                j["iterations"] = out.iterations_used;
                json cands = json::array();
                for (const auto& c : out.candidates)
                    cands.push_back(detail::candidate_to_json(c));
                j["candidates"] = cands;
                j["final"] = out.final ? json(*out.final) : json(nullptr);
                if (out.insufficient) j["insufficient"] = *out.insufficient;
                if (out.recursion_hit) j["recursion_hit"] = true;
                if (out.error) j["error"] = *out.error;
                log("generate", std::move(j));
            }
        }

        void run_proposal(const Proposer& proposer, const EvidenceBundle& bundle,
                          const DbHandle& db) {
            ProposerResult pr = proposer.propose(task, bundle, db);
            sql_executions += pr.sql_executions;
            if (pr.recursion_hit) proposer_recursion = true;
            state.pending_final = PendingFinal{pr.sql, pr.feedback, pr.verdict};

            json j;
            j["sql"] = pr.sql;
            j["feedback"] = detail::feedback_to_json(pr.feedback);
            if (pr.verdict) j["verdict"] = detail::verdict_to_json(*pr.verdict);
            j["iterations"] = pr.iterations_used;
            j["succeeded"] = pr.succeeded;
            if (pr.recursion_hit) j["recursion_hit"] = true;
            log("propose", std::move(j));
        }

        // Terminal bookkeeping shared by finish and fallback paths.
        void accept_final(const std::string& sql, const DbHandle& db) {
            record.final_sql = sql;
            if (cfg.planner_direct_sql &&
                (!state.pending_final || state.pending_final->sql != sql)) {
                // Direct-SQL mode: the planner's submission has no attached
                // feedback yet; execute once so success is observable.
                ExecutionFeedback fb =
                    execute(db, sql, TruncationPolicy::from_config(cfg));
                ++sql_executions;
                record.succeeded = fb.ok();
                log("final_execution", detail::feedback_to_json(fb));
                return;
            }
            const auto& pf = state.pending_final;
            record.succeeded = pf && pf->sql == sql && pf->feedback.ok() &&
                               (!pf->verdict || pf->verdict->correct);
        }

        // Planner budget exhausted: most recent Success proposal, else the
        // first final-cluster candidate, else an explicit failure record.
        void fallback(const EvidenceBundle& bundle, const DbHandle& db) {
            if (state.pending_final && state.pending_final->feedback.ok()) {
                log("fallback", json{{"source", "proposal"}});
                accept_final(state.pending_final->sql, db);
                return;
            }
            if (!bundle.finals.empty()) {
                log("fallback", json{{"source", "final_cluster"}});
                record.final_sql = bundle.finals.front().second.sql;
                record.succeeded = false;
                return;
            }
            log("fallback", json{{"source", "none"}});
            record.final_sql = std::nullopt;
            record.succeeded = false;
            record.error = "planner budget exhausted with no usable final SQL";
        }

        static json table_names(const SchemaContext& ctx) {
            json names = json::array();
            for (const auto& t : ctx.tables) names.push_back(t.full_name);
            return names;
        }
    };

    void finalize_counters(TaskRunRecord& record, detail::CallCounters& calls,
                           const Pipeline& pipeline) {
        std::lock_guard<std::mutex> lock(calls.mu);
        auto& c = record.counters;
        c["llm_calls"] = calls.llm_calls;
        c["generation_tokens"] = calls.generation_tokens;
        c["reasoning_tokens"] = calls.reasoning_tokens;
        c["output_tokens"] = calls.generation_tokens + calls.reasoning_tokens;
        c["planner_calls"] = calls.planner_calls;
        c["generator_calls"] = calls.generator_calls;
        c["schema_link_calls"] = calls.schema_link_calls;
        c["proposer_calls"] = calls.proposer_calls;
        c["semantic_verifications"] = calls.verifier_calls;
        c["parallel_plans"] = pipeline.parallel_plans;
        c["probes_generated"] = pipeline.probes_generated;
        c["sql_executions"] = pipeline.sql_executions;
        c["planner_recursion_hit"] = pipeline.planner_recursion ? 1 : 0;
        c["generator_recursion_hit"] = pipeline.generator_recursion ? 1 : 0;
        c["proposer_recursion_hit"] = pipeline.proposer_recursion ? 1 : 0;
    }

    RunConfig cfg_;
    RunEnvironment& env_;
};

inline TaskRunRecord run_task(const Task& task, const RunConfig& cfg, RunEnvironment& env) {
    TaskRunner runner(cfg, env);
    return runner.run(task);
}

// ---------------------------------------------------------------------------
// Dataset-level execution over the task pool.

inline void write_transcript(const TaskRunRecord& record, const std::string& dir) {
    std::filesystem::create_directories(dir);
    auto path = std::filesystem::path(dir) / (record.instance_id + ".jsonl");
    std::ofstream out(path, std::ios::trunc);
    for (const auto& entry : record.transcript) out << entry.dump() << "\n";
}

inline std::vector<TaskRunRecord> run_dataset(const std::vector<Task>& tasks,
                                              const RunConfig& cfg, RunEnvironment& env,
                                              const std::string& transcript_dir = "") {
    if (tasks.empty()) throw DatasetError("run_dataset requires at least one task");
    if (!env.throttle) env.throttle = std::make_shared<Throttle>(cfg.requests_per_second);
    std::vector<TaskRunRecord> records(tasks.size());

    std::size_t next = 0;
    std::mutex mu;
    auto worker = [&]() {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard<std::mutex> lock(mu);
                if (next >= tasks.size()) return;
                i = next++;
            }
            TaskRunner runner(cfg, env);
            records[i] = runner.run(tasks[i]);
            if (!transcript_dir.empty()) write_transcript(records[i], transcript_dir);
        }
    };

    int nthreads = std::min<int>(cfg.task_concurrency, static_cast<int>(tasks.size()));
    if (nthreads <= 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        threads.reserve(static_cast<std::size_t>(nthreads));
        for (int t = 0; t < nthreads; ++t) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }
    return records;
}

// Run-level summary: averaged per-task statistics split by success.
inline json run_summary(const std::vector<TaskRunRecord>& records) {
    auto averages = [](const std::vector<const TaskRunRecord*>& group) {
        json avg = json::object();
        if (group.empty()) return avg;
        std::map<std::string, double> sums;
        double wall = 0.0;
        for (const auto* r : group) {
            for (const auto& [k, v] : r->counters) sums[k] += static_cast<double>(v);
            wall += static_cast<double>(r->wall_millis.count());
        }
        for (const auto& [k, v] : sums) avg[k] = v / static_cast<double>(group.size());
        avg["wall_millis"] = wall / static_cast<double>(group.size());
        return avg;
    };

    std::vector<const TaskRunRecord*> ok, failed;
    for (const auto& r : records) (r.succeeded ? ok : failed).push_back(&r);

    json summary;
    summary["num_tasks"] = records.size();
    summary["num_succeeded"] = ok.size();
    summary["num_failed"] = failed.size();
    summary["succeeded"] = averages(ok);
    summary["failed"] = averages(failed);
    return summary;
}

}  // namespace probeql
