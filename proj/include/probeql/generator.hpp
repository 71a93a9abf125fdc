#pragma once

#include <algorithm>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "probeql/core.hpp"
#include "probeql/executor.hpp"
#include "probeql/llm.hpp"
#include "probeql/prompts.hpp"
#include "probeql/verifier.hpp"

// Test Case Generator agent: schema-link the database, then turn each probe
// into executed SQL candidates through a feedback loop, in parallel across
// probes.

namespace probeql {

struct GeneratorOutcome {
    std::string probe_id;
    std::vector<SqlCandidate> candidates;
    std::optional<std::string> final;         // sql of the nominated candidate
    std::optional<std::string> insufficient;  // reason from the model
    int iterations_used = 0;
    bool recursion_hit = false;
    std::optional<std::string> error;  // isolated per-probe failure
};

// ---------------------------------------------------------------------------
// Rendering helpers

inline std::string render_table_info(const SchemaContext& ctx) {
    if (ctx.tables.empty()) return "(no tables)";
    std::string out;
    for (std::size_t t = 0; t < ctx.tables.size(); ++t) {
        const auto& table = ctx.tables[t];
        if (t) out += "\n\n";
        out += "Table full name: " + table.full_name;
        for (const auto& col : table.columns) {
            std::string desc = col.description.substr(0, 200);
            out += "\nColumn name: " + col.name + " Type: " + col.type;
            if (!desc.empty()) out += " Description: " + desc;
        }
    }
    return out;
}

inline std::string render_table_tree(const SchemaContext& ctx) {
    json tree = json::object();
    for (const auto& [db, schemas] : ctx.table_tree) {
        json schema_obj = json::object();
        for (const auto& [schema, tables] : schemas) schema_obj[schema] = tables;
        tree[db] = schema_obj;
    }
    return tree.dump();
}

// Per-candidate execution feedback in submission order.
inline std::string render_batch_feedback(const std::vector<SqlCandidate>& batch) {
    std::string out = "Execution results:";
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& fb = batch[i].feedback;
        out += "\n" + std::to_string(i + 1) + ". ";
        if (!fb) {
            out += "(not executed)";
            continue;
        }
        out += std::string(to_string(fb->kind)) + ": " + fb->message;
        if (fb->ok() && fb->result_preview) out += "\n" + *fb->result_preview;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Schema linking

class SchemaLinker {
public:
    SchemaLinker(Gateway& gateway, const PromptLibrary& library, const RunConfig& cfg)
        : gateway_(gateway), library_(library), cfg_(cfg) {}

    SchemaContext link(const DbHandle& db, const Task& task) const {
        SchemaContext full = db.adapter->introspect(db.db_id);
        full.external_knowledge = task.external_knowledge;
        if (cfg_.use_gold_schema && task.gold_schema)
            return filter_context(full, *task.gold_schema);

        ChatRequest req;
        req.role_tag = Role::Generate;
        req.temperature = cfg_.temperature_for(Role::Generate);
        req.model_id = cfg_.model_for(Role::Generate);
        req.stream_key = "link:" + task.instance_id;
        req.tools = {ToolSchema{"select_tables",
                                "Select every table relevant to the question.",
                                {{"tables", "array", "Relevant table names.", true}}}};
        SlotMap slots{{"table_names", render_table_tree(full)},
                      {"question", task.question}};
        req.messages.push_back({Speaker::System, library_.render("schema_linker", slots)});

        ChatResponse resp = gateway_.complete(req);
        std::vector<std::string> names;
        if (const ToolCall* call = resp.find_tool("select_tables")) {
            if (call->arguments.contains("tables") && call->arguments["tables"].is_array())
                for (const auto& t : call->arguments["tables"])
                    if (t.is_string()) names.push_back(t.get<std::string>());
        }
        SchemaContext linked = filter_context(full, names);
        // Recall-preserving fallback: an unusable selection keeps everything.
        return linked.tables.empty() ? full : linked;
    }

    // Keeps every table whose full or bare name matches a requested name
    // (case-insensitive), with all of its columns.
    static SchemaContext filter_context(const SchemaContext& full,
                                        const std::vector<std::string>& names) {
        auto lower = [](std::string s) {
            std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) {
                return static_cast<char>(std::tolower(c));
            });
            return s;
        };
        auto bare = [](const std::string& full_name) {
            auto pos = full_name.rfind('.');
            return pos == std::string::npos ? full_name : full_name.substr(pos + 1);
        };
        SchemaContext out;
        out.external_knowledge = full.external_knowledge;
        for (const auto& table : full.tables) {
            bool wanted = false;
            for (const auto& name : names) {
                std::string n = lower(name);
                if (n == lower(table.full_name) || n == lower(bare(table.full_name))) {
                    wanted = true;
                    break;
                }
            }
            if (!wanted) continue;
            out.tables.push_back(table);
            auto pos1 = table.full_name.find('.');
            auto pos2 = table.full_name.rfind('.');
            if (pos1 != std::string::npos && pos2 != std::string::npos && pos2 > pos1) {
                out.table_tree[table.full_name.substr(0, pos1)]
                              [table.full_name.substr(pos1 + 1, pos2 - pos1 - 1)]
                                  .push_back(table.full_name.substr(pos2 + 1));
            }
        }
        return out;
    }

private:
    Gateway& gateway_;
    const PromptLibrary& library_;
    const RunConfig& cfg_;
};

// ---------------------------------------------------------------------------
// Generator agent

class TestCaseGenerator {
public:
    TestCaseGenerator(Gateway& gateway, const PromptLibrary& library, const RunConfig& cfg)
        : gateway_(gateway), library_(library), cfg_(cfg) {}

    static std::vector<ToolSchema> tool_schemas() {
        ToolSchema execute{
            "execute_sql",
            "Execute a batch of SQL queries and return per-query feedback.",
            {{"queries", "array",
              "List of {description, sql_query, exploration} objects.", true}}};
        ToolSchema insufficient{
            "not_enough_information",
            "Declare the question unanswerable with the available information.",
            {{"reason", "string", "Why the question cannot be answered.", true}}};
        return {execute, insufficient};
    }

    GeneratorOutcome generate(const Probe& probe, const SchemaContext& ctx,
                              const DbHandle& db) const {
        GeneratorOutcome outcome;
        outcome.probe_id = probe.probe_id;

        ChatRequest req;
        req.role_tag = Role::Generate;
        req.temperature = cfg_.temperature_for(Role::Generate);
        req.model_id = cfg_.model_for(Role::Generate);
        req.tools = tool_schemas();
        req.stream_key = "generate:" + probe.probe_id;
        req.messages.push_back({Speaker::System, render_prompt(probe, ctx, db)});

        TruncationPolicy policy = TruncationPolicy::from_config(cfg_);
        while (outcome.iterations_used < cfg_.max_testcase_iters) {
            ChatResponse resp = gateway_.complete(req);
            ++outcome.iterations_used;

            if (const ToolCall* call = resp.find_tool("not_enough_information")) {
                outcome.insufficient = call->arguments.value("reason", "unspecified");
                return outcome;
            }
            if (const ToolCall* call = resp.find_tool("execute_sql")) {
                std::vector<SqlCandidate> batch = parse_batch(*call, probe.probe_id);
                if (batch.empty()) {
                    req.messages.push_back({Speaker::Assistant, call->arguments.dump()});
                    req.messages.push_back(
                        {Speaker::User,
                         "The execute_sql call contained no valid queries. Each entry "
                         "needs description, sql_query, and exploration fields."});
                    continue;
                }
                batch = execute_batch(db, std::move(batch), policy,
                                      cfg_.effective_workers());
                outcome.candidates.insert(outcome.candidates.end(), batch.begin(),
                                          batch.end());
                req.messages.push_back({Speaker::Assistant, call->arguments.dump()});
                req.messages.push_back({Speaker::User, render_batch_feedback(batch)});
                continue;
            }
            // A plain text turn terminates generation; an explicit designation
            // may name the final SQL, otherwise the default applies.
            finish(outcome, resp.text.value_or(""));
            return outcome;
        }
        outcome.recursion_hit = true;
        return outcome;
    }

    // Fan probes across the worker pool; outcome order matches probe order and
    // per-probe failures are isolated into the outcome record.
    std::vector<GeneratorOutcome> run_all(const std::vector<Probe>& probes,
                                          const SchemaContext& ctx,
                                          const DbHandle& db) const {
        std::vector<GeneratorOutcome> outcomes(probes.size());
        if (probes.empty()) return outcomes;

        std::size_t next = 0;
        std::mutex mu;
        auto worker = [&]() {
            for (;;) {
                std::size_t i;
                {
                    std::lock_guard<std::mutex> lock(mu);
                    if (next >= probes.size()) return;
                    i = next++;
                }
                try {
                    outcomes[i] = generate(probes[i], ctx, db);
                } catch (const std::exception& e) {
                    outcomes[i].probe_id = probes[i].probe_id;
                    outcomes[i].error = e.what();
                }
            }
        };

        int nthreads =
            std::min<int>(cfg_.effective_workers(), static_cast<int>(probes.size()));
        if (nthreads <= 1) {
            worker();
        } else {
            std::vector<std::thread> threads;
            threads.reserve(static_cast<std::size_t>(nthreads));
            for (int t = 0; t < nthreads; ++t) threads.emplace_back(worker);
            for (auto& t : threads) t.join();
        }
        return outcomes;
    }

    std::string render_prompt(const Probe& probe, const SchemaContext& ctx,
                              const DbHandle& db) const {
        SlotMap slots{
            {"instructions", prompts::generator_instructions_text()},
            {"sql_guidelines", prompts::sql_guidelines_text()},
            {"dialect_rules", db.adapter->dialect_rules()},
            {"examples", prompts::generator_examples_text()},
            {"table_info", render_table_info(ctx)},
            {"table_names", render_table_tree(ctx)},
            {"external_knowledge", ctx.external_knowledge.value_or("(none)")},
            {"question", probe.text},
        };
        return library_.render("generator", slots);
    }

private:
    // Parse the execute_sql batch; the execution-branch limit caps solution
    // candidates but leaves exploration queries untouched.
    std::vector<SqlCandidate> parse_batch(const ToolCall& call,
                                          const std::string& probe_id) const {
        std::vector<SqlCandidate> batch;
        if (!call.arguments.contains("queries") || !call.arguments["queries"].is_array())
            return batch;
        std::size_t solution_cap = cfg_.effective_exec_branches().apply(SIZE_MAX);
        std::size_t solutions = 0;
        for (const auto& q : call.arguments["queries"]) {
            if (!q.is_object() || !q.contains("sql_query") || !q["sql_query"].is_string())
                continue;
            SqlCandidate c;
            c.sql = q["sql_query"].get<std::string>();
            if (detail::trim(c.sql).empty()) continue;
            c.description = q.value("description", "");
            c.exploration = q.value("exploration", false);
            c.probe_id = probe_id;
            if (!c.exploration) {
                if (solutions >= solution_cap) continue;
                ++solutions;
            }
            batch.push_back(std::move(c));
        }
        return batch;
    }

    void finish(GeneratorOutcome& outcome, const std::string& text) const {
        auto is_final_candidate = [](const SqlCandidate& c) {
            return !c.exploration && c.feedback && c.feedback->ok();
        };
        if (auto obj = extract_json_object(text)) {
            if (obj->contains("final_sql") && (*obj)["final_sql"].is_string()) {
                std::string wanted = (*obj)["final_sql"].get<std::string>();
                for (const auto& c : outcome.candidates) {
                    if (c.sql == wanted && is_final_candidate(c)) {
                        outcome.final = c.sql;
                        return;
                    }
                }
            }
        }
        // Default designation: last Success non-exploration candidate.
        for (auto it = outcome.candidates.rbegin(); it != outcome.candidates.rend(); ++it) {
            if (is_final_candidate(*it)) {
                outcome.final = it->sql;
                return;
            }
        }
    }

    Gateway& gateway_;
    const PromptLibrary& library_;
    const RunConfig& cfg_;
};

}  // namespace probeql
