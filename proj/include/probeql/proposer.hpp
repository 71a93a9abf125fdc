#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "probeql/core.hpp"
#include "probeql/executor.hpp"
#include "probeql/llm.hpp"
#include "probeql/prompts.hpp"
#include "probeql/verifier.hpp"

// Final SQL Proposer agent: synthesize the answer from the four evidence
// clusters alone (never the schema catalog), iterating on executor and
// verifier feedback.

namespace probeql {

struct ProposerResult {
    std::string sql;
    ExecutionFeedback feedback;
    std::optional<Verdict> verdict;
    int iterations_used = 0;
    bool succeeded = false;
    int verifier_calls = 0;
    int sql_executions = 0;
    bool recursion_hit = false;
};

class Proposer {
public:
    Proposer(Gateway& gateway, const PromptLibrary& library, const RunConfig& cfg)
        : gateway_(gateway), library_(library), cfg_(cfg) {}

    static std::vector<ToolSchema> tool_schemas() {
        return {ToolSchema{"submit_sql",
                           "Submit the final SQL query for execution and verification.",
                           {{"sql_query", "string", "The complete final SQL query.",
                             true}}}};
    }

    ProposerResult propose(const Task& task, const EvidenceBundle& bundle,
                           const DbHandle& db) const {
        if (bundle.empty())
            throw std::invalid_argument("proposer requires a non-empty evidence bundle");

        ChatRequest req;
        req.role_tag = Role::Propose;
        req.temperature = cfg_.temperature_for(Role::Propose);
        req.model_id = cfg_.model_for(Role::Propose);
        req.tools = tool_schemas();
        req.stream_key = "propose:" + task.instance_id;
        req.messages.push_back({Speaker::System, render_prompt(task, bundle, db)});

        Verifier verifier(gateway_, library_, cfg_);
        TruncationPolicy policy = TruncationPolicy::from_config(cfg_);

        struct Attempt {
            std::string sql;
            ExecutionFeedback feedback;
            std::optional<Verdict> verdict;
        };
        std::vector<Attempt> attempts;
        ProposerResult result;
        auto finalize = [&result](const Attempt& attempt, bool succeeded) {
            result.sql = attempt.sql;
            result.feedback = attempt.feedback;
            result.verdict = attempt.verdict;
            result.succeeded = succeeded;
            return result;
        };

        while (result.iterations_used < cfg_.max_proposer_iters) {
            ChatResponse resp = gateway_.complete(req);
            ++result.iterations_used;

            std::optional<std::string> sql = extract_sql(resp);
            if (!sql) {
                req.messages.push_back({Speaker::Assistant, resp.text.value_or("")});
                req.messages.push_back(
                    {Speaker::User,
                     "Submit the final SQL query via the submit_sql tool."});
                continue;
            }

            Attempt attempt;
            attempt.sql = *sql;
            attempt.feedback = execute(db, *sql, policy);
            ++result.sql_executions;
            req.messages.push_back({Speaker::Assistant, *sql});

            if (!attempt.feedback.ok()) {
                attempts.push_back(attempt);
                req.messages.push_back(
                    {Speaker::User,
                     "Execution Feedback: " + std::string(to_string(attempt.feedback.kind)) +
                         ": " + attempt.feedback.message +
                         "\nPlease revise the SQL and submit again."});
                continue;
            }

            if (!cfg_.use_semantic_verifier) {
                attempts.push_back(attempt);
                return finalize(attempt, true);
            }

            attempt.verdict =
                verifier.verify(task.restatement(), *sql, attempt.feedback,
                                "verify:" + task.instance_id);
            ++result.verifier_calls;
            attempts.push_back(attempt);
            if (attempt.verdict->correct) return finalize(attempt, true);

            req.messages.push_back(
                {Speaker::User,
                 "Semantic verification failed: " + attempt.verdict->explanation +
                     "\nBack-translated query: " + attempt.verdict->back_translated_query +
                     "\nPlease revise the SQL and submit again."});
        }

        // Budget exhausted: best-so-far, highest class last.
        result.recursion_hit = true;
        const Attempt* best = nullptr;
        for (const auto& a : attempts)
            if (a.feedback.ok() && a.verdict && a.verdict->correct) best = &a;
        bool verified = best != nullptr;
        if (!best)
            for (const auto& a : attempts)
                if (a.feedback.ok()) best = &a;
        if (!best && !attempts.empty()) best = &attempts.back();
        if (!best) {
            result.sql.clear();
            result.feedback.kind = FeedbackKind::CompilationError;
            result.feedback.message = "proposer produced no SQL";
            return result;
        }
        return finalize(*best, verified);
    }

    std::string render_prompt(const Task& task, const EvidenceBundle& bundle,
                              const DbHandle& db) const {
        SlotMap slots{
            {"sql_guidelines", prompts::proposer_guidelines_text()},
            {"dialect_rules", db.adapter->dialect_rules()},
            {"question", task.question},
            {"paraphrase", task.restatement()},
            {"exploratory", render_evidence_entries(bundle.exploratory)},
            {"failures", render_evidence_entries(bundle.failures)},
            {"successes", render_evidence_entries(bundle.successes)},
            {"finals", render_evidence_entries(bundle.finals)},
        };
        return library_.render("proposer", slots);
    }

private:
    // Structured tool call preferred; a bare read-only statement in the text
    // turn is accepted as a fallback.
    static std::optional<std::string> extract_sql(const ChatResponse& resp) {
        if (const ToolCall* call = resp.find_tool("submit_sql")) {
            if (call->arguments.contains("sql_query") &&
                call->arguments["sql_query"].is_string()) {
                std::string sql = call->arguments["sql_query"].get<std::string>();
                if (!detail::trim(sql).empty()) return sql;
            }
            return std::nullopt;
        }
        std::string text = detail::trim(resp.text.value_or(""));
        if (text.empty()) return std::nullopt;
        if (auto fence = text.find("```"); fence != std::string::npos) {
            auto start = text.find('\n', fence);
            auto end = text.find("```", fence + 3);
            if (start != std::string::npos && end != std::string::npos && end > start)
                text = detail::trim(text.substr(start + 1, end - start - 1));
        }
        if (is_read_only_statement(text)) return text;
        return std::nullopt;
    }

    Gateway& gateway_;
    const PromptLibrary& library_;
    const RunConfig& cfg_;
};

}  // namespace probeql
