#pragma once

#include <algorithm>
#include <cctype>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "probeql/core.hpp"
#include "probeql/llm.hpp"
#include "probeql/prompts.hpp"
#include "probeql/verifier.hpp"

// Planner agent: emit a probe suite in one forward pass, decide when to
// generate more probes, propose, or finish, and score plan quality.

namespace probeql {

struct NoProbes : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NoDecision : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Planner state and decisions

struct PendingFinal {
    std::string sql;
    ExecutionFeedback feedback;
    std::optional<Verdict> verdict;
};

struct PlannerState {
    Task task;
    std::vector<Probe> probes;
    int rounds = 0;
    std::optional<PendingFinal> pending_final;
    int iterations_used = 0;
};

struct Decision {
    enum class Kind { MoreProbes, Propose, Finish } kind = Kind::Propose;
    std::vector<Probe> probes;  // set for MoreProbes
    std::string final_sql;      // set for Finish

    static Decision more_probes(std::vector<Probe> ps) {
        return {Kind::MoreProbes, std::move(ps), {}};
    }
    static Decision propose() { return {Kind::Propose, {}, {}}; }
    static Decision finish(std::string sql) { return {Kind::Finish, {}, std::move(sql)}; }
};

// ---------------------------------------------------------------------------
// Plan-quality metrics (Table 8 style): SCR, OR, #TC.

struct PlanMetrics {
    double self_containment_rate = 0.0;
    double overlap_rate = 0.0;
    double num_test_cases = 0.0;
};

struct PlanMetricsOptions {
    // A probe mentioning any marker cross-references other probes (or asks for
    // a computation over their results) and is not self-contained.
    std::vector<std::string> cross_reference_markers{
        "previous", "above", "probe", "result of", "calculate the"};
    double jaccard_threshold = 0.6;
};

// Per-probe judgments behind plan_metrics; the heuristic judge is the
// deterministic default, an LLM judge can plug in instead.
class PlanJudge {
public:
    virtual ~PlanJudge() = default;
    virtual bool self_contained(const std::string& probe) = 0;
    virtual bool overlapping(const std::string& a, const std::string& b) = 0;
};

namespace detail {

inline std::string lowercase(const std::string& s) {
    std::string out = s;
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

inline std::set<std::string> content_tokens(const std::string& text) {
    std::set<std::string> tokens;
    std::string cur;
    for (char ch : text) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        } else if (!cur.empty()) {
            tokens.insert(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.insert(cur);
    return tokens;
}

inline double token_jaccard(const std::string& a, const std::string& b) {
    auto ta = content_tokens(a);
    auto tb = content_tokens(b);
    if (ta.empty() && tb.empty()) return 1.0;
    std::size_t inter = 0;
    for (const auto& t : ta)
        if (tb.count(t)) ++inter;
    std::size_t uni = ta.size() + tb.size() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace detail

class HeuristicPlanJudge final : public PlanJudge {
public:
    explicit HeuristicPlanJudge(PlanMetricsOptions opts = {}) : opts_(std::move(opts)) {}

    bool self_contained(const std::string& probe) override {
        std::string low = detail::lowercase(probe);
        for (const auto& marker : opts_.cross_reference_markers)
            if (low.find(detail::lowercase(marker)) != std::string::npos) return false;
        return true;
    }

    bool overlapping(const std::string& a, const std::string& b) override {
        return detail::token_jaccard(a, b) > opts_.jaccard_threshold;
    }

private:
    PlanMetricsOptions opts_;
};

// LLM-judged variant: one yes/no model call per judgment.
class LlmPlanJudge final : public PlanJudge {
public:
    LlmPlanJudge(Gateway& gateway, const RunConfig& cfg) : gateway_(gateway), cfg_(cfg) {}

    bool self_contained(const std::string& probe) override {
        return ask("Is the following database probe self-contained, i.e. answerable "
                   "without referring to any other probe's result? Answer with a JSON "
                   "object {\"answer\": true|false}.\n\nProbe: " + probe);
    }

    bool overlapping(const std::string& a, const std::string& b) override {
        return ask("Do these two database probes ask for substantially the same "
                   "information? Answer with a JSON object {\"answer\": true|false}."
                   "\n\nProbe A: " + a + "\nProbe B: " + b);
    }

private:
    bool ask(const std::string& prompt) {
        ChatRequest req;
        req.role_tag = Role::Plan;
        req.temperature = 0.0;
        req.model_id = cfg_.model_for(Role::Plan);
        req.messages.push_back({Speaker::System, prompt});
        ChatResponse resp = gateway_.complete(req);
        auto obj = extract_json_object(resp.text.value_or(""));
        if (!obj || !obj->contains("answer") || !(*obj)["answer"].is_boolean())
            throw MalformedResponse("plan judge returned no boolean answer");
        return (*obj)["answer"].get<bool>();
    }

    Gateway& gateway_;
    const RunConfig& cfg_;
};

inline PlanMetrics plan_metrics(const std::vector<Probe>& probes, PlanJudge& judge) {
    PlanMetrics m;
    m.num_test_cases = static_cast<double>(probes.size());
    if (probes.empty()) return m;

    std::size_t contained = 0;
    for (const auto& p : probes)
        if (judge.self_contained(p.text)) ++contained;
    m.self_containment_rate = static_cast<double>(contained) / static_cast<double>(probes.size());

    if (probes.size() >= 2) {
        std::size_t overlapping = 0, pairs = 0;
        for (std::size_t i = 0; i < probes.size(); ++i) {
            for (std::size_t j = i + 1; j < probes.size(); ++j) {
                ++pairs;
                if (judge.overlapping(probes[i].text, probes[j].text)) ++overlapping;
            }
        }
        m.overlap_rate = static_cast<double>(overlapping) / static_cast<double>(pairs);
    }
    return m;
}

inline PlanMetrics plan_metrics(const std::vector<Probe>& probes,
                                const PlanMetricsOptions& opts = {}) {
    HeuristicPlanJudge judge(opts);
    return plan_metrics(probes, judge);
}

// ---------------------------------------------------------------------------
// Planner agent

class Planner {
public:
    Planner(Gateway& gateway, const PromptLibrary& library, const RunConfig& cfg)
        : gateway_(gateway), library_(library), cfg_(cfg) {}

    static std::vector<ToolSchema> tool_schemas() {
        ToolSchema generate{"generate_testcase",
                            "Generate SQL queries for a batch of probes.",
                            {{"probes", "array",
                              "Self-contained natural language probes to turn into SQL.",
                              true}}};
        ToolSchema propose{"propose_final_sql",
                           "Ask the proposer to synthesize the final SQL from the "
                           "collected probes.",
                           {}};
        ToolSchema finish{"finish",
                          "Submit the final SQL query once it executes and looks good.",
                          {{"final_sql", "string", "The final SQL query to submit.",
                            false}}};
        return {generate, propose, finish};
    }

    // Single forward pass: one model call produces the whole initial suite.
    std::vector<Probe> plan(const Task& task) const {
        ChatRequest req = base_request(task);
        req.messages.push_back({Speaker::System, render_prompt(task)});
        ChatResponse resp = gateway_.complete(req);
        const ToolCall* call = resp.find_tool("generate_testcase");
        if (!call) throw NoProbes("planner called no generate_testcase tool");
        std::vector<std::string> texts = probe_texts(*call);
        if (texts.empty()) throw NoProbes("planner generated an empty probe list");
        return make_probes(task, texts, 0);
    }

    // One decision turn over the accumulated evidence.
    Decision step(PlannerState& state, const EvidenceBundle& evidence) const {
        if (state.iterations_used >= cfg_.max_planner_iters)
            throw IterationLimit("planner iteration budget exhausted");

        ChatRequest req = base_request(state.task);
        req.messages.push_back({Speaker::System, render_prompt(state.task)});
        req.messages.push_back({Speaker::User, render_evidence_turn(state, evidence)});

        ChatResponse resp = gateway_.complete(req);
        ++state.iterations_used;
        ++state.rounds;

        std::optional<Decision> decision = interpret(state, resp);
        if (!decision) {
            // One corrective turn before giving up, budget permitting.
            if (state.iterations_used >= cfg_.max_planner_iters)
                throw IterationLimit("planner iteration budget exhausted");
            req.messages.push_back({Speaker::Assistant, resp.text.value_or("")});
            req.messages.push_back(
                {Speaker::User,
                 "You must respond with exactly one tool call: generate_testcase, "
                 "propose_final_sql, or finish."});
            ChatResponse retry = gateway_.complete(req);
            ++state.iterations_used;
            decision = interpret(state, retry);
            if (!decision) throw NoDecision("planner made no tool call");
        }
        if (decision->kind == Decision::Kind::MoreProbes)
            state.probes.insert(state.probes.end(), decision->probes.begin(),
                                decision->probes.end());
        return *decision;
    }

    std::string render_prompt(const Task& task) const {
        SlotMap slots{
            {"tools", prompts::planner_tools_text()},
            {"guidelines", prompts::planner_guidelines_text()},
            {"failure_examples", prompts::planner_failure_examples_text()},
            {"correct_examples", prompts::planner_correct_examples_text()},
            {"question", task.question},
            {"paraphrase", task.restatement()},
        };
        return library_.render("planner", slots);
    }

    std::string render_evidence_turn(const PlannerState& state,
                                     const EvidenceBundle& evidence) const {
        std::string out = "Evidence collected so far:\n\nExploratory Probes:\n\n" +
                          render_evidence_entries(evidence.exploratory);
        out += "\n\nFailure Probes:\n\n" + render_evidence_entries(evidence.failures);
        out += "\n\nSuccessful Probes:\n\n" + render_evidence_entries(evidence.successes);
        out += "\n\nFinal SQL queries (pay more attention here):\n\n" +
               render_evidence_entries(evidence.finals);
        out += "\n\nPending final proposal: ";
        if (state.pending_final) {
            const auto& pf = *state.pending_final;
            out += pf.sql + "\nProposal feedback: " + to_string(pf.feedback.kind) + ": " +
                   pf.feedback.message;
            if (pf.verdict)
                out += "\nSemantic verdict: " +
                       std::string(pf.verdict->correct ? "correct" : "incorrect") + " (" +
                       pf.verdict->explanation + ")";
        } else {
            out += "(none)";
        }
        out += "\n\nDecide the next action: call generate_testcase with more probes, "
               "propose_final_sql to synthesize the final SQL, or finish to submit it.";
        return out;
    }

private:
    ChatRequest base_request(const Task& task) const {
        ChatRequest req;
        req.role_tag = Role::Plan;
        req.temperature = cfg_.temperature_for(Role::Plan);
        req.model_id = cfg_.model_for(Role::Plan);
        req.tools = tool_schemas();
        req.stream_key = "plan:" + task.instance_id;
        return req;
    }

    static std::vector<std::string> probe_texts(const ToolCall& call) {
        std::vector<std::string> texts;
        if (!call.arguments.contains("probes") || !call.arguments["probes"].is_array())
            return texts;
        for (const auto& p : call.arguments["probes"])
            if (p.is_string() && !detail::trim(p.get<std::string>()).empty())
                texts.push_back(p.get<std::string>());
        return texts;
    }

    std::vector<Probe> make_probes(const Task& task, std::vector<std::string> texts,
                                   std::size_t existing) const {
        // Branch limit keeps the first listed probes (Table 4 semantics).
        std::size_t keep = cfg_.plan_branch_limit.apply(texts.size());
        texts.resize(keep);
        std::vector<Probe> probes;
        probes.reserve(texts.size());
        for (std::size_t i = 0; i < texts.size(); ++i) {
            Probe p;
            p.probe_id = task.instance_id + "-p" + std::to_string(existing + i + 1);
            p.text = texts[i];
            p.parent_task = task.instance_id;
            p.status = ProbeStatus::Pending;
            probes.push_back(std::move(p));
        }
        return probes;
    }

    std::optional<Decision> interpret(const PlannerState& state,
                                      const ChatResponse& resp) const {
        if (const ToolCall* call = resp.find_tool("finish")) {
            if (cfg_.planner_direct_sql && call->arguments.contains("final_sql") &&
                call->arguments["final_sql"].is_string()) {
                std::string sql = call->arguments["final_sql"].get<std::string>();
                if (!detail::trim(sql).empty()) return Decision::finish(sql);
            }
            if (state.pending_final && state.pending_final->feedback.ok())
                return Decision::finish(state.pending_final->sql);
            // Premature finish downgrades to a proposer round; the invariant
            // that Finish always carries a Success proposal stays intact.
            return Decision::propose();
        }
        if (resp.find_tool("propose_final_sql")) return Decision::propose();
        if (const ToolCall* call = resp.find_tool("generate_testcase")) {
            std::vector<std::string> texts = probe_texts(*call);
            if (texts.empty()) return std::nullopt;
            return Decision::more_probes(make_probes(state.task, texts, state.probes.size()));
        }
        return std::nullopt;
    }

    Gateway& gateway_;
    const PromptLibrary& library_;
    const RunConfig& cfg_;
};

}  // namespace probeql
