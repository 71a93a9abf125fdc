#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

// Shared domain vocabulary: tasks, probes, SQL candidates, execution
// feedback, run configuration and the evidence bundle handed to the proposer.

namespace probeql {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Errors

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingFeedback : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DatasetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Raised when an agent loop exhausts its per-role iteration budget.
struct IterationLimit : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Task

struct Task {
    std::string instance_id;
    std::string question;
    std::optional<std::string> paraphrase;  // "Another way to say it"
    std::string db_ref;
    std::optional<std::string> external_knowledge;
    std::optional<std::string> gold_sql;                 // bench only
    std::optional<std::vector<std::string>> gold_schema; // table names, optional

    // Paraphrase duplicates the question when the dataset does not provide one.
    const std::string& restatement() const {
        return paraphrase ? *paraphrase : question;
    }
};

// ---------------------------------------------------------------------------
// Probe (the planner's natural-language test case)

enum class ProbeStatus { Pending, Generated, Failed };

struct Probe {
    std::string probe_id;
    std::string text;
    std::string parent_task;
    ProbeStatus status = ProbeStatus::Pending;
};

inline const char* to_string(ProbeStatus s) {
    switch (s) {
        case ProbeStatus::Pending: return "pending";
        case ProbeStatus::Generated: return "generated";
        case ProbeStatus::Failed: return "failed";
    }
    return "pending";
}

// ---------------------------------------------------------------------------
// Execution feedback (the executor's three-way taxonomy)

enum class FeedbackKind { CompilationError, NullError, Success };

inline const char* to_string(FeedbackKind k) {
    switch (k) {
        case FeedbackKind::CompilationError: return "CompilationError";
        case FeedbackKind::NullError: return "NullError";
        case FeedbackKind::Success: return "Success";
    }
    return "CompilationError";
}

struct ExecutionFeedback {
    FeedbackKind kind = FeedbackKind::CompilationError;
    std::string message;
    std::optional<std::string> result_preview;  // truncated csv, Success only
    std::int64_t row_count = 0;
    std::chrono::milliseconds exec_millis{0};

    bool ok() const { return kind == FeedbackKind::Success; }
};

// Classification is a pure function of the execution outcome: an engine error
// is a CompilationError, zero rows a NullError, anything else a Success.
inline FeedbackKind feedback_kind_for(bool engine_error, std::int64_t row_count) {
    if (engine_error) return FeedbackKind::CompilationError;
    return row_count > 0 ? FeedbackKind::Success : FeedbackKind::NullError;
}

// ---------------------------------------------------------------------------
// SqlCandidate

struct SqlCandidate {
    std::string sql;
    std::string description;
    bool exploration = false;
    std::string probe_id;
    std::optional<ExecutionFeedback> feedback;
};

// ---------------------------------------------------------------------------
// RunConfig (defaults pinned to the published hyperparameter table)

// A branch limit is either a positive cap or unlimited.
struct BranchLimit {
    std::optional<int> cap;  // nullopt = unlimited

    static BranchLimit unlimited() { return {}; }
    static BranchLimit of(int n) { return {n}; }
    bool is_unlimited() const { return !cap.has_value(); }
    std::size_t apply(std::size_t n) const {
        return cap ? std::min<std::size_t>(n, static_cast<std::size_t>(*cap)) : n;
    }
    std::string str() const { return cap ? std::to_string(*cap) : "unlimited"; }

    friend bool operator==(const BranchLimit&, const BranchLimit&) = default;
};

enum class Role { Plan, Generate, Propose, Verify };

inline const char* to_string(Role r) {
    switch (r) {
        case Role::Plan: return "plan";
        case Role::Generate: return "generate";
        case Role::Propose: return "propose";
        case Role::Verify: return "verify";
    }
    return "plan";
}

inline Role role_from_string(const std::string& s) {
    if (s == "plan") return Role::Plan;
    if (s == "generate") return Role::Generate;
    if (s == "propose") return Role::Propose;
    if (s == "verify") return Role::Verify;
    throw ConfigError("unknown role: " + s);
}

struct RunConfig {
    int num_workers = 6;
    int max_planner_iters = 20;
    int max_testcase_iters = 15;
    int max_proposer_iters = 20;
    double llm_temperature = 0.3;
    double verifier_temperature = 1.0;
    double requests_per_second = 0.5;
    int max_retries = 15;
    int request_timeout_secs = 120;
    std::string exec_format = "csv";
    int exec_max_length = 500;  // chars
    int exec_max_rows = 3;
    BranchLimit plan_branch_limit = BranchLimit::unlimited();
    BranchLimit exec_branch_limit = BranchLimit::unlimited();
    std::map<std::string, std::string> model_per_role = {
        {"plan", "o3"}, {"generate", "o3"}, {"propose", "o3"}, {"verify", "o3"}};
    bool use_gold_schema = false;

    // Artifact knobs beyond the hyperparameter table: ablation switches,
    // scheduler sizing and the embedded-engine query timeout.
    bool use_semantic_verifier = true;
    bool planner_direct_sql = false;  // "w/o Proposer" mode
    bool sequential_mode = false;     // "w/o parallelization" mode
    int task_concurrency = 4;
    int exec_timeout_secs = 60;

    double temperature_for(Role r) const {
        return r == Role::Verify ? verifier_temperature : llm_temperature;
    }
    const std::string& model_for(Role r) const {
        return model_per_role.at(to_string(r));
    }
    int effective_workers() const { return sequential_mode ? 1 : num_workers; }
    BranchLimit effective_exec_branches() const {
        return sequential_mode ? BranchLimit::of(1) : exec_branch_limit;
    }

    void validate() const {
        auto positive = [](int v, const char* key) {
            if (v < 1) throw ConfigError(std::string("config key '") + key +
                                         "' must be >= 1");
        };
        positive(num_workers, "num_workers");
        positive(max_planner_iters, "max_planner_iters");
        positive(max_testcase_iters, "max_testcase_iters");
        positive(max_proposer_iters, "max_proposer_iters");
        positive(request_timeout_secs, "request_timeout_secs");
        positive(exec_max_length, "exec_max_length");
        positive(exec_max_rows, "exec_max_rows");
        positive(task_concurrency, "task_concurrency");
        positive(exec_timeout_secs, "exec_timeout_secs");
        if (max_retries < 0) throw ConfigError("config key 'max_retries' must be >= 0");
        if (requests_per_second <= 0)
            throw ConfigError("config key 'requests_per_second' must be > 0");
        if (exec_format != "csv")
            throw ConfigError("config key 'exec_format' must be 'csv'");
        for (auto lim : {plan_branch_limit, exec_branch_limit})
            if (lim.cap && *lim.cap < 1)
                throw ConfigError("branch limits must be >= 1 or unlimited");
        for (const char* role : {"plan", "generate", "propose", "verify"})
            if (!model_per_role.count(role))
                throw ConfigError(std::string("missing model for role '") + role + "'");
    }

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// ---------------------------------------------------------------------------
// Config file: flat "key = value" lines, '#' comments, unknown keys rejected.

namespace detail {

inline std::string trim(std::string s) {
    const char* ws = " \t\r\n";
    auto b = s.find_first_not_of(ws);
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "' expects a boolean, got '" + v + "'");
}

inline int parse_int(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
    }
}

inline BranchLimit parse_branch_limit(const std::string& v, const std::string& key) {
    if (v == "unlimited" || v == "inf" || v == "none") return BranchLimit::unlimited();
    int n = parse_int(v, key);
    if (n < 1) throw ConfigError("config key '" + key + "' must be >= 1 or unlimited");
    return BranchLimit::of(n);
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

}  // namespace detail

inline RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected 'key = value'");
        std::string key = detail::trim(line.substr(0, eq));
        std::string val = detail::trim(line.substr(eq + 1));
        using namespace detail;
        if (key == "num_workers") cfg.num_workers = parse_int(val, key);
        else if (key == "max_planner_iters") cfg.max_planner_iters = parse_int(val, key);
        else if (key == "max_testcase_iters") cfg.max_testcase_iters = parse_int(val, key);
        else if (key == "max_proposer_iters") cfg.max_proposer_iters = parse_int(val, key);
        else if (key == "llm_temperature") cfg.llm_temperature = parse_double(val, key);
        else if (key == "verifier_temperature") cfg.verifier_temperature = parse_double(val, key);
        else if (key == "requests_per_second") cfg.requests_per_second = parse_double(val, key);
        else if (key == "max_retries") cfg.max_retries = parse_int(val, key);
        else if (key == "request_timeout_secs") cfg.request_timeout_secs = parse_int(val, key);
        else if (key == "exec_format") cfg.exec_format = val;
        else if (key == "exec_max_length") cfg.exec_max_length = parse_int(val, key);
        else if (key == "exec_max_rows") cfg.exec_max_rows = parse_int(val, key);
        else if (key == "plan_branch_limit") cfg.plan_branch_limit = parse_branch_limit(val, key);
        else if (key == "exec_branch_limit") cfg.exec_branch_limit = parse_branch_limit(val, key);
        else if (key == "model_plan") cfg.model_per_role["plan"] = val;
        else if (key == "model_generate") cfg.model_per_role["generate"] = val;
        else if (key == "model_propose") cfg.model_per_role["propose"] = val;
        else if (key == "model_verify") cfg.model_per_role["verify"] = val;
        else if (key == "use_gold_schema") cfg.use_gold_schema = parse_bool(val, key);
        else if (key == "use_semantic_verifier") cfg.use_semantic_verifier = parse_bool(val, key);
        else if (key == "planner_direct_sql") cfg.planner_direct_sql = parse_bool(val, key);
        else if (key == "sequential_mode") cfg.sequential_mode = parse_bool(val, key);
        else if (key == "task_concurrency") cfg.task_concurrency = parse_int(val, key);
        else if (key == "exec_timeout_secs") cfg.exec_timeout_secs = parse_int(val, key);
        else throw ConfigError("unknown config key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

inline std::string serialize_config(const RunConfig& cfg) {
    std::ostringstream os;
    using detail::format_double;
    os << "num_workers = " << cfg.num_workers << "\n"
       << "max_planner_iters = " << cfg.max_planner_iters << "\n"
       << "max_testcase_iters = " << cfg.max_testcase_iters << "\n"
       << "max_proposer_iters = " << cfg.max_proposer_iters << "\n"
       << "llm_temperature = " << format_double(cfg.llm_temperature) << "\n"
       << "verifier_temperature = " << format_double(cfg.verifier_temperature) << "\n"
       << "requests_per_second = " << format_double(cfg.requests_per_second) << "\n"
       << "max_retries = " << cfg.max_retries << "\n"
       << "request_timeout_secs = " << cfg.request_timeout_secs << "\n"
       << "exec_format = " << cfg.exec_format << "\n"
       << "exec_max_length = " << cfg.exec_max_length << "\n"
       << "exec_max_rows = " << cfg.exec_max_rows << "\n"
       << "plan_branch_limit = " << cfg.plan_branch_limit.str() << "\n"
       << "exec_branch_limit = " << cfg.exec_branch_limit.str() << "\n"
       << "model_plan = " << cfg.model_per_role.at("plan") << "\n"
       << "model_generate = " << cfg.model_per_role.at("generate") << "\n"
       << "model_propose = " << cfg.model_per_role.at("propose") << "\n"
       << "model_verify = " << cfg.model_per_role.at("verify") << "\n"
       << "use_gold_schema = " << (cfg.use_gold_schema ? "true" : "false") << "\n"
       << "use_semantic_verifier = " << (cfg.use_semantic_verifier ? "true" : "false") << "\n"
       << "planner_direct_sql = " << (cfg.planner_direct_sql ? "true" : "false") << "\n"
       << "sequential_mode = " << (cfg.sequential_mode ? "true" : "false") << "\n"
       << "task_concurrency = " << cfg.task_concurrency << "\n"
       << "exec_timeout_secs = " << cfg.exec_timeout_secs << "\n";
    return os.str();
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

// ---------------------------------------------------------------------------
// Dataset: one task per line, JSON-lines.

inline Task task_from_json(const json& j) {
    Task t;
    if (!j.contains("instance_id") || !j["instance_id"].is_string())
        throw DatasetError("task record missing string 'instance_id'");
    if (!j.contains("question") || !j["question"].is_string())
        throw DatasetError("task record missing string 'question'");
    t.instance_id = j["instance_id"].get<std::string>();
    t.question = j["question"].get<std::string>();
    if (t.instance_id.empty()) throw DatasetError("instance_id must be non-empty");
    if (t.question.empty()) throw DatasetError("question must be non-empty");
    t.db_ref = j.value("db_id", std::string{});
    if (j.contains("paraphrase") && j["paraphrase"].is_string())
        t.paraphrase = j["paraphrase"].get<std::string>();
    if (j.contains("external_knowledge") && j["external_knowledge"].is_string())
        t.external_knowledge = j["external_knowledge"].get<std::string>();
    if (j.contains("gold_sql") && j["gold_sql"].is_string())
        t.gold_sql = j["gold_sql"].get<std::string>();
    if (j.contains("gold_schema") && j["gold_schema"].is_array())
        t.gold_schema = j["gold_schema"].get<std::vector<std::string>>();
    return t;
}

inline std::vector<Task> load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DatasetError("cannot open dataset file: " + path);
    std::vector<Task> tasks;
    std::unordered_set<std::string> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DatasetError("dataset line " + std::to_string(lineno) + ": " + e.what());
        }
        Task t = task_from_json(j);
        if (!seen.insert(t.instance_id).second)
            throw DatasetError("duplicate instance_id '" + t.instance_id + "'");
        tasks.push_back(std::move(t));
    }
    return tasks;
}

// ---------------------------------------------------------------------------
// EvidenceBundle: probes and executed candidates clustered for the proposer.

struct EvidenceBundle {
    using Entry = std::pair<Probe, SqlCandidate>;
    std::vector<Entry> exploratory;
    std::vector<Entry> failures;
    std::vector<Entry> successes;
    std::vector<Entry> finals;

    bool empty() const {
        return exploratory.empty() && failures.empty() && successes.empty() &&
               finals.empty();
    }
    std::size_t size() const {
        return exploratory.size() + failures.size() + successes.size() + finals.size();
    }
};

// Partition executed candidates into the four proposer-facing clusters.
// The per-probe selection nominates at most one Success, exploration=false
// candidate as "final"; ties on identical SQL go to the earliest candidate.
inline EvidenceBundle cluster_evidence(
    const std::vector<Probe>& probes,
    const std::vector<SqlCandidate>& candidates,
    const std::map<std::string, std::string>& final_selection) {
    std::unordered_map<std::string, const Probe*> by_id;
    for (const auto& p : probes) by_id.emplace(p.probe_id, &p);

    for (const auto& c : candidates)
        if (!c.feedback)
            throw MissingFeedback("candidate for probe '" + c.probe_id +
                                  "' has no execution feedback");

    // Resolve each probe's final nominee to a concrete candidate index.
    std::unordered_map<std::string, std::size_t> final_index;
    for (const auto& [probe_id, sql] : final_selection) {
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            const auto& c = candidates[i];
            if (c.probe_id != probe_id || c.sql != sql) continue;
            if (c.exploration || c.feedback->kind != FeedbackKind::Success) continue;
            final_index.emplace(probe_id, i);  // earliest match wins
            break;
        }
    }

    EvidenceBundle bundle;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto& c = candidates[i];
        auto it = by_id.find(c.probe_id);
        if (it == by_id.end())
            throw MissingFeedback("candidate references unknown probe '" + c.probe_id + "'");
        const Probe& probe = *it->second;
        auto fin = final_index.find(c.probe_id);
        if (fin != final_index.end() && fin->second == i) {
            bundle.finals.emplace_back(probe, c);
        } else if (c.exploration) {
            bundle.exploratory.emplace_back(probe, c);
        } else if (c.feedback->kind == FeedbackKind::Success) {
            bundle.successes.emplace_back(probe, c);
        } else {
            bundle.failures.emplace_back(probe, c);
        }
    }
    return bundle;
}

// Deterministic rendering of one evidence cluster for model-facing prompts:
// numbered entries of probe text, SQL, and execution outcome.
inline std::string render_evidence_entries(const std::vector<EvidenceBundle::Entry>& entries) {
    if (entries.empty()) return "(none)";
    std::string out;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& [probe, cand] = entries[i];
        if (i) out += "\n\n";
        out += std::to_string(i + 1) + ". Probe: " + probe.text;
        out += "\nSQL: " + cand.sql;
        if (!cand.feedback) {
            out += "\nExecution Feedback: (none)";
        } else if (cand.feedback->kind == FeedbackKind::Success) {
            out += "\nExecuted Result (truncated):\n" +
                   cand.feedback->result_preview.value_or("");
        } else {
            out += "\nExecution Feedback: " +
                   std::string(to_string(cand.feedback->kind)) + ": " +
                   cand.feedback->message;
        }
    }
    return out;
}

}  // namespace probeql
