#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "probeql/clock.hpp"
#include "probeql/core.hpp"

// Model-backend contract: one gateway in front of interchangeable backends
// (HTTP chat completion or a deterministic scripted replay), with a global
// request throttle, per-attempt timeout and bounded retry.

namespace probeql {

// ---------------------------------------------------------------------------
// Errors

struct RetriesExhausted : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MalformedResponse : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ScriptExhausted : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ScriptParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Raised by a backend for failures worth retrying (5xx, reset connections).
struct TransientBackendError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BackendError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Request / response shapes

enum class Speaker { System, User, Assistant, Tool };

inline const char* to_string(Speaker s) {
    switch (s) {
        case Speaker::System: return "system";
        case Speaker::User: return "user";
        case Speaker::Assistant: return "assistant";
        case Speaker::Tool: return "tool";
    }
    return "user";
}

struct Message {
    Speaker speaker = Speaker::User;
    std::string content;
};

struct ToolParam {
    std::string name;
    std::string type = "string";  // string | number | integer | boolean | array | object
    std::string description;
    bool required = true;
};

struct ToolSchema {
    std::string name;
    std::string description;
    std::vector<ToolParam> params;
};

struct ChatRequest {
    Role role_tag = Role::Plan;
    std::vector<Message> messages;
    std::vector<ToolSchema> tools;
    double temperature = 0.3;
    std::string model_id;
    // Scripted-replay stream key. Empty means "arrival order within role";
    // concurrent callers set a stable key (e.g. the probe id) so replay stays
    // deterministic under any worker interleaving.
    std::string stream_key;

    void validate() const {
        if (messages.empty()) throw MalformedResponse("request has no messages");
        if (messages.front().speaker != Speaker::System)
            throw MalformedResponse("first message must be from the system");
        std::unordered_set<std::string> names;
        for (const auto& t : tools)
            if (!names.insert(t.name).second)
                throw MalformedResponse("duplicate tool name '" + t.name + "' in request");
    }
};

struct ToolCall {
    std::string name;
    json arguments = json::object();
};

struct TokenUsage {
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;
    std::int64_t reasoning_tokens = 0;
};

struct ChatResponse {
    std::optional<std::string> text;
    std::vector<ToolCall> tool_calls;
    TokenUsage usage;
    std::chrono::milliseconds latency{0};

    bool has_tool(const std::string& name) const {
        for (const auto& c : tool_calls)
            if (c.name == name) return true;
        return false;
    }
    const ToolCall* find_tool(const std::string& name) const {
        for (const auto& c : tool_calls)
            if (c.name == name) return &c;
        return nullptr;
    }
};

// ---------------------------------------------------------------------------
// Backend interface

class Backend {
public:
    virtual ~Backend() = default;
    virtual ChatResponse complete(const ChatRequest& req) = 0;
    virtual std::string name() const = 0;
};

// ---------------------------------------------------------------------------
// Scripted backend: replays canned responses from a JSON-lines file.
//
// One record per response:
//   {"role":"generate","key":"t1/p1","text":"...","tool_calls":[{"name":...,
//    "arguments":{...}}],"latency_ms":100,"usage":{...},"error":"transient"}
//
// Records replay per (role, key) in file order; records without a key form
// the role's arrival-order queue.
class ScriptedBackend final : public Backend {
public:
    struct Record {
        std::optional<std::string> text;
        std::vector<ToolCall> tool_calls;
        TokenUsage usage;
        std::chrono::milliseconds latency{0};
        std::optional<std::string> error;  // "transient" | "fatal"
    };

    explicit ScriptedBackend(std::shared_ptr<Clock> clock = system_clock())
        : clock_(std::move(clock)) {}

    std::string name() const override { return "scripted"; }

    void push(Role role, Record rec, const std::string& key = "") {
        std::lock_guard<std::mutex> lock(mu_);
        queues_[{std::string(to_string(role)), key}].push_back(std::move(rec));
    }

    ChatResponse complete(const ChatRequest& req) override {
        Record rec;
        {
            std::lock_guard<std::mutex> lock(mu_);
            // Keyed queue first; keyless records form the role's
            // arrival-order queue and serve any request for that role.
            auto it = queues_.find({std::string(to_string(req.role_tag)), req.stream_key});
            if (it == queues_.end() || it->second.empty())
                it = queues_.find({std::string(to_string(req.role_tag)), std::string()});
            if (it == queues_.end() || it->second.empty())
                throw ScriptExhausted("script has no response for role '" +
                                      std::string(to_string(req.role_tag)) + "'" +
                                      (req.stream_key.empty() ? "" : ", key '" + req.stream_key + "'"));
            rec = std::move(it->second.front());
            it->second.pop_front();
        }
        clock_->sleep_for(rec.latency);
        if (rec.error) {
            if (*rec.error == "transient")
                throw TransientBackendError("scripted transient failure");
            throw BackendError("scripted fatal failure");
        }
        ChatResponse resp;
        resp.text = rec.text;
        resp.tool_calls = rec.tool_calls;
        resp.usage = rec.usage;
        resp.latency = rec.latency;
        return resp;
    }

    // Remaining records across all queues (exposed for isolation tests).
    std::size_t remaining() const {
        std::lock_guard<std::mutex> lock(mu_);
        std::size_t n = 0;
        for (const auto& [k, q] : queues_) n += q.size();
        return n;
    }

private:
    mutable std::mutex mu_;
    std::map<std::pair<std::string, std::string>, std::deque<Record>> queues_;
    std::shared_ptr<Clock> clock_;
};

inline ScriptedBackend::Record script_record_from_json(const json& j) {
    ScriptedBackend::Record rec;
    if (j.contains("text") && j["text"].is_string())
        rec.text = j["text"].get<std::string>();
    if (j.contains("tool_calls")) {
        if (!j["tool_calls"].is_array())
            throw ScriptParseError("'tool_calls' must be an array");
        for (const auto& tc : j["tool_calls"]) {
            if (!tc.contains("name") || !tc["name"].is_string())
                throw ScriptParseError("tool call missing string 'name'");
            ToolCall call;
            call.name = tc["name"].get<std::string>();
            call.arguments = tc.value("arguments", json::object());
            rec.tool_calls.push_back(std::move(call));
        }
    }
    if (j.contains("usage")) {
        const auto& u = j["usage"];
        rec.usage.prompt_tokens = u.value("prompt_tokens", 0);
        rec.usage.completion_tokens = u.value("completion_tokens", 0);
        rec.usage.reasoning_tokens = u.value("reasoning_tokens", 0);
        if (rec.usage.prompt_tokens < 0 || rec.usage.completion_tokens < 0 ||
            rec.usage.reasoning_tokens < 0)
            throw ScriptParseError("usage counters must be non-negative");
    }
    if (j.contains("latency_ms"))
        rec.latency = std::chrono::milliseconds(j["latency_ms"].get<std::int64_t>());
    if (j.contains("error")) {
        std::string e = j["error"].get<std::string>();
        if (e != "transient" && e != "fatal")
            throw ScriptParseError("script 'error' must be 'transient' or 'fatal'");
        rec.error = e;
    }
    return rec;
}

inline std::shared_ptr<ScriptedBackend> load_script(
    const std::string& path, std::shared_ptr<Clock> clock = system_clock()) {
    std::ifstream in(path);
    if (!in) throw ScriptParseError("cannot open script file: " + path);
    auto backend = std::make_shared<ScriptedBackend>(std::move(clock));
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ScriptParseError("script line " + std::to_string(lineno) + ": " + e.what());
        }
        if (!j.contains("role") || !j["role"].is_string())
            throw ScriptParseError("script line " + std::to_string(lineno) +
                                   ": missing string 'role'");
        Role role;
        try {
            role = role_from_string(j["role"].get<std::string>());
        } catch (const ConfigError& e) {
            throw ScriptParseError("script line " + std::to_string(lineno) + ": " + e.what());
        }
        backend->push(role, script_record_from_json(j), j.value("key", std::string{}));
    }
    return backend;
}

// ---------------------------------------------------------------------------
// Gateway: throttle + timeout + retry + usage accounting in front of a backend.

// Global request pacing: consecutive requests are spaced by at least
// 1/requests_per_second, whichever gateway issues them.
class Throttle {
public:
    explicit Throttle(double requests_per_second)
        : interval_(static_cast<std::int64_t>(1000.0 / requests_per_second)) {}

    void wait(Clock& clock) {
        Clock::duration slot;
        {
            std::lock_guard<std::mutex> lock(mu_);
            slot = std::max(clock.now(), next_slot_);
            next_slot_ = slot + interval_;
        }
        auto now = clock.now();
        if (slot > now) clock.sleep_for(slot - now);
    }

private:
    std::chrono::milliseconds interval_;
    std::mutex mu_;
    Clock::duration next_slot_{0};
};

struct UsageTotals {
    std::int64_t calls = 0;
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;
    std::int64_t reasoning_tokens = 0;
};

class Gateway {
public:
    // Observer invoked once per successful completion (thread-safe callee
    // required); the scheduler uses it to attribute usage to tasks.
    using Observer = std::function<void(const ChatRequest&, const ChatResponse&)>;

    Gateway(std::shared_ptr<Backend> backend, const RunConfig& cfg,
            std::shared_ptr<Clock> clock = system_clock(), std::uint64_t seed = 0,
            std::shared_ptr<Throttle> throttle = nullptr)
        : backend_(std::move(backend)),
          clock_(std::move(clock)),
          throttle_(throttle ? std::move(throttle)
                             : std::make_shared<Throttle>(cfg.requests_per_second)),
          max_retries_(cfg.max_retries),
          timeout_(std::chrono::milliseconds(
              static_cast<std::int64_t>(cfg.request_timeout_secs) * 1000)),
          rng_(seed) {}

    void set_observer(Observer obs) {
        std::lock_guard<std::mutex> lock(observer_mu_);
        observer_ = std::move(obs);
    }

    ChatResponse complete(const ChatRequest& req) {
        req.validate();
        std::chrono::milliseconds last_backoff{0};
        for (int attempt = 0;; ++attempt) {
            throttle_->wait(*clock_);
            auto started = clock_->now();
            try {
                ChatResponse resp = backend_->complete(req);
                auto elapsed = clock_->now() - started;
                if (elapsed > timeout_)
                    throw TransientBackendError(
                        "attempt exceeded request timeout (" +
                        std::to_string(elapsed.count()) + " ms)");
                resp.latency = std::chrono::duration_cast<std::chrono::milliseconds>(elapsed);
                validate_tool_calls(req, resp);
                record(req, resp);
                return resp;
            } catch (const TransientBackendError& e) {
                if (attempt >= max_retries_)
                    throw RetriesExhausted("giving up after " +
                                           std::to_string(attempt + 1) +
                                           " attempts: " + e.what());
                last_backoff = backoff_delay(attempt, last_backoff);
                clock_->sleep_for(last_backoff);
            }
        }
    }

    UsageTotals usage() const {
        std::lock_guard<std::mutex> lock(usage_mu_);
        return usage_;
    }

    Backend& backend() { return *backend_; }
    std::shared_ptr<Throttle> shared_throttle() const { return throttle_; }

private:
    // Doubling base capped at 30 s, jittered within [base/2, base] and clamped
    // so the schedule is non-decreasing across attempts.
    std::chrono::milliseconds backoff_delay(int attempt,
                                            std::chrono::milliseconds previous) {
        double base = std::min(30.0, std::pow(2.0, attempt));
        double jittered;
        {
            std::lock_guard<std::mutex> lock(rng_mu_);
            std::uniform_real_distribution<double> dist(base / 2.0, base);
            jittered = dist(rng_);
        }
        auto delay = std::chrono::milliseconds(static_cast<std::int64_t>(jittered * 1000.0));
        return std::max(delay, previous);
    }

    // Every tool call must name a declared tool and satisfy its parameter spec.
    static void validate_tool_calls(const ChatRequest& req, const ChatResponse& resp) {
        if (!resp.text && resp.tool_calls.empty())
            throw MalformedResponse("backend returned neither text nor tool calls");
        for (const auto& call : resp.tool_calls) {
            const ToolSchema* schema = nullptr;
            for (const auto& t : req.tools)
                if (t.name == call.name) { schema = &t; break; }
            if (!schema)
                throw MalformedResponse("tool call '" + call.name +
                                        "' does not match any declared tool");
            if (!call.arguments.is_object())
                throw MalformedResponse("tool call '" + call.name +
                                        "' arguments must be a JSON object");
            for (const auto& p : schema->params) {
                if (!p.required) continue;
                if (!call.arguments.contains(p.name))
                    throw MalformedResponse("tool call '" + call.name +
                                            "' missing required argument '" + p.name + "'");
                const auto& v = call.arguments[p.name];
                bool ok = (p.type == "string" && v.is_string()) ||
                          (p.type == "number" && v.is_number()) ||
                          (p.type == "integer" && v.is_number_integer()) ||
                          (p.type == "boolean" && v.is_boolean()) ||
                          (p.type == "array" && v.is_array()) ||
                          (p.type == "object" && v.is_object());
                if (!ok)
                    throw MalformedResponse("tool call '" + call.name + "' argument '" +
                                            p.name + "' is not of type " + p.type);
            }
        }
        if (resp.usage.prompt_tokens < 0 || resp.usage.completion_tokens < 0 ||
            resp.usage.reasoning_tokens < 0)
            throw MalformedResponse("usage counters must be non-negative");
    }

    void record(const ChatRequest& req, const ChatResponse& resp) {
        {
            std::lock_guard<std::mutex> lock(usage_mu_);
            ++usage_.calls;
            usage_.prompt_tokens += resp.usage.prompt_tokens;
            usage_.completion_tokens += resp.usage.completion_tokens;
            usage_.reasoning_tokens += resp.usage.reasoning_tokens;
        }
        Observer obs;
        {
            std::lock_guard<std::mutex> lock(observer_mu_);
            obs = observer_;
        }
        if (obs) obs(req, resp);
    }

    std::shared_ptr<Backend> backend_;
    std::shared_ptr<Clock> clock_;
    std::shared_ptr<Throttle> throttle_;
    int max_retries_;
    std::chrono::milliseconds timeout_;

    mutable std::mutex usage_mu_;
    UsageTotals usage_;

    std::mutex rng_mu_;
    std::mt19937_64 rng_;

    std::mutex observer_mu_;
    Observer observer_;
};

}  // namespace probeql
