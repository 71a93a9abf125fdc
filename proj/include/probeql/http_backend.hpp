#pragma once

#include <cstdlib>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>

#include <httplib.h>

#include "probeql/core.hpp"
#include "probeql/llm.hpp"

// HTTP chat-completion backend speaking the common /v1/chat/completions
// protocol. The JSON codecs are free functions so they stay testable without
// a live server.

namespace probeql {

inline constexpr const char* kApiKeyEnvVar = "PROBEQL_API_KEY";

inline json tool_schema_to_json(const ToolSchema& tool) {
    json properties = json::object();
    json required = json::array();
    for (const auto& p : tool.params) {
        properties[p.name] = json{{"type", p.type}, {"description", p.description}};
        if (p.required) required.push_back(p.name);
    }
    return json{{"type", "function"},
                {"function", json{{"name", tool.name},
                                  {"description", tool.description},
                                  {"parameters", json{{"type", "object"},
                                                      {"properties", properties},
                                                      {"required", required}}}}}};
}

inline json build_chat_body(const ChatRequest& req) {
    json messages = json::array();
    for (const auto& m : req.messages)
        messages.push_back(json{{"role", to_string(m.speaker)}, {"content", m.content}});
    json body;
    body["model"] = req.model_id;
    body["temperature"] = req.temperature;
    body["messages"] = messages;
    if (!req.tools.empty()) {
        json tools = json::array();
        for (const auto& t : req.tools) tools.push_back(tool_schema_to_json(t));
        body["tools"] = tools;
    }
    return body;
}

inline ChatResponse parse_chat_response(const json& body) {
    if (!body.contains("choices") || !body["choices"].is_array() ||
        body["choices"].empty())
        throw MalformedResponse("chat response has no choices");
    const json& message = body["choices"][0].value("message", json::object());

    ChatResponse resp;
    if (message.contains("content") && message["content"].is_string())
        resp.text = message["content"].get<std::string>();
    if (message.contains("tool_calls") && message["tool_calls"].is_array()) {
        for (const auto& tc : message["tool_calls"]) {
            const json& fn = tc.value("function", json::object());
            if (!fn.contains("name") || !fn["name"].is_string())
                throw MalformedResponse("tool call without a function name");
            ToolCall call;
            call.name = fn["name"].get<std::string>();
            if (fn.contains("arguments")) {
                if (fn["arguments"].is_string()) {
                    json args = json::parse(fn["arguments"].get<std::string>(), nullptr,
                                            false);
                    if (args.is_discarded())
                        throw MalformedResponse("tool call arguments are not valid JSON");
                    call.arguments = args;
                } else if (fn["arguments"].is_object()) {
                    call.arguments = fn["arguments"];
                }
            }
            resp.tool_calls.push_back(std::move(call));
        }
    }
    if (body.contains("usage") && body["usage"].is_object()) {
        const json& u = body["usage"];
        resp.usage.prompt_tokens = u.value("prompt_tokens", std::int64_t{0});
        resp.usage.completion_tokens = u.value("completion_tokens", std::int64_t{0});
        if (u.contains("completion_tokens_details"))
            resp.usage.reasoning_tokens =
                u["completion_tokens_details"].value("reasoning_tokens", std::int64_t{0});
    }
    return resp;
}

class HttpBackend final : public Backend {
public:
    struct Options {
        std::string endpoint;  // e.g. http://localhost:8000
        std::string path = "/v1/chat/completions";
        std::string api_key;   // falls back to the environment variable
    };

    explicit HttpBackend(Options opts) : opts_(std::move(opts)) {
        if (opts_.api_key.empty())
            if (const char* env = std::getenv(kApiKeyEnvVar)) opts_.api_key = env;
    }

    std::string name() const override { return "http:" + opts_.endpoint; }

    ChatResponse complete(const ChatRequest& req) override {
        httplib::Client client(opts_.endpoint);
        client.set_read_timeout(300, 0);
        client.set_connection_timeout(30, 0);
        httplib::Headers headers;
        if (!opts_.api_key.empty())
            headers.emplace("Authorization", "Bearer " + opts_.api_key);

        auto result = client.Post(opts_.path, headers, build_chat_body(req).dump(),
                                  "application/json");
        if (!result)
            throw TransientBackendError("backend unreachable: " + opts_.endpoint);
        if (result->status == 429 || result->status >= 500)
            throw TransientBackendError("backend returned status " +
                                        std::to_string(result->status));
        if (result->status != 200)
            throw BackendError("backend returned status " +
                               std::to_string(result->status) + ": " + result->body);

        json body = json::parse(result->body, nullptr, false);
        if (body.is_discarded())
            throw MalformedResponse("backend returned invalid JSON");
        return parse_chat_response(body);
    }

private:
    Options opts_;
};

}  // namespace probeql
