#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

#include "probeql/core.hpp"
#include "probeql/llm.hpp"
#include "probeql/prompts.hpp"

// Semantic Verifier tool: back-translate a proposed SQL into natural language
// and compare it against the original question via one model call.

namespace probeql {

struct MalformedVerdict : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Verdict {
    bool correct = false;
    std::string explanation;
    std::string back_translated_query;
};

// Pulls the first JSON object out of a model response that may carry
// surrounding prose or a code fence.
inline std::optional<json> extract_json_object(const std::string& text) {
    auto try_parse = [](const std::string& s) -> std::optional<json> {
        json parsed = json::parse(s, nullptr, false);
        if (parsed.is_discarded() || !parsed.is_object()) return std::nullopt;
        return parsed;
    };
    if (auto whole = try_parse(detail::trim(text))) return whole;
    std::size_t open = text.find('{');
    std::size_t close = text.rfind('}');
    if (open == std::string::npos || close == std::string::npos || close <= open)
        return std::nullopt;
    return try_parse(text.substr(open, close - open + 1));
}

inline std::optional<Verdict> parse_verdict(const std::string& text) {
    auto obj = extract_json_object(text);
    if (!obj) return std::nullopt;
    const json& j = *obj;
    if (!j.contains("correct") || !j["correct"].is_boolean()) return std::nullopt;
    if (!j.contains("explanation") || !j["explanation"].is_string()) return std::nullopt;
    if (!j.contains("back_translated_query") || !j["back_translated_query"].is_string())
        return std::nullopt;
    Verdict v;
    v.correct = j["correct"].get<bool>();
    v.explanation = j["explanation"].get<std::string>();
    v.back_translated_query = j["back_translated_query"].get<std::string>();
    if (detail::trim(v.explanation).empty()) return std::nullopt;
    if (detail::trim(v.back_translated_query).empty()) return std::nullopt;
    return v;
}

class Verifier {
public:
    Verifier(Gateway& gateway, const PromptLibrary& library, const RunConfig& cfg)
        : gateway_(gateway), library_(library), cfg_(cfg) {}

    Verdict verify(const std::string& question, const std::string& sql,
                   const ExecutionFeedback& feedback,
                   const std::string& stream_key = {}) const {
        if (feedback.kind != FeedbackKind::Success)
            throw std::invalid_argument("verify requires Success feedback");

        SlotMap slots{
            {"question", question},
            {"sql", sql},
            {"executed_result", feedback.result_preview.value_or("")},
            {"guidelines", prompts::verifier_guidelines_text()},
        };
        ChatRequest req;
        req.role_tag = Role::Verify;
        req.temperature = cfg_.temperature_for(Role::Verify);
        req.model_id = cfg_.model_for(Role::Verify);
        req.stream_key = stream_key;
        req.messages.push_back({Speaker::System, library_.render("verifier", slots)});

        ChatResponse resp = gateway_.complete(req);
        std::string text = resp.text.value_or("");
        if (auto v = parse_verdict(text)) return *v;

        // One corrective reparse attempt before giving up.
        req.messages.push_back({Speaker::Assistant, text});
        req.messages.push_back(
            {Speaker::User,
             "Your previous response was not a valid verdict. Return exactly one JSON "
             "object with fields \"correct\" (boolean), \"explanation\" (string), and "
             "\"back_translated_query\" (string)."});
        ChatResponse retry = gateway_.complete(req);
        if (auto v = parse_verdict(retry.text.value_or(""))) return *v;
        throw MalformedVerdict("verifier response violates the three-field schema");
    }

private:
    Gateway& gateway_;
    const PromptLibrary& library_;
    const RunConfig& cfg_;
};

}  // namespace probeql
