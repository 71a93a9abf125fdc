#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

// Prompt templates with {{slot}} substitution. Each agent's template ships as
// a text file; embedded defaults keep the binary self-contained.

namespace probeql {

struct TemplateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using SlotMap = std::map<std::string, std::string>;

// Replaces every {{name}} with its binding. Unbound slots are an error;
// unused bindings are allowed.
inline std::string render_template(const std::string& tmpl, const SlotMap& slots) {
    std::string out;
    out.reserve(tmpl.size());
    std::size_t pos = 0;
    for (;;) {
        std::size_t open = tmpl.find("{{", pos);
        if (open == std::string::npos) {
            out.append(tmpl, pos, std::string::npos);
            return out;
        }
        std::size_t close = tmpl.find("}}", open + 2);
        if (close == std::string::npos)
            throw TemplateError("unterminated slot at offset " + std::to_string(open));
        out.append(tmpl, pos, open - pos);
        std::string name = tmpl.substr(open + 2, close - open - 2);
        auto it = slots.find(name);
        if (it == slots.end()) throw TemplateError("unbound template slot '" + name + "'");
        out += it->second;
        pos = close + 2;
    }
}

namespace prompts {

inline const char* planner_template() {
    return
R"__(You are an excellent SQL agent whose task is to manage complex SQL query writing for a given natural language question.

Tools Available to Agent:

{{tools}}

Guidelines:

{{guidelines}}

Failure Examples:

{{failure_examples}}

Correct Examples:

{{correct_examples}}

Test Data

Question: {{question}}

Another way to say it: {{paraphrase}}

Now based on the instructions and examples provided, generate the probes (using the generate_testcase tool) for the above question.
)__";
}

inline const char* planner_tools_text() {
    return
R"__(- Database Exploration: Call the worker (generate_testcase tool) to generate SQL queries for probes. Probes are simple natural language queries to provide basic information about the data to the proposer for writing the final SQL.
- Propose Final SQL: Call the proposer (propose_final_sql tool) to integrate probes and synthesize the final SQL query. You should call the proposer only when you feel you have enough probes to generate the final SQL.
- Finish: If you are confident that the final SQL query is ready and the executed results look good, you can submit it (finish tool). Else you can generate more probes to guide the final SQL generation.)__";
}

inline const char* planner_guidelines_text() {
    return
R"__(- Keep your probes simple and focused on exploring the data. They should be answerable by simple SQL queries.
- Make sure each probe is independent and self-contained and does not depend on previous probes. Do not include any probes for combining results or just for an extra computation/filtering operation.
- Generate only as many probes as needed. Do not be redundant.)__";
}

inline const char* planner_failure_examples_text() {
    return
R"__(Question: "Suppose it is 2020 currently. For each customer who purchased on the website in December last year, find the days between their first visit in December and their first purchase in December. Also find what type of device did they make that first purchase?"

Probes: ["Retrieve a table of all customers who made purchases in December last year", "Retrieve a table of all customers who visited the website who also made purchases in December last year", "Retrieve a table of devices used by customers for their purchases. Assume there is a table which provides the customer id and device id and the purchase date", "Calculate the days between the first visit and the first purchase for customers in December last year"]

Explanation: The first probe does not specify the year. The second probe is not simplest as it combines two different aspects (visits and purchases) into one unit. The third probe assumes the existence of a table that may not be present in the database. The fourth probe combines probes 1 and 2 to calculate the days - thus, not self-contained. You should not write probes like the fourth.)__";
}

inline const char* planner_correct_examples_text() {
    return
R"__(Question: "Suppose it is 2020 currently. For each customer who purchased on the website in December last year, find the days between their first visit in December and their first purchase in December. Also find what type of device did they make that first purchase?"

Probes: ["Retrieve a table of all customers who made purchases in December last year (the current year is 2020)", "Retrieve a table of all customers who visited the website in December last year (the current year is 2020)", "Retrieve a table of devices used by customers for their purchases"])__";
}

inline const char* generator_template() {
    return
R"__(You are an SQL expert. Your task is to generate as many diverse SQL queries as possible for the question below. Each SQL should use a different combination of tables, so that at least one will execute correctly.

Instructions:

{{instructions}}

SQL Writing Guidelines:

{{sql_guidelines}}

Dialect, Naming, and Qualification:

{{dialect_rules}}

Examples:

{{examples}}

Table Info:

{{table_info}}

Table Names:

The table structure information is ({database name: {schema name: [table name]}}):

{{table_names}}

External Knowledge:

{{external_knowledge}}

Question:

{{question}}
)__";
}

inline const char* generator_instructions_text() {
    return
R"__(1. Check Question Completeness: If the question is not self-contained or unanswerable, use the "not_enough_information" tool with an explanation.
2. Generate many Diverse SQL queries: If answerable, generate as many diverse SQL queries as possible (even if you are confident about your first choice). Each SQL should use a different set of tables. Do NOT simply use the same table with different joins, filters, or aliases and call them diverse. True diversity means using fundamentally different tables or table combinations, not just different ways of querying the same table. For each SQL, provide a short description of what it does and how it is different from the others. Submit this list of SQL queries to the "execute_sql" tool for execution validation.
3. Explore Table Schema: Make sure that you are entirely sure about the attribute values before writing the SQL. If you are unsure, you can explore table columns or values using the "execute_sql" tool (using pattern-matching functions). Set the exploration attribute to True for such queries. Batch and execute all such exploration queries in a single tool call. Do not explore tables one by one in separate tool calls.
4. Tool Usage: In every response, you must use one of the tools.)__";
}

inline const char* sql_guidelines_text() {
    return
R"__(- MUST stay faithful to the exact wording of the question. Prefer exact table/column matches over partial matches. If an exact-match table exists, do not union with partial matches; only explore alternates if no exact match is found.
- MUST keep queries simple (Occam's razor). Avoid extra joins/filters/rankings unless explicitly requested.
- MUST pay careful attention to any External Knowledge hints provided below; treat them as guidance for table/column.
- SHOULD prefer inner joins (which naturally drop NULLs) unless the question requires outer joins. In general, remove rows with NULLs unless told otherwise.)__";
}

inline const char* generator_examples_text() {
    return
R"__(Example 1: (Diverse SQL queries)

Question: Retrieve the weather for all active days at an XYZ school for 2022.

Tool Call:
execute_sql([
('description': "Uses Table 1 and Table 2: Joins school active days with weather data.", 'sql_query': "SELECT ...", 'exploration': False),
('description': "Uses Table 4 and Table 3: Alternative join for weather info.", 'sql_query': "SELECT ...", 'exploration': False)
]))__";
}

inline const char* proposer_template() {
    return
R"__(You are an SQL expert. Your task is to generate a final SQL query for the given question. You are provided with a set of probes and corresponding SQL queries to provide you information about the database structure.

SQL Writing Guidelines:

{{sql_guidelines}}

Dialect, Naming, and Qualification:

{{dialect_rules}}

Here are the details:

Main Question: {{question}}

Another way to say it: {{paraphrase}}

Probes and SQL Queries:

Exploratory Probes:

{{exploratory}}

Failure Probes:

{{failures}}

Successful Probes:

{{successes}}

Final SQL queries (pay more attention here):

{{finals}}

Now use these information to generate a final SQL query that answers the question. The final SQL query should be a complete and valid SQL query that can be executed on the database.
)__";
}

inline const char* proposer_guidelines_text() {
    return
R"__(- MUST stay faithful to the exact wording of the question. Do not add extra tables/filters/grouping beyond what is asked.
- MUST keep queries simple (Occam's razor). Avoid extra ranking, date flooring, redundant GROUP BY, or unnecessary unions unless explicitly requested.
- MUST try to be faithful to the Final Probes. If a probe uses a table and results are non-null, prefer that table in the final SQL.)__";
}

inline const char* verifier_template() {
    return
R"__(You are a semantic verifier. Your task is to verify the semantic correctness of a SQL query against a natural language question.

Here are the steps you should follow:

1. Back-translate the SQL query: Convert the SQL query (conditioned on the executed result) into natural language query that captures what the SQL query is trying to achieve. This should be a faithful representation of the SQL query and the executed result in natural language.

2. Comparison for Semantic Verification: Compare the back-translated natural language query (from part 1) with the original question. The back-translated query should capture the same intent and meaning as the original question.
- If the back-translated query matches the original question, it indicates that the SQL query is semantically correct.
- If the back-translated query does not match the original question, it indicates that the SQL query is semantically incorrect.

3. Return a response: Your final response should be a structured JSON of three fields - "correct", "explanation", and "back_translated_query". The "back_translated_query" should always be the query back-translated from step 1. Based on the comparison in step 2:
- If the SQL query is semantically correct: "correct" = true and "explanation" = a one line explanation of why the back-translated query matches the original question.
- If the SQL query is semantically incorrect: "correct" = false and "explanation" = one line for what is the difference between the back-translated query and the question, plus one line for a potential improvement to fix this issue.

Original Question: {{question}}

SQL Query: {{sql}}

Executed Result:

{{executed_result}}

Some final guidelines for your semantic matching:

{{guidelines}}

Now please follow the steps above and return your response in the specified JSON format.
)__";
}

inline const char* verifier_guidelines_text() {
    return
R"__(- Be extra careful with complex regex and try to ensure they are written correctly. If not provide an explanation to improve the regex.
- Check the COALESCE statements carefully. Verify that they are not redundant and the default values are not incorrect. We want to keep the queries simple and avoid any redundant/overthought statements.
- Check the filters carefully. Ensure that there are no redundant filters which are unrelated to the original question.)__";
}

inline const char* schema_linker_template() {
    return
R"__(You are a schema linking expert. Given a database catalog and a question, select every table that could be relevant to answering the question. Favor recall over precision: when in doubt, include the table.

Catalog:

{{table_names}}

Question: {{question}}

Respond by calling the select_tables tool with the list of relevant table names.
)__";
}

}  // namespace prompts

// Named template set; files under a prompts directory override the defaults.
class PromptLibrary {
public:
    static PromptLibrary defaults() {
        PromptLibrary lib;
        lib.templates_["planner"] = prompts::planner_template();
        lib.templates_["generator"] = prompts::generator_template();
        lib.templates_["proposer"] = prompts::proposer_template();
        lib.templates_["verifier"] = prompts::verifier_template();
        lib.templates_["schema_linker"] = prompts::schema_linker_template();
        return lib;
    }

    // Loads <name>.txt for each template present in the directory; names
    // without a file keep their embedded default.
    static PromptLibrary load(const std::string& dir) {
        PromptLibrary lib = defaults();
        if (dir.empty()) return lib;
        if (!std::filesystem::is_directory(dir))
            throw TemplateError("prompt directory not found: " + dir);
        for (auto& [name, body] : lib.templates_) {
            auto path = std::filesystem::path(dir) / (name + ".txt");
            if (!std::filesystem::exists(path)) continue;
            std::ifstream in(path);
            std::ostringstream ss;
            ss << in.rdbuf();
            body = ss.str();
        }
        return lib;
    }

    const std::string& get(const std::string& name) const {
        auto it = templates_.find(name);
        if (it == templates_.end()) throw TemplateError("unknown template '" + name + "'");
        return it->second;
    }

    std::string render(const std::string& name, const SlotMap& slots) const {
        return render_template(get(name), slots);
    }

private:
    std::map<std::string, std::string> templates_;
};

}  // namespace probeql
