#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "probeql/core.hpp"
#include "probeql/executor.hpp"
#include "probeql/scheduler.hpp"

// Bench harness: Execution Accuracy (EX) and EX@k scoring with majority
// consensus over repeated runs.

namespace probeql {

struct GoldExecutionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingRuns : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Result canonicalization: typed cells, 9 significant digits for reals,
// trailing whitespace stripped from strings, rows sorted when order-free.

inline constexpr const char* kFailedResultMarker = "FAIL";

namespace detail {

inline std::string strip_trailing_ws(const std::string& s) {
    auto e = s.find_last_not_of(" \t\r\n");
    return e == std::string::npos ? "" : s.substr(0, e + 1);
}

inline std::string canonical_cell(const ResultCell& cell) {
    switch (cell.kind) {
        case ResultCell::Kind::Null: return "n:";
        case ResultCell::Kind::Integer: return "i:" + std::to_string(cell.i);
        case ResultCell::Kind::Real: {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.9g", cell.d);
            return std::string("f:") + buf;
        }
        case ResultCell::Kind::Text: return "s:" + strip_trailing_ws(cell.s);
    }
    return "n:";
}

inline std::vector<std::string> canonical_rows(const ResultTable& table) {
    std::vector<std::string> rows;
    rows.reserve(table.rows.size());
    for (const auto& row : table.rows) {
        std::string r;
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c) r += '\x1f';
            r += canonical_cell(row[c]);
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace detail

// Deterministic string form of a result table; used for consensus grouping.
inline std::string canonicalize_result(const ResultTable& table, bool order_sensitive) {
    std::vector<std::string> rows = detail::canonical_rows(table);
    if (!order_sensitive) std::sort(rows.begin(), rows.end());
    std::string out = "cols:" + std::to_string(table.columns.size());
    for (const auto& r : rows) {
        out += '\x1e';
        out += r;
    }
    return out;
}

// Executes a query for scoring purposes; engine failures collapse to the
// failure marker so they group together in consensus.
inline std::string canonical_result(const DbHandle& db, const std::string& sql,
                                    bool order_sensitive = false) {
    if (!is_read_only_statement(sql)) return kFailedResultMarker;
    try {
        return canonicalize_result(db.adapter->run_query(db.db_id, sql), order_sensitive);
    } catch (const QueryEngineError&) {
        return kFailedResultMarker;
    } catch (const QueryTimeout&) {
        return kFailedResultMarker;
    }
}

// ---------------------------------------------------------------------------
// ORDER BY detection: a top-level ORDER BY makes row order significant.

inline bool has_top_level_order_by(const std::string& sql) {
    int depth = 0;
    std::string word, prev;
    bool found = false;
    auto take_word = [&]() {
        if (word.empty()) return;
        if (depth == 0) {
            if (prev == "ORDER" && word == "BY") found = true;
            prev = word;
        }
        word.clear();
    };
    std::size_t i = 0;
    while (i < sql.size() && !found) {
        char ch = sql[i];
        if (ch == '\'' || ch == '"' || ch == '`') {
            take_word();
            char quote = ch;
            ++i;
            while (i < sql.size()) {
                if (sql[i] == quote) {
                    if (i + 1 < sql.size() && sql[i + 1] == quote) i += 2;
                    else { ++i; break; }
                } else ++i;
            }
            continue;
        }
        if (ch == '-' && i + 1 < sql.size() && sql[i + 1] == '-') {
            take_word();
            while (i < sql.size() && sql[i] != '\n') ++i;
            continue;
        }
        if (ch == '/' && i + 1 < sql.size() && sql[i + 1] == '*') {
            take_word();
            auto end = sql.find("*/", i + 2);
            i = end == std::string::npos ? sql.size() : end + 2;
            continue;
        }
        if (ch == '(') { take_word(); ++depth; ++i; continue; }
        if (ch == ')') { take_word(); if (depth > 0) --depth; ++i; continue; }
        if (std::isalpha(static_cast<unsigned char>(ch)) || ch == '_') {
            word += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
            ++i;
            continue;
        }
        take_word();
        ++i;
    }
    take_word();
    return found;
}

// ---------------------------------------------------------------------------
// EX comparison: position-aligned columns, multiset row equality unless order
// matters, relative tolerance 1e-6 on numerics.

namespace detail {

inline bool cells_match(const ResultCell& a, const ResultCell& b) {
    if (a.kind == ResultCell::Kind::Null || b.kind == ResultCell::Kind::Null)
        return a.kind == b.kind;
    if (a.is_numeric() && b.is_numeric()) {
        double x = a.as_double(), y = b.as_double();
        if (x == y) return true;
        double scale = std::max({1.0, std::fabs(x), std::fabs(y)});
        return std::fabs(x - y) <= 1e-6 * scale;
    }
    if (a.kind == ResultCell::Kind::Text && b.kind == ResultCell::Kind::Text)
        return strip_trailing_ws(a.s) == strip_trailing_ws(b.s);
    return false;
}

inline bool rows_match(const std::vector<ResultCell>& a, const std::vector<ResultCell>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!cells_match(a[i], b[i])) return false;
    return true;
}

// Sort rows by canonical serialization so the tolerant pairwise comparison
// sees both tables in the same order.
inline std::vector<std::size_t> canonical_order(const ResultTable& t) {
    std::vector<std::string> keys = canonical_rows(t);
    std::vector<std::size_t> idx(t.rows.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
        return keys[x] < keys[y];
    });
    return idx;
}

}  // namespace detail

inline bool tables_match(const ResultTable& predicted, const ResultTable& gold,
                         bool order_sensitive) {
    if (predicted.columns.size() != gold.columns.size()) return false;
    if (predicted.rows.size() != gold.rows.size()) return false;
    if (order_sensitive) {
        for (std::size_t r = 0; r < gold.rows.size(); ++r)
            if (!detail::rows_match(predicted.rows[r], gold.rows[r])) return false;
        return true;
    }
    auto pi = detail::canonical_order(predicted);
    auto gi = detail::canonical_order(gold);
    for (std::size_t r = 0; r < gold.rows.size(); ++r)
        if (!detail::rows_match(predicted.rows[pi[r]], gold.rows[gi[r]])) return false;
    return true;
}

inline bool ex_match(const DbHandle& db, const std::string& predicted_sql,
                     const std::string& gold_sql, bool order_sensitive) {
    ResultTable gold;
    try {
        if (!is_read_only_statement(gold_sql))
            throw QueryEngineError("gold statement is not read-only");
        gold = db.adapter->run_query(db.db_id, gold_sql);
    } catch (const std::exception& e) {
        throw GoldExecutionError("gold SQL failed on " + db.db_id + ": " + e.what());
    }
    ResultTable predicted;
    try {
        if (!is_read_only_statement(predicted_sql)) return false;
        predicted = db.adapter->run_query(db.db_id, predicted_sql);
    } catch (const std::exception&) {
        return false;
    }
    return tables_match(predicted, gold, order_sensitive);
}

// ---------------------------------------------------------------------------
// Majority consensus over repeated runs.

struct ConsensusRun {
    int run_id = 0;
    std::string final_sql;
    std::string canonical_result;  // kFailedResultMarker for failed runs
};

struct ConsensusInput {
    std::vector<ConsensusRun> runs;
};

struct ConsensusChoice {
    int run_id = 0;
    std::string final_sql;
    std::size_t group_size = 0;
    bool all_failed = false;
};

inline ConsensusChoice majority_consensus(const ConsensusInput& input) {
    if (input.runs.empty()) throw MissingRuns("consensus requires at least one run");
    std::vector<ConsensusRun> runs = input.runs;
    std::sort(runs.begin(), runs.end(),
              [](const ConsensusRun& a, const ConsensusRun& b) { return a.run_id < b.run_id; });

    std::map<std::string, std::size_t> group_sizes;
    for (const auto& r : runs) ++group_sizes[r.canonical_result];

    // Scan in run_id order so a tie resolves to the group containing the
    // earliest run, represented by that run's SQL.
    const ConsensusRun* best = nullptr;
    std::size_t best_size = 0;
    for (const auto& r : runs) {
        if (r.canonical_result == kFailedResultMarker) continue;
        std::size_t size = group_sizes.at(r.canonical_result);
        if (size > best_size) {
            best = &r;
            best_size = size;
        }
    }
    if (!best) {
        // Universal failure: fall back to the earliest run.
        return {runs.front().run_id, runs.front().final_sql, runs.size(), true};
    }
    return {best->run_id, best->final_sql, best_size, false};
}

// ---------------------------------------------------------------------------
// Gold entries and dataset-level scoring.

struct GoldEntry {
    std::string instance_id;
    std::string gold_sql;
    std::optional<bool> order_sensitive;  // defaults to ORDER BY detection
};

inline std::map<std::string, GoldEntry> load_golds(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DatasetError("cannot open gold file: " + path);
    std::map<std::string, GoldEntry> golds;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw DatasetError("gold line " + std::to_string(lineno) + ": invalid JSON");
        if (!j.contains("instance_id") || !j["instance_id"].is_string() ||
            !j.contains("gold_sql") || !j["gold_sql"].is_string())
            throw DatasetError("gold line " + std::to_string(lineno) +
                               ": requires instance_id and gold_sql strings");
        GoldEntry g;
        g.instance_id = j["instance_id"].get<std::string>();
        g.gold_sql = j["gold_sql"].get<std::string>();
        if (j.contains("order_sensitive")) {
            if (!j["order_sensitive"].is_boolean())
                throw DatasetError("gold line " + std::to_string(lineno) +
                                   ": order_sensitive must be boolean");
            g.order_sensitive = j["order_sensitive"].get<bool>();
        }
        if (!golds.emplace(g.instance_id, g).second)
            throw DatasetError("duplicate gold for instance '" + g.instance_id + "'");
    }
    return golds;
}

struct InstanceScore {
    std::string instance_id;
    std::string consensus_sql;
    bool ex = false;
    bool ex_any = false;
    std::string detail;
};

struct ScoreReport {
    double ex = 0.0;
    double ex_at_k = 0.0;
    double avg_wall_minutes = 0.0;
    int k = 0;
    std::vector<InstanceScore> instances;
};

// runs[r] holds one full pass over the dataset; records are matched to tasks
// by instance_id and every instance must appear in every run.
inline ScoreReport score_dataset(const std::vector<Task>& tasks,
                                 const std::vector<std::vector<TaskRunRecord>>& runs,
                                 const std::map<std::string, GoldEntry>& golds,
                                 const std::shared_ptr<ExecutionAdapter>& adapter) {
    if (tasks.empty()) throw DatasetError("score_dataset requires at least one task");
    if (runs.empty()) throw MissingRuns("score_dataset requires at least one run");

    std::vector<std::map<std::string, const TaskRunRecord*>> by_run;
    for (const auto& run : runs) {
        std::map<std::string, const TaskRunRecord*> index;
        for (const auto& r : run) index[r.instance_id] = &r;
        by_run.push_back(std::move(index));
    }

    ScoreReport report;
    report.k = static_cast<int>(runs.size());
    double wall_ms_total = 0.0;
    std::size_t wall_count = 0;
    std::size_t matched_consensus = 0, matched_any = 0;

    for (const auto& task : tasks) {
        auto gold_it = golds.find(task.instance_id);
        if (gold_it == golds.end())
            throw DatasetError("no gold SQL for instance '" + task.instance_id + "'");
        const GoldEntry& gold = gold_it->second;
        bool order_sensitive =
            gold.order_sensitive.value_or(has_top_level_order_by(gold.gold_sql));
        DbHandle db{task.db_ref, adapter};

        InstanceScore score;
        score.instance_id = task.instance_id;

        ConsensusInput consensus;
        for (std::size_t r = 0; r < runs.size(); ++r) {
            auto rec_it = by_run[r].find(task.instance_id);
            if (rec_it == by_run[r].end())
                throw MissingRuns("run " + std::to_string(r + 1) +
                                  " has no record for instance '" + task.instance_id + "'");
            const TaskRunRecord* rec = rec_it->second;
            wall_ms_total += static_cast<double>(rec->wall_millis.count());
            ++wall_count;

            ConsensusRun crun;
            crun.run_id = static_cast<int>(r + 1);
            crun.final_sql = rec->final_sql.value_or("");
            crun.canonical_result =
                rec->final_sql ? canonical_result(db, *rec->final_sql, order_sensitive)
                               : kFailedResultMarker;
            consensus.runs.push_back(std::move(crun));
        }

        ConsensusChoice choice = majority_consensus(consensus);
        score.consensus_sql = choice.final_sql;

        auto match = [&](const std::string& sql) {
            if (detail::trim(sql).empty()) return false;
            return ex_match(db, sql, gold.gold_sql, order_sensitive);
        };

        try {
            score.ex = !choice.all_failed && match(choice.final_sql);
            for (const auto& r : consensus.runs)
                if (match(r.final_sql)) {
                    score.ex_any = true;
                    break;
                }
            score.detail = score.ex ? "matched" : "result mismatch";
        } catch (const GoldExecutionError& e) {
            score.ex = false;
            score.ex_any = false;
            score.detail = e.what();
        }

        if (score.ex) ++matched_consensus;
        if (score.ex_any) ++matched_any;
        report.instances.push_back(std::move(score));
    }

    report.ex = static_cast<double>(matched_consensus) / static_cast<double>(tasks.size());
    report.ex_at_k = static_cast<double>(matched_any) / static_cast<double>(tasks.size());
    if (wall_count > 0)
        report.avg_wall_minutes = wall_ms_total / static_cast<double>(wall_count) / 60000.0;
    return report;
}

// ---------------------------------------------------------------------------
// Telemetry round-trip: the run command persists records, score reloads them.

inline json record_to_json(const TaskRunRecord& r) {
    json j;
    j["instance_id"] = r.instance_id;
    j["final_sql"] = r.final_sql ? json(*r.final_sql) : json(nullptr);
    j["succeeded"] = r.succeeded;
    j["wall_millis"] = r.wall_millis.count();
    j["counters"] = r.counters;
    if (r.error) j["error"] = *r.error;
    return j;
}

inline TaskRunRecord record_from_json(const json& j) {
    TaskRunRecord r;
    r.instance_id = j.at("instance_id").get<std::string>();
    if (j.contains("final_sql") && j["final_sql"].is_string())
        r.final_sql = j["final_sql"].get<std::string>();
    r.succeeded = j.value("succeeded", false);
    r.wall_millis = std::chrono::milliseconds(j.value("wall_millis", std::int64_t{0}));
    if (j.contains("counters"))
        for (const auto& [k, v] : j["counters"].items())
            r.counters[k] = v.get<std::int64_t>();
    if (j.contains("error") && j["error"].is_string())
        r.error = j["error"].get<std::string>();
    return r;
}

inline std::vector<TaskRunRecord> load_telemetry(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DatasetError("cannot open telemetry file: " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("records"))
        throw DatasetError("telemetry file is not a run summary: " + path);
    std::vector<TaskRunRecord> records;
    for (const auto& rec : j["records"]) records.push_back(record_from_json(rec));
    return records;
}

}  // namespace probeql
