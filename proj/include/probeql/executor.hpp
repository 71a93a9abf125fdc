#pragma once

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <sqlite3.h>

#include "probeql/core.hpp"

// SQL Executor tool: run agent-written SQL against an embedded database,
// classify the outcome (CompilationError / NullError / Success) and truncate
// results for model consumption.

namespace probeql {

struct DbUnavailable : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Truncation policy

struct TruncationPolicy {
    std::string format = "csv";
    int max_rows = 3;
    int max_chars = 500;

    static TruncationPolicy from_config(const RunConfig& cfg) {
        return {cfg.exec_format, cfg.exec_max_rows, cfg.exec_max_length};
    }
};

inline constexpr const char* kTruncationMarker = "...[truncated]";

// ---------------------------------------------------------------------------
// csv rendering: comma delimiter, header always present, fields quoted only
// when they contain delimiter/quote/newline, NULL rendered as empty field.

namespace csv {

inline std::string escape_field(const std::string& v) {
    if (v.find_first_of(",\"\n\r") == std::string::npos) return v;
    std::string out = "\"";
    for (char c : v) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

inline std::string render_row(const std::vector<std::optional<std::string>>& cells) {
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        if (cells[i]) out += escape_field(*cells[i]);
    }
    return out;
}

}  // namespace csv

inline std::string truncate_preview(const std::string& text, int max_chars) {
    if (static_cast<int>(text.size()) <= max_chars) return text;
    return text.substr(0, static_cast<std::size_t>(max_chars)) + kTruncationMarker;
}

// ---------------------------------------------------------------------------
// Statement classification: agent SQL is read-only; everything that is not a
// query is rejected before it reaches the engine.

inline std::string first_keyword(const std::string& sql) {
    std::size_t i = 0;
    auto skip_ws_and_comments = [&]() {
        for (;;) {
            while (i < sql.size() && std::isspace(static_cast<unsigned char>(sql[i]))) ++i;
            if (i + 1 < sql.size() && sql[i] == '-' && sql[i + 1] == '-') {
                while (i < sql.size() && sql[i] != '\n') ++i;
                continue;
            }
            if (i + 1 < sql.size() && sql[i] == '/' && sql[i + 1] == '*') {
                auto end = sql.find("*/", i + 2);
                i = (end == std::string::npos) ? sql.size() : end + 2;
                continue;
            }
            break;
        }
    };
    skip_ws_and_comments();
    std::string word;
    while (i < sql.size() && (std::isalpha(static_cast<unsigned char>(sql[i])) || sql[i] == '_'))
        word += static_cast<char>(std::toupper(static_cast<unsigned char>(sql[i++])));
    return word;
}

inline bool is_read_only_statement(const std::string& sql) {
    std::string kw = first_keyword(sql);
    return kw == "SELECT" || kw == "WITH" || kw == "VALUES" || kw == "EXPLAIN";
}

// ---------------------------------------------------------------------------
// Typed result table (shared with the bench comparator).

struct ResultCell {
    enum class Kind { Null, Integer, Real, Text } kind = Kind::Null;
    std::int64_t i = 0;
    double d = 0.0;
    std::string s;

    static ResultCell null() { return {}; }
    static ResultCell integer(std::int64_t v) { return {Kind::Integer, v, 0.0, {}}; }
    static ResultCell real(double v) { return {Kind::Real, 0, v, {}}; }
    static ResultCell text(std::string v) { return {Kind::Text, 0, 0.0, std::move(v)}; }

    bool is_numeric() const { return kind == Kind::Integer || kind == Kind::Real; }
    double as_double() const { return kind == Kind::Integer ? static_cast<double>(i) : d; }

    std::optional<std::string> display() const {
        switch (kind) {
            case Kind::Null: return std::nullopt;
            case Kind::Integer: return std::to_string(i);
            case Kind::Real: {
                std::ostringstream os;
                os << d;
                return os.str();
            }
            case Kind::Text: return s;
        }
        return std::nullopt;
    }
};

struct ResultTable {
    std::vector<std::string> columns;
    std::vector<std::vector<ResultCell>> rows;
};

// ---------------------------------------------------------------------------
// Schema context (table catalog handed to the generator prompt).

struct ColumnInfo {
    std::string name;
    std::string type;
    std::string description;
};

struct TableInfo {
    std::string full_name;  // database.schema.table
    std::vector<ColumnInfo> columns;
};

struct SchemaContext {
    std::vector<TableInfo> tables;
    // database -> schema -> [table]
    std::map<std::string, std::map<std::string, std::vector<std::string>>> table_tree;
    std::optional<std::string> external_knowledge;

    bool empty() const { return tables.empty(); }
};

// ---------------------------------------------------------------------------
// Execution adapter interface. The embedded single-file engine is the default
// implementation; a dialect adapter for a warehouse backend plugs in here.

class ExecutionAdapter {
public:
    virtual ~ExecutionAdapter() = default;
    virtual std::string dialect() const = 0;
    // Raw query execution: full typed table on success, engine message on error.
    virtual ResultTable run_query(const std::string& db_id, const std::string& sql) = 0;
    virtual SchemaContext introspect(const std::string& db_id) = 0;
    // Dialect guidance injected into the generator/proposer prompts.
    virtual std::string dialect_rules() const = 0;
};

struct QueryEngineError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct QueryTimeout : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// SQLite adapter: one single-file database per db_id under a fixtures
// directory, opened read-only, with a small per-database connection pool.

class SqliteAdapter final : public ExecutionAdapter {
public:
    struct Options {
        std::string db_dir = "fixtures";
        std::string extension = ".sqlite";
        int pool_size = 6;
        std::chrono::seconds exec_timeout{60};
    };

    explicit SqliteAdapter(Options opts) : opts_(std::move(opts)) {}
    SqliteAdapter(std::string db_dir, int pool_size = 6,
                  std::chrono::seconds exec_timeout = std::chrono::seconds(60))
        : opts_{std::move(db_dir), ".sqlite", pool_size, exec_timeout} {}

    std::string dialect() const override { return "sqlite"; }

    std::string dialect_rules() const override {
        return "- Use SQLite SQL. Identifiers may be enclosed in double quotes.\n"
               "- Table names are unqualified (single attached database).\n"
               "- Use strftime/date functions for date arithmetic.\n"
               "- Only read-only statements (SELECT / WITH ... SELECT) are accepted.";
    }

    ResultTable run_query(const std::string& db_id, const std::string& sql) override {
        Connection conn(*this, db_id);
        return exec_on(conn.handle(), sql, opts_.exec_timeout);
    }

    SchemaContext introspect(const std::string& db_id) override {
        Connection conn(*this, db_id);
        sqlite3* db = conn.handle();
        SchemaContext ctx;
        ResultTable names = exec_on(
            db,
            "SELECT name FROM sqlite_master WHERE type='table' "
            "AND name NOT LIKE 'sqlite_%' ORDER BY name",
            opts_.exec_timeout);
        for (const auto& row : names.rows) {
            std::string table = row.at(0).s;
            TableInfo info;
            info.full_name = db_id + ".main." + table;
            ResultTable cols = exec_on(db, "PRAGMA table_info(\"" + table + "\")",
                                       opts_.exec_timeout);
            // PRAGMA table_info columns: cid, name, type, notnull, dflt_value, pk
            for (const auto& crow : cols.rows) {
                ColumnInfo ci;
                ci.name = crow.at(1).s;
                ci.type = crow.at(2).s;
                info.columns.push_back(std::move(ci));
            }
            ctx.table_tree[db_id]["main"].push_back(table);
            ctx.tables.push_back(std::move(info));
        }
        return ctx;
    }

    // Execute arbitrary statements (DDL included) to build fixture databases.
    // Not reachable from agent-facing paths, which go through execute().
    static void apply_script(const std::string& db_path, const std::string& sql) {
        sqlite3* db = nullptr;
        if (sqlite3_open_v2(db_path.c_str(), &db,
                            SQLITE_OPEN_READWRITE | SQLITE_OPEN_CREATE, nullptr) != SQLITE_OK) {
            std::string msg = db ? sqlite3_errmsg(db) : "open failed";
            sqlite3_close(db);
            throw DbUnavailable("cannot create database " + db_path + ": " + msg);
        }
        char* err = nullptr;
        int rc = sqlite3_exec(db, sql.c_str(), nullptr, nullptr, &err);
        std::string msg = err ? err : "";
        sqlite3_free(err);
        sqlite3_close(db);
        if (rc != SQLITE_OK) throw QueryEngineError("fixture script failed: " + msg);
    }

    std::string db_path(const std::string& db_id) const {
        return (std::filesystem::path(opts_.db_dir) / (db_id + opts_.extension)).string();
    }

private:
    // Pooled read-only connection, returned to the pool on destruction.
    class Connection {
    public:
        Connection(SqliteAdapter& owner, std::string db_id)
            : owner_(owner), db_id_(std::move(db_id)) {
            db_ = owner_.acquire(db_id_);
        }
        ~Connection() { owner_.release(db_id_, db_); }
        Connection(const Connection&) = delete;
        Connection& operator=(const Connection&) = delete;
        sqlite3* handle() const { return db_; }

    private:
        SqliteAdapter& owner_;
        std::string db_id_;
        sqlite3* db_;
    };

    sqlite3* acquire(const std::string& db_id) {
        {
            std::lock_guard<std::mutex> lock(pool_mu_);
            auto& pool = pools_[db_id];
            if (!pool.empty()) {
                sqlite3* db = pool.back();
                pool.pop_back();
                return db;
            }
        }
        std::string path = db_path(db_id);
        if (!std::filesystem::exists(path))
            throw DbUnavailable("database file not found: " + path);
        sqlite3* db = nullptr;
        if (sqlite3_open_v2(path.c_str(), &db, SQLITE_OPEN_READONLY, nullptr) != SQLITE_OK) {
            std::string msg = db ? sqlite3_errmsg(db) : "open failed";
            sqlite3_close(db);
            throw DbUnavailable("cannot open database " + path + ": " + msg);
        }
        sqlite3_busy_timeout(db, 5000);
        return db;
    }

    void release(const std::string& db_id, sqlite3* db) {
        if (!db) return;
        std::lock_guard<std::mutex> lock(pool_mu_);
        auto& pool = pools_[db_id];
        if (static_cast<int>(pool.size()) < opts_.pool_size) pool.push_back(db);
        else sqlite3_close(db);
    }

    static ResultTable exec_on(sqlite3* db, const std::string& sql,
                               std::chrono::seconds timeout) {
        struct Deadline {
            std::chrono::steady_clock::time_point at;
        } deadline{std::chrono::steady_clock::now() + timeout};
        sqlite3_progress_handler(
            db, 10000,
            [](void* p) -> int {
                auto* d = static_cast<Deadline*>(p);
                return std::chrono::steady_clock::now() > d->at ? 1 : 0;
            },
            &deadline);

        sqlite3_stmt* stmt = nullptr;
        const char* tail = nullptr;
        int rc = sqlite3_prepare_v2(db, sql.c_str(), -1, &stmt, &tail);
        if (rc != SQLITE_OK) {
            std::string msg = sqlite3_errmsg(db);
            sqlite3_finalize(stmt);
            sqlite3_progress_handler(db, 0, nullptr, nullptr);
            throw QueryEngineError(msg);
        }
        if (tail && !detail::trim(tail).empty()) {
            sqlite3_finalize(stmt);
            sqlite3_progress_handler(db, 0, nullptr, nullptr);
            throw QueryEngineError("multiple statements are not allowed");
        }
        if (!stmt) {
            sqlite3_progress_handler(db, 0, nullptr, nullptr);
            throw QueryEngineError("empty statement");
        }

        ResultTable table;
        int ncols = sqlite3_column_count(stmt);
        for (int c = 0; c < ncols; ++c) {
            const char* name = sqlite3_column_name(stmt, c);
            table.columns.push_back(name ? name : "");
        }
        for (;;) {
            rc = sqlite3_step(stmt);
            if (rc == SQLITE_ROW) {
                std::vector<ResultCell> row;
                row.reserve(static_cast<std::size_t>(ncols));
                for (int c = 0; c < ncols; ++c) {
                    switch (sqlite3_column_type(stmt, c)) {
                        case SQLITE_INTEGER:
                            row.push_back(ResultCell::integer(sqlite3_column_int64(stmt, c)));
                            break;
                        case SQLITE_FLOAT:
                            row.push_back(ResultCell::real(sqlite3_column_double(stmt, c)));
                            break;
                        case SQLITE_NULL:
                            row.push_back(ResultCell::null());
                            break;
                        default: {
                            const unsigned char* t = sqlite3_column_text(stmt, c);
                            row.push_back(ResultCell::text(t ? reinterpret_cast<const char*>(t) : ""));
                        }
                    }
                }
                table.rows.push_back(std::move(row));
            } else if (rc == SQLITE_DONE) {
                break;
            } else if (rc == SQLITE_INTERRUPT ||
                       (rc == SQLITE_ABORT &&
                        std::chrono::steady_clock::now() > deadline.at)) {
                sqlite3_finalize(stmt);
                sqlite3_progress_handler(db, 0, nullptr, nullptr);
                throw QueryTimeout("query exceeded execution timeout");
            } else {
                std::string msg = sqlite3_errmsg(db);
                sqlite3_finalize(stmt);
                sqlite3_progress_handler(db, 0, nullptr, nullptr);
                throw QueryEngineError(msg);
            }
        }
        sqlite3_finalize(stmt);
        sqlite3_progress_handler(db, 0, nullptr, nullptr);
        return table;
    }

    Options opts_;
    std::mutex pool_mu_;
    std::map<std::string, std::vector<sqlite3*>> pools_;
};

// ---------------------------------------------------------------------------
// DbHandle: binds a db_id to its adapter; shareable across workers.

struct DbHandle {
    std::string db_id;
    std::shared_ptr<ExecutionAdapter> adapter;
};

// ---------------------------------------------------------------------------
// execute: classify one query's outcome and truncate the preview.

inline ExecutionFeedback execute(const DbHandle& db, const std::string& sql,
                                 const TruncationPolicy& policy) {
    ExecutionFeedback fb;
    auto started = std::chrono::steady_clock::now();
    auto stamp = [&] {
        fb.exec_millis = std::chrono::duration_cast<std::chrono::milliseconds>(
            std::chrono::steady_clock::now() - started);
        if (fb.exec_millis.count() < 1) fb.exec_millis = std::chrono::milliseconds(1);
    };

    if (!is_read_only_statement(sql)) {
        fb.kind = FeedbackKind::CompilationError;
        fb.message = "only read-only statements are allowed; "
                     "INSERT/UPDATE/DELETE/DDL are rejected";
        stamp();
        return fb;
    }

    ResultTable table;
    try {
        table = db.adapter->run_query(db.db_id, sql);
    } catch (const QueryTimeout& e) {
        fb.kind = FeedbackKind::CompilationError;
        fb.message = std::string("query timed out: ") + e.what();
        stamp();
        return fb;
    } catch (const QueryEngineError& e) {
        fb.kind = FeedbackKind::CompilationError;
        fb.message = e.what();
        stamp();
        return fb;
    }

    fb.row_count = static_cast<std::int64_t>(table.rows.size());
    if (table.rows.empty()) {
        fb.kind = FeedbackKind::NullError;
        fb.message = "query executed but produced zero results";
        stamp();
        return fb;
    }

    fb.kind = FeedbackKind::Success;
    fb.message = "query executed with " + std::to_string(fb.row_count) + " rows";
    std::string preview;
    {
        std::vector<std::optional<std::string>> header;
        for (const auto& c : table.columns) header.emplace_back(c);
        preview = csv::render_row(header);
        int shown = std::min<int>(policy.max_rows, static_cast<int>(table.rows.size()));
        for (int r = 0; r < shown; ++r) {
            std::vector<std::optional<std::string>> cells;
            for (const auto& cell : table.rows[static_cast<std::size_t>(r)])
                cells.push_back(cell.display());
            preview += "\n" + csv::render_row(cells);
        }
    }
    fb.result_preview = truncate_preview(preview, policy.max_chars);
    stamp();
    return fb;
}

// ---------------------------------------------------------------------------
// execute_batch: independent candidates, feedback attached in input order.
// Candidates run concurrently up to max_parallel; one failure never aborts
// the batch. DbUnavailable propagates only when no candidate could run.

inline std::vector<SqlCandidate> execute_batch(const DbHandle& db,
                                               std::vector<SqlCandidate> candidates,
                                               const TruncationPolicy& policy,
                                               int max_parallel = 0) {
    if (candidates.empty())
        throw std::invalid_argument("execute_batch requires a non-empty candidate list");
    if (max_parallel <= 0) max_parallel = static_cast<int>(candidates.size());

    std::vector<std::optional<std::string>> infra_errors(candidates.size());
    std::size_t next = 0;
    std::mutex mu;
    auto worker = [&]() {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard<std::mutex> lock(mu);
                if (next >= candidates.size()) return;
                i = next++;
            }
            try {
                candidates[i].feedback = execute(db, candidates[i].sql, policy);
            } catch (const DbUnavailable& e) {
                infra_errors[i] = e.what();
            }
        }
    };

    int nthreads = std::min<int>(max_parallel, static_cast<int>(candidates.size()));
    if (nthreads <= 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        threads.reserve(static_cast<std::size_t>(nthreads));
        for (int t = 0; t < nthreads; ++t) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }

    bool any_ran = false;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        if (!infra_errors[i]) any_ran = true;
    if (!any_ran) throw DbUnavailable(*infra_errors.front());
    // Isolated infrastructure failures degrade to error feedback so the batch
    // contract (every candidate gets feedback) holds.
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (!infra_errors[i]) continue;
        ExecutionFeedback fb;
        fb.kind = FeedbackKind::CompilationError;
        fb.message = "database unavailable: " + *infra_errors[i];
        fb.exec_millis = std::chrono::milliseconds(1);
        candidates[i].feedback = fb;
    }
    return candidates;
}

}  // namespace probeql
