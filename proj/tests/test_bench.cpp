#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <array>
#include <fstream>
#include <numeric>
#include <random>

#include "probeql/bench.hpp"
#include "testutil.hpp"

using namespace probeql;

namespace {

struct BenchFixture {
    testutil::TempDir tmp;
    std::shared_ptr<SqliteAdapter> adapter;
    DbHandle db;

    BenchFixture() : adapter(testutil::make_bank_adapter(tmp.str())), db{"fin", adapter} {}
};

ResultTable table(std::vector<std::string> cols, std::vector<std::vector<ResultCell>> rows) {
    ResultTable t;
    t.columns = std::move(cols);
    t.rows = std::move(rows);
    return t;
}

// Ground truth for multiset comparison: search for a row bijection instead of
// trusting the canonical sort the implementation uses.
bool oracle_match(const ResultTable& p, const ResultTable& g, bool order_sensitive) {
    if (p.columns.size() != g.columns.size()) return false;
    if (p.rows.size() != g.rows.size()) return false;
    if (order_sensitive) {
        for (std::size_t r = 0; r < g.rows.size(); ++r)
            if (!detail::rows_match(p.rows[r], g.rows[r])) return false;
        return true;
    }
    std::vector<std::size_t> idx(p.rows.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end());
    do {
        bool all = true;
        for (std::size_t r = 0; r < g.rows.size(); ++r)
            if (!detail::rows_match(p.rows[idx[r]], g.rows[r])) {
                all = false;
                break;
            }
        if (all) return true;
    } while (std::next_permutation(idx.begin(), idx.end()));
    return false;
}

Task mk_task(const std::string& id) {
    Task t;
    t.instance_id = id;
    t.question = "question for " + id;
    t.db_ref = "fin";
    return t;
}

TaskRunRecord mk_record(const std::string& id, std::optional<std::string> sql,
                        std::int64_t wall_ms = 60000) {
    TaskRunRecord r;
    r.instance_id = id;
    r.final_sql = std::move(sql);
    r.succeeded = r.final_sql.has_value();
    r.wall_millis = std::chrono::milliseconds(wall_ms);
    return r;
}

GoldEntry mk_gold(const std::string& id, const std::string& sql,
                  std::optional<bool> order = std::nullopt) {
    GoldEntry g;
    g.instance_id = id;
    g.gold_sql = sql;
    g.order_sensitive = order;
    return g;
}

const std::string kCountActive = "SELECT count(*) FROM banks WHERE active = 1";

}  // namespace

TEST_CASE("canonical serialization uses typed cells and nine significant digits") {
    const std::string rs(1, '\x1e');
    const std::string us(1, '\x1f');

    ResultTable t = table({"a", "b", "c", "d"},
                          {{ResultCell::null(), ResultCell::integer(7), ResultCell::real(2.5),
                            ResultCell::text("hi \t")}});
    CHECK(canonicalize_result(t, true) ==
          "cols:4" + rs + "n:" + us + "i:7" + us + "f:2.5" + us + "s:hi");

    ResultTable third = table({"v"}, {{ResultCell::real(1.0 / 3.0)}});
    CHECK(canonicalize_result(third, true) == "cols:1" + rs + "f:0.333333333");

    // A real and an integer of the same value serialize as distinct results.
    ResultTable ri = table({"v"}, {{ResultCell::real(1.0)}});
    ResultTable ii = table({"v"}, {{ResultCell::integer(1)}});
    CHECK(canonicalize_result(ri, true) != canonicalize_result(ii, true));
    CHECK(detail::cells_match(ResultCell::real(1.0), ResultCell::integer(1)));
}

TEST_CASE("canonicalization sorts rows only when order is insignificant") {
    ResultTable ab = table({"x"}, {{ResultCell::integer(1)}, {ResultCell::integer(2)}});
    ResultTable ba = table({"x"}, {{ResultCell::integer(2)}, {ResultCell::integer(1)}});
    CHECK(canonicalize_result(ab, false) == canonicalize_result(ba, false));
    CHECK(canonicalize_result(ab, true) != canonicalize_result(ba, true));
}

TEST_CASE("cell matching applies the relative tolerance and null rules") {
    using detail::cells_match;
    CHECK(cells_match(ResultCell::real(1000000.0), ResultCell::real(1000000.9)));
    CHECK_FALSE(cells_match(ResultCell::real(1000000.0), ResultCell::real(1000002.5)));
    // Near zero the scale floor of one makes the tolerance absolute.
    CHECK(cells_match(ResultCell::real(1e-9), ResultCell::real(2e-9)));
    CHECK_FALSE(cells_match(ResultCell::real(0.0), ResultCell::real(1e-5)));

    CHECK(cells_match(ResultCell::null(), ResultCell::null()));
    CHECK_FALSE(cells_match(ResultCell::null(), ResultCell::integer(0)));
    CHECK_FALSE(cells_match(ResultCell::text("1"), ResultCell::integer(1)));
    CHECK(cells_match(ResultCell::text("abc  "), ResultCell::text("abc")));
    CHECK_FALSE(cells_match(ResultCell::text(" abc"), ResultCell::text("abc")));
}

TEST_CASE("table matching agrees with a permutation oracle on random tables") {
    std::mt19937_64 rng(991);
    std::uniform_int_distribution<int> dim(1, 4);
    std::uniform_int_distribution<int> kind(0, 2);
    std::uniform_int_distribution<int> val(0, 9);

    for (int iter = 0; iter < 60; ++iter) {
        int rows = dim(rng), cols = dim(rng);
        ResultTable gold;
        for (int c = 0; c < cols; ++c) gold.columns.push_back("c" + std::to_string(c));
        for (int r = 0; r < rows; ++r) {
            std::vector<ResultCell> row;
            for (int c = 0; c < cols; ++c) {
                switch (kind(rng)) {
                    case 0: row.push_back(ResultCell::integer(val(rng))); break;
                    case 1: row.push_back(ResultCell::real(10.0 * val(rng) + 0.25)); break;
                    default: row.push_back(ResultCell::text("t" + std::to_string(val(rng))));
                }
            }
            gold.rows.push_back(std::move(row));
        }

        ResultTable predicted = gold;
        std::shuffle(predicted.rows.begin(), predicted.rows.end(), rng);
        int mode = iter % 3;
        if (mode == 1 && !predicted.rows.empty()) {
            // Nudge one cell beyond the tolerance.
            ResultCell& cell = predicted.rows[0][0];
            cell = ResultCell::real(cell.is_numeric() ? cell.as_double() + 0.511 : 777.7);
        } else if (mode == 2) {
            // Nudge every numeric cell well inside the tolerance.
            for (auto& row : predicted.rows)
                for (auto& cell : row)
                    if (cell.kind == ResultCell::Kind::Real)
                        cell = ResultCell::real(cell.d + 1e-9);
        }

        for (bool order : {false, true}) {
            bool expect = oracle_match(predicted, gold, order);
            CAPTURE(iter, mode, order, rows, cols);
            CHECK(tables_match(predicted, gold, order) == expect);
        }
    }
}

TEST_CASE("table matching rejects shape mismatches") {
    ResultTable one = table({"a"}, {{ResultCell::integer(1)}});
    ResultTable two_cols = table({"a", "b"}, {{ResultCell::integer(1), ResultCell::integer(2)}});
    ResultTable two_rows = table({"a"}, {{ResultCell::integer(1)}, {ResultCell::integer(1)}});
    CHECK_FALSE(tables_match(one, two_cols, false));
    CHECK_FALSE(tables_match(one, two_rows, false));
    CHECK(tables_match(one, one, false));
}

TEST_CASE("top-level ORDER BY detection ignores nesting, strings, and comments") {
    CHECK(has_top_level_order_by("SELECT * FROM t ORDER BY x"));
    CHECK(has_top_level_order_by("select name from banks order\n by 1 desc"));
    CHECK(has_top_level_order_by("SELECT * FROM (SELECT 1 ORDER BY 1) ORDER BY 2"));

    CHECK_FALSE(has_top_level_order_by("SELECT * FROM (SELECT * FROM t ORDER BY x)"));
    CHECK_FALSE(has_top_level_order_by("SELECT * FROM t -- ORDER BY x"));
    CHECK_FALSE(has_top_level_order_by("SELECT * FROM t /* ORDER BY x */"));
    CHECK_FALSE(has_top_level_order_by("SELECT 'ORDER BY' FROM t"));
    CHECK_FALSE(has_top_level_order_by("SELECT \"ORDER\" || \"BY\" FROM t"));
    CHECK_FALSE(has_top_level_order_by("SELECT ordering FROM by_table"));
    CHECK_FALSE(has_top_level_order_by(""));
}

TEST_CASE("ex_match accepts identity and multiset-equal predictions") {
    BenchFixture fx;
    CHECK(ex_match(fx.db, kCountActive, kCountActive, false));

    // Same rows in a different order pass without ORDER BY, fail with it.
    const std::string fwd = "SELECT 1 AS x UNION ALL SELECT 2";
    const std::string rev = "SELECT 2 AS x UNION ALL SELECT 1";
    CHECK(ex_match(fx.db, rev, fwd, false));
    CHECK_FALSE(ex_match(fx.db, rev, fwd, true));
}

TEST_CASE("ex_match treats failing or unsafe predictions as mismatches") {
    BenchFixture fx;
    CHECK_FALSE(ex_match(fx.db, "SELEC name FROM banks", kCountActive, false));
    CHECK_FALSE(ex_match(fx.db, "DELETE FROM banks", kCountActive, false));
}

TEST_CASE("ex_match reports gold failures instead of swallowing them") {
    BenchFixture fx;
    CHECK_THROWS_MATCHES(ex_match(fx.db, kCountActive, "SELEC 1", false), GoldExecutionError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("gold SQL failed on fin")));
    CHECK_THROWS_AS(ex_match(fx.db, kCountActive, "DROP TABLE banks", false),
                    GoldExecutionError);
}

TEST_CASE("ex_match tolerates tiny float error and trailing whitespace") {
    BenchFixture fx;
    // 5000.5 / 3 = 1666.8333...; the approximation sits inside 1e-6 relative.
    const std::string gold = "SELECT total_assets / 3 AS v FROM banks WHERE bank_id = 1";
    CHECK(ex_match(fx.db, "SELECT 1666.8333 AS v", gold, false));
    CHECK_FALSE(ex_match(fx.db, "SELECT 1666.9 AS v", gold, false));

    CHECK(ex_match(fx.db, "SELECT 'abc  ' AS s", "SELECT 'abc' AS s", false));
    CHECK_FALSE(ex_match(fx.db, "SELECT ' abc' AS s", "SELECT 'abc' AS s", false));

    const std::string null_gold = "SELECT insured_pct FROM banks WHERE bank_id = 4";
    CHECK(ex_match(fx.db, "SELECT NULL", null_gold, false));
    CHECK_FALSE(ex_match(fx.db, "SELECT 0", null_gold, false));
}

TEST_CASE("ex_match is symmetric when both queries execute") {
    BenchFixture fx;
    const std::array<std::pair<std::string, std::string>, 4> pairs{{
        {kCountActive, "SELECT 4"},
        {kCountActive, "SELECT 5"},
        {"SELECT 'a' AS s", "SELECT 'a ' AS s"},
        {"SELECT name FROM banks", "SELECT state FROM banks"},
    }};
    for (const auto& [a, b] : pairs) {
        CAPTURE(a, b);
        CHECK(ex_match(fx.db, a, b, false) == ex_match(fx.db, b, a, false));
    }
}

TEST_CASE("canonical_result folds every engine failure into the marker") {
    BenchFixture fx;
    CHECK(canonical_result(fx.db, "SELEC 1") == kFailedResultMarker);
    CHECK(canonical_result(fx.db, "DELETE FROM banks") == kFailedResultMarker);

    const std::string fwd = "SELECT 1 AS x UNION ALL SELECT 2";
    const std::string rev = "SELECT 2 AS x UNION ALL SELECT 1";
    CHECK(canonical_result(fx.db, fwd) == canonical_result(fx.db, rev));
    CHECK(canonical_result(fx.db, fwd, true) != canonical_result(fx.db, rev, true));
}

TEST_CASE("consensus picks the largest group and breaks ties by earliest run") {
    ConsensusInput majority;
    majority.runs = {{1, "q1", "A"}, {2, "q2", "A"}, {3, "q3", "B"}, {4, "q4", "A"}};
    ConsensusChoice c = majority_consensus(majority);
    CHECK(c.run_id == 1);
    CHECK(c.final_sql == "q1");
    CHECK(c.group_size == 3);
    CHECK_FALSE(c.all_failed);

    ConsensusInput tie;
    tie.runs = {{1, "q1", "A"}, {2, "q2", "A"}, {3, "q3", "B"}, {4, "q4", "B"}};
    c = majority_consensus(tie);
    CHECK(c.run_id == 1);
    CHECK(c.final_sql == "q1");
    CHECK(c.group_size == 2);

    ConsensusInput late_majority;
    late_majority.runs = {{1, "q1", "B"}, {2, "q2", "A"}, {3, "q3", "A"}};
    c = majority_consensus(late_majority);
    CHECK(c.run_id == 2);
    CHECK(c.group_size == 2);
}

TEST_CASE("failed runs never win consensus unless every run failed") {
    ConsensusInput mixed;
    mixed.runs = {{1, "q1", kFailedResultMarker},
                  {2, "q2", kFailedResultMarker},
                  {3, "q3", "A"}};
    ConsensusChoice c = majority_consensus(mixed);
    CHECK(c.run_id == 3);
    CHECK(c.group_size == 1);
    CHECK_FALSE(c.all_failed);

    ConsensusInput all;
    all.runs = {{1, "q1", kFailedResultMarker}, {2, "q2", kFailedResultMarker}};
    c = majority_consensus(all);
    CHECK(c.run_id == 1);
    CHECK(c.final_sql == "q1");
    CHECK(c.all_failed);
    CHECK(c.group_size == 2);

    CHECK_THROWS_AS(majority_consensus(ConsensusInput{}), MissingRuns);
}

TEST_CASE("consensus matches exhaustive enumeration over small multisets") {
    const std::array<std::string, 3> results = {"A", "B", std::string(kFailedResultMarker)};
    for (int k = 1; k <= 4; ++k) {
        int total = 1;
        for (int i = 0; i < k; ++i) total *= 3;
        for (int code = 0; code < total; ++code) {
            ConsensusInput in;
            int c = code;
            for (int r = 0; r < k; ++r) {
                in.runs.push_back({r + 1, "sql" + std::to_string(r + 1), results[c % 3]});
                c /= 3;
            }
            ConsensusChoice got = majority_consensus(in);

            std::map<std::string, std::size_t> sizes;
            for (const auto& r : in.runs)
                if (r.canonical_result != kFailedResultMarker) ++sizes[r.canonical_result];
            CAPTURE(k, code);
            if (sizes.empty()) {
                CHECK(got.all_failed);
                CHECK(got.run_id == 1);
                CHECK(got.group_size == in.runs.size());
            } else {
                std::size_t max_size = 0;
                for (const auto& [res, n] : sizes) max_size = std::max(max_size, n);
                int expect_run = 0;
                for (const auto& r : in.runs) {
                    if (r.canonical_result == kFailedResultMarker) continue;
                    if (sizes[r.canonical_result] == max_size) {
                        expect_run = r.run_id;
                        break;
                    }
                }
                CHECK_FALSE(got.all_failed);
                CHECK(got.run_id == expect_run);
                CHECK(got.group_size == max_size);
                CHECK(got.final_sql == "sql" + std::to_string(expect_run));
            }
        }
    }
}

TEST_CASE("consensus is invariant under permutation of the input order") {
    std::vector<ConsensusRun> runs = {
        {1, "q1", "B"}, {2, "q2", "A"}, {3, "q3", "A"}, {4, "q4", kFailedResultMarker}};
    ConsensusChoice expected = majority_consensus({runs});
    std::mt19937_64 rng(5);
    for (int i = 0; i < 10; ++i) {
        std::shuffle(runs.begin(), runs.end(), rng);
        ConsensusChoice got = majority_consensus({runs});
        CHECK(got.run_id == expected.run_id);
        CHECK(got.final_sql == expected.final_sql);
        CHECK(got.group_size == expected.group_size);
    }
}

TEST_CASE("gold files load, validate, and reject duplicates") {
    testutil::TempDir tmp;
    {
        std::ofstream out(tmp.file("golds.jsonl"));
        out << R"({"instance_id": "t1", "gold_sql": "SELECT 1"})" << "\n";
        out << "\n";
        out << R"({"instance_id": "t2", "gold_sql": "SELECT 2", "order_sensitive": true})"
            << "\n";
    }
    auto golds = load_golds(tmp.file("golds.jsonl"));
    REQUIRE(golds.size() == 2);
    CHECK(golds.at("t1").gold_sql == "SELECT 1");
    CHECK_FALSE(golds.at("t1").order_sensitive.has_value());
    CHECK(golds.at("t2").order_sensitive == std::optional<bool>(true));

    auto write_and_load = [&](const std::string& body) {
        std::ofstream out(tmp.file("bad.jsonl"));
        out << body;
        out.close();
        return load_golds(tmp.file("bad.jsonl"));
    };
    CHECK_THROWS_MATCHES(write_and_load("not json\n"), DatasetError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("invalid JSON")));
    CHECK_THROWS_MATCHES(write_and_load(R"({"instance_id": "x"})" "\n"), DatasetError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("gold_sql")));
    CHECK_THROWS_MATCHES(
        write_and_load(R"({"instance_id": "x", "gold_sql": "SELECT 1", "order_sensitive": 1})"
                       "\n"),
        DatasetError,
        Catch::Matchers::MessageMatches(
            Catch::Matchers::ContainsSubstring("order_sensitive")));
    CHECK_THROWS_MATCHES(write_and_load(R"({"instance_id": "x", "gold_sql": "SELECT 1"})"
                                        "\n"
                                        R"({"instance_id": "x", "gold_sql": "SELECT 2"})"
                                        "\n"),
                         DatasetError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("duplicate gold")));
    CHECK_THROWS_AS(load_golds(tmp.file("missing.jsonl")), DatasetError);
}

TEST_CASE("score_dataset reproduces the ex_at_k enumeration example") {
    BenchFixture fx;
    std::vector<Task> tasks = {mk_task("i1"), mk_task("i2")};
    std::map<std::string, GoldEntry> golds;
    golds["i1"] = mk_gold("i1", "SELECT count(*) FROM banks");
    golds["i2"] = mk_gold("i2", "SELECT 1");

    // Instance 1 is matched by run 3 only; instance 2 by none.
    std::vector<std::vector<TaskRunRecord>> runs;
    runs.push_back({mk_record("i1", "SELECT 99"), mk_record("i2", "SELECT 0")});
    runs.push_back({mk_record("i1", "SELECT 98"), mk_record("i2", "SELECT 0")});
    runs.push_back({mk_record("i1", "SELECT count(*) FROM banks"), mk_record("i2", "SELECT 0")});
    runs.push_back({mk_record("i1", "SELECT 97"), mk_record("i2", "SELECT 0")});

    ScoreReport report = score_dataset(tasks, runs, golds, fx.adapter);
    CHECK(report.k == 4);
    CHECK(report.ex == 0.0);
    CHECK(report.ex_at_k == 0.5);
    REQUIRE(report.instances.size() == 2);
    CHECK(report.instances[0].consensus_sql == "SELECT 99");
    CHECK(report.instances[0].ex_any);
    CHECK_FALSE(report.instances[1].ex_any);
    CHECK(report.avg_wall_minutes == Catch::Approx(1.0));
}

TEST_CASE("consensus can rescue an instance a single run missed") {
    BenchFixture fx;
    std::vector<Task> tasks = {mk_task("i1")};
    std::map<std::string, GoldEntry> golds;
    golds["i1"] = mk_gold("i1", kCountActive);

    std::vector<std::vector<TaskRunRecord>> runs;
    runs.push_back({mk_record("i1", "SELECT 9")});
    runs.push_back({mk_record("i1", kCountActive)});
    runs.push_back({mk_record("i1", "SELECT count(*) FROM banks WHERE active = 1")});
    runs.push_back({mk_record("i1", "SELECT 8")});

    ScoreReport report = score_dataset(tasks, runs, golds, fx.adapter);
    CHECK(report.ex == 1.0);
    CHECK(report.ex_at_k == 1.0);
    CHECK(report.instances[0].consensus_sql == kCountActive);
}

TEST_CASE("with a single run ex_at_k collapses to ex") {
    BenchFixture fx;
    std::vector<Task> tasks = {mk_task("i1"), mk_task("i2")};
    std::map<std::string, GoldEntry> golds;
    golds["i1"] = mk_gold("i1", "SELECT count(*) FROM banks");
    golds["i2"] = mk_gold("i2", "SELECT 1");

    std::vector<std::vector<TaskRunRecord>> runs;
    runs.push_back({mk_record("i1", "SELECT count(*) FROM banks"), mk_record("i2", "SELECT 0")});

    ScoreReport report = score_dataset(tasks, runs, golds, fx.adapter);
    CHECK(report.k == 1);
    CHECK(report.ex == 0.5);
    CHECK(report.ex_at_k == 0.5);
}

TEST_CASE("a perfect run scores one on both metrics") {
    BenchFixture fx;
    std::vector<Task> tasks = {mk_task("i1"), mk_task("i2")};
    std::map<std::string, GoldEntry> golds;
    golds["i1"] = mk_gold("i1", kCountActive);
    golds["i2"] = mk_gold("i2", "SELECT name FROM banks");

    std::vector<std::vector<TaskRunRecord>> runs;
    runs.push_back({mk_record("i1", kCountActive), mk_record("i2", "SELECT name FROM banks")});
    runs.push_back({mk_record("i1", kCountActive), mk_record("i2", "SELECT name FROM banks")});

    ScoreReport report = score_dataset(tasks, runs, golds, fx.adapter);
    CHECK(report.ex == 1.0);
    CHECK(report.ex_at_k == 1.0);
    CHECK(report.instances[0].detail == "matched");
}

TEST_CASE("order sensitivity follows the gold unless overridden") {
    BenchFixture fx;
    std::vector<Task> tasks = {mk_task("i1")};
    const std::string gold_sql = "SELECT name FROM banks ORDER BY bank_id";
    const std::string reversed = "SELECT name FROM banks ORDER BY bank_id DESC";

    std::vector<std::vector<TaskRunRecord>> runs;
    runs.push_back({mk_record("i1", reversed)});

    std::map<std::string, GoldEntry> detected;
    detected["i1"] = mk_gold("i1", gold_sql);
    CHECK(score_dataset(tasks, runs, detected, fx.adapter).ex == 0.0);

    std::map<std::string, GoldEntry> overridden;
    overridden["i1"] = mk_gold("i1", gold_sql, false);
    CHECK(score_dataset(tasks, runs, overridden, fx.adapter).ex == 1.0);
}

TEST_CASE("a failing gold marks its instance without derailing the rest") {
    BenchFixture fx;
    std::vector<Task> tasks = {mk_task("i1"), mk_task("i2")};
    std::map<std::string, GoldEntry> golds;
    golds["i1"] = mk_gold("i1", "SELEC broken");
    golds["i2"] = mk_gold("i2", "SELECT 1");

    std::vector<std::vector<TaskRunRecord>> runs;
    runs.push_back({mk_record("i1", "SELECT 1"), mk_record("i2", "SELECT 1")});

    ScoreReport report = score_dataset(tasks, runs, golds, fx.adapter);
    CHECK(report.ex == 0.5);
    CHECK_FALSE(report.instances[0].ex);
    CHECK_FALSE(report.instances[0].ex_any);
    CHECK(report.instances[0].detail.find("gold SQL failed on fin") != std::string::npos);
    CHECK(report.instances[1].ex);
}

TEST_CASE("runs that produced no SQL group as failures") {
    BenchFixture fx;
    std::vector<Task> tasks = {mk_task("i1")};
    std::map<std::string, GoldEntry> golds;
    golds["i1"] = mk_gold("i1", "SELECT 1");

    std::vector<std::vector<TaskRunRecord>> runs;
    runs.push_back({mk_record("i1", std::nullopt)});
    runs.push_back({mk_record("i1", std::nullopt)});

    ScoreReport report = score_dataset(tasks, runs, golds, fx.adapter);
    CHECK(report.ex == 0.0);
    CHECK(report.ex_at_k == 0.0);
}

TEST_CASE("score_dataset validates its inputs") {
    BenchFixture fx;
    std::vector<Task> tasks = {mk_task("i1")};
    std::map<std::string, GoldEntry> golds;
    golds["i1"] = mk_gold("i1", "SELECT 1");
    std::vector<std::vector<TaskRunRecord>> runs;
    runs.push_back({mk_record("i1", "SELECT 1")});

    CHECK_THROWS_AS(score_dataset({}, runs, golds, fx.adapter), DatasetError);
    CHECK_THROWS_AS(score_dataset(tasks, {}, golds, fx.adapter), MissingRuns);

    std::map<std::string, GoldEntry> empty_golds;
    CHECK_THROWS_MATCHES(score_dataset(tasks, runs, empty_golds, fx.adapter), DatasetError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("no gold SQL")));

    std::vector<std::vector<TaskRunRecord>> holey = runs;
    holey.push_back({mk_record("other", "SELECT 1")});
    CHECK_THROWS_MATCHES(score_dataset(tasks, holey, golds, fx.adapter), MissingRuns,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("run 2")));
}

TEST_CASE("any-of k runs always dominates the consensus metric") {
    BenchFixture fx;
    const std::string gold_sql = "SELECT count(*) FROM banks";
    const std::array<std::optional<std::string>, 4> pool = {
        gold_sql, "SELECT 99", "SELEC", std::nullopt};

    std::mt19937_64 rng(74);
    for (int iter = 0; iter < 15; ++iter) {
        std::vector<Task> tasks;
        std::map<std::string, GoldEntry> golds;
        for (int i = 0; i < 3; ++i) {
            std::string id = "i" + std::to_string(i + 1);
            tasks.push_back(mk_task(id));
            golds[id] = mk_gold(id, gold_sql);
        }
        std::vector<std::vector<TaskRunRecord>> runs;
        for (int r = 0; r < 3; ++r) {
            std::vector<TaskRunRecord> run;
            for (const auto& task : tasks)
                run.push_back(mk_record(task.instance_id, pool[rng() % pool.size()]));
            runs.push_back(std::move(run));
        }
        ScoreReport report = score_dataset(tasks, runs, golds, fx.adapter);
        CAPTURE(iter);
        CHECK(report.ex_at_k >= report.ex);
    }
}

TEST_CASE("run records survive the json round trip") {
    TaskRunRecord r;
    r.instance_id = "t1";
    r.final_sql = "SELECT 1";
    r.succeeded = true;
    r.wall_millis = std::chrono::milliseconds(1234);
    r.counters["llm_calls"] = 11;
    r.counters["sql_executions"] = 4;

    TaskRunRecord back = record_from_json(record_to_json(r));
    CHECK(back.instance_id == "t1");
    CHECK(back.final_sql == std::optional<std::string>("SELECT 1"));
    CHECK(back.succeeded);
    CHECK(back.wall_millis.count() == 1234);
    CHECK(back.counters.at("llm_calls") == 11);
    CHECK(back.counters.at("sql_executions") == 4);
    CHECK_FALSE(back.error.has_value());

    TaskRunRecord failed;
    failed.instance_id = "t2";
    failed.error = "no usable final SQL";
    json j = record_to_json(failed);
    CHECK(j["final_sql"].is_null());
    TaskRunRecord failed_back = record_from_json(j);
    CHECK_FALSE(failed_back.final_sql.has_value());
    CHECK(failed_back.error == std::optional<std::string>("no usable final SQL"));
}

TEST_CASE("telemetry files reload the records of a run summary") {
    testutil::TempDir tmp;
    TaskRunRecord a = mk_record("t1", "SELECT 1", 500);
    a.counters["llm_calls"] = 3;
    TaskRunRecord b = mk_record("t2", std::nullopt, 700);
    b.error = "planner budget exhausted with no usable final SQL";

    json summary;
    summary["records"] = json::array({record_to_json(a), record_to_json(b)});
    {
        std::ofstream out(tmp.file("run.json"));
        out << summary.dump(2);
    }

    std::vector<TaskRunRecord> loaded = load_telemetry(tmp.file("run.json"));
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].instance_id == "t1");
    CHECK(loaded[0].final_sql == std::optional<std::string>("SELECT 1"));
    CHECK(loaded[0].counters.at("llm_calls") == 3);
    CHECK(loaded[1].instance_id == "t2");
    CHECK_FALSE(loaded[1].final_sql.has_value());
    CHECK(loaded[1].error.has_value());

    CHECK_THROWS_AS(load_telemetry(tmp.file("missing.json")), DatasetError);
    {
        std::ofstream out(tmp.file("bad.json"));
        out << "[1, 2, 3]";
    }
    CHECK_THROWS_MATCHES(load_telemetry(tmp.file("bad.json")), DatasetError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("not a run summary")));
}
