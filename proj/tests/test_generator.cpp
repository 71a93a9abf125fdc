#include <catch2/catch_amalgamated.hpp>

#include <chrono>

#include "probeql/generator.hpp"
#include "testutil.hpp"

using namespace probeql;

namespace {

struct Harness {
    testutil::TempDir tmp;
    std::shared_ptr<SqliteAdapter> adapter = testutil::make_bank_adapter(tmp.path);
    DbHandle db{"fin", adapter};
    std::shared_ptr<FakeClock> clock = std::make_shared<FakeClock>();
    std::shared_ptr<ScriptedBackend> backend = std::make_shared<ScriptedBackend>(clock);
    RunConfig cfg = testutil::fast_config();
    PromptLibrary library = PromptLibrary::defaults();

    Gateway* gateway() {
        if (!gateway_) gateway_ = std::make_unique<Gateway>(backend, cfg, clock);
        return gateway_.get();
    }
    SchemaLinker linker() { return SchemaLinker(*gateway(), library, cfg); }
    TestCaseGenerator generator() { return TestCaseGenerator(*gateway(), library, cfg); }
    SchemaContext full_schema() { return adapter->introspect("fin"); }

private:
    std::unique_ptr<Gateway> gateway_;
};

Task bank_task() {
    Task t;
    t.instance_id = "task-1";
    t.question = "Which bank has the largest deposits?";
    t.db_ref = "fin";
    return t;
}

Probe probe(const std::string& id = "task-1-p1",
            const std::string& text = "List all banks with their deposits") {
    Probe p;
    p.probe_id = id;
    p.text = text;
    p.parent_task = "task-1";
    return p;
}

std::vector<std::string> table_names(const SchemaContext& ctx) {
    std::vector<std::string> names;
    for (const auto& t : ctx.tables) names.push_back(t.full_name);
    std::sort(names.begin(), names.end());
    return names;
}

}  // namespace

TEST_CASE("gold schema short-circuits the linker model call") {
    Harness h;
    h.cfg.use_gold_schema = true;
    Task t = bank_task();
    t.gold_schema = std::vector<std::string>{"banks"};
    t.external_knowledge = "Deposits are reported per quarter.";

    SchemaContext ctx = h.linker().link(h.db, t);
    CHECK(table_names(ctx) == std::vector<std::string>{"fin.main.banks"});
    REQUIRE(ctx.tables.size() == 1);
    CHECK(ctx.tables[0].columns.size() == 6);
    CHECK(ctx.external_knowledge == "Deposits are reported per quarter.");
    CHECK(h.backend->remaining() == 0);
    CHECK(h.gateway()->usage().calls == 0);
}

TEST_CASE("the linker keeps the named tables with all their columns") {
    Harness h;
    h.backend->push(Role::Generate,
                    testutil::tool_record("select_tables",
                                          json{{"tables", {"banks", "quarters"}}}),
                    "link:task-1");
    std::optional<ChatRequest> seen;
    h.gateway()->set_observer(
        [&](const ChatRequest& req, const ChatResponse&) { seen = req; });

    SchemaContext ctx = h.linker().link(h.db, bank_task());
    CHECK(table_names(ctx) ==
          std::vector<std::string>{"fin.main.banks", "fin.main.quarters"});
    for (const auto& t : ctx.tables)
        CHECK(t.columns.size() == (t.full_name == "fin.main.banks" ? 6u : 4u));
    REQUIRE(ctx.table_tree.count("fin") == 1);
    CHECK(ctx.table_tree.at("fin").at("main").size() == 2);

    REQUIRE(seen.has_value());
    CHECK(seen->stream_key == "link:task-1");
    CHECK(seen->messages[0].content.find(bank_task().question) != std::string::npos);
    CHECK(seen->messages[0].content.find("banks") != std::string::npos);
}

TEST_CASE("an unusable table selection falls back to the full schema") {
    Harness h;
    h.backend->push(Role::Generate,
                    testutil::tool_record("select_tables",
                                          json{{"tables", {"made_up_table"}}}));
    SchemaContext ctx = h.linker().link(h.db, bank_task());
    CHECK(ctx.tables.size() == 3);

    h.backend->push(Role::Generate, testutil::text_record("no tool call"));
    SchemaContext ctx2 = h.linker().link(h.db, bank_task());
    CHECK(ctx2.tables.size() == 3);
}

TEST_CASE("filter_context matches bare and qualified names case-insensitively") {
    SchemaContext full;
    full.tables = {{"fin.main.banks", {{"bank_id", "INTEGER", ""}}},
                   {"fin.main.quarters", {{"quarter", "TEXT", ""}}}};
    SchemaContext by_full = SchemaLinker::filter_context(full, {"FIN.MAIN.BANKS"});
    REQUIRE(by_full.tables.size() == 1);
    CHECK(by_full.tables[0].full_name == "fin.main.banks");
    CHECK(by_full.table_tree.at("fin").at("main") ==
          std::vector<std::string>{"banks"});

    SchemaContext by_bare = SchemaLinker::filter_context(full, {"Quarters"});
    REQUIRE(by_bare.tables.size() == 1);
    CHECK(by_bare.tables[0].full_name == "fin.main.quarters");
}

TEST_CASE("one turn carries several diverse candidates and a designation") {
    Harness h;
    const std::string by_quarters =
        "SELECT b.name FROM banks b JOIN quarters q ON b.bank_id=q.bank_id "
        "ORDER BY q.deposits DESC LIMIT 1";
    const std::string by_assets =
        "SELECT name FROM banks ORDER BY total_assets DESC LIMIT 1";
    h.backend->push(Role::Generate,
                    testutil::batch_record({{"join quarters", by_quarters, false},
                                            {"use assets", by_assets, false}}));
    h.backend->push(Role::Generate,
                    testutil::text_record(json{{"final_sql", by_quarters}}.dump()));

    GeneratorOutcome out = h.generator().generate(probe(), h.full_schema(), h.db);
    REQUIRE(out.candidates.size() == 2);
    CHECK(out.candidates[0].sql == by_quarters);
    CHECK(out.candidates[1].sql == by_assets);
    REQUIRE(out.candidates[0].feedback.has_value());
    REQUIRE(out.candidates[1].feedback.has_value());
    CHECK(out.candidates[0].feedback->ok());
    CHECK(out.candidates[1].feedback->ok());
    CHECK(out.final == by_quarters);
    CHECK(out.iterations_used == 2);
    CHECK_FALSE(out.recursion_hit);
    CHECK(h.gateway()->usage().calls == 2);
    for (const auto& c : out.candidates) CHECK(c.probe_id == "task-1-p1");
}

TEST_CASE("without an explicit designation the last success wins") {
    Harness h;
    h.backend->push(Role::Generate,
                    testutil::batch_record(
                        {{"peek", "SELECT * FROM banks LIMIT 1", true},
                         {"broken", "SELEC oops", false},
                         {"count", "SELECT count(*) FROM banks", false},
                         {"names", "SELECT name FROM banks", false}}));
    h.backend->push(Role::Generate, testutil::text_record("Done exploring."));

    GeneratorOutcome out = h.generator().generate(probe(), h.full_schema(), h.db);
    REQUIRE(out.candidates.size() == 4);
    CHECK(out.final == "SELECT name FROM banks");
}

TEST_CASE("a designation naming a failed or exploration query is ignored") {
    Harness h;
    h.backend->push(Role::Generate,
                    testutil::batch_record(
                        {{"peek", "SELECT * FROM banks LIMIT 1", true},
                         {"count", "SELECT count(*) FROM banks", false}}));
    h.backend->push(Role::Generate,
                    testutil::text_record(
                        json{{"final_sql", "SELECT * FROM banks LIMIT 1"}}.dump()));

    GeneratorOutcome out = h.generator().generate(probe(), h.full_schema(), h.db);
    CHECK(out.final == "SELECT count(*) FROM banks");
}

TEST_CASE("the execution branch limit caps solutions but not exploration") {
    Harness h;
    h.cfg.exec_branch_limit = BranchLimit::of(1);
    h.backend->push(Role::Generate,
                    testutil::batch_record(
                        {{"peek", "SELECT * FROM quarters LIMIT 1", true},
                         {"first", "SELECT count(*) FROM banks", false},
                         {"second", "SELECT count(*) FROM quarters", false},
                         {"third", "SELECT count(*) FROM branches", false}}));
    h.backend->push(Role::Generate, testutil::text_record("done"));

    GeneratorOutcome out = h.generator().generate(probe(), h.full_schema(), h.db);
    REQUIRE(out.candidates.size() == 2);
    CHECK(out.candidates[0].exploration);
    CHECK(out.candidates[1].sql == "SELECT count(*) FROM banks");
    CHECK(out.final == "SELECT count(*) FROM banks");
}

TEST_CASE("not_enough_information sets the insufficiency reason") {
    Harness h;
    h.backend->push(Role::Generate,
                    testutil::tool_record("not_enough_information",
                                          json{{"reason", "no such entity"}}));
    GeneratorOutcome out = h.generator().generate(probe(), h.full_schema(), h.db);
    CHECK(out.insufficient == "no such entity");
    CHECK_FALSE(out.final.has_value());
    CHECK(out.candidates.empty());
    CHECK(out.iterations_used == 1);
}

TEST_CASE("execution feedback is rendered back into the conversation") {
    Harness h;
    h.backend->push(Role::Generate,
                    testutil::batch_record({{"names", "SELECT name FROM banks", false},
                                            {"broken", "SELEC", false}}));
    h.backend->push(Role::Generate, testutil::text_record("ok"));
    std::vector<ChatRequest> seen;
    h.gateway()->set_observer(
        [&](const ChatRequest& req, const ChatResponse&) { seen.push_back(req); });

    h.generator().generate(probe(), h.full_schema(), h.db);
    REQUIRE(seen.size() == 2);
    REQUIRE(seen[1].messages.size() == 3);
    CHECK(seen[1].messages[1].speaker == Speaker::Assistant);
    const std::string& fb = seen[1].messages[2].content;
    CHECK(fb.find("Execution results:") == 0);
    CHECK(fb.find("1. Success: query executed with 5 rows") != std::string::npos);
    CHECK(fb.find("name\nFirst National") != std::string::npos);
    CHECK(fb.find("2. CompilationError:") != std::string::npos);
}

TEST_CASE("an empty execute_sql call earns a corrective turn") {
    Harness h;
    h.backend->push(Role::Generate,
                    testutil::tool_record(
                        "execute_sql",
                        json{{"queries", json::array({json{{"note", "missing sql"}}, 5})}}));
    h.backend->push(Role::Generate, testutil::text_record("giving up"));
    std::vector<ChatRequest> seen;
    h.gateway()->set_observer(
        [&](const ChatRequest& req, const ChatResponse&) { seen.push_back(req); });

    GeneratorOutcome out = h.generator().generate(probe(), h.full_schema(), h.db);
    CHECK(out.candidates.empty());
    CHECK_FALSE(out.final.has_value());
    CHECK(out.iterations_used == 2);
    REQUIRE(seen.size() == 2);
    CHECK(seen[1].messages.back().content.find("no valid queries") != std::string::npos);
}

TEST_CASE("the iteration budget trips the recursion flag") {
    Harness h;
    h.cfg.max_testcase_iters = 3;
    for (int i = 0; i < 3; ++i)
        h.backend->push(Role::Generate,
                        testutil::batch_record(
                            {{"again", "SELECT count(*) FROM banks", false}}));
    h.backend->push(Role::Generate, testutil::text_record("unreached"));

    GeneratorOutcome out = h.generator().generate(probe(), h.full_schema(), h.db);
    CHECK(out.recursion_hit);
    CHECK(out.iterations_used == 3);
    CHECK(out.candidates.size() == 3);
    CHECK_FALSE(out.final.has_value());
    CHECK(h.backend->remaining() == 1);
}

TEST_CASE("the generator prompt carries schema, dialect, and question slots") {
    Harness h;
    Probe p = probe();
    SchemaContext ctx = h.full_schema();
    ctx.external_knowledge = "Assets are in millions.";
    std::string text = h.generator().render_prompt(p, ctx, h.db);
    CHECK(text.find("Table full name: fin.main.banks") != std::string::npos);
    CHECK(text.find("\"fin\":{\"main\":") != std::string::npos);
    CHECK(text.find(h.adapter->dialect_rules()) != std::string::npos);
    CHECK(text.find("Assets are in millions.") != std::string::npos);
    CHECK(text.find(p.text) != std::string::npos);

    SchemaContext empty;
    CHECK(render_table_info(empty) == "(no tables)");
}

TEST_CASE("column descriptions are truncated to 200 characters") {
    SchemaContext ctx;
    ctx.tables = {{"db.main.t", {{"c", "TEXT", std::string(400, 'd')}}}};
    std::string info = render_table_info(ctx);
    CHECK(info.find(std::string(200, 'd')) != std::string::npos);
    CHECK(info.find(std::string(201, 'd')) == std::string::npos);
}

TEST_CASE("run_all on one probe matches a direct generate call") {
    auto script = [](Harness& h) {
        h.backend->push(Role::Generate,
                        testutil::batch_record(
                            {{"count", "SELECT count(*) FROM banks", false}}),
                        "generate:task-1-p1");
        h.backend->push(Role::Generate, testutil::text_record("done"),
                        "generate:task-1-p1");
    };
    Harness direct;
    script(direct);
    GeneratorOutcome one =
        direct.generator().generate(probe(), direct.full_schema(), direct.db);

    Harness pooled;
    script(pooled);
    auto outs = pooled.generator().run_all({probe()}, pooled.full_schema(), pooled.db);
    REQUIRE(outs.size() == 1);
    CHECK(outs[0].probe_id == one.probe_id);
    CHECK(outs[0].final == one.final);
    CHECK(outs[0].iterations_used == one.iterations_used);
    REQUIRE(outs[0].candidates.size() == one.candidates.size());
    CHECK(outs[0].candidates[0].sql == one.candidates[0].sql);
}

TEST_CASE("probes run in parallel without leaking state across outcomes") {
    Harness h;
    std::vector<Probe> probes;
    for (int i = 1; i <= 6; ++i) {
        std::string id = "task-1-p" + std::to_string(i);
        probes.push_back(probe(id, "probe " + std::to_string(i)));
        std::string sql = "SELECT " + std::to_string(i) + " AS v";
        h.backend->push(Role::Generate,
                        testutil::batch_record({{"solve", sql, false}}),
                        "generate:" + id);
        h.backend->push(Role::Generate, testutil::text_record("done"),
                        "generate:" + id);
    }

    auto outs = h.generator().run_all(probes, h.full_schema(), h.db);
    REQUIRE(outs.size() == 6);
    for (int i = 0; i < 6; ++i) {
        CHECK(outs[static_cast<std::size_t>(i)].probe_id ==
              "task-1-p" + std::to_string(i + 1));
        CHECK(outs[static_cast<std::size_t>(i)].final ==
              "SELECT " + std::to_string(i + 1) + " AS v");
        CHECK_FALSE(outs[static_cast<std::size_t>(i)].error.has_value());
    }
}

TEST_CASE("six probes with injected latency cost about one turn of wall time") {
    Harness h;
    h.backend = std::make_shared<ScriptedBackend>(system_clock());
    for (int i = 1; i <= 6; ++i)
        h.backend->push(Role::Generate, testutil::text_record("no candidates", 100),
                        "generate:task-1-p" + std::to_string(i));

    std::vector<Probe> probes;
    for (int i = 1; i <= 6; ++i) probes.push_back(probe("task-1-p" + std::to_string(i)));

    REQUIRE(h.cfg.num_workers == 6);
    Gateway gateway(h.backend, h.cfg, system_clock());
    TestCaseGenerator gen(gateway, h.library, h.cfg);
    auto started = std::chrono::steady_clock::now();
    auto outs = gen.run_all(probes, h.full_schema(), h.db);
    auto wall = std::chrono::duration_cast<std::chrono::milliseconds>(
        std::chrono::steady_clock::now() - started);

    REQUIRE(outs.size() == 6);
    // Six sequential turns would take at least 600 ms.
    CHECK(wall.count() < 400);
    CHECK(wall.count() >= 100);
}

TEST_CASE("twelve probes on six workers take two waves") {
    Harness h;
    h.backend = std::make_shared<ScriptedBackend>(system_clock());
    for (int i = 1; i <= 12; ++i)
        h.backend->push(Role::Generate, testutil::text_record("no candidates", 100),
                        "generate:task-1-p" + std::to_string(i));

    std::vector<Probe> probes;
    for (int i = 1; i <= 12; ++i) probes.push_back(probe("task-1-p" + std::to_string(i)));

    Gateway gateway(h.backend, h.cfg, system_clock());
    TestCaseGenerator gen(gateway, h.library, h.cfg);
    auto started = std::chrono::steady_clock::now();
    auto outs = gen.run_all(probes, h.full_schema(), h.db);
    auto wall = std::chrono::duration_cast<std::chrono::milliseconds>(
        std::chrono::steady_clock::now() - started);

    REQUIRE(outs.size() == 12);
    for (const auto& o : outs) CHECK(o.iterations_used == 1);
    CHECK(wall.count() >= 200);
    CHECK(wall.count() < 600);
}

TEST_CASE("a gateway failure inside one probe is isolated to its outcome") {
    Harness h;
    h.backend->push(Role::Generate, testutil::text_record("fine"),
                    "generate:task-1-p1");
    // No record for p2: its generation dies with ScriptExhausted.
    auto outs = h.generator().run_all({probe("task-1-p1"), probe("task-1-p2")},
                                      h.full_schema(), h.db);
    REQUIRE(outs.size() == 2);
    CHECK_FALSE(outs[0].error.has_value());
    REQUIRE(outs[1].error.has_value());
    CHECK(outs[1].probe_id == "task-1-p2");
}
