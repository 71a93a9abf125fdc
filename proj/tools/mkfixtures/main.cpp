#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "probeql/executor.hpp"

// Materializes every <name>.sql under --src into <name>.sqlite under --out so
// the run and score commands can open the corpus read-only.

int main(int argc, char** argv) {
    CLI::App app{"Build fixture databases from SQL scripts"};
    std::string src = "fixtures", out;
    bool force = false;
    app.add_option("--src", src, "Directory of .sql scripts");
    app.add_option("--out", out, "Output directory (defaults to --src)");
    app.add_flag("--force", force, "Rebuild databases that already exist");
    CLI11_PARSE(app, argc, argv);
    if (out.empty()) out = src;

    namespace fs = std::filesystem;
    if (!fs::is_directory(src)) {
        std::cerr << "not a directory: " << src << "\n";
        return 2;
    }
    fs::create_directories(out);

    int built = 0, skipped = 0;
    for (const auto& entry : fs::directory_iterator(src)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".sql") continue;
        fs::path target = fs::path(out) / entry.path().stem().concat(".sqlite");
        if (fs::exists(target) && !force) {
            ++skipped;
            continue;
        }
        std::ifstream in(entry.path());
        std::stringstream ss;
        ss << in.rdbuf();
        try {
            fs::remove(target);
            probeql::SqliteAdapter::apply_script(target.string(), ss.str());
        } catch (const std::exception& e) {
            std::cerr << "failed to build " << target.string() << ": " << e.what() << "\n";
            return 1;
        }
        std::cout << "built " << target.string() << "\n";
        ++built;
    }
    std::cout << built << " built, " << skipped << " up to date\n";
    return 0;
}
