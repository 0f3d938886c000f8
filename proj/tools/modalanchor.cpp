#include <cstdlib>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "modalanchor/config.hpp"
#include "modalanchor/runner.hpp"

namespace {

int run_command(const std::string& config_path, const std::vector<std::string>& overrides,
                const std::string& out_dir, std::size_t jobs) {
    std::map<std::string, std::string> kv;
    try {
        if (!config_path.empty()) kv = modalanchor::parse_kv_file(config_path);
    } catch (const modalanchor::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return modalanchor::kExitIoError;
    } catch (const modalanchor::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return modalanchor::kExitConfigError;
    }
    for (const std::string& kvpair : overrides) {
        const std::size_t eq = kvpair.find('=');
        if (eq == std::string::npos) {
            std::cerr << "error: --set expects key=value, got '" << kvpair << "'\n";
            return modalanchor::kExitConfigError;
        }
        kv[kvpair.substr(0, eq)] = kvpair.substr(eq + 1);
    }
    if (!out_dir.empty()) kv["run.out"] = out_dir;
    if (const char* env_seed = std::getenv("MODALANCHOR_SEED")) {
        kv["run.seeds"] = env_seed;
    }

    modalanchor::ExperimentConfig cfg;
    try {
        cfg = modalanchor::resolve_config(kv);
    } catch (const modalanchor::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return modalanchor::kExitConfigError;
    }
    return modalanchor::cmd_run(cfg, jobs);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual-learning experiment runner for a dual-encoder toy model"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "execute the strategy x seed experiment matrix");
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    std::size_t jobs = 1;
    run->add_option("--config", config_path, "key=value configuration file");
    run->add_option("--set", overrides, "override a config key (key=value, repeatable)");
    run->add_option("--out", out_dir, "output directory (overrides run.out)");
    run->add_option("--jobs", jobs, "parallel runs")->check(CLI::Range(std::size_t{1}, std::size_t{64}));

    auto* report = app.add_subcommand("report", "merge finished runs into a consolidated report");
    std::string in_dir;
    std::string report_out;
    report->add_option("--in", in_dir, "directory containing run subdirectories")->required();
    report->add_option("--out", report_out, "write the report here instead of stdout");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every backward rule");
    std::string fault_op;
    gradcheck->add_option("--inject-fault", fault_op,
                          "test fixture: negate the named component's backward pass");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return run_command(config_path, overrides, out_dir, jobs);
        if (report->parsed()) return modalanchor::cmd_report(in_dir, report_out);
        if (gradcheck->parsed()) return modalanchor::cmd_gradcheck(std::cout, fault_op);
    } catch (const modalanchor::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return modalanchor::kExitIoError;
    } catch (const modalanchor::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return modalanchor::kExitNumericFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return modalanchor::kExitConfigError;
    }
    return modalanchor::kExitOk;
}
