// broker: headless runs, plan validation and the HTTP service.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "gridbroker/broker.hpp"
#include "gridbroker/service.hpp"
#include "gridbroker/timeseries.hpp"

namespace fs = std::filesystem;
using namespace gridbroker;

namespace {

constexpr int kExitUsage = 64;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::ConfigError, "cannot read '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::StorageFailure, "cannot write '" + path.string() + "'");
    out << text;
}

struct RunArgs {
    std::string plan;
    std::string testbed;
    double deadline_min = 120;
    std::int64_t budget = 0;
    std::string strategy = "cost";
    bool no_deadline = false;
    bool no_budget = false;
    std::uint64_t seed = 1;
    std::string out = ".";
    double job_seconds = 300;
    double load_max = 0.25;
    double task_error = 0.0;
};

int exit_code_for(Phase p) {
    switch (p) {
        case Phase::Completed: return 0;
        case Phase::FailedDeadline: return 2;
        case Phase::FailedBudget: return 3;
        default: return 1;
    }
}

int do_run(const RunArgs& a) {
    RunConfig cfg;
    cfg.experiment_id = fs::path(a.plan).stem().string();
    cfg.plan_text = read_file(a.plan);
    cfg.testbed = parse_testbed(read_file(a.testbed));
    cfg.qos.deadline = from_seconds(a.deadline_min * 60.0);
    cfg.qos.budget = a.budget;
    cfg.qos.strategy = strategy_from_string(a.strategy);
    cfg.qos.enforce_deadline = !a.no_deadline;
    cfg.qos.enforce_budget = !a.no_budget;
    cfg.fabric.load.seed = a.seed;
    cfg.fabric.load.max_load = a.load_max;
    cfg.fabric.task_error_probability = a.task_error;
    cfg.nominal_job_seconds = a.job_seconds;
    cfg.scheduler.default_job_seconds = a.job_seconds;

    const fs::path out(a.out);
    fs::create_directories(out);
    const auto journal_path = out / "journal.jsonl";
    fs::remove(journal_path);

    RunSummary summary;
    {
        FileJournal journal(journal_path.string());
        Broker broker(cfg, journal);
        broker.start();
        broker.run();
        summary = broker.summary();
    }
    const auto records = read_journal(journal_path.string());
    write_file(out / "timeseries.csv", export_timeseries(records));
    write_file(out / "summary.json", summary.to_json().dump(2) + "\n");

    std::cout << "phase " << to_string(summary.phase) << ", makespan " << summary.makespan_min << " min, cost "
              << summary.total_cost << " G$, " << summary.jobs_done << "/" << summary.jobs_total << " jobs\n";
    return exit_code_for(summary.phase);
}

int do_validate(const std::string& path) {
    const auto plan = parse_plan(read_file(path));
    const auto jobs = expand_jobs(plan);
    std::cout << path << ": " << plan.parameters.size() << " parameter(s), " << jobs.size() << " job(s)\n";
    return 0;
}

int do_serve(int port, double pace, const std::string& journal_dir) {
    ServiceOptions opts;
    opts.pace = pace;
    opts.journal_dir = journal_dir;
    BrokerService service(opts);
    std::cout << "listening on port " << port << std::endl;
    return service.listen("0.0.0.0", port) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deadline and budget constrained grid resource broker"};
    app.require_subcommand(1);

    RunArgs run;
    auto* run_cmd = app.add_subcommand("run", "Run a plan on a simulated testbed");
    run_cmd->add_option("plan", run.plan, "Plan file")->required()->check(CLI::ExistingFile);
    run_cmd->add_option("--testbed", run.testbed, "Testbed file")->required()->check(CLI::ExistingFile);
    run_cmd->add_option("--deadline", run.deadline_min, "Deadline in minutes")->required()->check(CLI::PositiveNumber);
    run_cmd->add_option("--budget", run.budget, "Budget in G$")->required()->check(CLI::NonNegativeNumber);
    run_cmd->add_option("--strategy", run.strategy, "Scheduling strategy")
        ->required()
        ->check(CLI::IsMember({"time", "cost"}));
    run_cmd->add_flag("--no-deadline", run.no_deadline, "Do not enforce the deadline");
    run_cmd->add_flag("--no-budget", run.no_budget, "Do not enforce the budget");
    run_cmd->add_option("--seed", run.seed, "Background load seed (0 disables load)")->required();
    run_cmd->add_option("--out", run.out, "Output directory")->capture_default_str();
    run_cmd->add_option("--job-seconds", run.job_seconds, "Nominal CPU seconds per job")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    run_cmd->add_option("--load-max", run.load_max, "Upper bound of background load")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 10.0));
    run_cmd->add_option("--task-error", run.task_error, "Probability that an attempt fails")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));

    std::string validate_path;
    auto* validate_cmd = app.add_subcommand("validate", "Parse a plan and report its job count");
    validate_cmd->add_option("plan", validate_path, "Plan file")->required()->check(CLI::ExistingFile);

    int port = 8080;
    if (const char* env = std::getenv("BROKER_PORT")) port = std::atoi(env);
    double pace = 60.0;
    std::string journal_dir;
    auto* serve_cmd = app.add_subcommand("serve", "Serve the HTTP interface");
    serve_cmd->add_option("--port", port, "TCP port (default $BROKER_PORT or 8080)")->check(CLI::Range(1, 65535));
    serve_cmd->add_option("--pace", pace, "Virtual seconds per wall second")->capture_default_str();
    serve_cmd->add_option("--journal-dir", journal_dir, "Directory for experiment journals");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    try {
        if (*run_cmd) return do_run(run);
        if (*validate_cmd) return do_validate(validate_path);
        if (*serve_cmd) return do_serve(port, pace, journal_dir);
    } catch (const PlanError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitUsage;
}
