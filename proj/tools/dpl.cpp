// Command-line front end: pretrain encoders, run the leave-one-domain-out
// benchmark, evaluate saved checkpoints, and rebuild reports from trial logs.

#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "dpl/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"batch-conditioned prompt benchmark"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_flag;
    std::string encoders_path;
    std::string generator_path;
    std::string data_path;
    std::string log_path;
    std::size_t jobs = 1;

    auto* pre = app.add_subcommand("pretrain", "pretrain and freeze the dual encoders");
    pre->add_option("--config", config_path, "INI config file")->required();
    pre->add_option("--out", out_flag, "output directory (overrides DPL_OUTPUT_DIR and config)");

    auto* ben = app.add_subcommand("benchmark", "run the leave-one-domain-out benchmark");
    ben->add_option("--config", config_path, "INI config file")->required();
    ben->add_option("--encoders", encoders_path, "encoder checkpoint (.dple)")->required();
    ben->add_option("--out", out_flag, "output directory (overrides DPL_OUTPUT_DIR and config)");
    ben->add_option("--jobs", jobs, "worker threads (results are identical at any level)")
        ->check(CLI::PositiveNumber);

    auto* ev = app.add_subcommand("eval", "evaluate a saved prompt generator on a dataset dump");
    ev->add_option("--encoders", encoders_path, "encoder checkpoint (.dple)")->required();
    ev->add_option("--generator", generator_path, "prompt generator checkpoint (.dplg)")
        ->required();
    ev->add_option("--data", data_path, "dataset dump (.json)")->required();

    auto* rep = app.add_subcommand("report", "rebuild the result table from a trial log");
    rep->add_option("--log", log_path, "trial log (.jsonl)")->required();
    rep->add_option("--out", out_flag, "output directory for table.csv / table.json")
        ->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (pre->parsed()) {
            const auto cfg = dpl::cli::parse_config(config_path);
            return dpl::cli::cmd_pretrain(cfg, dpl::cli::resolve_output_dir(out_flag, cfg));
        }
        if (ben->parsed()) {
            const auto cfg = dpl::cli::parse_config(config_path);
            return dpl::cli::cmd_benchmark(cfg, encoders_path,
                                           dpl::cli::resolve_output_dir(out_flag, cfg), jobs);
        }
        if (ev->parsed()) return dpl::cli::cmd_eval(encoders_path, generator_path, data_path);
        if (rep->parsed()) return dpl::cli::cmd_report(log_path, out_flag);
    } catch (const dpl::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return 1;
    }
    return 0;
}
