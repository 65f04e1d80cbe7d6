// Exploration driver used to settle the committed reference configuration
// and its golden accuracy values. Not part of the shipped workflow, but kept
// so the numbers in the acceptance tests can be regenerated.

#include <chrono>
#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "dpl/bench.hpp"
#include "dpl/clipcore.hpp"
#include "dpl/promptlab.hpp"
#include "dpl/worldgen.hpp"

using namespace dpl;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct PilotOptions {
    std::uint64_t seed = 1;
    std::size_t pretrain_steps = 5000;
    std::size_t corpus_per_domain = 200;
    std::size_t samples_per_domain = 500;
    std::size_t trials = 20;
    bool cover = false;
    std::string stage = "all";
};

worldgen::WorldSpec make_reference_world(const PilotOptions& opt) {
    worldgen::WorldConfig cfg;  // reference defaults
    cfg.cover_benchmark = opt.cover;
    return worldgen::make_world(cfg, opt.seed);
}

clipcore::FrozenEncoders pretrain_reference(const worldgen::WorldSpec& world,
                                            const PilotOptions& opt) {
    auto t0 = std::chrono::steady_clock::now();
    auto corpus = worldgen::make_pretrain_corpus(world, opt.corpus_per_domain, 0.25, opt.seed);
    clipcore::EncoderConfig cfg;  // reference defaults
    cfg.steps = opt.pretrain_steps;
    cfg.seed = opt.seed;
    numkit::Vec losses;
    auto enc = clipcore::pretrain(world, corpus, cfg, &losses);
    std::printf("pretrain: %zu captioned samples, %zu steps, %.1fs\n", corpus.size(), cfg.steps,
                seconds_since(t0));
    if (!losses.empty())
        std::printf("  loss first=%.4f last=%.4f\n", losses.front(), losses.back());
    std::printf("  retrieval_top1=%.4f\n", clipcore::retrieval_top1(enc, corpus));
    return enc;
}

void report_zero_shot(const worldgen::WorldSpec& world, const clipcore::FrozenEncoders& enc,
                      const PilotOptions& opt) {
    auto tmpl = clipcore::make_class_prompts(enc, world, clipcore::PromptStyle::Template);
    auto bare = clipcore::make_class_prompts(enc, world, clipcore::PromptStyle::BareClass);
    double pool_sum = 0.0;
    for (std::size_t d : world.pool_domain_ids()) {
        auto ds = worldgen::sample_domain_dataset(
            world, d, 200, numkit::splitmix64(opt.seed ^ numkit::stream_id("pool_eval", d)));
        pool_sum += clipcore::zero_shot_accuracy(enc, tmpl, ds);
    }
    std::printf("in-pool zero-shot (template): %.4f\n",
                pool_sum / double(world.pool_domain_ids().size()));
    for (std::size_t d : world.benchmark_domain_ids()) {
        auto ds = worldgen::sample_domain_dataset(world, d, opt.samples_per_domain,
                                                  bench::domain_data_seed(world, d));
        std::printf("  bench domain %zu: template=%.4f bare=%.4f bayes=%.4f\n", d,
                    clipcore::zero_shot_accuracy(enc, tmpl, ds),
                    clipcore::zero_shot_accuracy(enc, bare, ds),
                    worldgen::bayes_accuracy(world, ds));
    }
}

void run_benchmark(const worldgen::WorldSpec& world, const clipcore::FrozenEncoders& enc,
                   const std::vector<bench::Method>& methods, const PilotOptions& opt) {
    auto t0 = std::chrono::steady_clock::now();
    bench::ProtocolConfig protocol;
    protocol.methods = methods;
    protocol.trials = opt.trials;
    protocol.samples_per_domain = opt.samples_per_domain;
    bench::BenchmarkRun run = bench::leave_one_out_benchmark(world, enc, protocol);
    std::printf("%s", bench::render_csv(run.table).c_str());
    double slowest = 0.0;
    for (const auto& rec : run.log) slowest = std::max(slowest, rec.wall_ms);
    std::printf("benchmark: %.1fs total, slowest trial %.2fs\n", seconds_since(t0),
                slowest / 1000.0);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"reference configuration pilot"};
    PilotOptions opt;
    app.add_option("--seed", opt.seed);
    app.add_option("--pretrain-steps", opt.pretrain_steps);
    app.add_option("--corpus-per-domain", opt.corpus_per_domain);
    app.add_option("--samples-per-domain", opt.samples_per_domain);
    app.add_option("--trials", opt.trials);
    app.add_flag("--cover", opt.cover, "benchmark domains join the pretrain corpus");
    app.add_option("--stage", opt.stage)->check(CLI::IsMember({"pretrain", "trend", "erm", "all"}));
    CLI11_PARSE(app, argc, argv);

    try {
        auto world = make_reference_world(opt);
        auto enc = pretrain_reference(world, opt);
        report_zero_shot(world, enc, opt);
        if (opt.stage == "trend" || opt.stage == "all")
            run_benchmark(world, enc,
                          {bench::Method::ZeroShot, bench::Method::ZeroShotTemplate,
                           bench::Method::Dpl},
                          opt);
        if (opt.stage == "erm" || opt.stage == "all")
            run_benchmark(world, enc, {bench::Method::ErmFrozen, bench::Method::ErmFinetune},
                          opt);
    } catch (const Error& e) {
        std::fprintf(stderr, "pilot failed: %s\n", e.what());
        return 1;
    }
    return 0;
}
