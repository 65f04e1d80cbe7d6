#pragma once

// Subcommand implementations behind the command-line tool. Each command is a
// pure function of its inputs: identical configs and artifacts produce
// byte-identical outputs.

#include <cstdio>
#include <filesystem>
#include <string>

#include "dpl/bench.hpp"
#include "dpl/clipcore.hpp"
#include "dpl/config.hpp"
#include "dpl/promptlab.hpp"
#include "dpl/worldgen.hpp"

namespace dpl::cli {

// Output directory precedence: explicit --out flag, then DPL_OUTPUT_DIR,
// then the config's [paths] output_dir.
inline std::string resolve_output_dir(const std::string& flag_value, const RunConfig& cfg) {
    if (!flag_value.empty()) return flag_value;
    if (const char* env = std::getenv("DPL_OUTPUT_DIR"); env && *env) return env;
    return cfg.output_dir;
}

inline std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

inline std::string hex16(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// Mean template zero-shot accuracy over fresh samples from the pretraining
// pool; the standard post-pretraining health check.
inline double pool_zero_shot_accuracy(const worldgen::WorldSpec& world,
                                      const clipcore::FrozenEncoders& enc,
                                      std::size_t per_domain = 200) {
    auto prompts = clipcore::make_class_prompts(enc, world, clipcore::PromptStyle::Template);
    const auto pool = world.pool_domain_ids();
    double sum = 0.0;
    for (std::size_t d : pool) {
        auto ds = worldgen::sample_domain_dataset(
            world, d, per_domain,
            numkit::splitmix64(world.seed ^ numkit::stream_id("pool_eval", d)));
        sum += clipcore::zero_shot_accuracy(enc, prompts, ds);
    }
    return sum / double(pool.size());
}

inline int cmd_pretrain(const RunConfig& cfg, const std::string& out_dir) {
    const auto world = worldgen::make_world(cfg.world, cfg.seed);
    const auto corpus =
        worldgen::make_pretrain_corpus(world, cfg.corpus_per_domain, cfg.attr_dropout, cfg.seed);
    clipcore::EncoderConfig enc_cfg = cfg.encoder;
    enc_cfg.seed = cfg.seed;
    numkit::Vec losses;
    const auto enc = clipcore::pretrain(world, corpus, enc_cfg, &losses);

    const std::string ckpt = join_path(out_dir, "encoders.dple");
    clipcore::save_encoders(ckpt, enc, world.vocab, worldgen::world_fingerprint(world),
                            pretrain_fingerprint(cfg));
    io::write_file_atomic(join_path(out_dir, "world.json"), worldgen::world_to_json(world).dump(2) + "\n");
    io::write_file_atomic(join_path(out_dir, "config.ini"), dump_config(cfg));

    std::printf("pretrained on %zu captioned samples for %zu steps\n", corpus.size(),
                enc_cfg.steps);
    if (!losses.empty())
        std::printf("contrastive loss: %.4f -> %.4f\n", losses.front(), losses.back());
    std::printf("pool zero-shot accuracy (template prompts): %.4f\n",
                pool_zero_shot_accuracy(world, enc));
    std::printf("world fingerprint: %s\n", hex16(worldgen::world_fingerprint(world)).c_str());
    std::printf("encoder fingerprint: %s\n", hex16(enc.fingerprint).c_str());
    std::printf("wrote %s\n", ckpt.c_str());
    return 0;
}

// Loads a checkpoint and refuses anything that was not pretrained on exactly
// the world and recipe this config describes.
inline clipcore::EncoderCheckpoint load_matching_encoders(const RunConfig& cfg,
                                                          const worldgen::WorldSpec& world,
                                                          const std::string& path) {
    auto ck = clipcore::load_encoders(path);
    const std::uint64_t world_fp = worldgen::world_fingerprint(world);
    if (ck.world_fingerprint != world_fp)
        throw ConfigError("encoder checkpoint was pretrained on a different world (checkpoint " +
                          hex16(ck.world_fingerprint) + ", config " + hex16(world_fp) +
                          "); refusing to benchmark");
    if (ck.config_fingerprint != pretrain_fingerprint(cfg))
        throw ConfigError(
            "encoder checkpoint does not match this config's [world]/[pretrain] sections "
            "(checkpoint " +
            hex16(ck.config_fingerprint) + ", config " + hex16(pretrain_fingerprint(cfg)) + ")");
    return ck;
}

inline int cmd_benchmark(const RunConfig& cfg, const std::string& encoders_path,
                         const std::string& out_dir, std::size_t jobs) {
    const auto world = worldgen::make_world(cfg.world, cfg.seed);
    const auto ck = load_matching_encoders(cfg, world, encoders_path);

    bench::ProtocolConfig protocol = cfg.protocol;
    protocol.jobs = jobs;
    const auto plan = bench::plan_trials(protocol, world.benchmark_domain_ids().size());
    std::printf("running %zu scheduled trials (%zu effective) with %zu job(s)\n", plan.scheduled,
                plan.effective, jobs);
    bench::BenchmarkRun run = bench::leave_one_out_benchmark(world, ck.encoders, protocol);

    // the raw log is written before anything that can fail on incompleteness
    const std::string log_path = join_path(out_dir, "trials.jsonl");
    bench::write_trial_log(log_path, run.log);
    std::printf("wrote %s (%zu records)\n", log_path.c_str(), run.log.size());

    for (const auto& [key, gen] : run.dpl_generators) {
        const std::string name =
            "generator_d" + std::to_string(key.first) + "_s" + std::to_string(key.second) + ".dplg";
        promptlab::save_generator(join_path(out_dir, name), gen,
                                  worldgen::world_fingerprint(world), config_fingerprint(cfg));
    }
    for (std::size_t d : world.benchmark_domain_ids()) {
        const auto ds = worldgen::sample_domain_dataset(world, d, protocol.samples_per_domain,
                                                        bench::domain_data_seed(world, d));
        io::write_file_atomic(join_path(out_dir, "benchmark_domain_" + std::to_string(d) + ".json"),
                              worldgen::dataset_to_json(ds).dump() + "\n");
        clipcore::write_embedding_cache(
            join_path(cfg.cache_dir, "embeddings_" + hex16(ck.encoders.fingerprint) + "_d" +
                                         std::to_string(d) + ".dplc"),
            clipcore::embed_dataset(ck.encoders, ds));
    }

    const std::string csv = bench::render_csv(run.table);  // throws if any cell is missing
    io::write_file_atomic(join_path(out_dir, "table.csv"), csv);
    io::write_file_atomic(join_path(out_dir, "table.json"), bench::render_json(run.table));
    std::printf("%s", csv.c_str());
    std::printf("wrote %s and table.json\n", join_path(out_dir, "table.csv").c_str());
    return 0;
}

inline int cmd_eval(const std::string& encoders_path, const std::string& generator_path,
                    const std::string& data_path) {
    const auto ck = clipcore::load_encoders(encoders_path);
    const auto gck = promptlab::load_generator(generator_path);
    if (gck.world_fingerprint != ck.world_fingerprint)
        throw ConfigError("generator and encoders come from different worlds (generator " +
                          hex16(gck.world_fingerprint) + ", encoders " +
                          hex16(ck.world_fingerprint) + ")");

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(data_path));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("could not parse dataset dump " + data_path + ": " + e.what());
    }
    const auto ds = worldgen::dataset_from_json(j);
    promptlab::FeatureSet fs;
    for (const auto& s : ds.samples) {
        fs.features.push_back(clipcore::image_encode(ck.encoders, s.x));
        fs.labels.push_back(s.y);
    }
    const double acc =
        promptlab::dpl_accuracy_batched(ck.encoders, gck.generator, ck.vocab, fs, 64);
    std::printf("domain %zu: %zu samples, accuracy %.4f (%s%%)\n", ds.domain_id,
                ds.samples.size(), acc, bench::format_percent(acc).c_str());
    return 0;
}

// First-appearance orders reproduce exactly the axes cmd_benchmark used.
inline bench::BenchmarkTable table_from_log(const std::vector<bench::TrialRecord>& records) {
    std::vector<bench::Method> methods;
    std::vector<std::size_t> domains;
    std::vector<std::uint64_t> seeds;
    for (const auto& rec : records) {
        if (std::find(methods.begin(), methods.end(), rec.method) == methods.end())
            methods.push_back(rec.method);
        if (std::find(domains.begin(), domains.end(), rec.held_out_domain) == domains.end())
            domains.push_back(rec.held_out_domain);
        if (std::find(seeds.begin(), seeds.end(), rec.seed) == seeds.end())
            seeds.push_back(rec.seed);
    }
    return bench::aggregate_table(records, methods, domains, seeds);
}

inline int cmd_report(const std::string& log_path, const std::string& out_dir) {
    const auto records = bench::read_trial_log(log_path);
    if (records.empty()) throw ReportError("trial log " + log_path + " holds no records");
    const auto table = table_from_log(records);
    const std::string csv = bench::render_csv(table);
    io::write_file_atomic(join_path(out_dir, "table.csv"), csv);
    io::write_file_atomic(join_path(out_dir, "table.json"), bench::render_json(table));
    std::printf("%s", csv.c_str());
    std::printf("wrote %s and table.json\n", join_path(out_dir, "table.csv").c_str());
    return 0;
}

}  // namespace dpl::cli
