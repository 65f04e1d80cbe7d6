#pragma once

// Run configuration: a strict key = value format with [section] headers.
// Unknown keys are rejected rather than ignored; a typo in a hyperparameter
// name must never silently fall back to a default.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpl/bench.hpp"
#include "dpl/clipcore.hpp"
#include "dpl/common.hpp"
#include "dpl/io.hpp"
#include "dpl/worldgen.hpp"

namespace dpl::cli {

struct RunConfig {
    worldgen::WorldConfig world;
    clipcore::EncoderConfig encoder;
    std::size_t corpus_per_domain = 200;
    double attr_dropout = 0.25;
    bench::ProtocolConfig protocol;
    std::string output_dir = "out";
    std::string cache_dir = "cache";
    std::uint64_t seed = 1;
};

namespace detail {

struct Line {
    std::string section;
    std::string key;
    std::string value;
    std::size_t number = 0;
};

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

[[noreturn]] inline void fail(std::size_t line, const std::string& msg) {
    throw ConfigError("line " + std::to_string(line) + ": " + msg);
}

inline std::vector<std::string> split_list(const std::string& value, std::size_t line) {
    std::vector<std::string> items;
    std::size_t start = 0;
    while (start <= value.size()) {
        std::size_t comma = value.find(',', start);
        if (comma == std::string::npos) comma = value.size();
        const std::string item = trim(value.substr(start, comma - start));
        if (item.empty()) fail(line, "empty list element");
        items.push_back(item);
        start = comma + 1;
    }
    return items;
}

inline std::uint64_t parse_count(const Line& ln) {
    const std::string& v = ln.value;
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
        fail(ln.number, "key '" + ln.key + "' expects a non-negative integer, got '" + v + "'");
    try {
        return std::stoull(v);
    } catch (const std::out_of_range&) {
        fail(ln.number, "key '" + ln.key + "' value out of range: '" + v + "'");
    }
}

inline std::uint64_t parse_positive(const Line& ln) {
    const std::uint64_t n = parse_count(ln);
    if (n == 0) fail(ln.number, "key '" + ln.key + "' must be positive");
    return n;
}

inline double parse_real(const Line& ln) {
    std::size_t used = 0;
    double x = 0.0;
    try {
        x = std::stod(ln.value, &used);
    } catch (const std::exception&) {
        fail(ln.number, "key '" + ln.key + "' expects a real number, got '" + ln.value + "'");
    }
    if (used != ln.value.size() || !std::isfinite(x))
        fail(ln.number, "key '" + ln.key + "' expects a finite real number, got '" + ln.value +
                            "'");
    return x;
}

inline double parse_real_min(const Line& ln, double min_exclusive) {
    const double x = parse_real(ln);
    if (!(x > min_exclusive))
        fail(ln.number, "key '" + ln.key + "' must be greater than " +
                            std::to_string(min_exclusive));
    return x;
}

inline double parse_unit_interval(const Line& ln, bool allow_zero) {
    const double x = parse_real(ln);
    if (x >= 1.0 || x < 0.0 || (!allow_zero && x == 0.0))
        fail(ln.number, "key '" + ln.key + "' must lie in " + (allow_zero ? "[0, 1)" : "(0, 1)"));
    return x;
}

inline bool parse_bool(const Line& ln) {
    if (ln.value == "true") return true;
    if (ln.value == "false") return false;
    fail(ln.number, "key '" + ln.key + "' expects true or false, got '" + ln.value + "'");
}

inline void apply_world(RunConfig& cfg, const Line& ln) {
    auto& w = cfg.world;
    if (ln.key == "num_classes")
        w.num_classes = parse_positive(ln);
    else if (ln.key == "input_dim")
        w.input_dim = parse_positive(ln);
    else if (ln.key == "pretrain_domains")
        w.num_pretrain_domains = parse_positive(ln);
    else if (ln.key == "benchmark_domains")
        w.num_benchmark_domains = parse_positive(ln);
    else if (ln.key == "noise_sigma")
        w.noise_sigma = parse_real_min(ln, 0.0);
    else if (ln.key == "proto_scale")
        w.proto_scale = parse_real_min(ln, 0.0);
    else if (ln.key == "pretrain_rotation")
        w.pretrain_rotation = parse_real(ln);
    else if (ln.key == "pretrain_offset")
        w.pretrain_offset = parse_real(ln);
    else if (ln.key == "benchmark_rotation")
        w.benchmark_rotation = parse_real(ln);
    else if (ln.key == "benchmark_offset")
        w.benchmark_offset = parse_real(ln);
    else if (ln.key == "style_min")
        w.benchmark_style_min = parse_real(ln);
    else if (ln.key == "style_max")
        w.benchmark_style_max = parse_real(ln);
    else if (ln.key == "cover_benchmark")
        w.cover_benchmark = parse_bool(ln);
    else if (ln.key == "max_vocab")
        w.max_vocab = parse_positive(ln);
    else
        fail(ln.number, "unknown key '" + ln.key + "' in [world]");
}

inline void apply_pretrain(RunConfig& cfg, const Line& ln) {
    auto& e = cfg.encoder;
    if (ln.key == "embed_dim")
        e.embed_dim = parse_positive(ln);
    else if (ln.key == "token_dim")
        e.token_dim = parse_positive(ln);
    else if (ln.key == "image_hidden")
        e.image_hidden = parse_positive(ln);
    else if (ln.key == "text_hidden")
        e.text_hidden = parse_positive(ln);
    else if (ln.key == "max_len")
        e.max_len = parse_positive(ln);
    else if (ln.key == "steps")
        e.steps = parse_count(ln);
    else if (ln.key == "batch")
        e.batch_size = parse_positive(ln);
    else if (ln.key == "tau")
        e.tau = parse_real_min(ln, 0.0);
    else if (ln.key == "lr")
        e.lr = parse_real_min(ln, 0.0);
    else if (ln.key == "momentum")
        e.momentum = parse_unit_interval(ln, true);
    else if (ln.key == "corpus_per_domain")
        cfg.corpus_per_domain = parse_positive(ln);
    else if (ln.key == "attr_dropout")
        cfg.attr_dropout = parse_unit_interval(ln, true);
    else
        fail(ln.number, "unknown key '" + ln.key + "' in [pretrain]");
}

inline void apply_protocol(RunConfig& cfg, const Line& ln) {
    auto& p = cfg.protocol;
    if (ln.key == "methods") {
        p.methods.clear();
        for (const std::string& name : split_list(ln.value, ln.number)) {
            try {
                p.methods.push_back(bench::method_from_name(name));
            } catch (const ConfigError&) {
                fail(ln.number, "unknown method '" + name + "'");
            }
        }
    } else if (ln.key == "seeds") {
        p.seeds.clear();
        for (const std::string& item : split_list(ln.value, ln.number)) {
            Line sub = ln;
            sub.value = item;
            p.seeds.push_back(parse_count(sub));
        }
    } else if (ln.key == "trials")
        p.trials = parse_positive(ln);
    else if (ln.key == "samples_per_domain")
        p.samples_per_domain = parse_positive(ln);
    else if (ln.key == "split_fraction")
        p.split_fraction = parse_unit_interval(ln, false);
    else if (ln.key == "eval_batch")
        p.eval_batch = parse_positive(ln);
    else
        fail(ln.number, "unknown key '" + ln.key + "' in [protocol]");
}

inline void apply_paths(RunConfig& cfg, const Line& ln) {
    if (ln.key == "output_dir") {
        if (ln.value.empty()) fail(ln.number, "output_dir must not be empty");
        cfg.output_dir = ln.value;
    } else if (ln.key == "cache_dir") {
        if (ln.value.empty()) fail(ln.number, "cache_dir must not be empty");
        cfg.cache_dir = ln.value;
    } else
        fail(ln.number, "unknown key '" + ln.key + "' in [paths]");
}

inline void apply_run(RunConfig& cfg, const Line& ln) {
    if (ln.key == "seed")
        cfg.seed = parse_count(ln);
    else
        fail(ln.number, "unknown key '" + ln.key + "' in [run]");
}

}  // namespace detail

inline RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    const std::vector<std::string> known_sections = {"world", "pretrain", "protocol", "paths",
                                                     "run"};
    std::vector<std::pair<std::string, std::string>> seen;  // (section, key)
    std::string section;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        ++line_no;
        std::string raw = text.substr(start, end - start);
        start = end + 1;
        const std::size_t comment = raw.find('#');
        if (comment != std::string::npos) raw = raw.substr(0, comment);
        const std::string line = detail::trim(raw);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') detail::fail(line_no, "unterminated section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            if (std::find(known_sections.begin(), known_sections.end(), section) ==
                known_sections.end())
                detail::fail(line_no, "unknown section [" + section + "]");
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) detail::fail(line_no, "expected key = value");
        detail::Line ln;
        ln.section = section;
        ln.key = detail::trim(line.substr(0, eq));
        ln.value = detail::trim(line.substr(eq + 1));
        ln.number = line_no;
        if (ln.key.empty()) detail::fail(line_no, "missing key before '='");
        if (ln.value.empty()) detail::fail(line_no, "missing value for key '" + ln.key + "'");
        if (section.empty()) detail::fail(line_no, "key '" + ln.key + "' outside any section");
        for (const auto& [s, k] : seen)
            if (s == section && k == ln.key)
                detail::fail(line_no, "duplicate key '" + ln.key + "' in [" + section + "]");
        seen.emplace_back(section, ln.key);

        if (section == "world")
            detail::apply_world(cfg, ln);
        else if (section == "pretrain")
            detail::apply_pretrain(cfg, ln);
        else if (section == "protocol")
            detail::apply_protocol(cfg, ln);
        else if (section == "paths")
            detail::apply_paths(cfg, ln);
        else
            detail::apply_run(cfg, ln);
    }
    if (cfg.protocol.methods.empty()) throw ConfigError("methods list must not be empty");
    if (cfg.protocol.seeds.empty()) throw ConfigError("seeds list must not be empty");
    return cfg;
}

inline RunConfig parse_config(const std::string& path) {
    return parse_config_text(io::read_file(path));
}

namespace detail {

// Shortest representation that parses back to the same double.
inline std::string real_repr(double x) { return nlohmann::json(x).dump(); }

}  // namespace detail

// Canonical form: every key explicit, fixed order. dump -> parse -> dump is a
// fixed point.
inline std::string dump_config(const RunConfig& cfg) {
    using detail::real_repr;
    std::string s;
    s += "[world]\n";
    s += "num_classes = " + std::to_string(cfg.world.num_classes) + "\n";
    s += "input_dim = " + std::to_string(cfg.world.input_dim) + "\n";
    s += "pretrain_domains = " + std::to_string(cfg.world.num_pretrain_domains) + "\n";
    s += "benchmark_domains = " + std::to_string(cfg.world.num_benchmark_domains) + "\n";
    s += "noise_sigma = " + real_repr(cfg.world.noise_sigma) + "\n";
    s += "proto_scale = " + real_repr(cfg.world.proto_scale) + "\n";
    s += "pretrain_rotation = " + real_repr(cfg.world.pretrain_rotation) + "\n";
    s += "pretrain_offset = " + real_repr(cfg.world.pretrain_offset) + "\n";
    s += "benchmark_rotation = " + real_repr(cfg.world.benchmark_rotation) + "\n";
    s += "benchmark_offset = " + real_repr(cfg.world.benchmark_offset) + "\n";
    s += "style_min = " + real_repr(cfg.world.benchmark_style_min) + "\n";
    s += "style_max = " + real_repr(cfg.world.benchmark_style_max) + "\n";
    s += std::string("cover_benchmark = ") + (cfg.world.cover_benchmark ? "true" : "false") + "\n";
    s += "max_vocab = " + std::to_string(cfg.world.max_vocab) + "\n";
    s += "\n[pretrain]\n";
    s += "embed_dim = " + std::to_string(cfg.encoder.embed_dim) + "\n";
    s += "token_dim = " + std::to_string(cfg.encoder.token_dim) + "\n";
    s += "image_hidden = " + std::to_string(cfg.encoder.image_hidden) + "\n";
    s += "text_hidden = " + std::to_string(cfg.encoder.text_hidden) + "\n";
    s += "max_len = " + std::to_string(cfg.encoder.max_len) + "\n";
    s += "steps = " + std::to_string(cfg.encoder.steps) + "\n";
    s += "batch = " + std::to_string(cfg.encoder.batch_size) + "\n";
    s += "tau = " + real_repr(cfg.encoder.tau) + "\n";
    s += "lr = " + real_repr(cfg.encoder.lr) + "\n";
    s += "momentum = " + real_repr(cfg.encoder.momentum) + "\n";
    s += "corpus_per_domain = " + std::to_string(cfg.corpus_per_domain) + "\n";
    s += "attr_dropout = " + real_repr(cfg.attr_dropout) + "\n";
    s += "\n[protocol]\n";
    s += "methods = ";
    for (std::size_t i = 0; i < cfg.protocol.methods.size(); ++i) {
        if (i) s += ", ";
        s += bench::method_name(cfg.protocol.methods[i]);
    }
    s += "\nseeds = ";
    for (std::size_t i = 0; i < cfg.protocol.seeds.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(cfg.protocol.seeds[i]);
    }
    s += "\ntrials = " + std::to_string(cfg.protocol.trials) + "\n";
    s += "samples_per_domain = " + std::to_string(cfg.protocol.samples_per_domain) + "\n";
    s += "split_fraction = " + real_repr(cfg.protocol.split_fraction) + "\n";
    s += "eval_batch = " + std::to_string(cfg.protocol.eval_batch) + "\n";
    s += "\n[paths]\n";
    s += "output_dir = " + cfg.output_dir + "\n";
    s += "cache_dir = " + cfg.cache_dir + "\n";
    s += "\n[run]\n";
    s += "seed = " + std::to_string(cfg.seed) + "\n";
    return s;
}

// Fingerprint of the full canonical dump.
inline std::uint64_t config_fingerprint(const RunConfig& cfg) {
    return fnv1a(dump_config(cfg));
}

// Fingerprint over only what determines the encoder checkpoint: the world,
// the pretraining recipe, and the global seed. Protocol or path edits must
// not invalidate a pretrained artifact.
inline std::uint64_t pretrain_fingerprint(const RunConfig& cfg) {
    const std::string dump = dump_config(cfg);
    const std::size_t cut = dump.find("\n[protocol]");
    std::string head = cut == std::string::npos ? dump : dump.substr(0, cut);
    head += "\nseed = " + std::to_string(cfg.seed) + "\n";
    return fnv1a(head);
}

}  // namespace dpl::cli
