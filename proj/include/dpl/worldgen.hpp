#pragma once

// Synthetic multi-domain world: classes are prototype vectors, domains are
// rigid transformations (rotation + offset) of the shared class geometry,
// captions are token-id sequences. Everything is a pure function of
// (config, seed), so datasets regenerate bit-exactly.

#include "dpl/common.hpp"
#include "dpl/io.hpp"
#include "dpl/numkit.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace dpl::worldgen {

using numkit::Mat;
using numkit::Rng;
using numkit::Vec;

using TokenSeq = std::vector<std::size_t>;

// Token table layout: [0, num_template) template tokens, then one token per
// class, then one attribute token per domain.
struct Vocab {
    std::size_t num_template = 3;
    std::size_t num_classes = 0;
    std::size_t num_domains = 0;

    std::size_t size() const { return num_template + num_classes + num_domains; }

    std::size_t template_token(std::size_t i) const {
        if (i >= num_template) throw IndexError("template token index out of range");
        return i;
    }
    std::size_t class_token(std::size_t c) const {
        if (c >= num_classes) throw IndexError("class token index out of range");
        return num_template + c;
    }
    std::size_t attr_token(std::size_t d) const {
        if (d >= num_domains) throw IndexError("attribute token index out of range");
        return num_template + num_classes + d;
    }
    bool is_class_token(std::size_t t) const {
        return t >= num_template && t < num_template + num_classes;
    }
    std::size_t class_of_token(std::size_t t) const {
        if (!is_class_token(t)) throw IndexError("not a class token");
        return t - num_template;
    }
};

struct WorldConfig {
    std::size_t num_classes = 8;
    std::size_t input_dim = 16;
    std::size_t num_pretrain_domains = 10;
    std::size_t num_benchmark_domains = 4;
    double noise_sigma = 0.1;
    double proto_scale = 1.0;
    // Shift strength of the pretrain-pool domains: each rotation is the QR
    // orthonormalization of I + s/sqrt(d) * G with G standard Gaussian.
    double pretrain_rotation = 0.5;
    double pretrain_offset = 0.5;
    // Benchmark domains share one Gaussian direction matrix and one offset
    // direction; per-domain style intensities interpolate [style_min,
    // style_max], so held-out domains lie on the axis spanned by the sources.
    double benchmark_rotation = 1.0;
    double benchmark_offset = 1.0;
    double benchmark_style_min = 0.6;
    double benchmark_style_max = 1.5;
    // When set, benchmark domains participate in the pretraining corpus.
    bool cover_benchmark = false;
    std::size_t max_vocab = 256;
};

struct DomainTransform {
    std::size_t domain_id = 0;
    Mat rotation;
    Vec offset;
    bool in_pretrain_corpus = true;
};

struct Sample {
    Vec x;
    std::size_t y = 0;
};

struct DomainDataset {
    std::size_t domain_id = 0;
    std::vector<Sample> samples;
    std::uint64_t seed = 0;
};

struct CaptionedSample {
    Vec x;
    TokenSeq caption;
};

struct WorldSpec {
    WorldConfig config;
    std::uint64_t seed = 0;
    std::vector<Vec> class_prototypes;
    std::vector<DomainTransform> domains;
    Vocab vocab;
    double noise_sigma = 0.0;

    std::size_t num_classes() const { return class_prototypes.size(); }
    std::size_t input_dim() const { return config.input_dim; }
    std::size_t num_domains() const { return domains.size(); }

    std::vector<std::size_t> benchmark_domain_ids() const {
        std::vector<std::size_t> ids;
        for (std::size_t d = config.num_pretrain_domains; d < domains.size(); ++d)
            ids.push_back(d);
        return ids;
    }
    std::vector<std::size_t> pool_domain_ids() const {
        std::vector<std::size_t> ids;
        for (const auto& dt : domains)
            if (dt.in_pretrain_corpus) ids.push_back(dt.domain_id);
        return ids;
    }
};

inline Vec random_unit(Rng& rng, std::size_t d) {
    Vec v = rng.normal_vec(d, 1.0);
    const double n = numkit::norm(v);
    if (n < 1e-12) throw NumericError("degenerate direction sample");
    return numkit::scaled(v, 1.0 / n);
}

// Modified Gram-Schmidt with one re-orthogonalization pass; columns of the
// result are orthonormal, diagonal of R positive, so the factor is unique.
// For the identity input the output is exactly the identity.
inline Mat orthonormalize(const Mat& a) {
    if (a.rows != a.cols) throw ShapeError("orthonormalize needs a square matrix");
    const std::size_t d = a.rows;
    std::vector<Vec> cols(d, Vec(d, 0.0));
    for (std::size_t j = 0; j < d; ++j)
        for (std::size_t i = 0; i < d; ++i) cols[j][i] = a.at(i, j);
    for (std::size_t j = 0; j < d; ++j) {
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t k = 0; k < j; ++k) {
                const double r = numkit::dot(cols[k], cols[j]);
                if (r != 0.0) numkit::axpy(cols[j], -r, cols[k]);
            }
        }
        const double n = numkit::norm(cols[j]);
        if (n < 1e-8) throw NumericError("near-singular matrix in orthonormalization");
        for (double& v : cols[j]) v /= n;
    }
    Mat q(d, d);
    for (std::size_t j = 0; j < d; ++j)
        for (std::size_t i = 0; i < d; ++i) q.at(i, j) = cols[j][i];
    return q;
}

inline double orthogonality_defect(const Mat& r) {
    double worst = 0.0;
    for (std::size_t i = 0; i < r.cols; ++i) {
        for (std::size_t j = 0; j < r.cols; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < r.rows; ++k) s += r.at(k, i) * r.at(k, j);
            const double target = (i == j) ? 1.0 : 0.0;
            worst = std::max(worst, std::abs(s - target));
        }
    }
    return worst;
}

inline Mat sample_rotation(Rng& rng, std::size_t d, double strength) {
    Mat a = Mat::identity(d);
    if (strength != 0.0) {
        const double sigma = strength / std::sqrt(double(d));
        for (double& v : a.data) v += rng.normal(sigma);
    }
    Mat q = orthonormalize(a);
    if (orthogonality_defect(q) > 1e-10)
        throw NumericError("rotation failed orthogonality check");
    return q;
}

inline WorldSpec make_world(const WorldConfig& cfg, std::uint64_t seed) {
    if (cfg.num_classes < 2) throw ConfigError("num_classes must be at least 2");
    if (cfg.input_dim < 2) throw ConfigError("input_dim must be at least 2");
    const std::size_t total_domains = cfg.num_pretrain_domains + cfg.num_benchmark_domains;
    if (total_domains < 2) throw ConfigError("need at least 2 domains");
    if (cfg.noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
    if (cfg.proto_scale <= 0.0) throw ConfigError("proto_scale must be positive");
    if (cfg.benchmark_style_min > cfg.benchmark_style_max)
        throw ConfigError("benchmark_style_min exceeds benchmark_style_max");
    const std::size_t vocab_need = 3 + cfg.num_classes + total_domains;
    if (vocab_need > cfg.max_vocab)
        throw ConfigError("vocabulary capacity exceeded: need " +
                          std::to_string(vocab_need) + " tokens, cap " +
                          std::to_string(cfg.max_vocab));

    WorldSpec w;
    w.config = cfg;
    w.seed = seed;
    w.noise_sigma = cfg.noise_sigma;
    w.vocab = Vocab{3, cfg.num_classes, total_domains};

    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
        Rng rng(seed, numkit::stream_id("world_proto", c));
        w.class_prototypes.push_back(
            numkit::scaled(random_unit(rng, cfg.input_dim), cfg.proto_scale));
    }
    for (std::size_t a = 0; a < cfg.num_classes; ++a) {
        for (std::size_t b = a + 1; b < cfg.num_classes; ++b) {
            Vec diff = numkit::add(w.class_prototypes[a],
                                   numkit::scaled(w.class_prototypes[b], -1.0));
            if (numkit::norm(diff) < 1e-6)
                throw NumericError("class prototypes nearly coincide");
        }
    }

    for (std::size_t d = 0; d < cfg.num_pretrain_domains; ++d) {
        DomainTransform t;
        t.domain_id = d;
        Rng rot_rng(seed, numkit::stream_id("world_rot", d));
        t.rotation = sample_rotation(rot_rng, cfg.input_dim, cfg.pretrain_rotation);
        Rng off_rng(seed, numkit::stream_id("world_off", d));
        t.offset = numkit::scaled(random_unit(off_rng, cfg.input_dim), cfg.pretrain_offset);
        t.in_pretrain_corpus = true;
        w.domains.push_back(std::move(t));
    }

    if (cfg.num_benchmark_domains > 0) {
        Rng dir_rng(seed, numkit::stream_id("world_bench_dir"));
        Mat g(cfg.input_dim, cfg.input_dim);
        for (double& v : g.data) v = dir_rng.normal(1.0 / std::sqrt(double(cfg.input_dim)));
        const Vec off_dir = random_unit(dir_rng, cfg.input_dim);
        const std::size_t nb = cfg.num_benchmark_domains;
        for (std::size_t j = 0; j < nb; ++j) {
            const double frac = (nb == 1) ? 0.0 : double(j) / double(nb - 1);
            const double style =
                cfg.benchmark_style_min +
                frac * (cfg.benchmark_style_max - cfg.benchmark_style_min);
            DomainTransform t;
            t.domain_id = cfg.num_pretrain_domains + j;
            Mat a = Mat::identity(cfg.input_dim);
            const double scale = style * cfg.benchmark_rotation;
            for (std::size_t k = 0; k < a.data.size(); ++k) a.data[k] += scale * g.data[k];
            t.rotation = orthonormalize(a);
            if (orthogonality_defect(t.rotation) > 1e-10)
                throw NumericError("rotation failed orthogonality check");
            t.offset = numkit::scaled(off_dir, style * cfg.benchmark_offset);
            t.in_pretrain_corpus = cfg.cover_benchmark;
            w.domains.push_back(std::move(t));
        }
    }
    return w;
}

// Common random numbers: the (label, noise) stream depends on the seed only,
// never on the domain, so datasets drawn for two domains under one seed pair
// up sample-for-sample.
inline DomainDataset sample_domain_dataset(const WorldSpec& w, std::size_t domain_id,
                                           std::size_t n, std::uint64_t seed) {
    if (domain_id >= w.domains.size()) throw IndexError("domain_id out of range");
    if (n < 1) throw ContractError("dataset size must be at least 1");
    const DomainTransform& t = w.domains[domain_id];
    Rng rng(seed, numkit::stream_id("domain_data"));
    DomainDataset ds;
    ds.domain_id = domain_id;
    ds.seed = seed;
    ds.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Sample s;
        s.y = rng.index(w.num_classes());
        Vec core = numkit::add(w.class_prototypes[s.y],
                               rng.normal_vec(w.input_dim(), w.noise_sigma));
        s.x = numkit::add(numkit::matvec(t.rotation, core), t.offset);
        numkit::require_finite(s.x, "generated sample");
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

inline TokenSeq make_caption(const WorldSpec& w, std::size_t class_id,
                             std::optional<std::size_t> domain_id = std::nullopt) {
    if (class_id >= w.num_classes()) throw IndexError("class_id out of range");
    TokenSeq seq;
    for (std::size_t i = 0; i < w.vocab.num_template; ++i)
        seq.push_back(w.vocab.template_token(i));
    seq.push_back(w.vocab.class_token(class_id));
    if (domain_id) {
        if (*domain_id >= w.num_domains()) throw IndexError("domain_id out of range");
        seq.push_back(w.vocab.attr_token(*domain_id));
    }
    return seq;
}

// Corpus assembly: samples from every pool domain, captioned with the class
// token plus (usually) the domain attribute token. attr_dropout is the
// fraction of captions that omit the attribute, which keeps the bare
// template prompt in-distribution for the text tower.
inline std::vector<CaptionedSample> make_pretrain_corpus(const WorldSpec& w,
                                                         std::size_t per_domain,
                                                         double attr_dropout,
                                                         std::uint64_t seed) {
    if (per_domain < 1) throw ContractError("per_domain must be at least 1");
    if (attr_dropout < 0.0 || attr_dropout >= 1.0)
        throw ConfigError("attr_dropout must lie in [0, 1)");
    std::vector<CaptionedSample> corpus;
    Rng drop_rng(seed, numkit::stream_id("attr_drop"));
    for (std::size_t d : w.pool_domain_ids()) {
        const std::uint64_t ds_seed = numkit::splitmix64(seed ^ numkit::stream_id("corpus", d));
        DomainDataset ds = sample_domain_dataset(w, d, per_domain, ds_seed);
        for (auto& s : ds.samples) {
            const bool keep_attr = drop_rng.uniform(0.0, 1.0) >= attr_dropout;
            CaptionedSample cs;
            cs.caption = keep_attr ? make_caption(w, s.y, d) : make_caption(w, s.y);
            cs.x = std::move(s.x);
            corpus.push_back(std::move(cs));
        }
    }
    return corpus;
}

inline std::pair<DomainDataset, DomainDataset> split_train_val(const DomainDataset& ds,
                                                               double fraction,
                                                               std::uint64_t seed) {
    const std::size_t n = ds.samples.size();
    if (n < 2) throw ContractError("cannot split a dataset with fewer than 2 samples");
    if (fraction <= 0.0 || fraction >= 1.0)
        throw ContractError("split fraction must lie strictly between 0 and 1");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed, numkit::stream_id("split"));
    for (std::size_t i = n - 1; i > 0; --i)
        std::swap(idx[i], idx[rng.index(i + 1)]);
    // guard against binary dust pushing e.g. 0.8*5 over 4.0
    const auto train_n = std::size_t(std::ceil(fraction * double(n) - 1e-9));
    DomainDataset train, val;
    train.domain_id = val.domain_id = ds.domain_id;
    train.seed = val.seed = seed;
    for (std::size_t i = 0; i < n; ++i)
        (i < train_n ? train : val).samples.push_back(ds.samples[idx[i]]);
    return {std::move(train), std::move(val)};
}

// True posterior argmax under the generative model: labels uniform, isotropic
// Gaussian noise, rigid transform. Ties break toward the lowest class index.
inline std::size_t bayes_predict(const WorldSpec& w, std::size_t domain_id, const Vec& x) {
    if (domain_id >= w.domains.size()) throw IndexError("domain_id out of range");
    const DomainTransform& t = w.domains[domain_id];
    Vec centered = numkit::add(x, numkit::scaled(t.offset, -1.0));
    Vec z = numkit::matvec_t(t.rotation, centered);
    std::size_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < w.num_classes(); ++c) {
        double d2 = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) {
            const double diff = z[i] - w.class_prototypes[c][i];
            d2 += diff * diff;
        }
        if (d2 < best_d2) {
            best_d2 = d2;
            best = c;
        }
    }
    return best;
}

inline double bayes_accuracy(const WorldSpec& w, const DomainDataset& ds) {
    if (ds.samples.empty()) throw ContractError("empty dataset");
    std::size_t hits = 0;
    for (const Sample& s : ds.samples)
        if (bayes_predict(w, ds.domain_id, s.x) == s.y) ++hits;
    return double(hits) / double(ds.samples.size());
}

inline std::string world_bytes(const WorldSpec& w) {
    io::ByteWriter bw;
    bw.magic("DPLW");
    bw.u64(w.seed);
    bw.u64(w.config.num_classes);
    bw.u64(w.config.input_dim);
    bw.u64(w.config.num_pretrain_domains);
    bw.u64(w.config.num_benchmark_domains);
    bw.f64(w.config.noise_sigma);
    bw.f64(w.config.proto_scale);
    bw.f64(w.config.pretrain_rotation);
    bw.f64(w.config.pretrain_offset);
    bw.f64(w.config.benchmark_rotation);
    bw.f64(w.config.benchmark_offset);
    bw.f64(w.config.benchmark_style_min);
    bw.f64(w.config.benchmark_style_max);
    bw.u8(w.config.cover_benchmark ? 1 : 0);
    for (const Vec& p : w.class_prototypes)
        for (double v : p) bw.f64(v);
    for (const DomainTransform& t : w.domains) {
        bw.u64(t.domain_id);
        for (double v : t.rotation.data) bw.f64(v);
        for (double v : t.offset) bw.f64(v);
        bw.u8(t.in_pretrain_corpus ? 1 : 0);
    }
    return bw.str();
}

inline std::uint64_t world_fingerprint(const WorldSpec& w) {
    return fnv1a(world_bytes(w));
}

inline nlohmann::json world_to_json(const WorldSpec& w) {
    nlohmann::json j;
    j["seed"] = w.seed;
    j["fingerprint"] = world_fingerprint(w);
    j["num_classes"] = w.config.num_classes;
    j["input_dim"] = w.config.input_dim;
    j["num_pretrain_domains"] = w.config.num_pretrain_domains;
    j["num_benchmark_domains"] = w.config.num_benchmark_domains;
    j["noise_sigma"] = w.noise_sigma;
    j["vocab_size"] = w.vocab.size();
    j["prototypes"] = w.class_prototypes;
    auto& doms = j["domains"] = nlohmann::json::array();
    for (const DomainTransform& t : w.domains) {
        nlohmann::json dj;
        dj["domain_id"] = t.domain_id;
        dj["rotation"] = t.rotation.data;
        dj["offset"] = t.offset;
        dj["in_pretrain_corpus"] = t.in_pretrain_corpus;
        doms.push_back(std::move(dj));
    }
    return j;
}

inline nlohmann::json dataset_to_json(const DomainDataset& ds) {
    nlohmann::json j;
    j["domain_id"] = ds.domain_id;
    j["seed"] = ds.seed;
    auto& rows = j["samples"] = nlohmann::json::array();
    for (const Sample& s : ds.samples)
        rows.push_back(nlohmann::json{{"x", s.x}, {"y", s.y}});
    return j;
}

inline DomainDataset dataset_from_json(const nlohmann::json& j) {
    DomainDataset ds;
    try {
        ds.domain_id = j.at("domain_id").get<std::size_t>();
        ds.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& row : j.at("samples")) {
            Sample s;
            s.x = row.at("x").get<Vec>();
            s.y = row.at("y").get<std::size_t>();
            numkit::require_finite(s.x, "dataset sample");
            ds.samples.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed dataset dump: ") + e.what());
    }
    return ds;
}

}  // namespace dpl::worldgen
