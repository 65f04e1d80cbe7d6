#pragma once

// Prompt machinery over the frozen encoders: continuous context tokens, a
// static learned context (coop_optimize), and the batch-conditioned domain
// prompt generator (dpl_*). The generator is a three-layer MLP mapping an
// image embedding to M context tokens; a domain prompt is the mean of the
// generator's outputs over an unlabeled batch.

#include "dpl/clipcore.hpp"
#include "dpl/common.hpp"
#include "dpl/io.hpp"
#include "dpl/numkit.hpp"
#include "dpl/worldgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace dpl::promptlab {

using clipcore::ClassPrompt;
using clipcore::FrozenEncoders;
using clipcore::Rows;
using numkit::Grads;
using numkit::Mat;
using numkit::MlpParams;
using numkit::Rng;
using numkit::Vec;

struct PromptContext {
    Mat tokens;  // m x token_dim

    std::size_t m() const { return tokens.rows; }
    std::size_t token_dim() const { return tokens.cols; }
};

inline PromptContext context_from_flat(std::size_t m, std::size_t token_dim,
                                       const Vec& flat) {
    if (m < 1) throw ContractError("context needs at least 1 token");
    if (flat.size() != m * token_dim)
        throw ShapeError("flat context has " + std::to_string(flat.size()) +
                         " values, expected " + std::to_string(m * token_dim));
    numkit::require_finite(flat, "context");
    PromptContext ctx;
    ctx.tokens = Mat(m, token_dim);
    ctx.tokens.data = flat;
    return ctx;
}

inline Vec context_flatten(const PromptContext& ctx) { return ctx.tokens.data; }

struct GeneratorParams {
    MlpParams mlp;  // embed_dim -> m * token_dim, exactly 3 layers
    std::size_t m = 0;
    std::size_t token_dim = 0;

    void validate() const {
        mlp.validate();
        if (mlp.layers.size() != 3)
            throw ContractError("generator must have exactly 3 layers, got " +
                                std::to_string(mlp.layers.size()));
        if (m < 1) throw ContractError("generator context size must be positive");
        if (mlp.out_dim() != m * token_dim)
            throw ShapeError("generator output does not reshape to m x token_dim");
    }
};

struct DomainPrompt {
    std::string domain_tag;
    PromptContext context;
    std::size_t batch_size_used = 0;
};

// Labeled frozen features, the working currency of prompt training.
struct FeatureSet {
    std::vector<Vec> features;
    std::vector<std::size_t> labels;

    std::size_t size() const { return features.size(); }
};

inline FeatureSet from_table(const clipcore::EmbeddingTable& table) {
    FeatureSet fs;
    fs.features.reserve(table.rows.size());
    fs.labels.reserve(table.rows.size());
    for (const auto& row : table.rows) {
        fs.features.push_back(row.embedding);
        fs.labels.push_back(row.label);
    }
    return fs;
}

// Context rows first, class token last; the positional encoder makes this
// ordering part of the model.
inline Rows build_class_prompt(const FrozenEncoders& enc, const worldgen::Vocab& vocab,
                               std::size_t class_id, const PromptContext& ctx) {
    if (ctx.token_dim() != enc.token_dim())
        throw ShapeError("context token width does not match the encoders");
    Rows rows;
    rows.reserve(ctx.m() + 1);
    for (std::size_t i = 0; i < ctx.m(); ++i) rows.push_back(ctx.tokens.row_vec(i));
    rows.push_back(enc.token_table.row_vec(vocab.class_token(class_id)));
    return rows;
}

inline std::vector<ClassPrompt> prompts_from_context(const FrozenEncoders& enc,
                                                     const worldgen::Vocab& vocab,
                                                     const PromptContext& ctx) {
    std::vector<ClassPrompt> prompts;
    prompts.reserve(vocab.num_classes);
    for (std::size_t c = 0; c < vocab.num_classes; ++c) {
        ClassPrompt p;
        p.class_id = c;
        p.tokens = build_class_prompt(enc, vocab, c, ctx);
        p.embedding = clipcore::text_encode_rows(enc, p.tokens);
        prompts.push_back(std::move(p));
    }
    return prompts;
}

// Loss over one labeled feature batch for a fixed context: mean cross-entropy
// of cosine logits against the K prompts built from the context. Returns the
// gradient with respect to the flattened context.
struct ContextLossResult {
    double loss = 0.0;
    Vec dcontext;
};

inline ContextLossResult context_loss_and_grad(const FrozenEncoders& enc,
                                               const worldgen::Vocab& vocab,
                                               const PromptContext& ctx,
                                               const std::vector<Vec>& features,
                                               const std::vector<std::size_t>& labels,
                                               double weight = 1.0) {
    if (features.empty()) throw ContractError("empty feature batch");
    if (features.size() != labels.size())
        throw ShapeError("features and labels differ in length");
    const std::size_t k = vocab.num_classes;
    if (k < 2) throw ContractError("need at least 2 classes");
    const std::size_t m = ctx.m();
    if (ctx.token_dim() != enc.token_dim())
        throw ShapeError("context token width does not match the encoders");
    if (m + 1 > enc.max_len())
        throw LengthError("token sequence longer than positional table (" +
                          std::to_string(m + 1) + " > " + std::to_string(enc.max_len()) + ")");

    // The m context rows and their positions are shared by every class
    // prompt, so their text-tower terms are evaluated once and reused; only
    // the class-token term differs per prompt. Accumulation order matches
    // text_encode_rows exactly.
    const double inv = 1.0 / double(m + 1);
    std::vector<numkit::MlpTape> ctx_tapes;
    ctx_tapes.reserve(m);
    Vec shared(enc.embed_dim(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        Vec z = numkit::add(ctx.tokens.row_vec(i), enc.positional.row_vec(i));
        auto [h, tape] = numkit::mlp_forward(enc.text_mlp, z);
        numkit::axpy(shared, inv, h);
        ctx_tapes.push_back(std::move(tape));
    }
    std::vector<Vec> txt(k);
    for (std::size_t c = 0; c < k; ++c) {
        Vec z = numkit::add(enc.token_table.row_vec(vocab.class_token(c)),
                            enc.positional.row_vec(m));
        auto [t, tape] = numkit::mlp_forward(enc.text_mlp, z);
        (void)tape;  // the class-token row stays frozen; no backward needed
        txt[c] = shared;
        numkit::axpy(txt[c], inv, t);
    }

    ContextLossResult res;
    res.dcontext.assign(m * ctx.token_dim(), 0.0);
    std::vector<Vec> dtxt(k, Vec(enc.embed_dim(), 0.0));
    const double w = weight / double(features.size());
    Vec discard(enc.embed_dim(), 0.0);
    for (std::size_t j = 0; j < features.size(); ++j) {
        if (labels[j] >= k) throw IndexError("label out of range");
        Vec logits(k);
        for (std::size_t c = 0; c < k; ++c)
            logits[c] = numkit::cosine_similarity(features[j], txt[c]);
        auto ce = numkit::softmax_cross_entropy(logits, labels[j]);
        res.loss += w * ce.loss;
        for (std::size_t c = 0; c < k; ++c) {
            std::fill(discard.begin(), discard.end(), 0.0);
            numkit::cosine_similarity_backward(features[j], txt[c], w * ce.dlogits[c],
                                               discard, dtxt[c]);
        }
    }

    // d(loss)/d(ctx_i) = J_i^T (inv * sum_c dtxt_c): the shared row's Jacobian
    // is linear in the cotangent, so the per-class sum moves inside.
    Vec dsum(enc.embed_dim(), 0.0);
    for (std::size_t c = 0; c < k; ++c) numkit::axpy(dsum, inv, dtxt[c]);
    for (std::size_t i = 0; i < m; ++i) {
        auto [g, dz] = numkit::mlp_backward(enc.text_mlp, ctx_tapes[i], dsum);
        (void)g;  // the text tower is frozen
        for (std::size_t d = 0; d < ctx.token_dim(); ++d)
            res.dcontext[i * ctx.token_dim() + d] = dz[d];
    }
    return res;
}

struct CoopConfig {
    std::size_t steps = 500;
    std::size_t batch = 32;
    double lr = 0.01;
    double momentum = 0.9;
    std::size_t m = 4;
    std::uint64_t seed = 1;

    void validate() const {
        if (lr <= 0.0) throw ConfigError("lr must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
        if (batch < 1) throw ConfigError("batch must be positive");
        if (m < 1) throw ConfigError("context size m must be positive");
    }
};

inline PromptContext init_context(const FrozenEncoders& enc, std::size_t m,
                                  std::uint64_t seed) {
    Rng rng(seed, numkit::stream_id("context_init"));
    PromptContext ctx;
    ctx.tokens = Mat(m, enc.token_dim());
    for (double& v : ctx.tokens.data) v = rng.normal(0.1);
    return ctx;
}

// Static context optimization against pooled labeled features; the encoders
// stay untouched.
inline PromptContext coop_optimize(const FrozenEncoders& enc, const worldgen::Vocab& vocab,
                                   const FeatureSet& data, const CoopConfig& cfg,
                                   Vec* loss_history = nullptr) {
    cfg.validate();
    if (!enc.frozen) throw ContractError("encoders must be frozen");
    if (data.size() == 0) throw ContractError("empty training set");
    if (cfg.m + 1 > enc.max_len())
        throw ConfigError("context size m exceeds positional capacity");

    PromptContext ctx = init_context(enc, cfg.m, cfg.seed);
    Vec velocity(cfg.m * enc.token_dim(), 0.0);
    Rng batch_rng(cfg.seed, numkit::stream_id("coop_batch"));
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const std::size_t batch = std::min(cfg.batch, data.size());

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        for (std::size_t b = 0; b < batch; ++b)
            std::swap(order[b], order[b + batch_rng.index(order.size() - b)]);
        std::vector<Vec> feats(batch);
        std::vector<std::size_t> labels(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            feats[b] = data.features[order[b]];
            labels[b] = data.labels[order[b]];
        }
        ContextLossResult r;
        try {
            r = context_loss_and_grad(enc, vocab, ctx, feats, labels);
            if (!std::isfinite(r.loss)) throw NumericError("non-finite loss");
        } catch (const NumericError& e) {
            throw NumericError("context optimization diverged at step " +
                               std::to_string(step) + ": " + e.what());
        }
        if (loss_history) loss_history->push_back(r.loss);
        for (std::size_t i = 0; i < velocity.size(); ++i) {
            velocity[i] = cfg.momentum * velocity[i] + r.dcontext[i];
            ctx.tokens.data[i] -= cfg.lr * velocity[i];
        }
    }
    return ctx;
}

struct DplConfig {
    std::size_t steps = 1000;
    std::size_t batch = 32;  // per-domain batch size N
    double lr = 0.01;
    double momentum = 0.9;
    std::size_t m = 4;
    std::size_t hidden = 32;
    std::uint64_t seed = 1;

    void validate() const {
        if (lr <= 0.0) throw ConfigError("lr must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
        if (batch < 1) throw ConfigError("batch must be positive");
        if (m < 1) throw ConfigError("context size m must be positive");
        if (hidden < 1) throw ConfigError("hidden width must be positive");
    }
};

inline GeneratorParams init_generator(const FrozenEncoders& enc, const DplConfig& cfg) {
    cfg.validate();
    GeneratorParams gen;
    gen.m = cfg.m;
    gen.token_dim = enc.token_dim();
    Rng rng(cfg.seed, numkit::stream_id("generator_init"));
    gen.mlp = numkit::make_mlp(
        {enc.embed_dim(), cfg.hidden, cfg.hidden, cfg.m * enc.token_dim()}, rng);
    gen.validate();
    return gen;
}

// p = (1/N) sum_j F(feature_j), reshaped to m x token_dim.
inline DomainPrompt dpl_generate(const GeneratorParams& gen, const std::vector<Vec>& features,
                                 const std::string& domain_tag = "target") {
    gen.validate();
    if (features.empty()) throw ContractError("domain prompt needs a non-empty batch");
    Vec sum(gen.mlp.out_dim(), 0.0);
    for (const Vec& f : features) {
        auto [y, tape] = numkit::mlp_forward(gen.mlp, f);
        numkit::axpy(sum, 1.0, y);
    }
    const double inv = 1.0 / double(features.size());
    for (double& v : sum) v *= inv;
    DomainPrompt p;
    p.domain_tag = domain_tag;
    p.context = context_from_flat(gen.m, gen.token_dim, sum);
    p.batch_size_used = features.size();
    return p;
}

struct SourceBatch {
    std::vector<Vec> features;
    std::vector<std::size_t> labels;
};

struct DplLossResult {
    double loss = 0.0;
    Grads grads;  // generator only
};

// Per source domain: generate that domain's prompt from its batch, classify
// the same batch against the K prompts, take cross-entropy; the loss averages
// over domains of the per-domain sample mean. Gradients flow through the
// batch mean into the generator alone.
inline DplLossResult dpl_loss_and_grad(const GeneratorParams& gen, const FrozenEncoders& enc,
                                       const worldgen::Vocab& vocab,
                                       const std::vector<SourceBatch>& source_batches) {
    gen.validate();
    if (source_batches.empty()) throw ContractError("need at least 1 source batch");
    if (gen.token_dim != enc.token_dim())
        throw ShapeError("generator token width does not match the encoders");

    DplLossResult res;
    res.grads = Grads::zeros_like(gen.mlp);
    const double domain_w = 1.0 / double(source_batches.size());

    for (const SourceBatch& batch : source_batches) {
        if (batch.features.empty()) throw ContractError("empty source batch");
        if (batch.features.size() != batch.labels.size())
            throw ShapeError("features and labels differ in length");
        const std::size_t n = batch.features.size();

        // forward: per-sample generator outputs and their mean
        std::vector<numkit::MlpTape> tapes(n);
        Vec mean_flat(gen.mlp.out_dim(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            auto [y, tape] = numkit::mlp_forward(gen.mlp, batch.features[j]);
            numkit::axpy(mean_flat, 1.0 / double(n), y);
            tapes[j] = std::move(tape);
        }
        PromptContext ctx = context_from_flat(gen.m, gen.token_dim, mean_flat);

        ContextLossResult ctx_res = context_loss_and_grad(enc, vocab, ctx, batch.features,
                                                          batch.labels, domain_w);
        res.loss += ctx_res.loss;

        // d(mean) spreads evenly over the per-sample generator outputs
        Vec dout = numkit::scaled(ctx_res.dcontext, 1.0 / double(n));
        for (std::size_t j = 0; j < n; ++j) {
            auto [g, dx] = numkit::mlp_backward(gen.mlp, tapes[j], dout);
            res.grads.add_scaled(g, 1.0);
        }
    }
    return res;
}

// Trains the generator over >= 2 source domains; one batch per domain per
// step, heavy-ball SGD, everything but the generator frozen.
inline GeneratorParams dpl_train(const FrozenEncoders& enc, const worldgen::Vocab& vocab,
                                 const std::vector<FeatureSet>& sources, const DplConfig& cfg,
                                 Vec* loss_history = nullptr) {
    cfg.validate();
    if (!enc.frozen) throw ContractError("encoders must be frozen");
    if (sources.size() < 2)
        throw ContractError("domain prompt training needs at least 2 source domains");
    for (const FeatureSet& fs : sources)
        if (fs.size() == 0) throw ContractError("empty source domain");
    if (cfg.m + 1 > enc.max_len())
        throw ConfigError("context size m exceeds positional capacity");

    GeneratorParams gen = init_generator(enc, cfg);
    auto opt = numkit::OptimizerState::create(gen.mlp, cfg.lr, cfg.momentum);
    Rng batch_rng(cfg.seed, numkit::stream_id("dpl_batch"));
    std::vector<std::vector<std::size_t>> orders;
    for (const FeatureSet& fs : sources) {
        std::vector<std::size_t> order(fs.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        orders.push_back(std::move(order));
    }

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<SourceBatch> batches;
        batches.reserve(sources.size());
        for (std::size_t s = 0; s < sources.size(); ++s) {
            auto& order = orders[s];
            const std::size_t take = std::min(cfg.batch, order.size());
            for (std::size_t b = 0; b < take; ++b)
                std::swap(order[b], order[b + batch_rng.index(order.size() - b)]);
            SourceBatch sb;
            for (std::size_t b = 0; b < take; ++b) {
                sb.features.push_back(sources[s].features[order[b]]);
                sb.labels.push_back(sources[s].labels[order[b]]);
            }
            batches.push_back(std::move(sb));
        }
        DplLossResult r;
        try {
            r = dpl_loss_and_grad(gen, enc, vocab, batches);
            if (!std::isfinite(r.loss)) throw NumericError("non-finite loss");
        } catch (const NumericError& e) {
            throw NumericError("generator training diverged at step " +
                               std::to_string(step) + ": " + e.what());
        }
        if (loss_history) loss_history->push_back(r.loss);
        numkit::sgd_momentum_step(gen.mlp, r.grads, opt);
    }
    return gen;
}

// Classifies a batch with ONE domain prompt generated from that very batch.
inline std::vector<std::size_t> dpl_predict_features(const FrozenEncoders& enc,
                                                     const GeneratorParams& gen,
                                                     const worldgen::Vocab& vocab,
                                                     const std::vector<Vec>& features) {
    if (features.empty()) throw ContractError("empty prediction batch");
    DomainPrompt prompt = dpl_generate(gen, features);
    auto prompts = prompts_from_context(enc, vocab, prompt.context);
    std::vector<std::size_t> out;
    out.reserve(features.size());
    for (const Vec& f : features)
        out.push_back(clipcore::zero_shot_predict_embedded(prompts, f));
    return out;
}

inline std::vector<std::size_t> dpl_predict_batch(const FrozenEncoders& enc,
                                                  const GeneratorParams& gen,
                                                  const worldgen::Vocab& vocab,
                                                  const std::vector<Vec>& batch_x) {
    if (!enc.frozen) throw ContractError("encoders must be frozen");
    if (batch_x.empty()) throw ContractError("empty prediction batch");
    std::vector<Vec> features;
    features.reserve(batch_x.size());
    for (const Vec& x : batch_x) features.push_back(clipcore::image_encode(enc, x));
    return dpl_predict_features(enc, gen, vocab, features);
}

// Chunked evaluation: prompts regenerate per chunk of at most chunk_size
// samples, mirroring test-time batching.
inline double dpl_accuracy_batched(const FrozenEncoders& enc, const GeneratorParams& gen,
                                   const worldgen::Vocab& vocab, const FeatureSet& data,
                                   std::size_t chunk_size = 64) {
    if (data.size() == 0) throw ContractError("empty evaluation set");
    if (chunk_size < 1) throw ContractError("chunk size must be positive");
    std::size_t hits = 0;
    for (std::size_t start = 0; start < data.size(); start += chunk_size) {
        const std::size_t end = std::min(data.size(), start + chunk_size);
        std::vector<Vec> chunk(data.features.begin() + start, data.features.begin() + end);
        std::vector<std::size_t> preds = dpl_predict_features(enc, gen, vocab, chunk);
        for (std::size_t j = 0; j < preds.size(); ++j)
            if (preds[j] == data.labels[start + j]) ++hits;
    }
    return double(hits) / double(data.size());
}

inline std::size_t generator_param_count(const GeneratorParams& gen) {
    return numkit::param_count(gen.mlp);
}

inline constexpr std::uint16_t kGeneratorCheckpointVersion = 1;

struct GeneratorCheckpoint {
    GeneratorParams generator;
    std::uint64_t world_fingerprint = 0;
    std::uint64_t config_fingerprint = 0;
};

inline std::string generator_bytes(const GeneratorParams& gen) {
    io::ByteWriter bw;
    bw.u64(gen.m);
    bw.u64(gen.token_dim);
    clipcore::append_mlp(bw, gen.mlp);
    return bw.str();
}

inline void save_generator(const std::string& path, const GeneratorParams& gen,
                           std::uint64_t world_fp, std::uint64_t config_fp) {
    gen.validate();
    io::ByteWriter bw;
    bw.magic("DPLG");
    bw.u16(kGeneratorCheckpointVersion);
    bw.u64(world_fp);
    bw.u64(config_fp);
    const std::string content = generator_bytes(gen);
    bw.u64(fnv1a(content));
    bw.bytes(content.data(), content.size());
    io::write_file_atomic(path, bw.str());
}

inline GeneratorCheckpoint load_generator(const std::string& path) {
    io::ByteReader br(io::read_file(path));
    br.expect_magic("DPLG", "generator checkpoint");
    const std::uint16_t version = br.u16();
    if (version != kGeneratorCheckpointVersion)
        throw IoError("unsupported generator checkpoint version " + std::to_string(version));
    GeneratorCheckpoint ck;
    ck.world_fingerprint = br.u64();
    ck.config_fingerprint = br.u64();
    const std::uint64_t content_hash = br.u64();
    const std::string content = br.rest();
    if (fnv1a(content) != content_hash)
        throw IoError("generator checkpoint content hash mismatch (corrupted file?)");
    io::ByteReader cr(content);
    ck.generator.m = cr.u64();
    ck.generator.token_dim = cr.u64();
    ck.generator.mlp = clipcore::read_mlp(cr);
    ck.generator.validate();
    return ck;
}

}  // namespace dpl::promptlab
