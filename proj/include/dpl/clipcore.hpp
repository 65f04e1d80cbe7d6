#pragma once

// Miniature dual-encoder: an image MLP and a text tower (token table +
// positional table + per-position MLP, mean-pooled) trained jointly with a
// symmetric contrastive loss, then frozen. Downstream code classifies by
// cosine similarity between image embeddings and class-prompt embeddings.

#include "dpl/common.hpp"
#include "dpl/io.hpp"
#include "dpl/numkit.hpp"
#include "dpl/worldgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace dpl::clipcore {

using numkit::Grads;
using numkit::Mat;
using numkit::MlpParams;
using numkit::Rng;
using numkit::Vec;
using worldgen::TokenSeq;

// Continuous token rows (one d_tok vector per position, positional not yet added).
using Rows = std::vector<Vec>;

struct EncoderConfig {
    std::size_t embed_dim = 16;
    std::size_t token_dim = 8;
    std::size_t image_hidden = 64;
    std::size_t text_hidden = 64;
    std::size_t max_len = 16;
    std::size_t steps = 5000;
    std::size_t batch_size = 32;
    double tau = 0.1;
    double lr = 0.05;
    double momentum = 0.9;
    std::uint64_t seed = 1;

    void validate() const {
        if (embed_dim < 2) throw ConfigError("embed_dim must be at least 2");
        if (token_dim < 1) throw ConfigError("token_dim must be at least 1");
        if (image_hidden < 1 || text_hidden < 1)
            throw ConfigError("encoder hidden widths must be positive");
        if (max_len < 2) throw ConfigError("max_len must be at least 2");
        if (tau <= 0.0) throw ConfigError("tau must be positive");
        if (lr <= 0.0) throw ConfigError("lr must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
        if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
    }
};

struct FrozenEncoders {
    MlpParams image_encoder;  // input_dim -> embed_dim
    Mat token_table;          // vocab x token_dim
    Mat positional;           // max_len x token_dim
    MlpParams text_mlp;       // token_dim -> embed_dim
    bool frozen = false;
    std::uint64_t fingerprint = 0;

    std::size_t embed_dim() const { return image_encoder.out_dim(); }
    std::size_t token_dim() const { return token_table.cols; }
    std::size_t input_dim() const { return image_encoder.in_dim(); }
    std::size_t max_len() const { return positional.rows; }
};

inline void append_mlp(io::ByteWriter& bw, const MlpParams& p) {
    bw.u64(p.layers.size());
    for (const auto& layer : p.layers) {
        bw.u64(layer.weight.rows);
        bw.u64(layer.weight.cols);
        for (double v : layer.weight.data) bw.f64(v);
        for (double v : layer.bias) bw.f64(v);
        bw.u8(static_cast<std::uint8_t>(layer.act));
    }
}

inline MlpParams read_mlp(io::ByteReader& br) {
    MlpParams p;
    const std::uint64_t n_layers = br.u64();
    if (n_layers > 64) throw IoError("implausible layer count in checkpoint");
    for (std::uint64_t i = 0; i < n_layers; ++i) {
        numkit::MlpLayer layer;
        const std::uint64_t rows = br.u64();
        const std::uint64_t cols = br.u64();
        if (rows == 0 || cols == 0 || rows * cols > (1u << 26))
            throw IoError("implausible layer shape in checkpoint");
        layer.weight = Mat(rows, cols);
        for (double& v : layer.weight.data) v = br.f64();
        layer.bias.resize(rows);
        for (double& v : layer.bias) v = br.f64();
        layer.act = static_cast<numkit::Activation>(br.u8());
        p.layers.push_back(std::move(layer));
    }
    p.validate();
    return p;
}

inline void append_mat(io::ByteWriter& bw, const Mat& m) {
    bw.u64(m.rows);
    bw.u64(m.cols);
    for (double v : m.data) bw.f64(v);
}

inline Mat read_mat(io::ByteReader& br) {
    const std::uint64_t rows = br.u64();
    const std::uint64_t cols = br.u64();
    if (rows == 0 || cols == 0 || rows * cols > (1u << 26))
        throw IoError("implausible matrix shape in checkpoint");
    Mat m(rows, cols);
    for (double& v : m.data) v = br.f64();
    return m;
}

// Content bytes cover the learned parameters only, not the frozen flag, so
// the fingerprint identifies the weights.
inline std::string encoders_bytes(const FrozenEncoders& enc) {
    io::ByteWriter bw;
    append_mlp(bw, enc.image_encoder);
    append_mat(bw, enc.token_table);
    append_mat(bw, enc.positional);
    append_mlp(bw, enc.text_mlp);
    return bw.str();
}

inline std::uint64_t encoders_fingerprint(const FrozenEncoders& enc) {
    return fnv1a(encoders_bytes(enc));
}

inline std::size_t encoder_param_count(const FrozenEncoders& enc) {
    return numkit::param_count(enc.image_encoder) + numkit::param_count(enc.text_mlp) +
           enc.token_table.data.size() + enc.positional.data.size();
}

inline Vec image_encode(const FrozenEncoders& enc, const Vec& x) {
    return numkit::mlp_forward(enc.image_encoder, x).first;
}

struct TextTape {
    std::vector<numkit::MlpTape> mlp_tapes;
};

// y = (1/L) * sum_i text_mlp(rows[i] + positional[i]). Averaging the
// per-position MLP outputs keeps the encoder order-sensitive: swapping two
// distinct tokens moves them to different positional offsets before the
// nonlinearity, so the pooled output changes.
inline Vec text_encode_rows(const FrozenEncoders& enc, const Rows& rows,
                            TextTape* tape = nullptr) {
    if (rows.empty()) throw LengthError("empty token sequence");
    if (rows.size() > enc.max_len())
        throw LengthError("token sequence longer than positional table (" +
                          std::to_string(rows.size()) + " > " +
                          std::to_string(enc.max_len()) + ")");
    Vec out(enc.embed_dim(), 0.0);
    const double inv = 1.0 / double(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != enc.token_dim())
            throw ShapeError("token row dimension mismatch");
        Vec z = numkit::add(rows[i], enc.positional.row_vec(i));
        auto [y, t] = numkit::mlp_forward(enc.text_mlp, z);
        numkit::axpy(out, inv, y);
        if (tape) tape->mlp_tapes.push_back(std::move(t));
    }
    return out;
}

// Backward through text_encode_rows. Returns gradients for the input rows;
// optionally accumulates text_mlp parameter gradients and positional-table
// gradients (both used only during pretraining).
inline Rows text_encode_backward(const FrozenEncoders& enc, const TextTape& tape,
                                 const Vec& dy, Grads* text_grads = nullptr,
                                 Mat* pos_grad = nullptr) {
    const std::size_t len = tape.mlp_tapes.size();
    if (len == 0) throw ContractError("text tape is empty");
    const double inv = 1.0 / double(len);
    Vec dout = numkit::scaled(dy, inv);
    Rows drows;
    drows.reserve(len);
    for (std::size_t i = 0; i < len; ++i) {
        auto [g, dz] = numkit::mlp_backward(enc.text_mlp, tape.mlp_tapes[i], dout);
        if (text_grads) text_grads->add_scaled(g, 1.0);
        if (pos_grad)
            for (std::size_t k = 0; k < dz.size(); ++k) pos_grad->at(i, k) += dz[k];
        drows.push_back(std::move(dz));
    }
    return drows;
}

inline Rows token_rows(const FrozenEncoders& enc, const TokenSeq& tokens) {
    Rows rows;
    rows.reserve(tokens.size());
    for (std::size_t t : tokens) {
        if (t >= enc.token_table.rows) throw IndexError("token id outside vocabulary");
        rows.push_back(enc.token_table.row_vec(t));
    }
    return rows;
}

inline Vec text_encode(const FrozenEncoders& enc, const TokenSeq& tokens,
                       TextTape* tape = nullptr) {
    return text_encode_rows(enc, token_rows(enc, tokens), tape);
}

struct ClassPrompt {
    std::size_t class_id = 0;
    Rows tokens;
    Vec embedding;
};

enum class PromptStyle { Template, BareClass };

inline std::vector<ClassPrompt> make_class_prompts(const FrozenEncoders& enc,
                                                   const worldgen::WorldSpec& world,
                                                   PromptStyle style) {
    std::vector<ClassPrompt> prompts;
    for (std::size_t c = 0; c < world.num_classes(); ++c) {
        ClassPrompt p;
        p.class_id = c;
        TokenSeq seq = style == PromptStyle::Template
                           ? worldgen::make_caption(world, c)
                           : TokenSeq{world.vocab.class_token(c)};
        p.tokens = token_rows(enc, seq);
        p.embedding = text_encode_rows(enc, p.tokens);
        prompts.push_back(std::move(p));
    }
    return prompts;
}

inline void validate_prompt_cover(const std::vector<ClassPrompt>& prompts) {
    if (prompts.size() < 2) throw ContractError("need at least 2 class prompts");
    std::vector<bool> seen(prompts.size(), false);
    for (const ClassPrompt& p : prompts) {
        if (p.class_id >= prompts.size() || seen[p.class_id])
            throw ContractError("class prompts must cover 0..K-1 exactly once");
        seen[p.class_id] = true;
    }
}

// Cosine argmax over prompt embeddings; exact ties go to the lowest class id.
inline std::size_t zero_shot_predict_embedded(const std::vector<ClassPrompt>& prompts,
                                              const Vec& img_emb) {
    validate_prompt_cover(prompts);
    if (numkit::norm(img_emb) == 0.0) throw DomainError("zero-norm image embedding");
    std::vector<const ClassPrompt*> by_class(prompts.size(), nullptr);
    for (const ClassPrompt& p : prompts) by_class[p.class_id] = &p;
    std::size_t best = 0;
    double best_cos = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        const double s = numkit::cosine_similarity(img_emb, by_class[c]->embedding);
        if (s > best_cos) {
            best_cos = s;
            best = c;
        }
    }
    return best;
}

inline std::size_t zero_shot_predict(const FrozenEncoders& enc,
                                     const std::vector<ClassPrompt>& prompts, const Vec& x) {
    return zero_shot_predict_embedded(prompts, image_encode(enc, x));
}

inline double zero_shot_accuracy(const FrozenEncoders& enc,
                                 const std::vector<ClassPrompt>& prompts,
                                 const worldgen::DomainDataset& ds) {
    if (ds.samples.empty()) throw ContractError("empty dataset");
    std::size_t hits = 0;
    for (const auto& s : ds.samples)
        if (zero_shot_predict(enc, prompts, s.x) == s.y) ++hits;
    return double(hits) / double(ds.samples.size());
}

struct InfoNceResult {
    double loss = 0.0;
    std::vector<Vec> dimg;
    std::vector<Vec> dtxt;
};

// loss = 1/2 (mean over rows of CE + mean over columns of CE) on the B x B
// matrix of cosine similarities divided by tau; the diagonal is the target.
inline InfoNceResult info_nce_loss(const std::vector<Vec>& img_embs,
                                   const std::vector<Vec>& txt_embs, double tau) {
    if (tau <= 0.0) throw ConfigError("tau must be positive");
    if (img_embs.size() != txt_embs.size())
        throw ShapeError("contrastive batch lists must have equal length");
    const std::size_t b = img_embs.size();
    if (b < 2) throw ContractError("contrastive batch needs at least 2 pairs");

    Mat sim(b, b);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j)
            sim.at(i, j) = numkit::cosine_similarity(img_embs[i], txt_embs[j]) / tau;

    InfoNceResult res;
    Mat dsim(b, b);
    for (std::size_t i = 0; i < b; ++i) {
        auto ce = numkit::softmax_cross_entropy(sim.row_vec(i), i);
        res.loss += ce.loss / (2.0 * double(b));
        for (std::size_t j = 0; j < b; ++j)
            dsim.at(i, j) += ce.dlogits[j] / (2.0 * double(b));
    }
    for (std::size_t j = 0; j < b; ++j) {
        Vec col(b);
        for (std::size_t i = 0; i < b; ++i) col[i] = sim.at(i, j);
        auto ce = numkit::softmax_cross_entropy(col, j);
        res.loss += ce.loss / (2.0 * double(b));
        for (std::size_t i = 0; i < b; ++i)
            dsim.at(i, j) += ce.dlogits[i] / (2.0 * double(b));
    }

    res.dimg.assign(b, Vec(img_embs[0].size(), 0.0));
    res.dtxt.assign(b, Vec(txt_embs[0].size(), 0.0));
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j)
            numkit::cosine_similarity_backward(img_embs[i], txt_embs[j],
                                               dsim.at(i, j) / tau, res.dimg[i],
                                               res.dtxt[j]);
    return res;
}

inline FrozenEncoders init_encoders(const worldgen::WorldSpec& world,
                                    const EncoderConfig& cfg) {
    cfg.validate();
    FrozenEncoders enc;
    Rng img_rng(cfg.seed, numkit::stream_id("init_img"));
    enc.image_encoder =
        numkit::make_mlp({world.input_dim(), cfg.image_hidden, cfg.embed_dim}, img_rng);
    Rng txt_rng(cfg.seed, numkit::stream_id("init_txt"));
    enc.text_mlp = numkit::make_mlp({cfg.token_dim, cfg.text_hidden, cfg.embed_dim}, txt_rng);
    Rng tok_rng(cfg.seed, numkit::stream_id("init_tok"));
    enc.token_table = Mat(world.vocab.size(), cfg.token_dim);
    for (double& v : enc.token_table.data) v = tok_rng.normal(0.5);
    Rng pos_rng(cfg.seed, numkit::stream_id("init_pos"));
    enc.positional = Mat(cfg.max_len, cfg.token_dim);
    for (double& v : enc.positional.data) v = pos_rng.normal(0.25);
    return enc;
}

// Joint contrastive pretraining of both towers; the result is frozen. If
// loss_history is given it receives the per-step loss. Divergence raises
// NumericError naming the step.
inline FrozenEncoders pretrain(const worldgen::WorldSpec& world,
                               const std::vector<worldgen::CaptionedSample>& corpus,
                               const EncoderConfig& cfg, Vec* loss_history = nullptr) {
    cfg.validate();
    if (corpus.size() < cfg.batch_size)
        throw ContractError("corpus smaller than one batch");
    {
        std::vector<bool> class_seen(world.num_classes(), false);
        for (const auto& cs : corpus) {
            if (cs.caption.size() > cfg.max_len)
                throw LengthError("corpus caption exceeds max_len");
            for (std::size_t t : cs.caption)
                if (world.vocab.is_class_token(t))
                    class_seen[world.vocab.class_of_token(t)] = true;
        }
        std::size_t distinct = 0;
        for (bool s : class_seen) distinct += s;
        if (distinct < 2) throw ContractError("corpus must span at least 2 classes");
    }

    FrozenEncoders enc = init_encoders(world, cfg);
    auto img_opt = numkit::OptimizerState::create(enc.image_encoder, cfg.lr, cfg.momentum);
    auto txt_opt = numkit::OptimizerState::create(enc.text_mlp, cfg.lr, cfg.momentum);
    Mat tok_vel(enc.token_table.rows, enc.token_table.cols);
    Mat pos_vel(enc.positional.rows, enc.positional.cols);

    Rng batch_rng(cfg.seed, numkit::stream_id("pretrain_batch"));
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        // sample a batch without replacement
        for (std::size_t k = 0; k < cfg.batch_size; ++k)
            std::swap(order[k], order[k + batch_rng.index(order.size() - k)]);

        std::vector<Vec> img_embs, txt_embs;
        std::vector<numkit::MlpTape> img_tapes;
        std::vector<TextTape> txt_tapes;
        InfoNceResult nce;
        try {
            for (std::size_t k = 0; k < cfg.batch_size; ++k) {
                const auto& cs = corpus[order[k]];
                auto [iy, itape] = numkit::mlp_forward(enc.image_encoder, cs.x);
                img_embs.push_back(std::move(iy));
                img_tapes.push_back(std::move(itape));
                TextTape ttape;
                txt_embs.push_back(text_encode(enc, cs.caption, &ttape));
                txt_tapes.push_back(std::move(ttape));
            }
            nce = info_nce_loss(img_embs, txt_embs, cfg.tau);
            if (!std::isfinite(nce.loss)) throw NumericError("non-finite loss");
        } catch (const NumericError& e) {
            throw NumericError("pretraining diverged at step " + std::to_string(step) +
                               ": " + e.what());
        }
        if (loss_history) loss_history->push_back(nce.loss);

        Grads img_grads = Grads::zeros_like(enc.image_encoder);
        Grads txt_grads = Grads::zeros_like(enc.text_mlp);
        Mat tok_grad(enc.token_table.rows, enc.token_table.cols);
        Mat pos_grad(enc.positional.rows, enc.positional.cols);
        for (std::size_t k = 0; k < cfg.batch_size; ++k) {
            auto [gi, dx] = numkit::mlp_backward(enc.image_encoder, img_tapes[k], nce.dimg[k]);
            img_grads.add_scaled(gi, 1.0);
            Rows drows = text_encode_backward(enc, txt_tapes[k], nce.dtxt[k], &txt_grads,
                                              &pos_grad);
            const auto& caption = corpus[order[k]].caption;
            for (std::size_t i = 0; i < caption.size(); ++i)
                for (std::size_t c = 0; c < drows[i].size(); ++c)
                    tok_grad.at(caption[i], c) += drows[i][c];
        }

        numkit::sgd_momentum_step(enc.image_encoder, img_grads, img_opt);
        numkit::sgd_momentum_step(enc.text_mlp, txt_grads, txt_opt);
        for (std::size_t i = 0; i < enc.token_table.data.size(); ++i) {
            tok_vel.data[i] = cfg.momentum * tok_vel.data[i] + tok_grad.data[i];
            enc.token_table.data[i] -= cfg.lr * tok_vel.data[i];
        }
        for (std::size_t i = 0; i < enc.positional.data.size(); ++i) {
            pos_vel.data[i] = cfg.momentum * pos_vel.data[i] + pos_grad.data[i];
            enc.positional.data[i] -= cfg.lr * pos_vel.data[i];
        }
    }

    enc.frozen = true;
    enc.fingerprint = encoders_fingerprint(enc);
    return enc;
}

// Image -> caption retrieval over the distinct captions of the given pairs.
// A hit means the retrieved caption is literally the sample's caption, which
// sidesteps duplicate-caption ambiguity.
inline double retrieval_top1(const FrozenEncoders& enc,
                             const std::vector<worldgen::CaptionedSample>& pairs) {
    if (pairs.empty()) throw ContractError("empty retrieval set");
    std::map<TokenSeq, std::size_t> caption_index;
    std::vector<const TokenSeq*> captions;
    std::vector<Vec> caption_embs;
    for (const auto& cs : pairs) {
        if (caption_index.emplace(cs.caption, captions.size()).second) {
            captions.push_back(&cs.caption);
            caption_embs.push_back(text_encode(enc, cs.caption));
        }
    }
    std::size_t hits = 0;
    for (const auto& cs : pairs) {
        const Vec img = image_encode(enc, cs.x);
        std::size_t best = 0;
        double best_cos = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < caption_embs.size(); ++j) {
            const double s = numkit::cosine_similarity(img, caption_embs[j]);
            if (s > best_cos) {
                best_cos = s;
                best = j;
            }
        }
        if (*captions[best] == cs.caption) ++hits;
    }
    return double(hits) / double(pairs.size());
}

struct EmbeddingRow {
    std::size_t sample_index = 0;
    Vec embedding;
    std::uint32_t label = 0;
    std::uint32_t domain_id = 0;
};

struct EmbeddingTable {
    std::vector<EmbeddingRow> rows;
    std::size_t dim = 0;
};

inline EmbeddingTable embed_dataset(const FrozenEncoders& enc,
                                    const worldgen::DomainDataset& ds) {
    if (!enc.frozen) throw ContractError("encoders must be frozen before caching embeddings");
    EmbeddingTable table;
    table.dim = enc.embed_dim();
    table.rows.reserve(ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        EmbeddingRow row;
        row.sample_index = i;
        row.embedding = image_encode(enc, ds.samples[i].x);
        numkit::require_finite(row.embedding, "cached embedding");
        row.label = static_cast<std::uint32_t>(ds.samples[i].y);
        row.domain_id = static_cast<std::uint32_t>(ds.domain_id);
        table.rows.push_back(std::move(row));
    }
    return table;
}

// Cache file layout: "DPLC", u16 version, u64 rows, u64 dim, row-major
// little-endian f64 payload, then per-row (u32 label, u32 domain_id).
inline constexpr std::uint16_t kCacheVersion = 1;

inline std::string embedding_cache_bytes(const EmbeddingTable& table) {
    io::ByteWriter bw;
    bw.magic("DPLC");
    bw.u16(kCacheVersion);
    bw.u64(table.rows.size());
    bw.u64(table.dim);
    for (const auto& row : table.rows) {
        if (row.embedding.size() != table.dim)
            throw ShapeError("embedding row dimension mismatch");
        for (double v : row.embedding) bw.f64(v);
    }
    for (const auto& row : table.rows) {
        bw.u32(row.label);
        bw.u32(row.domain_id);
    }
    return bw.str();
}

inline void write_embedding_cache(const std::string& path, const EmbeddingTable& table) {
    io::write_file_atomic(path, embedding_cache_bytes(table));
}

inline EmbeddingTable read_embedding_cache(const std::string& path) {
    io::ByteReader br(io::read_file(path));
    br.expect_magic("DPLC", "embedding cache");
    const std::uint16_t version = br.u16();
    if (version != kCacheVersion)
        throw IoError("unsupported embedding cache version " + std::to_string(version));
    const std::uint64_t n = br.u64();
    const std::uint64_t dim = br.u64();
    if (dim == 0 || dim > (1u << 20) || n > (1u << 30))
        throw IoError("implausible embedding cache header");
    EmbeddingTable table;
    table.dim = dim;
    table.rows.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        table.rows[i].sample_index = i;
        table.rows[i].embedding.resize(dim);
        for (double& v : table.rows[i].embedding) v = br.f64();
    }
    for (std::uint64_t i = 0; i < n; ++i) {
        table.rows[i].label = br.u32();
        table.rows[i].domain_id = br.u32();
    }
    return table;
}

// Encoder checkpoint: "DPLE", version, provenance fingerprints, vocabulary
// layout, content hash, then the parameter payload. Loading verifies the
// content hash.
inline constexpr std::uint16_t kEncoderCheckpointVersion = 1;

struct EncoderCheckpoint {
    FrozenEncoders encoders;
    worldgen::Vocab vocab;
    std::uint64_t world_fingerprint = 0;
    std::uint64_t config_fingerprint = 0;
};

inline void save_encoders(const std::string& path, const FrozenEncoders& enc,
                          const worldgen::Vocab& vocab, std::uint64_t world_fp,
                          std::uint64_t config_fp) {
    if (!enc.frozen) throw ContractError("refusing to checkpoint unfrozen encoders");
    if (vocab.size() > enc.token_table.rows)
        throw ContractError("vocabulary does not fit the token table");
    io::ByteWriter bw;
    bw.magic("DPLE");
    bw.u16(kEncoderCheckpointVersion);
    bw.u64(world_fp);
    bw.u64(config_fp);
    // the vocabulary layout travels with the towers so prompts can be
    // rebuilt from the checkpoint alone
    bw.u64(vocab.num_template);
    bw.u64(vocab.num_classes);
    bw.u64(vocab.num_domains);
    const std::string content = encoders_bytes(enc);
    bw.u64(fnv1a(content));
    bw.bytes(content.data(), content.size());
    io::write_file_atomic(path, bw.str());
}

inline EncoderCheckpoint load_encoders(const std::string& path) {
    io::ByteReader br(io::read_file(path));
    br.expect_magic("DPLE", "encoder checkpoint");
    const std::uint16_t version = br.u16();
    if (version != kEncoderCheckpointVersion)
        throw IoError("unsupported encoder checkpoint version " + std::to_string(version));
    EncoderCheckpoint ck;
    ck.world_fingerprint = br.u64();
    ck.config_fingerprint = br.u64();
    ck.vocab.num_template = br.u64();
    ck.vocab.num_classes = br.u64();
    ck.vocab.num_domains = br.u64();
    const std::uint64_t content_hash = br.u64();
    const std::string content = br.rest();
    if (fnv1a(content) != content_hash)
        throw IoError("encoder checkpoint content hash mismatch (corrupted file?)");
    io::ByteReader cr(content);
    ck.encoders.image_encoder = read_mlp(cr);
    ck.encoders.token_table = read_mat(cr);
    ck.encoders.positional = read_mat(cr);
    ck.encoders.text_mlp = read_mlp(cr);
    ck.encoders.frozen = true;
    ck.encoders.fingerprint = content_hash;
    return ck;
}

}  // namespace dpl::clipcore
