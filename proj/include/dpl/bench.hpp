#pragma once

// Leave-one-domain-out evaluation harness: random hyperparameter search,
// training-domain validation, ERM baselines, and mean/std result tables.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dpl/clipcore.hpp"
#include "dpl/common.hpp"
#include "dpl/numkit.hpp"
#include "dpl/promptlab.hpp"
#include "dpl/worldgen.hpp"

namespace dpl::bench {

using clipcore::FrozenEncoders;
using numkit::Mat;
using numkit::MlpParams;
using numkit::Rng;
using numkit::Vec;
using promptlab::FeatureSet;

enum class Method {
    ZeroShot,
    ZeroShotTemplate,
    Coop,
    Dpl,
    ErmFrozen,
    ErmFinetune,
};

inline const std::vector<std::pair<Method, std::string>>& method_names() {
    static const std::vector<std::pair<Method, std::string>> names = {
        {Method::ZeroShot, "zero_shot"},
        {Method::ZeroShotTemplate, "zero_shot_template"},
        {Method::Coop, "coop"},
        {Method::Dpl, "dpl"},
        {Method::ErmFrozen, "erm_frozen"},
        {Method::ErmFinetune, "erm_finetune"},
    };
    return names;
}

inline std::string method_name(Method m) {
    for (const auto& [tag, name] : method_names())
        if (tag == m) return name;
    throw DomainError("unknown method tag");
}

inline Method method_from_name(const std::string& name) {
    for (const auto& [tag, n] : method_names())
        if (n == name) return tag;
    throw ConfigError("unknown method name: " + name);
}

// Methods with nothing to train: the search collapses to one canonical trial.
inline bool is_zero_shot(Method m) {
    return m == Method::ZeroShot || m == Method::ZeroShotTemplate;
}

struct HyperParams {
    Method method = Method::ZeroShot;
    double lr = 0.01;
    double momentum = 0.9;
    std::size_t batch = 32;   // per-domain batch size N
    std::size_t steps = 1000;
    std::size_t m = 4;        // context length
    std::size_t hidden = 32;  // generator hidden width
    std::uint64_t train_seed = 1;

    void validate() const {
        if (lr <= 0.0) throw ConfigError("lr must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
        if (batch < 1 || steps < 1 || m < 1 || hidden < 1)
            throw ConfigError("counts must be positive");
    }
};

// Joint search distribution. Every field is drawn and recorded even when the
// method ignores it, so trial logs stay schema-stable. Zero-shot methods get
// the canonical defaults without consuming any randomness.
inline HyperParams sample_hparams(Rng& rng, Method method) {
    HyperParams hp;
    hp.method = method;
    if (is_zero_shot(method)) return hp;
    hp.lr = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    hp.momentum = rng.pick(std::vector<double>{0.0, 0.9});
    hp.batch = rng.pick(std::vector<std::size_t>{16, 32, 64});
    hp.steps = rng.pick(std::vector<std::size_t>{500, 1000, 2000});
    hp.m = rng.pick(std::vector<std::size_t>{2, 4, 8});
    hp.hidden = rng.pick(std::vector<std::size_t>{16, 32, 64});
    return hp;
}

struct TrialRecord {
    Method method = Method::ZeroShot;
    std::size_t held_out_domain = 0;
    std::uint64_t seed = 0;  // protocol seed, not the training stream
    std::size_t trial_index = 0;
    HyperParams hp;
    std::vector<double> val_accuracies;  // one per source domain, ascending id
    double val_mean = 0.0;
    double test_accuracy = -1.0;  // filled only for the selected trial
    bool selected = false;
    bool failed = false;
    std::string failure;
    double wall_ms = 0.0;  // console diagnostics only, never serialized
};

// ---------------------------------------------------------------------------
// ERM baselines

enum class ErmVariant { Frozen, Finetune };

// Pooled source training data in both representations; labels align with
// both vectors. The frozen probe consumes features, fine-tuning consumes raw
// inputs.
struct ErmTrainData {
    std::vector<Vec> features;
    std::vector<Vec> raw;
    std::vector<std::size_t> labels;
};

struct ErmModel {
    ErmVariant variant = ErmVariant::Frozen;
    MlpParams image_encoder;  // trained copy; only used by the finetune variant
    MlpParams head;           // linear embed_dim -> K

    std::size_t predict_feature(const Vec& f) const {
        if (variant != ErmVariant::Frozen)
            throw ContractError("feature-space prediction is only valid for the frozen probe");
        return argmax_logits(mlp_forward(head, f).first);
    }

    std::size_t predict(const FrozenEncoders& enc, const Vec& x) const {
        const Vec f = variant == ErmVariant::Frozen ? clipcore::image_encode(enc, x)
                                                    : mlp_forward(image_encoder, x).first;
        return argmax_logits(mlp_forward(head, f).first);
    }

private:
    static std::size_t argmax_logits(const Vec& logits) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.size(); ++c)
            if (logits[c] > logits[best]) best = c;
        return best;
    }
};

// Cross-entropy training of a linear head, optionally jointly with a
// trainable copy of the image encoder. The original encoders are never
// touched; the text tower plays no part.
inline ErmModel erm_train(const FrozenEncoders& enc, ErmVariant variant,
                          const ErmTrainData& data, std::size_t num_classes,
                          const HyperParams& hp) {
    hp.validate();
    if (!enc.frozen) throw ContractError("encoders must be frozen");
    if (num_classes < 2) throw ContractError("need at least 2 classes");
    if (data.labels.empty()) throw ContractError("empty training set");
    const bool finetune = variant == ErmVariant::Finetune;
    const auto& inputs = finetune ? data.raw : data.features;
    if (inputs.size() != data.labels.size())
        throw ShapeError("training inputs and labels disagree in length");

    ErmModel model;
    model.variant = variant;
    Rng init_rng(hp.train_seed, numkit::stream_id("erm_head"));
    model.head = numkit::make_mlp({enc.embed_dim(), num_classes}, init_rng);
    if (finetune) model.image_encoder = enc.image_encoder;

    auto head_opt = numkit::OptimizerState::create(model.head, hp.lr, hp.momentum);
    auto enc_opt = finetune
                       ? numkit::OptimizerState::create(model.image_encoder, hp.lr, hp.momentum)
                       : numkit::OptimizerState{};

    Rng batch_rng(hp.train_seed, numkit::stream_id("erm_batch"));
    std::vector<std::size_t> order(inputs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const std::size_t batch = std::min(hp.batch, inputs.size());

    for (std::size_t step = 0; step < hp.steps; ++step) {
        for (std::size_t b = 0; b < batch; ++b)
            std::swap(order[b], order[b + batch_rng.index(order.size() - b)]);
        numkit::Grads head_grads = numkit::Grads::zeros_like(model.head);
        numkit::Grads enc_grads =
            finetune ? numkit::Grads::zeros_like(model.image_encoder) : numkit::Grads{};
        try {
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t i = order[b];
                Vec feature;
                numkit::MlpTape enc_tape;
                if (finetune) {
                    auto [f, tape] = mlp_forward(model.image_encoder, inputs[i]);
                    feature = std::move(f);
                    enc_tape = std::move(tape);
                } else {
                    feature = inputs[i];
                }
                auto [logits, head_tape] = mlp_forward(model.head, feature);
                auto ce = numkit::softmax_cross_entropy(logits, data.labels[i]);
                Vec dout = ce.dlogits;
                for (double& v : dout) v /= double(batch);
                auto [dhead, dfeature] = numkit::mlp_backward(model.head, head_tape, dout);
                head_grads.add_scaled(dhead, 1.0);
                if (finetune) {
                    auto [denc, dx] = numkit::mlp_backward(model.image_encoder, enc_tape, dfeature);
                    enc_grads.add_scaled(denc, 1.0);
                    (void)dx;
                }
            }
        } catch (const NumericError& e) {
            throw NumericError("classifier training diverged at step " + std::to_string(step) +
                               ": " + e.what());
        }
        numkit::sgd_momentum_step(model.head, head_grads, head_opt);
        if (finetune) numkit::sgd_momentum_step(model.image_encoder, enc_grads, enc_opt);
    }
    return model;
}

// ---------------------------------------------------------------------------
// Protocol

struct ProtocolConfig {
    std::vector<Method> methods = {Method::ZeroShot,  Method::ZeroShotTemplate,
                                   Method::Coop,      Method::Dpl,
                                   Method::ErmFrozen, Method::ErmFinetune};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::size_t trials = 20;
    std::size_t samples_per_domain = 500;
    double split_fraction = 0.8;
    std::size_t eval_batch = 64;  // test-time batch size
    std::size_t jobs = 1;

    void validate() const {
        if (methods.empty()) throw ConfigError("no methods requested");
        for (std::size_t i = 0; i < methods.size(); ++i)
            for (std::size_t j = i + 1; j < methods.size(); ++j)
                if (methods[i] == methods[j]) throw ConfigError("duplicate method in protocol");
        if (seeds.empty()) throw ConfigError("seed list must be non-empty");
        if (trials < 1) throw ConfigError("trials must be positive");
        if (samples_per_domain < 5) throw ConfigError("samples_per_domain too small to split");
        if (split_fraction <= 0.0 || split_fraction >= 1.0)
            throw ConfigError("split_fraction must lie strictly between 0 and 1");
        if (eval_batch < 1) throw ConfigError("eval_batch must be positive");
        if (jobs < 1) throw ConfigError("jobs must be positive");
    }
};

struct TrialPlan {
    std::size_t scheduled = 0;  // methods x domains x seeds x trials
    std::size_t effective = 0;  // zero-shot groups collapse to one trial
};

inline TrialPlan plan_trials(const ProtocolConfig& protocol, std::size_t num_domains) {
    protocol.validate();
    TrialPlan plan;
    const std::size_t groups = num_domains * protocol.seeds.size();
    for (Method m : protocol.methods) {
        plan.scheduled += groups * protocol.trials;
        plan.effective += groups * (is_zero_shot(m) ? 1 : protocol.trials);
    }
    return plan;
}

// Benchmark datasets are fixed by the world seed alone; protocol seeds vary
// only splits and training randomness.
inline std::uint64_t domain_data_seed(const worldgen::WorldSpec& world, std::size_t domain_id) {
    return numkit::splitmix64(world.seed ^ numkit::stream_id("bench_data", domain_id));
}

inline std::uint64_t domain_split_seed(std::uint64_t protocol_seed, std::size_t domain_id) {
    return numkit::splitmix64(protocol_seed ^ numkit::stream_id("bench_split", domain_id));
}

struct DomainData {
    worldgen::DomainDataset full;
    FeatureSet full_features;
};

struct SplitData {
    worldgen::DomainDataset train_raw;
    worldgen::DomainDataset val_raw;
    FeatureSet train_feat;
    FeatureSet val_feat;
};

// Everything the trials read, prepared once and shared read-only afterwards.
struct BenchContext {
    const worldgen::WorldSpec* world = nullptr;
    const FrozenEncoders* enc = nullptr;
    ProtocolConfig protocol;
    std::map<std::size_t, DomainData> domains;
    std::map<std::pair<std::uint64_t, std::size_t>, SplitData> splits;

    const DomainData& domain(std::size_t id) const { return domains.at(id); }
    const SplitData& split(std::uint64_t seed, std::size_t id) const {
        return splits.at({seed, id});
    }
};

inline FeatureSet embed_features(const FrozenEncoders& enc, const worldgen::DomainDataset& ds) {
    FeatureSet fs;
    fs.features.reserve(ds.samples.size());
    fs.labels.reserve(ds.samples.size());
    for (const auto& s : ds.samples) {
        fs.features.push_back(clipcore::image_encode(enc, s.x));
        fs.labels.push_back(s.y);
    }
    return fs;
}

inline BenchContext make_bench_context(const worldgen::WorldSpec& world,
                                       const FrozenEncoders& enc,
                                       const ProtocolConfig& protocol) {
    protocol.validate();
    if (!enc.frozen) throw ContractError("encoders must be frozen before benchmarking");
    const auto bench_ids = world.benchmark_domain_ids();
    if (bench_ids.size() < 2) throw ContractError("need at least 2 benchmark domains");

    BenchContext ctx;
    ctx.world = &world;
    ctx.enc = &enc;
    ctx.protocol = protocol;
    for (std::size_t d : bench_ids) {
        DomainData dd;
        dd.full = worldgen::sample_domain_dataset(world, d, protocol.samples_per_domain,
                                                  domain_data_seed(world, d));
        dd.full_features = embed_features(enc, dd.full);
        for (std::uint64_t s : protocol.seeds) {
            auto [train, val] = worldgen::split_train_val(dd.full, protocol.split_fraction,
                                                          domain_split_seed(s, d));
            SplitData sd;
            sd.train_feat = embed_features(enc, train);
            sd.val_feat = embed_features(enc, val);
            sd.train_raw = std::move(train);
            sd.val_raw = std::move(val);
            ctx.splits.emplace(std::make_pair(s, d), std::move(sd));
        }
        ctx.domains.emplace(d, std::move(dd));
    }
    return ctx;
}

inline std::vector<std::size_t> source_domains(const worldgen::WorldSpec& world,
                                               std::size_t held_out) {
    std::vector<std::size_t> sources;
    bool found = false;
    for (std::size_t d : world.benchmark_domain_ids()) {
        if (d == held_out)
            found = true;
        else
            sources.push_back(d);
    }
    if (!found) throw DomainError("held-out domain is not a benchmark domain");
    if (sources.empty()) throw ContractError("no source domains remain");
    return sources;
}

// Per-trial randomness is keyed by (method, held-out domain, protocol seed,
// trial index), so execution order and parallelism cannot change results.
inline Rng trial_rng(Method method, std::size_t held_out, std::uint64_t protocol_seed,
                     std::size_t trial_index) {
    return Rng(protocol_seed,
               numkit::stream_id("trial_" + method_name(method), held_out, trial_index));
}

namespace detail {

inline double embedded_accuracy(const std::vector<clipcore::ClassPrompt>& prompts,
                                const FeatureSet& fs) {
    if (fs.size() == 0) throw ContractError("empty evaluation set");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < fs.size(); ++i)
        if (clipcore::zero_shot_predict_embedded(prompts, fs.features[i]) == fs.labels[i]) ++hits;
    return double(hits) / double(fs.size());
}

inline double erm_feature_accuracy(const ErmModel& model, const FeatureSet& fs) {
    if (fs.size() == 0) throw ContractError("empty evaluation set");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < fs.size(); ++i)
        if (model.predict_feature(fs.features[i]) == fs.labels[i]) ++hits;
    return double(hits) / double(fs.size());
}

inline double erm_raw_accuracy(const ErmModel& model, const FrozenEncoders& enc,
                               const worldgen::DomainDataset& ds) {
    if (ds.samples.empty()) throw ContractError("empty evaluation set");
    std::size_t hits = 0;
    for (const auto& s : ds.samples)
        if (model.predict(enc, s.x) == s.y) ++hits;
    return double(hits) / double(ds.samples.size());
}

}  // namespace detail

// A trial's outcome plus a deferred test-set evaluation. Keeping the test
// pass behind a closure makes the no-peeking property structural: selection
// runs before any target-domain number exists.
struct TrialResult {
    TrialRecord record;
    std::function<double()> evaluate_test;
    std::shared_ptr<promptlab::GeneratorParams> generator;  // Dpl trials only
};

inline TrialResult run_trial(const BenchContext& ctx, Method method, std::size_t held_out,
                             const HyperParams& hp, std::uint64_t protocol_seed,
                             std::size_t trial_index) {
    const auto start = std::chrono::steady_clock::now();
    const worldgen::WorldSpec& world = *ctx.world;
    const FrozenEncoders& enc = *ctx.enc;
    const auto sources = source_domains(world, held_out);

    TrialResult out;
    TrialRecord& rec = out.record;
    rec.method = method;
    rec.held_out_domain = held_out;
    rec.seed = protocol_seed;
    rec.trial_index = trial_index;
    rec.hp = hp;

    try {
        switch (method) {
            case Method::ZeroShot:
            case Method::ZeroShotTemplate: {
                auto prompts = clipcore::make_class_prompts(
                    enc, world,
                    method == Method::ZeroShot ? clipcore::PromptStyle::BareClass
                                               : clipcore::PromptStyle::Template);
                for (std::size_t s : sources)
                    rec.val_accuracies.push_back(
                        detail::embedded_accuracy(prompts, ctx.split(protocol_seed, s).val_feat));
                out.evaluate_test = [&ctx, held_out, prompts]() {
                    return detail::embedded_accuracy(prompts, ctx.domain(held_out).full_features);
                };
                break;
            }
            case Method::Coop: {
                FeatureSet pooled;
                for (std::size_t s : sources) {
                    const FeatureSet& fs = ctx.split(protocol_seed, s).train_feat;
                    pooled.features.insert(pooled.features.end(), fs.features.begin(),
                                           fs.features.end());
                    pooled.labels.insert(pooled.labels.end(), fs.labels.begin(), fs.labels.end());
                }
                promptlab::CoopConfig cfg;
                cfg.steps = hp.steps;
                cfg.batch = hp.batch;
                cfg.lr = hp.lr;
                cfg.momentum = hp.momentum;
                cfg.m = hp.m;
                cfg.seed = hp.train_seed;
                auto opt_ctx = promptlab::coop_optimize(enc, world.vocab, pooled, cfg);
                auto prompts = promptlab::prompts_from_context(enc, world.vocab, opt_ctx);
                for (std::size_t s : sources)
                    rec.val_accuracies.push_back(
                        detail::embedded_accuracy(prompts, ctx.split(protocol_seed, s).val_feat));
                out.evaluate_test = [&ctx, held_out, prompts]() {
                    return detail::embedded_accuracy(prompts, ctx.domain(held_out).full_features);
                };
                break;
            }
            case Method::Dpl: {
                std::vector<FeatureSet> train_sets;
                for (std::size_t s : sources)
                    train_sets.push_back(ctx.split(protocol_seed, s).train_feat);
                promptlab::DplConfig cfg;
                cfg.steps = hp.steps;
                cfg.batch = hp.batch;
                cfg.lr = hp.lr;
                cfg.momentum = hp.momentum;
                cfg.m = hp.m;
                cfg.hidden = hp.hidden;
                cfg.seed = hp.train_seed;
                auto gen = std::make_shared<promptlab::GeneratorParams>(
                    promptlab::dpl_train(enc, world.vocab, train_sets, cfg));
                for (std::size_t s : sources)
                    rec.val_accuracies.push_back(promptlab::dpl_accuracy_batched(
                        enc, *gen, world.vocab, ctx.split(protocol_seed, s).val_feat,
                        ctx.protocol.eval_batch));
                const std::size_t eval_batch = ctx.protocol.eval_batch;
                out.generator = gen;
                out.evaluate_test = [&ctx, held_out, gen, eval_batch]() {
                    return promptlab::dpl_accuracy_batched(*ctx.enc, *gen, ctx.world->vocab,
                                                           ctx.domain(held_out).full_features,
                                                           eval_batch);
                };
                break;
            }
            case Method::ErmFrozen:
            case Method::ErmFinetune: {
                const bool finetune = method == Method::ErmFinetune;
                ErmTrainData data;
                for (std::size_t s : sources) {
                    const SplitData& sd = ctx.split(protocol_seed, s);
                    data.features.insert(data.features.end(), sd.train_feat.features.begin(),
                                         sd.train_feat.features.end());
                    for (const auto& sample : sd.train_raw.samples) {
                        data.raw.push_back(sample.x);
                        data.labels.push_back(sample.y);
                    }
                }
                ErmModel model =
                    erm_train(enc, finetune ? ErmVariant::Finetune : ErmVariant::Frozen, data,
                              world.num_classes(), hp);
                for (std::size_t s : sources) {
                    const SplitData& sd = ctx.split(protocol_seed, s);
                    rec.val_accuracies.push_back(
                        finetune ? detail::erm_raw_accuracy(model, enc, sd.val_raw)
                                 : detail::erm_feature_accuracy(model, sd.val_feat));
                }
                out.evaluate_test = [&ctx, held_out, model, finetune]() {
                    return finetune
                               ? detail::erm_raw_accuracy(model, *ctx.enc,
                                                          ctx.domain(held_out).full)
                               : detail::erm_feature_accuracy(
                                     model, ctx.domain(held_out).full_features);
                };
                break;
            }
        }
        double sum = 0.0;
        for (double v : rec.val_accuracies) sum += v;
        rec.val_mean = rec.val_accuracies.empty() ? 0.0 : sum / double(rec.val_accuracies.size());
    } catch (const Error& e) {
        rec.failed = true;
        rec.failure = e.what();
        rec.val_accuracies.clear();
        rec.val_mean = 0.0;
        out.evaluate_test = nullptr;
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                            start)
                      .count();
    return out;
}

// Argmax of train-domain mean validation accuracy over the successful trials
// of one (method, held-out domain, seed) group; ties go to the earliest
// trial. Never reads test accuracy.
inline std::size_t select_model(const std::vector<TrialRecord>& records) {
    bool have = false;
    std::size_t best = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].failed) continue;
        if (!have || records[i].val_mean > records[best].val_mean) {
            best = i;
            have = true;
        }
    }
    if (!have) throw SelectionError("all trials failed; nothing to select");
    return best;
}

struct GroupResult {
    std::vector<TrialRecord> records;
    std::shared_ptr<promptlab::GeneratorParams> generator;  // of the chosen Dpl trial
};

// One (method, held-out, seed) group: sample, train, select, then evaluate
// the chosen trial on the held-out domain.
inline GroupResult run_group(const BenchContext& ctx, Method method, std::size_t held_out,
                             std::uint64_t protocol_seed) {
    const std::size_t n_trials = is_zero_shot(method) ? 1 : ctx.protocol.trials;
    GroupResult group;
    std::vector<std::function<double()>> evals;
    std::vector<std::shared_ptr<promptlab::GeneratorParams>> generators;
    group.records.reserve(n_trials);
    for (std::size_t t = 0; t < n_trials; ++t) {
        Rng rng = trial_rng(method, held_out, protocol_seed, t);
        HyperParams hp = sample_hparams(rng, method);
        hp.train_seed = rng.next_u64();
        TrialResult r = run_trial(ctx, method, held_out, hp, protocol_seed, t);
        group.records.push_back(std::move(r.record));
        evals.push_back(std::move(r.evaluate_test));
        generators.push_back(std::move(r.generator));
    }
    const std::size_t chosen = select_model(group.records);
    group.records[chosen].selected = true;
    group.records[chosen].test_accuracy = evals[chosen]();
    group.generator = generators[chosen];
    return group;
}

// ---------------------------------------------------------------------------
// Aggregation and reporting

struct CellStats {
    double mean = 0.0;
    double stddev = 0.0;  // population std over the protocol seed set
    std::vector<double> per_seed;
};

struct BenchmarkTable {
    std::vector<Method> methods;
    std::vector<std::size_t> domains;
    std::vector<std::uint64_t> seeds;
    std::map<std::pair<Method, std::size_t>, CellStats> cells;
    std::map<Method, double> averages;  // present only for complete rows
};

inline std::vector<std::pair<Method, std::size_t>> missing_cells(const BenchmarkTable& table) {
    std::vector<std::pair<Method, std::size_t>> missing;
    for (Method m : table.methods)
        for (std::size_t d : table.domains)
            if (!table.cells.count({m, d})) missing.push_back({m, d});
    return missing;
}

// Cells aggregate the selected trials' test accuracies over exactly the seed
// set; a cell with any seed missing stays absent and is surfaced by report().
inline BenchmarkTable aggregate_table(const std::vector<TrialRecord>& records,
                                      const std::vector<Method>& methods,
                                      const std::vector<std::size_t>& domains,
                                      const std::vector<std::uint64_t>& seeds) {
    BenchmarkTable table;
    table.methods = methods;
    table.domains = domains;
    table.seeds = seeds;
    for (Method m : methods) {
        bool row_complete = true;
        double row_sum = 0.0;
        for (std::size_t d : domains) {
            CellStats cell;
            bool complete = true;
            for (std::uint64_t s : seeds) {
                bool found = false;
                for (const TrialRecord& r : records) {
                    if (r.method == m && r.held_out_domain == d && r.seed == s && r.selected &&
                        !r.failed && r.test_accuracy >= 0.0) {
                        cell.per_seed.push_back(r.test_accuracy);
                        found = true;
                        break;
                    }
                }
                if (!found) {
                    complete = false;
                    break;
                }
            }
            if (!complete) {
                row_complete = false;
                continue;
            }
            double sum = 0.0;
            for (double v : cell.per_seed) sum += v;
            cell.mean = sum / double(cell.per_seed.size());
            double sq = 0.0;
            for (double v : cell.per_seed) sq += (v - cell.mean) * (v - cell.mean);
            cell.stddev = std::sqrt(sq / double(cell.per_seed.size()));
            row_sum += cell.mean;
            table.cells.emplace(std::make_pair(m, d), std::move(cell));
        }
        if (row_complete && !domains.empty())
            table.averages[m] = row_sum / double(domains.size());
    }
    return table;
}

struct BenchmarkRun {
    std::vector<TrialRecord> log;
    BenchmarkTable table;
    // selected generator per (held-out domain, seed), when Dpl was run
    std::map<std::pair<std::size_t, std::uint64_t>, promptlab::GeneratorParams> dpl_generators;
};

// Full protocol. Groups are independent; a jobs-wide pool pulls them off a
// deterministic task list and writes into preassigned slots, so the output
// is identical at any parallelism level.
inline BenchmarkRun leave_one_out_benchmark(const worldgen::WorldSpec& world,
                                            const FrozenEncoders& enc,
                                            const ProtocolConfig& protocol) {
    BenchContext ctx = make_bench_context(world, enc, protocol);
    const auto domains = world.benchmark_domain_ids();

    struct GroupKey {
        Method method;
        std::size_t held_out;
        std::uint64_t seed;
    };
    std::vector<GroupKey> groups;
    for (Method m : protocol.methods)
        for (std::size_t d : domains)
            for (std::uint64_t s : protocol.seeds) groups.push_back({m, d, s});

    std::vector<GroupResult> results(groups.size());
    std::vector<std::string> errors(groups.size());
    auto work = [&](std::size_t i) {
        const GroupKey& g = groups[i];
        try {
            results[i] = run_group(ctx, g.method, g.held_out, g.seed);
        } catch (const Error& e) {
            errors[i] = e.what();
        }
    };

    const std::size_t jobs = std::min(protocol.jobs, groups.size());
    if (jobs <= 1) {
        for (std::size_t i = 0; i < groups.size(); ++i) work(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(jobs);
        for (std::size_t t = 0; t < jobs; ++t)
            pool.emplace_back([&]() {
                for (std::size_t i = next.fetch_add(1); i < groups.size(); i = next.fetch_add(1))
                    work(i);
            });
        for (auto& th : pool) th.join();
    }

    BenchmarkRun run;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        if (!errors[i].empty()) {
            // A wholly failed group leaves its cell missing; record the
            // failure as a synthetic failed trial so the log explains it.
            TrialRecord rec;
            rec.method = groups[i].method;
            rec.held_out_domain = groups[i].held_out;
            rec.seed = groups[i].seed;
            rec.trial_index = 0;
            rec.hp.method = groups[i].method;
            rec.failed = true;
            rec.failure = errors[i];
            run.log.push_back(std::move(rec));
            continue;
        }
        if (groups[i].method == Method::Dpl && results[i].generator)
            run.dpl_generators.emplace(std::make_pair(groups[i].held_out, groups[i].seed),
                                       *results[i].generator);
        for (auto& rec : results[i].records) run.log.push_back(std::move(rec));
    }
    run.table = aggregate_table(run.log, protocol.methods, domains, protocol.seeds);
    return run;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json hparams_to_json(const HyperParams& hp) {
    return nlohmann::json{{"method", method_name(hp.method)},
                          {"lr", hp.lr},
                          {"momentum", hp.momentum},
                          {"batch", hp.batch},
                          {"steps", hp.steps},
                          {"m", hp.m},
                          {"hidden", hp.hidden},
                          {"train_seed", hp.train_seed}};
}

inline HyperParams hparams_from_json(const nlohmann::json& j) {
    HyperParams hp;
    hp.method = method_from_name(j.at("method").get<std::string>());
    hp.lr = j.at("lr").get<double>();
    hp.momentum = j.at("momentum").get<double>();
    hp.batch = j.at("batch").get<std::size_t>();
    hp.steps = j.at("steps").get<std::size_t>();
    hp.m = j.at("m").get<std::size_t>();
    hp.hidden = j.at("hidden").get<std::size_t>();
    hp.train_seed = j.at("train_seed").get<std::uint64_t>();
    return hp;
}

inline nlohmann::json trial_to_json(const TrialRecord& rec) {
    nlohmann::json j{{"method", method_name(rec.method)},
                     {"held_out_domain", rec.held_out_domain},
                     {"seed", rec.seed},
                     {"trial", rec.trial_index},
                     {"hp", hparams_to_json(rec.hp)},
                     {"val_accuracies", rec.val_accuracies},
                     {"val_mean", rec.val_mean},
                     {"selected", rec.selected},
                     {"failed", rec.failed}};
    if (rec.test_accuracy >= 0.0)
        j["test_accuracy"] = rec.test_accuracy;
    else
        j["test_accuracy"] = nullptr;
    if (rec.failed) j["failure"] = rec.failure;
    return j;
}

inline TrialRecord trial_from_json(const nlohmann::json& j) {
    TrialRecord rec;
    rec.method = method_from_name(j.at("method").get<std::string>());
    rec.held_out_domain = j.at("held_out_domain").get<std::size_t>();
    rec.seed = j.at("seed").get<std::uint64_t>();
    rec.trial_index = j.at("trial").get<std::size_t>();
    rec.hp = hparams_from_json(j.at("hp"));
    rec.val_accuracies = j.at("val_accuracies").get<std::vector<double>>();
    rec.val_mean = j.at("val_mean").get<double>();
    rec.selected = j.at("selected").get<bool>();
    rec.failed = j.at("failed").get<bool>();
    const auto& test = j.at("test_accuracy");
    rec.test_accuracy = test.is_null() ? -1.0 : test.get<double>();
    if (rec.failed) rec.failure = j.value("failure", "");
    return rec;
}

// One JSON record per line. Doubles round-trip exactly (shortest-repr
// printing), so a log re-read reaggregates to the identical table.
inline std::string trial_log_text(const std::vector<TrialRecord>& records) {
    std::string text;
    for (const TrialRecord& rec : records) {
        text += trial_to_json(rec).dump();
        text += '\n';
    }
    return text;
}

inline void write_trial_log(const std::string& path, const std::vector<TrialRecord>& records) {
    io::write_file_atomic(path, trial_log_text(records));
}

inline std::vector<TrialRecord> read_trial_log(const std::string& path) {
    const std::string text = io::read_file(path);
    std::vector<TrialRecord> records;
    std::size_t start = 0;
    std::size_t line_no = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        ++line_no;
        const std::string line = text.substr(start, end - start);
        start = end + 1;
        if (line.empty()) continue;
        try {
            records.push_back(trial_from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw IoError("trial log line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return records;
}

inline nlohmann::json table_to_json(const BenchmarkTable& table) {
    nlohmann::json j;
    j["methods"] = nlohmann::json::array();
    for (Method m : table.methods) j["methods"].push_back(method_name(m));
    j["domains"] = table.domains;
    j["seeds"] = table.seeds;
    j["cells"] = nlohmann::json::array();
    for (const auto& [key, cell] : table.cells)
        j["cells"].push_back(nlohmann::json{{"method", method_name(key.first)},
                                            {"domain", key.second},
                                            {"mean", cell.mean},
                                            {"std", cell.stddev},
                                            {"per_seed", cell.per_seed}});
    j["averages"] = nlohmann::json::object();
    for (const auto& [m, avg] : table.averages) j["averages"][method_name(m)] = avg;
    return j;
}

inline BenchmarkTable table_from_json(const nlohmann::json& j) {
    BenchmarkTable table;
    for (const auto& name : j.at("methods"))
        table.methods.push_back(method_from_name(name.get<std::string>()));
    table.domains = j.at("domains").get<std::vector<std::size_t>>();
    table.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& cj : j.at("cells")) {
        CellStats cell;
        cell.mean = cj.at("mean").get<double>();
        cell.stddev = cj.at("std").get<double>();
        cell.per_seed = cj.at("per_seed").get<std::vector<double>>();
        table.cells.emplace(std::make_pair(method_from_name(cj.at("method").get<std::string>()),
                                           cj.at("domain").get<std::size_t>()),
                            std::move(cell));
    }
    for (const auto& [name, avg] : j.at("averages").items())
        table.averages[method_from_name(name)] = avg.get<double>();
    return table;
}

// Accuracy fraction -> percent with one decimal, half away from zero:
// 0.8425 -> "84.3".
inline std::string format_percent(double fraction) {
    const long long r = std::llround(fraction * 1000.0);
    return std::to_string(r / 10) + "." + std::to_string(std::llabs(r) % 10);
}

inline std::string format_mean_std(double mean, double stddev) {
    return format_percent(mean) + " ± " + format_percent(stddev);
}

inline void require_complete(const BenchmarkTable& table) {
    const auto missing = missing_cells(table);
    if (missing.empty()) return;
    std::string msg = "benchmark table incomplete; missing cells:";
    for (const auto& [m, d] : missing)
        msg += " (" + method_name(m) + ", domain " + std::to_string(d) + ")";
    throw ReportError(msg);
}

// Column order is fixed: method, one column per held-out domain, average.
inline std::string render_csv(const BenchmarkTable& table) {
    require_complete(table);
    std::string out = "method";
    for (std::size_t d : table.domains) out += ",domain_" + std::to_string(d);
    out += ",average\n";
    for (Method m : table.methods) {
        out += method_name(m);
        for (std::size_t d : table.domains) {
            const CellStats& cell = table.cells.at({m, d});
            out += "," + format_mean_std(cell.mean, cell.stddev);
        }
        out += "," + format_percent(table.averages.at(m)) + "\n";
    }
    return out;
}

inline std::string render_json(const BenchmarkTable& table) {
    require_complete(table);
    return table_to_json(table).dump(2) + "\n";
}

}  // namespace dpl::bench
