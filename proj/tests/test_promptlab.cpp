#include "dpl/promptlab.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

using namespace dpl;
using namespace dpl::promptlab;

namespace {

worldgen::WorldSpec tiny_world() {
    worldgen::WorldConfig cfg;
    cfg.num_classes = 2;
    cfg.input_dim = 4;
    cfg.num_pretrain_domains = 2;
    cfg.num_benchmark_domains = 2;
    return worldgen::make_world(cfg, 5);
}

clipcore::EncoderConfig tiny_encoder_config() {
    clipcore::EncoderConfig cfg;
    cfg.embed_dim = 4;
    cfg.token_dim = 3;
    cfg.image_hidden = 6;
    cfg.text_hidden = 6;
    cfg.max_len = 6;
    cfg.batch_size = 4;
    cfg.steps = 0;
    cfg.seed = 7;
    return cfg;
}

clipcore::FrozenEncoders tiny_encoders() {
    auto enc = clipcore::init_encoders(tiny_world(), tiny_encoder_config());
    enc.frozen = true;
    enc.fingerprint = clipcore::encoders_fingerprint(enc);
    return enc;
}

DplConfig tiny_dpl_config() {
    DplConfig cfg;
    cfg.m = 2;
    cfg.hidden = 5;
    cfg.batch = 4;
    cfg.steps = 0;
    cfg.seed = 9;
    return cfg;
}

FeatureSet random_feature_set(std::size_t n, std::size_t dim, std::size_t k,
                              std::uint64_t seed) {
    numkit::Rng rng(seed);
    FeatureSet fs;
    for (std::size_t i = 0; i < n; ++i) {
        fs.features.push_back(rng.normal_vec(dim, 1.0));
        fs.labels.push_back(rng.index(k));
    }
    return fs;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST(Context, ReshapeRoundTrip) {
    Vec flat{1.0, 2.0, 3.0, 4.0, 5.0, 6.0};
    PromptContext ctx = context_from_flat(2, 3, flat);
    EXPECT_EQ(ctx.m(), 2u);
    EXPECT_EQ(ctx.token_dim(), 3u);
    EXPECT_EQ(context_flatten(ctx), flat);
    EXPECT_DOUBLE_EQ(ctx.tokens.at(1, 2), 6.0);
    EXPECT_THROW(context_from_flat(2, 4, flat), ShapeError);
    EXPECT_THROW(context_from_flat(0, 3, {}), ContractError);
    Vec bad{1.0, std::numeric_limits<double>::quiet_NaN()};
    EXPECT_THROW(context_from_flat(1, 2, bad), NumericError);
}

TEST(Generator, ValidationEnforcesThreeLayers) {
    auto enc = tiny_encoders();
    GeneratorParams gen = init_generator(enc, tiny_dpl_config());
    EXPECT_EQ(gen.mlp.layers.size(), 3u);
    EXPECT_EQ(gen.mlp.in_dim(), enc.embed_dim());
    EXPECT_EQ(gen.mlp.out_dim(), 2u * enc.token_dim());
    gen.validate();
    GeneratorParams two_layer = gen;
    two_layer.mlp.layers.pop_back();
    EXPECT_THROW(two_layer.validate(), Error);
    GeneratorParams wrong_m = gen;
    wrong_m.m = 3;
    EXPECT_THROW(wrong_m.validate(), ShapeError);
}

TEST(BuildPrompt, ContextThenClassToken) {
    auto enc = tiny_encoders();
    auto world = tiny_world();
    PromptContext ctx = context_from_flat(2, 3, {1, 2, 3, 4, 5, 6});
    Rows rows = build_class_prompt(enc, world.vocab, 0, ctx);
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0], (Vec{1, 2, 3}));
    EXPECT_EQ(rows[1], (Vec{4, 5, 6}));
    EXPECT_EQ(rows[2], enc.token_table.row_vec(world.vocab.class_token(0)));
    Rows other = build_class_prompt(enc, world.vocab, 1, ctx);
    EXPECT_EQ(other[0], rows[0]);
    EXPECT_EQ(other[1], rows[1]);
    EXPECT_NE(other[2], rows[2]);
}

TEST(BuildPrompt, ZeroContextDiffersFromTemplate) {
    auto enc = tiny_encoders();
    auto world = tiny_world();
    PromptContext zero = context_from_flat(3, 3, Vec(9, 0.0));
    Rows with_zero = build_class_prompt(enc, world.vocab, 0, zero);
    Rows tmpl = clipcore::token_rows(enc, worldgen::make_caption(world, 0));
    ASSERT_EQ(with_zero.size(), tmpl.size());
    bool differs = false;
    for (std::size_t i = 0; i < tmpl.size(); ++i)
        if (with_zero[i] != tmpl[i]) differs = true;
    EXPECT_TRUE(differs);
}

TEST(DplGenerate, SingleSampleIsPlainReshape) {
    auto enc = tiny_encoders();
    GeneratorParams gen = init_generator(enc, tiny_dpl_config());
    numkit::Rng rng(2);
    Vec f = rng.normal_vec(enc.embed_dim(), 1.0);
    DomainPrompt p = dpl_generate(gen, {f});
    Vec direct = numkit::mlp_forward(gen.mlp, f).first;
    EXPECT_EQ(context_flatten(p.context), direct);
    EXPECT_EQ(p.batch_size_used, 1u);
}

TEST(DplGenerate, MatchesBruteForceMean) {
    auto enc = tiny_encoders();
    GeneratorParams gen = init_generator(enc, tiny_dpl_config());
    numkit::Rng rng(3);
    std::vector<Vec> batch;
    for (int i = 0; i < 5; ++i) batch.push_back(rng.normal_vec(enc.embed_dim(), 1.0));
    DomainPrompt p = dpl_generate(gen, batch);
    Vec mean(gen.mlp.out_dim(), 0.0);
    for (const Vec& f : batch)
        numkit::axpy(mean, 0.2, numkit::mlp_forward(gen.mlp, f).first);
    Vec got = context_flatten(p.context);
    for (std::size_t i = 0; i < mean.size(); ++i) EXPECT_NEAR(got[i], mean[i], 1e-12);
}

TEST(DplGenerate, PermutationAndReplicationInvariance) {
    auto enc = tiny_encoders();
    GeneratorParams gen = init_generator(enc, tiny_dpl_config());
    numkit::Rng rng(4);
    std::vector<Vec> batch;
    for (int i = 0; i < 7; ++i) batch.push_back(rng.normal_vec(enc.embed_dim(), 1.0));
    Vec base = context_flatten(dpl_generate(gen, batch).context);
    std::vector<Vec> shuffled = batch;
    std::reverse(shuffled.begin(), shuffled.end());
    Vec perm = context_flatten(dpl_generate(gen, shuffled).context);
    std::vector<Vec> doubled = batch;
    doubled.insert(doubled.end(), batch.begin(), batch.end());
    Vec repl = context_flatten(dpl_generate(gen, doubled).context);
    for (std::size_t i = 0; i < base.size(); ++i) {
        EXPECT_NEAR(perm[i], base[i], 1e-12);
        EXPECT_NEAR(repl[i], base[i], 1e-12);
    }
    EXPECT_THROW(dpl_generate(gen, {}), ContractError);
}

TEST(DplGenerate, ConvergesWithGrowingBatch) {
    auto world = tiny_world();
    auto enc = tiny_encoders();
    GeneratorParams gen = init_generator(enc, tiny_dpl_config());
    std::size_t wins = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        auto draw = [&](std::size_t n) {
            auto ds = worldgen::sample_domain_dataset(world, 2, n, seed * 1000 + n);
            std::vector<Vec> feats;
            for (const auto& s : ds.samples)
                feats.push_back(clipcore::image_encode(enc, s.x));
            return context_flatten(dpl_generate(gen, feats).context);
        };
        Vec ref = draw(1024);
        Vec small = draw(4);
        Vec large = draw(256);
        double small_err = 0.0, large_err = 0.0;
        for (std::size_t i = 0; i < ref.size(); ++i) {
            small_err += (small[i] - ref[i]) * (small[i] - ref[i]);
            large_err += (large[i] - ref[i]) * (large[i] - ref[i]);
        }
        if (large_err < small_err) ++wins;
    }
    EXPECT_GE(wins, 8u);
}

TEST(ContextLoss, HandComposedTinyCase) {
    auto enc = tiny_encoders();
    auto world = tiny_world();
    GeneratorParams gen = init_generator(enc, tiny_dpl_config());
    numkit::Rng rng(6);
    Vec f = rng.normal_vec(enc.embed_dim(), 1.0);
    SourceBatch batch;
    batch.features = {f};
    batch.labels = {1};
    DplLossResult r = dpl_loss_and_grad(gen, enc, world.vocab, {batch});

    // manual composition: generate, build prompts, encode, cosine, CE
    DomainPrompt p = dpl_generate(gen, {f});
    Vec logits(2);
    for (std::size_t c = 0; c < 2; ++c) {
        Rows rows = build_class_prompt(enc, world.vocab, c, p.context);
        logits[c] = numkit::cosine_similarity(f, clipcore::text_encode_rows(enc, rows));
    }
    auto ce = numkit::softmax_cross_entropy(logits, 1);
    EXPECT_NEAR(r.loss, ce.loss, 1e-12);
}

TEST(ContextLoss, GradientMatchesFiniteDifferences) {
    auto enc = tiny_encoders();
    auto world = tiny_world();
    FeatureSet data = random_feature_set(6, enc.embed_dim(), 2, 11);
    PromptContext ctx = init_context(enc, 2, 3);
    Vec flat = context_flatten(ctx);
    numkit::ScalarFn fn = [&](const Vec& theta) {
        PromptContext c = context_from_flat(2, enc.token_dim(), theta);
        ContextLossResult r =
            context_loss_and_grad(enc, world.vocab, c, data.features, data.labels);
        return numkit::EvalResult{r.loss, r.dcontext};
    };
    EXPECT_LT(numkit::grad_check(fn, flat, 1e-5), 1e-5);
}

TEST(DplLoss, GeneratorGradientMatchesFiniteDifferences) {
    auto enc = tiny_encoders();
    auto world = tiny_world();
    GeneratorParams gen = init_generator(enc, tiny_dpl_config());
    std::vector<SourceBatch> batches(2);
    numkit::Rng rng(13);
    for (auto& b : batches) {
        for (int j = 0; j < 3; ++j) {
            b.features.push_back(rng.normal_vec(enc.embed_dim(), 1.0));
            b.labels.push_back(rng.index(2));
        }
    }
    Vec flat = numkit::flatten(gen.mlp);
    numkit::ScalarFn fn = [&](const Vec& theta) {
        GeneratorParams g = gen;
        numkit::unflatten_into(g.mlp, theta);
        DplLossResult r = dpl_loss_and_grad(g, enc, world.vocab, batches);
        return numkit::EvalResult{r.loss, numkit::flatten(r.grads)};
    };
    EXPECT_LT(numkit::grad_check(fn, flat, 1e-5), 1e-5);
}

TEST(DplLoss, LabelOutOfRangeThrows) {
    auto enc = tiny_encoders();
    auto world = tiny_world();
    GeneratorParams gen = init_generator(enc, tiny_dpl_config());
    SourceBatch batch;
    batch.features = {Vec(enc.embed_dim(), 0.5)};
    batch.labels = {7};
    EXPECT_THROW(dpl_loss_and_grad(gen, enc, world.vocab, {batch}), IndexError);
    EXPECT_THROW(dpl_loss_and_grad(gen, enc, world.vocab, {}), ContractError);
}

TEST(CoopOptimize, ZeroStepsReturnsInitialization) {
    auto enc = tiny_encoders();
    auto world = tiny_world();
    FeatureSet data = random_feature_set(10, enc.embed_dim(), 2, 17);
    CoopConfig cfg;
    cfg.steps = 0;
    cfg.m = 2;
    cfg.seed = 21;
    PromptContext ctx = coop_optimize(enc, world.vocab, data, cfg);
    PromptContext init = init_context(enc, 2, 21);
    EXPECT_EQ(context_flatten(ctx), context_flatten(init));
}

TEST(CoopOptimize, LossImprovesOnSeparableToySet) {
    auto enc = tiny_encoders();
    auto world = tiny_world();
    // features drawn from the encoder's view of two classes in one domain
    auto ds = worldgen::sample_domain_dataset(tiny_world(), 0, 60, 31);
    FeatureSet data;
    for (const auto& s : ds.samples) {
        data.features.push_back(clipcore::image_encode(enc, s.x));
        data.labels.push_back(s.y);
    }
    CoopConfig cfg;
    cfg.steps = 200;
    cfg.batch = 16;
    cfg.lr = 0.05;
    cfg.m = 2;
    Vec history;
    PromptContext ctx = coop_optimize(enc, world.vocab, data, cfg, &history);
    ASSERT_EQ(history.size(), 200u);
    EXPECT_LT(history.back(), history.front());
    // encoders untouched
    EXPECT_EQ(clipcore::encoders_fingerprint(enc), enc.fingerprint);
    EXPECT_EQ(ctx.m(), 2u);
}

TEST(CoopOptimize, EncodersUntouchedByTraining) {
    auto enc = tiny_encoders();
    auto world = tiny_world();
    const std::uint64_t before = clipcore::encoders_fingerprint(enc);
    FeatureSet data = random_feature_set(20, enc.embed_dim(), 2, 23);
    CoopConfig cfg;
    cfg.steps = 50;
    cfg.m = 2;
    coop_optimize(enc, world.vocab, data, cfg);
    EXPECT_EQ(clipcore::encoders_fingerprint(enc), before);
}

TEST(DplTrain, ZeroStepsReturnsSeededInit) {
    auto enc = tiny_encoders();
    auto world = tiny_world();
    std::vector<FeatureSet> sources{random_feature_set(10, enc.embed_dim(), 2, 1),
                                    random_feature_set(10, enc.embed_dim(), 2, 2)};
    DplConfig cfg = tiny_dpl_config();
    GeneratorParams gen = dpl_train(enc, world.vocab, sources, cfg);
    GeneratorParams init = init_generator(enc, cfg);
    EXPECT_EQ(generator_bytes(gen), generator_bytes(init));
}

TEST(DplTrain, DeterministicAndFrozenEverythingElse) {
    auto enc = tiny_encoders();
    auto world = tiny_world();
    const std::uint64_t enc_before = clipcore::encoders_fingerprint(enc);
    std::vector<FeatureSet> sources{random_feature_set(20, enc.embed_dim(), 2, 1),
                                    random_feature_set(20, enc.embed_dim(), 2, 2)};
    DplConfig cfg = tiny_dpl_config();
    cfg.steps = 40;
    GeneratorParams a = dpl_train(enc, world.vocab, sources, cfg);
    GeneratorParams b = dpl_train(enc, world.vocab, sources, cfg);
    EXPECT_EQ(generator_bytes(a), generator_bytes(b));
    EXPECT_EQ(clipcore::encoders_fingerprint(enc), enc_before);
    std::vector<FeatureSet> one{sources[0]};
    EXPECT_THROW(dpl_train(enc, world.vocab, one, cfg), ContractError);
}

TEST(DplTrain, LossTrendsDownOnStructuredData) {
    auto world = tiny_world();
    auto corpus = worldgen::make_pretrain_corpus(world, 40, 0.25, 3);
    auto enc_cfg = tiny_encoder_config();
    enc_cfg.steps = 300;
    auto enc = clipcore::pretrain(world, corpus, enc_cfg);
    std::vector<FeatureSet> sources;
    for (std::size_t d : {0, 1}) {
        auto ds = worldgen::sample_domain_dataset(world, d, 40, 100 + d);
        sources.push_back(from_table(clipcore::embed_dataset(enc, ds)));
    }
    DplConfig cfg = tiny_dpl_config();
    cfg.steps = 300;
    cfg.lr = 0.05;
    Vec history;
    dpl_train(enc, world.vocab, sources, cfg, &history);
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 30; ++i) {
        first += history[i] / 30.0;
        last += history[history.size() - 1 - i] / 30.0;
    }
    EXPECT_LT(last, first);
}

TEST(DplPredict, SingleSampleCollapsesToZeroShotWithGeneratedContext) {
    auto enc = tiny_encoders();
    auto world = tiny_world();
    GeneratorParams gen = init_generator(enc, tiny_dpl_config());
    numkit::Rng rng(41);
    Vec x = rng.normal_vec(4, 1.0);
    auto preds = dpl_predict_batch(enc, gen, world.vocab, {x});
    ASSERT_EQ(preds.size(), 1u);
    Vec f = clipcore::image_encode(enc, x);
    DomainPrompt p = dpl_generate(gen, {f});
    auto prompts = prompts_from_context(enc, world.vocab, p.context);
    EXPECT_EQ(preds[0], clipcore::zero_shot_predict_embedded(prompts, f));
}

TEST(DplPredict, PermutingBatchPermutesPredictions) {
    auto enc = tiny_encoders();
    auto world = tiny_world();
    GeneratorParams gen = init_generator(enc, tiny_dpl_config());
    numkit::Rng rng(43);
    std::vector<Vec> batch;
    for (int i = 0; i < 9; ++i) batch.push_back(rng.normal_vec(4, 1.0));
    auto preds = dpl_predict_batch(enc, gen, world.vocab, batch);
    std::vector<Vec> rev(batch.rbegin(), batch.rend());
    auto rev_preds = dpl_predict_batch(enc, gen, world.vocab, rev);
    for (std::size_t i = 0; i < batch.size(); ++i)
        EXPECT_EQ(preds[i], rev_preds[batch.size() - 1 - i]);
    EXPECT_THROW(dpl_predict_batch(enc, gen, world.vocab, {}), ContractError);
}

TEST(DplPredict, BatchedAccuracyCoversRaggedTail) {
    auto enc = tiny_encoders();
    auto world = tiny_world();
    GeneratorParams gen = init_generator(enc, tiny_dpl_config());
    FeatureSet data = random_feature_set(10, enc.embed_dim(), 2, 51);
    const double acc = dpl_accuracy_batched(enc, gen, world.vocab, data, 4);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
}

TEST(GeneratorCheckpoint, RoundTrip) {
    auto enc = tiny_encoders();
    GeneratorParams gen = init_generator(enc, tiny_dpl_config());
    const std::string path = temp_path("dpl_gen_test.bin");
    save_generator(path, gen, 77, 88);
    GeneratorCheckpoint ck = load_generator(path);
    EXPECT_EQ(ck.world_fingerprint, 77u);
    EXPECT_EQ(ck.config_fingerprint, 88u);
    EXPECT_EQ(generator_bytes(ck.generator), generator_bytes(gen));
    std::string data = io::read_file(path);
    data[data.size() - 2] ^= 0x11;
    io::write_file_atomic(path, data);
    EXPECT_THROW(load_generator(path), IoError);
    std::filesystem::remove(path);
}

TEST(ParamBudget, GeneratorSmallerThanEncodersOnReference) {
    worldgen::WorldSpec world = worldgen::make_world(worldgen::WorldConfig{}, 1);
    clipcore::EncoderConfig enc_cfg;
    auto enc = clipcore::init_encoders(world, enc_cfg);
    enc.frozen = true;
    DplConfig gen_cfg;
    GeneratorParams gen = init_generator(enc, gen_cfg);
    EXPECT_LE(generator_param_count(gen), clipcore::encoder_param_count(enc));
}
