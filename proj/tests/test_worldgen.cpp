#include "dpl/worldgen.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace dpl;
using namespace dpl::worldgen;

namespace {

WorldConfig reference_config() { return WorldConfig{}; }

WorldConfig identity_config() {
    WorldConfig cfg;
    cfg.num_classes = 4;
    cfg.input_dim = 6;
    cfg.num_pretrain_domains = 2;
    cfg.num_benchmark_domains = 0;
    cfg.noise_sigma = 0.0;
    cfg.pretrain_rotation = 0.0;
    cfg.pretrain_offset = 0.0;
    return cfg;
}

}  // namespace

TEST(MakeWorld, ReferenceShape) {
    WorldSpec w = make_world(reference_config(), 17);
    EXPECT_EQ(w.num_classes(), 8u);
    EXPECT_EQ(w.input_dim(), 16u);
    EXPECT_EQ(w.num_domains(), 14u);
    EXPECT_EQ(w.benchmark_domain_ids().size(), 4u);
    EXPECT_EQ(w.pool_domain_ids().size(), 10u);
    EXPECT_EQ(w.vocab.size(), 3u + 8u + 14u);
    for (const Vec& p : w.class_prototypes) EXPECT_NEAR(numkit::norm(p), 1.0, 1e-12);
}

TEST(MakeWorld, DeterministicBytes) {
    WorldSpec a = make_world(reference_config(), 17);
    WorldSpec b = make_world(reference_config(), 17);
    EXPECT_EQ(world_bytes(a), world_bytes(b));
    WorldSpec c = make_world(reference_config(), 18);
    EXPECT_NE(world_bytes(a), world_bytes(c));
    EXPECT_NE(world_fingerprint(a), world_fingerprint(c));
}

TEST(MakeWorld, MinimalWorld) {
    WorldConfig cfg;
    cfg.num_classes = 2;
    cfg.input_dim = 2;
    cfg.num_pretrain_domains = 2;
    cfg.num_benchmark_domains = 0;
    WorldSpec w = make_world(cfg, 1);
    EXPECT_EQ(w.num_domains(), 2u);
}

TEST(MakeWorld, RejectsInfeasibleConfigs) {
    WorldConfig cfg = reference_config();
    cfg.num_classes = 1;
    EXPECT_THROW(make_world(cfg, 1), ConfigError);
    cfg = reference_config();
    cfg.num_classes = 300;
    EXPECT_THROW(make_world(cfg, 1), ConfigError);  // vocab capacity
    cfg = reference_config();
    cfg.num_pretrain_domains = 1;
    cfg.num_benchmark_domains = 0;
    EXPECT_THROW(make_world(cfg, 1), ConfigError);
    cfg = reference_config();
    cfg.noise_sigma = -0.1;
    EXPECT_THROW(make_world(cfg, 1), ConfigError);
}

TEST(MakeWorld, RotationsOrthogonal) {
    WorldSpec w = make_world(reference_config(), 99);
    for (const DomainTransform& t : w.domains)
        EXPECT_LT(orthogonality_defect(t.rotation), 1e-10);
}

TEST(MakeWorld, ZeroStrengthRotationIsIdentity) {
    WorldSpec w = make_world(identity_config(), 5);
    for (const DomainTransform& t : w.domains) {
        EXPECT_EQ(t.rotation, Mat::identity(6));
        for (double v : t.offset) EXPECT_DOUBLE_EQ(v, 0.0);
    }
}

TEST(MakeWorld, PrototypesDistinct) {
    WorldSpec w = make_world(reference_config(), 3);
    double min_dist = 1e9;
    for (std::size_t a = 0; a < w.num_classes(); ++a)
        for (std::size_t b = a + 1; b < w.num_classes(); ++b) {
            Vec d = numkit::add(w.class_prototypes[a],
                                numkit::scaled(w.class_prototypes[b], -1.0));
            min_dist = std::min(min_dist, numkit::norm(d));
        }
    EXPECT_GT(min_dist, 0.1);
}

TEST(SampleDataset, NoiselessIdentityHitsPrototypes) {
    WorldSpec w = make_world(identity_config(), 5);
    DomainDataset ds = sample_domain_dataset(w, 0, 50, 123);
    for (const Sample& s : ds.samples) EXPECT_EQ(s.x, w.class_prototypes[s.y]);
}

TEST(SampleDataset, LabelHistogramWithinMultinomialBounds) {
    WorldSpec w = make_world(reference_config(), 7);
    DomainDataset ds = sample_domain_dataset(w, 0, 100, 42);
    std::vector<int> counts(w.num_classes(), 0);
    for (const Sample& s : ds.samples) {
        ASSERT_LT(s.y, w.num_classes());
        ++counts[s.y];
    }
    const double expect = 100.0 / 8.0;
    const double sigma = std::sqrt(100.0 * (1.0 / 8.0) * (7.0 / 8.0));
    for (int c : counts) EXPECT_LE(std::abs(c - expect), 4.0 * sigma);
}

TEST(SampleDataset, CommonRandomNumbersAcrossDomains) {
    WorldSpec w = make_world(reference_config(), 11);
    DomainDataset a = sample_domain_dataset(w, 0, 64, 500);
    DomainDataset b = sample_domain_dataset(w, 3, 64, 500);
    bool any_x_differs = false;
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        EXPECT_EQ(a.samples[i].y, b.samples[i].y);
        // recover the shared pre-transform noise from each domain
        const auto& ta = w.domains[0];
        const auto& tb = w.domains[3];
        Vec ea = numkit::matvec_t(
            ta.rotation, numkit::add(a.samples[i].x, numkit::scaled(ta.offset, -1.0)));
        Vec eb = numkit::matvec_t(
            tb.rotation, numkit::add(b.samples[i].x, numkit::scaled(tb.offset, -1.0)));
        for (std::size_t k = 0; k < ea.size(); ++k) EXPECT_NEAR(ea[k], eb[k], 1e-12);
        if (a.samples[i].x != b.samples[i].x) any_x_differs = true;
    }
    EXPECT_TRUE(any_x_differs);
}

TEST(SampleDataset, Errors) {
    WorldSpec w = make_world(reference_config(), 1);
    EXPECT_THROW(sample_domain_dataset(w, 14, 10, 1), IndexError);
    EXPECT_THROW(sample_domain_dataset(w, 0, 0, 1), ContractError);
}

TEST(Caption, TemplateArity) {
    WorldSpec w = make_world(reference_config(), 1);
    TokenSeq seq = make_caption(w, 3);
    ASSERT_EQ(seq.size(), 4u);
    EXPECT_EQ(seq[0], w.vocab.template_token(0));
    EXPECT_EQ(seq[1], w.vocab.template_token(1));
    EXPECT_EQ(seq[2], w.vocab.template_token(2));
    EXPECT_EQ(seq[3], w.vocab.class_token(3));
}

TEST(Caption, DomainsDifferOnlyInAttribute) {
    WorldSpec w = make_world(reference_config(), 1);
    TokenSeq a = make_caption(w, 2, 0);
    TokenSeq b = make_caption(w, 2, 5);
    ASSERT_EQ(a.size(), 5u);
    ASSERT_EQ(b.size(), 5u);
    for (std::size_t i = 0; i + 1 < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
    EXPECT_NE(a.back(), b.back());
}

TEST(Caption, OutOfRangeThrows) {
    WorldSpec w = make_world(reference_config(), 1);
    EXPECT_THROW(make_caption(w, 8), IndexError);
    EXPECT_THROW(make_caption(w, 0, 14), IndexError);
}

TEST(Corpus, CoversEveryClassToken) {
    WorldSpec w = make_world(reference_config(), 9);
    auto corpus = make_pretrain_corpus(w, 20, 0.25, 77);
    EXPECT_EQ(corpus.size(), 10u * 20u);
    std::set<std::size_t> seen;
    for (const CaptionedSample& cs : corpus) {
        std::size_t class_tokens = 0;
        for (std::size_t t : cs.caption)
            if (w.vocab.is_class_token(t)) {
                ++class_tokens;
                seen.insert(w.vocab.class_of_token(t));
            }
        EXPECT_EQ(class_tokens, 1u);
    }
    EXPECT_EQ(seen.size(), w.num_classes());
}

TEST(Corpus, AttrDropoutProducesBareCaptions) {
    WorldSpec w = make_world(reference_config(), 9);
    auto corpus = make_pretrain_corpus(w, 50, 0.25, 77);
    std::size_t bare = 0, attributed = 0;
    for (const CaptionedSample& cs : corpus)
        (cs.caption.size() == 4 ? bare : attributed)++;
    EXPECT_GT(bare, 0u);
    EXPECT_GT(attributed, bare);
}

TEST(Corpus, CoverFlagControlsBenchmarkParticipation) {
    WorldConfig cfg = reference_config();
    WorldSpec excluded = make_world(cfg, 9);
    cfg.cover_benchmark = true;
    WorldSpec covered = make_world(cfg, 9);
    EXPECT_EQ(excluded.pool_domain_ids().size(), 10u);
    EXPECT_EQ(covered.pool_domain_ids().size(), 14u);
    EXPECT_EQ(covered.benchmark_domain_ids().size(), 4u);
}

TEST(Split, SizesFollowCeilRule) {
    WorldSpec w = make_world(reference_config(), 1);
    DomainDataset ds = sample_domain_dataset(w, 0, 10, 5);
    auto [train, val] = split_train_val(ds, 0.8, 3);
    EXPECT_EQ(train.samples.size(), 8u);
    EXPECT_EQ(val.samples.size(), 2u);
    // 0.8*5 carries binary dust; ceil must not round it to 5
    DomainDataset small = sample_domain_dataset(w, 0, 5, 5);
    auto [t5, v5] = split_train_val(small, 0.8, 3);
    EXPECT_EQ(t5.samples.size(), 4u);
    EXPECT_EQ(v5.samples.size(), 1u);
}

TEST(Split, PartitionProperty) {
    WorldSpec w = make_world(reference_config(), 1);
    DomainDataset ds = sample_domain_dataset(w, 2, 100, 6);
    auto [train, val] = split_train_val(ds, 0.8, 9);
    EXPECT_EQ(train.samples.size() + val.samples.size(), 100u);
    auto key = [](const Sample& s) {
        std::string k;
        for (double v : s.x) k += std::to_string(v) + ",";
        return k + std::to_string(s.y);
    };
    std::multiset<std::string> orig, both;
    for (const Sample& s : ds.samples) orig.insert(key(s));
    for (const Sample& s : train.samples) both.insert(key(s));
    for (const Sample& s : val.samples) both.insert(key(s));
    EXPECT_EQ(orig, both);
}

TEST(Split, SeedControlsPermutation) {
    WorldSpec w = make_world(reference_config(), 1);
    DomainDataset ds = sample_domain_dataset(w, 0, 100, 6);
    auto [a_train, a_val] = split_train_val(ds, 0.8, 10);
    auto [b_train, b_val] = split_train_val(ds, 0.8, 10);
    auto [c_train, c_val] = split_train_val(ds, 0.8, 11);
    auto eq = [](const DomainDataset& x, const DomainDataset& y) {
        if (x.samples.size() != y.samples.size()) return false;
        for (std::size_t i = 0; i < x.samples.size(); ++i)
            if (x.samples[i].x != y.samples[i].x || x.samples[i].y != y.samples[i].y)
                return false;
        return true;
    };
    EXPECT_TRUE(eq(a_train, b_train));
    EXPECT_TRUE(eq(a_val, b_val));
    EXPECT_FALSE(eq(a_train, c_train));
}

TEST(Split, TinyDatasetThrows) {
    WorldSpec w = make_world(reference_config(), 1);
    DomainDataset ds = sample_domain_dataset(w, 0, 1, 5);
    EXPECT_THROW(split_train_val(ds, 0.8, 1), ContractError);
    DomainDataset ok = sample_domain_dataset(w, 0, 10, 5);
    EXPECT_THROW(split_train_val(ok, 0.0, 1), ContractError);
    EXPECT_THROW(split_train_val(ok, 1.0, 1), ContractError);
}

TEST(Bayes, PerfectOnNoiselessWorld) {
    WorldSpec w = make_world(identity_config(), 5);
    DomainDataset ds = sample_domain_dataset(w, 1, 200, 8);
    EXPECT_DOUBLE_EQ(bayes_accuracy(w, ds), 1.0);
}

TEST(Bayes, NearCeilingOnReferenceWorld) {
    WorldSpec w = make_world(reference_config(), 17);
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        DomainDataset ds =
            sample_domain_dataset(w, seed % w.num_domains(), 300, seed * 31);
        EXPECT_GE(bayes_accuracy(w, ds), 0.98) << "seed " << seed;
    }
}

TEST(Bayes, BeatsDomainIgnorantPrototypeMatch) {
    WorldSpec w = make_world(reference_config(), 17);
    const std::size_t strong = w.benchmark_domain_ids().back();
    DomainDataset ds = sample_domain_dataset(w, strong, 400, 23);
    std::size_t naive_hits = 0;
    for (const Sample& s : ds.samples) {
        std::size_t best = 0;
        double best_d = 1e18;
        for (std::size_t c = 0; c < w.num_classes(); ++c) {
            Vec d = numkit::add(s.x, numkit::scaled(w.class_prototypes[c], -1.0));
            if (numkit::norm(d) < best_d) {
                best_d = numkit::norm(d);
                best = c;
            }
        }
        if (best == s.y) ++naive_hits;
    }
    const double naive = double(naive_hits) / 400.0;
    EXPECT_GT(bayes_accuracy(w, ds), naive + 0.2);
}

TEST(BatchStats, MeanIdentifiesDomainShift) {
    WorldSpec w = make_world(reference_config(), 21);
    const std::size_t dom = w.benchmark_domain_ids()[1];
    DomainDataset ds = sample_domain_dataset(w, dom, 64, 77);
    Vec mean(w.input_dim(), 0.0);
    for (const Sample& s : ds.samples) numkit::axpy(mean, 1.0 / 64.0, s.x);
    Vec proto_mean(w.input_dim(), 0.0);
    for (const Vec& p : w.class_prototypes)
        numkit::axpy(proto_mean, 1.0 / double(w.num_classes()), p);
    const auto& t = w.domains[dom];
    Vec expected = numkit::add(numkit::matvec(t.rotation, proto_mean), t.offset);
    // per-coordinate spread combines the label mixture and the noise
    for (std::size_t i = 0; i < mean.size(); ++i) {
        double mix_var = 0.0;
        for (std::size_t c = 0; c < w.num_classes(); ++c) {
            Vec rp = numkit::matvec(t.rotation, w.class_prototypes[c]);
            const double centered = rp[i] - (expected[i] - t.offset[i]);
            mix_var += centered * centered / double(w.num_classes());
        }
        const double sd = std::sqrt(mix_var + w.noise_sigma * w.noise_sigma);
        EXPECT_LE(std::abs(mean[i] - expected[i]), 4.0 * sd / 8.0) << "coord " << i;
    }
}

TEST(Json, DatasetRoundTrip) {
    WorldSpec w = make_world(reference_config(), 2);
    DomainDataset ds = sample_domain_dataset(w, 4, 25, 99);
    DomainDataset back = dataset_from_json(dataset_to_json(ds));
    EXPECT_EQ(back.domain_id, ds.domain_id);
    EXPECT_EQ(back.seed, ds.seed);
    ASSERT_EQ(back.samples.size(), ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        EXPECT_EQ(back.samples[i].x, ds.samples[i].x);
        EXPECT_EQ(back.samples[i].y, ds.samples[i].y);
    }
}

TEST(Json, MalformedDatasetThrows) {
    EXPECT_THROW(dataset_from_json(nlohmann::json{{"domain_id", 0}}), IoError);
}

TEST(Json, WorldDumpCarriesFingerprint) {
    WorldSpec w = make_world(reference_config(), 2);
    nlohmann::json j = world_to_json(w);
    EXPECT_EQ(j.at("fingerprint").get<std::uint64_t>(), world_fingerprint(w));
    EXPECT_EQ(j.at("domains").size(), 14u);
}
