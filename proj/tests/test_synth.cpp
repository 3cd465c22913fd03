#include <gtest/gtest.h>

#include <set>

#include "nucssl/synth.hpp"
#include "support.hpp"

using namespace nucssl;

TEST(Synth, ForcedCountGivesExactlyThatManyInstances) {
    SynthConfig c;
    c.count_min = c.count_max = 5;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        c.seed = seed;
        EXPECT_EQ(generate(c).labels.instance_count(), 5u);
    }
}

TEST(Synth, DeterministicPerSeed) {
    SynthConfig c;
    c.seed = 42;
    const SynthSample a = generate(c);
    const SynthSample b = generate(c);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.labels, b.labels);
    c.seed = 43;
    EXPECT_NE(generate(c).image, a.image);
}

TEST(Synth, NoiselessSingleNucleusHasTwoColourClusters) {
    SynthConfig c;
    c.count_min = c.count_max = 1;
    c.texture_noise_sd = 0.0;
    const SynthSample s = generate(c);
    std::set<std::array<int, 3>> colours;
    for (int y = 0; y < s.image.height; ++y) {
        for (int x = 0; x < s.image.width; ++x) {
            colours.insert({s.image.at(y, x, 0), s.image.at(y, x, 1), s.image.at(y, x, 2)});
        }
    }
    EXPECT_EQ(colours.size(), 2u);
    EXPECT_TRUE(colours.count({kSynthNucleus[0], kSynthNucleus[1], kSynthNucleus[2]}));
    EXPECT_TRUE(colours.count({kSynthBackground[0], kSynthBackground[1], kSynthBackground[2]}));
}

TEST(Synth, LabelledPixelsAreRenderedAsNucleus) {
    SynthConfig c;
    c.texture_noise_sd = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        c.seed = seed;
        const SynthSample s = generate(c);
        for (int y = 0; y < s.image.height; ++y) {
            for (int x = 0; x < s.image.width; ++x) {
                const bool nucleus = s.image.at(y, x, 0) == kSynthNucleus[0];
                ASSERT_EQ(nucleus, s.labels(y, x) != 0);
            }
        }
    }
}

TEST(Synth, InstancesRespectMinimumGap) {
    SynthConfig c;
    c.min_gap = 2;
    const SynthSample s = generate(c);
    const auto& m = s.labels;
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            if (m(y, x) == 0) {
                continue;
            }
            for (int dy = -2; dy <= 2; ++dy) {
                for (int dx = -2; dx <= 2; ++dx) {
                    if (m.contains(y + dy, x + dx) && m(y + dy, x + dx) != 0) {
                        ASSERT_EQ(m(y + dy, x + dx), m(y, x));
                    }
                }
            }
        }
    }
}

TEST(Synth, InfeasibleDensityFailsAfterBoundedRetries) {
    SynthConfig c;
    c.image_size = 12;
    c.count_min = c.count_max = 50;
    EXPECT_THROW(generate(c), Error);
}

TEST(Synth, EmptyPool) { EXPECT_TRUE(generate_triplet_pool(SynthConfig{}, SamplerConfig{}, 0).empty()); }

TEST(Synth, PoolCountsAreMonotoneAndMostlyStrict) {
    const auto pool = generate_triplet_pool(SynthConfig{}, SamplerConfig{}, 500);
    ASSERT_EQ(pool.size(), 500u);
    int strict = 0;
    for (const auto& e : pool) {
        ASSERT_LE(e.negative_count, e.positive_count);
        strict += e.negative_count < e.positive_count;
    }
    // Measured on this pool and frozen.
    EXPECT_EQ(strict, 500);
}

TEST(Synth, DatasetWriterLayoutAndDeterminism) {
    testing_support::TempDir a;
    testing_support::TempDir b;
    SynthConfig c;
    c.num_images = 3;
    c.num_test_images = 2;
    write_synthetic_dataset(c, a.path());
    write_synthetic_dataset(c, b.path());
    const DatasetIndex idx = load_dataset(a.path(), 0.8, 0, true);
    EXPECT_EQ(idx.entries.size(), 5u);
    EXPECT_EQ(idx.count(Split::test), 2u);
    for (const auto& e : idx.entries) {
        const auto rel = std::filesystem::relative(e.image_path, a.path());
        EXPECT_EQ(read_image(e.image_path), read_image(b.path() / rel));
    }
}
