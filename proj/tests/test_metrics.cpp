#include <gtest/gtest.h>

#include <fstream>

#include "nucssl/metrics.hpp"
#include "nucssl/synth.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace nucssl;

namespace {

InstanceLabelMap from_rows(std::initializer_list<std::initializer_list<std::uint32_t>> rows) {
    InstanceLabelMap m(static_cast<int>(rows.size()), static_cast<int>(rows.begin()->size()));
    std::size_t i = 0;
    for (const auto& r : rows) {
        for (auto v : r) {
            m.values[i++] = v;
        }
    }
    return m;
}

InstanceLabelMap permute_ids(const InstanceLabelMap& m, Rng& rng) {
    const std::uint32_t max_id = m.max_id();
    std::vector<std::uint32_t> perm(max_id + 1);
    for (std::uint32_t i = 0; i <= max_id; ++i) {
        perm[i] = i;
    }
    rng.shuffle(perm.begin() + 1, perm.end());
    InstanceLabelMap out = m;
    for (auto& v : out.values) {
        v = perm[v];
    }
    return out;
}

// True when some gt instance has two predictions with equal positive Jaccard.
bool has_jaccard_tie(const InstanceLabelMap& gt, const InstanceLabelMap& pred) {
    for (auto g : gt.instance_ids()) {
        std::vector<std::pair<std::uint64_t, std::uint64_t>> js;
        for (auto p : pred.instance_ids()) {
            std::uint64_t inter = 0, uni = 0;
            for (std::size_t k = 0; k < gt.values.size(); ++k) {
                inter += gt.values[k] == g && pred.values[k] == p;
                uni += gt.values[k] == g || pred.values[k] == p;
            }
            if (inter == 0) {
                continue;
            }
            for (const auto& [i, u] : js) {
                if (i * uni == inter * u) {
                    return true;
                }
            }
            js.emplace_back(inter, uni);
        }
    }
    return false;
}

} // namespace

TEST(Aji, IdenticalMapsScoreOne) {
    Rng rng(1);
    for (int n = 1; n <= 6; ++n) {
        const InstanceLabelMap m = testing_support::random_rect_map(rng, 12, 12, n);
        if (m.instance_count() > 0) {
            EXPECT_EQ(aji(m, m), 1.0);
            EXPECT_EQ(dice(m, m), 1.0);
        }
    }
}

TEST(Aji, HalfCoveredSquare) {
    const auto gt = from_rows({{1, 1}, {1, 1}});
    const auto pred = from_rows({{1, 1}, {0, 0}});
    EXPECT_EQ(aji(gt, pred), 0.5);
}

TEST(Aji, UnusedPredictionPenalised) {
    const auto gt = from_rows({{1, 1, 0, 0, 0}, {1, 1, 0, 0, 0}});
    const auto pred = from_rows({{1, 1, 0, 2, 2}, {1, 1, 0, 2, 2}});
    EXPECT_EQ(aji(gt, pred), 0.5);
}

TEST(Aji, DisjointScoresZero) {
    const auto gt = from_rows({{1, 1, 0, 0, 0}, {1, 1, 0, 0, 0}});
    const auto pred = from_rows({{0, 0, 0, 2, 2}, {0, 0, 0, 2, 2}});
    EXPECT_EQ(aji(gt, pred), 0.0);
    const AjiTerms t = aji_terms(gt, pred);
    EXPECT_EQ(t.numerator, 0u);
    EXPECT_EQ(t.denominator, 8u);
}

TEST(Aji, EmptyConventions) {
    const InstanceLabelMap empty(3, 3);
    EXPECT_EQ(aji(empty, empty), 1.0);
    EXPECT_EQ(dice(empty, empty), 1.0);
    const auto some = from_rows({{1, 0, 0}, {0, 0, 0}, {0, 0, 0}});
    EXPECT_EQ(aji(some, empty), 0.0);
    EXPECT_EQ(aji(empty, some), 0.0);
    EXPECT_THROW(aji(some, InstanceLabelMap(2, 3)), ShapeError);
}

TEST(Aji, PredictionMayBeReused) {
    // One prediction spans two gt instances; both match it.
    const auto gt = from_rows({{1, 1, 2, 2}});
    const auto pred = from_rows({{5, 5, 5, 5}});
    const AjiTerms t = aji_terms(gt, pred);
    EXPECT_EQ(t.numerator, 4u);
    EXPECT_EQ(t.denominator, 8u);
}

TEST(Aji, TieGoesToLowestPredictionId) {
    // gt: 6 px. Prediction A (2 px, all inside) and B (6 px, 3 inside) both
    // have Jaccard 1/3, but the choice changes the score.
    const auto gt = from_rows({{1, 1, 1}, {1, 1, 1}, {0, 0, 0}});
    const auto a_low = from_rows({{2, 2, 5}, {5, 5, 0}, {5, 5, 5}});
    // A wins: I = 2, U = 6, unused B adds 6.
    EXPECT_EQ(aji_terms(gt, a_low).numerator, 2u);
    EXPECT_EQ(aji_terms(gt, a_low).denominator, 12u);
    const auto b_low = from_rows({{9, 9, 5}, {5, 5, 0}, {5, 5, 5}});
    // B wins: I = 3, U = 9, unused A adds 2.
    EXPECT_EQ(aji_terms(gt, b_low).numerator, 3u);
    EXPECT_EQ(aji_terms(gt, b_low).denominator, 11u);
    EXPECT_EQ(aji(gt, a_low), oracle::aji(gt, a_low));
    EXPECT_EQ(aji(gt, b_low), oracle::aji(gt, b_low));
}

TEST(Aji, MatchesBruteForceOracle) {
    Rng rng(2);
    for (int rep = 0; rep < 1000; ++rep) {
        const int h = static_cast<int>(rng.uniform_int(1, 8));
        const int w = static_cast<int>(rng.uniform_int(1, 8));
        const auto gt = testing_support::random_label_map(rng, h, w, 3);
        const auto pred = testing_support::random_label_map(rng, h, w, 3);
        const double a = aji(gt, pred);
        ASSERT_EQ(a, oracle::aji(gt, pred)) << rep;
        ASSERT_GE(a, 0.0);
        ASSERT_LE(a, 1.0);
        const double d = dice(gt, pred);
        ASSERT_GE(d, 0.0);
        ASSERT_LE(d, 1.0);
        ASSERT_EQ(d, dice(pred, gt));
    }
}

TEST(Aji, RelabelInvariantWithoutTies) {
    Rng rng(3);
    int checked = 0;
    for (int rep = 0; rep < 1000; ++rep) {
        const auto gt = testing_support::random_label_map(rng, 8, 8, 3);
        const auto pred = testing_support::random_label_map(rng, 8, 8, 3);
        if (has_jaccard_tie(gt, pred)) {
            continue;
        }
        ++checked;
        ASSERT_EQ(aji(permute_ids(gt, rng), permute_ids(pred, rng)), aji(gt, pred));
    }
    EXPECT_GT(checked, 500);
}

TEST(Dice, HandArithmetic) {
    const auto a = from_rows({{1, 1, 0, 0}, {1, 1, 0, 0}});
    const auto b = from_rows({{0, 2, 2, 0}, {0, 2, 2, 0}});
    EXPECT_EQ(dice(a, b), 0.5);
    const auto c = from_rows({{0, 0, 3, 3}, {0, 0, 3, 3}});
    EXPECT_EQ(dice(a, c), 0.0);
    EXPECT_EQ(dice(a, from_rows({{4, 4, 0, 0}, {5, 5, 0, 0}})), 1.0);
}

TEST(EvaluateDataset, PerfectAndEmptyPredictors) {
    testing_support::TempDir tmp;
    SynthConfig c;
    c.num_images = 3;
    c.num_test_images = 2;
    write_synthetic_dataset(c, tmp.path());
    const DatasetIndex idx = load_dataset(tmp.path(), 0.8, 0, true);
    const EvalReport perfect = evaluate_dataset(idx, Split::test, [](const DatasetEntry& e, const RgbImage&) {
        return read_label_map(*e.label_path);
    });
    ASSERT_EQ(perfect.images.size(), 2u);
    EXPECT_EQ(perfect.mean_aji(), 1.0);
    EXPECT_EQ(perfect.mean_dice(), 1.0);
    const EvalReport empty = evaluate_dataset(idx, Split::test, [](const DatasetEntry&, const RgbImage& img) {
        return InstanceLabelMap(img.height, img.width);
    });
    EXPECT_EQ(empty.mean_aji(), 0.0);
    EXPECT_EQ(empty.mean_dice(), 0.0);

    empty.write_csv(tmp / "r.csv");
    std::ifstream in(tmp / "r.csv");
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "image_id,aji,dice");
    std::string last;
    while (std::getline(in, line)) {
        last = line;
    }
    EXPECT_EQ(last, "mean,0,0");
}

TEST(EvaluateDataset, EmptySplitIsIoError) {
    testing_support::TempDir tmp;
    SynthConfig c;
    c.num_images = 2;
    c.num_test_images = 0;
    write_synthetic_dataset(c, tmp.path());
    const DatasetIndex idx = load_dataset(tmp.path(), 0.8, 0, true);
    EXPECT_THROW(evaluate_dataset(idx, Split::test, [](const DatasetEntry&, const RgbImage& img) {
                     return InstanceLabelMap(img.height, img.width);
                 }),
                 IoError);
}
