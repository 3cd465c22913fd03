#pragma once

// Synthetic nuclei images with exact instance ground truth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "nucssl/dataio.hpp"
#include "nucssl/errors.hpp"
#include "nucssl/image.hpp"
#include "nucssl/random.hpp"
#include "nucssl/sampler.hpp"

namespace nucssl {

struct SynthConfig {
    int image_size = 96;
    int count_min = 12;
    int count_max = 24;
    double radius_min = 3.0;
    double radius_max = 6.0;
    bool overlap_allowed = false;
    // Minimum Chebyshev gap between nuclei when overlap is disallowed.
    int min_gap = 1;
    double texture_noise_sd = 12.0;
    std::uint64_t seed = 1;

    // Dataset writer only.
    int num_images = 60;
    int num_test_images = 10;

    void validate() const {
        if (image_size < 1) {
            throw ConfigError("synth.image_size must be >= 1");
        }
        if (count_min < 0 || count_max < count_min) {
            throw ConfigError("synth count range must satisfy 0 <= count_min <= count_max");
        }
        if (!(radius_min > 0.0) || radius_max < radius_min) {
            throw ConfigError("synth radius range must satisfy 0 < radius_min <= radius_max");
        }
        if (image_size < 2.0 * radius_max) {
            throw ConfigError("synth.image_size must be >= 2 * radius_max");
        }
        if (min_gap < 0) {
            throw ConfigError("synth.min_gap must be >= 0");
        }
        if (texture_noise_sd < 0.0) {
            throw ConfigError("synth.texture_noise_sd must be >= 0");
        }
        if (num_images < 0 || num_test_images < 0) {
            throw ConfigError("synth image counts must be >= 0");
        }
    }

    friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

inline constexpr std::uint8_t kSynthBackground[3] = {232, 196, 218};
inline constexpr std::uint8_t kSynthNucleus[3] = {92, 58, 140};

struct SynthSample {
    RgbImage image;
    InstanceLabelMap labels;
};

namespace detail {

struct Ellipse {
    double cx, cy, a, b, cos_t, sin_t;

    bool contains(int y, int x) const {
        const double dx = x - cx;
        const double dy = y - cy;
        const double u = (dx * cos_t + dy * sin_t) / a;
        const double v = (-dx * sin_t + dy * cos_t) / b;
        return u * u + v * v <= 1.0;
    }
};

} // namespace detail

// Nuclei are ellipses (semi-major axis drawn from the radius range,
// eccentricity up to 2:1) centred on integer pixels, so every footprint
// contains its centre pixel.
inline SynthSample generate(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const int n = cfg.image_size;
    const auto count = static_cast<int>(rng.uniform_int(cfg.count_min, cfg.count_max));

    InstanceLabelMap labels(n, n);
    std::uint32_t next_id = 1;
    for (int k = 0; k < count; ++k) {
        bool placed = false;
        for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
            detail::Ellipse e{};
            e.cx = static_cast<double>(rng.uniform_int(0, n - 1));
            e.cy = static_cast<double>(rng.uniform_int(0, n - 1));
            e.a = rng.uniform(cfg.radius_min, cfg.radius_max);
            e.b = e.a / rng.uniform(1.0, 2.0);
            const double theta = rng.uniform(0.0, std::numbers::pi);
            e.cos_t = std::cos(theta);
            e.sin_t = std::sin(theta);
            const int r = static_cast<int>(std::ceil(e.a));
            const int y0 = std::max(0, static_cast<int>(e.cy) - r);
            const int y1 = std::min(n - 1, static_cast<int>(e.cy) + r);
            const int x0 = std::max(0, static_cast<int>(e.cx) - r);
            const int x1 = std::min(n - 1, static_cast<int>(e.cx) + r);

            if (!cfg.overlap_allowed) {
                bool clash = false;
                const int g = cfg.min_gap;
                for (int y = y0; y <= y1 && !clash; ++y) {
                    for (int x = x0; x <= x1 && !clash; ++x) {
                        if (!e.contains(y, x)) {
                            continue;
                        }
                        for (int yy = std::max(0, y - g); yy <= std::min(n - 1, y + g) && !clash; ++yy) {
                            for (int xx = std::max(0, x - g); xx <= std::min(n - 1, x + g); ++xx) {
                                if (labels(yy, xx) != 0) {
                                    clash = true;
                                    break;
                                }
                            }
                        }
                    }
                }
                if (clash) {
                    continue;
                }
            }
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    if (e.contains(y, x)) {
                        labels(y, x) = next_id;
                    }
                }
            }
            ++next_id;
            placed = true;
        }
        if (!placed) {
            throw Error("synthetic nucleus placement failed after bounded retries (density infeasible without overlap)");
        }
    }

    // Overlapping draws can fully cover an earlier nucleus; compact ids so
    // every id present has non-empty support and ids stay consecutive.
    if (cfg.overlap_allowed) {
        std::vector<std::uint32_t> remap(next_id, 0);
        for (std::uint32_t v : labels.values) {
            if (v != 0) {
                remap[v] = 1;
            }
        }
        std::uint32_t id = 0;
        for (auto& r : remap) {
            r = r != 0 ? ++id : 0;
        }
        for (auto& v : labels.values) {
            v = remap[v];
        }
    }

    RgbImage image(n, n);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const std::uint8_t* base = labels(y, x) != 0 ? kSynthNucleus : kSynthBackground;
            for (int c = 0; c < 3; ++c) {
                double v = base[c];
                if (cfg.texture_noise_sd > 0.0) {
                    v += cfg.texture_noise_sd * rng.normal();
                }
                image.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return {std::move(image), std::move(labels)};
}

struct PoolEntry {
    Triplet triplet;
    int positive_count = 0;
    int negative_count = 0;
};

// n triplets, each drawn from a fresh synthetic image, carrying ground-truth
// centroid counts of the positive region and the negative sub-region.
inline std::vector<PoolEntry> generate_triplet_pool(const SynthConfig& cfg, const SamplerConfig& sampler, int n) {
    std::vector<PoolEntry> pool;
    pool.reserve(static_cast<std::size_t>(std::max(n, 0)));
    for (int i = 0; i < n; ++i) {
        SynthConfig c = cfg;
        c.seed = derive_seed(cfg.seed, {0x706f6f6cULL, static_cast<std::uint64_t>(i)});
        const SynthSample s = generate(c);
        PoolEntry e;
        e.triplet = sample_triplet(s.image, derive_seed(c.seed, {1}), sampler);
        e.positive_count = nuclei_stats(s.labels, e.triplet.positive_spec).count;
        e.negative_count = nuclei_stats(s.labels, e.triplet.negative_source_region()).count;
        pool.push_back(std::move(e));
    }
    return pool;
}

// Writes <out>/images, <out>/labels (train/val pool) and <out>/test/{images,labels}.
inline void write_synthetic_dataset(const SynthConfig& cfg, const std::filesystem::path& out) {
    cfg.validate();
    namespace fs = std::filesystem;
    auto write_split = [&cfg](const fs::path& dir, int count, std::uint64_t stream) {
        fs::create_directories(dir / "images");
        fs::create_directories(dir / "labels");
        for (int i = 0; i < count; ++i) {
            SynthConfig c = cfg;
            c.seed = derive_seed(cfg.seed, {stream, static_cast<std::uint64_t>(i)});
            const SynthSample s = generate(c);
            char stem[32];
            std::snprintf(stem, sizeof stem, "synth_%04d", i);
            write_image(dir / "images" / (std::string(stem) + ".png"), s.image);
            write_label_map(dir / "labels" / (std::string(stem) + ".png"), s.labels);
        }
    };
    write_split(out, cfg.num_images, 1);
    if (cfg.num_test_images > 0) {
        write_split(out / "test", cfg.num_test_images, 2);
    }
}

} // namespace nucssl
