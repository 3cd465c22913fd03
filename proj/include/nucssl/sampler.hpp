#pragma once

// Triplet generation for the proxy tasks.
//
// anchor   : crop_size^2 crop at a uniformly random offset
// positive : crop_size^2 crop at a nearby, different offset
// negative : sub-crop of the positive (side drawn from the scale pool),
//            resized back up to crop_size^2

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "nucssl/dataio.hpp"
#include "nucssl/errors.hpp"
#include "nucssl/image.hpp"
#include "nucssl/random.hpp"

namespace nucssl {

struct CropSpec {
    int x = 0;
    int y = 0;
    int size = 0;

    friend bool operator==(const CropSpec&, const CropSpec&) = default;
};

inline bool crop_inside(const CropSpec& c, int height, int width) {
    return c.size >= 1 && c.x >= 0 && c.y >= 0 && c.x + c.size <= width && c.y + c.size <= height;
}

struct SamplerConfig {
    int crop_size = 64;
    std::vector<int> scale_pool{42, 21, 10, 5};
    // Chebyshev distance between anchor and positive offsets, inclusive.
    int min_shift = 5;
    int max_shift = 19;

    // Geometry used on 1000x1000 MoNuSeg tiles.
    static SamplerConfig full_scale() { return SamplerConfig{768, {512, 256, 128, 64}, 64, 232}; }

    void validate() const {
        if (crop_size < 2) {
            throw ConfigError("sampler.crop_size must be >= 2");
        }
        if (scale_pool.empty()) {
            throw ConfigError("sampler.scale_pool must not be empty");
        }
        for (int s : scale_pool) {
            if (s < 1 || s >= crop_size) {
                throw ConfigError("sampler.scale_pool entries must lie in [1, crop_size)");
            }
        }
        if (min_shift < 1 || max_shift < min_shift) {
            throw ConfigError("sampler shifts must satisfy 1 <= min_shift <= max_shift");
        }
    }

    friend bool operator==(const SamplerConfig&, const SamplerConfig&) = default;
};

struct Triplet {
    RgbImage anchor;
    RgbImage positive;
    RgbImage negative;
    CropSpec anchor_spec;    // source-image coordinates
    CropSpec positive_spec;  // source-image coordinates
    CropSpec negative_spec;  // positive-patch coordinates
    int negative_scale = 0;

    // The negative sub-region expressed in source-image coordinates.
    CropSpec negative_source_region() const {
        return {positive_spec.x + negative_spec.x, positive_spec.y + negative_spec.y, negative_spec.size};
    }

    friend bool operator==(const Triplet&, const Triplet&) = default;
};

inline RgbImage crop(const RgbImage& img, const CropSpec& c) {
    if (!crop_inside(c, img.height, img.width)) {
        throw ShapeError("crop region outside the image");
    }
    RgbImage out(c.size, c.size);
    const std::size_t row_bytes = static_cast<std::size_t>(c.size) * 3;
    for (int y = 0; y < c.size; ++y) {
        const auto* src = &img.pixels[(static_cast<std::size_t>(c.y + y) * img.width + c.x) * 3];
        std::copy(src, src + row_bytes, &out.pixels[static_cast<std::size_t>(y) * row_bytes]);
    }
    return out;
}

// Bilinear resize to target x target with half-pixel centres:
//   src = (dst + 0.5) * in / out - 0.5, clamped to [0, in - 1]
// Results are rounded to nearest (ties away from zero).
inline RgbImage resize_bilinear(const RgbImage& patch, int target) {
    if (target < 1) {
        throw ShapeError("resize target must be >= 1");
    }
    if (patch.height == target && patch.width == target) {
        return patch;
    }
    struct Tap {
        int i0, i1;
        double w;
    };
    auto taps = [target](int in) {
        std::vector<Tap> t(static_cast<std::size_t>(target));
        const double scale = static_cast<double>(in) / target;
        for (int d = 0; d < target; ++d) {
            double s = (d + 0.5) * scale - 0.5;
            s = std::clamp(s, 0.0, static_cast<double>(in - 1));
            const int i0 = static_cast<int>(std::floor(s));
            const int i1 = std::min(i0 + 1, in - 1);
            t[d] = {i0, i1, s - i0};
        }
        return t;
    };
    const auto ty = taps(patch.height);
    const auto tx = taps(patch.width);

    RgbImage out(target, target);
    for (int y = 0; y < target; ++y) {
        const Tap& a = ty[y];
        for (int x = 0; x < target; ++x) {
            const Tap& b = tx[x];
            for (int c = 0; c < 3; ++c) {
                const double top = (1.0 - b.w) * patch.at(a.i0, b.i0, c) + b.w * patch.at(a.i0, b.i1, c);
                const double bottom = (1.0 - b.w) * patch.at(a.i1, b.i0, c) + b.w * patch.at(a.i1, b.i1, c);
                const double v = (1.0 - a.w) * top + a.w * bottom;
                out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

inline Triplet sample_triplet(const RgbImage& image, std::uint64_t seed, const SamplerConfig& cfg) {
    cfg.validate();
    const int s = cfg.crop_size;
    if (image.height < s || image.width < s) {
        throw ShapeError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " is smaller than the " + std::to_string(s) + "x" + std::to_string(s) + " crop");
    }
    const int max_x = image.width - s;
    const int max_y = image.height - s;
    if (std::max(max_x, max_y) < cfg.min_shift) {
        throw ShapeError("image too small to place a positive crop at least " + std::to_string(cfg.min_shift) +
                         " px from the anchor");
    }

    Rng rng(seed);
    Triplet t;
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
        const int ax = static_cast<int>(rng.uniform_int(0, max_x));
        const int ay = static_cast<int>(rng.uniform_int(0, max_y));
        // Candidate box, clipped to valid offsets; points with Chebyshev
        // distance < min_shift are rejected.
        const int x_lo = std::max(0, ax - cfg.max_shift);
        const int x_hi = std::min(max_x, ax + cfg.max_shift);
        const int y_lo = std::max(0, ay - cfg.max_shift);
        const int y_hi = std::min(max_y, ay + cfg.max_shift);
        const long long outer = static_cast<long long>(x_hi - x_lo + 1) * (y_hi - y_lo + 1);
        const int ix_lo = std::max(x_lo, ax - cfg.min_shift + 1);
        const int ix_hi = std::min(x_hi, ax + cfg.min_shift - 1);
        const int iy_lo = std::max(y_lo, ay - cfg.min_shift + 1);
        const int iy_hi = std::min(y_hi, ay + cfg.min_shift - 1);
        const long long inner = static_cast<long long>(ix_hi - ix_lo + 1) * (iy_hi - iy_lo + 1);
        if (outer - inner <= 0) {
            continue;
        }
        for (;;) {
            const int px = static_cast<int>(rng.uniform_int(x_lo, x_hi));
            const int py = static_cast<int>(rng.uniform_int(y_lo, y_hi));
            if (std::max(std::abs(px - ax), std::abs(py - ay)) >= cfg.min_shift) {
                t.anchor_spec = {ax, ay, s};
                t.positive_spec = {px, py, s};
                placed = true;
                break;
            }
        }
    }
    if (!placed) {
        throw ShapeError("could not place a positive crop within the configured shift range");
    }

    const auto pool_index = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cfg.scale_pool.size()) - 1));
    const int scale = cfg.scale_pool[pool_index];
    const int nx = static_cast<int>(rng.uniform_int(0, s - scale));
    const int ny = static_cast<int>(rng.uniform_int(0, s - scale));

    t.anchor = crop(image, t.anchor_spec);
    t.positive = crop(image, t.positive_spec);
    t.negative_spec = {nx, ny, scale};
    t.negative_scale = scale;
    t.negative = resize_bilinear(crop(t.positive, t.negative_spec), s);
    return t;
}

struct NucleiStats {
    double mean_size = 0.0;
    int count = 0;

    friend bool operator==(const NucleiStats&, const NucleiStats&) = default;
};

// Per-instance centroid (pixel centres at +0.5) and area over the whole map.
struct InstanceGeometry {
    std::uint32_t id = 0;
    double cx = 0.0;
    double cy = 0.0;
    std::size_t area = 0;
};

inline std::vector<InstanceGeometry> instance_geometry(const InstanceLabelMap& labels) {
    const std::uint32_t max_id = labels.max_id();
    std::vector<double> sx(max_id + 1, 0.0);
    std::vector<double> sy(max_id + 1, 0.0);
    std::vector<std::size_t> area(max_id + 1, 0);
    for (int y = 0; y < labels.height; ++y) {
        for (int x = 0; x < labels.width; ++x) {
            const std::uint32_t id = labels(y, x);
            if (id != 0) {
                sx[id] += x + 0.5;
                sy[id] += y + 0.5;
                ++area[id];
            }
        }
    }
    std::vector<InstanceGeometry> out;
    for (std::uint32_t id = 1; id <= max_id; ++id) {
        if (area[id] > 0) {
            const auto a = static_cast<double>(area[id]);
            out.push_back({id, sx[id] / a, sy[id] / a, area[id]});
        }
    }
    return out;
}

// Count of instances whose centroid falls inside `region`, and their mean
// full area. Empty region -> (0, 0).
inline NucleiStats nuclei_stats(const InstanceLabelMap& labels, const CropSpec& region) {
    if (!crop_inside(region, labels.height, labels.width)) {
        throw ShapeError("stats region outside the label map");
    }
    NucleiStats st;
    double total = 0.0;
    for (const auto& g : instance_geometry(labels)) {
        if (g.cx >= region.x && g.cx < region.x + region.size && g.cy >= region.y && g.cy < region.y + region.size) {
            ++st.count;
            total += static_cast<double>(g.area);
        }
    }
    st.mean_size = st.count > 0 ? total / st.count : 0.0;
    return st;
}

// Writes <stem>_anchor.png, <stem>_positive.png, <stem>_negative.png and a
// <stem>.txt sidecar of `key = value` lines.
inline void save_triplet(const Triplet& t, std::uint64_t seed, const std::filesystem::path& dir, const std::string& stem) {
    std::filesystem::create_directories(dir);
    write_image(dir / (stem + "_anchor.png"), t.anchor);
    write_image(dir / (stem + "_positive.png"), t.positive);
    write_image(dir / (stem + "_negative.png"), t.negative);
    std::ofstream side(dir / (stem + ".txt"));
    if (!side) {
        throw IoError("cannot write triplet sidecar in '" + dir.string() + "'");
    }
    auto spec = [&side](const char* name, const CropSpec& c) {
        side << name << " = " << c.x << ' ' << c.y << ' ' << c.size << '\n';
    };
    side << "seed = " << seed << '\n';
    spec("anchor", t.anchor_spec);
    spec("positive", t.positive_spec);
    spec("negative", t.negative_spec);
    side << "negative_scale = " << t.negative_scale << '\n';
}

} // namespace nucssl
