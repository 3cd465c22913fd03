#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "nucssl/errors.hpp"

namespace nucssl {

// Row-major single-channel raster.
template <class T>
struct Plane {
    int height = 0;
    int width = 0;
    std::vector<T> values;

    Plane() = default;
    Plane(int h, int w, T fill = T{}) : height(h), width(w), values(checked_area(h, w), fill) {}

    T& operator()(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
    const T& operator()(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }

    std::size_t size() const { return values.size(); }
    bool contains(int y, int x) const { return y >= 0 && y < height && x >= 0 && x < width; }
    bool same_shape(const Plane& other) const { return height == other.height && width == other.width; }

    friend bool operator==(const Plane&, const Plane&) = default;

private:
    static std::size_t checked_area(int h, int w) {
        if (h < 0 || w < 0) {
            throw ShapeError("negative raster dimensions");
        }
        return static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    }
};

// 8-bit RGB, interleaved HxWx3.
struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;

    RgbImage() = default;
    RgbImage(int h, int w, std::uint8_t fill = 0) : height(h), width(w) {
        if (h < 1 || w < 1) {
            throw ShapeError("RgbImage requires height >= 1 and width >= 1");
        }
        pixels.assign(static_cast<std::size_t>(h) * w * 3, fill);
    }

    std::uint8_t& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    std::uint8_t at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

    friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

// Per-pixel instance ids; 0 is background.
struct InstanceLabelMap : Plane<std::uint32_t> {
    using Plane::Plane;

    // Sorted distinct nonzero ids.
    std::vector<std::uint32_t> instance_ids() const {
        std::vector<std::uint32_t> ids;
        for (std::uint32_t v : values) {
            if (v != 0) {
                ids.push_back(v);
            }
        }
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        return ids;
    }

    std::size_t instance_count() const { return instance_ids().size(); }

    std::uint32_t max_id() const {
        std::uint32_t m = 0;
        for (std::uint32_t v : values) {
            m = std::max(m, v);
        }
        return m;
    }
};

enum class PixelClass : std::uint8_t { background = 0, body = 1, boundary = 2 };

inline constexpr int kClassCount = 3;

// Per-pixel class in {background, body, boundary}.
struct TernaryMask : Plane<std::uint8_t> {
    using Plane::Plane;

    PixelClass cls(int y, int x) const { return static_cast<PixelClass>((*this)(y, x)); }

    bool valid() const {
        return std::all_of(values.begin(), values.end(), [](std::uint8_t v) { return v < kClassCount; });
    }
};

} // namespace nucssl
