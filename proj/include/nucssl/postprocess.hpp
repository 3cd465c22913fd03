#pragma once

// Ternary mask -> instance label map.
//
// Body pixels are grouped into connected components (ids 1, 2, ... in
// raster order of each component's first pixel, after small components are
// dropped). With recovery on, every boundary pixel joins the instance whose
// body lies nearest in Chebyshev distance, up to 2 * boundary_width; ties go
// to the lower id. Distances are measured to body pixels only, so recovery
// does not feed on itself and applying it twice is a no-op.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <vector>

#include "nucssl/errors.hpp"
#include "nucssl/image.hpp"

namespace nucssl {

struct PostprocessConfig {
    int min_instance_area = 10;
    bool recover_boundary = true;
    int connectivity = 8;
    // Width used to build the training targets; sets the recovery radius.
    int boundary_width = 2;

    void validate() const {
        if (min_instance_area < 0) {
            throw ConfigError("postprocess.min_instance_area must be >= 0");
        }
        if (connectivity != 4 && connectivity != 8) {
            throw ConfigError("postprocess.connectivity must be 4 or 8");
        }
        if (boundary_width < 1) {
            throw ConfigError("boundary_width must be >= 1");
        }
    }

    static PostprocessConfig toy() {
        PostprocessConfig c;
        c.min_instance_area = 2;
        return c;
    }

    friend bool operator==(const PostprocessConfig&, const PostprocessConfig&) = default;
};

// Connected components of `fg`, labelled in raster order of first pixel.
// Returns the number of components.
inline std::uint32_t label_components(const Plane<std::uint8_t>& fg, int connectivity, InstanceLabelMap& out) {
    out = InstanceLabelMap(fg.height, fg.width);
    std::uint32_t next = 0;
    std::vector<int> stack;
    for (int y = 0; y < fg.height; ++y) {
        for (int x = 0; x < fg.width; ++x) {
            if (!fg(y, x) || out(y, x) != 0) {
                continue;
            }
            ++next;
            out(y, x) = next;
            stack.assign(1, y * fg.width + x);
            while (!stack.empty()) {
                const int p = stack.back();
                stack.pop_back();
                const int py = p / fg.width;
                const int px = p % fg.width;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        if ((dy == 0 && dx == 0) || (connectivity == 4 && dy != 0 && dx != 0)) {
                            continue;
                        }
                        const int ny = py + dy;
                        const int nx = px + dx;
                        if (fg.contains(ny, nx) && fg(ny, nx) && out(ny, nx) == 0) {
                            out(ny, nx) = next;
                            stack.push_back(ny * fg.width + nx);
                        }
                    }
                }
            }
        }
    }
    return next;
}

// Reassigns every boundary pixel of `mask` from the body instances in `labels`.
inline void recover_boundary(const TernaryMask& mask, InstanceLabelMap& labels, const PostprocessConfig& cfg) {
    if (mask.height != labels.height || mask.width != labels.width) {
        throw ShapeError("mask and label map differ in size");
    }
    const int r = 2 * cfg.boundary_width;
    InstanceLabelMap out = labels;
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            if (mask.cls(y, x) != PixelClass::boundary) {
                continue;
            }
            int best_d = std::numeric_limits<int>::max();
            std::uint32_t best_id = 0;
            for (int ny = std::max(0, y - r); ny <= std::min(mask.height - 1, y + r); ++ny) {
                for (int nx = std::max(0, x - r); nx <= std::min(mask.width - 1, x + r); ++nx) {
                    if (mask.cls(ny, nx) != PixelClass::body) {
                        continue;
                    }
                    const std::uint32_t id = labels(ny, nx);
                    if (id == 0) {
                        continue;
                    }
                    const int d = std::max(std::abs(ny - y), std::abs(nx - x));
                    if (d < best_d || (d == best_d && id < best_id)) {
                        best_d = d;
                        best_id = id;
                    }
                }
            }
            out(y, x) = best_id;
        }
    }
    labels = std::move(out);
}

inline InstanceLabelMap ternary_to_instances(const TernaryMask& mask, const PostprocessConfig& cfg = {}) {
    cfg.validate();
    if (!mask.valid()) {
        throw ShapeError("ternary mask contains values outside {0, 1, 2}");
    }
    Plane<std::uint8_t> body(mask.height, mask.width);
    for (std::size_t i = 0; i < mask.values.size(); ++i) {
        body.values[i] = mask.values[i] == static_cast<std::uint8_t>(PixelClass::body);
    }
    InstanceLabelMap comps;
    const std::uint32_t n = label_components(body, cfg.connectivity, comps);

    std::vector<std::size_t> area(n + 1, 0);
    for (std::uint32_t v : comps.values) {
        ++area[v];
    }
    // Components are already numbered in raster order; renumber the survivors.
    std::vector<std::uint32_t> remap(n + 1, 0);
    std::uint32_t next = 0;
    for (std::uint32_t id = 1; id <= n; ++id) {
        if (area[id] >= static_cast<std::size_t>(cfg.min_instance_area)) {
            remap[id] = ++next;
        }
    }
    for (std::uint32_t& v : comps.values) {
        v = remap[v];
    }
    if (cfg.recover_boundary) {
        recover_boundary(mask, comps, cfg);
    }
    return comps;
}

} // namespace nucssl
