#pragma once

// Independent reference implementations. They evaluate definitions
// literally, with no shared code beyond the data types.

#include <cstdint>
#include <set>
#include <vector>

#include "nucssl/image.hpp"

namespace oracle {

// AJI by the matching definition: pixel loops over every (gt, pred) pair,
// Jaccard compared as exact fractions, strict improvement only (so the lowest
// prediction id keeps ties).
inline double aji(const nucssl::InstanceLabelMap& gt, const nucssl::InstanceLabelMap& pred) {
    std::set<std::uint32_t> gids, pids;
    for (auto v : gt.values) {
        if (v) gids.insert(v);
    }
    for (auto v : pred.values) {
        if (v) pids.insert(v);
    }
    if (gids.empty() && pids.empty()) {
        return 1.0;
    }
    std::uint64_t num = 0;
    std::uint64_t den = 0;
    std::set<std::uint32_t> used;
    for (auto g : gids) {
        std::uint32_t best = 0;
        std::uint64_t bi = 0, bu = 1;
        for (auto p : pids) {
            std::uint64_t inter = 0, uni = 0;
            for (std::size_t k = 0; k < gt.values.size(); ++k) {
                const bool a = gt.values[k] == g;
                const bool b = pred.values[k] == p;
                inter += a && b;
                uni += a || b;
            }
            if (inter == 0) {
                continue;
            }
            if (inter * bu > bi * uni) {
                best = p;
                bi = inter;
                bu = uni;
            }
        }
        if (best == 0) {
            for (auto v : gt.values) {
                den += v == g;
            }
        } else {
            num += bi;
            den += bu;
            used.insert(best);
        }
    }
    for (auto p : pids) {
        if (!used.count(p)) {
            for (auto v : pred.values) {
                den += v == p;
            }
        }
    }
    return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

// Body = instance support eroded `width` times by the 3x3 square (pixels
// outside the image do not erode); boundary = support minus body.
inline nucssl::TernaryMask erosion_ternary(const nucssl::InstanceLabelMap& labels, int width) {
    const int h = labels.height;
    const int w = labels.width;
    std::vector<std::uint32_t> cur = labels.values;
    for (int it = 0; it < width; ++it) {
        std::vector<std::uint32_t> next(cur.size(), 0);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const std::uint32_t v = cur[static_cast<std::size_t>(y) * w + x];
                if (v == 0) continue;
                bool keep = true;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int ny = y + dy, nx = x + dx;
                        if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
                        if (cur[static_cast<std::size_t>(ny) * w + nx] != v) keep = false;
                    }
                }
                if (keep) next[static_cast<std::size_t>(y) * w + x] = v;
            }
        }
        cur = std::move(next);
    }
    nucssl::TernaryMask out(h, w);
    for (std::size_t i = 0; i < cur.size(); ++i) {
        if (labels.values[i] == 0) {
            out.values[i] = 0;
        } else {
            out.values[i] = cur[i] != 0 ? 1 : 2;
        }
    }
    return out;
}

inline double sqdist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

} // namespace oracle
