#pragma once

// Aggregated Jaccard Index and binary Dice.
//
// AJI: each ground-truth instance, in increasing id order, picks the
// prediction with the highest Jaccard index (lowest prediction id on ties).
// A prediction may be picked by several ground-truth instances. If the best
// Jaccard is 0 the instance is unmatched and only its area enters the
// denominator. Predictions never picked add their area to the denominator.
// Both maps empty -> 1; exactly one empty -> 0.
//
// Jaccard values are compared as exact rationals, so results do not depend
// on floating-point rounding.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "nucssl/dataio.hpp"
#include "nucssl/errors.hpp"
#include "nucssl/image.hpp"

namespace nucssl {

namespace detail {

inline void require_same_shape(const InstanceLabelMap& a, const InstanceLabelMap& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("label maps differ in size: " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                         " vs " + std::to_string(b.height) + "x" + std::to_string(b.width));
    }
}

// Dense relabelling of nonzero ids to 1..n in increasing id order.
inline std::vector<std::uint32_t> compact_ids(const InstanceLabelMap& m, std::vector<std::uint32_t>& ids) {
    ids = m.instance_ids();
    std::unordered_map<std::uint32_t, std::uint32_t> index;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        index.emplace(ids[i], static_cast<std::uint32_t>(i + 1));
    }
    std::vector<std::uint32_t> out(m.values.size());
    for (std::size_t i = 0; i < m.values.size(); ++i) {
        out[i] = m.values[i] == 0 ? 0 : index.at(m.values[i]);
    }
    return out;
}

} // namespace detail

struct AjiTerms {
    std::uint64_t numerator = 0;
    std::uint64_t denominator = 0;
};

inline AjiTerms aji_terms(const InstanceLabelMap& gt, const InstanceLabelMap& pred) {
    detail::require_same_shape(gt, pred);
    std::vector<std::uint32_t> gids, pids;
    const std::vector<std::uint32_t> g = detail::compact_ids(gt, gids);
    const std::vector<std::uint32_t> p = detail::compact_ids(pred, pids);
    const std::size_t ng = gids.size();
    const std::size_t np = pids.size();

    std::vector<std::uint64_t> garea(ng + 1, 0), parea(np + 1, 0);
    // Sparse contingency table: for each gt, intersection counts by prediction.
    std::vector<std::unordered_map<std::uint32_t, std::uint64_t>> inter(ng + 1);
    for (std::size_t i = 0; i < g.size(); ++i) {
        ++garea[g[i]];
        ++parea[p[i]];
        if (g[i] != 0 && p[i] != 0) {
            ++inter[g[i]][p[i]];
        }
    }

    AjiTerms t;
    std::vector<bool> used(np + 1, false);
    for (std::uint32_t gi = 1; gi <= ng; ++gi) {
        std::uint32_t best = 0;
        std::uint64_t best_i = 0;
        std::uint64_t best_u = 1;
        for (const auto& [pj, i] : inter[gi]) {
            const std::uint64_t u = garea[gi] + parea[pj] - i;
            // i / u > best_i / best_u, or equal with a lower id
            const auto lhs = static_cast<unsigned __int128>(i) * best_u;
            const auto rhs = static_cast<unsigned __int128>(best_i) * u;
            if (lhs > rhs || (lhs == rhs && best != 0 && pj < best)) {
                best = pj;
                best_i = i;
                best_u = u;
            }
        }
        if (best == 0) {
            t.denominator += garea[gi];
        } else {
            t.numerator += best_i;
            t.denominator += best_u;
            used[best] = true;
        }
    }
    for (std::uint32_t pj = 1; pj <= np; ++pj) {
        if (!used[pj]) {
            t.denominator += parea[pj];
        }
    }
    return t;
}

inline double aji(const InstanceLabelMap& gt, const InstanceLabelMap& pred) {
    const AjiTerms t = aji_terms(gt, pred);
    if (t.denominator == 0) {
        return 1.0;
    }
    return static_cast<double>(t.numerator) / static_cast<double>(t.denominator);
}

inline double dice(const InstanceLabelMap& gt, const InstanceLabelMap& pred) {
    detail::require_same_shape(gt, pred);
    std::uint64_t a = 0, b = 0, both = 0;
    for (std::size_t i = 0; i < gt.values.size(); ++i) {
        const bool g = gt.values[i] != 0;
        const bool p = pred.values[i] != 0;
        a += g;
        b += p;
        both += g && p;
    }
    if (a + b == 0) {
        return 1.0;
    }
    return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

struct ImageScore {
    std::string image_id;
    double aji = 0.0;
    double dice = 0.0;
};

struct EvalReport {
    std::vector<ImageScore> images;

    double mean_aji() const { return mean(&ImageScore::aji); }
    double mean_dice() const { return mean(&ImageScore::dice); }

    // image_id,aji,dice per image, then a final "mean" row.
    void write_csv(const std::filesystem::path& path) const {
        if (path.has_parent_path()) {
            std::filesystem::create_directories(path.parent_path());
        }
        std::ofstream out(path);
        if (!out) {
            throw IoError("cannot write report '" + path.string() + "'");
        }
        out.precision(10);
        out << "image_id,aji,dice\n";
        for (const auto& s : images) {
            out << s.image_id << ',' << s.aji << ',' << s.dice << '\n';
        }
        out << "mean," << mean_aji() << ',' << mean_dice() << '\n';
    }

private:
    double mean(double ImageScore::*field) const {
        if (images.empty()) {
            return std::numeric_limits<double>::quiet_NaN();
        }
        double s = 0.0;
        for (const auto& im : images) {
            s += im.*field;
        }
        return s / static_cast<double>(images.size());
    }
};

using InstancePredictor = std::function<InstanceLabelMap(const DatasetEntry&, const RgbImage&)>;

// Scores `predict` on every labelled image of a split.
inline EvalReport evaluate_dataset(const DatasetIndex& dataset, Split split, const InstancePredictor& predict) {
    const auto entries = dataset.in_split(split);
    if (entries.empty()) {
        throw IoError(std::string("split '") + to_string(split) + "' is empty");
    }
    EvalReport report;
    for (const auto& e : entries) {
        if (!e.label_path) {
            throw IoError("image '" + e.stem + "' has no label map");
        }
        const RgbImage img = read_image(e.image_path);
        const InstanceLabelMap gt = read_label_map(*e.label_path);
        if (gt.height != img.height || gt.width != img.width) {
            throw ShapeError("label map of '" + e.stem + "' does not match its image size");
        }
        const InstanceLabelMap pred = predict(e, img);
        report.images.push_back({e.stem, aji(gt, pred), dice(gt, pred)});
    }
    return report;
}

} // namespace nucssl
