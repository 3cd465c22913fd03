#pragma once

// Scale-wise triplet loss, count ranking loss and their sum.
//
//   L_ST = sum_i max(0, d(za, zp) - d(za, zn) + m1),   d = squared L2
//   L_CR = sum_i max(0, f(zn) - f(zp) + m2)
//   L    = L_ST + L_CR
//
// The sum runs over the mini-batch; `Reduction::mean` divides by the batch
// size instead. At the hinge kink (argument exactly 0) the subgradient is 0.

#include <cmath>
#include <string>
#include <vector>

#include "nucssl/embedder.hpp"
#include "nucssl/errors.hpp"

namespace nucssl {

enum class Reduction { sum, mean };

inline const char* to_string(Reduction r) { return r == Reduction::sum ? "sum" : "mean"; }

inline Reduction parse_reduction(const std::string& s) {
    if (s == "sum") {
        return Reduction::sum;
    }
    if (s == "mean") {
        return Reduction::mean;
    }
    throw ConfigError("loss.reduce must be 'sum' or 'mean', got '" + s + "'");
}

struct LossConfig {
    double m1 = 1.0;
    double m2 = 1.0;
    Reduction reduce = Reduction::sum;

    void validate() const {
        if (!(m1 >= 0.0) || !(m2 >= 0.0)) {
            throw ConfigError("loss margins must be >= 0");
        }
    }

    friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

struct TripletEmbedding {
    EmbeddingVec anchor;
    EmbeddingVec positive;
    EmbeddingVec negative;
};

using TripletEmbeddings = std::vector<TripletEmbedding>;

inline double squared_l2(const EmbeddingVec& a, const EmbeddingVec& b) {
    if (a.size() != b.size()) {
        throw ShapeError("squared_l2 dimension mismatch");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

namespace detail {

inline void check_batch(const TripletEmbeddings& batch) {
    if (batch.empty()) {
        throw ShapeError("empty triplet batch");
    }
    const std::size_t dim = batch.front().anchor.size();
    for (const auto& t : batch) {
        if (t.anchor.size() != dim || t.positive.size() != dim || t.negative.size() != dim) {
            throw ShapeError("inconsistent embedding dimensions in batch");
        }
    }
}

inline double reduce_factor(const LossConfig& cfg, std::size_t n) {
    return cfg.reduce == Reduction::mean ? 1.0 / static_cast<double>(n) : 1.0;
}

} // namespace detail

inline double triplet_hinge_argument(const TripletEmbedding& t, double m1) {
    return squared_l2(t.anchor, t.positive) - squared_l2(t.anchor, t.negative) + m1;
}

inline double ranking_hinge_argument(const TripletEmbedding& t, const CountScorerParams& scorer, double m2) {
    return count_score(scorer, t.negative) - count_score(scorer, t.positive) + m2;
}

inline double scale_triplet_loss(const TripletEmbeddings& batch, const LossConfig& cfg) {
    detail::check_batch(batch);
    double total = 0.0;
    for (const auto& t : batch) {
        total += std::max(0.0, triplet_hinge_argument(t, cfg.m1));
    }
    return total * detail::reduce_factor(cfg, batch.size());
}

// Only the positive and negative embeddings of each entry are used.
inline double count_ranking_loss(const TripletEmbeddings& batch, const CountScorerParams& scorer, const LossConfig& cfg) {
    detail::check_batch(batch);
    double total = 0.0;
    for (const auto& t : batch) {
        total += std::max(0.0, ranking_hinge_argument(t, scorer, cfg.m2));
    }
    return total * detail::reduce_factor(cfg, batch.size());
}

inline double total_loss(double l_st, double l_cr) { return l_st + l_cr; }

struct ProxyLossTerms {
    bool use_triplet = true;
    bool use_ranking = true;
};

struct LossGradients {
    double l_st = 0.0;
    double l_cr = 0.0;
    double total = 0.0;
    // d total / d z, per batch entry
    std::vector<EmbeddingVec> d_anchor;
    std::vector<EmbeddingVec> d_positive;
    std::vector<EmbeddingVec> d_negative;
    CountScorerParams d_scorer;
};

// Loss values and analytic gradients with respect to every embedding and the
// scorer parameters. Disabled terms contribute neither value nor gradient.
inline LossGradients proxy_loss_with_gradients(const TripletEmbeddings& batch, const CountScorerParams& scorer,
                                               const LossConfig& cfg, ProxyLossTerms terms = {}) {
    detail::check_batch(batch);
    const std::size_t n = batch.size();
    const std::size_t dim = batch.front().anchor.size();
    const double k = detail::reduce_factor(cfg, n);

    LossGradients g;
    g.d_anchor.assign(n, EmbeddingVec{std::vector<double>(dim, 0.0)});
    g.d_positive.assign(n, EmbeddingVec{std::vector<double>(dim, 0.0)});
    g.d_negative.assign(n, EmbeddingVec{std::vector<double>(dim, 0.0)});
    g.d_scorer.weight.assign(scorer.weight.size(), 0.0);
    g.d_scorer.bias = 0.0;

    for (std::size_t i = 0; i < n; ++i) {
        const TripletEmbedding& t = batch[i];
        if (terms.use_triplet) {
            const double arg = triplet_hinge_argument(t, cfg.m1);
            if (arg > 0.0) {
                g.l_st += arg;
                for (std::size_t j = 0; j < dim; ++j) {
                    const double a = t.anchor[j];
                    const double p = t.positive[j];
                    const double q = t.negative[j];
                    g.d_anchor[i][j] += k * 2.0 * (q - p);
                    g.d_positive[i][j] += k * -2.0 * (a - p);
                    g.d_negative[i][j] += k * 2.0 * (a - q);
                }
            }
        }
        if (terms.use_ranking) {
            const double arg = ranking_hinge_argument(t, scorer, cfg.m2);
            if (arg > 0.0) {
                g.l_cr += arg;
                for (std::size_t j = 0; j < dim; ++j) {
                    g.d_negative[i][j] += k * scorer.weight[j];
                    g.d_positive[i][j] -= k * scorer.weight[j];
                    g.d_scorer.weight[j] += k * (t.negative[j] - t.positive[j]);
                }
            }
        }
    }
    g.l_st *= k;
    g.l_cr *= k;
    g.total = total_loss(g.l_st, g.l_cr);
    return g;
}

} // namespace nucssl
