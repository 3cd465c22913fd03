#pragma once

// Proxy-task pretraining: sample triplets, embed all three patches with the
// one shared encoder, minimise L = L_ST + L_CR.
//
// Determinism: every random draw is derived from (seed, step, slot), so a run
// resumed from a checkpoint at step k reproduces the uninterrupted run
// bit-for-bit.

#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nucssl/dataio.hpp"
#include "nucssl/embedder.hpp"
#include "nucssl/errors.hpp"
#include "nucssl/losses.hpp"
#include "nucssl/optim.hpp"
#include "nucssl/random.hpp"
#include "nucssl/sampler.hpp"

namespace nucssl {

struct PretrainConfig {
    int steps = 2000;
    int batch_size = 4;
    OptimizerConfig optimizer{"rmsprop", 1e-3};
    std::uint64_t seed = 0;
    int log_every = 100;
    int checkpoint_every = 0;  // 0: final checkpoint only
    int heldout_pool_size = 64;
    std::uint64_t heldout_seed = 977;
    // Reuse the step-1 triplets at every step.
    bool fixed_sampling = false;
    ProxyLossTerms terms;

    SamplerConfig sampler;
    LossConfig loss;
    EncoderConfig encoder;

    void validate() const {
        if (steps < 1) {
            throw ConfigError("pretrain.steps must be >= 1");
        }
        if (batch_size < 1) {
            throw ConfigError("pretrain.batch_size must be >= 1");
        }
        if (log_every < 0 || checkpoint_every < 0 || heldout_pool_size < 0) {
            throw ConfigError("pretrain intervals and pool size must be >= 0");
        }
        if (!terms.use_triplet && !terms.use_ranking) {
            throw ConfigError("at least one proxy loss term must be enabled");
        }
        optimizer.validate();
        sampler.validate();
        loss.validate();
        encoder.validate();
        if (encoder.input_size != sampler.crop_size) {
            throw ConfigError("encoder.input_size (" + std::to_string(encoder.input_size) +
                              ") must equal sampler.crop_size (" + std::to_string(sampler.crop_size) + ")");
        }
    }
};

template <std::floating_point T>
using TripletInput = std::array<Tensor<T>, 3>;

template <std::floating_point T>
TripletInput<T> to_input(const Triplet& t) {
    return {to_tensor<T>(t.anchor), to_tensor<T>(t.positive), to_tensor<T>(t.negative)};
}

template <std::floating_point T>
EmbeddingVec as_embedding(const std::vector<T>& v) {
    return EmbeddingVec{std::vector<double>(v.begin(), v.end())};
}

template <std::floating_point T>
struct ProxyStep {
    LossGradients loss;
    std::vector<T> encoder_grad;
    // Smallest |hinge argument| over the batch; gradient checks stay away from 0.
    double min_abs_hinge = std::numeric_limits<double>::infinity();
};

// Loss and full parameter gradients for one batch of triplets.
template <std::floating_point T>
ProxyStep<T> proxy_forward_backward(const Encoder<T>& encoder, const CountScorerParams& scorer,
                                    std::span<const TripletInput<T>> batch, const LossConfig& cfg,
                                    ProxyLossTerms terms = {}) {
    std::vector<std::array<EncoderTrace<T>, 3>> traces;
    traces.reserve(batch.size());
    TripletEmbeddings emb;
    emb.reserve(batch.size());
    for (const auto& in : batch) {
        std::array<EncoderTrace<T>, 3> tr{encoder.forward(in[0]), encoder.forward(in[1]), encoder.forward(in[2])};
        emb.push_back({as_embedding(tr[0].embedding), as_embedding(tr[1].embedding), as_embedding(tr[2].embedding)});
        traces.push_back(std::move(tr));
    }

    ProxyStep<T> out;
    out.loss = proxy_loss_with_gradients(emb, scorer, cfg, terms);
    for (const auto& t : emb) {
        if (terms.use_triplet) {
            out.min_abs_hinge = std::min(out.min_abs_hinge, std::abs(triplet_hinge_argument(t, cfg.m1)));
        }
        if (terms.use_ranking) {
            out.min_abs_hinge = std::min(out.min_abs_hinge, std::abs(ranking_hinge_argument(t, scorer, cfg.m2)));
        }
    }
    out.encoder_grad.assign(encoder.parameter_count(), T(0));
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const EmbeddingVec* grads[3] = {&out.loss.d_anchor[i], &out.loss.d_positive[i], &out.loss.d_negative[i]};
        for (int k = 0; k < 3; ++k) {
            std::vector<T> gz(grads[k]->values.begin(), grads[k]->values.end());
            encoder.backward(traces[i][k], {}, gz, out.encoder_grad);
        }
    }
    return out;
}

// Forward-only loss value for one batch (finite-difference checks, evaluation).
template <std::floating_point T>
double proxy_loss(const Encoder<T>& encoder, const CountScorerParams& scorer, std::span<const TripletInput<T>> batch,
                  const LossConfig& cfg, ProxyLossTerms terms = {}) {
    TripletEmbeddings emb;
    for (const auto& in : batch) {
        emb.push_back({as_embedding(encoder.forward(in[0]).embedding), as_embedding(encoder.forward(in[1]).embedding),
                       as_embedding(encoder.forward(in[2]).embedding)});
    }
    const double st = terms.use_triplet ? scale_triplet_loss(emb, cfg) : 0.0;
    const double cr = terms.use_ranking ? count_ranking_loss(emb, scorer, cfg) : 0.0;
    return total_loss(st, cr);
}

inline bool embeddings_meet_margins(const TripletEmbedding& t, const CountScorerParams& scorer, const LossConfig& cfg) {
    return squared_l2(t.anchor, t.negative) >= squared_l2(t.anchor, t.positive) + cfg.m1 &&
           count_score(scorer, t.positive) >= count_score(scorer, t.negative) + cfg.m2;
}

// Fraction of triplets meeting both margins in full:
//   d(za, zn) >= d(za, zp) + m1  and  f(zp) >= f(zn) + m2
template <std::floating_point T>
double margin_satisfaction_rate(const Encoder<T>& encoder, const CountScorerParams& scorer,
                                std::span<const Triplet> pool, const LossConfig& cfg) {
    if (pool.empty()) {
        throw ShapeError("margin_satisfaction_rate requires a non-empty pool");
    }
    std::size_t ok = 0;
    for (const Triplet& t : pool) {
        const EmbeddingVec za = encoder.embed(t.anchor);
        const EmbeddingVec zp = encoder.embed(t.positive);
        const EmbeddingVec zn = encoder.embed(t.negative);
        if (embeddings_meet_margins({za, zp, zn}, scorer, cfg)) {
            ++ok;
        }
    }
    return static_cast<double>(ok) / static_cast<double>(pool.size());
}

struct PretrainRecord {
    int step = 0;
    double l_st = 0.0;
    double l_cr = 0.0;
    double l_total = 0.0;
    double msr = std::numeric_limits<double>::quiet_NaN();  // only on evaluation steps
};

struct PretrainReport {
    std::vector<PretrainRecord> records;
    double initial_msr = std::numeric_limits<double>::quiet_NaN();

    // Columns: step,l_st,l_cr,l_total,msr (msr empty on non-evaluation steps).
    void write_csv(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) {
            throw IoError("cannot write report '" + path.string() + "'");
        }
        out.precision(10);
        out << "step,l_st,l_cr,l_total,msr\n";
        for (const auto& r : records) {
            out << r.step << ',' << r.l_st << ',' << r.l_cr << ',' << r.l_total << ',';
            if (!std::isnan(r.msr)) {
                out << r.msr;
            }
            out << '\n';
        }
    }
};

struct PretrainResult {
    Encoder<float> encoder;
    CountScorerParams scorer;
    PretrainReport report;
};

struct PretrainOptions {
    std::optional<std::filesystem::path> checkpoint_dir;
    std::optional<Checkpoint> resume;
    std::string config_snapshot;
    // Stop after this step (<= cfg.steps); used to split a run for resume checks.
    std::optional<int> stop_after;
    std::function<void(const PretrainRecord&)> on_record;
};

namespace detail {

inline ParamBlob pack_optimizer_states(const Optimizer& enc, const Optimizer& scorer) {
    const ParamBlob a = enc.state();
    const ParamBlob b = scorer.state();
    ParamBlob out;
    out.architecture = a.architecture + "|" + b.architecture;
    out.values.push_back(static_cast<double>(a.values.size()));
    out.values.insert(out.values.end(), a.values.begin(), a.values.end());
    out.values.insert(out.values.end(), b.values.begin(), b.values.end());
    return out;
}

inline void unpack_optimizer_states(const ParamBlob& packed, Optimizer& enc, Optimizer& scorer) {
    const auto bar = packed.architecture.find('|');
    if (bar == std::string::npos || packed.values.empty()) {
        throw SchemaError("malformed optimizer state in checkpoint");
    }
    const auto n = static_cast<std::size_t>(packed.values[0]);
    if (n + 1 > packed.values.size()) {
        throw SchemaError("malformed optimizer state in checkpoint");
    }
    ParamBlob a{packed.architecture.substr(0, bar), {packed.values.begin() + 1, packed.values.begin() + 1 + static_cast<std::ptrdiff_t>(n)}};
    ParamBlob b{packed.architecture.substr(bar + 1), {packed.values.begin() + 1 + static_cast<std::ptrdiff_t>(n), packed.values.end()}};
    enc.restore(a);
    scorer.restore(b);
}

inline std::vector<RgbImage> load_images(const std::vector<DatasetEntry>& entries) {
    std::vector<RgbImage> out;
    out.reserve(entries.size());
    for (const auto& e : entries) {
        out.push_back(read_image(e.image_path));
    }
    return out;
}

} // namespace detail

// Held-out pool drawn from `images` with a fixed seed.
inline std::vector<Triplet> make_heldout_pool(const std::vector<RgbImage>& images, int size, std::uint64_t seed,
                                              const SamplerConfig& sampler) {
    std::vector<Triplet> pool;
    if (images.empty()) {
        return pool;
    }
    for (int i = 0; i < size; ++i) {
        const RgbImage& img = images[static_cast<std::size_t>(i) % images.size()];
        pool.push_back(sample_triplet(img, derive_seed(seed, {static_cast<std::uint64_t>(i)}), sampler));
    }
    return pool;
}

inline Checkpoint make_pretrain_checkpoint(const Encoder<float>& enc, const CountScorerParams& scorer,
                                           const Optimizer& enc_opt, const Optimizer& scorer_opt,
                                           const std::string& snapshot, int step) {
    Checkpoint c;
    c.encoder = enc.to_blob();
    c.scorer = scorer.to_blob();
    c.optimizer_state = detail::pack_optimizer_states(enc_opt, scorer_opt);
    c.config_snapshot = snapshot;
    c.step = static_cast<std::uint64_t>(step);
    return c;
}

// Pretrains on already-decoded images. `train` supplies triplets; `heldout`
// (may be empty) supplies the margin-satisfaction pool.
inline PretrainResult pretrain_on_images(const std::vector<RgbImage>& train, const std::vector<RgbImage>& heldout,
                                         const PretrainConfig& cfg, const PretrainOptions& opts = {}) {
    cfg.validate();
    if (train.empty()) {
        throw IoError("pretraining requires a non-empty train split");
    }
    for (const auto& img : train) {
        if (img.height < cfg.sampler.crop_size || img.width < cfg.sampler.crop_size) {
            throw ShapeError("training image smaller than the pretraining crop size");
        }
    }

    PretrainResult res{Encoder<float>(cfg.encoder),
                       CountScorerParams::initial(cfg.encoder.embedding_dim, derive_seed(cfg.encoder.init_seed, {0x66ULL})),
                       {}};
    Optimizer enc_opt(cfg.optimizer, res.encoder.parameter_count());
    Optimizer scorer_opt(cfg.optimizer, res.scorer.weight.size() + 1);

    int start_step = 1;
    if (opts.resume) {
        res.encoder.load_blob(opts.resume->encoder);
        if (!opts.resume->scorer || !opts.resume->optimizer_state) {
            throw SchemaError("resume checkpoint lacks scorer or optimizer state");
        }
        res.scorer = CountScorerParams::from_blob(*opts.resume->scorer);
        detail::unpack_optimizer_states(*opts.resume->optimizer_state, enc_opt, scorer_opt);
        start_step = static_cast<int>(opts.resume->step) + 1;
    }

    const std::vector<Triplet> pool =
        make_heldout_pool(heldout.empty() ? train : heldout, cfg.heldout_pool_size, cfg.heldout_seed, cfg.sampler);
    if (!pool.empty() && !opts.resume) {
        res.report.initial_msr = margin_satisfaction_rate<float>(res.encoder, res.scorer, pool, cfg.loss);
    }

    const std::size_t n_images = train.size();
    const int last_step = opts.stop_after ? std::min(*opts.stop_after, cfg.steps) : cfg.steps;
    std::vector<double> scorer_params(res.scorer.weight.size() + 1);
    std::vector<double> scorer_grad(scorer_params.size());

    for (int step = start_step; step <= last_step; ++step) {
        const int sample_step = cfg.fixed_sampling ? 1 : step;
        std::vector<TripletInput<float>> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            // One triplet per image, images cycled in a per-epoch seeded order.
            const auto g = static_cast<std::uint64_t>(sample_step - 1) * static_cast<std::uint64_t>(cfg.batch_size) +
                           static_cast<std::uint64_t>(b);
            const std::uint64_t epoch = g / n_images;
            std::vector<std::size_t> order(n_images);
            for (std::size_t i = 0; i < n_images; ++i) {
                order[i] = i;
            }
            Rng perm(derive_seed(cfg.seed, {0x6570ULL, epoch}));
            perm.shuffle(order.begin(), order.end());
            const RgbImage& img = train[order[g % n_images]];
            const Triplet t = sample_triplet(
                img, derive_seed(cfg.seed, {0x7472ULL, static_cast<std::uint64_t>(sample_step), static_cast<std::uint64_t>(b)}),
                cfg.sampler);
            batch.push_back(to_input<float>(t));
        }

        ProxyStep<float> ps = proxy_forward_backward<float>(res.encoder, res.scorer, batch, cfg.loss, cfg.terms);
        if (!std::isfinite(ps.loss.total)) {
            throw DivergenceError("non-finite loss at pretraining step " + std::to_string(step) + " (L_ST=" +
                                  std::to_string(ps.loss.l_st) + ", L_CR=" + std::to_string(ps.loss.l_cr) + ")");
        }

        PretrainRecord rec{step, ps.loss.l_st, ps.loss.l_cr, ps.loss.total};

        enc_opt.step<float, float>(res.encoder.parameters(), ps.encoder_grad);
        std::copy(res.scorer.weight.begin(), res.scorer.weight.end(), scorer_params.begin());
        scorer_params.back() = res.scorer.bias;
        std::copy(ps.loss.d_scorer.weight.begin(), ps.loss.d_scorer.weight.end(), scorer_grad.begin());
        scorer_grad.back() = ps.loss.d_scorer.bias;
        scorer_opt.step<double, double>(scorer_params, scorer_grad);
        std::copy(scorer_params.begin(), scorer_params.end() - 1, res.scorer.weight.begin());
        res.scorer.bias = scorer_params.back();

        const bool eval_now = cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.steps);
        if (eval_now && !pool.empty()) {
            rec.msr = margin_satisfaction_rate<float>(res.encoder, res.scorer, pool, cfg.loss);
        }
        res.report.records.push_back(rec);
        if (opts.on_record) {
            opts.on_record(rec);
        }

        if (opts.checkpoint_dir && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            save_checkpoint(make_pretrain_checkpoint(res.encoder, res.scorer, enc_opt, scorer_opt, opts.config_snapshot, step),
                            *opts.checkpoint_dir / ("pretrain_step" + std::to_string(step) + ".ckpt"));
        }
    }

    if (opts.checkpoint_dir) {
        save_checkpoint(
            make_pretrain_checkpoint(res.encoder, res.scorer, enc_opt, scorer_opt, opts.config_snapshot, last_step),
            *opts.checkpoint_dir / "encoder.ckpt");
    }
    return res;
}

// Dataset front end: train split feeds triplets, val split the held-out pool
// (the train split stands in when val is empty).
inline PretrainResult pretrain(const DatasetIndex& dataset, const PretrainConfig& cfg, const PretrainOptions& opts = {}) {
    const auto train = dataset.in_split(Split::train);
    if (train.empty()) {
        throw IoError("pretraining requires a non-empty train split");
    }
    return pretrain_on_images(detail::load_images(train), detail::load_images(dataset.in_split(Split::val)), cfg, opts);
}

} // namespace nucssl
