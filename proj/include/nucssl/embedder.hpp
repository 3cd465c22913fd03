#pragma once

// Shared-weight patch encoder E and the count scorer f.
//
// One Encoder object holds one parameter vector; anchor, positive and
// negative patches are all embedded by calling the same object, so weight
// sharing holds by construction.
//
// The encoder is a stack of stages. Each stage output is a "tap" (the skip
// connections the segmenter's decoder consumes); taps sit at strides 2, 4,
// 8, ... The embedding head is global average pooling over the last tap
// followed by a linear projection to embedding_dim. Layer tables for the
// presets are in docs/architectures.md.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nucssl/dataio.hpp"
#include "nucssl/errors.hpp"
#include "nucssl/image.hpp"
#include "nucssl/nn.hpp"
#include "nucssl/random.hpp"

namespace nucssl {

inline constexpr const char* kToyCnn = "toy-cnn";
inline constexpr const char* kResUNet101Encoder = "resunet101-encoder";

struct EncoderConfig {
    std::string architecture = kToyCnn;
    int input_size = 64;
    int embedding_dim = 128;
    // Base channel width: toy-cnn stages use width x {1, 2, 4, 8};
    // resunet101-encoder uses width as the stem width (64 in the reference net).
    int width = 16;
    std::uint64_t init_seed = 0;

    void validate() const {
        if (architecture != kToyCnn && architecture != kResUNet101Encoder) {
            throw ConfigError("unknown encoder architecture '" + architecture + "'");
        }
        if (embedding_dim < 1) {
            throw ConfigError("encoder.embedding_dim must be >= 1");
        }
        if (input_size < 1) {
            throw ConfigError("encoder.input_size must be >= 1");
        }
        if (width < 1) {
            throw ConfigError("encoder.width must be >= 1");
        }
    }

    // Everything that determines the parameter layout.
    std::string signature() const {
        return architecture + "/width=" + std::to_string(width) + "/embed=" + std::to_string(embedding_dim);
    }

    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct ConvUnit {
    ConvShape shape;
    std::size_t weight_offset = 0;
    std::size_t bias_offset = 0;
};

struct EncoderBlock {
    bool bottleneck = false;
    // plain: {conv + ReLU}; bottleneck: {1x1 reduce, 3x3 (strided), 1x1 expand}
    std::vector<ConvUnit> convs;
    std::optional<ConvUnit> projection;
};

struct EncoderStage {
    bool leading_pool = false;
    std::vector<EncoderBlock> blocks;
    int out_channels = 0;
    int stride = 1;  // cumulative, relative to the input
};

struct EncoderLayout {
    std::vector<EncoderStage> stages;
    std::size_t head_weight_offset = 0;
    std::size_t head_bias_offset = 0;
    int feature_channels = 0;
    int embedding_dim = 0;
    std::size_t param_count = 0;

    int total_stride() const { return stages.back().stride; }
};

namespace detail {

class LayoutBuilder {
public:
    ConvUnit conv(int in, int out, int k, int stride) {
        ConvUnit u;
        u.shape = {in, out, k, stride};
        u.weight_offset = next_;
        next_ += u.shape.weight_count();
        u.bias_offset = next_;
        next_ += static_cast<std::size_t>(out);
        return u;
    }
    std::size_t reserve(std::size_t n) {
        const std::size_t at = next_;
        next_ += n;
        return at;
    }
    std::size_t size() const { return next_; }

private:
    std::size_t next_ = 0;
};

inline EncoderLayout build_toy_cnn(const EncoderConfig& cfg, LayoutBuilder& b) {
    EncoderLayout L;
    int in = 3;
    int stride = 1;
    for (int s = 0; s < 4; ++s) {
        const int out = cfg.width << s;
        stride *= 2;
        EncoderStage st;
        EncoderBlock blk;
        blk.convs.push_back(b.conv(in, out, 3, 2));
        st.blocks.push_back(std::move(blk));
        st.out_channels = out;
        st.stride = stride;
        L.stages.push_back(std::move(st));
        in = out;
    }
    return L;
}

// Bottleneck residual stages [3, 4, 23, 3]; convolutions carry biases in
// place of batch normalisation and the last 1x1 of every residual branch is
// zero-initialised, so each block starts as identity (plus projection).
inline EncoderLayout build_resnet101(const EncoderConfig& cfg, LayoutBuilder& b) {
    EncoderLayout L;
    const int stem = cfg.width;
    EncoderStage s0;
    EncoderBlock stem_blk;
    stem_blk.convs.push_back(b.conv(3, stem, 7, 2));
    s0.blocks.push_back(std::move(stem_blk));
    s0.out_channels = stem;
    s0.stride = 2;
    L.stages.push_back(std::move(s0));

    const int depths[4] = {3, 4, 23, 3};
    int in = stem;
    int stride = 2;
    for (int s = 0; s < 4; ++s) {
        const int mid = stem << s;
        const int out = mid * 4;
        EncoderStage st;
        st.leading_pool = (s == 0);
        if (s == 0) {
            stride *= 2;
        }
        for (int k = 0; k < depths[s]; ++k) {
            const int conv_stride = (k == 0 && s > 0) ? 2 : 1;
            EncoderBlock blk;
            blk.bottleneck = true;
            blk.convs.push_back(b.conv(in, mid, 1, 1));
            blk.convs.push_back(b.conv(mid, mid, 3, conv_stride));
            blk.convs.push_back(b.conv(mid, out, 1, 1));
            if (k == 0) {
                blk.projection = b.conv(in, out, 1, conv_stride);
            }
            st.blocks.push_back(std::move(blk));
            in = out;
        }
        if (s > 0) {
            stride *= 2;
        }
        st.out_channels = out;
        st.stride = stride;
        L.stages.push_back(std::move(st));
    }
    return L;
}

} // namespace detail

inline EncoderLayout build_encoder_layout(const EncoderConfig& cfg) {
    cfg.validate();
    detail::LayoutBuilder b;
    EncoderLayout L = cfg.architecture == kToyCnn ? detail::build_toy_cnn(cfg, b) : detail::build_resnet101(cfg, b);
    L.feature_channels = L.stages.back().out_channels;
    L.embedding_dim = cfg.embedding_dim;
    L.head_weight_offset = b.reserve(static_cast<std::size_t>(cfg.embedding_dim) * L.feature_channels);
    L.head_bias_offset = b.reserve(static_cast<std::size_t>(cfg.embedding_dim));
    L.param_count = b.size();
    return L;
}

struct EmbeddingVec {
    std::vector<double> values;

    std::size_t size() const { return values.size(); }
    double operator[](std::size_t i) const { return values[i]; }
    double& operator[](std::size_t i) { return values[i]; }
    bool finite() const {
        return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const EmbeddingVec&, const EmbeddingVec&) = default;
};

template <std::floating_point T>
struct BlockTrace {
    Tensor<T> input;
    // Post-activation outputs of the block's convolutions; for bottlenecks
    // the last entry is the raw expand output before the residual add.
    std::vector<Tensor<T>> conv_outputs;
    Tensor<T> output;
};

template <std::floating_point T>
struct EncoderTrace {
    std::vector<Tensor<T>> stage_inputs;
    std::vector<std::vector<std::uint32_t>> pool_argmax;
    std::vector<std::vector<BlockTrace<T>>> blocks;
    std::vector<T> pooled;
    std::vector<T> embedding;

    const Tensor<T>& tap(std::size_t s) const { return blocks[s].back().output; }
    std::size_t tap_count() const { return blocks.size(); }
};

namespace detail {

// Fan-in scaled uniform: bound sqrt(6 / fan_in) for layers feeding a ReLU,
// sqrt(3 / fan_in) otherwise. Biases start at zero.
template <std::floating_point T>
void init_conv(const ConvUnit& u, std::span<T> params, Rng& rng, double gain_sq, bool zero = false) {
    const double fan_in = static_cast<double>(u.shape.in_channels) * u.shape.kernel * u.shape.kernel;
    const double bound = std::sqrt(gain_sq / fan_in);
    for (std::size_t i = 0; i < u.shape.weight_count(); ++i) {
        const double r = rng.uniform(-bound, bound);
        params[u.weight_offset + i] = zero ? T(0) : static_cast<T>(r);
    }
    for (int i = 0; i < u.shape.out_channels; ++i) {
        params[u.bias_offset + static_cast<std::size_t>(i)] = T(0);
    }
}

} // namespace detail

template <std::floating_point T>
class Encoder {
public:
    explicit Encoder(EncoderConfig cfg) : cfg_(std::move(cfg)), layout_(build_encoder_layout(cfg_)) {
        params_.assign(layout_.param_count, T(0));
        Rng rng(cfg_.init_seed);
        for (const auto& st : layout_.stages) {
            for (const auto& blk : st.blocks) {
                for (std::size_t c = 0; c < blk.convs.size(); ++c) {
                    const bool last_of_branch = blk.bottleneck && c + 1 == blk.convs.size();
                    detail::init_conv(blk.convs[c], std::span<T>(params_), rng, last_of_branch ? 3.0 : 6.0,
                                      last_of_branch);
                }
                if (blk.projection) {
                    detail::init_conv(*blk.projection, std::span<T>(params_), rng, 3.0);
                }
            }
        }
        const double bound = std::sqrt(3.0 / layout_.feature_channels);
        for (std::size_t i = 0; i < static_cast<std::size_t>(layout_.embedding_dim) * layout_.feature_channels; ++i) {
            params_[layout_.head_weight_offset + i] = static_cast<T>(rng.uniform(-bound, bound));
        }
    }

    const EncoderConfig& config() const { return cfg_; }
    const EncoderLayout& layout() const { return layout_; }
    std::size_t parameter_count() const { return params_.size(); }
    std::span<T> parameters() { return params_; }
    std::span<const T> parameters() const { return params_; }

    // Runs the conv stages, and the embedding head when `with_head`.
    EncoderTrace<T> forward(Tensor<T> input, bool with_head = true) const {
        EncoderTrace<T> tr;
        tr.stage_inputs.reserve(layout_.stages.size());
        tr.pool_argmax.resize(layout_.stages.size());
        tr.blocks.resize(layout_.stages.size());
        Tensor<T> x = std::move(input);
        for (std::size_t s = 0; s < layout_.stages.size(); ++s) {
            const EncoderStage& st = layout_.stages[s];
            tr.stage_inputs.push_back(x);
            if (st.leading_pool) {
                Tensor<T> pooled;
                maxpool_forward(x, pooled, tr.pool_argmax[s]);
                x = std::move(pooled);
            }
            for (const EncoderBlock& blk : st.blocks) {
                BlockTrace<T> bt;
                bt.input = std::move(x);
                x = block_forward(blk, bt);
                bt.output = x;
                tr.blocks[s].push_back(std::move(bt));
            }
        }
        if (with_head) {
            tr.pooled = global_average_pool(x);
            tr.embedding = linear_forward<T>(head_weight(), head_bias(), tr.pooled);
        }
        return tr;
    }

    // grad_taps: one entry per stage (empty tensor = no gradient there);
    // grad_embedding: empty when the head is unused. Accumulates into param_grad.
    void backward(const EncoderTrace<T>& tr, std::span<const Tensor<T>> grad_taps, std::span<const T> grad_embedding,
                  std::span<T> param_grad) const {
        const std::size_t n_stages = layout_.stages.size();
        const Tensor<T>& last = tr.tap(n_stages - 1);
        Tensor<T> g(last.channels, last.height, last.width);
        if (!grad_embedding.empty()) {
            const std::vector<T> gpool = linear_backward<T>(
                head_weight(), tr.pooled, grad_embedding,
                param_grad.subspan(layout_.head_weight_offset,
                                   static_cast<std::size_t>(layout_.embedding_dim) * layout_.feature_channels),
                param_grad.subspan(layout_.head_bias_offset, static_cast<std::size_t>(layout_.embedding_dim)));
            global_average_pool_backward<T>(gpool, g);
        }
        for (std::size_t s = n_stages; s-- > 0;) {
            if (s < grad_taps.size() && !grad_taps[s].empty()) {
                add_into(g, grad_taps[s]);
            }
            const EncoderStage& st = layout_.stages[s];
            for (std::size_t b = st.blocks.size(); b-- > 0;) {
                const bool need_input_grad = !(s == 0 && b == 0 && !st.leading_pool);
                g = block_backward(st.blocks[b], tr.blocks[s][b], std::move(g), param_grad, need_input_grad);
            }
            if (st.leading_pool) {
                const Tensor<T>& in = tr.stage_inputs[s];
                Tensor<T> gin(in.channels, in.height, in.width);
                maxpool_backward(g, tr.pool_argmax[s], gin);
                g = std::move(gin);
            }
        }
    }

    EmbeddingVec embed(const RgbImage& patch) const {
        if (patch.height != cfg_.input_size || patch.width != cfg_.input_size) {
            throw ShapeError("patch is " + std::to_string(patch.height) + "x" + std::to_string(patch.width) +
                             ", encoder expects " + std::to_string(cfg_.input_size) + "x" +
                             std::to_string(cfg_.input_size));
        }
        const EncoderTrace<T> tr = forward(to_tensor<T>(patch));
        EmbeddingVec z;
        z.values.assign(tr.embedding.begin(), tr.embedding.end());
        return z;
    }

    ParamBlob to_blob() const {
        ParamBlob b;
        b.architecture = cfg_.signature();
        b.values.assign(params_.begin(), params_.end());
        return b;
    }

    void load_blob(const ParamBlob& b) {
        if (b.architecture != cfg_.signature()) {
            throw SchemaError("encoder architecture mismatch: checkpoint has '" + b.architecture + "', model is '" +
                              cfg_.signature() + "'");
        }
        if (b.values.size() != params_.size()) {
            throw SchemaError("encoder parameter count mismatch");
        }
        for (std::size_t i = 0; i < params_.size(); ++i) {
            params_[i] = static_cast<T>(b.values[i]);
        }
    }

private:
    std::span<const T> head_weight() const {
        return std::span<const T>(params_).subspan(layout_.head_weight_offset,
                                                    static_cast<std::size_t>(layout_.embedding_dim) * layout_.feature_channels);
    }
    std::span<const T> head_bias() const {
        return std::span<const T>(params_).subspan(layout_.head_bias_offset, static_cast<std::size_t>(layout_.embedding_dim));
    }
    std::span<const T> weights(const ConvUnit& u) const {
        return std::span<const T>(params_).subspan(u.weight_offset, u.shape.weight_count());
    }
    std::span<const T> biases(const ConvUnit& u) const {
        return std::span<const T>(params_).subspan(u.bias_offset, static_cast<std::size_t>(u.shape.out_channels));
    }

    static void add_into(Tensor<T>& dst, const Tensor<T>& src) {
        if (!dst.same_shape(src)) {
            throw ShapeError("gradient shape mismatch");
        }
        for (std::size_t i = 0; i < dst.data.size(); ++i) {
            dst.data[i] += src.data[i];
        }
    }

    Tensor<T> block_forward(const EncoderBlock& blk, BlockTrace<T>& bt) const {
        if (!blk.bottleneck) {
            Tensor<T> y;
            conv_forward(blk.convs[0].shape, weights(blk.convs[0]), biases(blk.convs[0]), bt.input, y);
            relu_inplace(y);
            bt.conv_outputs.push_back(y);
            return y;
        }
        Tensor<T> a;
        conv_forward(blk.convs[0].shape, weights(blk.convs[0]), biases(blk.convs[0]), bt.input, a);
        relu_inplace(a);
        Tensor<T> m;
        conv_forward(blk.convs[1].shape, weights(blk.convs[1]), biases(blk.convs[1]), a, m);
        relu_inplace(m);
        Tensor<T> e;
        conv_forward(blk.convs[2].shape, weights(blk.convs[2]), biases(blk.convs[2]), m, e);
        Tensor<T> out;
        if (blk.projection) {
            conv_forward(blk.projection->shape, weights(*blk.projection), biases(*blk.projection), bt.input, out);
        } else {
            out = bt.input;
        }
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            out.data[i] += e.data[i];
        }
        relu_inplace(out);
        bt.conv_outputs.push_back(std::move(a));
        bt.conv_outputs.push_back(std::move(m));
        bt.conv_outputs.push_back(std::move(e));
        return out;
    }

    Tensor<T> block_backward(const EncoderBlock& blk, const BlockTrace<T>& bt, Tensor<T> g, std::span<T> pg,
                             bool need_input_grad) const {
        auto gw = [&pg](const ConvUnit& u) { return pg.subspan(u.weight_offset, u.shape.weight_count()); };
        auto gb = [&pg](const ConvUnit& u) { return pg.subspan(u.bias_offset, static_cast<std::size_t>(u.shape.out_channels)); };
        relu_mask(bt.output, g);
        Tensor<T> gin;
        if (need_input_grad) {
            gin = Tensor<T>(bt.input.channels, bt.input.height, bt.input.width);
        }
        Tensor<T>* gin_ptr = need_input_grad ? &gin : nullptr;
        if (!blk.bottleneck) {
            conv_backward(blk.convs[0].shape, weights(blk.convs[0]), bt.input, g, gw(blk.convs[0]), gb(blk.convs[0]), gin_ptr);
            return gin;
        }
        const Tensor<T>& a = bt.conv_outputs[0];
        const Tensor<T>& m = bt.conv_outputs[1];
        Tensor<T> gm(m.channels, m.height, m.width);
        conv_backward(blk.convs[2].shape, weights(blk.convs[2]), m, g, gw(blk.convs[2]), gb(blk.convs[2]), &gm);
        relu_mask(m, gm);
        Tensor<T> ga(a.channels, a.height, a.width);
        conv_backward(blk.convs[1].shape, weights(blk.convs[1]), a, gm, gw(blk.convs[1]), gb(blk.convs[1]), &ga);
        relu_mask(a, ga);
        conv_backward(blk.convs[0].shape, weights(blk.convs[0]), bt.input, ga, gw(blk.convs[0]), gb(blk.convs[0]), gin_ptr);
        if (blk.projection) {
            conv_backward(blk.projection->shape, weights(*blk.projection), bt.input, g, gw(*blk.projection),
                          gb(*blk.projection), gin_ptr);
        } else if (need_input_grad) {
            add_into(gin, g);
        }
        return gin;
    }

    EncoderConfig cfg_;
    EncoderLayout layout_;
    std::vector<T> params_;
};

// ---------------------------------------------------------------------------
// Count scorer f(z) = w . z + b

struct CountScorerParams {
    std::vector<double> weight;
    double bias = 0.0;

    static CountScorerParams initial(int dim, std::uint64_t seed) {
        CountScorerParams p;
        p.weight.resize(static_cast<std::size_t>(dim));
        Rng rng(seed);
        const double bound = std::sqrt(3.0 / dim);
        for (double& w : p.weight) {
            w = rng.uniform(-bound, bound);
        }
        return p;
    }

    ParamBlob to_blob() const {
        ParamBlob b;
        b.architecture = "affine/" + std::to_string(weight.size());
        b.values = weight;
        b.values.push_back(bias);
        return b;
    }

    static CountScorerParams from_blob(const ParamBlob& b) {
        if (b.values.empty() || b.architecture != "affine/" + std::to_string(b.values.size() - 1)) {
            throw SchemaError("malformed count scorer blob");
        }
        CountScorerParams p;
        p.weight.assign(b.values.begin(), b.values.end() - 1);
        p.bias = b.values.back();
        return p;
    }

    friend bool operator==(const CountScorerParams&, const CountScorerParams&) = default;
};

inline double count_score(const CountScorerParams& scorer, const EmbeddingVec& z) {
    if (scorer.weight.size() != z.size()) {
        throw ShapeError("count scorer dimension " + std::to_string(scorer.weight.size()) +
                         " does not match embedding dimension " + std::to_string(z.size()));
    }
    double s = scorer.bias;
    for (std::size_t i = 0; i < z.size(); ++i) {
        s += scorer.weight[i] * z[i];
    }
    return s;
}

// Writes the channel mean of the encoder's last feature map as an 8-bit
// grayscale PNG, min-max normalised. Inspection hook only.
template <std::floating_point T>
void dump_feature_map(const EncoderTrace<T>& tr, const std::filesystem::path& path) {
    const Tensor<T>& f = tr.tap(tr.tap_count() - 1);
    std::vector<double> mean(f.plane_size(), 0.0);
    for (int c = 0; c < f.channels; ++c) {
        for (std::size_t i = 0; i < f.plane_size(); ++i) {
            mean[i] += f.plane(c)[i] / f.channels;
        }
    }
    const auto [lo, hi] = std::minmax_element(mean.begin(), mean.end());
    const double span = *hi - *lo;
    Plane<std::uint8_t> out(f.height, f.width);
    for (std::size_t i = 0; i < mean.size(); ++i) {
        out.values[i] = static_cast<std::uint8_t>(span > 0 ? std::lround(255.0 * (mean[i] - *lo) / span) : 0);
    }
    write_gray8(path, out);
}

} // namespace nucssl
