#pragma once

// Three-class U-shaped segmenter on top of the pretrained encoder.
//
// Decoder ("unet"): starting from the deepest tap, each level upsamples 2x
// (nearest), concatenates the next shallower tap and applies conv3x3 + ReLU
// with the tap's channel count. A final level upsamples to input resolution,
// concatenates the input image, applies conv3x3 + ReLU and a 1x1 conv to the
// three class logits (background, body, boundary).

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
#include "nucssl/image.hpp"
#include "nucssl/metrics.hpp"
#include "nucssl/nn.hpp"
#include "nucssl/optim.hpp"
#include "nucssl/postprocess.hpp"
#include "nucssl/random.hpp"

namespace nucssl {

// ---------------------------------------------------------------------------
// Ground truth

// Boundary: instance pixels with a pixel of any other id (background
// included) within Chebyshev distance boundary_width. Positions outside the
// image are ignored.
inline TernaryMask instance_to_ternary(const InstanceLabelMap& labels, int boundary_width) {
    if (boundary_width < 1) {
        throw ConfigError("boundary_width must be >= 1");
    }
    TernaryMask out(labels.height, labels.width);
    const int r = boundary_width;
    for (int y = 0; y < labels.height; ++y) {
        for (int x = 0; x < labels.width; ++x) {
            const std::uint32_t v = labels(y, x);
            if (v == 0) {
                continue;
            }
            bool edge = false;
            for (int ny = std::max(0, y - r); ny <= std::min(labels.height - 1, y + r) && !edge; ++ny) {
                for (int nx = std::max(0, x - r); nx <= std::min(labels.width - 1, x + r); ++nx) {
                    if (labels(ny, nx) != v) {
                        edge = true;
                        break;
                    }
                }
            }
            out(y, x) = static_cast<std::uint8_t>(edge ? PixelClass::boundary : PixelClass::body);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model

inline constexpr const char* kUNetDecoder = "unet";

struct SegModelConfig {
    EncoderConfig encoder;
    std::string decoder = kUNetDecoder;
    std::uint64_t init_seed = 0;
    int boundary_width = 2;

    static constexpr int class_count = kClassCount;

    void validate() const {
        encoder.validate();
        if (decoder != kUNetDecoder) {
            throw ConfigError("unknown decoder '" + decoder + "' (expected unet)");
        }
        if (boundary_width < 1) {
            throw ConfigError("segmenter.boundary_width must be >= 1");
        }
    }

    friend bool operator==(const SegModelConfig&, const SegModelConfig&) = default;
};

struct DecoderLayout {
    // levels[k] fuses tap (taps - 2 - k); then the full-resolution level.
    std::vector<ConvUnit> levels;
    ConvUnit full;
    ConvUnit classifier;
    std::size_t param_count = 0;
};

inline DecoderLayout build_decoder_layout(const EncoderLayout& enc) {
    detail::LayoutBuilder b;
    DecoderLayout L;
    const int n = static_cast<int>(enc.stages.size());
    int ch = enc.stages.back().out_channels;
    for (int s = n - 2; s >= 0; --s) {
        const int skip = enc.stages[static_cast<std::size_t>(s)].out_channels;
        L.levels.push_back(b.conv(ch + skip, skip, 3, 1));
        ch = skip;
    }
    L.full = b.conv(ch + 3, ch, 3, 1);
    L.classifier = b.conv(ch, kClassCount, 1, 1);
    L.param_count = b.size();
    return L;
}

// Per-pixel class probabilities, HxWx3 interleaved.
struct ProbabilityMap {
    int height = 0;
    int width = 0;
    std::vector<float> values;

    float operator()(int y, int x, int c) const {
        return values[(static_cast<std::size_t>(y) * width + x) * kClassCount + c];
    }

    // Lowest class index wins ties.
    TernaryMask argmax() const {
        TernaryMask m(height, width);
        for (std::size_t i = 0; i < m.values.size(); ++i) {
            const float* p = values.data() + i * kClassCount;
            int best = 0;
            for (int c = 1; c < kClassCount; ++c) {
                if (p[c] > p[best]) {
                    best = c;
                }
            }
            m.values[i] = static_cast<std::uint8_t>(best);
        }
        return m;
    }
};

template <std::floating_point T>
struct SegTrace {
    EncoderTrace<T> encoder;
    std::vector<Tensor<T>> level_inputs;
    std::vector<Tensor<T>> level_outputs;
    Tensor<T> full_input;
    Tensor<T> full_output;
    Tensor<T> logits;
};

template <std::floating_point T>
class SegModel {
public:
    explicit SegModel(SegModelConfig cfg)
        : cfg_((cfg.validate(), std::move(cfg))),
          encoder_(cfg_.encoder),
          layout_(build_decoder_layout(encoder_.layout())) {
        params_.assign(layout_.param_count, T(0));
        Rng rng(cfg_.init_seed);
        for (const auto& u : layout_.levels) {
            detail::init_conv(u, std::span<T>(params_), rng, 6.0);
        }
        detail::init_conv(layout_.full, std::span<T>(params_), rng, 6.0);
        detail::init_conv(layout_.classifier, std::span<T>(params_), rng, 3.0);
    }

    const SegModelConfig& config() const { return cfg_; }
    Encoder<T>& encoder() { return encoder_; }
    const Encoder<T>& encoder() const { return encoder_; }
    const DecoderLayout& decoder_layout() const { return layout_; }
    std::span<T> decoder_parameters() { return params_; }
    std::span<const T> decoder_parameters() const { return params_; }
    int stride() const { return encoder_.layout().total_stride(); }

    SegTrace<T> forward(Tensor<T> input) const {
        if (input.height % stride() != 0 || input.width % stride() != 0) {
            throw ShapeError("segmenter input " + std::to_string(input.height) + "x" + std::to_string(input.width) +
                             " is not a multiple of the encoder stride " + std::to_string(stride()));
        }
        SegTrace<T> tr;
        tr.encoder = encoder_.forward(std::move(input), false);
        const std::size_t n = tr.encoder.tap_count();
        Tensor<T> x = tr.encoder.tap(n - 1);
        for (std::size_t k = 0; k < layout_.levels.size(); ++k) {
            Tensor<T> in = concat_channels(upsample2x(x), tr.encoder.tap(n - 2 - k));
            conv_forward(layout_.levels[k].shape, weights(layout_.levels[k]), biases(layout_.levels[k]), in, x);
            relu_inplace(x);
            tr.level_inputs.push_back(std::move(in));
            tr.level_outputs.push_back(x);
        }
        tr.full_input = concat_channels(upsample2x(x), tr.encoder.stage_inputs[0]);
        conv_forward(layout_.full.shape, weights(layout_.full), biases(layout_.full), tr.full_input, tr.full_output);
        relu_inplace(tr.full_output);
        conv_forward(layout_.classifier.shape, weights(layout_.classifier), biases(layout_.classifier), tr.full_output,
                     tr.logits);
        return tr;
    }

    // Accumulates into encoder_grad (skipped when empty) and decoder_grad.
    void backward(const SegTrace<T>& tr, const Tensor<T>& grad_logits, std::span<T> encoder_grad,
                  std::span<T> decoder_grad) const {
        auto gw = [&decoder_grad](const ConvUnit& u) { return decoder_grad.subspan(u.weight_offset, u.shape.weight_count()); };
        auto gb = [&decoder_grad](const ConvUnit& u) {
            return decoder_grad.subspan(u.bias_offset, static_cast<std::size_t>(u.shape.out_channels));
        };
        const bool to_encoder = !encoder_grad.empty();
        const std::size_t n = tr.encoder.tap_count();
        std::vector<Tensor<T>> grad_taps(n);

        Tensor<T> g(tr.full_output.channels, tr.full_output.height, tr.full_output.width);
        conv_backward(layout_.classifier.shape, weights(layout_.classifier), tr.full_output, grad_logits,
                      gw(layout_.classifier), gb(layout_.classifier), &g);
        relu_mask(tr.full_output, g);
        Tensor<T> gin(tr.full_input.channels, tr.full_input.height, tr.full_input.width);
        conv_backward(layout_.full.shape, weights(layout_.full), tr.full_input, g, gw(layout_.full), gb(layout_.full), &gin);
        Tensor<T> gup, gimg;
        split_channels(gin, tr.full_input.channels - 3, gup, gimg);
        g = upsample2x_backward(gup);

        for (std::size_t k = layout_.levels.size(); k-- > 0;) {
            const Tensor<T>& in = tr.level_inputs[k];
            const bool last = (k == 0);
            relu_mask(tr.level_outputs[k], g);
            // The deepest level's input gradient only feeds the encoder.
            if (last && !to_encoder) {
                conv_backward(layout_.levels[k].shape, weights(layout_.levels[k]), in, g, gw(layout_.levels[k]),
                              gb(layout_.levels[k]), static_cast<Tensor<T>*>(nullptr));
                break;
            }
            Tensor<T> gl(in.channels, in.height, in.width);
            conv_backward(layout_.levels[k].shape, weights(layout_.levels[k]), in, g, gw(layout_.levels[k]),
                          gb(layout_.levels[k]), &gl);
            const Tensor<T>& skip = tr.encoder.tap(n - 2 - k);
            split_channels(gl, in.channels - skip.channels, gup, grad_taps[n - 2 - k]);
            g = upsample2x_backward(gup);
        }
        if (!to_encoder) {
            return;
        }
        grad_taps[n - 1] = std::move(g);
        encoder_.backward(tr.encoder, grad_taps, {}, encoder_grad);
    }

    // Replicate-pads to the encoder stride, runs the model, crops back.
    ProbabilityMap predict(const RgbImage& image) const {
        const int s = stride();
        const int ph = (image.height + s - 1) / s * s;
        const int pw = (image.width + s - 1) / s * s;
        RgbImage padded(ph, pw);
        for (int y = 0; y < ph; ++y) {
            for (int x = 0; x < pw; ++x) {
                for (int c = 0; c < 3; ++c) {
                    padded.at(y, x, c) = image.at(std::min(y, image.height - 1), std::min(x, image.width - 1), c);
                }
            }
        }
        const SegTrace<T> tr = forward(to_tensor<T>(padded));
        ProbabilityMap out{image.height, image.width, {}};
        out.values.resize(static_cast<std::size_t>(image.height) * image.width * kClassCount);
        for (int y = 0; y < image.height; ++y) {
            for (int x = 0; x < image.width; ++x) {
                double z[kClassCount];
                double m = -std::numeric_limits<double>::infinity();
                for (int c = 0; c < kClassCount; ++c) {
                    z[c] = tr.logits(c, y, x);
                    m = std::max(m, z[c]);
                }
                double sum = 0.0;
                for (double& v : z) {
                    v = std::exp(v - m);
                    sum += v;
                }
                float* p = out.values.data() + (static_cast<std::size_t>(y) * image.width + x) * kClassCount;
                for (int c = 0; c < kClassCount; ++c) {
                    p[c] = static_cast<float>(z[c] / sum);
                }
            }
        }
        return out;
    }

    std::string decoder_signature() const { return cfg_.decoder + "/" + cfg_.encoder.signature(); }

    ParamBlob decoder_blob() const {
        ParamBlob b;
        b.architecture = decoder_signature();
        b.values.assign(params_.begin(), params_.end());
        return b;
    }

    void load_decoder_blob(const ParamBlob& b) {
        if (b.architecture != decoder_signature() || b.values.size() != params_.size()) {
            throw SchemaError("decoder mismatch: checkpoint has '" + b.architecture + "', model is '" +
                              decoder_signature() + "'");
        }
        for (std::size_t i = 0; i < params_.size(); ++i) {
            params_[i] = static_cast<T>(b.values[i]);
        }
    }

    Checkpoint to_checkpoint(const std::string& snapshot, std::uint64_t step) const {
        Checkpoint c;
        c.encoder = encoder_.to_blob();
        c.decoder = decoder_blob();
        c.config_snapshot = snapshot;
        c.step = step;
        return c;
    }

    void load_checkpoint(const Checkpoint& c) {
        if (!c.decoder) {
            throw SchemaError("checkpoint holds no decoder; it is an encoder-only checkpoint");
        }
        encoder_.load_blob(c.encoder);
        load_decoder_blob(*c.decoder);
    }

private:
    std::span<const T> weights(const ConvUnit& u) const {
        return std::span<const T>(params_).subspan(u.weight_offset, u.shape.weight_count());
    }
    std::span<const T> biases(const ConvUnit& u) const {
        return std::span<const T>(params_).subspan(u.bias_offset, static_cast<std::size_t>(u.shape.out_channels));
    }

    SegModelConfig cfg_;
    Encoder<T> encoder_;
    DecoderLayout layout_;
    std::vector<T> params_;
};

// Copies pretrained encoder weights into a fresh model; the decoder is seeded
// from model_cfg.init_seed.
template <std::floating_point T = float>
SegModel<T> transfer_encoder(const ParamBlob& pretrained, const SegModelConfig& model_cfg) {
    if (pretrained.architecture != model_cfg.encoder.signature()) {
        throw SchemaError("encoder architecture mismatch: pretrained '" + pretrained.architecture +
                          "', segmenter expects '" + model_cfg.encoder.signature() + "'");
    }
    SegModel<T> model(model_cfg);
    model.encoder().load_blob(pretrained);
    return model;
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct FinetuneConfig {
    int epochs = 30;
    int batch_size = 4;
    int crops_per_image = 4;
    OptimizerConfig optimizer{"rmsprop", 1e-3};
    int crop_size = 64;
    double label_fraction = 1.0;
    std::uint64_t seed = 0;
    bool freeze_encoder = false;
    // Random flips and 90-degree rotations of each crop.
    bool augment = true;
    // Empty: unweighted cross-entropy; else one weight per class.
    std::vector<double> class_weights;

    void validate() const {
        if (epochs < 0) {
            throw ConfigError("finetune.epochs must be >= 0");
        }
        if (batch_size < 1 || crops_per_image < 1) {
            throw ConfigError("finetune.batch_size and finetune.crops_per_image must be >= 1");
        }
        if (crop_size < 1) {
            throw ConfigError("finetune.crop_size must be >= 1");
        }
        if (!(label_fraction > 0.0 && label_fraction <= 1.0)) {
            throw ConfigError("finetune.label_fraction must lie in (0, 1]");
        }
        if (!class_weights.empty()) {
            if (class_weights.size() != kClassCount) {
                throw ConfigError("finetune.class_weights needs exactly 3 values");
            }
            for (double w : class_weights) {
                if (!(w >= 0.0) || !std::isfinite(w)) {
                    throw ConfigError("finetune.class_weights must be finite and >= 0");
                }
            }
        }
        optimizer.validate();
    }

    friend bool operator==(const FinetuneConfig&, const FinetuneConfig&) = default;
};

struct LabeledImage {
    std::string stem;
    RgbImage image;
    InstanceLabelMap labels;
    TernaryMask target;
};

inline std::vector<LabeledImage> load_labeled(const std::vector<DatasetEntry>& entries, int boundary_width) {
    std::vector<LabeledImage> out;
    for (const auto& e : entries) {
        if (!e.label_path) {
            throw IoError("image '" + e.stem + "' has no label map");
        }
        LabeledImage li{e.stem, read_image(e.image_path), read_label_map(*e.label_path), {}};
        if (li.labels.height != li.image.height || li.labels.width != li.image.width) {
            throw ShapeError("label map of '" + e.stem + "' does not match its image size");
        }
        li.target = instance_to_ternary(li.labels, boundary_width);
        out.push_back(std::move(li));
    }
    return out;
}

// Seeded whole-image subset: max(1, round(fraction * n)) entries, returned in
// their original order.
inline std::vector<DatasetEntry> label_subset(const std::vector<DatasetEntry>& train, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw ConfigError("label_fraction must lie in (0, 1]");
    }
    if (train.empty()) {
        return {};
    }
    const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(train.size()))));
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    Rng rng(derive_seed(seed, {0x6c6162ULL}));
    rng.shuffle(order.begin(), order.end());
    std::vector<bool> keep(train.size(), false);
    for (std::size_t i = 0; i < k; ++i) {
        keep[order[i]] = true;
    }
    std::vector<DatasetEntry> out;
    for (std::size_t i = 0; i < train.size(); ++i) {
        if (keep[i]) {
            out.push_back(train[i]);
        }
    }
    return out;
}

struct FinetuneRecord {
    int epoch = 0;
    double loss = 0.0;
    double val_aji = std::numeric_limits<double>::quiet_NaN();
};

struct FinetuneReport {
    std::vector<std::string> used_images;
    std::vector<FinetuneRecord> records;

    // Columns: epoch,loss,val_aji (val_aji empty without a validation split).
    void write_csv(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) {
            throw IoError("cannot write report '" + path.string() + "'");
        }
        out.precision(10);
        out << "epoch,loss,val_aji\n";
        for (const auto& r : records) {
            out << r.epoch << ',' << r.loss << ',';
            if (!std::isnan(r.val_aji)) {
                out << r.val_aji;
            }
            out << '\n';
        }
    }
};

struct FinetuneOptions {
    std::function<void(const FinetuneRecord&)> on_epoch;
};

namespace detail {

// Crop with one of the 8 square symmetries: bit 0 flips x, bit 1 flips y,
// bit 2 transposes.
inline void crop_transformed(const LabeledImage& src, int y0, int x0, int size, int sym, Tensor<float>& image,
                             std::vector<std::uint8_t>& target) {
    image = Tensor<float>(3, size, size);
    target.assign(static_cast<std::size_t>(size) * size, 0);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            int sy = y;
            int sx = x;
            if (sym & 4) {
                std::swap(sy, sx);
            }
            if (sym & 1) {
                sx = size - 1 - sx;
            }
            if (sym & 2) {
                sy = size - 1 - sy;
            }
            for (int c = 0; c < 3; ++c) {
                image(c, y, x) = static_cast<float>((src.image.at(y0 + sy, x0 + sx, c) - 127.5) / 127.5);
            }
            target[static_cast<std::size_t>(y) * size + x] = src.target(y0 + sy, x0 + sx);
        }
    }
}

// Weighted softmax cross-entropy: returns the weighted loss sum, writes the
// unnormalised gradient, adds the pixel weights to weight_sum.
inline double cross_entropy(const Tensor<float>& logits, const std::vector<std::uint8_t>& target,
                            const std::vector<double>& class_weights, Tensor<float>& grad, double& weight_sum) {
    grad = Tensor<float>(logits.channels, logits.height, logits.width);
    const std::size_t n = logits.plane_size();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double z[kClassCount];
        double m = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < kClassCount; ++c) {
            z[c] = logits.plane(c)[i];
            m = std::max(m, z[c]);
        }
        double sum = 0.0;
        for (double v : z) {
            sum += std::exp(v - m);
        }
        const int t = target[i];
        const double w = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(t)];
        loss += w * (std::log(sum) + m - z[t]);
        weight_sum += w;
        for (int c = 0; c < kClassCount; ++c) {
            const double p = std::exp(z[c] - m) / sum;
            grad.plane(c)[i] = static_cast<float>(w * (p - (c == t ? 1.0 : 0.0)));
        }
    }
    return loss;
}

} // namespace detail

template <std::floating_point T>
InstanceLabelMap predict_instances(const SegModel<T>& model, const RgbImage& image, PostprocessConfig post) {
    post.boundary_width = model.config().boundary_width;
    return ternary_to_instances(model.predict(image).argmax(), post);
}

template <std::floating_point T>
double mean_aji(const SegModel<T>& model, const std::vector<LabeledImage>& images, const PostprocessConfig& post) {
    if (images.empty()) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    double s = 0.0;
    for (const auto& li : images) {
        s += aji(li.labels, predict_instances(model, li.image, post));
    }
    return s / static_cast<double>(images.size());
}

// Minimises per-pixel cross-entropy on random crops of `train`. `val` (may be
// empty) is scored by AJI after every epoch.
inline FinetuneReport finetune_on_images(SegModel<float>& model, const std::vector<LabeledImage>& train,
                                         const std::vector<LabeledImage>& val, const FinetuneConfig& cfg,
                                         const PostprocessConfig& post, const FinetuneOptions& opts = {}) {
    cfg.validate();
    if (train.empty()) {
        throw IoError("fine-tuning requires at least one labelled training image");
    }
    if (cfg.crop_size % model.stride() != 0) {
        throw ConfigError("finetune.crop_size (" + std::to_string(cfg.crop_size) +
                          ") must be a multiple of the encoder stride (" + std::to_string(model.stride()) + ")");
    }
    for (const auto& li : train) {
        if (li.image.height < cfg.crop_size || li.image.width < cfg.crop_size) {
            throw ShapeError("training image '" + li.stem + "' is smaller than finetune.crop_size");
        }
    }

    FinetuneReport report;
    for (const auto& li : train) {
        report.used_images.push_back(li.stem);
    }
    Optimizer enc_opt(cfg.optimizer, model.encoder().parameter_count());
    Optimizer dec_opt(cfg.optimizer, model.decoder_parameters().size());
    std::vector<float> enc_grad(cfg.freeze_encoder ? 0 : model.encoder().parameter_count());
    std::vector<float> dec_grad(model.decoder_parameters().size());

    const std::size_t items = train.size() * static_cast<std::size_t>(cfg.crops_per_image);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(items);
        for (std::size_t i = 0; i < items; ++i) {
            order[i] = i;
        }
        Rng perm(derive_seed(cfg.seed, {0x6674ULL, static_cast<std::uint64_t>(epoch)}));
        perm.shuffle(order.begin(), order.end());

        double epoch_loss = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < items; start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(items, start + static_cast<std::size_t>(cfg.batch_size));
            std::fill(enc_grad.begin(), enc_grad.end(), 0.0f);
            std::fill(dec_grad.begin(), dec_grad.end(), 0.0f);
            std::vector<SegTrace<float>> traces;
            std::vector<Tensor<float>> grads;
            double loss = 0.0;
            double weight_sum = 0.0;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t item = order[k];
                const LabeledImage& li = train[item / static_cast<std::size_t>(cfg.crops_per_image)];
                Rng rng(derive_seed(cfg.seed, {0x6372ULL, static_cast<std::uint64_t>(epoch), item}));
                const int y0 = static_cast<int>(rng.uniform_int(0, li.image.height - cfg.crop_size));
                const int x0 = static_cast<int>(rng.uniform_int(0, li.image.width - cfg.crop_size));
                const int sym = cfg.augment ? static_cast<int>(rng.uniform_int(0, 7)) : 0;
                Tensor<float> input;
                std::vector<std::uint8_t> target;
                detail::crop_transformed(li, y0, x0, cfg.crop_size, sym, input, target);
                SegTrace<float> tr = model.forward(std::move(input));
                Tensor<float> g;
                loss += detail::cross_entropy(tr.logits, target, cfg.class_weights, g, weight_sum);
                traces.push_back(std::move(tr));
                grads.push_back(std::move(g));
            }
            if (!(weight_sum > 0.0)) {
                // Only zero-weight classes in this batch: nothing to learn from.
                continue;
            }
            loss /= weight_sum;
            if (!std::isfinite(loss)) {
                throw DivergenceError("non-finite fine-tuning loss in epoch " + std::to_string(epoch));
            }
            const auto scale = static_cast<float>(1.0 / weight_sum);
            for (std::size_t k = 0; k < traces.size(); ++k) {
                for (float& v : grads[k].data) {
                    v *= scale;
                }
                model.backward(traces[k], grads[k], enc_grad, dec_grad);
            }
            if (!cfg.freeze_encoder) {
                enc_opt.step<float, float>(model.encoder().parameters(), enc_grad);
            }
            dec_opt.step<float, float>(model.decoder_parameters(), dec_grad);
            epoch_loss += loss;
            ++batches;
        }

        FinetuneRecord rec{epoch, batches > 0 ? epoch_loss / batches : 0.0, mean_aji(model, val, post)};
        report.records.push_back(rec);
        if (opts.on_epoch) {
            opts.on_epoch(rec);
        }
    }
    return report;
}

// Dataset front end: a seeded label_fraction subset of the train split is
// used for training, the val split for per-epoch AJI.
inline FinetuneReport finetune(SegModel<float>& model, const DatasetIndex& dataset, const FinetuneConfig& cfg,
                               const PostprocessConfig& post, const FinetuneOptions& opts = {}) {
    cfg.validate();
    const auto subset = label_subset(dataset.in_split(Split::train), cfg.label_fraction, cfg.seed);
    if (subset.empty()) {
        throw IoError("fine-tuning requires a non-empty labelled train split");
    }
    const int bw = model.config().boundary_width;
    return finetune_on_images(model, load_labeled(subset, bw), load_labeled(dataset.in_split(Split::val), bw), cfg,
                              post, opts);
}

template <std::floating_point T>
EvalReport evaluate_dataset(const SegModel<T>& model, const DatasetIndex& dataset, Split split,
                            const PostprocessConfig& post) {
    return evaluate_dataset(dataset, split, [&](const DatasetEntry&, const RgbImage& img) {
        return predict_instances(model, img, post);
    });
}

} // namespace nucssl
