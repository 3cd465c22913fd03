#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nucssl/dataio.hpp"
#include "nucssl/errors.hpp"

namespace nucssl {

// Presets: "rmsprop" (no momentum, alpha 0.99), "adam" (0.9, 0.999), "sgd".
// Both adaptive presets use eps 1e-8. State is kept in double regardless of
// the parameter type so checkpoints round-trip it exactly.
struct OptimizerConfig {
    std::string name = "rmsprop";
    double learning_rate = 1e-3;

    void validate() const {
        if (name != "rmsprop" && name != "adam" && name != "sgd") {
            throw ConfigError("unknown optimizer '" + name + "' (expected rmsprop, adam or sgd)");
        }
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
            throw ConfigError("learning rate must be finite and >= 0");
        }
    }

    friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

class Optimizer {
public:
    Optimizer(OptimizerConfig cfg, std::size_t n) : cfg_(std::move(cfg)) {
        cfg_.validate();
        if (cfg_.name != "sgd") {
            second_.assign(n, 0.0);
        }
        if (cfg_.name == "adam") {
            first_.assign(n, 0.0);
        }
        size_ = n;
    }

    template <std::floating_point T, std::floating_point G>
    void step(std::span<T> params, std::span<const G> grads) {
        if (params.size() != size_ || grads.size() != size_) {
            throw ShapeError("optimizer size mismatch");
        }
        ++t_;
        const double lr = cfg_.learning_rate;
        if (cfg_.name == "sgd") {
            for (std::size_t i = 0; i < size_; ++i) {
                params[i] = static_cast<T>(params[i] - lr * grads[i]);
            }
        } else if (cfg_.name == "rmsprop") {
            constexpr double alpha = 0.99;
            constexpr double eps = 1e-8;
            for (std::size_t i = 0; i < size_; ++i) {
                const double g = grads[i];
                second_[i] = alpha * second_[i] + (1.0 - alpha) * g * g;
                params[i] = static_cast<T>(params[i] - lr * g / (std::sqrt(second_[i]) + eps));
            }
        } else {
            constexpr double b1 = 0.9;
            constexpr double b2 = 0.999;
            constexpr double eps = 1e-8;
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
            for (std::size_t i = 0; i < size_; ++i) {
                const double g = grads[i];
                first_[i] = b1 * first_[i] + (1.0 - b1) * g;
                second_[i] = b2 * second_[i] + (1.0 - b2) * g * g;
                const double mhat = first_[i] / c1;
                const double vhat = second_[i] / c2;
                params[i] = static_cast<T>(params[i] - lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }

    std::uint64_t steps_taken() const { return t_; }

    // [t, first..., second...]
    ParamBlob state() const {
        ParamBlob b;
        b.architecture = cfg_.name + "/" + std::to_string(size_);
        b.values.reserve(1 + first_.size() + second_.size());
        b.values.push_back(static_cast<double>(t_));
        b.values.insert(b.values.end(), first_.begin(), first_.end());
        b.values.insert(b.values.end(), second_.begin(), second_.end());
        return b;
    }

    void restore(const ParamBlob& b) {
        if (b.architecture != cfg_.name + "/" + std::to_string(size_) ||
            b.values.size() != 1 + first_.size() + second_.size()) {
            throw SchemaError("optimizer state does not match the configured optimizer");
        }
        t_ = static_cast<std::uint64_t>(b.values[0]);
        auto it = b.values.begin() + 1;
        std::copy(it, it + static_cast<std::ptrdiff_t>(first_.size()), first_.begin());
        it += static_cast<std::ptrdiff_t>(first_.size());
        std::copy(it, it + static_cast<std::ptrdiff_t>(second_.size()), second_.begin());
    }

private:
    OptimizerConfig cfg_;
    std::size_t size_ = 0;
    std::uint64_t t_ = 0;
    std::vector<double> first_;
    std::vector<double> second_;
};

} // namespace nucssl
