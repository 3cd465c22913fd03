#pragma once

// Minimal CHW tensor and layer kernels with explicit backward passes.
// Backward kernels accumulate (+=) into parameter and input gradients.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "nucssl/errors.hpp"
#include "nucssl/image.hpp"

namespace nucssl {

template <std::floating_point T>
struct Tensor {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<T> data;

    Tensor() = default;
    Tensor(int c, int h, int w, T fill = T(0))
        : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

    bool empty() const { return data.empty(); }
    std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
    T* plane(int c) { return data.data() + c * plane_size(); }
    const T* plane(int c) const { return data.data() + c * plane_size(); }
    T& operator()(int c, int y, int x) { return data[(c * static_cast<std::size_t>(height) + y) * width + x]; }
    const T& operator()(int c, int y, int x) const { return data[(c * static_cast<std::size_t>(height) + y) * width + x]; }
    bool same_shape(const Tensor& o) const { return channels == o.channels && height == o.height && width == o.width; }
};

// Maps 8-bit RGB to [-1, 1].
template <std::floating_point T>
Tensor<T> to_tensor(const RgbImage& img) {
    Tensor<T> t(3, img.height, img.width);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                t(c, y, x) = static_cast<T>((img.at(y, x, c) - 127.5) / 127.5);
            }
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Convolution: square kernel, zero padding kernel/2, optional stride.

struct ConvShape {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    int stride = 1;

    int pad() const { return kernel / 2; }
    std::size_t weight_count() const {
        return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel;
    }
    int out_extent(int in) const { return (in + 2 * pad() - kernel) / stride + 1; }

    friend bool operator==(const ConvShape&, const ConvShape&) = default;
};

namespace detail {

// Output positions o with 0 <= o*stride + k - pad < in.
inline void valid_range(int in, int out, int k, int pad, int stride, int& lo, int& hi) {
    const int num = pad - k;
    lo = num <= 0 ? 0 : (num + stride - 1) / stride;
    const int top = in - 1 - k + pad;
    hi = top < 0 ? -1 : std::min(out - 1, top / stride);
}

} // namespace detail

namespace detail {

// Unfolds the receptive fields into a (in_channels*k*k) x (oh*ow) matrix.
template <std::floating_point T>
void im2col(const ConvShape& s, const Tensor<T>& in, int oh, int ow, std::vector<T>& col) {
    const int k = s.kernel;
    const int p = s.pad();
    const int st = s.stride;
    const std::size_t n = static_cast<std::size_t>(oh) * ow;
    col.assign(static_cast<std::size_t>(s.in_channels) * k * k * n, T(0));
    for (int ic = 0; ic < s.in_channels; ++ic) {
        for (int ky = 0; ky < k; ++ky) {
            int oy_lo, oy_hi;
            valid_range(in.height, oh, ky, p, st, oy_lo, oy_hi);
            for (int kx = 0; kx < k; ++kx) {
                int ox_lo, ox_hi;
                valid_range(in.width, ow, kx, p, st, ox_lo, ox_hi);
                T* row = col.data() + ((static_cast<std::size_t>(ic) * k + ky) * k + kx) * n;
                for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                    const T* irow = in.plane(ic) + static_cast<std::size_t>(oy * st + ky - p) * in.width + (kx - p);
                    T* r = row + static_cast<std::size_t>(oy) * ow;
                    for (int ox = ox_lo; ox <= ox_hi; ++ox) {
                        r[ox] = irow[ox * st];
                    }
                }
            }
        }
    }
}

template <std::floating_point T>
void col2im_add(const ConvShape& s, const std::vector<T>& col, int oh, int ow, Tensor<T>& grad_in) {
    const int k = s.kernel;
    const int p = s.pad();
    const int st = s.stride;
    const std::size_t n = static_cast<std::size_t>(oh) * ow;
    for (int ic = 0; ic < s.in_channels; ++ic) {
        for (int ky = 0; ky < k; ++ky) {
            int oy_lo, oy_hi;
            valid_range(grad_in.height, oh, ky, p, st, oy_lo, oy_hi);
            for (int kx = 0; kx < k; ++kx) {
                int ox_lo, ox_hi;
                valid_range(grad_in.width, ow, kx, p, st, ox_lo, ox_hi);
                const T* row = col.data() + ((static_cast<std::size_t>(ic) * k + ky) * k + kx) * n;
                for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                    T* irow = grad_in.plane(ic) + static_cast<std::size_t>(oy * st + ky - p) * grad_in.width + (kx - p);
                    const T* r = row + static_cast<std::size_t>(oy) * ow;
                    for (int ox = ox_lo; ox <= ox_hi; ++ox) {
                        irow[ox * st] += r[ox];
                    }
                }
            }
        }
    }
}

template <std::floating_point T>
std::vector<T>& scratch(int slot) {
    thread_local std::vector<T> buffers[2];
    return buffers[slot];
}

} // namespace detail

template <std::floating_point T>
void conv_forward(const ConvShape& s, std::span<const T> weight, std::span<const T> bias, const Tensor<T>& in,
                  Tensor<T>& out) {
    if (in.channels != s.in_channels) {
        throw ShapeError("conv input channel mismatch");
    }
    const int oh = s.out_extent(in.height);
    const int ow = s.out_extent(in.width);
    out = Tensor<T>(s.out_channels, oh, ow);
    std::vector<T>& col = detail::scratch<T>(0);
    detail::im2col(s, in, oh, ow, col);
    const std::size_t n = static_cast<std::size_t>(oh) * ow;
    const std::size_t kk_count = static_cast<std::size_t>(s.in_channels) * s.kernel * s.kernel;
    for (int oc = 0; oc < s.out_channels; ++oc) {
        T* o = out.plane(oc);
        std::fill(o, o + n, bias[oc]);
        const T* wrow = weight.data() + oc * kk_count;
        for (std::size_t kk = 0; kk < kk_count; ++kk) {
            const T w = wrow[kk];
            const T* c = col.data() + kk * n;
            for (std::size_t i = 0; i < n; ++i) {
                o[i] += w * c[i];
            }
        }
    }
}

// grad_in may be null when the input gradient is not needed.
template <std::floating_point T>
void conv_backward(const ConvShape& s, std::span<const T> weight, const Tensor<T>& in, const Tensor<T>& grad_out,
                   std::span<T> grad_weight, std::span<T> grad_bias, Tensor<T>* grad_in) {
    const int oh = grad_out.height;
    const int ow = grad_out.width;
    std::vector<T>& col = detail::scratch<T>(0);
    detail::im2col(s, in, oh, ow, col);
    const std::size_t n = static_cast<std::size_t>(oh) * ow;
    const std::size_t kk_count = static_cast<std::size_t>(s.in_channels) * s.kernel * s.kernel;
    for (int oc = 0; oc < s.out_channels; ++oc) {
        const T* g = grad_out.plane(oc);
        T bsum = 0;
#pragma omp simd reduction(+ : bsum)
        for (std::size_t i = 0; i < n; ++i) {
            bsum += g[i];
        }
        grad_bias[oc] += bsum;
        T* gw = grad_weight.data() + oc * kk_count;
        for (std::size_t kk = 0; kk < kk_count; ++kk) {
            const T* c = col.data() + kk * n;
            T acc = 0;
#pragma omp simd reduction(+ : acc)
            for (std::size_t i = 0; i < n; ++i) {
                acc += g[i] * c[i];
            }
            gw[kk] += acc;
        }
    }
    if (grad_in == nullptr) {
        return;
    }
    std::vector<T>& gcol = detail::scratch<T>(1);
    gcol.assign(kk_count * n, T(0));
    for (int oc = 0; oc < s.out_channels; ++oc) {
        const T* g = grad_out.plane(oc);
        const T* wrow = weight.data() + oc * kk_count;
        for (std::size_t kk = 0; kk < kk_count; ++kk) {
            const T w = wrow[kk];
            T* c = gcol.data() + kk * n;
            for (std::size_t i = 0; i < n; ++i) {
                c[i] += w * g[i];
            }
        }
    }
    detail::col2im_add(s, gcol, oh, ow, *grad_in);
}

// ---------------------------------------------------------------------------
// Pointwise and resampling layers

template <std::floating_point T>
void relu_inplace(Tensor<T>& t) {
    for (T& v : t.data) {
        v = v > T(0) ? v : T(0);
    }
}

// Zeroes gradient entries where the (post-ReLU) activation is not positive.
template <std::floating_point T>
void relu_mask(const Tensor<T>& activation, Tensor<T>& grad) {
    for (std::size_t i = 0; i < grad.data.size(); ++i) {
        if (!(activation.data[i] > T(0))) {
            grad.data[i] = T(0);
        }
    }
}

// 3x3 max pooling, stride 2, padding 1. argmax holds flat input indices.
template <std::floating_point T>
void maxpool_forward(const Tensor<T>& in, Tensor<T>& out, std::vector<std::uint32_t>& argmax) {
    const int oh = (in.height + 2 - 3) / 2 + 1;
    const int ow = (in.width + 2 - 3) / 2 + 1;
    out = Tensor<T>(in.channels, oh, ow);
    argmax.assign(out.data.size(), 0);
    std::size_t o = 0;
    for (int c = 0; c < in.channels; ++c) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox, ++o) {
                T best = -std::numeric_limits<T>::infinity();
                std::uint32_t best_i = 0;
                for (int dy = -1; dy <= 1; ++dy) {
                    const int y = oy * 2 + dy;
                    if (y < 0 || y >= in.height) {
                        continue;
                    }
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int x = ox * 2 + dx;
                        if (x < 0 || x >= in.width) {
                            continue;
                        }
                        const auto idx = static_cast<std::uint32_t>((c * static_cast<std::size_t>(in.height) + y) * in.width + x);
                        if (in.data[idx] > best) {
                            best = in.data[idx];
                            best_i = idx;
                        }
                    }
                }
                out.data[o] = best;
                argmax[o] = best_i;
            }
        }
    }
}

template <std::floating_point T>
void maxpool_backward(const Tensor<T>& grad_out, const std::vector<std::uint32_t>& argmax, Tensor<T>& grad_in) {
    for (std::size_t o = 0; o < grad_out.data.size(); ++o) {
        grad_in.data[argmax[o]] += grad_out.data[o];
    }
}

// Nearest-neighbour x2 upsampling.
template <std::floating_point T>
Tensor<T> upsample2x(const Tensor<T>& in) {
    Tensor<T> out(in.channels, in.height * 2, in.width * 2);
    for (int c = 0; c < in.channels; ++c) {
        for (int y = 0; y < out.height; ++y) {
            const T* irow = in.plane(c) + static_cast<std::size_t>(y / 2) * in.width;
            T* orow = out.plane(c) + static_cast<std::size_t>(y) * out.width;
            for (int x = 0; x < out.width; ++x) {
                orow[x] = irow[x / 2];
            }
        }
    }
    return out;
}

template <std::floating_point T>
Tensor<T> upsample2x_backward(const Tensor<T>& grad_out) {
    Tensor<T> g(grad_out.channels, grad_out.height / 2, grad_out.width / 2);
    for (int c = 0; c < grad_out.channels; ++c) {
        for (int y = 0; y < grad_out.height; ++y) {
            const T* grow = grad_out.plane(c) + static_cast<std::size_t>(y) * grad_out.width;
            T* row = g.plane(c) + static_cast<std::size_t>(y / 2) * g.width;
            for (int x = 0; x < grad_out.width; ++x) {
                row[x / 2] += grow[x];
            }
        }
    }
    return g;
}

template <std::floating_point T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.height != b.height || a.width != b.width) {
        throw ShapeError("concat spatial mismatch");
    }
    Tensor<T> out(a.channels + b.channels, a.height, a.width);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
    return out;
}

// Splits a concat gradient back into its two parts.
template <std::floating_point T>
void split_channels(const Tensor<T>& g, int first_channels, Tensor<T>& ga, Tensor<T>& gb) {
    ga = Tensor<T>(first_channels, g.height, g.width);
    gb = Tensor<T>(g.channels - first_channels, g.height, g.width);
    std::copy(g.data.begin(), g.data.begin() + static_cast<std::ptrdiff_t>(ga.data.size()), ga.data.begin());
    std::copy(g.data.begin() + static_cast<std::ptrdiff_t>(ga.data.size()), g.data.end(), gb.data.begin());
}

template <std::floating_point T>
std::vector<T> global_average_pool(const Tensor<T>& in) {
    std::vector<T> out(static_cast<std::size_t>(in.channels));
    const auto n = static_cast<T>(in.plane_size());
    for (int c = 0; c < in.channels; ++c) {
        T s = 0;
        const T* p = in.plane(c);
        for (std::size_t i = 0; i < in.plane_size(); ++i) {
            s += p[i];
        }
        out[c] = s / n;
    }
    return out;
}

template <std::floating_point T>
void global_average_pool_backward(std::span<const T> grad_out, Tensor<T>& grad_in) {
    const auto n = static_cast<T>(grad_in.plane_size());
    for (int c = 0; c < grad_in.channels; ++c) {
        T* p = grad_in.plane(c);
        const T g = grad_out[c] / n;
        for (std::size_t i = 0; i < grad_in.plane_size(); ++i) {
            p[i] += g;
        }
    }
}

// y = W x + b with W stored row-major [out][in].
template <std::floating_point T>
std::vector<T> linear_forward(std::span<const T> weight, std::span<const T> bias, std::span<const T> x) {
    const std::size_t n_out = bias.size();
    const std::size_t n_in = x.size();
    std::vector<T> y(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
        T s = bias[o];
        const T* w = weight.data() + o * n_in;
        for (std::size_t i = 0; i < n_in; ++i) {
            s += w[i] * x[i];
        }
        y[o] = s;
    }
    return y;
}

template <std::floating_point T>
std::vector<T> linear_backward(std::span<const T> weight, std::span<const T> x, std::span<const T> grad_y,
                               std::span<T> grad_weight, std::span<T> grad_bias) {
    const std::size_t n_out = grad_y.size();
    const std::size_t n_in = x.size();
    std::vector<T> gx(n_in, T(0));
    for (std::size_t o = 0; o < n_out; ++o) {
        const T g = grad_y[o];
        grad_bias[o] += g;
        const T* w = weight.data() + o * n_in;
        T* gw = grad_weight.data() + o * n_in;
        for (std::size_t i = 0; i < n_in; ++i) {
            gw[i] += g * x[i];
            gx[i] += g * w[i];
        }
    }
    return gx;
}

} // namespace nucssl
