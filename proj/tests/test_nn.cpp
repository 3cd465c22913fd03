#include <gtest/gtest.h>

#include "nucssl/nn.hpp"
#include "nucssl/random.hpp"

using namespace nucssl;

namespace {

Tensor<double> random_tensor(Rng& rng, int c, int h, int w) {
    Tensor<double> t(c, h, w);
    for (auto& v : t.data) {
        v = rng.normal();
    }
    return t;
}

std::vector<double> random_vec(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) {
        x = rng.normal();
    }
    return v;
}

// Direct seven-loop convolution, weights laid out [oc][ic][ky][kx].
Tensor<double> reference_conv(const ConvShape& s, const std::vector<double>& w, const std::vector<double>& b,
                              const Tensor<double>& in) {
    const int oh = s.out_extent(in.height);
    const int ow = s.out_extent(in.width);
    Tensor<double> out(s.out_channels, oh, ow);
    for (int oc = 0; oc < s.out_channels; ++oc) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double acc = b[oc];
                for (int ic = 0; ic < s.in_channels; ++ic) {
                    for (int ky = 0; ky < s.kernel; ++ky) {
                        for (int kx = 0; kx < s.kernel; ++kx) {
                            const int y = oy * s.stride + ky - s.pad();
                            const int x = ox * s.stride + kx - s.pad();
                            if (y < 0 || y >= in.height || x < 0 || x >= in.width) {
                                continue;
                            }
                            acc += w[((oc * s.in_channels + ic) * s.kernel + ky) * s.kernel + kx] * in(ic, y, x);
                        }
                    }
                }
                out(oc, oy, ox) = acc;
            }
        }
    }
    return out;
}

double weighted_sum(const Tensor<double>& t, const Tensor<double>& g) {
    double s = 0;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
        s += t.data[i] * g.data[i];
    }
    return s;
}

struct ConvCase {
    int ic, oc, k, stride, h, w;
};

const ConvCase kCases[] = {{1, 1, 3, 1, 5, 5}, {3, 4, 3, 2, 7, 6}, {2, 5, 1, 1, 4, 3}, {4, 2, 3, 2, 8, 8},
                           {3, 3, 7, 2, 9, 10}, {2, 3, 3, 1, 1, 1}};

} // namespace

TEST(Conv, ForwardMatchesDirectLoops) {
    Rng rng(1);
    for (const auto& c : kCases) {
        const ConvShape s{c.ic, c.oc, c.k, c.stride};
        const auto w = random_vec(rng, s.weight_count());
        const auto b = random_vec(rng, static_cast<std::size_t>(c.oc));
        const Tensor<double> in = random_tensor(rng, c.ic, c.h, c.w);
        Tensor<double> out;
        conv_forward<double>(s, w, b, in, out);
        const Tensor<double> ref = reference_conv(s, w, b, in);
        ASSERT_EQ(out.height, ref.height);
        ASSERT_EQ(out.width, ref.width);
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            EXPECT_NEAR(out.data[i], ref.data[i], 1e-12);
        }
    }
}

TEST(Conv, BackwardMatchesFiniteDifferencesOfReference) {
    Rng rng(2);
    const double h = 1e-6;
    for (const auto& c : kCases) {
        const ConvShape s{c.ic, c.oc, c.k, c.stride};
        auto w = random_vec(rng, s.weight_count());
        auto b = random_vec(rng, static_cast<std::size_t>(c.oc));
        Tensor<double> in = random_tensor(rng, c.ic, c.h, c.w);
        const Tensor<double> g = random_tensor(rng, c.oc, s.out_extent(c.h), s.out_extent(c.w));

        std::vector<double> gw(w.size(), 0.0), gb(b.size(), 0.0);
        Tensor<double> gin(c.ic, c.h, c.w);
        conv_backward<double>(s, w, in, g, gw, gb, &gin);

        // The objective is linear in each argument, so central differences
        // are exact up to rounding.
        auto objective = [&] { return weighted_sum(reference_conv(s, w, b, in), g); };
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double keep = w[i];
            w[i] = keep + h;
            const double up = objective();
            w[i] = keep - h;
            const double down = objective();
            w[i] = keep;
            EXPECT_NEAR(gw[i], (up - down) / (2 * h), 1e-6);
        }
        for (std::size_t i = 0; i < b.size(); ++i) {
            const double keep = b[i];
            b[i] = keep + h;
            const double up = objective();
            b[i] = keep - h;
            const double down = objective();
            b[i] = keep;
            EXPECT_NEAR(gb[i], (up - down) / (2 * h), 1e-6);
        }
        for (std::size_t i = 0; i < in.data.size(); ++i) {
            const double keep = in.data[i];
            in.data[i] = keep + h;
            const double up = objective();
            in.data[i] = keep - h;
            const double down = objective();
            in.data[i] = keep;
            EXPECT_NEAR(gin.data[i], (up - down) / (2 * h), 1e-6);
        }
    }
}

TEST(Conv, BackwardAccumulates) {
    Rng rng(3);
    const ConvShape s{2, 2, 3, 1};
    const auto w = random_vec(rng, s.weight_count());
    const Tensor<double> in = random_tensor(rng, 2, 4, 4);
    const Tensor<double> g = random_tensor(rng, 2, 4, 4);
    std::vector<double> gw1(w.size(), 0.0), gb1(2, 0.0), gw2(w.size(), 0.0), gb2(2, 0.0);
    conv_backward<double>(s, w, in, g, gw1, gb1, nullptr);
    conv_backward<double>(s, w, in, g, gw2, gb2, nullptr);
    conv_backward<double>(s, w, in, g, gw2, gb2, nullptr);
    for (std::size_t i = 0; i < w.size(); ++i) {
        EXPECT_NEAR(gw2[i], 2 * gw1[i], 1e-12);
    }
}

TEST(Conv, FloatAgreesWithDouble) {
    Rng rng(4);
    const ConvShape s{3, 8, 3, 2};
    const auto w = random_vec(rng, s.weight_count());
    const auto b = random_vec(rng, 8);
    const Tensor<double> in = random_tensor(rng, 3, 16, 16);
    Tensor<float> inf(3, 16, 16);
    std::copy(in.data.begin(), in.data.end(), inf.data.begin());
    const std::vector<float> wf(w.begin(), w.end()), bf(b.begin(), b.end());
    Tensor<float> outf;
    conv_forward<float>(s, wf, bf, inf, outf);
    const Tensor<double> ref = reference_conv(s, w, b, in);
    for (std::size_t i = 0; i < ref.data.size(); ++i) {
        EXPECT_NEAR(outf.data[i], ref.data[i], 1e-4);
    }
}

TEST(Layers, MaxPoolRoutesGradientToArgmax) {
    Tensor<double> in(1, 4, 4);
    for (int i = 0; i < 16; ++i) {
        in.data[static_cast<std::size_t>(i)] = i;
    }
    Tensor<double> out;
    std::vector<std::uint32_t> arg;
    maxpool_forward(in, out, arg);
    ASSERT_EQ(out.height, 2);
    EXPECT_EQ(out(0, 0, 0), 5);
    EXPECT_EQ(out(0, 1, 1), 15);
    Tensor<double> g(1, 2, 2, 1.0);
    Tensor<double> gin(1, 4, 4);
    maxpool_backward(g, arg, gin);
    EXPECT_EQ(gin(0, 1, 1), 1.0);
    EXPECT_EQ(gin(0, 3, 3), 1.0);
    EXPECT_EQ(gin(0, 0, 0), 0.0);
}

TEST(Layers, UpsampleBackwardIsAdjoint) {
    Rng rng(5);
    const Tensor<double> x = random_tensor(rng, 2, 3, 4);
    const Tensor<double> gy = random_tensor(rng, 2, 6, 8);
    const Tensor<double> up = upsample2x(x);
    const Tensor<double> gx = upsample2x_backward(gy);
    EXPECT_NEAR(weighted_sum(up, gy), weighted_sum(x, gx), 1e-12);
}

TEST(Layers, ConcatSplitRoundTrip) {
    Rng rng(6);
    const Tensor<double> a = random_tensor(rng, 2, 3, 3);
    const Tensor<double> b = random_tensor(rng, 3, 3, 3);
    const Tensor<double> ab = concat_channels(a, b);
    EXPECT_EQ(ab.channels, 5);
    Tensor<double> ga(2, 3, 3), gb(3, 3, 3);
    split_channels(ab, 2, ga, gb);
    EXPECT_EQ(ga.data, a.data);
    EXPECT_EQ(gb.data, b.data);
}

TEST(Layers, GlobalAveragePoolAndLinearAdjoints) {
    Rng rng(7);
    const Tensor<double> x = random_tensor(rng, 3, 4, 5);
    const auto gy = random_vec(rng, 3);
    const auto pooled = global_average_pool(x);
    Tensor<double> gx(3, 4, 5);
    global_average_pool_backward<double>(gy, gx);
    double lhs = 0;
    for (int c = 0; c < 3; ++c) {
        lhs += pooled[static_cast<std::size_t>(c)] * gy[static_cast<std::size_t>(c)];
    }
    EXPECT_NEAR(lhs, weighted_sum(x, gx), 1e-12);

    const auto w = random_vec(rng, 6);
    const auto b = random_vec(rng, 2);
    const auto v = random_vec(rng, 3);
    const auto y = linear_forward<double>(w, b, v);
    EXPECT_NEAR(y[1], b[1] + w[3] * v[0] + w[4] * v[1] + w[5] * v[2], 1e-14);
    const auto g = random_vec(rng, 2);
    std::vector<double> gw(6, 0.0), gb(2, 0.0);
    const auto gv = linear_backward<double>(w, v, g, gw, gb);
    EXPECT_NEAR(gv[0], g[0] * w[0] + g[1] * w[3], 1e-14);
    EXPECT_NEAR(gw[4], g[1] * v[1], 1e-14);
    EXPECT_EQ(gb, g);
}

TEST(Layers, ReluMaskZeroesInactive) {
    Tensor<double> a(1, 1, 3);
    a.data = {-1.0, 0.0, 2.0};
    relu_inplace(a);
    EXPECT_EQ(a.data, (std::vector<double>{0.0, 0.0, 2.0}));
    Tensor<double> g(1, 1, 3, 1.0);
    relu_mask(a, g);
    EXPECT_EQ(g.data, (std::vector<double>{0.0, 0.0, 1.0}));
}
