#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include <torch/torch.h>

#include "rmsteg/distortion.hpp"
#include "rmsteg/objectives.hpp"

using namespace rmsteg;
using distortion::DistortionConfig;
using distortion::DistortionSpec;

namespace {

// Central-difference check on a handful of coordinates, double precision.
template <class Fn>
void expect_gradient(Fn f, torch::Tensor x, int samples = 10, double tol = 1e-3) {
    x = x.to(torch::kFloat64).detach().requires_grad_(true);
    f(x).backward();
    auto grad = x.grad().clone().view(-1);
    torch::NoGradGuard g;
    const double eps = 1e-6;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(123);
    auto idx = torch::randint(x.numel(), {samples}, gen, torch::kLong);
    for (int s = 0; s < samples; ++s) {
        const auto i = idx[s].template item<int64_t>();
        auto d = torch::zeros_like(x).view(-1);
        d[i] = eps;
        auto dv = d.view_as(x);
        const double fd = (f(x + dv) - f(x - dv)).template item<double>() / (2 * eps);
        const double an = grad[i].template item<double>();
        EXPECT_LE(std::abs(fd - an), tol * std::max({std::abs(fd), std::abs(an), 1e-4})) << "coord " << i;
    }
}

}  // namespace

TEST(Distortion, DefaultsMatchTrainingBounds) {
    DistortionConfig c;
    EXPECT_DOUBLE_EQ(c.noise_sigma, 0.07);
    EXPECT_EQ(c.jpeg_quality, 60);
    EXPECT_DOUBLE_EQ(c.warp_frac, 0.02);
    EXPECT_DOUBLE_EQ(c.brightness_max, 0.3);
    EXPECT_DOUBLE_EQ(c.hue_max, 0.1);
    EXPECT_DOUBLE_EQ(c.saturation_max, 1.0);
    EXPECT_EQ(c.blur_kernel, 7);
}

TEST(Distortion, InvalidConfigRejected) {
    DistortionConfig c;
    c.contrast_range = {1.5, 0.5};
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.jpeg_quality = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.noise_sigma = -1;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Distortion, SampleSpecIsDeterministicAndBounded) {
    DistortionConfig c;
    EXPECT_EQ(distortion::sample_spec(c, 5), distortion::sample_spec(c, 5));
    for (uint64_t s = 0; s < 500; ++s) {
        auto sp = distortion::sample_spec(c, s);
        EXPECT_LE(std::abs(sp.brightness_shift), 0.3);
        EXPECT_LE(std::abs(sp.hue_shift), 0.1);
        EXPECT_GE(sp.saturation_scale, 0.0);
        EXPECT_LE(sp.saturation_scale, 1.0);
        EXPECT_GE(sp.contrast_scale, 0.5);
        EXPECT_LE(sp.contrast_scale, 1.5);
        EXPECT_GE(sp.jpeg_quality, 60);
        EXPECT_LE(sp.jpeg_quality, 100);
        EXPECT_LE(sp.noise_sigma, 0.07);
        for (double w : sp.warp) EXPECT_LE(std::abs(w), 0.02);
    }
}

TEST(Distortion, NoiseSigmaIsUniformKolmogorovSmirnov) {
    DistortionConfig c;
    std::vector<double> v;
    int enabled = 0;
    const int total = 10000;
    for (int s = 0; s < total; ++s) {
        auto sp = distortion::sample_spec(c, s);
        if (sp.noise_sigma > 0) {
            v.push_back(sp.noise_sigma / 0.07);
            ++enabled;
        }
    }
    std::sort(v.begin(), v.end());
    double d = 0;
    const double n = static_cast<double>(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) d = std::max({d, (i + 1) / n - v[i], v[i] - i / n});
    EXPECT_LT(d, 1.63 / std::sqrt(n));  // alpha = 0.01
    EXPECT_NEAR(enabled / static_cast<double>(total), 0.5, 0.03);
}

TEST(Distortion, EmptySpecIsIdentity) {
    auto img = torch::rand({3, 40, 40});
    EXPECT_TRUE(torch::equal(distortion::apply(img, DistortionSpec{}), img));
}

TEST(Distortion, NoiseOnlyStdWithinFivePercent) {
    auto img = torch::full({3, 224, 224}, 0.5);
    DistortionSpec s;
    s.noise_sigma = 0.1;
    s.noise_seed = 77;
    const double sd = (distortion::apply(img, s) - img).std().item<double>();
    EXPECT_GE(sd, 0.095);
    EXPECT_LE(sd, 0.105);
}

TEST(Distortion, OutputAlwaysInUnitRange) {
    DistortionConfig c;
    c.stage_probability = 1.0;
    for (uint64_t s = 0; s < 20; ++s) {
        auto out = distortion::apply(torch::rand({2, 3, 32, 32}), distortion::sample_spec(c, s));
        EXPECT_GE(out.min().item<double>(), 0.0);
        EXPECT_LE(out.max().item<double>(), 1.0);
    }
}

TEST(Distortion, JpegQuality100IsNearlyLossless) {
    auto img = torch::rand({1, 3, 30, 30});
    DistortionSpec s;
    s.apply_jpeg = true;
    s.jpeg_quality = 100;
    EXPECT_LE((distortion::apply(img, s) - img).abs().max().item<double>(), 1.0 / 255);
}

TEST(Distortion, JpegLowQualityLosesDetailAndHandlesOddSizes) {
    auto img = torch::rand({1, 3, 30, 27});
    DistortionSpec s;
    s.apply_jpeg = true;
    s.jpeg_quality = 10;
    auto out = distortion::apply(img, s);
    EXPECT_EQ(out.sizes(), img.sizes());
    EXPECT_GT((out - img).abs().mean().item<double>(), 0.05);
    // a flat image stays flat: only the DC term is quantised
    auto flat = distortion::apply(torch::full({1, 3, 16, 16}, 0.4), s);
    EXPECT_LT((flat.amax({2, 3}) - flat.amin({2, 3})).max().item<double>(), 1e-4);
}

TEST(Distortion, ZeroWarpHomographyIsIdentityMap) {
    auto h = distortion::detail::homography({});
    EXPECT_TRUE(torch::allclose(h, torch::eye(3, torch::kFloat64), 1e-12, 1e-12));
    auto img = torch::rand({1, 3, 16, 16});
    EXPECT_LT((distortion::detail::warp(img, {}) - img).abs().max().item<double>(), 1e-5);
}

TEST(Distortion, HueRotationKeepsLuminanceAndFullTurnIsIdentity) {
    auto img = torch::rand({1, 3, 8, 8}, torch::kFloat64);
    auto rot = distortion::detail::rotate_hue(img, 0.25);
    EXPECT_TRUE(torch::allclose(distortion::detail::luminance(rot), distortion::detail::luminance(img), 1e-6, 1e-6));
    EXPECT_TRUE(torch::allclose(distortion::detail::rotate_hue(img, 1.0), img, 1e-9, 1e-9));
}

TEST(Distortion, EveryStageIsDifferentiable) {
    const auto base = torch::rand({1, 3, 16, 16}, torch::kFloat64) * 0.5 + 0.25;
    std::vector<DistortionSpec> specs(7);
    specs[0].warp = {0.02, -0.01, 0.0, 0.01, -0.02, 0.02, 0.01, 0.0};
    specs[1].brightness_shift = 0.05;
    specs[2].hue_shift = 0.05;
    specs[3].saturation_scale = 0.5;
    specs[4].blur_sigma = 1.5;
    specs[5].noise_sigma = 0.01;
    specs[6].apply_jpeg = true;
    specs[6].jpeg_quality = 50;
    for (const auto& s : specs) {
        auto x = base.clone().requires_grad_(true);
        distortion::apply(x, s).mean().backward();
        EXPECT_TRUE(torch::isfinite(x.grad()).all().item<bool>());
        EXPECT_GT(x.grad().abs().sum().item<double>(), 0.0);
    }
}

TEST(Distortion, TamperCoverage) {
    auto img = torch::rand({3, 224, 224}) * 0.9 + 0.05;
    EXPECT_TRUE(torch::equal(distortion::apply_tamper(img, 0.0, 1), img));
    for (uint64_t seed = 0; seed < 10; ++seed) {
        auto t = distortion::apply_tamper(img, 0.05, seed);
        const double f = distortion::covered_fraction(t, img);
        EXPECT_GE(f, 0.05);
        EXPECT_LE(f, 0.06);
    }
    EXPECT_TRUE(torch::equal(distortion::apply_tamper(img, 0.05, 3), distortion::apply_tamper(img, 0.05, 3)));
}

TEST(Distortion, TextRoundTrip) {
    DistortionConfig c;
    c.stage_probability = 1.0;
    auto s = distortion::sample_spec(c, 99);
    EXPECT_EQ(distortion::from_text(distortion::to_text(s)), s);
    EXPECT_THROW(distortion::from_text("hue_shift = 0.1\n"), FormatError);
    EXPECT_THROW(distortion::from_text(distortion::to_text(s) + "noise_sigma = abc\n"), FormatError);
}

TEST(Objectives, L1) {
    auto a = torch::rand({2, 3, 5, 5}), b = torch::rand({2, 3, 5, 5});
    EXPECT_EQ(objectives::l1_loss(a, a).item<double>(), 0.0);
    EXPECT_NEAR(objectives::l1_loss(torch::zeros({3, 4, 4}), torch::full({3, 4, 4}, 0.5)).item<double>(), 0.5, 1e-7);
    auto aa = a.accessor<float, 4>(), ba = b.accessor<float, 4>();
    double s = 0;
    for (int i = 0; i < 2; ++i)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 5; ++y)
                for (int x = 0; x < 5; ++x) s += std::abs(aa[i][c][y][x] - ba[i][c][y][x]);
    EXPECT_NEAR(objectives::l1_loss(a, b).item<double>(), s / 150, 1e-6);
    EXPECT_NEAR(objectives::qr_loss(a, b).item<double>(), s / 150, 1e-6);
    EXPECT_THROW(objectives::l1_loss(a, b[0]), ShapeMismatch);
}

TEST(Objectives, SsimAxiomsAndSingleWindowOracle) {
    auto a = torch::rand({1, 3, 20, 20}, torch::kFloat64), b = torch::rand({1, 3, 20, 20}, torch::kFloat64);
    EXPECT_NEAR(objectives::ssim_metric(a, a).item<double>(), 1.0, 1e-9);
    EXPECT_NEAR(objectives::ssim_loss(a, a).item<double>(), 0.0, 1e-9);
    EXPECT_NEAR(objectives::ssim_metric(a, b).item<double>(), objectives::ssim_metric(b, a).item<double>(), 1e-6);

    // 11x11 single-channel images have exactly one window: evaluate the formula directly.
    auto x = torch::rand({1, 1, 11, 11}, torch::kFloat64), y = torch::rand({1, 1, 11, 11}, torch::kFloat64);
    auto w = objectives::ssim_window(11, 1.5, torch::kFloat64);
    double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
            const double wi = w[i][j].item<double>(), xv = x[0][0][i][j].item<double>(),
                         yv = y[0][0][i][j].item<double>();
            mx += wi * xv;
            my += wi * yv;
            sxx += wi * xv * xv;
            syy += wi * yv * yv;
            sxy += wi * xv * yv;
        }
    sxx -= mx * mx;
    syy -= my * my;
    sxy -= mx * my;
    const double c1 = 1e-4, c2 = 9e-4;
    const double expected = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
    EXPECT_NEAR(objectives::ssim_metric(x, y).item<double>(), expected, 1e-9);
}

TEST(Objectives, LpipsAxioms) {
    auto a = torch::rand({1, 3, 32, 32}), b = torch::rand({1, 3, 32, 32});
    EXPECT_NEAR(objectives::lpips_loss(a, a).item<double>(), 0.0, 1e-9);
    EXPECT_GT(objectives::lpips_loss(a, b).item<double>(), 0.0);
    EXPECT_NEAR(objectives::lpips_loss(a, b).item<double>(), objectives::lpips_loss(b, a).item<double>(), 1e-6);
    auto slight = (a + 0.01 * torch::randn_like(a)).clamp(0, 1);
    EXPECT_LT(objectives::lpips_loss(a, slight).item<double>(), objectives::lpips_loss(a, b).item<double>());
}

TEST(Objectives, TotalLossArithmetic) {
    auto t = [](double v) { return torch::tensor(v, torch::kFloat64); };
    objectives::LossWeights w;
    EXPECT_NEAR(objectives::total_loss({t(0.1), t(0.2), t(0.3), t(0.05), t(0.02)}, w).item<double>(), 2.45, 1e-12);
    EXPECT_EQ(objectives::total_loss({t(0), t(0), t(0), t(0), t(0)}, w).item<double>(), 0.0);
    // linear in each component with its weight
    const double base = objectives::total_loss({t(0.1), t(0.2), t(0.3), t(0.05), t(0.02)}, w).item<double>();
    const double bumped = objectives::total_loss({t(0.1), t(0.2), t(0.3), t(0.06), t(0.02)}, w).item<double>();
    EXPECT_NEAR((bumped - base) / 0.01, 16.0, 1e-9);
}

TEST(Objectives, Psnr) {
    auto a = torch::zeros({3, 10, 10});
    EXPECT_TRUE(std::isinf(objectives::psnr(a, a)));
    EXPECT_DOUBLE_EQ(objectives::psnr(torch::zeros({3, 10, 10}, torch::kFloat64),
                                      torch::full({3, 10, 10}, 0.1, torch::kFloat64)),
                     20.0);
    auto b = torch::rand({3, 10, 10});
    EXPECT_DOUBLE_EQ(objectives::psnr(a, b), objectives::psnr(b, a));
}

TEST(Objectives, CsvRow) {
    objectives::MetricRow r{"img01", 31.5, 0.9, 0.07, 0.73, true, "none"};
    EXPECT_EQ(objectives::csv_row(r), "img01,31.500000,0.900000,0.070000,0.730000,1,none");
    r.psnr = std::numeric_limits<double>::infinity();
    EXPECT_EQ(objectives::csv_row(r).substr(0, 10), "img01,inf,");
}

TEST(Objectives, GradientsMatchFiniteDifferences) {
    auto b = torch::rand({1, 3, 16, 16}, torch::kFloat64);
    auto a = torch::rand({1, 3, 16, 16}, torch::kFloat64);
    expect_gradient([&](const torch::Tensor& x) { return objectives::l1_loss(x, b); }, a);
    expect_gradient([&](const torch::Tensor& x) { return objectives::ssim_loss(x, b); }, a);
    expect_gradient([&](const torch::Tensor& x) { return objectives::lpips_loss(x, b); }, a);
    expect_gradient([&](const torch::Tensor& x) { return objectives::qr_loss(x, b); }, a);
}
