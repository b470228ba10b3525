#pragma once

// Training losses and evaluation metrics. Every reduction is a mean so the loss weights
// do not depend on resolution.

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "rmsteg/error.hpp"

namespace rmsteg::objectives {

namespace F = torch::nn::functional;

struct LossWeights {
    double alpha = 5.0;    // L1
    double beta = 0.2;     // SSIM
    double gamma = 3.5;    // LPIPS
    double delta = 16.0;   // QR restoration
    double epsilon = 3.0;  // transition

    void validate() const {
        if (alpha < 0 || beta < 0 || gamma < 0 || delta < 0 || epsilon < 0) {
            throw ConfigError("loss weights must be non-negative");
        }
    }
};

inline void check_same(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    if (a.sizes() != b.sizes()) throw ShapeMismatch(std::string(what) + ": inputs differ in shape");
}

inline torch::Tensor l1_loss(const torch::Tensor& a, const torch::Tensor& b) {
    check_same(a, b, "l1_loss");
    return (a - b).abs().mean();
}

inline torch::Tensor qr_loss(const torch::Tensor& restored, const torch::Tensor& original) {
    check_same(restored, original, "qr_loss");
    return (restored - original).abs().mean();
}

inline torch::Tensor ssim_window(int size = 11, double sigma = 1.5, torch::Dtype dtype = torch::kFloat32) {
    auto c = torch::arange(size, torch::kFloat64) - (size - 1) / 2.0;
    auto g = torch::exp(-c.pow(2) / (2 * sigma * sigma));
    g = g / g.sum();
    return torch::outer(g, g).to(dtype);
}

// Mean SSIM over valid 11x11 Gaussian windows, per channel, dynamic range 1.
inline torch::Tensor ssim_metric(const torch::Tensor& a, const torch::Tensor& b) {
    check_same(a, b, "ssim");
    auto x = a.dim() == 3 ? a.unsqueeze(0) : a;
    auto y = b.dim() == 3 ? b.unsqueeze(0) : b;
    if (x.dim() != 4 || x.size(2) < 11 || x.size(3) < 11) throw ShapeMismatch("ssim needs images of at least 11x11");
    const auto ch = x.size(1);
    auto w = ssim_window(11, 1.5, x.scalar_type()).expand({ch, 1, 11, 11}).contiguous();
    auto conv = [&](const torch::Tensor& t) { return F::conv2d(t, w, F::Conv2dFuncOptions().groups(ch)); };
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    auto mx = conv(x), my = conv(y);
    auto sxx = conv(x * x) - mx * mx;
    auto syy = conv(y * y) - my * my;
    auto sxy = conv(x * y) - mx * my;
    auto map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
    return map.mean();
}

inline torch::Tensor ssim_loss(const torch::Tensor& a, const torch::Tensor& b) { return 1.0 - ssim_metric(a, b); }

// Perceptual distance over a frozen, fixed-seed random convolutional feature stack.
// Features are unit-normalised along channels; per-layer squared distances are averaged
// over space and summed over layers.
struct RandomFeatureLpips {
    std::vector<torch::Tensor> weights;
    std::vector<int> strides;

    explicit RandomFeatureLpips(std::uint64_t seed = 0) {
        auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
        const int chans[] = {3, 16, 32, 64};
        for (int i = 0; i < 3; ++i) {
            const double fan_in = chans[i] * 9.0;
            weights.push_back(torch::randn({chans[i + 1], chans[i], 3, 3}, gen, torch::kFloat64) *
                              std::sqrt(2.0 / fan_in));
            strides.push_back(i == 0 ? 1 : 2);
        }
    }

    std::vector<torch::Tensor> features(torch::Tensor x) const {
        std::vector<torch::Tensor> out;
        x = x * 2.0 - 1.0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            x = torch::relu(F::conv2d(x, weights[i].to(x.scalar_type()),
                                      F::Conv2dFuncOptions().stride(strides[i]).padding(1)));
            out.push_back(x);
        }
        return out;
    }

    torch::Tensor operator()(const torch::Tensor& a, const torch::Tensor& b) const {
        check_same(a, b, "lpips");
        auto x = a.dim() == 3 ? a.unsqueeze(0) : a;
        auto y = b.dim() == 3 ? b.unsqueeze(0) : b;
        auto fx = features(x), fy = features(y);
        auto total = torch::zeros({}, x.options());
        for (std::size_t i = 0; i < fx.size(); ++i) {
            auto nx = fx[i] / (fx[i].pow(2).sum(1, true) + 1e-10).sqrt();
            auto ny = fy[i] / (fy[i].pow(2).sum(1, true) + 1e-10).sqrt();
            total = total + (nx - ny).pow(2).sum(1).mean();
        }
        return total;
    }
};

inline const RandomFeatureLpips& default_lpips() {
    static const RandomFeatureLpips net(0);
    return net;
}

inline torch::Tensor lpips_loss(const torch::Tensor& a, const torch::Tensor& b) { return default_lpips()(a, b); }

struct LossComponents {
    torch::Tensor l1, ssim, lpips, qr, transition;
};

inline torch::Tensor total_loss(const LossComponents& c, const LossWeights& w) {
    return w.alpha * c.l1 + w.beta * c.ssim + w.gamma * c.lpips + w.delta * c.qr + w.epsilon * c.transition;
}

// 10 log10(1 / MSE) for range-1 images; +infinity when the images are identical.
inline double psnr(const torch::Tensor& a, const torch::Tensor& b) {
    check_same(a, b, "psnr");
    const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

struct MetricRow {
    std::string image_id;
    double psnr = 0, ssim = 0, lpips = 0, emr = 0;
    bool tra_flag = false;
    std::string distortion_spec_id;
};

inline const char* kCsvHeader = "image_id,psnr,ssim,lpips,emr,tra_flag,distortion_spec_id";

inline std::string csv_row(const MetricRow& r) {
    std::ostringstream o;
    o.precision(6);
    o << std::fixed << r.image_id << ',';
    if (std::isinf(r.psnr)) o << "inf";
    else o << r.psnr;
    o << ',' << r.ssim << ',' << r.lpips << ',' << r.emr << ',' << (r.tra_flag ? 1 : 0) << ',' << r.distortion_spec_id;
    return o.str();
}

}  // namespace rmsteg::objectives
