#pragma once

// Differentiable print-and-photograph corruption. A DistortionSpec holds every sampled
// value (including the noise seed), so applying a spec is a pure function.
//
// Stage order: warp -> colour jitter -> blur -> noise -> JPEG -> clamp.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <utility>

#include <torch/torch.h>

#include "rmsteg/error.hpp"

namespace rmsteg::distortion {

namespace F = torch::nn::functional;

struct DistortionConfig {
    double brightness_max = 0.3;
    double hue_max = 0.1;
    double saturation_max = 1.0;
    std::pair<double, double> contrast_range{0.5, 1.5};
    int jpeg_quality = 60;
    double noise_sigma = 0.07;
    int blur_kernel = 7;
    double warp_frac = 0.02;
    double stage_probability = 0.5;

    void validate() const {
        if (brightness_max < 0 || hue_max < 0 || saturation_max < 0 || noise_sigma < 0 || warp_frac < 0 ||
            contrast_range.first < 0) {
            throw ConfigError("distortion bounds must be non-negative");
        }
        if (contrast_range.first > contrast_range.second) throw ConfigError("contrast_range low > high");
        if (jpeg_quality < 1 || jpeg_quality > 100) throw ConfigError("jpeg_quality must be in [1, 100]");
        if (blur_kernel < 1 || blur_kernel % 2 == 0) throw ConfigError("blur_kernel must be odd and positive");
        if (stage_probability < 0 || stage_probability > 1) throw ConfigError("stage_probability must be in [0, 1]");
    }
};

// Disabled stages hold their neutral value.
struct DistortionSpec {
    double brightness_shift = 0.0;
    double hue_shift = 0.0;         // fraction of a full turn
    double saturation_scale = 1.0;  // 1 keeps chroma, 0 is grey
    double contrast_scale = 1.0;
    bool apply_jpeg = false;
    int jpeg_quality = 100;
    double noise_sigma = 0.0;
    std::uint64_t noise_seed = 0;
    double blur_sigma = 0.0;
    int blur_kernel = 7;
    std::array<double, 8> warp{};  // corner offsets as fractions of the side: (dx, dy) for TL, TR, BR, BL

    bool identity() const {
        bool warp_off = true;
        for (double w : warp) warp_off = warp_off && w == 0.0;
        return warp_off && brightness_shift == 0 && hue_shift == 0 && saturation_scale == 1 &&
               contrast_scale == 1 && !apply_jpeg && noise_sigma == 0 && blur_sigma == 0;
    }

    bool operator==(const DistortionSpec&) const = default;
};

inline DistortionSpec sample_spec(const DistortionConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto on = [&] { return unit(rng) < cfg.stage_probability; };
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    DistortionSpec s;
    s.blur_kernel = cfg.blur_kernel;
    // Every draw happens regardless of the coin so the stream layout never shifts.
    const bool warp_on = on();
    std::array<double, 8> warp{};
    for (double& w : warp) w = uniform(-cfg.warp_frac, cfg.warp_frac);
    if (warp_on) s.warp = warp;
    const bool b_on = on();
    const double b = uniform(-cfg.brightness_max, cfg.brightness_max);
    if (b_on) s.brightness_shift = b;
    const bool h_on = on();
    const double h = uniform(-cfg.hue_max, cfg.hue_max);
    if (h_on) s.hue_shift = h;
    const bool sat_on = on();
    const double sat = 1.0 - uniform(0.0, std::min(cfg.saturation_max, 1.0));
    if (sat_on) s.saturation_scale = sat;
    const bool c_on = on();
    const double c = uniform(cfg.contrast_range.first, cfg.contrast_range.second);
    if (c_on) s.contrast_scale = c;
    const bool blur_on = on();
    const double bs = uniform(1.0, 3.0);
    if (blur_on) s.blur_sigma = bs;
    const bool n_on = on();
    const double ns = uniform(0.0, cfg.noise_sigma);
    const std::uint64_t nseed = rng();
    if (n_on) {
        s.noise_sigma = ns;
        s.noise_seed = nseed;
    }
    const bool j_on = on();
    const int q = cfg.jpeg_quality + static_cast<int>(unit(rng) * (101 - cfg.jpeg_quality));
    if (j_on) {
        s.apply_jpeg = true;
        s.jpeg_quality = std::min(q, 100);
    }
    return s;
}

namespace detail {

inline torch::Tensor batched(const torch::Tensor& img) {
    if (img.dim() == 3) return img.unsqueeze(0);
    if (img.dim() == 4) return img;
    throw ShapeMismatch("expected [3, H, W] or [B, 3, H, W]");
}

// Homography taking the unit square corners (in [-1, 1] coords) to the perturbed corners.
inline torch::Tensor homography(const std::array<double, 8>& offsets) {
    const double base[4][2] = {{-1, -1}, {1, -1}, {1, 1}, {-1, 1}};
    auto a = torch::zeros({8, 8}, torch::kFloat64);
    auto rhs = torch::zeros({8}, torch::kFloat64);
    for (int i = 0; i < 4; ++i) {
        const double x = base[i][0], y = base[i][1];
        // offsets are fractions of the side; the normalised span is 2.
        const double u = x + 2 * offsets[2 * i], v = y + 2 * offsets[2 * i + 1];
        const double r1[8] = {x, y, 1, 0, 0, 0, -u * x, -u * y};
        const double r2[8] = {0, 0, 0, x, y, 1, -v * x, -v * y};
        for (int j = 0; j < 8; ++j) {
            a[2 * i][j] = r1[j];
            a[2 * i + 1][j] = r2[j];
        }
        rhs[2 * i] = u;
        rhs[2 * i + 1] = v;
    }
    auto h = torch::linalg_solve(a, rhs);
    return torch::cat({h, torch::ones({1}, torch::kFloat64)}).view({3, 3});
}

inline torch::Tensor warp(const torch::Tensor& x, const std::array<double, 8>& offsets) {
    const auto hgt = x.size(2), wid = x.size(3);
    auto hm = homography(offsets).to(x.scalar_type());
    auto ys = (torch::arange(hgt, x.options()) * 2 + 1) / static_cast<double>(hgt) - 1;
    auto xs = (torch::arange(wid, x.options()) * 2 + 1) / static_cast<double>(wid) - 1;
    auto mesh = torch::meshgrid({ys, xs}, "ij");
    auto pts = torch::stack({mesh[1], mesh[0], torch::ones_like(mesh[0])}, -1);  // [H, W, 3]
    auto src = torch::matmul(pts, hm.t());
    auto grid = (src.slice(-1, 0, 2) / src.slice(-1, 2, 3)).unsqueeze(0).expand({x.size(0), hgt, wid, 2});
    return F::grid_sample(x, grid,
                          F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(false));
}

inline torch::Tensor luminance(const torch::Tensor& x) {
    return 0.299 * x.select(1, 0) + 0.587 * x.select(1, 1) + 0.114 * x.select(1, 2);
}

// Hue rotation in YIQ space: luminance is kept and the chroma plane rotated by 2*pi*shift.
inline torch::Tensor rotate_hue(const torch::Tensor& x, double shift) {
    auto to_yiq = torch::tensor({0.299, 0.587, 0.114, 0.596, -0.274, -0.322, 0.211, -0.523, 0.312}, torch::kFloat64)
                      .view({3, 3});
    const double t = 2 * M_PI * shift;
    auto rot = torch::tensor({1.0, 0.0, 0.0, 0.0, std::cos(t), -std::sin(t), 0.0, std::sin(t), std::cos(t)},
                             torch::kFloat64)
                   .view({3, 3});
    auto m = torch::matmul(torch::linalg_inv(to_yiq), torch::matmul(rot, to_yiq)).to(x.scalar_type());
    return torch::einsum("ij,bjhw->bihw", {m, x});
}

inline torch::Tensor blur(const torch::Tensor& x, double sigma, int kernel) {
    auto c = torch::arange(kernel, x.options()) - (kernel - 1) / 2.0;
    auto g = torch::exp(-c.pow(2) / (2 * sigma * sigma));
    g = g / g.sum();
    auto k2 = torch::outer(g, g).expand({3, 1, kernel, kernel}).contiguous();
    const int p = kernel / 2;
    auto padded = F::pad(x, F::PadFuncOptions({p, p, p, p}).mode(torch::kReflect));
    return F::conv2d(padded, k2, F::Conv2dFuncOptions().groups(3));
}

inline const std::array<int, 64>& luma_table() {
    static const std::array<int, 64> t = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                                          14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                                          18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                                          49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
    return t;
}

inline const std::array<int, 64>& chroma_table() {
    static const std::array<int, 64> t = [] {
        std::array<int, 64> c{};
        c.fill(99);
        const int head[4][4] = {{17, 18, 24, 47}, {18, 21, 26, 66}, {24, 26, 56, 99}, {47, 66, 99, 99}};
        for (int r = 0; r < 4; ++r)
            for (int k = 0; k < 4; ++k) c[r * 8 + k] = head[r][k];
        return c;
    }();
    return t;
}

// IJG quality scaling.
inline torch::Tensor quant_table(const std::array<int, 64>& base, int quality) {
    const int q = std::clamp(quality, 1, 100);
    const int scale = q < 50 ? 5000 / q : 200 - 2 * q;
    auto t = torch::empty({8, 8}, torch::kFloat32);
    for (int i = 0; i < 64; ++i) t[i / 8][i % 8] = std::clamp((base[i] * scale + 50) / 100, 1, 255);
    return t;
}

inline torch::Tensor dct_matrix(torch::Dtype dtype) {
    auto d = torch::empty({8, 8}, torch::kFloat64);
    for (int k = 0; k < 8; ++k) {
        const double a = k == 0 ? std::sqrt(1.0 / 8) : std::sqrt(2.0 / 8);
        for (int n = 0; n < 8; ++n) d[k][n] = a * std::cos(M_PI * (2 * n + 1) * k / 16.0);
    }
    return d.to(dtype);
}

inline torch::Tensor straight_through_round(const torch::Tensor& x) { return x + (torch::round(x) - x).detach(); }

inline torch::Tensor jpeg(const torch::Tensor& x, int quality) {
    if (quality >= 100) return x;  // quantisation-free
    const auto b = x.size(0), h = x.size(2), w = x.size(3);
    const auto ph = (8 - h % 8) % 8, pw = (8 - w % 8) % 8;
    auto rgb = F::pad(x * 255.0, F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReplicate));
    auto to_ycc = torch::tensor({0.299, 0.587, 0.114, -0.168736, -0.331264, 0.5, 0.5, -0.418688, -0.081312},
                                x.options())
                      .view({3, 3});
    auto offset = torch::tensor({0.0, 128.0, 128.0}, x.options()).view({1, 3, 1, 1});
    auto ycc = torch::einsum("ij,bjhw->bihw", {to_ycc, rgb}) + offset - 128.0;
    const auto hh = h + ph, ww = w + pw;
    auto blocks = ycc.view({b, 3, hh / 8, 8, ww / 8, 8}).permute({0, 1, 2, 4, 3, 5});  // [..., 8, 8]
    auto d = dct_matrix(x.scalar_type());
    auto coef = torch::matmul(torch::matmul(d, blocks), d.t());
    auto qy = quant_table(luma_table(), quality).to(x.scalar_type());
    auto qc = quant_table(chroma_table(), quality).to(x.scalar_type());
    auto q = torch::stack({qy, qc, qc}).view({1, 3, 1, 1, 8, 8});
    coef = straight_through_round(coef / q) * q;
    auto back = torch::matmul(torch::matmul(d.t(), coef), d);
    back = back.permute({0, 1, 2, 4, 3, 5}).reshape({b, 3, hh, ww}) + 128.0 - offset;
    auto from_ycc = torch::linalg_inv(to_ycc.to(torch::kFloat64)).to(x.scalar_type());
    auto out = torch::einsum("ij,bjhw->bihw", {from_ycc, back}) / 255.0;
    return out.slice(2, 0, h).slice(3, 0, w);
}

}  // namespace detail

inline torch::Tensor apply(const torch::Tensor& img, const DistortionSpec& spec) {
    const bool unbatched = img.dim() == 3;
    auto x = detail::batched(img);
    if (x.size(1) != 3) throw ShapeMismatch("distortion expects 3 channels");
    if (spec.identity()) return img;

    bool warp_on = false;
    for (double w : spec.warp) warp_on = warp_on || w != 0.0;
    if (warp_on) x = detail::warp(x, spec.warp);

    if (spec.brightness_shift != 0) x = x + spec.brightness_shift;
    if (spec.contrast_scale != 1) {
        auto mean = x.mean({1, 2, 3}, true);
        x = (x - mean) * spec.contrast_scale + mean;
    }
    if (spec.saturation_scale != 1) {
        auto lum = detail::luminance(x).unsqueeze(1);
        x = lum + (x - lum) * spec.saturation_scale;
    }
    if (spec.hue_shift != 0) x = detail::rotate_hue(x, spec.hue_shift);

    if (spec.blur_sigma > 0) x = detail::blur(x, spec.blur_sigma, spec.blur_kernel);
    if (spec.noise_sigma > 0) {
        auto gen = at::make_generator<at::CPUGeneratorImpl>(spec.noise_seed);
        x = x + torch::randn(x.sizes(), gen, x.options().requires_grad(false)) * spec.noise_sigma;
    }
    if (spec.apply_jpeg) x = detail::jpeg(x, spec.jpeg_quality);
    x = torch::clamp(x, 0.0, 1.0);
    return unbatched ? x.squeeze(0) : x;
}

// Black squares at random positions until at least rate * H * W pixels are covered. The
// last square is sized to what is still missing, which bounds the overshoot.
inline torch::Tensor apply_tamper(const torch::Tensor& img, double rate, std::uint64_t seed) {
    if (rate < 0 || rate > 1) throw ConfigError("tamper rate must be in [0, 1]");
    if (rate == 0) return img;
    const auto h = img.size(-2), w = img.size(-1);
    auto mask = torch::ones({h, w}, torch::kFloat32);
    auto acc = mask.accessor<float, 2>();
    const double target = rate * static_cast<double>(h * w);
    const int max_side = std::max<int64_t>(2, std::min(h, w) / 8);
    std::mt19937_64 rng(seed);
    double covered = 0;
    while (covered < target) {
        const double missing = target - covered;
        int side = std::uniform_int_distribution<int>(std::max(1, max_side / 2), max_side)(rng);
        side = std::min<int>(side, static_cast<int>(std::ceil(std::sqrt(missing))));
        const auto y = std::uniform_int_distribution<int64_t>(0, h - side)(rng);
        const auto x = std::uniform_int_distribution<int64_t>(0, w - side)(rng);
        for (int64_t r = y; r < y + side; ++r) {
            for (int64_t c = x; c < x + side; ++c) {
                if (acc[r][c] != 0.0F) {
                    acc[r][c] = 0.0F;
                    covered += 1;
                }
            }
        }
    }
    return img * mask.to(img.scalar_type());
}

inline double covered_fraction(const torch::Tensor& tampered, const torch::Tensor& original) {
    auto changed = (tampered != original).any(-3).to(torch::kFloat64);
    return changed.mean().item<double>();
}

// Key-value text block, one "key = value" per line.
inline std::string to_text(const DistortionSpec& s) {
    std::ostringstream o;
    o.precision(17);
    o << "brightness_shift = " << s.brightness_shift << "\n"
      << "hue_shift = " << s.hue_shift << "\n"
      << "saturation_scale = " << s.saturation_scale << "\n"
      << "contrast_scale = " << s.contrast_scale << "\n"
      << "apply_jpeg = " << (s.apply_jpeg ? 1 : 0) << "\n"
      << "jpeg_quality = " << s.jpeg_quality << "\n"
      << "noise_sigma = " << s.noise_sigma << "\n"
      << "noise_seed = " << s.noise_seed << "\n"
      << "blur_sigma = " << s.blur_sigma << "\n"
      << "blur_kernel = " << s.blur_kernel << "\n"
      << "warp =";
    for (double w : s.warp) o << " " << w;
    o << "\n";
    return o.str();
}

inline DistortionSpec from_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string v) {
            const auto a = v.find_first_not_of(" \t"), b = v.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string{} : v.substr(a, b - a + 1);
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    auto get = [&](const char* k) -> const std::string& {
        auto it = kv.find(k);
        if (it == kv.end()) throw FormatError(std::string("distortion spec missing ") + k);
        return it->second;
    };
    try {
        DistortionSpec s;
        s.brightness_shift = std::stod(get("brightness_shift"));
        s.hue_shift = std::stod(get("hue_shift"));
        s.saturation_scale = std::stod(get("saturation_scale"));
        s.contrast_scale = std::stod(get("contrast_scale"));
        s.apply_jpeg = std::stoi(get("apply_jpeg")) != 0;
        s.jpeg_quality = std::stoi(get("jpeg_quality"));
        s.noise_sigma = std::stod(get("noise_sigma"));
        s.noise_seed = std::stoull(get("noise_seed"));
        s.blur_sigma = std::stod(get("blur_sigma"));
        s.blur_kernel = std::stoi(get("blur_kernel"));
        std::istringstream ws(get("warp"));
        for (double& w : s.warp) {
            if (!(ws >> w)) throw FormatError("warp needs 8 values");
        }
        return s;
    } catch (const std::logic_error&) {
        throw FormatError("malformed distortion spec");
    }
}

}  // namespace rmsteg::distortion
