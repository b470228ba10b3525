#pragma once

// Rendering QR module matrices to images and the scanner simulation used both to
// constrain the transformed code and to read codes back out of restored images.
// Images are float tensors shaped [3, H, W] or [B, 3, H, W] with values in [0, 1].

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "rmsteg/error.hpp"
#include "rmsteg/qr/codec.hpp"
#include "rmsteg/qr/module_matrix.hpp"

namespace rmsteg::qr {

inline constexpr int kDefaultKernel = 5;
inline constexpr double kTransitionThreshold = 0.02;

struct ScanMap {
    torch::Tensor samples;  // [n, n] or [B, n, n]
    int kernel_size = kDefaultKernel;
    double threshold = kTransitionThreshold;
};

struct ErrorMap {
    int n = 0;
    std::vector<std::uint8_t> xi;  // 1 marks a wrongly transformed module

    int count() const {
        int c = 0;
        for (auto v : xi) c += v;
        return c;
    }
};

// Pixel span [lo, hi) covered by module i when n modules are resampled to `side` pixels
// with floor(x * n / side) nearest-neighbour mapping.
inline std::pair<int, int> module_span(int i, int n, int side) {
    const int lo = (i * side + n - 1) / n;
    const int hi = ((i + 1) * side + n - 1) / n;
    return {lo, hi};
}

inline torch::Tensor render(const ModuleMatrix& mm, int module_px, int out_size) {
    if (module_px < 1 || out_size < mm.n * module_px) {
        throw ShapeMismatch("render needs module_px >= 1 and out_size >= n * module_px");
    }
    auto grid = torch::empty({mm.n, mm.n}, torch::kFloat32);
    auto acc = grid.accessor<float, 2>();
    for (int r = 0; r < mm.n; ++r) {
        for (int c = 0; c < mm.n; ++c) acc[r][c] = mm.at(r, c) ? 1.0F : 0.0F;
    }
    const int native = mm.n * module_px;
    auto native_img = grid.repeat_interleave(module_px, 0).repeat_interleave(module_px, 1);
    auto index = torch::empty({out_size}, torch::kLong);
    auto ia = index.accessor<std::int64_t, 1>();
    for (int x = 0; x < out_size; ++x) ia[x] = static_cast<std::int64_t>(x) * native / out_size;
    auto out = native_img.index_select(0, index).index_select(1, index);
    return out.unsqueeze(0).expand({3, out_size, out_size}).contiguous();
}

// Nearest-neighbour resampling of a rendered code to native n*kernel resolution. Every
// native pixel of module i reads a source pixel inside module i's span, so a code rendered
// at any out_size >= n comes back module-exact. Identity when side == n * kernel.
inline torch::Tensor to_native(const torch::Tensor& img, int n, int kernel) {
    const auto side = img.size(-1);
    if (img.size(-2) != side) throw ShapeMismatch("to_native expects a square image");
    if (side < n) throw ShapeMismatch("image smaller than module count");
    const int native = n * kernel;
    auto index = torch::empty({native}, torch::kLong);
    auto ia = index.accessor<std::int64_t, 1>();
    for (int i = 0; i < n; ++i) {
        const auto [lo, hi] = module_span(i, n, static_cast<int>(side));
        for (int j = 0; j < kernel; ++j) ia[i * kernel + j] = lo + (j * (hi - lo)) / kernel;
    }
    return img.index_select(-1, index).index_select(-2, index);
}

inline torch::Tensor gaussian_kernel(int kernel_size, torch::Dtype dtype = torch::kFloat32) {
    const double sigma = kernel_size / 4.0;
    const double centre = (kernel_size - 1) / 2.0;
    auto coords = torch::arange(kernel_size, torch::kFloat64) - centre;
    auto g = torch::exp(-coords.pow(2) / (2.0 * sigma * sigma));
    auto k2 = torch::outer(g, g);
    return (k2 / k2.sum()).to(dtype);
}

// Gaussian-weighted sample of every kernel_size x kernel_size module on the channel-mean
// luminance. Differentiable with respect to the input pixels.
inline ScanMap scan_simulate(const torch::Tensor& img, int kernel_size = kDefaultKernel) {
    if (img.dim() < 3 || img.size(-3) != 3) throw ShapeMismatch("scan_simulate expects [..., 3, S, S]");
    const auto side = img.size(-1);
    if (img.size(-2) != side || kernel_size < 1 || side % kernel_size != 0) {
        throw ShapeMismatch("image side " + std::to_string(side) + " not divisible by kernel " +
                            std::to_string(kernel_size));
    }
    const auto n = side / kernel_size;
    auto lum = img.mean(-3);
    auto lead = lum.sizes().vec();
    lead.pop_back();
    lead.pop_back();
    auto shape = lead;
    shape.insert(shape.end(), {n, kernel_size, n, kernel_size});
    auto blocks = lum.reshape(shape);
    auto w = gaussian_kernel(kernel_size, img.scalar_type()).view({kernel_size, 1, kernel_size});
    auto samples = (blocks * w).sum({-1, -3});
    return {samples, kernel_size, kTransitionThreshold};
}

// Strict comparison: entries equal to k are black.
inline torch::Tensor binarize(const torch::Tensor& samples, double k) { return samples.gt(k).to(torch::kUInt8); }

inline ModuleMatrix grid_to_matrix(const torch::Tensor& bin, int version) {
    ModuleMatrix mm(version);
    auto b = bin.to(torch::kUInt8).contiguous();
    if (b.dim() != 2 || b.size(0) != mm.n || b.size(1) != mm.n) throw ShapeMismatch("binary grid size mismatch");
    auto acc = b.accessor<std::uint8_t, 2>();
    for (int r = 0; r < mm.n; ++r) {
        for (int c = 0; c < mm.n; ++c) mm.at(r, c) = acc[r][c] ? 1 : 0;
    }
    return mm;
}

inline torch::Tensor matrix_to_tensor(const ModuleMatrix& mm) {
    auto t = torch::empty({mm.n, mm.n}, torch::kFloat32);
    auto acc = t.accessor<float, 2>();
    for (int r = 0; r < mm.n; ++r) {
        for (int c = 0; c < mm.n; ++c) acc[r][c] = mm.at(r, c) ? 1.0F : 0.0F;
    }
    return t;
}

// Reads a module matrix out of an image of a code (any resolution >= n).
inline ModuleMatrix read_modules(const torch::Tensor& img, int version, double threshold,
                                 int kernel_size = kDefaultKernel) {
    const int n = side_for_version(version);
    auto native = to_native(img.detach().to(torch::kFloat32), n, kernel_size);
    return grid_to_matrix(binarize(scan_simulate(native, kernel_size).samples, threshold), version);
}

inline ErrorMap error_map(const torch::Tensor& transformed, const ModuleMatrix& original,
                          double k = kTransitionThreshold, int kernel_size = kDefaultKernel) {
    const auto read = read_modules(transformed, original.version, k, kernel_size);
    ErrorMap em{original.n, std::vector<std::uint8_t>(original.modules.size(), 0)};
    for (std::size_t i = 0; i < em.xi.size(); ++i) em.xi[i] = read.modules[i] != original.modules[i] ? 1 : 0;
    return em;
}

// Percentage of modules that differ, over all n^2 modules.
inline double emr(const ModuleMatrix& decoded, const ModuleMatrix& truth) {
    if (decoded.n != truth.n || decoded.modules.size() != truth.modules.size()) {
        throw ShapeMismatch("emr needs equally sized grids");
    }
    std::size_t diff = 0;
    for (std::size_t i = 0; i < truth.modules.size(); ++i) diff += decoded.modules[i] != truth.modules[i];
    return 100.0 * static_cast<double>(diff) / static_cast<double>(truth.modules.size());
}

inline double tra(const std::vector<bool>& success) {
    if (success.empty()) return 0.0;
    std::size_t ok = 0;
    for (bool s : success) ok += s ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(success.size());
}

// Success flag for one code: decoded and equal to the ground-truth message.
inline bool recovered(const std::optional<std::string>& decoded, const std::string& truth) {
    return decoded.has_value() && *decoded == truth;
}

}  // namespace rmsteg::qr
