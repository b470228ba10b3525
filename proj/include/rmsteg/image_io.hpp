#pragma once

// 8-bit image files <-> float tensors [3, H, W] in [0, 1], RGB order.

#include <string>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "rmsteg/error.hpp"

namespace rmsteg::io {

inline torch::Tensor from_mat(const cv::Mat& bgr) {
    cv::Mat rgb;
    if (bgr.channels() == 1) cv::cvtColor(bgr, rgb, cv::COLOR_GRAY2RGB);
    else if (bgr.channels() == 4) cv::cvtColor(bgr, rgb, cv::COLOR_BGRA2RGB);
    else cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    if (rgb.depth() != CV_8U) rgb.convertTo(rgb, CV_8U, rgb.depth() == CV_16U ? 1.0 / 257 : 1.0);
    auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
    return t.permute({2, 0, 1}).to(torch::kFloat32).div_(255.0).contiguous();
}

inline torch::Tensor load_image(const std::string& path) {
    cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (m.empty()) throw FormatError("cannot read image " + path);
    return from_mat(m);
}

// The one place pixels are rounded to 8 bits.
inline torch::Tensor to_u8(const torch::Tensor& img) {
    auto t = img.detach().to(torch::kFloat32);
    if (t.dim() == 4 && t.size(0) == 1) t = t.squeeze(0);
    if (t.dim() != 3 || t.size(0) != 3) throw ShapeMismatch("image must be [3, H, W]");
    return t.clamp(0, 1).mul(255.0).round().to(torch::kUInt8);
}

// 8-bit round trip without touching the disk.
inline torch::Tensor quantize(const torch::Tensor& img) { return to_u8(img).to(torch::kFloat32).div(255.0); }

inline void save_image(const torch::Tensor& img, const std::string& path) {
    auto hwc = to_u8(img).permute({1, 2, 0}).contiguous();
    cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3, hwc.data_ptr());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    if (!cv::imwrite(path, bgr)) throw FormatError("cannot write image " + path);
}

// Area-averaged downscale / bilinear upscale (used when a file does not match the model resolution).
inline torch::Tensor resize(const torch::Tensor& img, int side) {
    if (img.size(-1) == side && img.size(-2) == side) return img;
    auto x = img.dim() == 3 ? img.unsqueeze(0) : img;
    namespace F = torch::nn::functional;
    auto opts = F::InterpolateFuncOptions().size(std::vector<int64_t>{side, side});
    if (x.size(-1) > side) opts.mode(torch::kArea);
    else opts.mode(torch::kBilinear).align_corners(false);
    auto out = F::interpolate(x, opts);
    return img.dim() == 3 ? out.squeeze(0) : out;
}

}  // namespace rmsteg::io
