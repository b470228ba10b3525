#pragma once

// Invertible QR code transition. The QR branch is rewritten by a stack of affine
// coupling blocks conditioned on the host branch; with the same conditioning image the
// inverse reproduces the QR branch exactly.
//
// Each block splits the QR channels into (a, b) and applies
//   a' = a + phi([b, h])
//   b' = b * exp(s(rho([a', h]))) + eta([a', h])       s(x) = s_max * tanh(x)
// and rolls the channels by one before the next block.

#include <string>
#include <vector>

#include <torch/torch.h>

#include "rmsteg/error.hpp"
#include "rmsteg/qr/module_matrix.hpp"
#include "rmsteg/qr/scan.hpp"

namespace rmsteg::iqrt {

namespace nn = torch::nn;

struct TransitionConfig {
    int blocks = 2;
    int hidden = 32;
    double scale_clamp = 2.0;
};

// Three-layer convolutional residual stack; the last layer starts at zero.
struct ConvSubnetImpl : nn::Module {
    nn::Conv2d in{nullptr}, mid{nullptr}, out{nullptr};

    ConvSubnetImpl(int in_ch, int hidden, int out_ch) {
        auto opts = [](int i, int o) { return nn::Conv2dOptions(i, o, 3).padding(1); };
        in = register_module("in", nn::Conv2d(opts(in_ch, hidden)));
        mid = register_module("mid", nn::Conv2d(opts(hidden, hidden)));
        out = register_module("out", nn::Conv2d(opts(hidden, out_ch)));
        torch::NoGradGuard guard;
        out->weight.zero_();
        out->bias.zero_();
    }

    torch::Tensor forward(const torch::Tensor& x) {
        auto h = torch::leaky_relu(in->forward(x), 0.2);
        h = h + torch::leaky_relu(mid->forward(h), 0.2);
        return out->forward(h);
    }
};
TORCH_MODULE(ConvSubnet);

struct CouplingBlockImpl : nn::Module {
    static constexpr int kSplit = 1;  // channels in the additive half
    ConvSubnet phi{nullptr}, rho{nullptr}, eta{nullptr};
    double scale_clamp;

    CouplingBlockImpl(int hidden, double clamp) : scale_clamp(clamp) {
        phi = register_module("phi", ConvSubnet(3 - kSplit + 3, hidden, kSplit));
        rho = register_module("rho", ConvSubnet(kSplit + 3, hidden, 3 - kSplit));
        eta = register_module("eta", ConvSubnet(kSplit + 3, hidden, 3 - kSplit));
    }

    torch::Tensor scale(const torch::Tensor& x) { return scale_clamp * torch::tanh(rho->forward(x)); }

    torch::Tensor forward(const torch::Tensor& qr, const torch::Tensor& host) {
        auto parts = qr.split_with_sizes({kSplit, 3 - kSplit}, 1);
        auto a = parts[0] + phi->forward(torch::cat({parts[1], host}, 1));
        auto cond = torch::cat({a, host}, 1);
        auto b = parts[1] * torch::exp(scale(cond)) + eta->forward(cond);
        return torch::cat({a, b}, 1);
    }

    torch::Tensor inverse(const torch::Tensor& qr, const torch::Tensor& host) {
        auto parts = qr.split_with_sizes({kSplit, 3 - kSplit}, 1);
        auto cond = torch::cat({parts[0], host}, 1);
        auto b = (parts[1] - eta->forward(cond)) * torch::exp(-scale(cond));
        auto a = parts[0] - phi->forward(torch::cat({b, host}, 1));
        return torch::cat({a, b}, 1);
    }
};
TORCH_MODULE(CouplingBlock);

inline void check_pair(const torch::Tensor& qr, const torch::Tensor& cond) {
    if (qr.sizes() != cond.sizes() || qr.dim() != 4 || qr.size(1) != 3) {
        throw ShapeMismatch("transition expects two [B, 3, H, W] tensors of equal shape");
    }
}

struct TransitionNetImpl : nn::Module {
    std::vector<CouplingBlock> blocks;

    explicit TransitionNetImpl(const TransitionConfig& cfg = {}) {
        for (int i = 0; i < cfg.blocks; ++i) {
            blocks.push_back(register_module("block" + std::to_string(i), CouplingBlock(cfg.hidden, cfg.scale_clamp)));
        }
    }

    // I_q* = f(I_q, I_h)
    torch::Tensor forward(const torch::Tensor& qr, const torch::Tensor& host) {
        check_pair(qr, host);
        auto x = qr;
        for (auto& block : blocks) x = block->forward(x, host).roll(1, 1);
        return x;
    }

    // I_q = f^-1(I_q*, conditioning); exact when conditioning equals the forward host.
    torch::Tensor inverse(const torch::Tensor& qr_star, const torch::Tensor& conditioning) {
        check_pair(qr_star, conditioning);
        auto x = qr_star;
        for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) x = (*it)->inverse(x.roll(-1, 1), conditioning);
        return x;
    }
};
TORCH_MODULE(TransitionNet);

// L_t = mean over modules of |qc(I_q*) xi - qc(I_q) xi|, where xi marks modules that
// binarize wrongly at threshold k. xi is recomputed from the current I_q* and carries no
// gradient. qr_star is [B, 3, S, S] at any S >= n; it is resampled to 5n x 5n first.
inline torch::Tensor transition_loss(const torch::Tensor& qr_star, const std::vector<qr::ModuleMatrix>& codes,
                                     double k = qr::kTransitionThreshold, int kernel = qr::kDefaultKernel) {
    if (qr_star.dim() != 4 || qr_star.size(0) != static_cast<int64_t>(codes.size())) {
        throw ShapeMismatch("transition_loss needs one module matrix per batch item");
    }
    const int n = codes.front().n;
    std::vector<torch::Tensor> truth;
    for (const auto& c : codes) {
        if (c.n != n) throw ShapeMismatch("mixed QR versions in one batch");
        truth.push_back(qr::matrix_to_tensor(c));
    }
    auto target = torch::stack(truth).to(qr_star.scalar_type());
    auto sampled = qr::scan_simulate(qr::to_native(qr_star, n, kernel), kernel).samples;
    auto xi = (qr::binarize(sampled.detach(), k).to(target.scalar_type()) - target).abs();
    // qc(I_q) of an exact render equals the module values themselves.
    return (sampled * xi - target * xi).abs().mean();
}

}  // namespace rmsteg::iqrt
