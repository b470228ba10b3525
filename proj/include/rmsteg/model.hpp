#pragma once

// The three jointly trained networks and the encode / decode pipeline around them.

#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "rmsteg/attnflow.hpp"
#include "rmsteg/config.hpp"
#include "rmsteg/iqrt.hpp"
#include "rmsteg/itf.hpp"
#include "rmsteg/qr/codec.hpp"
#include "rmsteg/qr/scan.hpp"

namespace rmsteg {

struct RMStegImpl : torch::nn::Module {
    Config cfg;
    iqrt::TransitionNet iqrt{nullptr};
    itf::TokenFusion itf{nullptr};
    attnflow::AttnFlow attnflow{nullptr};

    explicit RMStegImpl(const Config& c) : cfg(c) {
        cfg.validate();
        // Parameter init draws from the global generator; seed it so a config fully fixes the weights.
        torch::manual_seed(cfg.seed);
        iqrt = register_module("iqrt", iqrt::TransitionNet(cfg.iqrt));
        itf = register_module("itf", itf::TokenFusion(cfg.tokens(), cfg.itf_on, cfg.seed));
        attnflow = register_module("attnflow", attnflow::AttnFlow(cfg.flow));
    }

    // Parameters of the enabled components only; disabled ones never reach the optimizer.
    std::vector<torch::Tensor> trainable_parameters() {
        std::vector<torch::Tensor> out;
        auto add = [&](torch::nn::Module& m) {
            for (auto& p : m.parameters()) {
                if (p.requires_grad()) out.push_back(p);
            }
        };
        if (cfg.iqrt_on) add(*iqrt);
        if (cfg.itf_on) add(*itf);
        add(*attnflow);
        return out;
    }

    torch::Tensor transition(const torch::Tensor& qr, const torch::Tensor& host) {
        return cfg.iqrt_on ? iqrt->forward(qr, host) : qr;
    }

    torch::Tensor transition_inverse(const torch::Tensor& qr_star, const torch::Tensor& conditioning) {
        return cfg.iqrt_on ? iqrt->inverse(qr_star, conditioning) : qr_star;
    }

    struct Encoded {
        torch::Tensor qr_star;
        torch::Tensor stego;
        torch::Tensor residual;
    };

    Encoded encode(const torch::Tensor& host, const torch::Tensor& qr) {
        auto qr_star = transition(qr, host);
        auto c = attnflow::conceal(attnflow, itf, host, qr_star);
        return {qr_star, c.stego, c.residual};
    }

    // Restored QR image I_q-hat from a (possibly distorted) stego image.
    torch::Tensor decode(const torch::Tensor& stego, uint64_t rng_seed) {
        auto restored_star = attnflow::reveal(attnflow, itf, stego, rng_seed);
        return transition_inverse(restored_star, stego);
    }
};
TORCH_MODULE(RMSteg);

inline torch::Tensor render_code(const qr::ModuleMatrix& mm, int side) { return qr::render(mm, 1, side); }

struct ReadResult {
    qr::ModuleMatrix modules;
    std::optional<std::string> message;
};

inline ReadResult read_code(const torch::Tensor& restored, const Config& cfg) {
    auto img = restored.dim() == 4 ? restored.squeeze(0) : restored;
    auto mm = qr::read_modules(img, cfg.qr_version, cfg.read_threshold, cfg.scan_kernel);
    auto msg = qr::decode_matrix(mm);
    return {std::move(mm), std::move(msg)};
}

}  // namespace rmsteg
